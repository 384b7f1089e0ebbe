//! Lossless PNG encoding of image tensors and single-channel maps.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use wspace_tensor::Tensor;

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_image(img: &Tensor) -> Result<RgbImage> {
    let s = img.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("[h, w, 3]", s));
    }
    let bytes = img.data().iter().map(|&v| to_u8(v)).collect();
    Ok(RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer sized from shape"))
}

pub fn encode_rgb_png(img: &Tensor) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    rgb_image(img)?
        .write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decode any PNG to an `[h, w, 3]` tensor in [0, 1].
pub fn decode_rgb_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data))
}

pub fn encode_gray_png(values: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    if values.len() != h * w {
        return Err(Error::shape(h * w, values.len()));
    }
    let img = GrayImage::from_raw(w as u32, h as u32, values.to_vec()).expect("buffer sized from shape");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decode a PNG as raw single-channel bytes `(values, h, w)`.
pub fn decode_gray_png(bytes: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok((img.into_raw(), h as usize, w as usize))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_rgb(path: &Path, img: &Tensor) -> Result<()> {
    write_file(path, &encode_rgb_png(img)?)
}

pub fn load_rgb(path: &Path) -> Result<Tensor> {
    decode_rgb_png(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_rgb_round_trips_exactly() {
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        let t = Tensor::new(vec![4, 5, 3], data);
        let back = decode_rgb_png(&encode_rgb_png(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn gray_round_trip() {
        let v: Vec<u8> = (0..12).collect();
        let (back, h, w) = decode_gray_png(&encode_gray_png(&v, 3, 4).unwrap()).unwrap();
        assert_eq!((back, h, w), (v, 3, 4));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        assert!(encode_rgb_png(&Tensor::zeros(vec![2, 2, 1])).is_err());
    }
}
