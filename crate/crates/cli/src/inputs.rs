//! Decoding user-supplied images, sketches, label maps and masks.

use wspace_core::encoders::Mask;
use wspace_core::toyfaces::dataset::one_hot_labels;
use wspace_core::toyfaces::Part;
use wspace_core::{Error, Result};
use wspace_tensor::Tensor;

/// `img` must be `[r, r, 3]`.
pub fn check_image(img: &Tensor, r: usize) -> Result<()> {
    if img.shape() != [r, r, 3] {
        return Err(Error::shape([r, r, 3], img.shape()));
    }
    Ok(())
}

fn check_gray(h: usize, w: usize, r: usize) -> Result<()> {
    if (h, w) != (r, r) {
        return Err(Error::shape([r, r], [h, w]));
    }
    Ok(())
}

/// Nonzero pixels become 1.
pub fn mask_from_gray(values: &[u8], h: usize, w: usize, r: usize) -> Result<Mask> {
    check_gray(h, w, r)?;
    Mask::new(r, values.iter().map(|&v| u8::from(v > 0)).collect())
}

/// 0/255 bytes for PNG output.
pub fn mask_to_gray(m: &Mask) -> Vec<u8> {
    m.data().iter().map(|&v| v * 255).collect()
}

/// `[r, r, 1]` in [0, 1].
pub fn sketch_from_gray(values: &[u8], h: usize, w: usize, r: usize) -> Result<Tensor> {
    check_gray(h, w, r)?;
    Ok(Tensor::new(vec![r, r, 1], values.iter().map(|&v| v as f64 / 255.0).collect()))
}

/// Pixel values are part ids; returns the one-hot `[r, r, parts]` tensor.
pub fn labels_from_gray(values: &[u8], h: usize, w: usize, r: usize) -> Result<Tensor> {
    check_gray(h, w, r)?;
    if let Some(&bad) = values.iter().find(|&&v| v as usize >= Part::COUNT) {
        return Err(Error::InvalidArgument(format!("label value {bad} is not a part id (0..{})", Part::COUNT)));
    }
    Ok(one_hot_labels(values, r))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_round_trip_through_gray() {
        let vals: Vec<u8> = (0..16).map(|i| if i % 3 == 0 { 200 } else { 0 }).collect();
        let m = mask_from_gray(&vals, 4, 4, 4).unwrap();
        let back = mask_from_gray(&mask_to_gray(&m), 4, 4, 4).unwrap();
        assert_eq!(m, back);
        assert!(mask_from_gray(&vals, 4, 4, 8).is_err());
    }

    #[test]
    fn label_ids_are_checked() {
        assert!(labels_from_gray(&[0, 1, 2, 5], 2, 2, 2).is_ok());
        assert!(labels_from_gray(&[0, 1, 2, 6], 2, 2, 2).is_err());
    }
}
