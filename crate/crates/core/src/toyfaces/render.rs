//! Procedural face renderer.
//!
//! Geometry is specified on a 32-unit grid and sampled at pixel centres, so
//! the 64 px rendering is the same drawing at twice the density. Colours are
//! quantised to multiples of 1/255, which makes PNG storage lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use super::attributes::{AttributeVector, Gender, Glasses, HairColor, HairLength, Hat, SkinTone, Smile};
use crate::error::{Error, Result};

pub const SUPPORTED_RESOLUTIONS: &str = "32, 64";

/// Part ids written into label maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Part {
    Background = 0,
    Skin = 1,
    Hair = 2,
    Glasses = 3,
    Mouth = 4,
    Hat = 5,
}

impl Part {
    pub const ALL: [Part; 6] = [Part::Background, Part::Skin, Part::Hair, Part::Glasses, Part::Mouth, Part::Hat];
    pub const COUNT: usize = 6;

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Part> {
        Part::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Background => "background",
            Part::Skin => "skin",
            Part::Hair => "hair",
            Part::Glasses => "glasses",
            Part::Mouth => "mouth",
            Part::Hat => "hat",
        }
    }

    pub fn from_name(s: &str) -> Option<Part> {
        Part::ALL.iter().copied().find(|p| p.name() == s)
    }
}

pub type Rgb = [f64; 3];

pub fn skin_rgb(s: SkinTone) -> Rgb {
    match s {
        SkinTone::Light => [0.96, 0.84, 0.72],
        SkinTone::Tan => [0.80, 0.60, 0.42],
        SkinTone::Dark => [0.42, 0.28, 0.18],
    }
}

pub fn hair_rgb(h: HairColor) -> Rgb {
    match h {
        HairColor::Black => [0.08, 0.07, 0.07],
        HairColor::Blonde => [0.96, 0.84, 0.40],
        HairColor::Red => [0.78, 0.24, 0.10],
        HairColor::Gray => [0.64, 0.64, 0.66],
    }
}

pub const GLASSES_RGB: Rgb = [0.12, 0.12, 0.18];
pub const MOUTH_RGB: Rgb = [0.95, 0.22, 0.45];
pub const HAT_RGB: Rgb = [0.18, 0.30, 0.62];

pub fn background_rgb(hue: f64) -> Rgb {
    hsv_to_rgb(hue, 0.5, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// The colour the renderer assigns to a part (untinted).
pub fn part_rgb(part: Part, attrs: &AttributeVector) -> Rgb {
    match part {
        Part::Background => background_rgb(attrs.background_hue),
        Part::Skin => skin_rgb(attrs.skin_tone),
        Part::Hair => hair_rgb(attrs.hair_color),
        Part::Glasses => GLASSES_RGB,
        Part::Mouth => MOUTH_RGB,
        Part::Hat => HAT_RGB,
    }
}

/// Snap to the nearest multiple of 1/255.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn check_resolution(res: usize) -> Result<()> {
    match res {
        32 | 64 => Ok(()),
        _ => Err(Error::UnsupportedResolution(res, SUPPORTED_RESOLUTIONS)),
    }
}

/// Grid-unit placement of every part for one (attrs, jitter) pair.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub cx: f64,
    pub cy: f64,
    pub attrs: AttributeVector,
}

const FACE_RX: f64 = 7.5;
const FACE_RY: f64 = 9.0;
const HAIRLINE: f64 = 5.0;
const SHORT_CAP: (f64, f64) = (8.8, 10.3);
const LONG_CAP: (f64, f64) = (10.0, 11.5);
const LONG_DROP: f64 = 8.0;
const EYE_DX: f64 = 3.5;
const EYE_DY: f64 = -1.5;
const RING: (f64, f64) = (1.6, 2.6);
const MOUTH_DY: f64 = 5.0;
const MOUTH_HALF: f64 = 0.8;
const HAT_HEIGHT: f64 = 4.5;
const HAT_HALF: f64 = 6.5;
const BRIM_HALF: f64 = 8.5;
const SCALP_TINT: f64 = 0.45;
const SCALP_RAMP_START: f64 = 1.0;
const SCALP_RAMP: f64 = 8.0;

impl Layout {
    /// Face centre at (16, 17) shifted by a jitter of -1, 0 or +1 grid units per axis.
    pub fn new(attrs: &AttributeVector, jitter_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
        let dx = rng.gen_range(-1i32..=1) as f64;
        let dy = rng.gen_range(-1i32..=1) as f64;
        Layout { cx: 16.0 + dx, cy: 17.0 + dy, attrs: *attrs }
    }

    /// Unjittered layout.
    pub fn centered(attrs: &AttributeVector) -> Self {
        Layout { cx: 16.0, cy: 17.0, attrs: *attrs }
    }

    fn face_half_width(&self, y: f64) -> Option<f64> {
        let t = (y - self.cy) / FACE_RY;
        if t.abs() > 1.0 {
            return None;
        }
        let base = FACE_RX * (1.0 - t * t).sqrt();
        if t <= 0.0 {
            return Some(base);
        }
        let taper = match self.attrs.gender_presentation {
            Gender::Feminine => 0.6,
            Gender::Masculine => -0.2,
        };
        Some(base * (1.0 - taper * t))
    }

    fn in_face(&self, x: f64, y: f64) -> bool {
        self.face_half_width(y).is_some_and(|hw| (x - self.cx).abs() <= hw)
    }

    fn hairline(&self) -> f64 {
        self.cy - HAIRLINE
    }

    fn in_ellipse(&self, x: f64, y: f64, (rx, ry): (f64, f64)) -> bool {
        let (u, v) = ((x - self.cx) / rx, (y - self.cy) / ry);
        u * u + v * v <= 1.0
    }

    fn in_cap(&self, x: f64, y: f64) -> bool {
        let radii = match self.attrs.hair_length {
            HairLength::Bald => return false,
            HairLength::Short => SHORT_CAP,
            HairLength::Long => LONG_CAP,
        };
        y < self.hairline() && self.in_ellipse(x, y, radii)
    }

    fn in_long_back(&self, x: f64, y: f64) -> bool {
        self.attrs.hair_length == HairLength::Long
            && y >= self.hairline()
            && y <= self.cy + LONG_DROP
            && (x - self.cx).abs() <= LONG_CAP.0
    }

    /// Grid y of the topmost head pixel row (hair or scalp).
    pub fn head_top(&self) -> f64 {
        self.cy
            - match self.attrs.hair_length {
                HairLength::Bald => FACE_RY,
                HairLength::Short => SHORT_CAP.1,
                HairLength::Long => LONG_CAP.1,
            }
    }

    fn in_hat(&self, x: f64, y: f64) -> bool {
        if self.attrs.hat == Hat::None {
            return false;
        }
        let top = self.head_top();
        let dx = (x - self.cx).abs();
        let crown = y >= top - HAT_HEIGHT && y < top - 1.2 && dx <= HAT_HALF;
        let brim = y >= top - 1.2 && y < top - 0.2 && dx <= BRIM_HALF;
        crown || brim
    }

    fn in_glasses(&self, x: f64, y: f64) -> bool {
        if self.attrs.glasses == Glasses::None {
            return false;
        }
        let ey = self.cy + EYE_DY;
        for side in [-1.0, 1.0] {
            let d = ((x - (self.cx + side * EYE_DX)).powi(2) + (y - ey).powi(2)).sqrt();
            if (RING.0..=RING.1).contains(&d) {
                return true;
            }
        }
        (x - self.cx).abs() <= 0.9 && (y - ey).abs() <= 0.5
    }

    /// Grid-unit box `(x0, y0, x1, y1)` containing everything the glasses can touch.
    pub fn eye_box(&self) -> (f64, f64, f64, f64) {
        let ey = self.cy + EYE_DY;
        (
            self.cx - EYE_DX - RING.1,
            ey - RING.1,
            self.cx + EYE_DX + RING.1,
            ey + RING.1,
        )
    }

    fn in_mouth(&self, x: f64, y: f64) -> bool {
        let my = self.cy + MOUTH_DY;
        let dx = x - self.cx;
        match self.attrs.smile {
            Smile::Neutral => dx.abs() <= 3.0 && (y - my).abs() <= MOUTH_HALF,
            Smile::Smiling => {
                let curve = my + 1.5 - 0.2 * dx * dx;
                dx.abs() <= 3.5 && (y - curve).abs() <= MOUTH_HALF
            }
        }
    }

    /// Part covering grid point (x, y); later parts in draw order win.
    pub fn part_at(&self, x: f64, y: f64) -> Part {
        if self.in_hat(x, y) {
            Part::Hat
        } else if self.in_glasses(x, y) {
            Part::Glasses
        } else if self.in_mouth(x, y) && self.in_face(x, y) {
            Part::Mouth
        } else if self.in_cap(x, y) {
            Part::Hair
        } else if self.in_face(x, y) {
            Part::Skin
        } else if self.in_long_back(x, y) {
            Part::Hair
        } else {
            Part::Background
        }
    }

    /// Colour at a grid point. Bald heads carry a soft hair-coloured tint
    /// so hair colour stays visible; it ramps up over eight rows, slowly
    /// enough to stay below the sketch edge floor.
    pub fn color_at(&self, x: f64, y: f64) -> (Part, Rgb) {
        let part = self.part_at(x, y);
        let mut rgb = part_rgb(part, &self.attrs);
        if part == Part::Skin && self.attrs.hair_length == HairLength::Bald {
            let a = SCALP_TINT * ((self.cy - SCALP_RAMP_START - y) / SCALP_RAMP).clamp(0.0, 1.0);
            let h = hair_rgb(self.attrs.hair_color);
            for c in 0..3 {
                rgb[c] = (1.0 - a) * rgb[c] + a * h[c];
            }
        }
        (part, rgb)
    }
}

/// Grid coordinate of pixel centre `p` at resolution `res`.
pub fn grid_coord(p: usize, res: usize) -> f64 {
    (p as f64 + 0.5) * 32.0 / res as f64
}

fn rasterize(layout: &Layout, res: usize) -> (Vec<f64>, Vec<u8>) {
    let mut img = Vec::with_capacity(res * res * 3);
    let mut labels = Vec::with_capacity(res * res);
    for py in 0..res {
        let y = grid_coord(py, res);
        for px in 0..res {
            let x = grid_coord(px, res);
            let (part, rgb) = layout.color_at(x, y);
            img.extend(rgb.iter().map(|&v| quantize(v)));
            labels.push(part.id());
        }
    }
    (img, labels)
}

/// Render to an `[res, res, 3]` tensor with values in [0, 1].
pub fn render(attrs: &AttributeVector, res: usize, jitter_seed: u64) -> Result<Tensor> {
    check_resolution(res)?;
    let (img, _) = rasterize(&Layout::new(attrs, jitter_seed), res);
    Ok(Tensor::new(vec![res, res, 3], img))
}

/// Per-pixel part ids from the same geometry [`render`] draws, row-major.
pub fn extract_label_map(attrs: &AttributeVector, res: usize, jitter_seed: u64) -> Result<Vec<u8>> {
    check_resolution(res)?;
    Ok(rasterize(&Layout::new(attrs, jitter_seed), res).1)
}

/// Image and label map of the unjittered layout.
pub fn render_centered(attrs: &AttributeVector, res: usize) -> Result<(Tensor, Vec<u8>)> {
    check_resolution(res)?;
    let (img, labels) = rasterize(&Layout::centered(attrs), res);
    Ok((Tensor::new(vec![res, res, 3], img), labels))
}

/// Pixelwise mean of the image over all nine jitter offsets: the
/// expectation a decoder regressing onto jittered renders converges to.
pub fn render_jitter_mean(attrs: &AttributeVector, res: usize) -> Result<Tensor> {
    check_resolution(res)?;
    let mut acc = vec![0.0; res * res * 3];
    for dy in -1..=1 {
        for dx in -1..=1 {
            let layout = Layout { cx: 16.0 + dx as f64, cy: 17.0 + dy as f64, attrs: *attrs };
            acc.iter_mut().zip(rasterize(&layout, res).0).for_each(|(a, v)| *a += v / 9.0);
        }
    }
    Ok(Tensor::new(vec![res, res, 3], acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::attributes::{sample_attributes, Slot};

    #[test]
    fn rejects_unsupported_resolution() {
        let a = sample_attributes(0);
        assert!(matches!(render(&a, 48, 0), Err(Error::UnsupportedResolution(48, _))));
        assert!(extract_label_map(&a, 16, 0).is_err());
    }

    #[test]
    fn values_are_quantized() {
        let img = render(&sample_attributes(5), 32, 9).unwrap();
        for &v in img.data() {
            assert_eq!(quantize(v), v);
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        let g = hsv_to_rgb(1.0 / 3.0, 1.0, 1.0);
        assert!((g[1] - 1.0).abs() < 1e-12 && g[0].abs() < 1e-12);
    }

    #[test]
    fn jitter_moves_at_most_one_grid_unit() {
        let a = sample_attributes(2);
        for s in 0..50 {
            let l = Layout::new(&a, s);
            assert!((l.cx - 16.0).abs() <= 1.0 && (l.cy - 17.0).abs() <= 1.0);
        }
    }

    #[test]
    fn hat_never_touches_hair_or_leaves_canvas() {
        for len in 0..3 {
            let a = sample_attributes(4).with(Slot::Hat, 1).with(Slot::HairLength, len);
            for j in 0..20 {
                let l = Layout::new(&a, j);
                assert!(l.head_top() - HAT_HEIGHT >= 0.0);
            }
        }
    }
}
