//! sRGB (D65) to CIE Lab lightness.

use crate::error::Result;
use crate::raster::{Image, Plane};

/// CIE L* of an image divided by 100, so values lie in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Luminance(pub Plane);

impl Luminance {
    pub fn plane(&self) -> &Plane {
        &self.0
    }
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// L* / 100 of a single sRGB triple. The white point's Y is 1, so only
/// relative luminance enters.
pub fn lightness(rgb: [f32; 3]) -> f64 {
    let [r, g, b] = rgb.map(|v| srgb_to_linear(v as f64));
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let l = if y > EPSILON {
        116.0 * y.cbrt() - 16.0
    } else {
        KAPPA * y
    };
    (l / 100.0).clamp(0.0, 1.0)
}

pub fn rgb_to_luminance(img: &Image) -> Result<Luminance> {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| lightness([p[0], p[1], p[2]]) as f32)
        .collect();
    Ok(Luminance(Plane::new(img.height(), img.width(), data)?))
}
