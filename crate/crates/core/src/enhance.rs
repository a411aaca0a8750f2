//! Inference on images of arbitrary size.

use crate::error::Result;
use crate::network::{forward, ModelParams, SIZE_MULTIPLE};
use crate::raster::Image;
use crate::tensor::Tensor;

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * (n - 1).max(1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Pads bottom and right by reflection so both sides are multiples of
/// [`SIZE_MULTIPLE`].
pub fn pad_to_multiple(img: &Image) -> Image {
    let round = |v: usize| v.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
    let (h, w) = (round(img.height()), round(img.width()));
    if (h, w) == (img.height(), img.width()) {
        return img.clone();
    }
    Image::from_fn(h, w, |y, x| {
        img.pixel(
            reflect(y as isize, img.height()),
            reflect(x as isize, img.width()),
        )
    })
    .expect("padded image is at least as large as the source")
}

fn crop(img: &Image, height: usize, width: usize) -> Image {
    Image::from_fn(height, width, |y, x| img.pixel(y, x)).expect("crop of a valid image")
}

/// Every stage output for `img`, cropped back to its size and clamped to
/// `[0, 1]`; the last element is the enhanced image.
pub fn enhance_stages(model: &ModelParams<f32>, img: &Image) -> Result<Vec<Image>> {
    let padded = pad_to_multiple(img);
    let x: Tensor<f32> = padded.to_tensor();
    let outputs = forward(&x, model)?;
    outputs
        .outputs
        .iter()
        .map(|t| Ok(crop(&Image::from_tensor(t, 0)?, img.height(), img.width())))
        .collect()
}

pub fn enhance(model: &ModelParams<f32>, img: &Image) -> Result<Image> {
    Ok(enhance_stages(model, img)?
        .pop()
        .expect("at least one stage"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x| [y as f32 / h as f32, x as f32 / w as f32, 0.5]).unwrap()
    }

    #[test]
    fn padding_reflects_and_rounds_up() {
        let img = ramp(10, 13);
        let p = pad_to_multiple(&img);
        assert_eq!((p.height(), p.width()), (16, 16));
        assert_eq!(p.pixel(10, 0), img.pixel(8, 0));
        assert_eq!(p.pixel(0, 13), img.pixel(0, 11));
        assert_eq!(p.pixel(3, 4), img.pixel(3, 4));
        assert_eq!(pad_to_multiple(&ramp(16, 8)), ramp(16, 8));
    }

    #[test]
    fn identity_network_returns_the_input() {
        let mut m = ModelParams::<f32>::zeros(ArchConfig {
            stages: 2,
            channels: 4,
            inner_channels: 2,
            weight_sharing: true,
        })
        .unwrap();
        m.zero_residual_heads();
        let img = ramp(12, 9);
        let stages = enhance_stages(&m, &img).unwrap();
        assert_eq!(stages.len(), 2);
        assert_eq!(stages[1], img);
    }
}
