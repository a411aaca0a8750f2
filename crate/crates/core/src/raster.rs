//! RGB images and single-channel planes in `[0, 1]`, plus PNG/JPEG I/O.

use std::fs;
use std::path::Path;

use image::{imageops, DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Smallest side accepted for an [`Image`]; mask smoothing needs one full 8×8 block.
pub const MIN_SIDE: usize = 8;

/// H×W×3 raster, red/green/blue interleaved, every value finite and in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

fn check_values(data: &[f32], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "{what} has a non-finite value at element {i}"
        )));
    }
    if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Validation(format!(
            "{what} value {} at element {i} is outside [0, 1]",
            data[i]
        )));
    }
    Ok(())
}

fn check_size(height: usize, width: usize, what: &str) -> Result<()> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::Validation(format!(
            "{what} is {height}x{width}; both sides must be at least {MIN_SIDE}"
        )));
    }
    Ok(())
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        check_size(height, width, "image")?;
        if data.len() != height * width * 3 {
            return Err(Error::shape("image data", height * width * 3, data.len()));
        }
        check_values(&data, "image")?;
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Image::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Image::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// 1×H×W×3 tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor {
            n: 1,
            h: self.height,
            w: self.width,
            c: 3,
            data: self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        }
    }

    /// Batch item `i` of a 3-channel tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, i: usize) -> Result<Self> {
        if t.c != 3 {
            return Err(Error::shape("image tensor channels", 3, t.c));
        }
        let data = t
            .item(i)
            .iter()
            .map(|v| {
                let v = v.as_f64();
                if v.is_nan() {
                    f32::NAN
                } else {
                    v.clamp(0.0, 1.0) as f32
                }
            })
            .collect();
        Image::new(t.h, t.w, data)
    }

    /// Bilinear (triangle filter) resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
        let out = imageops::resize(
            &buf,
            width as u32,
            height as u32,
            imageops::FilterType::Triangle,
        );
        let data = out
            .into_raw()
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Image::new(height, width, data)
    }

    /// Quantizes to 16 bits per channel and back, exactly as a 16-bit PNG stores it.
    pub fn quantized16(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| quantize16(v) as f32 / 65535.0)
                .collect(),
        }
    }
}

fn quantize16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16
}

fn quantize8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) as f64 * 255.0).round() as u8
}

/// H×W single-channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("plane data", height * width, data.len()));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Plane {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Decodes PNG/JPEG; 8- and 16-bit rasters are divided by the type maximum.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = match img {
        DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_) => {
            let mut buf = img.to_rgb32f();
            buf.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            buf
        }
        other => other.to_rgb32f(),
    };
    let (w, h) = rgb.dimensions();
    Image::new(h as usize, w as usize, rgb.into_raw()).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        e => e,
    })
}

fn write_buffer(path: &Path, img: DynamicImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_png16(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u16> = img.data.iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer");
    write_buffer(path, DynamicImage::ImageRgb16(buf))
}

pub fn save_png8(path: &Path, img: &Image) -> Result<()> {
    let raw: Vec<u8> = img.data.iter().map(|&v| quantize8(v)).collect();
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, raw).expect("sized buffer");
    write_buffer(path, DynamicImage::ImageRgb8(buf))
}

/// Single-channel 16-bit PNG; values are clamped into `[0, 1]`.
pub fn save_plane_png16(path: &Path, plane: &Plane) -> Result<()> {
    let raw: Vec<u16> = plane.data.iter().map(|&v| quantize16(v)).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(plane.width as u32, plane.height as u32, raw).expect("sized buffer");
    write_buffer(path, DynamicImage::ImageLuma16(buf))
}

/// Image files directly inside `dir` with a supported extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_non_finite_values() {
        let mut data = vec![0.5f32; 8 * 8 * 3];
        data[5] = f32::NAN;
        assert!(Image::new(8, 8, data.clone()).unwrap_err().is_validation());
        data[5] = 1.5;
        assert!(Image::new(8, 8, data.clone()).is_err());
        data[5] = 0.25;
        assert!(Image::new(8, 8, data).is_ok());
        assert!(Image::new(7, 8, vec![0.0; 7 * 8 * 3]).is_err());
    }

    #[test]
    fn png16_roundtrip_is_the_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(9, 11, |y, x| {
            [y as f32 / 9.0, x as f32 / 11.0, ((x * y) % 7) as f32 / 7.0]
        })
        .unwrap();
        let path = dir.path().join("a.png");
        save_png16(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img.quantized16());
    }

    #[test]
    fn png8_values_normalize_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(8, 8, [1.0, 0.0, 128.0 / 255.0]).unwrap();
        let path = dir.path().join("b.png");
        save_png8(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.pixel(3, 3), [1.0, 0.0, 128.0 / 255.0]);
    }

    #[test]
    fn resize_keeps_constants() {
        let img = Image::filled(20, 30, [0.2, 0.4, 0.6]).unwrap();
        let r = img.resize(16, 8).unwrap();
        assert_eq!((r.height(), r.width()), (16, 8));
        for v in r.data().chunks(3) {
            assert!((v[0] - 0.2).abs() < 1e-6 && (v[2] - 0.6).abs() < 1e-6);
        }
    }
}
