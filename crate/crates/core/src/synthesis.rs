//! Paired training data: a well-lit image is darkened by a smooth
//! multiplicative illumination field, `degraded = clean · mask` per channel.
//!
//! The mask is built from CIE lightness: pixels brighter than a threshold keep
//! full illumination, darker ones get `max(L, floor)^γ`; the result is then
//! smoothed with an 8× block-average / bilinear pyramid.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::distributions::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{rgb_to_luminance, Luminance};
use crate::error::{Error, Result};
use crate::raster::{list_images, load_image, save_plane_png16, save_png16, Image, Plane};

/// Block size of the smoothing pyramid.
pub const SMOOTH_FACTOR: usize = 8;

/// Multiplicative illumination field with every value in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationMask(Plane);

impl IlluminationMask {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(v) = plane
            .data
            .iter()
            .find(|v| !v.is_finite() || **v <= 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "illumination mask value {v} outside (0, 1]"
            )));
        }
        Ok(IlluminationMask(plane))
    }

    pub fn uniform(height: usize, width: usize, v: f32) -> Result<Self> {
        IlluminationMask::new(Plane::filled(height, width, v))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }
    pub fn height(&self) -> usize {
        self.0.height
    }
    pub fn width(&self) -> usize {
        self.0.width
    }
    pub fn data(&self) -> &[f32] {
        &self.0.data
    }
}

/// How γ shapes the dark-region mask value of a lightness `v`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaConvention {
    /// `v^γ`
    #[default]
    Power,
    /// `v^(1/γ)`
    InversePower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub thresholds: Vec<f64>,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub luminance_floor: f64,
    pub gamma_convention: GammaConvention,
    pub rng_seed: u64,
    /// Square side clean images are resized to before degradation.
    pub image_size: usize,
    pub save_masks: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            thresholds: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            gamma_min: 0.1,
            gamma_max: 0.5,
            luminance_floor: 1e-3,
            gamma_convention: GammaConvention::Power,
            rng_seed: 0,
            image_size: 256,
            save_masks: false,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::Validation(
                "at least one threshold is required".into(),
            ));
        }
        for &t in &self.thresholds {
            check_threshold(t)?;
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(format!(
                "thresholds must be strictly increasing: {:?}",
                self.thresholds
            )));
        }
        check_gamma(self.gamma_min)?;
        check_gamma(self.gamma_max)?;
        if self.gamma_min > self.gamma_max {
            return Err(Error::Validation(format!(
                "empty gamma range [{}, {}]",
                self.gamma_min, self.gamma_max
            )));
        }
        if !(self.luminance_floor > 0.0 && self.luminance_floor < 1.0) {
            return Err(Error::Validation(format!(
                "luminance floor {} must lie in (0, 1)",
                self.luminance_floor
            )));
        }
        if self.image_size < SMOOTH_FACTOR || !self.image_size.is_multiple_of(SMOOTH_FACTOR) {
            return Err(Error::Validation(format!(
                "image size {} must be a positive multiple of {SMOOTH_FACTOR}",
                self.image_size
            )));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Validation(format!(
            "threshold {t} must lie in (0, 1)"
        )));
    }
    Ok(())
}

fn check_gamma(g: f64) -> Result<()> {
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::Validation(format!("gamma {g} must lie in (0, 1]")));
    }
    Ok(())
}

/// Per-pixel mask before smoothing: 1 where lightness exceeds `threshold`,
/// otherwise the gamma-shaped, floored lightness.
pub fn coarse_mask(
    lum: &Luminance,
    threshold: f64,
    gamma: f64,
    config: &SynthesisConfig,
) -> Result<IlluminationMask> {
    check_threshold(threshold)?;
    check_gamma(gamma)?;
    let exponent = match config.gamma_convention {
        GammaConvention::Power => gamma,
        GammaConvention::InversePower => 1.0 / gamma,
    };
    let floor = config.luminance_floor;
    let data = lum
        .0
        .data
        .iter()
        .map(|&l| {
            let l = l as f64;
            if l > threshold {
                1.0
            } else {
                // Never round to zero in f32.
                (l.max(floor).powf(exponent) as f32).max(f32::MIN_POSITIVE)
            }
        })
        .collect();
    IlluminationMask::new(Plane::new(lum.0.height, lum.0.width, data)?)
}

/// Centers of consecutive `factor`-wide blocks covering `len` pixels; the last
/// block may be partial.
fn block_centers(len: usize, factor: usize) -> Vec<f64> {
    (0..len.div_ceil(factor))
        .map(|b| {
            let start = b * factor;
            let end = (start + factor).min(len);
            (start + end) as f64 / 2.0 - 0.5
        })
        .collect()
}

/// Index of the lower neighbour and interpolation weight toward the upper one.
fn interp_coords(len: usize, centers: &[f64]) -> Vec<(usize, usize, f64)> {
    (0..len)
        .map(|p| {
            let p = p as f64;
            let last = centers.len() - 1;
            if p <= centers[0] {
                (0, 0, 0.0)
            } else if p >= centers[last] {
                (last, last, 0.0)
            } else {
                let i = centers.partition_point(|&c| c <= p) - 1;
                let t = (p - centers[i]) / (centers[i + 1] - centers[i]);
                (i, i + 1, t)
            }
        })
        .collect()
}

/// 8× block-average downsampling followed by bilinear upsampling to the
/// original size. Both steps are convex combinations, so the range is kept.
pub fn smooth_mask(mask: &IlluminationMask) -> Result<IlluminationMask> {
    let (h, w) = (mask.height(), mask.width());
    if h < SMOOTH_FACTOR || w < SMOOTH_FACTOR {
        return Err(Error::Validation(format!(
            "mask is {h}x{w}; smoothing needs both sides >= {SMOOTH_FACTOR}"
        )));
    }
    let f = SMOOTH_FACTOR;
    let (bh, bw) = (h.div_ceil(f), w.div_ceil(f));
    let mut low = vec![0.0f64; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let (y0, y1) = (by * f, ((by + 1) * f).min(h));
            let (x0, x1) = (bx * f, ((bx + 1) * f).min(w));
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += mask.0.at(y, x) as f64;
                }
            }
            low[by * bw + bx] = sum / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    let ys = interp_coords(h, &block_centers(h, f));
    let xs = interp_coords(w, &block_centers(w, f));
    let mut data = Vec::with_capacity(h * w);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = low[y0 * bw + x0] * (1.0 - tx) + low[y0 * bw + x1] * tx;
            let bottom = low[y1 * bw + x0] * (1.0 - tx) + low[y1 * bw + x1] * tx;
            let v = top * (1.0 - ty) + bottom * ty;
            data.push((v as f32).clamp(f32::MIN_POSITIVE, 1.0));
        }
    }
    IlluminationMask::new(Plane::new(h, w, data)?)
}

/// `clean · mask`, the same mask on every channel.
pub fn apply_degradation(clean: &Image, mask: &IlluminationMask) -> Result<Image> {
    if (clean.height(), clean.width()) != (mask.height(), mask.width()) {
        return Err(Error::shape(
            "degradation mask",
            (clean.height(), clean.width()),
            (mask.height(), mask.width()),
        ));
    }
    let data = clean
        .data()
        .chunks_exact(3)
        .zip(mask.data())
        .flat_map(|(px, &m)| [px[0] * m, px[1] * m, px[2] * m])
        .collect();
    Image::new(clean.height(), clean.width(), data)
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub degraded: Image,
    pub mask: IlluminationMask,
    pub gamma: f64,
}

/// Samples one γ and runs lightness → coarse mask → smoothing → degradation.
pub fn synthesize_pair(
    clean: &Image,
    threshold: f64,
    config: &SynthesisConfig,
    rng: &mut impl RngCore,
) -> Result<SyntheticPair> {
    check_gamma(config.gamma_min)?;
    check_gamma(config.gamma_max)?;
    let gamma = Uniform::new_inclusive(config.gamma_min, config.gamma_max).sample(rng);
    let lum = rgb_to_luminance(clean)?;
    let coarse = coarse_mask(&lum, threshold, gamma, config)?;
    let mask = smooth_mask(&coarse)?;
    let degraded = apply_degradation(clean, &mask)?;
    Ok(SyntheticPair {
        degraded,
        mask,
        gamma,
    })
}

/// One synthetic pair on disk. Ids are paths relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_id: String,
    pub degraded_id: String,
    pub threshold: f64,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleManifest {
    /// Directory ids are resolved against.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";

impl SampleManifest {
    pub fn clean_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.clean_id)
    }

    pub fn degraded_path(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.degraded_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct clean ids in first-appearance order.
    pub fn clean_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.clean_id.clone()))
            .map(|e| e.clean_id.clone())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let entries = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(csv_err)?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(SampleManifest { root, entries })
    }

    /// Writes the CSV through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("csv.tmp");
        let csv_err = |source| Error::Csv {
            path: tmp.clone(),
            source,
        };
        {
            let mut wtr = csv::Writer::from_path(&tmp).map_err(csv_err)?;
            if self.entries.is_empty() {
                wtr.write_record(["clean_id", "degraded_id", "threshold", "gamma", "seed"])
                    .map_err(csv_err)?;
            }
            for e in &self.entries {
                wtr.serialize(e).map_err(csv_err)?;
            }
            wtr.flush().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream seed of one (clean image, threshold) pair.
pub fn entry_seed(global: u64, clean_id: &str, threshold_index: usize) -> u64 {
    splitmix64(splitmix64(global ^ fnv1a(clean_id)) ^ threshold_index as u64)
}

/// Degraded file name for a clean stem and threshold.
fn degraded_name(stem: &str, threshold: f64) -> String {
    format!("{stem}_t{threshold}.png")
}

/// Resizes every decodable image in `clean_dir`, writes it under
/// `out_dir/clean/`, and writes one degraded image per threshold under
/// `out_dir/degraded/` plus `out_dir/manifest.csv`.
pub fn synthesize_dataset(
    clean_dir: &Path,
    out_dir: &Path,
    config: &SynthesisConfig,
) -> Result<SampleManifest> {
    config.validate()?;
    if !clean_dir.is_dir() {
        return Err(Error::Validation(format!(
            "input directory {} does not exist",
            clean_dir.display()
        )));
    }
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        return Err(Error::Validation(format!(
            "no PNG/JPEG images in {}",
            clean_dir.display()
        )));
    }
    let clean_out = out_dir.join("clean");
    let degraded_out = out_dir.join("degraded");
    let mask_out = out_dir.join("masks");
    for d in [&clean_out, &degraded_out] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let size = config.image_size;
    let mut entries = Vec::with_capacity(files.len() * config.thresholds.len());
    let mut stems = HashSet::new();
    for path in &files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        if !stems.insert(stem.clone()) {
            warn!("skipping {}: duplicate image name {stem}", path.display());
            continue;
        }
        let clean = match load_image(path) {
            Ok(img) => img.resize(size, size)?.quantized16(),
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", path.display());
                continue;
            }
        };
        let clean_id = format!("clean/{stem}.png");
        save_png16(&out_dir.join(&clean_id), &clean)?;
        for (ti, &threshold) in config.thresholds.iter().enumerate() {
            let seed = entry_seed(config.rng_seed, &clean_id, ti);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = synthesize_pair(&clean, threshold, config, &mut rng)?;
            let name = degraded_name(&stem, threshold);
            let degraded_id = format!("degraded/{name}");
            save_png16(&out_dir.join(&degraded_id), &pair.degraded)?;
            if config.save_masks {
                save_plane_png16(&mask_out.join(&name), pair.mask.plane())?;
            }
            entries.push(ManifestEntry {
                clean_id: clean_id.clone(),
                degraded_id,
                threshold,
                gamma: pair.gamma,
                seed,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Validation(format!(
            "none of the images in {} could be decoded",
            clean_dir.display()
        )));
    }
    let manifest = SampleManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    info!(
        "synthesized {} pairs from {} images",
        manifest.len(),
        manifest.clean_ids().len()
    );
    Ok(manifest)
}
