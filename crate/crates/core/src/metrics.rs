//! Full-reference quality metrics: PSNR over RGB and SSIM over luma.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{list_images, load_image, Image};
use crate::synthesis::SampleManifest;

/// Reported for identical inputs instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(
            "metric inputs",
            (a.height(), a.width()),
            (b.height(), b.width()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak 1.0; identical images report [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// BT.601 luma.
fn luma(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filtering over positions where the window fits.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| src[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|i| rows[(y + i) * ow + x] * k[i])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all 11×11 Gaussian windows (σ = 1.5) of the luma channel.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let x = luma(a);
    let y = luma(b);
    let k = gaussian_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let mxx = filter_valid(&xx, h, w, &k);
    let myy = filter_valid(&yy, h, w, &k);
    let mxy = filter_valid(&xy, h, w, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cxy + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok((total / mx.len() as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scores: Vec<PairScore>,
    /// Ids that matched but could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_scores(scores: Vec<PairScore>, failures: Vec<(String, String)>) -> Self {
        let n = scores.len().max(1) as f64;
        let mean_psnr = scores.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / n;
        MetricReport {
            scores,
            failures,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn count(&self) -> usize {
        self.scores.len()
    }

    /// `id,psnr_db,ssim` rows followed by a `mean` summary row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut wtr = csv::Writer::from_path(path).map_err(csv_err)?;
        wtr.write_record(["id", "psnr_db", "ssim"])
            .map_err(csv_err)?;
        for s in &self.scores {
            wtr.write_record([s.id.clone(), s.psnr_db.to_string(), s.ssim.to_string()])
                .map_err(csv_err)?;
        }
        wtr.write_record([
            "mean".to_string(),
            self.mean_psnr.to_string(),
            self.mean_ssim.to_string(),
        ])
        .map_err(csv_err)?;
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn summary(&self) -> String {
        format!(
            "{} pairs: mean PSNR {:.4} dB, mean SSIM {:.4}",
            self.count(),
            self.mean_psnr,
            self.mean_ssim
        )
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

pub fn score_pair(id: &str, pred: &Image, reference: &Image) -> Result<PairScore> {
    Ok(PairScore {
        id: id.to_string(),
        psnr_db: psnr(pred, reference)?,
        ssim: ssim(pred, reference)?,
    })
}

/// Scores every prediction whose file stem matches a reference stem.
/// With a manifest, a prediction named after a degraded id is matched to its
/// clean reference.
pub fn evaluate_pairs(
    pred_dir: &Path,
    ref_dir: &Path,
    manifest: Option<&SampleManifest>,
) -> Result<MetricReport> {
    let refs: HashMap<String, PathBuf> = list_images(ref_dir)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    let degraded_to_clean: HashMap<String, String> = manifest
        .map(|m| {
            m.entries
                .iter()
                .map(|e| {
                    (
                        stem(Path::new(&e.degraded_id)),
                        stem(Path::new(&e.clean_id)),
                    )
                })
                .collect()
        })
        .unwrap_or_default();

    let mut matched = Vec::new();
    let mut unmatched = Vec::new();
    for p in list_images(pred_dir)? {
        let id = stem(&p);
        let ref_path = refs
            .get(&id)
            .or_else(|| degraded_to_clean.get(&id).and_then(|clean| refs.get(clean)));
        match ref_path {
            Some(r) => matched.push((id, p, r.clone())),
            None => unmatched.push(id),
        }
    }
    if !unmatched.is_empty() {
        warn!(
            "{} predictions have no reference and are excluded: {}",
            unmatched.len(),
            unmatched.join(", ")
        );
    }
    if matched.is_empty() {
        return Err(Error::Validation(format!(
            "no prediction in {} matches a reference in {}",
            pred_dir.display(),
            ref_dir.display()
        )));
    }
    let mut scores = Vec::with_capacity(matched.len());
    let mut failures = Vec::new();
    for (id, p, r) in matched {
        let result = load_image(&p)
            .and_then(|pred| load_image(&r).map(|reference| (pred, reference)))
            .and_then(|(pred, reference)| score_pair(&id, &pred, &reference));
        match result {
            Ok(s) => scores.push(s),
            Err(e) => {
                warn!("could not evaluate {id}: {e}");
                failures.push((id, e.to_string()));
            }
        }
    }
    Ok(MetricReport::from_scores(scores, failures))
}
