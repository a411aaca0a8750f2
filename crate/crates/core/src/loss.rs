//! Multi-stage training objective: a perceptual term on every stage output and
//! an L1 term on the last one,
//! `total = Σ_t per_t + λ · l1_T`. All reductions are sums over batch,
//! positions and channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::PerceptualExtractor;
use crate::network::StageOutputs;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_l1: 100.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Validation(format!(
                "lambda_l1 must be finite and >= 0, got {}",
                self.lambda_l1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// Perceptual loss of each stage output, first to last.
    pub perceptual: Vec<f64>,
    /// L1 loss of the last stage.
    pub l1: f64,
    pub lambda_l1: f64,
    pub total: f64,
}

impl LossReport {
    fn new(perceptual: Vec<f64>, l1: f64, lambda_l1: f64) -> Self {
        let total = perceptual.iter().sum::<f64>() + lambda_l1 * l1;
        LossReport {
            perceptual,
            l1,
            lambda_l1,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.l1.is_finite()
            && self.perceptual.iter().all(|v| v.is_finite())
    }
}

fn check_same<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, b.shape(), a.shape()));
    }
    Ok(())
}

fn abs_diff_sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs().as_f64())
        .sum()
}

/// Subgradient of `Σ|a − b|` with respect to `a`.
fn sign_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            if x > y {
                T::one()
            } else if x < y {
                -T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor { data, ..a.clone() }
}

pub fn l1_loss<T: Real>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    check_same(pred, reference, "l1 loss inputs")?;
    Ok(abs_diff_sum(pred, reference))
}

pub fn perceptual_loss<T: Real>(
    pred: &Tensor<T>,
    reference: &Tensor<T>,
    ext: &PerceptualExtractor<T>,
) -> Result<f64> {
    check_same(pred, reference, "perceptual loss inputs")?;
    let fp = ext.features(pred)?;
    let fr = ext.features(reference)?;
    Ok(abs_diff_sum(&fp, &fr))
}

pub fn total_loss<T: Real>(
    outputs: &StageOutputs<T>,
    reference: &Tensor<T>,
    ext: &PerceptualExtractor<T>,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let last = outputs
        .outputs
        .last()
        .ok_or_else(|| Error::Validation("no stage outputs".into()))?;
    let fr = ext.features(reference)?;
    let mut perceptual = Vec::with_capacity(outputs.len());
    for out in &outputs.outputs {
        check_same(out, reference, "stage output vs reference")?;
        perceptual.push(abs_diff_sum(&ext.features(out)?, &fr));
    }
    let l1 = l1_loss(last, reference)?;
    Ok(LossReport::new(perceptual, l1, weights.lambda_l1))
}

/// Loss and its gradient with respect to every stage output.
pub fn total_loss_with_grad<T: Real>(
    outputs: &StageOutputs<T>,
    reference: &Tensor<T>,
    ext: &PerceptualExtractor<T>,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Tensor<T>>)> {
    weights.validate()?;
    if outputs.is_empty() {
        return Err(Error::Validation("no stage outputs".into()));
    }
    let fr = ext.features(reference)?;
    let mut perceptual = Vec::with_capacity(outputs.len());
    let mut grads = Vec::with_capacity(outputs.len());
    for out in &outputs.outputs {
        check_same(out, reference, "stage output vs reference")?;
        let tape = ext.features_with_tape(out)?;
        perceptual.push(abs_diff_sum(&tape.features, &fr));
        grads.push(ext.backward(&tape, sign_diff(&tape.features, &fr)));
    }
    let last = outputs.last();
    let l1 = abs_diff_sum(last, reference);
    let lambda = T::lit(weights.lambda_l1);
    let g_l1 = sign_diff(last, reference);
    let g_last = grads.last_mut().expect("non-empty");
    for (g, &s) in g_last.data.iter_mut().zip(&g_l1.data) {
        *g += lambda * s;
    }
    Ok((LossReport::new(perceptual, l1, weights.lambda_l1), grads))
}
