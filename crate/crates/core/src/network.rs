//! The recursive non-local encoder-decoder residual network.
//!
//! One block (a *stage*) maps an RGB batch to an RGB batch of the same size:
//!
//! ```text
//! a1 = relu(f1(x))          H    × C
//! a2 = relu(f2(pool(a1)))   H/2  × C
//! a3 = relu(f3(pool(a2)))   H/4  × C
//! enc = pool(a3)            H/8  × C
//! nlu = non_local(enc)
//! u1 = up1(relu(f4(nlu)))   H/4, concat a3
//! u2 = up2(relu(f5(..)))    H/2, concat a2
//! u3 = up3(relu(f6(..)))    H,   concat a1
//! out = x + f7(..)          H    × 3
//! ```
//!
//! The full model chains `stages` blocks, each consuming the previous output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward,
    max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels, Conv2d,
    ConvTranspose2d, Param,
};
use crate::tensor::{matmul, Mat, Real, Tensor};

/// Spatial sides must be multiples of this (three 2× poolings).
pub const SIZE_MULTIPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub stages: usize,
    pub channels: usize,
    pub inner_channels: usize,
    pub weight_sharing: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            stages: 3,
            channels: 64,
            inner_channels: 32,
            weight_sharing: true,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.channels == 0 || self.inner_channels == 0 {
            return Err(Error::Validation(format!(
                "architecture sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Embedded-Gaussian non-local unit weights (all 1×1).
#[derive(Clone, Debug, PartialEq)]
pub struct NonLocalParams<T> {
    pub theta: Conv2d<T>,
    pub phi: Conv2d<T>,
    pub g: Conv2d<T>,
    pub wz: Conv2d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub f1: Conv2d<T>,
    pub f2: Conv2d<T>,
    pub f3: Conv2d<T>,
    pub f4: Conv2d<T>,
    pub f5: Conv2d<T>,
    pub f6: Conv2d<T>,
    pub f7: Conv2d<T>,
    pub up1: ConvTranspose2d<T>,
    pub up2: ConvTranspose2d<T>,
    pub up3: ConvTranspose2d<T>,
    pub nl: NonLocalParams<T>,
}

macro_rules! stage_params_list {
    ($self:ident, $conv:ident) => {
        vec![
            ("f1.weight", $conv!($self.f1.weight)),
            ("f1.bias", $conv!($self.f1.bias)),
            ("f2.weight", $conv!($self.f2.weight)),
            ("f2.bias", $conv!($self.f2.bias)),
            ("f3.weight", $conv!($self.f3.weight)),
            ("f3.bias", $conv!($self.f3.bias)),
            ("nl.theta.weight", $conv!($self.nl.theta.weight)),
            ("nl.theta.bias", $conv!($self.nl.theta.bias)),
            ("nl.phi.weight", $conv!($self.nl.phi.weight)),
            ("nl.phi.bias", $conv!($self.nl.phi.bias)),
            ("nl.g.weight", $conv!($self.nl.g.weight)),
            ("nl.g.bias", $conv!($self.nl.g.bias)),
            ("nl.wz.weight", $conv!($self.nl.wz.weight)),
            ("nl.wz.bias", $conv!($self.nl.wz.bias)),
            ("f4.weight", $conv!($self.f4.weight)),
            ("f4.bias", $conv!($self.f4.bias)),
            ("up1.weight", $conv!($self.up1.weight)),
            ("up1.bias", $conv!($self.up1.bias)),
            ("f5.weight", $conv!($self.f5.weight)),
            ("f5.bias", $conv!($self.f5.bias)),
            ("up2.weight", $conv!($self.up2.weight)),
            ("up2.bias", $conv!($self.up2.bias)),
            ("f6.weight", $conv!($self.f6.weight)),
            ("f6.bias", $conv!($self.f6.bias)),
            ("up3.weight", $conv!($self.up3.weight)),
            ("up3.bias", $conv!($self.up3.bias)),
            ("f7.weight", $conv!($self.f7.weight)),
            ("f7.bias", $conv!($self.f7.bias)),
        ]
    };
}

macro_rules! by_ref {
    ($e:expr) => {
        &$e
    };
}
macro_rules! by_mut {
    ($e:expr) => {
        &mut $e
    };
}

impl<T: Real> StageParams<T> {
    pub fn zeros(channels: usize, inner: usize) -> Self {
        let c = channels;
        StageParams {
            f1: Conv2d::zeros(3, 3, c),
            f2: Conv2d::zeros(3, c, c),
            f3: Conv2d::zeros(3, c, c),
            f4: Conv2d::zeros(3, c, c),
            f5: Conv2d::zeros(3, 2 * c, c),
            f6: Conv2d::zeros(3, 2 * c, c),
            f7: Conv2d::zeros(1, 2 * c, 3),
            up1: ConvTranspose2d::zeros(c, c),
            up2: ConvTranspose2d::zeros(c, c),
            up3: ConvTranspose2d::zeros(c, c),
            nl: NonLocalParams {
                theta: Conv2d::zeros(1, c, inner),
                phi: Conv2d::zeros(1, c, inner),
                g: Conv2d::zeros(1, c, inner),
                wz: Conv2d::zeros(1, inner, c),
            },
        }
    }

    pub fn zeros_like(&self) -> Self {
        StageParams::zeros(self.f1.cout(), self.nl.theta.cout())
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        stage_params_list!(self, by_ref)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        stage_params_list!(self, by_mut)
    }
}

/// All learnable weights of the multi-stage network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    /// One entry when weights are shared, otherwise one per stage.
    pub stages: Vec<StageParams<T>>,
    pub version: u32,
}

pub const PARAMS_VERSION: u32 = 1;

impl<T: Real> ModelParams<T> {
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        arch.validate()?;
        let blocks = if arch.weight_sharing { 1 } else { arch.stages };
        Ok(ModelParams {
            arch,
            stages: (0..blocks)
                .map(|_| StageParams::zeros(arch.channels, arch.inner_channels))
                .collect(),
            version: PARAMS_VERSION,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            arch: self.arch,
            stages: self.stages.iter().map(StageParams::zeros_like).collect(),
            version: self.version,
        }
    }

    /// Parameters used by stage `t` (0-based).
    pub fn stage(&self, t: usize) -> &StageParams<T> {
        if self.arch.weight_sharing {
            &self.stages[0]
        } else {
            &self.stages[t]
        }
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut StageParams<T> {
        if self.arch.weight_sharing {
            &mut self.stages[0]
        } else {
            &mut self.stages[t]
        }
    }

    /// `stage{i}.<tensor>` names with their tensors, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, s)| {
                s.params()
                    .into_iter()
                    .map(move |(n, p)| (format!("stage{i}.{n}"), p))
            })
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.stages
            .iter_mut()
            .enumerate()
            .flat_map(|(i, s)| {
                s.params_mut()
                    .into_iter()
                    .map(move |(n, p)| (format!("stage{i}.{n}"), p))
            })
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Zeroes the residual head of every stage, making the network the identity.
    pub fn zero_residual_heads(&mut self) {
        for s in &mut self.stages {
            s.f7.weight.fill_zero();
            s.f7.bias.fill_zero();
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(self.arch).expect("validated arch");
        for ((_, src), (_, dst)) in self.named_params().into_iter().zip(out.named_params_mut()) {
            dst.data = src.data.iter().map(|v| U::lit(v.as_f64())).collect();
        }
        out.version = self.version;
        out
    }
}

/// Per-stage outputs, first to last; the last is the enhanced result.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutputs<T> {
    pub outputs: Vec<Tensor<T>>,
}

impl<T: Real> StageOutputs<T> {
    pub fn last(&self) -> &Tensor<T> {
        self.outputs.last().expect("at least one stage")
    }
    pub fn len(&self) -> usize {
        self.outputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Encoder activations: the three pre-pool rectified maps and the pooled code.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub a1: Tensor<T>,
    pub a2: Tensor<T>,
    pub a3: Tensor<T>,
    pub f_enc: Tensor<T>,
    p1: Tensor<T>,
    p2: Tensor<T>,
    arg1: Vec<u32>,
    arg2: Vec<u32>,
    arg3: Vec<u32>,
}

pub fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::Validation(format!(
            "network input is {h}x{w}; height and width must be positive multiples of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

pub fn encode<T: Real>(x: &Tensor<T>, p: &StageParams<T>) -> Result<Encoded<T>> {
    if x.c != 3 {
        return Err(Error::shape("encoder input channels", 3, x.c));
    }
    check_divisible(x.h, x.w)?;
    let mut a1 = conv2d(x, &p.f1);
    relu_inplace(&mut a1);
    let (p1, arg1) = max_pool2(&a1);
    let mut a2 = conv2d(&p1, &p.f2);
    relu_inplace(&mut a2);
    let (p2, arg2) = max_pool2(&a2);
    let mut a3 = conv2d(&p2, &p.f3);
    relu_inplace(&mut a3);
    let (f_enc, arg3) = max_pool2(&a3);
    Ok(Encoded {
        a1,
        a2,
        a3,
        f_enc,
        p1,
        p2,
        arg1,
        arg2,
        arg3,
    })
}

/// Intermediate values of the non-local unit; `attention` holds one
/// row-stochastic `P×P` matrix per batch item, `P = H·W`.
#[derive(Clone, Debug)]
pub struct NonLocalTrace<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub attention: Vec<Vec<T>>,
    pub y: Tensor<T>,
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

pub fn non_local_traced<T: Real>(
    x: &Tensor<T>,
    p: &NonLocalParams<T>,
) -> Result<(Tensor<T>, NonLocalTrace<T>)> {
    if x.c != p.theta.cin() {
        return Err(Error::shape("non-local input channels", p.theta.cin(), x.c));
    }
    let q = conv2d(x, &p.theta);
    let k = conv2d(x, &p.phi);
    let v = conv2d(x, &p.g);
    let np = x.h * x.w;
    let ci = q.c;
    let mut y = Tensor::zeros(x.n, x.h, x.w, ci);
    let mut attention = Vec::with_capacity(x.n);
    for i in 0..x.n {
        let mut a = vec![T::zero(); np * np];
        matmul(
            Mat::new(q.item(i), np, ci),
            Mat::new(k.item(i), np, ci).t(),
            &mut a,
            false,
        );
        softmax_rows(&mut a, np);
        matmul(
            Mat::new(&a, np, np),
            Mat::new(v.item(i), np, ci),
            y.item_mut(i),
            false,
        );
        attention.push(a);
    }
    let mut z = conv2d(&y, &p.wz);
    z.add_assign(x);
    Ok((
        z,
        NonLocalTrace {
            q,
            k,
            v,
            attention,
            y,
        },
    ))
}

pub fn non_local<T: Real>(x: &Tensor<T>, p: &StageParams<T>) -> Result<Tensor<T>> {
    let (z, _) = non_local_traced(x, &p.nl)?;
    if !z.is_finite() {
        return Err(Error::NonFinite("non-local unit output".into()));
    }
    Ok(z)
}

fn non_local_backward<T: Real>(
    x: &Tensor<T>,
    p: &NonLocalParams<T>,
    tr: &NonLocalTrace<T>,
    dz: &Tensor<T>,
    grad: &mut NonLocalParams<T>,
) -> Tensor<T> {
    let mut dx = dz.clone();
    let dy = conv2d_backward(&tr.y, &p.wz, dz, Some(&mut grad.wz), true).expect("dx requested");
    let np = x.h * x.w;
    let ci = tr.q.c;
    let mut dq = tr.q.zeros_like();
    let mut dk = tr.k.zeros_like();
    let mut dv = tr.v.zeros_like();
    let mut ds = vec![T::zero(); np * np];
    for i in 0..x.n {
        let a = &tr.attention[i];
        // dA = dY V^T
        matmul(
            Mat::new(dy.item(i), np, ci),
            Mat::new(tr.v.item(i), np, ci).t(),
            &mut ds,
            false,
        );
        // dV = A^T dY
        matmul(
            Mat::new(a, np, np).t(),
            Mat::new(dy.item(i), np, ci),
            dv.item_mut(i),
            false,
        );
        // softmax backward, in place: dS = A ⊙ (dA − rowsum(A ⊙ dA))
        for (srow, arow) in ds.chunks_exact_mut(np).zip(a.chunks_exact(np)) {
            let dot: T = srow.iter().zip(arow).map(|(&g, &p)| g * p).sum();
            for (g, &p) in srow.iter_mut().zip(arow) {
                *g = p * (*g - dot);
            }
        }
        matmul(
            Mat::new(&ds, np, np),
            Mat::new(tr.k.item(i), np, ci),
            dq.item_mut(i),
            false,
        );
        matmul(
            Mat::new(&ds, np, np).t(),
            Mat::new(tr.q.item(i), np, ci),
            dk.item_mut(i),
            false,
        );
    }
    for (conv, g, d) in [
        (&p.theta, &mut grad.theta, &dq),
        (&p.phi, &mut grad.phi, &dk),
        (&p.g, &mut grad.g, &dv),
    ] {
        let part = conv2d_backward(x, conv, d, Some(g), true).expect("dx requested");
        dx.add_assign(&part);
    }
    dx
}

/// Decoder state needed for backpropagation.
#[derive(Clone, Debug)]
struct Decoded<T> {
    d4: Tensor<T>,
    cat1: Tensor<T>,
    d5: Tensor<T>,
    cat2: Tensor<T>,
    d6: Tensor<T>,
    cat3: Tensor<T>,
}

fn decode_traced<T: Real>(
    f_nlu: &Tensor<T>,
    enc: &Encoded<T>,
    stage_input: &Tensor<T>,
    p: &StageParams<T>,
) -> Result<(Tensor<T>, Decoded<T>)> {
    let mut d4 = conv2d(f_nlu, &p.f4);
    relu_inplace(&mut d4);
    let u1 = conv_transpose2d(&d4, &p.up1);
    check_skip(&u1, &enc.a3, "a3")?;
    let cat1 = concat_channels(&u1, &enc.a3);
    let mut d5 = conv2d(&cat1, &p.f5);
    relu_inplace(&mut d5);
    let u2 = conv_transpose2d(&d5, &p.up2);
    check_skip(&u2, &enc.a2, "a2")?;
    let cat2 = concat_channels(&u2, &enc.a2);
    let mut d6 = conv2d(&cat2, &p.f6);
    relu_inplace(&mut d6);
    let u3 = conv_transpose2d(&d6, &p.up3);
    check_skip(&u3, &enc.a1, "a1")?;
    let cat3 = concat_channels(&u3, &enc.a1);
    let mut out = conv2d(&cat3, &p.f7);
    if out.shape() != stage_input.shape() {
        return Err(Error::shape(
            "decoder residual vs stage input",
            stage_input.shape(),
            out.shape(),
        ));
    }
    out.add_assign(stage_input);
    Ok((
        out,
        Decoded {
            d4,
            cat1,
            d5,
            cat2,
            d6,
            cat3,
        },
    ))
}

fn check_skip<T: Real>(up: &Tensor<T>, skip: &Tensor<T>, name: &str) -> Result<()> {
    if (up.n, up.h, up.w) != (skip.n, skip.h, skip.w) {
        return Err(Error::shape(
            format!("skip connection {name}"),
            (skip.n, skip.h, skip.w),
            (up.n, up.h, up.w),
        ));
    }
    Ok(())
}

pub fn decode<T: Real>(
    f_nlu: &Tensor<T>,
    enc: &Encoded<T>,
    stage_input: &Tensor<T>,
    p: &StageParams<T>,
) -> Result<Tensor<T>> {
    decode_traced(f_nlu, enc, stage_input, p).map(|(out, _)| out)
}

/// Everything one stage's backward pass needs.
#[derive(Clone, Debug)]
pub struct StageTape<T> {
    input: Tensor<T>,
    enc: Encoded<T>,
    nl: NonLocalTrace<T>,
    f_nlu: Tensor<T>,
    dec: Decoded<T>,
}

fn forward_stage_traced<T: Real>(
    x: &Tensor<T>,
    p: &StageParams<T>,
    stage: usize,
) -> Result<(Tensor<T>, StageTape<T>)> {
    let enc = encode(x, p)?;
    let (f_nlu, nl) = non_local_traced(&enc.f_enc, &p.nl)?;
    if !f_nlu.is_finite() {
        return Err(Error::NonFinite(format!(
            "stage {} non-local unit output",
            stage + 1
        )));
    }
    let (out, dec) = decode_traced(&f_nlu, &enc, x, p)?;
    Ok((
        out,
        StageTape {
            input: x.clone(),
            enc,
            nl,
            f_nlu,
            dec,
        },
    ))
}

pub fn forward_stage<T: Real>(x: &Tensor<T>, p: &StageParams<T>) -> Result<Tensor<T>> {
    forward_stage_traced(x, p, 0).map(|(out, _)| out)
}

/// Returns the gradient with respect to the stage input and accumulates
/// parameter gradients into `grad`.
fn backward_stage<T: Real>(
    tape: &StageTape<T>,
    p: &StageParams<T>,
    dout: &Tensor<T>,
    grad: &mut StageParams<T>,
) -> Tensor<T> {
    let c = p.f1.cout();
    let dec = &tape.dec;
    let enc = &tape.enc;
    let mut dinput = dout.clone();

    let dcat3 = conv2d_backward(&dec.cat3, &p.f7, dout, Some(&mut grad.f7), true).unwrap();
    let (du3, mut da1) = split_channels(&dcat3, c);
    let mut dd6 = conv_transpose2d_backward(&dec.d6, &p.up3, &du3, &mut grad.up3);
    relu_backward(&dec.d6, &mut dd6);
    let dcat2 = conv2d_backward(&dec.cat2, &p.f6, &dd6, Some(&mut grad.f6), true).unwrap();
    let (du2, mut da2) = split_channels(&dcat2, c);
    let mut dd5 = conv_transpose2d_backward(&dec.d5, &p.up2, &du2, &mut grad.up2);
    relu_backward(&dec.d5, &mut dd5);
    let dcat1 = conv2d_backward(&dec.cat1, &p.f5, &dd5, Some(&mut grad.f5), true).unwrap();
    let (du1, mut da3) = split_channels(&dcat1, c);
    let mut dd4 = conv_transpose2d_backward(&dec.d4, &p.up1, &du1, &mut grad.up1);
    relu_backward(&dec.d4, &mut dd4);
    let df_nlu = conv2d_backward(&tape.f_nlu, &p.f4, &dd4, Some(&mut grad.f4), true).unwrap();

    let df_enc = non_local_backward(&enc.f_enc, &p.nl, &tape.nl, &df_nlu, &mut grad.nl);

    da3.add_assign(&max_pool2_backward(&enc.arg3, &df_enc, enc.a3.shape()));
    relu_backward(&enc.a3, &mut da3);
    let dp2 = conv2d_backward(&enc.p2, &p.f3, &da3, Some(&mut grad.f3), true).unwrap();
    da2.add_assign(&max_pool2_backward(&enc.arg2, &dp2, enc.a2.shape()));
    relu_backward(&enc.a2, &mut da2);
    let dp1 = conv2d_backward(&enc.p1, &p.f2, &da2, Some(&mut grad.f2), true).unwrap();
    da1.add_assign(&max_pool2_backward(&enc.arg1, &dp1, enc.a1.shape()));
    relu_backward(&enc.a1, &mut da1);
    let dx = conv2d_backward(&tape.input, &p.f1, &da1, Some(&mut grad.f1), true).unwrap();
    dinput.add_assign(&dx);
    dinput
}

pub fn forward<T: Real>(x: &Tensor<T>, m: &ModelParams<T>) -> Result<StageOutputs<T>> {
    let mut outputs = Vec::with_capacity(m.arch.stages);
    let mut current = x.clone();
    for t in 0..m.arch.stages {
        let (out, _) = forward_stage_traced(&current, m.stage(t), t)?;
        outputs.push(out.clone());
        current = out;
    }
    Ok(StageOutputs { outputs })
}

/// Recorded forward pass for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTape<T> {
    stages: Vec<StageTape<T>>,
}

pub fn forward_with_tape<T: Real>(
    x: &Tensor<T>,
    m: &ModelParams<T>,
) -> Result<(StageOutputs<T>, ForwardTape<T>)> {
    let mut outputs = Vec::with_capacity(m.arch.stages);
    let mut tapes = Vec::with_capacity(m.arch.stages);
    let mut current = x.clone();
    for t in 0..m.arch.stages {
        let (out, tape) = forward_stage_traced(&current, m.stage(t), t)?;
        outputs.push(out.clone());
        tapes.push(tape);
        current = out;
    }
    Ok((StageOutputs { outputs }, ForwardTape { stages: tapes }))
}

/// Backpropagates per-stage output gradients through the recursion.
/// Returns the parameter gradients and the gradient with respect to the input.
pub fn backward<T: Real>(
    tape: &ForwardTape<T>,
    m: &ModelParams<T>,
    output_grads: &[Tensor<T>],
) -> Result<(ModelParams<T>, Tensor<T>)> {
    if output_grads.len() != tape.stages.len() {
        return Err(Error::shape(
            "stage output gradients",
            tape.stages.len(),
            output_grads.len(),
        ));
    }
    let mut grads = m.zeros_like();
    let mut carry: Option<Tensor<T>> = None;
    for t in (0..tape.stages.len()).rev() {
        let mut dout = output_grads[t].clone();
        if let Some(c) = carry.take() {
            dout.add_assign(&c);
        }
        let dinput = backward_stage(&tape.stages[t], m.stage(t), &dout, grads.stage_mut(t));
        carry = Some(dinput);
    }
    Ok((grads, carry.expect("at least one stage")))
}
