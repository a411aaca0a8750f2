//! Forward and backward passes of the primitive layers used by the network and
//! the perceptual extractor. All layouts are NHWC; 3×3 kernels are stored as
//! `[ky][kx][cin][cout]` so an im2col matrix multiplies them directly.

use crate::tensor::{matmul, Mat, Real, Tensor};

/// A learnable tensor with its declared shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Param::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Stride-1 convolution with zero "same" padding and an odd square kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(kernel: usize, cin: usize, cout: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Conv2d {
            weight: Param::zeros(&[kernel, kernel, cin, cout]),
            bias: Param::zeros(&[cout]),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape[0]
    }
    pub fn cin(&self) -> usize {
        self.weight.shape[2]
    }
    pub fn cout(&self) -> usize {
        self.weight.shape[3]
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// 3×3 stride-2 transposed convolution doubling the spatial size
/// (input row `i`, tap `k` lands on output row `2i + k - 1`).
/// Weight layout `[cin][ky][kx][cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        ConvTranspose2d {
            weight: Param::zeros(&[cin, 3, 3, cout]),
            bias: Param::zeros(&[cout]),
        }
    }
    pub fn cin(&self) -> usize {
        self.weight.shape[0]
    }
    pub fn cout(&self) -> usize {
        self.weight.shape[3]
    }
    pub fn zeros_like(&self) -> Self {
        ConvTranspose2d {
            weight: self.weight.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

fn im2col<T: Real>(x: &[T], h: usize, w: usize, c: usize, k: usize, cols: &mut [T]) {
    let r = (k / 2) as isize;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    let d = &mut dst[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        d.iter_mut().for_each(|v| *v = T::zero());
                    } else {
                        let s = (sy as usize * w + sx as usize) * c;
                        d.copy_from_slice(&x[s..s + c]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, c: usize, k: usize, dx: &mut [T]) {
    let r = (k / 2) as isize;
    let row_len = k * k * c;
    for y in 0..h {
        for xx in 0..w {
            let src = &cols[(y * w + xx) * row_len..(y * w + xx + 1) * row_len];
            for ky in 0..k {
                let sy = y as isize + ky as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - r;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let d = (sy as usize * w + sx as usize) * c;
                    let s = &src[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (o, &v) in dx[d..d + c].iter_mut().zip(s) {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in out.chunks_exact_mut(c) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(dy: &[T], db: &mut [T]) {
    let c = db.len();
    for row in dy.chunks_exact(c) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, conv: &Conv2d<T>) -> Tensor<T> {
    let (k, cin, cout) = (conv.kernel(), conv.cin(), conv.cout());
    assert_eq!(x.c, cin, "conv2d input channels");
    let p = x.h * x.w;
    let mut out = Tensor::zeros(x.n, x.h, x.w, cout);
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); p * k * k * cin]
    };
    for i in 0..x.n {
        let src = x.item(i);
        let dst = out.item_mut(i);
        if k == 1 {
            matmul(
                Mat::new(src, p, cin),
                Mat::new(&conv.weight.data, cin, cout),
                dst,
                false,
            );
        } else {
            im2col(src, x.h, x.w, cin, k, &mut cols);
            matmul(
                Mat::new(&cols, p, k * k * cin),
                Mat::new(&conv.weight.data, k * k * cin, cout),
                dst,
                false,
            );
        }
        add_bias(dst, &conv.bias.data);
    }
    out
}

/// Accumulates parameter gradients into `grad` when given; returns the input
/// gradient when `want_dx`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    conv: &Conv2d<T>,
    dy: &Tensor<T>,
    mut grad: Option<&mut Conv2d<T>>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let (k, cin, cout) = (conv.kernel(), conv.cin(), conv.cout());
    assert_eq!(
        dy.shape(),
        [x.n, x.h, x.w, cout],
        "conv2d_backward dy shape"
    );
    let p = x.h * x.w;
    let kk = k * k * cin;
    let mut dx = want_dx.then(|| x.zeros_like());
    let mut cols = if k == 1 || grad.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); p * kk]
    };
    let mut dcols = if k == 1 || !want_dx {
        Vec::new()
    } else {
        vec![T::zero(); p * kk]
    };
    for i in 0..x.n {
        let g = dy.item(i);
        if let Some(grad) = grad.as_deref_mut() {
            accumulate_bias_grad(g, &mut grad.bias.data);
        }
        if k == 1 {
            if let Some(grad) = grad.as_deref_mut() {
                matmul(
                    Mat::new(x.item(i), p, cin).t(),
                    Mat::new(g, p, cout),
                    &mut grad.weight.data,
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                matmul(
                    Mat::new(g, p, cout),
                    Mat::new(&conv.weight.data, cin, cout).t(),
                    dx.item_mut(i),
                    false,
                );
            }
        } else {
            if let Some(grad) = grad.as_deref_mut() {
                im2col(x.item(i), x.h, x.w, cin, k, &mut cols);
                matmul(
                    Mat::new(&cols, p, kk).t(),
                    Mat::new(g, p, cout),
                    &mut grad.weight.data,
                    true,
                );
            }
            if let Some(dx) = dx.as_mut() {
                matmul(
                    Mat::new(g, p, cout),
                    Mat::new(&conv.weight.data, kk, cout).t(),
                    &mut dcols,
                    false,
                );
                col2im(&dcols, x.h, x.w, cin, k, dx.item_mut(i));
            }
        }
    }
    dx
}

/// Output row/col reached by input index `i` through tap `k`, if inside.
#[inline]
fn up_index(i: usize, k: usize, out: usize) -> Option<usize> {
    let o = 2 * i + k;
    (o >= 1 && o - 1 < out).then(|| o - 1)
}

pub fn conv_transpose2d<T: Real>(x: &Tensor<T>, ct: &ConvTranspose2d<T>) -> Tensor<T> {
    let (cin, cout) = (ct.cin(), ct.cout());
    assert_eq!(x.c, cin, "conv_transpose2d input channels");
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let p = x.h * x.w;
    let mut out = Tensor::zeros(x.n, oh, ow, cout);
    let mut cols = vec![T::zero(); p * 9 * cout];
    for i in 0..x.n {
        matmul(
            Mat::new(x.item(i), p, cin),
            Mat::new(&ct.weight.data, cin, 9 * cout),
            &mut cols,
            false,
        );
        let dst = out.item_mut(i);
        for iy in 0..x.h {
            for ix in 0..x.w {
                let row = &cols[(iy * x.w + ix) * 9 * cout..(iy * x.w + ix + 1) * 9 * cout];
                for ky in 0..3 {
                    let Some(oy) = up_index(iy, ky, oh) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ox) = up_index(ix, kx, ow) else {
                            continue;
                        };
                        let d = (oy * ow + ox) * cout;
                        let s = &row[(ky * 3 + kx) * cout..(ky * 3 + kx + 1) * cout];
                        for (o, &v) in dst[d..d + cout].iter_mut().zip(s) {
                            *o += v;
                        }
                    }
                }
            }
        }
        add_bias(dst, &ct.bias.data);
    }
    out
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    ct: &ConvTranspose2d<T>,
    dy: &Tensor<T>,
    grad: &mut ConvTranspose2d<T>,
) -> Tensor<T> {
    let (cin, cout) = (ct.cin(), ct.cout());
    let (oh, ow) = (2 * x.h, 2 * x.w);
    assert_eq!(
        dy.shape(),
        [x.n, oh, ow, cout],
        "conv_transpose2d_backward dy"
    );
    let p = x.h * x.w;
    let mut dx = x.zeros_like();
    let mut dcols = vec![T::zero(); p * 9 * cout];
    for i in 0..x.n {
        let g = dy.item(i);
        accumulate_bias_grad(g, &mut grad.bias.data);
        for iy in 0..x.h {
            for ix in 0..x.w {
                let row = &mut dcols[(iy * x.w + ix) * 9 * cout..(iy * x.w + ix + 1) * 9 * cout];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let d = &mut row[(ky * 3 + kx) * cout..(ky * 3 + kx + 1) * cout];
                        match (up_index(iy, ky, oh), up_index(ix, kx, ow)) {
                            (Some(oy), Some(ox)) => {
                                let s = (oy * ow + ox) * cout;
                                d.copy_from_slice(&g[s..s + cout]);
                            }
                            _ => d.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
            }
        }
        matmul(
            Mat::new(x.item(i), p, cin).t(),
            Mat::new(&dcols, p, 9 * cout),
            &mut grad.weight.data,
            true,
        );
        matmul(
            Mat::new(&dcols, p, 9 * cout),
            Mat::new(&ct.weight.data, cin, 9 * cout).t(),
            dx.item_mut(i),
            false,
        );
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a rectifier given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 max pooling with stride 2; returns the pooled tensor and the flat
/// input index of each maximum.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    assert!(
        x.h.is_multiple_of(2) && x.w.is_multiple_of(2),
        "max_pool2 needs even sides"
    );
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, oh, ow, x.c);
    let mut arg = vec![0u32; out.data.len()];
    let mut o = 0;
    for n in 0..x.n {
        for y in 0..oh {
            for xx in 0..ow {
                for c in 0..x.c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((n * x.h + 2 * y + dy) * x.w + 2 * xx + dx) * x.c + c;
                        let v = x.data[idx];
                        if best == usize::MAX || v > best_v {
                            best = idx;
                            best_v = v;
                        }
                    }
                    out.data[o] = best_v;
                    arg[o] = best as u32;
                    o += 1;
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(
    argmax: &[u32],
    dy: &Tensor<T>,
    input_shape: [usize; 4],
) -> Tensor<T> {
    let [n, h, w, c] = input_shape;
    let mut dx = Tensor::zeros(n, h, w, c);
    for (&idx, &g) in argmax.iter().zip(&dy.data) {
        dx.data[idx as usize] += g;
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat spatial shape");
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.n * a.h * a.w * c);
    for (ra, rb) in a.data.chunks_exact(a.c).zip(b.data.chunks_exact(b.c)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Tensor {
        n: a.n,
        h: a.h,
        w: a.w,
        c,
        data,
    }
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let second = x.c - first;
    let mut a = Vec::with_capacity(x.n * x.h * x.w * first);
    let mut b = Vec::with_capacity(x.n * x.h * x.w * second);
    for row in x.data.chunks_exact(x.c) {
        a.extend_from_slice(&row[..first]);
        b.extend_from_slice(&row[first..]);
    }
    (
        Tensor {
            n: x.n,
            h: x.h,
            w: x.w,
            c: first,
            data: a,
        },
        Tensor {
            n: x.n,
            h: x.h,
            w: x.w,
            c: second,
            data: b,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        let [n, h, w, c] = shape;
        let data = (0..n * h * w * c)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(n, h, w, c, data).unwrap()
    }

    fn fill(p: &mut Param<f64>, rng: &mut ChaCha8Rng) {
        p.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }

    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (k, cin, cout) = (conv.kernel(), conv.cin(), conv.cout());
        let r = (k / 2) as isize;
        let mut out = Tensor::zeros(x.n, x.h, x.w, cout);
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    for co in 0..cout {
                        let mut acc = conv.bias.data[co];
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - r;
                                let sx = xx as isize + kx as isize - r;
                                if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(n, sy as usize, sx as usize, ci)
                                        * conv.weight.data[((ky * k + kx) * cin + ci) * cout + co];
                                }
                            }
                        }
                        *out.at_mut(n, y, xx, co) = acc;
                    }
                }
            }
        }
        out
    }

    fn naive_conv_transpose(x: &Tensor<f64>, ct: &ConvTranspose2d<f64>) -> Tensor<f64> {
        let (cin, cout) = (ct.cin(), ct.cout());
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut out = Tensor::zeros(x.n, oh, ow, cout);
        for n in 0..x.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = ct.bias.data[co];
                        for iy in 0..x.h {
                            for ix in 0..x.w {
                                let ky = oy as isize + 1 - 2 * iy as isize;
                                let kx = ox as isize + 1 - 2 * ix as isize;
                                if !(0..3).contains(&ky) || !(0..3).contains(&kx) {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += x.at(n, iy, ix, ci)
                                        * ct.weight.data[((ci * 3 + ky as usize) * 3
                                            + kx as usize)
                                            * cout
                                            + co];
                                }
                            }
                        }
                        *out.at_mut(n, oy, ox, co) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let x = random_tensor(&mut rng, [2, 5, 6, 3]);
            let mut conv = Conv2d::zeros(k, 3, 4);
            fill(&mut conv.weight, &mut rng);
            fill(&mut conv.bias, &mut rng);
            assert!(conv2d(&x, &conv).max_abs_diff(&naive_conv(&x, &conv)) < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, [2, 3, 4, 3]);
        let mut ct = ConvTranspose2d::zeros(3, 2);
        fill(&mut ct.weight, &mut rng);
        fill(&mut ct.bias, &mut rng);
        let y = conv_transpose2d(&x, &ct);
        assert_eq!(y.shape(), [2, 6, 8, 2]);
        assert!(y.max_abs_diff(&naive_conv_transpose(&x, &ct)) < 1e-12);
    }

    /// Dot-product (adjoint) test: <dy, J dx> = <J^T dy, dx> for the linear
    /// parts, and finite differences for the weights.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3] {
            let x = random_tensor(&mut rng, [1, 4, 5, 3]);
            let mut conv = Conv2d::zeros(k, 3, 2);
            fill(&mut conv.weight, &mut rng);
            let dy = random_tensor(&mut rng, [1, 4, 5, 2]);
            let mut grad = conv.zeros_like();
            let dx = conv2d_backward(&x, &conv, &dy, Some(&mut grad), true).unwrap();
            let y = conv2d(&x, &conv);
            let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "k={k}: {lhs} vs {rhs}");
            let rhs_w: f64 = conv
                .weight
                .data
                .iter()
                .zip(&grad.weight.data)
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs_w).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_transpose_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, [2, 3, 3, 2]);
        let mut ct = ConvTranspose2d::zeros(2, 3);
        fill(&mut ct.weight, &mut rng);
        let dy = random_tensor(&mut rng, [2, 6, 6, 3]);
        let mut grad = ct.zeros_like();
        let dx = conv_transpose2d_backward(&x, &ct, &dy, &mut grad);
        let y = conv_transpose2d(&x, &ct);
        let lhs: f64 = y.data.iter().zip(&dy.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = ct
            .weight
            .data
            .iter()
            .zip(&grad.weight.data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-9);
        assert!((lhs - rhs_w).abs() < 1e-9);
    }

    #[test]
    fn pooling_routes_gradient_to_maxima() {
        let x = Tensor::from_vec(1, 2, 2, 1, vec![0.1, 0.7, -0.3, 0.2]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![0.7]);
        let dy = Tensor::from_vec(1, 1, 1, 1, vec![2.0]).unwrap();
        let dx = max_pool2_backward(&arg, &dy, x.shape());
        assert_eq!(dx.data, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(&mut rng, [2, 3, 3, 2]);
        let b = random_tensor(&mut rng, [2, 3, 3, 4]);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
