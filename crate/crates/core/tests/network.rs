mod common;

use nuigo::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use nuigo::layers::{Conv2d, ConvTranspose2d};
use nuigo::network::{
    encode, forward, forward_stage, non_local_traced, ArchConfig, ModelParams, NonLocalParams,
    StageParams,
};
use nuigo::Tensor;

fn conv_oracle(x: &Tensor<f64>, conv: &Conv2d<f64>, relu: bool) -> Tensor<f64> {
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
                            let (sy, sx) =
                                (y as isize + ky as isize - r, xx as isize + kx as isize - r);
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(n, sy as usize, sx as usize, ci)
                                    * conv.weight.data[((ky * k + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    *out.at_mut(n, y, xx, co) = if relu { acc.max(0.0) } else { acc };
                }
            }
        }
    }
    out
}

fn pool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let mut out = Tensor::zeros(x.n, x.h / 2, x.w / 2, x.c);
    for n in 0..x.n {
        for y in 0..x.h / 2 {
            for xx in 0..x.w / 2 {
                for c in 0..x.c {
                    let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| x.at(n, 2 * y + dy, 2 * xx + dx, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    *out.at_mut(n, y, xx, c) = m;
                }
            }
        }
    }
    out
}

/// Output pixel `2i + k − 1` receives tap `k` of input pixel `i`.
fn up_oracle(x: &Tensor<f64>, ct: &ConvTranspose2d<f64>) -> Tensor<f64> {
    let (cin, cout) = (ct.cin(), ct.cout());
    let mut out = Tensor::zeros(x.n, 2 * x.h, 2 * x.w, cout);
    for v in out.data.chunks_mut(cout) {
        v.copy_from_slice(&ct.bias.data);
    }
    for n in 0..x.n {
        for iy in 0..x.h {
            for ix in 0..x.w {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (oy, ox) = ((2 * iy + ky) as isize - 1, (2 * ix + kx) as isize - 1);
                        if oy < 0 || ox < 0 || oy >= 2 * x.h as isize || ox >= 2 * x.w as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            for co in 0..cout {
                                *out.at_mut(n, oy as usize, ox as usize, co) += x.at(n, iy, ix, ci)
                                    * ct.weight.data[((ci * 3 + ky) * 3 + kx) * cout + co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn concat_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut data = Vec::new();
    for (pa, pb) in a.data.chunks(a.c).zip(b.data.chunks(b.c)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Tensor::from_vec(a.n, a.h, a.w, a.c + b.c, data).unwrap()
}

fn non_local_oracle(x: &Tensor<f64>, p: &NonLocalParams<f64>) -> Tensor<f64> {
    let q = conv_oracle(x, &p.theta, false);
    let k = conv_oracle(x, &p.phi, false);
    let g = conv_oracle(x, &p.g, false);
    let np = x.h * x.w;
    let ci = q.c;
    let mut y = Tensor::zeros(x.n, x.h, x.w, ci);
    for n in 0..x.n {
        let (qi, ki, gi) = (q.item(n), k.item(n), g.item(n));
        for i in 0..np {
            let logits: Vec<f64> = (0..np)
                .map(|j| (0..ci).map(|c| qi[i * ci + c] * ki[j * ci + c]).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..ci {
                y.item_mut(n)[i * ci + c] = (0..np).map(|j| w[j] * gi[j * ci + c]).sum::<f64>() / z;
            }
        }
    }
    let mut out = conv_oracle(&y, &p.wz, false);
    out.add_assign(x);
    out
}

fn stage_oracle(x: &Tensor<f64>, p: &StageParams<f64>) -> Tensor<f64> {
    let a1 = conv_oracle(x, &p.f1, true);
    let a2 = conv_oracle(&pool_oracle(&a1), &p.f2, true);
    let a3 = conv_oracle(&pool_oracle(&a2), &p.f3, true);
    let z = non_local_oracle(&pool_oracle(&a3), &p.nl);
    let d4 = conv_oracle(&z, &p.f4, true);
    let d5 = conv_oracle(&concat_oracle(&up_oracle(&d4, &p.up1), &a3), &p.f5, true);
    let d6 = conv_oracle(&concat_oracle(&up_oracle(&d5, &p.up2), &a2), &p.f6, true);
    let mut out = conv_oracle(&concat_oracle(&up_oracle(&d6, &p.up3), &a1), &p.f7, false);
    out.add_assign(x);
    out
}

fn arch(stages: usize, weight_sharing: bool) -> ArchConfig {
    ArchConfig {
        stages,
        channels: 4,
        inner_channels: 2,
        weight_sharing,
    }
}

#[test]
fn encoder_matches_naive_convolutions_on_8x8() {
    let m = common::random_model(arch(1, true), 21, 0.4);
    let x = common::random_image(8, 8, 22).to_tensor::<f64>();
    let enc = encode(&x, m.stage(0)).unwrap();
    let p = m.stage(0);
    let a1 = conv_oracle(&x, &p.f1, true);
    let a2 = conv_oracle(&pool_oracle(&a1), &p.f2, true);
    let a3 = conv_oracle(&pool_oracle(&a2), &p.f3, true);
    assert!(enc.a1.max_abs_diff(&a1) < 1e-12);
    assert!(enc.a2.max_abs_diff(&a2) < 1e-12);
    assert!(enc.a3.max_abs_diff(&a3) < 1e-12);
    assert!(enc.f_enc.max_abs_diff(&pool_oracle(&a3)) < 1e-12);
    assert_eq!(enc.f_enc.shape(), [1, 1, 1, 4]);
}

#[test]
fn full_stage_matches_composed_oracle() {
    let m = common::random_model(arch(1, true), 23, 0.3);
    let x = common::random_tensor([2, 16, 24, 3], 24, 1.0);
    let got = forward_stage(&x, m.stage(0)).unwrap();
    let want = stage_oracle(&x, m.stage(0));
    assert!(
        got.max_abs_diff(&want) < 1e-10,
        "{}",
        got.max_abs_diff(&want)
    );
}

#[test]
fn stages_chain_and_untied_stages_differ() {
    let m = common::random_model(arch(3, false), 25, 0.3);
    let x = common::random_image(16, 16, 26).to_tensor::<f64>();
    let out = forward(&x, &m).unwrap();
    let mut cur = x.clone();
    for t in 0..3 {
        cur = stage_oracle(&cur, m.stage(t));
        assert!(out.outputs[t].max_abs_diff(&cur) < 1e-10, "stage {t}");
    }
    assert!(out.outputs[0].max_abs_diff(&out.outputs[1]) > 1e-6);
}

#[test]
fn non_local_matches_oracle_and_is_permutation_equivariant() {
    let m = common::random_model(
        ArchConfig {
            stages: 1,
            channels: 8,
            inner_channels: 4,
            weight_sharing: true,
        },
        27,
        0.5,
    );
    let x = common::random_tensor([1, 4, 4, 8], 28, 1.0);
    let nl = &m.stage(0).nl;
    let (z, trace) = non_local_traced(&x, nl).unwrap();
    assert!(z.max_abs_diff(&non_local_oracle(&x, nl)) < 1e-12);
    for row in trace.attention[0].chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // Reverse the 16 positions: the output must be reversed the same way.
    let rev = |t: &Tensor<f64>| {
        let mut data = Vec::new();
        for px in t.data.chunks(t.c).rev() {
            data.extend_from_slice(px);
        }
        Tensor::from_vec(t.n, t.h, t.w, t.c, data).unwrap()
    };
    let (zr, _) = non_local_traced(&rev(&x), nl).unwrap();
    assert!(zr.max_abs_diff(&rev(&z)) < 1e-12);
}

#[test]
fn zeroed_residual_head_gives_identity() {
    let mut m = common::random_model(arch(3, false), 29, 0.5);
    m.zero_residual_heads();
    let x = common::random_image(24, 16, 30).to_tensor::<f64>();
    for out in forward(&x, &m).unwrap().outputs {
        assert_eq!(out, x);
    }
}

#[test]
fn checkpoint_roundtrip_reproduces_forward_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    for sharing in [true, false] {
        let model: ModelParams<f32> = common::random_model(arch(3, sharing), 31, 0.3).cast();
        save_checkpoint(
            &path,
            &Checkpoint {
                model: model.clone(),
                step: 9,
                optimizer: None,
            },
        )
        .unwrap();
        let loaded = load_checkpoint(&path, Some(model.arch)).unwrap();
        assert_eq!(loaded.step, 9);
        let x = common::random_image(16, 8, 32).to_tensor::<f32>();
        assert_eq!(
            forward(&x, &model).unwrap(),
            forward(&x, &loaded.model).unwrap()
        );
    }
}
