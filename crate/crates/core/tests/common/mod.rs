//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use hgnet::metrics::{PckhSample, GROUPS, NUM_JOINTS};
use hgnet::params::{seeded_rng, Init, ParamStore};
use hgnet::tensor::{ConvSpec, Shape4, Tensor4};
use rand::Rng;

/// Direct transcription of the dilated cross-correlation
/// `y[o,i,j] = Σ_c Σ_u Σ_v w[o,c,u,v] · x[c, s·i + l·u − p, s·j + l·v − p]`,
/// with out-of-range taps contributing nothing.
pub fn conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, spec: &ConvSpec) -> Tensor4<f64> {
    let xs = x.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let l = spec.dilation;
    let oh = (xs.h + 2 * ph - l * (kh - 1) - 1) / sh + 1;
    let ow = (xs.w + 2 * pw - l * (kw - 1) - 1) / sw + 1;
    let cin = spec.in_channels / spec.groups;
    let cout = spec.out_channels / spec.groups;
    let mut y = Tensor4::zeros(Shape4::new(xs.n, spec.out_channels, oh, ow));
    for n in 0..xs.n {
        for o in 0..spec.out_channels {
            let g = o / cout;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (sh * i + l * u) as isize - ph as isize;
                                let q = (sw * j + l * v) as isize - pw as isize;
                                if r < 0 || q < 0 || r >= xs.h as isize || q >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, u, v) * x.at(n, g * cin + c, r as usize, q as usize);
                            }
                        }
                    }
                    let k = y.shape().index(n, o, i, j);
                    y.data_mut()[k] = acc;
                }
            }
        }
    }
    y
}

/// Undilated convolution written without any dilation term.
pub fn plain_conv_oracle(x: &Tensor4<f64>, w: &Tensor4<f64>, stride: usize, pad: usize) -> Tensor4<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    let mut y = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0f64;
                    for c in 0..ws.c {
                        for u in 0..ws.h {
                            for v in 0..ws.w {
                                let r = (stride * i + u) as isize - pad as isize;
                                let q = (stride * j + v) as isize - pad as isize;
                                if (0..xs.h as isize).contains(&r) && (0..xs.w as isize).contains(&q) {
                                    acc += w.at(o, c, u, v) * x.at(n, c, r as usize, q as usize);
                                }
                            }
                        }
                    }
                    let k = y.shape().index(n, o, i, j);
                    y.data_mut()[k] = acc;
                }
            }
        }
    }
    y
}

pub fn uniform_tensor(shape: Shape4, rng: &mut impl Rng) -> Tensor4<f64> {
    let data = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// `λ·(α·ΣL_k + (1−α)·L_p)` with the perceptual term, `ΣL_k` without.
pub fn objective_by_hand(lambda: f64, alpha: f64, stacks: &[f64], percep: Option<f64>) -> f64 {
    let s: f64 = stacks.iter().sum();
    match percep {
        Some(p) => lambda * (alpha * s + (1.0 - alpha) * p),
        None => s,
    }
}

/// Per-joint (correct, visible) counts by explicit distance comparison.
pub fn pckh_brute_force(samples: &[PckhSample], threshold: f64) -> ([usize; NUM_JOINTS], [usize; NUM_JOINTS]) {
    let mut correct = [0; NUM_JOINTS];
    let mut seen = [0; NUM_JOINTS];
    for s in samples {
        for j in 0..NUM_JOINTS {
            if !s.visible[j] {
                continue;
            }
            seen[j] += 1;
            let dx = s.pred[j][0] - s.gt[j][0];
            let dy = s.pred[j][1] - s.gt[j][1];
            if (dx * dx + dy * dy).sqrt() <= threshold * s.head_size {
                correct[j] += 1;
            }
        }
    }
    (correct, seen)
}

/// Fraction correct over the scored joints.
pub fn pckh_brute_mean(samples: &[PckhSample], threshold: f64) -> f64 {
    let (c, n) = pckh_brute_force(samples, threshold);
    let scored: Vec<usize> = GROUPS.iter().flat_map(|(_, js)| js.iter().copied()).collect();
    let hit: usize = scored.iter().map(|j| c[*j]).sum();
    let all: usize = scored.iter().map(|j| n[*j]).sum();
    if all == 0 {
        0.0
    } else {
        hit as f64 / all as f64
    }
}

/// Random PCKh samples; a quarter of the joints sit exactly at the
/// threshold distance along an axis, others are scattered or hidden.
pub fn random_pckh_samples(count: usize, seed: u64) -> Vec<PckhSample> {
    let mut rng = seeded_rng(seed);
    (0..count)
        .map(|_| {
            // Powers of two keep 0.5·head exact and the axis offset exact.
            let head = f64::from(1u32 << rng.random_range(2..7));
            let mut gt = [[0.0; 2]; NUM_JOINTS];
            let mut pred = [[0.0; 2]; NUM_JOINTS];
            let mut visible = [true; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                gt[j] = [rng.random_range(0.0..256.0f64).floor(), rng.random_range(0.0..256.0f64).floor()];
                match rng.random_range(0..8) {
                    0 => visible[j] = false,
                    1 | 2 => {
                        let d = 0.5 * head * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        pred[j] = if rng.random_bool(0.5) {
                            [gt[j][0] + d, gt[j][1]]
                        } else {
                            [gt[j][0], gt[j][1] + d]
                        };
                        continue;
                    }
                    _ => {}
                }
                let r = rng.random_range(0.0..1.2) * head;
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                pred[j] = [gt[j][0] + r * t.cos(), gt[j][1] + r * t.sin()];
            }
            PckhSample {
                pred,
                gt,
                visible,
                head_size: head,
            }
        })
        .collect()
}

pub fn trainable_params(store: &ParamStore<f32>) -> usize {
    store.trainable_ids().map(|id| store.tensor(id).numel()).sum()
}

/// Trainable parameter count of one block built at the given widths.
pub fn block_params(style: &hgnet::blocks::BlockStyle, cin: usize, cout: usize, mid: usize) -> usize {
    let mut store = ParamStore::<f32>::new();
    let mut rng = seeded_rng(0);
    let spec = style.spec(cin, cout, Some(mid));
    hgnet::blocks::build_block(&mut Init::new(&mut store, &mut rng), &spec).unwrap();
    trainable_params(&store)
}
