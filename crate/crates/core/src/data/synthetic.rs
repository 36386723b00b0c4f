//! Seeded stick-figure images with MPII-style labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HgError, Result};
use crate::metrics::{Joints, NUM_JOINTS};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSample {
    /// `1×3×R×R`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    pub joints: Joints,
    pub visible: [bool; NUM_JOINTS],
    /// Upper-neck to head-top distance in pixels.
    pub head_size: f64,
}

/// Skeleton edges in MPII joint indices.
pub const LIMBS: [(usize, usize); 15] = [
    (0, 1),
    (1, 2),
    (2, 6),
    (3, 6),
    (3, 4),
    (4, 5),
    (6, 7),
    (7, 8),
    (8, 9),
    (10, 11),
    (11, 12),
    (12, 7),
    (13, 7),
    (13, 14),
    (14, 15),
];

/// Joints that may be hidden; the head joints define the head size and
/// stay visible.
const OCCLUDABLE: [usize; 8] = [0, 1, 4, 5, 10, 11, 14, 15];

fn joint_color(j: usize) -> [f32; 3] {
    let h = j as f32 / NUM_JOINTS as f32;
    let f = |o: f32| 0.5 + 0.5 * (2.0 * std::f32::consts::PI * (h + o)).cos();
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

fn dir(angle: f64) -> [f64; 2] {
    [angle.cos(), angle.sin()]
}

fn step(p: [f64; 2], len: f64, angle: f64) -> [f64; 2] {
    let d = dir(angle);
    [p[0] + len * d[0], p[1] + len * d[1]]
}

/// Joint layout in body units, image y pointing down.
fn skeleton(rng: &mut ChaCha8Rng) -> Joints {
    let mut j = [[0.0; 2]; NUM_JOINTS];
    let jitter = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..=a);
    let up = -PI / 2.0 + jitter(rng, 0.35);
    let lean = up + PI / 2.0;
    let pelvis = [0.0, 0.0];
    j[6] = pelvis;
    j[7] = step(pelvis, rng.random_range(0.9..1.2), up);
    j[8] = step(j[7], rng.random_range(0.18..0.25), up + jitter(rng, 0.2));
    j[9] = step(j[8], rng.random_range(0.3..0.4), up + jitter(rng, 0.3));
    let hip_w = rng.random_range(0.18..0.26);
    j[2] = step(pelvis, hip_w, lean);
    j[3] = step(pelvis, -hip_w, lean);
    let sh_w = rng.random_range(0.3..0.4);
    j[12] = step(j[7], sh_w, lean);
    j[13] = step(j[7], -sh_w, lean);
    let down = PI / 2.0;
    for (hip, knee, ankle) in [(2, 1, 0), (3, 4, 5)] {
        let a = down + jitter(rng, 0.6);
        j[knee] = step(j[hip], rng.random_range(0.75..0.95), a);
        j[ankle] = step(j[knee], rng.random_range(0.7..0.9), a + jitter(rng, 0.7));
    }
    for (sh, elbow, wrist) in [(12, 11, 10), (13, 14, 15)] {
        let a = rng.random_range(0.0..2.0 * PI);
        j[elbow] = step(j[sh], rng.random_range(0.5..0.65), a);
        j[wrist] = step(j[elbow], rng.random_range(0.45..0.6), a + jitter(rng, 1.5));
    }
    j
}

/// Scales and translates the figure so its bounding box fills a random
/// fraction of the frame, keeping a margin on every side.
fn place(rng: &mut ChaCha8Rng, body: &Joints, res: f64) -> Joints {
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in body {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
    let margin = 0.08 * res;
    let usable = res - 2.0 * margin;
    let scale = rng.random_range(0.6..0.95) * usable / extent;
    let mut off = [0.0; 2];
    for a in 0..2 {
        let size = (hi[a] - lo[a]) * scale;
        let slack = (usable - size).max(0.0);
        off[a] = margin + rng.random_range(0.0..=slack) - lo[a] * scale;
    }
    let mut out = [[0.0; 2]; NUM_JOINTS];
    for (o, p) in out.iter_mut().zip(body) {
        *o = [p[0] * scale + off[0], p[1] * scale + off[1]];
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let (wx, wy) = (p[0] - a[0], p[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (wx - t * vx).hypot(wy - t * vy)
}

fn render(rng: &mut ChaCha8Rng, joints: &Joints, visible: &[bool; NUM_JOINTS], res: usize) -> Tensor4<f32> {
    let mut img = Tensor4::<f32>::zeros(Shape4::new(1, 3, res, res));
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.25));
    for c in 0..3 {
        for y in 0..res {
            for x in 0..res {
                img.set(0, c, y, x, tint[c] + rng.random_range(0.0..0.12f32));
            }
        }
    }
    let scale = res as f64 / 64.0;
    let half_width = 0.9 * scale;
    let blob = 1.6 * scale;
    for y in 0..res {
        for x in 0..res {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let mut px = [img.at(0, 0, y, x), img.at(0, 1, y, x), img.at(0, 2, y, x)];
            for &(a, b) in &LIMBS {
                if !(visible[a] && visible[b]) {
                    continue;
                }
                let d = segment_distance(p, joints[a], joints[b]);
                let cover = (half_width + 0.5 - d).clamp(0.0, 1.0) as f32;
                if cover > 0.0 {
                    for v in &mut px {
                        *v = *v * (1.0 - cover) + 0.8 * cover;
                    }
                }
            }
            for (j, q) in joints.iter().enumerate() {
                if !visible[j] {
                    continue;
                }
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                let w = (-d2 / (2.0 * blob * blob)).exp() as f32;
                if w > 1e-3 {
                    let col = joint_color(j);
                    for (v, c) in px.iter_mut().zip(col) {
                        *v = *v * (1.0 - w) + c * w;
                    }
                }
            }
            for (c, v) in px.iter().enumerate() {
                img.set(0, c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// One sample, a pure function of `(resolution, seed, index)`.
pub fn synthetic_sample(resolution: usize, seed: u64, index: u64) -> PoseSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let body = skeleton(&mut rng);
    let joints = place(&mut rng, &body, resolution as f64);
    let mut visible = [true; NUM_JOINTS];
    for &j in &OCCLUDABLE {
        if rng.random_bool(0.05) {
            visible[j] = false;
        }
    }
    let image = render(&mut rng, &joints, &visible, resolution);
    let head_size = (joints[9][0] - joints[8][0]).hypot(joints[9][1] - joints[8][1]);
    PoseSample {
        image,
        joints,
        visible,
        head_size,
    }
}

pub fn generate_synthetic_dataset(count: usize, resolution: usize, seed: u64) -> Result<Vec<PoseSample>> {
    if count == 0 {
        return Err(HgError::config("synthetic dataset needs at least one sample"));
    }
    if resolution == 0 || resolution % 64 != 0 {
        return Err(HgError::config(format!(
            "synthetic resolution {resolution} not divisible by 64"
        )));
    }
    Ok((0..count as u64)
        .map(|i| synthetic_sample(resolution, seed, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contract_and_determinism() {
        let a = generate_synthetic_dataset(8, 64, 3).unwrap();
        assert_eq!(a.len(), 8);
        for s in &a {
            assert_eq!(s.image.shape(), Shape4::new(1, 3, 64, 64));
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.head_size > 0.0);
        }
        assert_eq!(a, generate_synthetic_dataset(8, 64, 3).unwrap());
        assert_ne!(a[0], generate_synthetic_dataset(1, 64, 4).unwrap()[0]);
        assert_eq!(a[5], synthetic_sample(64, 3, 5));
        assert!(generate_synthetic_dataset(1, 96, 0).is_err());
    }

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]), 1.0);
        assert_eq!(segment_distance([3.0, 4.0], [0.0, 0.0], [0.0, 0.0]), 5.0);
        assert_eq!(segment_distance([5.0, 0.0], [0.0, 0.0], [2.0, 0.0]), 3.0);
    }
}
