//! Heatmap decoding, PCKh and the accuracy/compute tradeoff score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::complexity::percent_deltas;
use crate::error::{HgError, Result};
use crate::tensor::{Real, Tensor4};

pub const NUM_JOINTS: usize = 16;

/// MPII joint order.
pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "r_ankle",
    "r_knee",
    "r_hip",
    "l_hip",
    "l_knee",
    "l_ankle",
    "pelvis",
    "thorax",
    "upper_neck",
    "head_top",
    "r_wrist",
    "r_elbow",
    "r_shoulder",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
];

/// Reported joint groups in table order. Pelvis and thorax are not scored.
pub const GROUPS: [(&str, [usize; 2]); 7] = [
    ("Head", [8, 9]),
    ("Shoulder", [12, 13]),
    ("Elbow", [11, 14]),
    ("Wrist", [10, 15]),
    ("Hip", [2, 3]),
    ("Knee", [1, 4]),
    ("Ankle", [0, 5]),
];

pub type Joints = [[f64; 2]; NUM_JOINTS];

/// Argmax location `(x, y)` of every joint channel, in heatmap pixels.
///
/// Ties resolve to the first maximum in row-major order. With `refine`, the
/// location moves a quarter pixel toward the larger horizontal and vertical
/// neighbor.
pub fn decode_heatmap<T: Real>(heatmap: &Tensor4<T>, refine: bool) -> Vec<Vec<[f64; 2]>> {
    let s = heatmap.shape();
    let d = heatmap.data();
    let mut out = Vec::with_capacity(s.n);
    for n in 0..s.n {
        let mut joints = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            let plane = &d[base..base + s.plane()];
            let mut best = 0;
            for (i, v) in plane.iter().enumerate() {
                if *v > plane[best] {
                    best = i;
                }
            }
            let (y, x) = (best / s.w, best % s.w);
            let (mut fx, mut fy) = (x as f64, y as f64);
            if refine {
                let at = |yy: usize, xx: usize| plane[yy * s.w + xx];
                if x > 0 && x + 1 < s.w {
                    let diff = at(y, x + 1) - at(y, x - 1);
                    fx += 0.25 * sign(diff);
                }
                if y > 0 && y + 1 < s.h {
                    let diff = at(y + 1, x) - at(y - 1, x);
                    fy += 0.25 * sign(diff);
                }
            }
            joints.push([fx, fy]);
        }
        out.push(joints);
    }
    out
}

fn sign<T: Real>(v: T) -> f64 {
    if v > T::zero() {
        1.0
    } else if v < T::zero() {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckhSample {
    pub pred: Joints,
    pub gt: Joints,
    pub visible: [bool; NUM_JOINTS],
    pub head_size: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Average over every evaluated joint.
    #[default]
    PerJoint,
    /// Average of the group accuracies.
    PerGroup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupScore {
    pub name: &'static str,
    pub correct: usize,
    pub count: usize,
}

impl GroupScore {
    /// Fraction correct; 0 for a group with no visible joints.
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckhResult {
    pub groups: Vec<GroupScore>,
    pub mean: f64,
    pub mode: MeanMode,
}

impl PckhResult {
    pub fn group(&self, name: &str) -> Option<&GroupScore> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Header plus one row of percentages in table order.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = write!(s, "{},", g.name);
        }
        s.push_str("Mean\n");
        for g in &self.groups {
            let _ = write!(s, "{:.2},", 100.0 * g.accuracy());
        }
        let _ = writeln!(s, "{:.2}", 100.0 * self.mean);
        s
    }

    /// Reads the `Mean` column (percent) from a CSV written by [`Self::to_csv`].
    pub fn mean_from_csv(text: &str) -> Result<f64> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| HgError::data("empty PCKh CSV"))?;
        let col = header
            .split(',')
            .position(|h| h.trim().eq_ignore_ascii_case("mean"))
            .ok_or_else(|| HgError::data("PCKh CSV has no Mean column"))?;
        let row = lines.next().ok_or_else(|| HgError::data("PCKh CSV has no data row"))?;
        row.split(',')
            .nth(col)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| HgError::data(format!("PCKh CSV: unreadable Mean value in '{row}'")))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let _ = write!(s, "{:>9}", g.name);
        }
        let _ = writeln!(s, "{:>9}", "Mean");
        for g in &self.groups {
            let _ = write!(s, "{:>9.2}", 100.0 * g.accuracy());
        }
        let _ = writeln!(s, "{:>9.2}", 100.0 * self.mean);
        s
    }
}

/// A joint is correct when its distance to ground truth is at most
/// `threshold · head_size`. Invisible joints are not evaluated.
pub fn pckh(samples: &[PckhSample], threshold: f64, mode: MeanMode) -> Result<PckhResult> {
    let mut correct = [0usize; NUM_JOINTS];
    let mut count = [0usize; NUM_JOINTS];
    for (i, s) in samples.iter().enumerate() {
        if !(s.head_size > 0.0 && s.head_size.is_finite()) {
            return Err(HgError::data(format!(
                "sample {i}: head size must be positive, got {}",
                s.head_size
            )));
        }
        let limit = threshold * s.head_size;
        for j in 0..NUM_JOINTS {
            if !s.visible[j] {
                continue;
            }
            count[j] += 1;
            let d = (s.pred[j][0] - s.gt[j][0]).hypot(s.pred[j][1] - s.gt[j][1]);
            if d <= limit {
                correct[j] += 1;
            }
        }
    }
    let groups: Vec<GroupScore> = GROUPS
        .iter()
        .map(|(name, js)| GroupScore {
            name,
            correct: js.iter().map(|j| correct[*j]).sum(),
            count: js.iter().map(|j| count[*j]).sum(),
        })
        .collect();
    let mean = match mode {
        MeanMode::PerJoint => {
            let c: usize = groups.iter().map(|g| g.correct).sum();
            let n: usize = groups.iter().map(|g| g.count).sum();
            if n == 0 {
                0.0
            } else {
                c as f64 / n as f64
            }
        }
        MeanMode::PerGroup => {
            let scored: Vec<f64> = groups.iter().filter(|g| g.count > 0).map(|g| g.accuracy()).collect();
            if scored.is_empty() {
                0.0
            } else {
                scored.iter().sum::<f64>() / scored.len() as f64
            }
        }
    };
    Ok(PckhResult { groups, mean, mode })
}

/// Accuracy and compute of one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    /// Mean PCKh in percent.
    pub pckh: f64,
    pub params: f64,
    pub madds: f64,
}

/// `w_acc·ΔPCKh + w_params·(−Δparams%) + w_madds·(−ΔMAdds%)` relative to
/// the baseline, with ΔPCKh in percentage points.
pub fn tradeoff_metric(baseline: &ModelStats, candidate: &ModelStats, weights: [f64; 3]) -> Result<f64> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(HgError::usage(format!("weights must be nonnegative, got {weights:?}")));
    }
    let d = percent_deltas(
        (baseline.params, baseline.madds),
        (candidate.params, candidate.madds),
    )?;
    Ok(weights[0] * (candidate.pckh - baseline.pckh) - weights[1] * d.params_pct - weights[2] * d.madds_pct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn decode_peak_and_ties() {
        let mut h = Tensor4::<f32>::zeros(Shape4::new(1, 2, 32, 32));
        h.set(0, 0, 20, 10, 1.0);
        let d = decode_heatmap(&h, false);
        assert_eq!(d[0][0], [10.0, 20.0]);
        assert_eq!(d[0][1], [0.0, 0.0]);
        h.set(0, 0, 20, 11, 0.5);
        assert_eq!(decode_heatmap(&h, true)[0][0], [10.25, 20.0]);
    }

    #[test]
    fn tradeoff_examples() {
        let base = ModelStats { pckh: 59.76, params: 6.7e6, madds: 9.14e9 };
        let one = ModelStats { pckh: 56.95, ..base };
        assert!((tradeoff_metric(&base, &one, [1.0, 0.0, 0.0]).unwrap() + 2.81).abs() < 1e-9);
        let shuffle = ModelStats { pckh: 53.65, params: 0.94e6, madds: 4.10e9 };
        let v = tradeoff_metric(&base, &shuffle, [1.0, 0.1, 0.1]).unwrap();
        assert!((v - 8.00).abs() < 0.005, "{v}");
        assert_eq!(tradeoff_metric(&base, &base, [0.3, 0.5, 0.7]).unwrap(), 0.0);
        assert!(tradeoff_metric(&base, &base, [-1.0, 0.0, 0.0]).is_err());
        let zero = ModelStats { params: 0.0, ..base };
        assert!(matches!(tradeoff_metric(&zero, &base, [1.0, 1.0, 1.0]), Err(HgError::Usage(_))));
    }

    #[test]
    fn pckh_threshold_and_csv() {
        let gt = [[10.0, 10.0]; NUM_JOINTS];
        let mut pred = gt;
        pred[9] = [10.0 + 4.9, 10.0];
        pred[8] = [10.0 + 5.1, 10.0];
        let s = PckhSample { pred, gt, visible: [true; NUM_JOINTS], head_size: 10.0 };
        let r = pckh(&[s.clone()], 0.5, MeanMode::PerJoint).unwrap();
        assert_eq!(r.group("Head").unwrap().correct, 1);
        assert_eq!(r.group("Knee").unwrap().accuracy(), 1.0);
        assert!((PckhResult::mean_from_csv(&r.to_csv()).unwrap() - 100.0 * 13.0 / 14.0).abs() < 0.01);
        let bad = PckhSample { head_size: 0.0, ..s };
        assert!(pckh(&[bad], 0.5, MeanMode::PerJoint).unwrap_err().to_string().contains("sample 0"));
    }
}
