//! JSON-lines annotation files.
//!
//! One object per line:
//! `{"joints": [[x, y] ×16], "visible": [bool ×16], "head_size": f, "pred_joints": [[x, y] ×16]}`
//! with `pred_joints` optional. Joints follow the MPII order of
//! [`crate::metrics::JOINT_NAMES`]. Blank lines are ignored.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HgError, Result};
use crate::metrics::{Joints, PckhSample, NUM_JOINTS};

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub joints: Joints,
    pub visible: [bool; NUM_JOINTS],
    pub head_size: f64,
    pub pred_joints: Option<Joints>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    joints: Vec<[f64; 2]>,
    visible: Vec<bool>,
    head_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred_joints: Option<Vec<[f64; 2]>>,
}

fn joints_from(v: Vec<[f64; 2]>, field: &str, line: usize) -> Result<Joints> {
    let n = v.len();
    let j: Joints = v.try_into().map_err(|_| {
        HgError::data(format!("line {line}: {field} has {n} entries, expected {NUM_JOINTS}"))
    })?;
    if j.iter().flatten().any(|c| !c.is_finite()) {
        return Err(HgError::data(format!("line {line}: {field} contains a non-finite value")));
    }
    Ok(j)
}

impl Annotation {
    fn from_record(r: Record, line: usize) -> Result<Self> {
        let joints = joints_from(r.joints, "joints", line)?;
        let n = r.visible.len();
        let visible: [bool; NUM_JOINTS] = r.visible.try_into().map_err(|_| {
            HgError::data(format!("line {line}: visible has {n} entries, expected {NUM_JOINTS}"))
        })?;
        if !(r.head_size > 0.0 && r.head_size.is_finite()) {
            return Err(HgError::data(format!(
                "line {line}: head_size must be positive, got {}",
                r.head_size
            )));
        }
        let pred_joints = r
            .pred_joints
            .map(|p| joints_from(p, "pred_joints", line))
            .transpose()?;
        Ok(Self {
            joints,
            visible,
            head_size: r.head_size,
            pred_joints,
        })
    }

    pub fn to_json_line(&self) -> String {
        let r = Record {
            joints: self.joints.to_vec(),
            visible: self.visible.to_vec(),
            head_size: self.head_size,
            pred_joints: self.pred_joints.map(|p| p.to_vec()),
        };
        serde_json::to_string(&r).expect("annotation serializes")
    }

    /// PCKh input using the stored predictions.
    pub fn pckh_sample(&self) -> Option<PckhSample> {
        Some(PckhSample {
            pred: self.pred_joints?,
            gt: self.joints,
            visible: self.visible,
            head_size: self.head_size,
        })
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(raw)
            .map_err(|e| HgError::data(format!("line {line}: {e}")))?;
        out.push(Annotation::from_record(r, line)?);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_annotations(&text)
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[Annotation]) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    for r in records {
        writeln!(f, "{}", r.to_json_line())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(head: f64) -> String {
        let j: Vec<[f64; 2]> = (0..16).map(|i| [i as f64, 2.0 * i as f64 + 0.125]).collect();
        let v: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        serde_json::json!({"joints": j, "visible": v, "head_size": head}).to_string()
    }

    #[test]
    fn empty_and_roundtrip() {
        assert!(parse_annotations("").unwrap().is_empty());
        let text = format!("{}\n\n{}\n", line(3.5), line(7.0));
        let recs = parse_annotations(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].joints[5], [5.0, 10.125]);
        assert!(!recs[0].visible[3] && recs[0].visible[4]);
        assert_eq!(recs[1].head_size, 7.0);
        let again: Vec<_> = recs.iter().map(|r| r.to_json_line()).collect();
        assert_eq!(parse_annotations(&again.join("\n")).unwrap(), recs);
    }

    #[test]
    fn errors_name_the_line() {
        let mut lines: Vec<String> = (0..10).map(|_| line(1.0)).collect();
        lines[6] = "{\"joints\": [[0,0]], \"visible\": [], \"head_size\": 1}".into();
        let e = parse_annotations(&lines.join("\n")).unwrap_err().to_string();
        assert!(e.contains("line 7"), "{e}");
        let e = parse_annotations(&line(0.0)).unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("head_size"), "{e}");
        let e = parse_annotations("not json").unwrap_err();
        assert!(matches!(e, HgError::Data(_)));
    }
}
