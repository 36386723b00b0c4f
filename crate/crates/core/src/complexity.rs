//! Per-layer parameter and multiply-add accounting by shape propagation.

use std::fmt::Write as _;

use crate::error::{HgError, Result};
use crate::graph::{LayerCost, ShapeTracer};
use crate::hourglass::Network;
use crate::params::ParamStore;
use crate::tensor::{Real, Shape4};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_madds: u64,
    pub input_shape: Shape4,
}

/// Signed percentage changes of a candidate relative to a baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deltas {
    pub params_pct: f64,
    pub madds_pct: f64,
}

impl ComplexityReport {
    pub fn from_rows(rows: Vec<LayerCost>, input_shape: Shape4) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_madds = rows.iter().map(|r| r.madds).sum();
        Self {
            rows,
            total_params,
            total_madds,
            input_shape,
        }
    }

    /// Totals grouped by the first `depth` components of the layer name.
    pub fn sections(&self, depth: usize) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for r in &self.rows {
            let key = r.name.split('/').take(depth).collect::<Vec<_>>().join("/");
            match out.iter_mut().find(|(k, _, _)| *k == key) {
                Some(e) => {
                    e.1 += r.params;
                    e.2 += r.madds;
                }
                None => out.push((key, r.params, r.madds)),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,madds,shape\n");
        for r in &self.rows {
            let o = r.output;
            let _ = writeln!(s, "{},{},{},{}x{}x{}", r.name, r.params, r.madds, o.c, o.h, o.w);
        }
        let i = self.input_shape;
        let _ = writeln!(
            s,
            "TOTAL,{},{},{}x{}x{}",
            self.total_params, self.total_madds, i.c, i.h, i.w
        );
        s
    }

    /// Reads the totals back from a CSV written by [`Self::to_csv`].
    pub fn totals_from_csv(text: &str) -> Result<(u64, u64)> {
        for line in text.lines() {
            let mut f = line.split(',');
            if f.next() == Some("TOTAL") {
                let p = f.next().and_then(|v| v.trim().parse().ok());
                let m = f.next().and_then(|v| v.trim().parse().ok());
                if let (Some(p), Some(m)) = (p, m) {
                    return Ok((p, m));
                }
                return Err(HgError::data(format!("malformed TOTAL row: {line}")));
            }
        }
        Err(HgError::data("complexity CSV has no TOTAL row"))
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<w$}  {:>12}  {:>15}  shape", "layer", "params", "madds");
        for r in &self.rows {
            let o = r.output;
            let _ = writeln!(
                s,
                "{:<w$}  {:>12}  {:>15}  {}x{}x{}",
                r.name, r.params, r.madds, o.c, o.h, o.w
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:>12}  {:>15}  ({:.3}M params, {:.3}G MAdds)",
            "TOTAL",
            self.total_params,
            self.total_madds,
            self.total_params as f64 / 1e6,
            self.total_madds as f64 / 1e9
        );
        s
    }
}

/// Traces one image of shape `input` through the network.
pub fn count_madds<T: Real>(net: &Network, store: &ParamStore<T>, input: Shape4) -> Result<ComplexityReport> {
    if input.n != 1 {
        return Err(HgError::config(format!(
            "complexity is reported per image; batch must be 1, got {}",
            input.n
        )));
    }
    let mut tracer = ShapeTracer::new();
    let x = tracer.input(input)?;
    net.forward(&mut tracer, store, x)?;
    Ok(ComplexityReport::from_rows(tracer.into_rows(), input))
}

/// Parameter (and MAdd) report at the network's configured resolution.
pub fn count_params<T: Real>(net: &Network, store: &ParamStore<T>) -> ComplexityReport {
    count_madds(net, store, net.input_shape(1)).expect("configured input shape is valid")
}

pub fn compare(baseline: &ComplexityReport, candidate: &ComplexityReport) -> Result<Deltas> {
    if baseline.input_shape != candidate.input_shape {
        return Err(HgError::usage(format!(
            "reports computed at different input shapes: {} vs {}",
            baseline.input_shape, candidate.input_shape
        )));
    }
    percent_deltas(
        (baseline.total_params as f64, baseline.total_madds as f64),
        (candidate.total_params as f64, candidate.total_madds as f64),
    )
}

/// `100·(candidate − baseline)/baseline` for (params, madds).
pub fn percent_deltas(baseline: (f64, f64), candidate: (f64, f64)) -> Result<Deltas> {
    if baseline.0 <= 0.0 || baseline.1 <= 0.0 {
        return Err(HgError::usage("baseline params and MAdds must be positive"));
    }
    Ok(Deltas {
        params_pct: 100.0 * (candidate.0 - baseline.0) / baseline.0,
        madds_pct: 100.0 * (candidate.1 - baseline.1) / baseline.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hourglass::NetworkConfig;

    #[test]
    fn toy_report_matches_store() {
        let (net, store) = Network::with_seed::<f32>(&NetworkConfig::toy(), 0).unwrap();
        let r = count_params(&net, &store);
        assert_eq!(r.total_params as usize, store.num_trainable());
        let csv = r.to_csv();
        assert_eq!(
            ComplexityReport::totals_from_csv(&csv).unwrap(),
            (r.total_params, r.total_madds)
        );
        assert!(compare(&r, &r).unwrap() == Deltas { params_pct: 0.0, madds_pct: 0.0 });
    }

    #[test]
    fn reference_deltas() {
        let d = percent_deltas((6.7e6, 9.14e9), (0.94e6, 2.34e9)).unwrap();
        assert!((d.params_pct + 85.97).abs() < 0.01);
        assert!((d.madds_pct + 74.40).abs() < 0.01);
    }
}
