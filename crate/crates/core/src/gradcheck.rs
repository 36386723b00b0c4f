//! Central finite-difference gradient checks.
//!
//! Analytic gradients come from a [`Tape`] at the requested precision. The
//! numerical reference is a 64-bit central difference; by default any
//! coordinate where it disagrees with the analytic value is re-evaluated in
//! double-double, whose rounding noise stays far below the 64-bit tolerance
//! even for whole networks. Coordinates whose ±h
//! perturbation flips a ReLU mask or a max-pool winner are skipped and
//! replaced by fresh draws, since the derivative is undefined there.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::blocks::{build_block, Block, BlockKind, BlockSpec};
use crate::error::{HgError, Result};
use crate::graph::{Graph, Mode, Tape, Var};
use crate::hourglass::{Network, NetworkConfig};
use crate::params::{seeded_rng, Init, ParamStore};
use crate::tensor::{Real, Shape4, Tensor4};

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// A scalar function of (input, parameters) to differentiate.
pub trait Probe {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var>;
}

/// Precision of the finite-difference evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reference {
    F64,
    DoubleDouble,
    /// 64-bit, escalating to double-double when checking 64-bit gradients
    /// and the relative error exceeds [`ESCALATE_ABOVE`].
    #[default]
    Adaptive,
}

pub const ESCALATE_ABOVE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
    pub reference: Reference,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples: 20,
            seed: 0,
            mode: Mode::Train,
            reference: Reference::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < tol)
    }

    /// Tolerance used by the CLI for a given precision.
    pub fn tolerance(bits: u32) -> f64 {
        if bits >= 64 {
            1e-5
        } else {
            1e-3
        }
    }
}

fn evaluate<R: Real, P: Probe>(probe: &P, store: &ParamStore<R>, x: &Tensor4<R>, mode: Mode) -> Result<(R, u64)> {
    let mut tape = Tape::<R>::new(mode);
    let xv = tape.input(x.clone(), false);
    let l = probe.loss(&mut tape, store, xv)?;
    Ok((tape.value(l).item(), tape.kink_signature()))
}

enum Target {
    Input,
    Param(usize),
}

/// Perturbable copy of the input and parameters at reference precision.
struct RefEval<R> {
    store: ParamStore<R>,
    x: Tensor4<R>,
    base_kinks: u64,
    step: R,
}

impl<R: Real> RefEval<R> {
    fn new<P: Probe>(probe: &P, store: &ParamStore<f64>, x: &Tensor4<f64>, cfg: &GradcheckConfig) -> Result<Self> {
        let store: ParamStore<R> = store.cast();
        let x: Tensor4<R> = x.cast();
        let (_, base_kinks) = evaluate(probe, &store, &x, cfg.mode)?;
        Ok(Self {
            store,
            x,
            base_kinks,
            step: R::of(cfg.step),
        })
    }

    fn slot(&mut self, target: &Target, k: usize) -> &mut R {
        match target {
            Target::Input => &mut self.x.data_mut()[k],
            Target::Param(i) => &mut self.store.tensor_mut(crate::params::ParamId(*i)).data_mut()[k],
        }
    }

    fn loss_at<P: Probe>(&mut self, probe: &P, target: &Target, k: usize, delta: R, mode: Mode) -> Result<(R, u64)> {
        let orig = *self.slot(target, k);
        *self.slot(target, k) = orig + delta;
        let r = evaluate(probe, &self.store, &self.x, mode);
        *self.slot(target, k) = orig;
        r
    }

    /// Central difference, or `None` when either side crosses a kink.
    fn derivative<P: Probe>(&mut self, probe: &P, target: &Target, k: usize, mode: Mode) -> Result<Option<f64>> {
        let h = self.step;
        let (lp, kp) = self.loss_at(probe, target, k, h, mode)?;
        let (lm, km) = self.loss_at(probe, target, k, -h, mode)?;
        if kp != self.base_kinks || km != self.base_kinks {
            return Ok(None);
        }
        Ok(Some(((lp - lm) / (h + h)).as_f64()))
    }
}

/// Compares analytic gradients at precision `T` with central differences
/// for the input and every trainable parameter tensor.
pub fn gradcheck<T: Real, P: Probe>(
    probe: &P,
    store: &ParamStore<f64>,
    input: &Tensor4<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let store_t: ParamStore<T> = store.cast();
    let mut tape = Tape::<T>::new(cfg.mode);
    let xv = tape.input(input.cast(), true);
    let l = probe.loss(&mut tape, &store_t, xv)?;
    tape.backward(l)?;
    let input_grad: Vec<f64> = tape
        .grad(xv)
        .map(|g| g.iter().map(|v| v.as_f64()).collect())
        .unwrap_or_else(|| vec![0.0; input.numel()]);
    let param_grads: std::collections::BTreeMap<usize, Vec<f64>> = tape
        .param_grads()
        .into_iter()
        .map(|(id, g)| (id.0, g.iter().map(|v| v.as_f64()).collect()))
        .collect();

    let mut fast = match cfg.reference {
        Reference::DoubleDouble => None,
        _ => Some(RefEval::<f64>::new(probe, store, input, cfg)?),
    };
    let mut precise: Option<RefEval<twofloat::TwoFloat>> = None;
    let mut rng = seeded_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut targets = vec![(Target::Input, "input".to_string())];
    for id in store.trainable_ids() {
        targets.push((Target::Param(id.0), store.name(id).to_string()));
    }

    let mut out = Vec::new();
    for (target, name) in targets {
        let (numel, analytic) = match target {
            Target::Input => (input.numel(), input_grad.clone()),
            Target::Param(i) => {
                let n = store.entries()[i].tensor.numel();
                (n, param_grads.get(&i).cloned().unwrap_or_else(|| vec![0.0; n]))
            }
        };
        let order = sample(&mut rng, numel, numel).into_vec();
        let want = cfg.samples.min(numel);
        let mut check = TensorCheck {
            name,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for k in order {
            if check.checked == want {
                break;
            }
            let mut numeric = match &mut fast {
                Some(f) => f.derivative(probe, &target, k, cfg.mode)?,
                None => None,
            };
            let escalate = match (cfg.reference, numeric) {
                (Reference::F64, _) | (Reference::Adaptive, None) => false,
                (Reference::DoubleDouble, _) => true,
                (Reference::Adaptive, Some(d)) => T::BITS >= 64 && !(relative_error(analytic[k], d) <= ESCALATE_ABOVE),
            };
            if escalate {
                if precise.is_none() {
                    precise = Some(RefEval::new(probe, store, input, cfg)?);
                }
                numeric = precise.as_mut().expect("initialized").derivative(probe, &target, k, cfg.mode)?;
            }
            let Some(numeric) = numeric else {
                check.skipped += 1;
                continue;
            };
            let err = relative_error(analytic[k], numeric);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            check.max_rel_err = check.max_rel_err.max(err);
            check.checked += 1;
        }
        // Tensors smaller than the sample count are checked on every
        // kink-free coordinate; larger ones must reach the full count.
        let enough = if numel > cfg.samples { check.checked == want } else { check.checked > 0 };
        if !enough {
            return Err(HgError::Training(format!(
                "gradcheck on {}: only {} of {} coordinates avoid nondifferentiable points",
                check.name, check.checked, want
            )));
        }
        out.push(check);
    }
    Ok(GradcheckReport { tensors: out })
}

/// Loss `Σ w ⊙ f(x)` with fixed random weights `w`.
pub struct ProjectedBlock {
    pub block: Block,
    pub weights: Tensor4<f64>,
}

impl Probe for ProjectedBlock {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.block.forward(tape, store, x)?;
        tape.dot_const(y, &self.weights.cast())
    }
}

pub fn random_tensor(shape: Shape4, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gives every BN shift and conv bias a random value so that no parameter
/// sits at a symmetric point with a vanishing gradient.
pub fn jitter_params(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = store.tensor_mut(id);
        if name.ends_with("/bias") || name.ends_with("/beta") || name.ends_with("/gamma") {
            for v in t.data_mut() {
                *v += scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// Block test geometry: 16 channels in and out, bottleneck 8, batch 2.
pub fn block_probe(kind: BlockKind, seed: u64) -> Result<(ProjectedBlock, ParamStore<f64>, Tensor4<f64>)> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = seeded_rng(seed);
    let spec = BlockSpec::new(kind, 16, 16).with_mid(8);
    let block = build_block(&mut Init::new(&mut store, &mut rng).scope(kind.name()), &spec)?;
    jitter_params(&mut store, &mut rng, 0.1);
    let shape = Shape4::new(2, 16, 6, 6);
    let x = random_tensor(shape, &mut rng);
    let weights = random_tensor(shape, &mut rng);
    Ok((ProjectedBlock { block, weights }, store, x))
}

pub fn check_block<T: Real>(kind: BlockKind, seed: u64) -> Result<GradcheckReport> {
    let (probe, store, x) = block_probe(kind, seed)?;
    let cfg = GradcheckConfig {
        seed,
        ..GradcheckConfig::default()
    };
    gradcheck::<T, _>(&probe, &store, &x, &cfg)
}

/// Loss `Σ_s (w_s ⊙ heatmaps_s + u_s ⊙ tail_s)` over every stack.
pub struct ProjectedNetwork {
    pub network: Network,
    pub heatmap_weights: Vec<Tensor4<f64>>,
    pub tail_weights: Vec<Tensor4<f64>>,
}

impl Probe for ProjectedNetwork {
    fn loss<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let out = self.network.forward(tape, store, x)?;
        let mut total: Option<Var> = None;
        for (s, (h, f)) in out.heatmaps.iter().zip(&out.tail_features).enumerate() {
            for (v, w) in [(*h, &self.heatmap_weights[s]), (*f, &self.tail_weights[s])] {
                let term = tape.dot_const(v, &w.cast())?;
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
            }
        }
        total.ok_or_else(|| HgError::config("network has no stacks"))
    }
}

/// Moves running statistics away from their initial `(0, 1)`:
/// mean `+ scale·N(0,1)`, variance `· (1 + scale·|N(0,1)|)`.
pub fn jitter_running_stats(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    for i in 0..store.len() {
        let id = crate::params::ParamId(i);
        let name = store.name(id).to_string();
        let mean = name.ends_with("/running_mean");
        if !(mean || name.ends_with("/running_var")) {
            continue;
        }
        for v in store.tensor_mut(id).data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            if mean {
                *v += scale * z;
            } else {
                *v *= 1.0 + scale * z.abs();
            }
        }
    }
}

/// Whole-network probe on a batch of 2, with jittered parameters and
/// running statistics.
pub fn network_probe(
    config: &NetworkConfig,
    seed: u64,
) -> Result<(ProjectedNetwork, ParamStore<f64>, Tensor4<f64>)> {
    let (network, mut store) = Network::with_seed::<f64>(config, seed)?;
    let mut rng = seeded_rng(seed ^ 0x5eed);
    jitter_params(&mut store, &mut rng, 0.1);
    jitter_running_stats(&mut store, &mut rng, 0.1);
    let x = random_tensor(network.input_shape(2), &mut rng);
    let hm = network.heatmap_shape(2);
    let tail = Shape4::new(2, config.channels_main, hm.h, hm.w);
    let mut heatmap_weights = Vec::new();
    let mut tail_weights = Vec::new();
    for _ in 0..config.num_stacks {
        heatmap_weights.push(random_tensor(hm, &mut rng));
        tail_weights.push(random_tensor(tail, &mut rng));
    }
    Ok((
        ProjectedNetwork {
            network,
            heatmap_weights,
            tail_weights,
        },
        store,
        x,
    ))
}

/// Checks the composed network with batch norm on running statistics.
///
/// In training mode every conv bias whose output only reaches a batch norm
/// has an exactly zero gradient, and the check would compare rounding noise
/// on those tensors; block-level checks cover training-mode batch norm.
pub fn check_network<T: Real>(config: &NetworkConfig, seed: u64) -> Result<GradcheckReport> {
    let (probe, store, x) = network_probe(config, seed)?;
    let cfg = GradcheckConfig {
        seed,
        mode: Mode::Eval,
        ..GradcheckConfig::default()
    };
    gradcheck::<T, _>(&probe, &store, &x, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn double_double_keeps_fractions() {
        let x = twofloat::TwoFloat::of(1e-5);
        assert_eq!(x.as_f64(), 1e-5);
        let third = twofloat::TwoFloat::of(1.0) / twofloat::TwoFloat::of(3.0);
        assert!((third.as_f64() - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn non_finite_error_never_passes() {
        let r = GradcheckReport {
            tensors: vec![TensorCheck {
                name: "x".into(),
                checked: 1,
                skipped: 0,
                max_rel_err: f64::INFINITY,
            }],
        };
        assert!(!r.passes(1e-5));
    }

    #[test]
    fn residual_block_passes_in_f64() {
        let r = check_block::<f64>(BlockKind::Residual, 3).unwrap();
        assert!(r.passes(1e-5), "{:?}", r.tensors);
        assert!(r.tensors.iter().all(|t| t.checked >= 1));
    }

    #[test]
    fn every_block_kind_passes_in_both_precisions() {
        for kind in BlockKind::ALL {
            let r = check_block::<f64>(kind, 7).unwrap();
            assert!(r.passes(GradcheckReport::tolerance(64)), "{kind:?}: {:?}", r.tensors);
            let r = check_block::<f32>(kind, 7).unwrap();
            assert!(r.passes(GradcheckReport::tolerance(32)), "{kind:?}: {:?}", r.tensors);
        }
    }
}
