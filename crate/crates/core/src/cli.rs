//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::blocks::BlockKind;
use crate::complexity::{count_madds, ComplexityReport};
use crate::data::{generate_synthetic_dataset, load_annotations, load_checkpoint, write_annotations, Annotation};
use crate::error::{HgError, Result};
use crate::gradcheck::{check_block, check_network, GradcheckReport};
use crate::hourglass::Network;
use crate::metrics::{pckh, tradeoff_metric, MeanMode, ModelStats, PckhResult, PckhSample};
use crate::train::{evaluate, resolve_arch, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_GRADCHECK_FAIL: i32 = 1;
pub const EXIT_TRAINING_ABORT: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "hgnet", version, about = "Stacked-hourglass pose estimation on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer parameter and MAdds report for an architecture.
    Describe(DescribeArgs),
    /// Train from a TOML configuration.
    Train(TrainArgs),
    /// PCKh@0.5 of a checkpoint or of stored predictions.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a block or a network.
    Gradcheck(GradcheckArgs),
    /// Accuracy/compute tradeoff of a candidate against a baseline.
    Tradeoff(TradeoffArgs),
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    /// Architecture JSON file or preset name.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub input_res: Option<usize>,
    /// Write the per-layer report as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print totals per section at this name depth instead of every layer.
    #[arg(long)]
    pub sections: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `max_steps` from the config.
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MeanArg {
    PerJoint,
    PerGroup,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Network to run on synthetic samples.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines file with ground truth and `pred_joints`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Number of synthetic samples for checkpoint evaluation.
    #[arg(long, default_value_t = 64)]
    pub synthetic: usize,
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    /// Save the checkpoint's predictions as an annotation file.
    #[arg(long)]
    pub write_predictions: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MeanArg::PerJoint)]
    pub mean: MeanArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    P32,
    #[value(name = "64")]
    P64,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("target").required(true).args(["block", "network"])))]
pub struct GradcheckArgs {
    #[arg(long)]
    pub block: Option<String>,
    /// Architecture JSON file or preset name.
    #[arg(long)]
    pub network: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::P64)]
    pub precision: Precision,
}

#[derive(Args, Debug)]
pub struct TradeoffArgs {
    /// `REPORT.csv+PCKH`, where PCKH is a mean in percent or a PCKh CSV file.
    #[arg(long)]
    pub baseline: String,
    #[arg(long)]
    pub candidate: String,
    /// `w_acc,w_params,w_madds`.
    #[arg(long, default_value = "1,0,0")]
    pub weights: String,
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`. Returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("hgnet: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Describe(a) => describe(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Tradeoff(a) => tradeoff(a, out),
    }
}

fn describe(a: DescribeArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = resolve_arch(&a.arch)?;
    if let Some(r) = a.input_res {
        cfg.input_resolution = r;
        cfg.validate()?;
    }
    let (net, store) = Network::with_seed::<f32>(&cfg, 0)?;
    let report = count_madds(&net, &store, net.input_shape(1))?;
    match a.sections {
        Some(d) => {
            for (name, p, m) in report.sections(d) {
                writeln!(out, "{name:<32} {p:>12} {m:>15}")?;
            }
            writeln!(out, "{:<32} {:>12} {:>15}", "TOTAL", report.total_params, report.total_madds)?;
        }
        None => write!(out, "{}", report.to_table())?,
    }
    writeln!(
        out,
        "params {:.3}M  madds {:.3}G  input {}",
        report.total_params as f64 / 1e6,
        report.total_madds as f64 / 1e9,
        report.input_shape
    )?;
    if let Some(p) = a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(EXIT_OK)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    let mut trainer = Trainer::new(cfg)?;
    let stacks = trainer.network.config.num_stacks;
    writeln!(out, "{}", crate::train::EpochRow::header(stacks))?;
    let log = trainer.run()?;
    for row in &log.epochs {
        writeln!(out, "{}", row.to_csv(stacks))?;
    }
    writeln!(out, "trained {} steps", trainer.progress.step)?;
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let mode = match a.mean {
        MeanArg::PerJoint => MeanMode::PerJoint,
        MeanArg::PerGroup => MeanMode::PerGroup,
    };
    let result = match (&a.checkpoint, &a.annotations) {
        (_, Some(path)) => {
            let records = load_annotations(path)?;
            let samples = records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.pckh_sample()
                        .ok_or_else(|| HgError::data(format!("line {}: pred_joints missing", i + 1)))
                })
                .collect::<Result<Vec<PckhSample>>>()?;
            pckh(&samples, 0.5, mode)?
        }
        (Some(ck), None) => {
            let ckpt = load_checkpoint(ck)?;
            let net = ckpt.network()?;
            let samples = generate_synthetic_dataset(a.synthetic, net.config.input_resolution, a.seed)?;
            let (result, scored) = evaluate(&net, &ckpt.store, &samples, mode)?;
            if let Some(p) = &a.write_predictions {
                let recs: Vec<Annotation> = scored
                    .iter()
                    .map(|s| Annotation {
                        joints: s.gt,
                        visible: s.visible,
                        head_size: s.head_size,
                        pred_joints: Some(s.pred),
                    })
                    .collect();
                write_annotations(p, &recs)?;
            }
            result
        }
        (None, None) => return Err(HgError::usage("eval needs --checkpoint or --annotations")),
    };
    write!(out, "{}", result.to_table())?;
    if let Some(p) = a.csv {
        fs::write(p, result.to_csv())?;
    }
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let bits = match a.precision {
        Precision::P32 => 32,
        Precision::P64 => 64,
    };
    let report = match (&a.block, &a.network) {
        (Some(b), _) => {
            let kind = BlockKind::parse(b)?;
            if bits == 64 {
                check_block::<f64>(kind, a.seed)?
            } else {
                check_block::<f32>(kind, a.seed)?
            }
        }
        (None, Some(n)) => {
            let cfg = resolve_arch(n)?;
            if bits == 64 {
                check_network::<f64>(&cfg, a.seed)?
            } else {
                check_network::<f32>(&cfg, a.seed)?
            }
        }
        (None, None) => return Err(HgError::usage("gradcheck needs --block or --network")),
    };
    let tol = GradcheckReport::tolerance(bits);
    for t in &report.tensors {
        writeln!(
            out,
            "{:<48} checked {:>3} skipped {:>3} max_rel_err {:.3e}",
            t.name, t.checked, t.skipped, t.max_rel_err
        )?;
    }
    let pass = report.passes(tol);
    writeln!(
        out,
        "max_rel_err {:.3e} (tolerance {tol:.0e}, {bits}-bit): {}",
        report.max_rel_err(),
        if pass { "PASS" } else { "FAIL" }
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_GRADCHECK_FAIL })
}

/// Reads `REPORT.csv+PCKH`.
pub fn read_model_stats(spec: &str) -> Result<ModelStats> {
    let (report, acc) = spec
        .rsplit_once('+')
        .ok_or_else(|| HgError::usage(format!("expected REPORT.csv+PCKH, got '{spec}'")))?;
    let (params, madds) = ComplexityReport::totals_from_csv(&fs::read_to_string(report)?)?;
    let pckh = match acc.trim().parse::<f64>() {
        Ok(v) => v,
        Err(_) => PckhResult::mean_from_csv(&fs::read_to_string(Path::new(acc))?)?,
    };
    Ok(ModelStats {
        pckh,
        params: params as f64,
        madds: madds as f64,
    })
}

pub fn parse_weights(text: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = text
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| HgError::usage(format!("weights must be three numbers a,b,c, got '{text}'")))?;
    v.try_into()
        .map_err(|_| HgError::usage(format!("weights must be three numbers a,b,c, got '{text}'")))
}

fn tradeoff(a: TradeoffArgs, out: &mut dyn Write) -> Result<i32> {
    let base = read_model_stats(&a.baseline)?;
    let cand = read_model_stats(&a.candidate)?;
    let w = parse_weights(&a.weights)?;
    let v = tradeoff_metric(&base, &cand, w)?;
    writeln!(out, "{v:.2}")?;
    Ok(EXIT_OK)
}
