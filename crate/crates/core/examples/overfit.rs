use std::time::Instant;

use hgnet::train::{TrainConfig, Trainer};

fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");
    for name in ["overfit-toy", "overfit-toy-resconcat", "overfit-toy-perceptual"] {
        let cfg = TrainConfig::load(format!("{dir}/{name}.toml")).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let start = Instant::now();
        let log = t.run().unwrap();
        let last = |r: &hgnet::train::StepRecord| *r.loss.per_stack_mse.last().unwrap();
        let first = last(&log.steps[0]);
        let fin = last(log.steps.last().unwrap());
        println!(
            "{name:<24} steps {:>4}  mse {first:.5} -> {fin:.5}  ratio {:.3}  {:.1}s",
            log.steps.len(),
            fin / first,
            start.elapsed().as_secs_f64()
        );
        for r in log.steps.iter().step_by(25) {
            println!("  step {:>4} total {:.5} mse {:?}", r.step, r.loss.total, r.loss.per_stack_mse);
        }
    }
}
