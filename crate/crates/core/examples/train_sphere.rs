//! Trains the default model on a unit sphere and reports held-out accuracy.
//!
//! cargo run --release --example train_sphere -- [steps] [batch]

use std::sync::Arc;
use std::time::Instant;

use lsnif::fixtures::uv_sphere;
use lsnif::metrics::{eval_model, EvalConfig};
use lsnif::model::ModelConfig;
use lsnif::training::{TrainConfig, Trainer};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(2000);
    let batch = args.get(1).copied().unwrap_or(1 << 14);
    let config = TrainConfig {
        steps,
        batch,
        ..Default::default()
    };
    let mesh = Arc::new(uv_sphere(1.0, 64, 32));
    let mut trainer = Trainer::new(mesh, vec![], ModelConfig::default(), config).unwrap();
    let start = Instant::now();
    for _ in 0..steps {
        let s = trainer.step().unwrap();
        if s.step.is_multiple_of(100) || s.step == 1 {
            println!("{}  ({:.1}s)", s.log_line(), start.elapsed().as_secs_f64());
        }
    }
    let report = eval_model(trainer.model(), trainer.oracle(), &EvalConfig { external_fraction: 1.0, ..Default::default() });
    println!("{report:#?}");
}
