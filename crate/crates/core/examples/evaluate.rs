//! Trains briefly and runs the evaluation protocol: diversity, domain
//! accuracy, realism and missed modes.
//!
//! ```text
//! cargo run --example evaluate
//! ```

use m3d::datamodel::{find_task, ModelConfig};
use m3d::eval::{evaluate, EvalOptions};
use m3d::synthdata::{gen_colored_shapes, ShapeStyleSpec};
use m3d::trainer::{train, RunOutput};

pub fn run_example() -> anyhow::Result<()> {
    let data = gen_colored_shapes(&ShapeStyleSpec {
        n_examples: 160,
        ..Default::default()
    })?;
    let (train_set, test_set) = data.split(128);
    let mut cfg = ModelConfig::desk();
    cfg.max_steps = 40;
    let state = train(&cfg, &find_task("shapes")?, &train_set.examples, RunOutput::default())?;

    let opts = EvalOptions {
        diversity_sources: 8,
        samples_per_source: 4,
        seed: 0,
    };
    let report = evaluate(&state.model, &state.params, &test_set, &opts)?;
    print!("{report}");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
