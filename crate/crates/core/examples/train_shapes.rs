//! Trains the desk model on colored shapes and prints the loss curve.
//!
//! ```text
//! cargo run --example train_shapes -- 300
//! ```
//! The optional argument is the step count (default 40).

use m3d::datamodel::{find_task, ModelConfig};
use m3d::synthdata::{gen_colored_shapes, ShapeStyleSpec};
use m3d::trainer::{run_steps, RunOutput, TrainState};

fn steps() -> u64 {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(40)
}

pub fn run_example() -> anyhow::Result<()> {
    let data = gen_colored_shapes(&ShapeStyleSpec {
        n_examples: 256,
        ..Default::default()
    })?;
    let task = find_task("shapes")?;
    let cfg = ModelConfig::desk();
    let mut state = TrainState::new(&cfg, &task)?;
    println!("{} parameters", state.params.num_elements());

    let total = steps();
    let chunk = (total / 4).max(1);
    while state.step < total {
        let until = (state.step + chunk).min(total);
        run_steps(&mut state, &data.examples, until, RunOutput::default())?;
        println!("trained to step {until}");
    }

    // Per-step metrics via the single-step API.
    let batch: Vec<_> = data.examples.iter().take(cfg.batch_size).collect();
    let m = m3d::trainer::train_step(&mut state, &batch)?;
    println!(
        "step {}: d {:.3}  g_enc {:.3}  g_sam {:.3}  rec {:.4}  kl {:.3}  lat {:.3}  dist {:.3}  ({:?})",
        m.step, m.losses.gan_d, m.losses.gan_g_enc, m.losses.gan_g_sam, m.losses.rec, m.losses.kl, m.losses.lat,
        m.losses.dist, m.wall_time
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
