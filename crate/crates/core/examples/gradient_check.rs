//! Finite-difference check of every sub-network's gradients on the micro
//! preset, in 64- and 32-bit.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use m3d::datamodel::{task_registry, ModelConfig};
use m3d::trainer::{check_gradients, micro_objective, GradCheckOptions};

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ModelConfig::micro();
    for task in task_registry().iter().take(6) {
        let obj = micro_objective(&cfg, task, 1)?;
        let r64 = check_gradients(&obj, 64, &GradCheckOptions::f64())?;
        let r32 = check_gradients(&obj, 32, &GradCheckOptions::f32())?;
        println!(
            "{:<12} {:>5} params  f64 {:.2e}  f32 {:.2e}",
            task.name,
            obj.params.num_elements(),
            r64.max_rel_error,
            r32.max_rel_error
        );
        for g in &r64.groups {
            println!("    {:<24} {:.2e} over {} coords", g.name, g.max_rel_error, g.checked);
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
