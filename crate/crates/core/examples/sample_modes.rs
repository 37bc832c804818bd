//! The two inference modes: several outputs from prior draws (`T_sam`) and
//! one output steered by a reference (`T_enc`).
//!
//! ```text
//! cargo run --example sample_modes
//! ```

use m3d::datamodel::{find_task, ModelConfig};
use m3d::eval::{sample_distance, sample_with, SampleMode};
use m3d::synthdata::{gen_colored_shapes, image_style, painted_mask, write_ppm, ShapeStyleSpec};
use m3d::trainer::{train, RunOutput};

pub fn run_example() -> anyhow::Result<()> {
    let data = gen_colored_shapes(&ShapeStyleSpec {
        n_examples: 128,
        ..Default::default()
    })?;
    let mut cfg = ModelConfig::desk();
    cfg.max_steps = 30;
    let state = train(&cfg, &find_task("shapes")?, &data.examples, RunOutput::default())?;

    let source = &data.examples[0].source;
    let draws = sample_with(&state.model, &state.params, source, &SampleMode::Prior { n: 4, seed: 7 })?;
    for (i, d) in draws.iter().enumerate().skip(1) {
        println!("prior draw {i}: distance to draw 0 = {:.4}", sample_distance(d, &draws[0])?);
    }

    let reference = data.examples[1].target.clone();
    let out = sample_with(&state.model, &state.params, source, &SampleMode::Reference(reference))?;
    let style = painted_mask(&out[0]).and_then(|m| image_style(&out[0], &m, 4));
    println!("reference style {}, output style {style:?}", data.labels[1].style);

    let dir = tempfile::tempdir()?;
    for (i, s) in draws.iter().chain(&out).enumerate() {
        write_ppm(s, &dir.path().join(format!("out_{i}.ppm")))?;
    }

    // text→image never takes a reference.
    let t2i = find_task("text→image")?;
    println!("text→image: T_enc {} T_sam {}", t2i.inference.encoded, t2i.inference.sampled);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
