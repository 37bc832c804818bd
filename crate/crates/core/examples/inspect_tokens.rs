//! Which tokens a trained model attends to for references of each style.
//!
//! ```text
//! cargo run --example inspect_tokens
//! ```

use m3d::datamodel::{find_task, ModelConfig};
use m3d::synthdata::{gen_colored_shapes, ShapeStyleSpec};
use m3d::trainer::{train, RunOutput};

pub fn run_example() -> anyhow::Result<()> {
    let data = gen_colored_shapes(&ShapeStyleSpec {
        n_examples: 128,
        ..Default::default()
    })?;
    let mut cfg = ModelConfig::desk();
    cfg.max_steps = 30;
    let state = train(&cfg, &find_task("shapes")?, &data.examples, RunOutput::default())?;
    let params = state.params_f64();
    let bank = state.model.token_bank(&params).expect("attention enabled");
    println!("{} tokens, {} heads", bank.n_tokens(), bank.n_heads());

    for style in 0..4 {
        let i = data.labels.iter().position(|l| l.style == style).unwrap();
        let (latent, weights) = state.model.encode_gaussian(&params, &data.examples[i].target)?;
        let w = weights.expect("attention enabled");
        let row: Vec<String> = w.row(0).iter().map(|x| format!("{x:.2}")).collect();
        println!("style {style}: head 0 [{}]  |mu| {:.3}", row.join(" "), latent.mu.iter().map(|m| m * m).sum::<f64>().sqrt());
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
