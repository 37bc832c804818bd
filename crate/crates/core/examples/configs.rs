//! Presets, TOML overrides and validation errors.
//!
//! ```text
//! cargo run --example configs
//! ```

use m3d::datamodel::{config_file, validate_config, ModelConfig};

pub fn run_example() -> anyhow::Result<()> {
    for cfg in [ModelConfig::micro(), ModelConfig::desk(), ModelConfig::paper()] {
        println!(
            "{:?}: latent {} tokens {} heads {} lr {}",
            cfg.preset, cfg.latent_dim, cfg.n_tokens, cfg.n_heads, cfg.learning_rate
        );
    }

    let tuned = config_file::overlay(&ModelConfig::desk(), "n_tokens = 16\nlambda_3 = 0.1\n")?;
    println!("override: n_tokens {} lambda_3 {}", tuned.n_tokens, tuned.loss.lambda_3);

    let mut broken = ModelConfig::desk();
    broken.token_dim = 31;
    broken.loss.lambda_kl = -1.0;
    if let Err(errors) = validate_config(&broken) {
        for e in errors {
            println!("rejected: {e}");
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
