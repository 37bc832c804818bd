//! The text-bearing tasks: caption→image, image→caption and caption
//! translation, each trained for a few steps and sampled from the prior.
//!
//! ```text
//! cargo run --example text_tasks
//! ```

use m3d::cli::fit_to_data;
use m3d::datamodel::{find_task, ModelConfig, ModalityTag};
use m3d::eval::{sample_with, SampleMode};
use m3d::synthdata::{gen_toy_captions, CaptionImageSpec, Vocab};
use m3d::trainer::{train, RunOutput};

pub fn run_example() -> anyhow::Result<()> {
    let vocab = Vocab::captions();
    for name in ["text→image", "image→text", "text→text"] {
        let task = find_task(name)?;
        let data = gen_toy_captions(
            &CaptionImageSpec {
                n_examples: 64,
                ..Default::default()
            },
            task.data,
        )?;
        let mut cfg = ModelConfig::desk();
        cfg.max_steps = 10;
        fit_to_data(&mut cfg, &task, &data)?;
        let state = train(&cfg, &task, &data.examples, RunOutput::default())?;
        let src = &data.examples[0].source;
        let out = sample_with(&state.model, &state.params, src, &SampleMode::Prior { n: 2, seed: 3 })?;
        let show = |s: &m3d::datamodel::Sample| match s.modality() {
            ModalityTag::Text => format!("{:?}", vocab.decode(s.ids().unwrap())),
            m => format!("{m} {:?}", s.shape()),
        };
        println!("{name}: {} -> {} | {}", show(src), show(&out[0]), show(&out[1]));
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
