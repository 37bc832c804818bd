//! Generates the three synthetic corpora, checks their oracles and writes
//! one of them to disk.
//!
//! ```text
//! cargo run --example generate_data
//! ```

use m3d::datamodel::DataKind;
use m3d::synthdata::*;

pub fn run_example() -> anyhow::Result<()> {
    let shapes = gen_colored_shapes(&ShapeStyleSpec {
        n_examples: 64,
        ..Default::default()
    })?;
    let captions = gen_toy_captions(
        &CaptionImageSpec {
            n_examples: 64,
            ..Default::default()
        },
        DataKind::Captions,
    )?;
    let frames = gen_sequence_styles(
        &SequenceStyleSpec {
            n_examples: 64,
            ..Default::default()
        },
        DataKind::Sequences,
    )?;

    let mut per_style = [0usize; 4];
    for l in &shapes.labels {
        per_style[l.style] += 1;
    }
    println!("shapes: {} pairs, per style {per_style:?}", shapes.len());

    let vocab = Vocab::captions();
    for ex in captions.examples.iter().take(4) {
        println!("caption: {:?}", vocab.decode(ex.source.ids().unwrap_or_default()));
    }

    let agree = frames
        .examples
        .iter()
        .zip(&frames.labels)
        .filter(|(ex, l)| sequence_style(&ex.target, 4) == Some(l.style))
        .count();
    println!("sequences: style oracle agrees on {agree}/{}", frames.len());

    let dir = tempfile::tempdir()?;
    save_dataset(&shapes, dir.path())?;
    let back = load_dataset(dir.path())?;
    anyhow::ensure!(back == shapes, "round trip changed the dataset");
    write_ppm(&shapes.examples[0].target, &dir.path().join("first.ppm"))?;
    println!("saved and reloaded {} pairs under {}", back.len(), dir.path().display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    run_example()
}
