use std::fs;

use m3d::datamodel::{archive, DataKind};
use m3d::error::Error;
use m3d::synthdata::*;

fn shapes(n: usize, seed: u64) -> Dataset {
    gen_colored_shapes(&ShapeStyleSpec {
        n_examples: n,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn captions(n: usize, kind: DataKind) -> Dataset {
    gen_toy_captions(
        &CaptionImageSpec {
            n_examples: n,
            ..Default::default()
        },
        kind,
    )
    .unwrap()
}

fn sequences(n: usize) -> Dataset {
    gen_sequence_styles(
        &SequenceStyleSpec {
            n_examples: n,
            ..Default::default()
        },
        DataKind::Sequences,
    )
    .unwrap()
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    for (i, ds) in [shapes(40, 9), shapes(40, 9)].iter().enumerate() {
        save_dataset(ds, &dir.path().join(i.to_string())).unwrap();
    }
    let read = |i: usize, f: &str| fs::read(dir.path().join(i.to_string()).join(f)).unwrap();
    assert_eq!(read(0, "labels.csv"), read(1, "labels.csv"));
    assert_eq!(read(0, "manifest.txt"), read(1, "manifest.txt"));
    for i in 0..40 {
        let f = format!("samples/{i:06}.tgt.m3dt");
        assert_eq!(read(0, &f), read(1, &f));
    }
    assert_ne!(shapes(40, 9), shapes(40, 10));
}

#[test]
fn styles_are_balanced() {
    let ds = shapes(4000, 3);
    let mut hist = [0usize; 4];
    for l in &ds.labels {
        hist[l.style] += 1;
    }
    for h in hist {
        assert!((h as f64 / 4000.0 - 0.25).abs() <= 0.05, "{hist:?}");
    }
}

#[test]
fn oracles_recover_clean_labels() {
    let ds = shapes(400, 5);
    for (ex, l) in ds.examples.iter().zip(&ds.labels) {
        let mask = painted_mask(&ex.target).unwrap();
        assert_eq!(image_style(&ex.target, &mask, 4), Some(l.style));
        assert_eq!(image_content(&ex.target).map(|c| c.index()), Some(l.content));
        assert_eq!(silhouette_mask(&ex.source).unwrap(), mask);
    }
    let seq = sequences(200);
    for (ex, l) in seq.examples.iter().zip(&seq.labels) {
        assert_eq!(sequence_style(&ex.target, 4), Some(l.style));
    }
}

#[test]
fn captions_under_specify_colour() {
    let vocab = Vocab::captions();
    let ds = captions(600, DataKind::Captions);
    let square = vocab.encode("a square", CAPTION_LEN).unwrap();
    let red_square = vocab.encode("a red square", CAPTION_LEN).unwrap();
    let mut square_styles = std::collections::BTreeSet::new();
    let mut red_seen = 0;
    for (ex, l) in ds.examples.iter().zip(&ds.labels) {
        let ids = ex.source.ids().unwrap();
        if ids == square.as_slice() {
            square_styles.insert(l.style);
        }
        if ids == red_square.as_slice() {
            red_seen += 1;
            let mask = painted_mask(&ex.target).unwrap();
            assert_eq!(image_style(&ex.target, &mask, 4), Some(0));
        }
        // Captions never contradict the image.
        let (shape, colour) = parse_caption(ids);
        assert_eq!(shape.map(|s| s.index()), Some(l.content));
        assert!(colour.is_none_or(|c| c == l.style));
    }
    assert!(square_styles.len() >= 2, "{square_styles:?}");
    assert!(red_seen > 0);
}

#[test]
fn translated_captions_use_second_language() {
    let ds = captions(50, DataKind::CaptionsTranslated);
    for ex in &ds.examples {
        let src = ex.source.ids().unwrap();
        let tgt = ex.target.ids().unwrap();
        assert!(tgt.iter().all(|&t| t == Vocab::PAD || t > Vocab::SECOND_OFFSET));
        // The source words reappear shifted in the target.
        for &s in src.iter().filter(|&&s| s != Vocab::PAD) {
            assert!(tgt.contains(&(s + Vocab::SECOND_OFFSET)));
        }
    }
}

#[test]
fn envelopes_are_well_separated() {
    let env = style_envelopes(8, 4).unwrap();
    for a in 0..4 {
        for b in 0..a {
            let d: f32 = env[a].iter().zip(&env[b]).map(|(x, y)| (x - y).abs()).sum::<f32>() / 8.0;
            assert!(d >= 0.5, "styles {a},{b}: {d}");
        }
    }
}

#[test]
fn sequences_respect_length_and_share_content() {
    let spec = SequenceStyleSpec::default();
    let ds = sequences(300);
    for ex in &ds.examples {
        let n = ex.source.len();
        assert!((spec.min_len..=spec.max_len).contains(&n));
        assert_eq!(ex.target.shape(), &[n, spec.frame_dim]);
    }
    // Same tokens, different style: only the envelope differs.
    let env = style_envelopes(8, 4).unwrap();
    let tokens = [1, 4, 2, 6];
    let a = styled_frames(&tokens, &env[0], 8);
    let b = styled_frames(&tokens, &env[2], 8);
    for (t, (fa, fb)) in a.chunks(8).zip(b.chunks(8)).enumerate() {
        let diff: Vec<f32> = fa.iter().zip(fb).map(|(x, y)| x - y).collect();
        let expect: Vec<f32> = env[0].iter().zip(&env[2]).map(|(x, y)| x - y).collect();
        assert_eq!(diff, expect, "frame {t}");
    }
}

#[test]
fn round_trip_every_family() {
    let dir = tempfile::tempdir().unwrap();
    for (i, ds) in [
        shapes(12, 1),
        captions(12, DataKind::CaptionsReversed),
        captions(12, DataKind::CaptionsTranslated),
        sequences(12),
    ]
    .into_iter()
    .enumerate()
    {
        let d = dir.path().join(i.to_string());
        save_dataset(&ds, &d).unwrap();
        assert_eq!(load_dataset(&d).unwrap(), ds);
    }
}

#[test]
fn truncated_sample_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&shapes(4, 1), dir.path()).unwrap();
    let victim = dir.path().join("samples/000002.tgt.m3dt");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    match load_dataset(dir.path()) {
        Err(Error::CorruptArchive { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected corrupt archive, got {other:?}"),
    }
}

#[test]
fn missing_sample_is_a_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&shapes(4, 1), dir.path()).unwrap();
    fs::remove_file(dir.path().join("samples/000003.src.m3dt")).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
}

#[test]
fn future_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&shapes(4, 1), dir.path()).unwrap();
    let m = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&m).unwrap().replace("version = 1", "version = 7");
    archive::write_atomic(&m, text.as_bytes()).unwrap();
    assert!(matches!(
        load_dataset(dir.path()),
        Err(Error::Version { found: 7, expected: 1 })
    ));
}

#[test]
fn degenerate_style_counts_fail() {
    for k in [0, 1] {
        let spec = ShapeStyleSpec {
            k_styles: k,
            ..Default::default()
        };
        assert!(gen_colored_shapes(&spec).is_err());
    }
    let too_many = SequenceStyleSpec {
        k_styles: 9,
        ..Default::default()
    };
    assert!(gen_sequence_styles(&too_many, DataKind::Sequences).is_err());
}
