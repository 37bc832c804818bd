use m3d::datamodel::{find_task, ModelConfig, Sample};
use m3d::eval::*;
use m3d::model::Translator;
use proptest::prelude::*;

fn img(v: &[f32]) -> Sample {
    Sample::image(1, 1, v.len(), v.to_vec()).unwrap()
}

/// Mean over ordered pairs `i ≠ j` of the mean absolute difference.
fn brute_force(group: &[Vec<f32>]) -> f64 {
    let n = group.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let d: f64 = group[i].iter().zip(&group[j]).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum();
                acc += d / group[i].len() as f64;
            }
        }
    }
    acc / (n * (n - 1)) as f64
}

fn groups() -> impl Strategy<Value = Vec<Vec<Vec<f32>>>> {
    (1usize..6).prop_flat_map(|dim| {
        prop::collection::vec(
            prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 2..=10),
            1..4,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diversity_matches_all_pairs(gs in groups()) {
        let samples: Vec<Vec<Sample>> = gs.iter().map(|g| g.iter().map(|v| img(v)).collect()).collect();
        let r = diversity_score(&samples).unwrap();
        let per: Vec<f64> = gs.iter().map(|g| brute_force(g)).collect();
        for (a, b) in r.per_source.iter().zip(&per) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        prop_assert!((r.grand_mean - mean).abs() < 1e-9);
    }

    #[test]
    fn diversity_ignores_sample_order(g in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 3), 2..=8), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut shuffled = g.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let score = |g: &[Vec<f32>]| diversity_score(&[g.iter().map(|v| img(v)).collect()]).unwrap().grand_mean;
        prop_assert!((score(&g) - score(&shuffled)).abs() < 1e-12);
    }

    #[test]
    fn coverage_counts_unseen_styles(styles in prop::collection::vec(0usize..6, 0..20)) {
        let synth = vec![img(&[0.0]); styles.len()];
        let seen: std::collections::BTreeSet<_> = styles.iter().collect();
        prop_assert_eq!(mode_coverage(&synth, |i, _| Some(styles[i]), 6), 6 - seen.len());
    }
}

#[test]
fn counting_fixtures() {
    let s = vec![img(&[0.0]); 4];
    let a = domain_accuracy(&s, &[0, 1, 2, 3], |i, _| Some([0, 1, 2, 0][i])).unwrap();
    assert_eq!((a.accuracy, a.hits, a.wrong), (0.75, 3, 1));

    let u = domain_accuracy(&s, &[0, 1, 2, 3], |i, _| (i < 3).then_some(i)).unwrap();
    assert_eq!((u.accuracy, u.unclassified), (0.75, 1));

    assert_eq!(mode_coverage(&s, |i, _| Some(i % 2), 4), 2);
    assert_eq!(mode_coverage(&[], |_, _| Some(0), 4), 4);

    let ten = vec![img(&[0.0]); 10];
    let r = realism_accuracy(&ten, &[1; 10], |_| Some(1)).unwrap();
    assert_eq!(r, 1.0);
    let nine = realism_accuracy(&ten, &[1, 1, 1, 1, 1, 1, 1, 1, 1, 2], |_| Some(1)).unwrap();
    assert_eq!(nine, 0.9);
    let blank = realism_accuracy(&ten, &[1; 10], |_| None).unwrap();
    assert_eq!(blank, 0.0);
}

#[test]
fn diversity_needs_two_samples_per_source() {
    assert!(diversity_score(&[]).is_err());
    assert!(diversity_score(&[vec![img(&[0.0])]]).is_err());
    assert_eq!(diversity_score(&[vec![img(&[0.0]); 3]]).unwrap().grand_mean, 0.0);
}

#[test]
fn text_distance_is_mismatch_fraction() {
    let a = Sample::text(vec![1, 2, 3, 4]).unwrap();
    let b = Sample::text(vec![1, 5, 3, 6]).unwrap();
    assert_eq!(sample_distance(&a, &b).unwrap(), 0.5);
    assert!(sample_distance(&a, &Sample::text(vec![1]).unwrap()).is_err());
}

#[test]
fn prior_draws_differ() {
    let task = find_task("shapes").unwrap();
    let (model, params) = Translator::new(&ModelConfig::micro(), &task).unwrap();
    let src = Sample::image(1, 8, 8, (0..64).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
    let out = sample_with(&model, &params, &src, &SampleMode::Prior { n: 6, seed: 4 }).unwrap();
    assert_eq!(out.len(), 6);
    for i in 0..6 {
        for j in 0..i {
            assert!(sample_distance(&out[i], &out[j]).unwrap() > 0.0);
        }
    }
    // Same seed, same draws.
    let again = sample_with(&model, &params, &src, &SampleMode::Prior { n: 6, seed: 4 }).unwrap();
    assert_eq!(out, again);
}

#[test]
fn reference_mode_follows_task_pattern() {
    let task = find_task("text→image").unwrap();
    let (model, params) = Translator::new(&ModelConfig::micro(), &task).unwrap();
    let caption = Sample::text(vec![1, 4, 2]).unwrap();
    let reference = Sample::image(3, 8, 8, vec![0.5; 192]).unwrap();
    let err = sample_with(&model, &params, &caption, &SampleMode::Reference(reference)).unwrap_err();
    assert!(err.to_string().contains("T_enc = ×"), "{err}");
    assert!(sample_with(&model, &params, &caption, &SampleMode::Prior { n: 2, seed: 0 }).is_ok());
}
