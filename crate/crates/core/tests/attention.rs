use m3d::attention::{sample_latent, GaussianLatent, TokenBank};
use m3d::objectives::loss_kl;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bank_shape() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=4, 1usize..=8, 1usize..=6, any::<u64>())
        .prop_map(|(heads, per_head, n, q, seed)| (heads, heads * per_head, n, q, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn weights_form_a_distribution((heads, dim, n, qd, seed) in bank_shape(), scale in 0.1f64..20.0) {
        let bank = TokenBank::random(n, dim, qd, heads, seed).unwrap();
        let q: Vec<f64> = (0..qd).map(|i| scale * ((i as f64 + 1.0) * 1.7).sin()).collect();
        let (_, w) = bank.attend(&q).unwrap();
        for h in 0..heads {
            let row = w.row(h);
            prop_assert_eq!(row.len(), n);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn embedding_lies_in_value_hull((heads, dim, n, qd, seed) in bank_shape()) {
        let bank = TokenBank::random(n, dim, qd, heads, seed).unwrap();
        let (d, _) = bank.attend(&vec![0.3; qd]).unwrap();
        let v = bank.value_tokens();
        let dk = dim / heads;
        for h in 0..heads {
            for j in 0..dk {
                let col: Vec<f64> = (0..n).map(|t| v[[h, t, j]]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let x = d.0[h * dk + j];
                prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_only_at_prior(
        mu in prop::collection::vec(-3.0f64..3.0, 1..8),
        lv in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let g = GaussianLatent { logvar: lv[..mu.len()].to_vec(), mu: mu.clone() };
        prop_assert!(loss_kl(&g) >= 0.0);
        let prior = GaussianLatent { mu: vec![0.0; mu.len()], logvar: vec![0.0; mu.len()] };
        prop_assert_eq!(loss_kl(&prior), 0.0);
    }

    #[test]
    fn kl_adds_over_dimensions(a in (-2.0f64..2.0, -2.0f64..2.0), b in (-2.0f64..2.0, -2.0f64..2.0)) {
        let one = |(m, l): (f64, f64)| loss_kl(&GaussianLatent { mu: vec![m], logvar: vec![l] });
        let both = loss_kl(&GaussianLatent { mu: vec![a.0, b.0], logvar: vec![a.1, b.1] });
        prop_assert!((both - one(a) - one(b)).abs() < 1e-12);
    }
}

#[test]
fn uniform_keys_give_uniform_weights() {
    // Zero key projection: every token scores the same.
    let tokens = Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64);
    let bank = TokenBank::from_matrices(
        tokens,
        Array2::eye(4),
        Array2::zeros((4, 4)),
        Array2::eye(4),
        2,
    )
    .unwrap();
    let (d, w) = bank.attend(&[1.0, -2.0, 0.5, 3.0]).unwrap();
    for h in 0..2 {
        assert!(w.row(h).iter().all(|&x| (x - 0.2).abs() < 1e-12));
    }
    // Mean of the token rows.
    assert_eq!(d.0, vec![8.0, 9.0, 10.0, 11.0]);
}

#[test]
fn one_hot_query_selects_a_token() {
    // A huge score on token 2 concentrates all mass there.
    let tokens = Array2::from_shape_fn((3, 2), |(i, j)| if i == 2 { 1.0 + j as f64 } else { 0.0 });
    let bank = TokenBank::from_matrices(tokens, Array2::eye(2) * 500.0, Array2::eye(2), Array2::eye(2), 1).unwrap();
    let (d, w) = bank.attend(&[1.0, 1.0]).unwrap();
    assert!(w.row(0)[2] > 1.0 - 1e-12);
    assert!((d.0[0] - 1.0).abs() < 1e-9 && (d.0[1] - 2.0).abs() < 1e-9);
}

#[test]
fn reparameterised_draws_follow_the_posterior() {
    let g = GaussianLatent {
        mu: vec![1.5, -0.5],
        logvar: vec![(0.25f64).ln(), (4.0f64).ln()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_latent(&g, &mut rng).values).collect();
    for d in 0..2 {
        let mean = draws.iter().map(|z| z[d]).sum::<f64>() / n as f64;
        let var = draws.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - g.mu[d]).abs() < 0.05, "dim {d} mean {mean}");
        assert!((var / g.logvar[d].exp() - 1.0).abs() < 0.05, "dim {d} var {var}");
    }
}
