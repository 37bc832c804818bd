//! Every op's backward rule against central finite differences in f64.

use m3d_autograd::{
    ArrayD, Conv2dSpec, ConvTranspose2dSpec, Graph, ParamStore, Result, Var,
};
use ndarray::IxDyn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(f(inputs) * probe)` so that every output element contributes
/// with a distinct weight.
fn probe_loss<F>(g: &mut Graph<f64>, vars: &[Var], f: &F, seed: u64) -> Result<Var>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out = f(g, vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = random(g.shape(out), &mut rng);
    let p = g.constant(probe);
    let m = g.mul(out, p)?;
    Ok(g.sum_all(m))
}

fn check<F>(inputs: Vec<ArrayD<f64>>, f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|a| g.variable(a.clone())).collect();
    let loss = probe_loss(&mut g, &vars, &f, 99).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|a| g.constant(a.clone())).collect();
        let l = probe_loss(&mut g, &vars, &f, 99).unwrap();
        g.scalar(l)
    };

    let eps = 1e-6;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .var(*v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
        for idx in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            plus[k].as_slice_mut().unwrap()[idx] += eps;
            minus[k].as_slice_mut().unwrap()[idx] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / denom < 1e-6,
                "input {k} element {idx}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_binary_with_broadcast() {
    let mut r = rng();
    let a = random(&[2, 3, 4], &mut r);
    let b = random(&[3, 1], &mut r);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    let b_pos = b.mapv(|x| x.abs() + 0.5);
    check(vec![a, b_pos], |g, v| g.div(v[0], v[1]));
}

#[test]
fn elementwise_unary() {
    let mut r = rng();
    let x = random(&[3, 5], &mut r);
    check(vec![x.clone()], |g, v| Ok(g.neg(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.scale(v[0], -2.5)));
    check(vec![x.clone()], |g, v| Ok(g.add_scalar(v[0], 3.0)));
    check(vec![x.clone()], |g, v| Ok(g.exp(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.tanh(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.sigmoid(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.relu(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.leaky_relu(v[0], 0.2)));
    check(vec![x.clone()], |g, v| Ok(g.abs(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.square(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.softplus(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
    let pos = x.mapv(|v| v.abs() + 0.1);
    check(vec![pos.clone()], |g, v| Ok(g.ln(v[0])));
    check(vec![pos], |g, v| Ok(g.sqrt(v[0])));
}

#[test]
fn linear_algebra_and_layout() {
    let mut r = rng();
    let a = random(&[3, 4], &mut r);
    let b = random(&[4, 2], &mut r);
    check(vec![a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    let a3 = random(&[2, 3, 4], &mut r);
    let b3 = random(&[2, 4, 5], &mut r);
    check(vec![a3.clone(), b3], |g, v| g.batch_matmul(v[0], v[1]));
    check(vec![a3.clone()], |g, v| g.swap_last(v[0]));
    check(vec![a3.clone()], |g, v| g.permute(v[0], &[2, 0, 1]));
    check(vec![a3.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    check(vec![b.clone()], |g, v| {
        let r = g.reshape(v[0], &[4, 2, 1])?;
        g.broadcast_to(r, &[4, 2, 3])
    });
    check(vec![a.clone(), random(&[3, 2], &mut r)], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    check(vec![a3.clone()], |g, v| g.narrow(v[0], 2, 1, 2));
}

#[test]
fn reductions_and_softmax() {
    let mut r = rng();
    let x = random(&[2, 3, 4], &mut r);
    check(vec![x.clone()], |g, v| Ok(g.sum_all(v[0])));
    check(vec![x.clone()], |g, v| Ok(g.mean_all(v[0])));
    check(vec![x.clone()], |g, v| g.sum_axis(v[0], 1, false));
    check(vec![x.clone()], |g, v| g.sum_axis(v[0], 2, true));
    check(vec![x.clone()], |g, v| g.mean_axis(v[0], 0, true));
    check(vec![x.clone()], |g, v| g.softmax(v[0]));
    check(vec![x], |g, v| g.max_pool_last(v[0], 2));
}

#[test]
fn convolutions() {
    let mut r = rng();
    let x = random(&[2, 3, 5, 6], &mut r);
    let w = random(&[4, 3, 3, 2], &mut r);
    let b = random(&[4], &mut r);
    check(vec![x.clone(), w.clone(), b.clone()], |g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new((2, 1), (1, 1, 0, 1)))
    });
    check(vec![x.clone(), w], |g, v| {
        g.conv2d(v[0], v[1], None, Conv2dSpec::square(1, 1))
    });
    let wt = random(&[3, 2, 4, 4], &mut r);
    let bt = random(&[2], &mut r);
    check(vec![x.clone(), wt, bt], |g, v| {
        g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvTranspose2dSpec::new(2, 1))
    });
    let wt2 = random(&[3, 2, 2, 2], &mut r);
    check(vec![x, wt2], |g, v| {
        g.conv_transpose2d(v[0], v[1], None, ConvTranspose2dSpec::new(2, 0))
    });
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with shared weights and no bias.
    let mut r = rng();
    let x = random(&[1, 3, 8, 8], &mut r);
    let w = random(&[5, 3, 4, 4], &mut r);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let cx = g.conv2d(xv, wv, None, Conv2dSpec::square(2, 1)).unwrap();
    let y = random(g.shape(cx), &mut r);
    let lhs: f64 = (g.value(cx) * &y).sum();
    let yv = g.constant(y);
    let ty = g
        .conv_transpose2d(yv, wv, None, ConvTranspose2dSpec::new(2, 1))
        .unwrap();
    assert_eq!(g.shape(ty), x.shape());
    let rhs: f64 = (g.value(ty) * &x).sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn embedding_scatter_adds_repeated_ids() {
    let mut r = rng();
    let w = random(&[5, 3], &mut r);
    check(vec![w.clone()], |g, v| g.embedding(v[0], &[4, 1, 4, 0]));
    let mut g = Graph::<f64>::new();
    let wv = g.variable(w);
    assert!(g.embedding(wv, &[5]).is_err());
}

#[test]
fn params_bind_once_and_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", ArrayD::from_elem(IxDyn(&[2]), 3.0));
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let l = g.sum_all(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(id).unwrap().as_slice().unwrap(), &[6.0, 6.0]);
}

#[test]
fn detach_and_constants_cut_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(ArrayD::from_elem(IxDyn(&[3]), 2.0));
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let l = g.sum_all(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.var(x).unwrap().iter().all(|&v| v == 2.0));
    assert!(grads.var(d).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(ArrayD::zeros(IxDyn(&[2])));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
    let b = g.constant(ArrayD::zeros(IxDyn(&[2, 3])));
    assert!(g.matmul(a, b).is_err());
    assert!(g.reshape(a, &[4]).is_err());
    assert!(g.narrow(a, 1, 2, 2).is_err());
    let c = g.constant(ArrayD::zeros(IxDyn(&[4])));
    assert!(g.add(a, c).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), vals).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).rows() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_round_trip_preserves_values(vals in prop::collection::vec(-5.0f64..5.0, 24)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 3, 4]), vals.clone()).unwrap());
        let p = g.permute(x, &[1, 2, 0]).unwrap();
        let q = g.permute(p, &[2, 0, 1]).unwrap();
        let r = g.reshape(q, &[24]).unwrap();
        prop_assert_eq!(g.value(r).as_slice().unwrap(), &vals[..]);
    }
}

#[test]
fn nan_survives_clipping_ops() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![f64::NAN, -1.0, 2.0]).unwrap());
    let r = g.relu(x);
    let c = g.clamp(x, -0.5, 0.5);
    let p = g.max_pool_last(x, 2).unwrap();
    for v in [r, c, p] {
        assert!(g.value(v)[[0, 0]].is_nan());
    }
    assert_eq!(g.value(r)[[0, 1]], 0.0);
    assert_eq!(g.value(c)[[0, 2]], 0.5);
}
