//! Parameterised layers on top of the autograd tape.
//!
//! Layers hold only [`ParamId`]s; values live in a [`ParamStore`] so the
//! same structure runs at `f32` for training and `f64` for gradient checks.

use m3d_autograd::{Conv2dSpec, ConvTranspose2dSpec, Graph, ParamId, ParamStore, Real, Var};
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Collects freshly initialised parameters in construction order.
pub struct Builder {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                std * e
            })
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(shape), data).expect("length matches shape");
        self.store.add(name, a)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    /// `gain / sqrt(inp)` normal init, zero bias.
    pub fn new(bld: &mut Builder, name: &str, inp: usize, out: usize, gain: f64) -> Self {
        Self {
            w: bld.normal(&format!("{name}.w"), &[inp, out], gain / (inp as f64).sqrt()),
            b: bld.zeros(&format!("{name}.b"), &[out]),
            inp,
            out,
        }
    }

    /// Applies the affine map to the last axis of `x`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.inp) {
            return Err(Error::shape(format!(
                "dense layer expects last axis {}, got {shape:?}",
                self.inp
            )));
        }
        let rows = g.value(x).len() / self.inp;
        let x2 = g.reshape(x, &[rows, self.inp])?;
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        let y = g.matmul(x2, w)?;
        let y = g.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.out;
        Ok(g.reshape(y, &out_shape)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(
        bld: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        spec: Conv2dSpec,
        gain: f64,
    ) -> Self {
        let fan_in = (cin * k.0 * k.1) as f64;
        Self {
            w: bld.normal(&format!("{name}.w"), &[cout, cin, k.0, k.1], gain / fan_in.sqrt()),
            b: bld.zeros(&format!("{name}.b"), &[cout]),
            spec,
        }
    }

    /// Square `k`×`k` kernel with "same"-style padding `k / 2`.
    pub fn square(
        bld: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Self {
        Self::new(bld, name, cin, cout, (k, k), Conv2dSpec::square(stride, k / 2), gain)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        Ok(g.conv2d(x, w, Some(b), self.spec)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvTranspose2dSpec,
}

impl ConvT {
    pub fn new(
        bld: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvTranspose2dSpec,
        gain: f64,
    ) -> Self {
        // Each output pixel sees about cin * (k / stride)^2 inputs.
        let per = (k as f64 / spec.stride as f64).max(1.0);
        let fan_in = cin as f64 * per * per;
        Self {
            w: bld.normal(&format!("{name}.w"), &[cin, cout, k, k], gain / fan_in.sqrt()),
            b: bld.zeros(&format!("{name}.b"), &[cout]),
            spec,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = g.param(s, self.b);
        Ok(g.conv_transpose2d(x, w, Some(b), self.spec)?)
    }
}

/// Per-example, per-channel normalisation of `[B, C, H, W]` (no affine).
pub fn instance_norm<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape(format!("instance norm expects rank 4, got {sh:?}")));
    }
    let x3 = g.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]])?;
    let m = g.mean_axis(x3, 2, true)?;
    let d = g.sub(x3, m)?;
    let sq = g.square(d);
    let var = g.mean_axis(sq, 2, true)?;
    let var = g.add_scalar(var, 1e-5);
    let sd = g.sqrt(var);
    let y = g.div(d, sd)?;
    Ok(g.reshape(y, &sh)?)
}

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Debug, Clone)]
pub struct Gru {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub inp: usize,
    pub units: usize,
}

impl Gru {
    pub fn new(bld: &mut Builder, name: &str, inp: usize, units: usize) -> Self {
        Self {
            wx: bld.normal(&format!("{name}.wx"), &[inp, 3 * units], 1.0 / (inp as f64).sqrt()),
            wh: bld.normal(&format!("{name}.wh"), &[units, 3 * units], 1.0 / (units as f64).sqrt()),
            bx: bld.zeros(&format!("{name}.bx"), &[3 * units]),
            bh: bld.zeros(&format!("{name}.bh"), &[3 * units]),
            inp,
            units,
        }
    }

    pub fn zero_state<T: Real>(&self, g: &mut Graph<T>, batch: usize) -> Var {
        g.constant(ArrayD::zeros(IxDyn(&[batch, self.units])))
    }

    /// Input projections for every step: `[B, T, I]` to `[B, T, 3H]`.
    fn project_inputs<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, xs: Var) -> Result<Var> {
        let sh = g.shape(xs).to_vec();
        if sh.len() != 3 || sh[2] != self.inp {
            return Err(Error::shape(format!(
                "GRU expects [B, T, {}], got {sh:?}",
                self.inp
            )));
        }
        let x2 = g.reshape(xs, &[sh[0] * sh[1], self.inp])?;
        let wx = g.param(s, self.wx);
        let bx = g.param(s, self.bx);
        let p = g.matmul(x2, wx)?;
        let p = g.add(p, bx)?;
        Ok(g.reshape(p, &[sh[0], sh[1], 3 * self.units])?)
    }

    /// One recurrence given the already projected input `gx: [B, 3H]`.
    fn cell<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, gx: Var, h: Var) -> Result<Var> {
        let u = self.units;
        let wh = g.param(s, self.wh);
        let bh = g.param(s, self.bh);
        let gh = g.matmul(h, wh)?;
        let gh = g.add(gh, bh)?;
        let (xr, xz, xn) = (g.narrow(gx, 1, 0, u)?, g.narrow(gx, 1, u, u)?, g.narrow(gx, 1, 2 * u, u)?);
        let (hr, hz, hn) = (g.narrow(gh, 1, 0, u)?, g.narrow(gh, 1, u, u)?, g.narrow(gh, 1, 2 * u, u)?);
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        Ok(g.add(n, zd)?)
    }

    /// Single step on a raw input `x: [B, I]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, h: Var) -> Result<Var> {
        let wx = g.param(s, self.wx);
        let bx = g.param(s, self.bx);
        let gx = g.matmul(x, wx)?;
        let gx = g.add(gx, bx)?;
        self.cell(g, s, gx, h)
    }

    /// Runs over `xs: [B, T, I]`; returns per-step states `[B, H]` in time
    /// order. `reverse` scans from the last step but still returns the
    /// states aligned with their input positions.
    pub fn run<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        xs: Var,
        h0: Option<Var>,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let (b, t) = (g.shape(xs)[0], g.shape(xs)[1]);
        let proj = self.project_inputs(g, s, xs)?;
        let mut h = match h0 {
            Some(h) => h,
            None => self.zero_state(g, b),
        };
        let mut out = Vec::with_capacity(t);
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let gx = g.narrow(proj, 1, i, 1)?;
            let gx = g.reshape(gx, &[b, 3 * self.units])?;
            h = self.cell(g, s, gx, h)?;
            out.push(h);
        }
        if reverse {
            out.reverse();
        }
        Ok(out)
    }
}

/// Stacks per-step `[B, D]` nodes into `[B, T, D]`.
pub fn stack_time<T: Real>(g: &mut Graph<T>, steps: &[Var]) -> Result<Var> {
    let expanded: Vec<Var> = steps
        .iter()
        .map(|&v| {
            let sh = g.shape(v).to_vec();
            g.reshape(v, &[sh[0], 1, sh[1]])
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(g.concat(&expanded, 1)?)
}

/// Spatially broadcasts `v: [B, D]` to `[B, D, H, W]`.
pub fn broadcast_spatial<T: Real>(g: &mut Graph<T>, v: Var, h: usize, w: usize) -> Result<Var> {
    let sh = g.shape(v).to_vec();
    let v4 = g.reshape(v, &[sh[0], sh[1], 1, 1])?;
    Ok(g.broadcast_to(v4, &[sh[0], sh[1], h, w])?)
}

/// Repeats `v: [B, D]` along a new time axis: `[B, T, D]`.
pub fn broadcast_time<T: Real>(g: &mut Graph<T>, v: Var, t: usize) -> Result<Var> {
    let sh = g.shape(v).to_vec();
    let v3 = g.reshape(v, &[sh[0], 1, sh[1]])?;
    Ok(g.broadcast_to(v3, &[sh[0], t, sh[1]])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gru_stays_at_zero() {
        let mut b = Builder::new(0);
        let gru = Gru::new(&mut b, "g", 3, 4);
        let mut store = b.finish();
        for id in [gru.wx, gru.wh] {
            store.get_mut(id).fill(0.0);
        }
        let mut g = Graph::new();
        let xs = g.constant(ArrayD::zeros(IxDyn(&[2, 5, 3])));
        let out = gru.run(&mut g, &store, xs, None, false).unwrap();
        assert_eq!(out.len(), 5);
        assert!(g.value(out[4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reverse_run_aligns_with_input() {
        let mut b = Builder::new(1);
        let gru = Gru::new(&mut b, "g", 2, 3);
        let store = b.finish();
        let mut g = Graph::<f64>::new();
        let x = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2]), vec![0.3, -0.7]).unwrap();
        let xs = g.constant(x);
        let fwd = gru.run(&mut g, &store, xs, None, false).unwrap();
        let bwd = gru.run(&mut g, &store, xs, None, true).unwrap();
        // With a single step both directions see the same input.
        assert_eq!(g.value(fwd[0]), g.value(bwd[0]));
    }

    #[test]
    fn instance_norm_standardises_channels() {
        let mut g = Graph::<f64>::new();
        let x: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let v = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 2, 3, 4]), x).unwrap());
        let y = instance_norm(&mut g, v).unwrap();
        for ch in g.value(y).outer_iter().next().unwrap().outer_iter() {
            let n = ch.len() as f64;
            let m = ch.sum() / n;
            let var = ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            assert!(m.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
