//! Central finite-difference gradient checks.
//!
//! Each sampled coordinate is differenced twice, at `ε` and `ε/2`. On a
//! smooth stretch the two agree to `O(ε²)`; when `±ε` straddles a kink
//! (ReLU, `|x|`, max-pool ties) they differ by the same amount the `ε`
//! estimate is off, so such coordinates are counted and skipped instead of
//! being reported as gradient errors.

use m3d_autograd::{Graph, ParamId, ParamStore, Real, Var};
use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_chacha::ChaCha8Rng;

use super::{discriminator_loss, forward_paths, generator_total, group_by_shape, PathCounters};
use crate::datamodel::{ModalityTag, ModelConfig, PairedExample, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::model::Translator;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter group (all of them if the group is
    /// smaller).
    pub coords_per_group: usize,
    pub seed: u64,
    /// Relative disagreement between the `ε` and `ε/2` estimates above
    /// which a coordinate is treated as a kink.
    pub kink_tol: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn f64() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_group: 200,
            seed: 0,
            kink_tol: 1e-6,
            floor: 1e-3,
        }
    }

    /// Same differencing; only the acceptance threshold differs.
    pub fn f32() -> Self {
        Self::f64()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn skipped_fraction(&self) -> f64 {
        let all = self.checked + self.skipped_kinks;
        if all == 0 { 0.0 } else { self.skipped_kinks as f64 / all as f64 }
    }
}

type Analytic = Vec<Option<ArrayD<f64>>>;

fn run_check(
    params: &ParamStore<f64>,
    groups: &[(String, Vec<ParamId>)],
    analytic: &Analytic,
    value: &dyn Fn(&ParamStore<f64>) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::contract("epsilon must be positive"));
    }
    for (id, name, v) in params.iter() {
        if let Some(a) = &analytic[id.0] {
            if let Some(i) = a.iter().position(|x| !x.is_finite()) {
                return Err(Error::contract(format!("non-finite analytic gradient at {name}[{i}]")));
            }
            debug_assert_eq!(a.shape(), v.shape());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    // Rounding noise of a central difference at this loss magnitude.
    let noise = 64.0 * f64::EPSILON * value(params)?.abs().max(1.0) / opts.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        groups: Vec::new(),
    };
    let diff = |work: &mut ParamStore<f64>, id: ParamId, i: usize, h: f64| -> Result<f64> {
        let orig = work.get(id).as_slice_memory_order().expect("contiguous")[i];
        let at = |x: f64, w: &mut ParamStore<f64>| -> Result<f64> {
            w.get_mut(id).as_slice_memory_order_mut().expect("contiguous")[i] = x;
            value(w)
        };
        let up = at(orig + h, work)?;
        let down = at(orig - h, work)?;
        work.get_mut(id).as_slice_memory_order_mut().expect("contiguous")[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    for (gname, ids) in groups {
        let coords: Vec<(ParamId, usize)> = ids
            .iter()
            .flat_map(|&id| (0..params.get(id).len()).map(move |i| (id, i)))
            .collect();
        let picked: Vec<usize> = if coords.len() <= opts.coords_per_group {
            (0..coords.len()).collect()
        } else {
            let mut v = sample(&mut rng, coords.len(), opts.coords_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let mut gr = GroupReport {
            name: gname.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        for k in picked {
            let (id, i) = coords[k];
            let a = analytic[id.0]
                .as_ref()
                .map_or(0.0, |g| g.as_slice_memory_order().expect("contiguous")[i]);
            let fd = diff(&mut work, id, i, opts.epsilon)?;
            let fd_half = diff(&mut work, id, i, opts.epsilon / 2.0)?;
            if !fd.is_finite() || !fd_half.is_finite() {
                return Err(Error::contract(format!(
                    "non-finite loss around {}[{i}]",
                    params.name(id)
                )));
            }
            let scale = fd.abs().max(fd_half.abs()).max(opts.floor);
            if (fd - fd_half).abs() > opts.kink_tol * scale + noise {
                gr.skipped_kinks += 1;
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(opts.floor);
            gr.checked += 1;
            gr.max_rel_error = gr.max_rel_error.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
        report.checked += gr.checked;
        report.skipped_kinks += gr.skipped_kinks;
        report.groups.push(gr);
    }
    Ok(report)
}

fn collect<T: Real>(g: &Graph<T>, loss: Var, store: &ParamStore<T>) -> Result<Analytic> {
    let grads = g.backward(loss)?;
    Ok(store
        .ids()
        .map(|id| grads.param(id).map(|a| a.mapv(|x| x.to_f64().unwrap_or(f64::NAN))))
        .collect())
}

/// Checks the gradient of an arbitrary 64-bit scalar loss. Parameters are
/// grouped by the first dot-separated component of their names.
pub fn grad_check<F>(loss: F, params: &ParamStore<f64>, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let opts = GradCheckOptions {
        epsilon,
        ..GradCheckOptions::f64()
    };
    if !(epsilon > 0.0) {
        return Err(Error::contract("epsilon must be positive"));
    }
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    let analytic = collect(&g, l, params)?;
    let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
    for (id, name, _) in params.iter() {
        let head = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(n, _)| *n == head) {
            Some((_, v)) => v.push(id),
            None => groups.push((head, vec![id])),
        }
    }
    let value = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok(g.scalar(l))
    };
    run_check(params, &groups, &analytic, &value, &opts)
}

/// The complete training objective on a fixed micro batch: the weighted
/// generator total (all paths, adversarial terms included) plus the
/// discriminator loss, as one differentiable function of every parameter.
/// Fakes are *not* detached here, so the function is well defined for
/// finite differencing.
#[derive(Debug, Clone)]
pub struct MicroObjective {
    pub model: Translator,
    pub params: ParamStore<f64>,
    pub batch: Vec<PairedExample>,
    pub noise_seed: u64,
}

fn random_sample(cfg: &ModelConfig, m: ModalityTag, channels: usize, len: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    match m {
        ModalityTag::Image => {
            let s = cfg.image_size;
            let data = (0..channels * s * s).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Sample::image(channels, s, s, data)
        }
        ModalityTag::Sequence => {
            let data = (0..len * cfg.frame_dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            Sample::sequence(len, cfg.frame_dim, data)
        }
        ModalityTag::Text => Sample::text((0..len).map(|_| rng.random_range(1..cfg.vocab_size as u32)).collect()),
    }
}

/// Builds the objective for `task` on `cfg` (normally [`ModelConfig::micro`]).
///
/// Zero-initialised tensors (biases) are jittered: with exact zero biases a
/// ReLU row that is dead everywhere feeds the next layer a pre-activation of
/// exactly 0, a kink that central differences straddle symmetrically and
/// cannot detect.
pub fn micro_objective(cfg: &ModelConfig, task: &TaskSpec, seed: u64) -> Result<MicroObjective> {
    let (model, mut params) = Translator::new(cfg, task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get_mut(id);
        if p.iter().all(|&v| v == 0.0) {
            p.mapv_inplace(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        }
    }
    let mut batch = Vec::new();
    for _ in 0..cfg.batch_size {
        let src_len = 5;
        let source = random_sample(cfg, task.source, cfg.source_image_channels, src_len, &mut rng)?;
        let tgt_len = match (task.source, task.target) {
            (ModalityTag::Image, _) => cfg.text_out_len,
            _ => src_len,
        };
        let target = random_sample(cfg, task.target, 3, tgt_len, &mut rng)?;
        batch.push(PairedExample::training(source, target));
    }
    Ok(MicroObjective {
        model,
        params,
        batch,
        noise_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
    })
}

impl MicroObjective {
    pub fn eval<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>) -> Result<Var> {
        let refs: Vec<&PairedExample> = self.batch.iter().collect();
        let groups = group_by_shape(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut paths = forward_paths(&self.model, g, s, &groups, &mut rng)?;
        let nodes: Vec<_> = paths.iter().map(|p| (p.src, p.tgt, p.t_enc, p.t_sam, p.weight)).collect();
        let d = discriminator_loss(&self.model, g, s, &nodes, &mut PathCounters::default())?;
        let (gt, _) = generator_total(&self.model, g, s, &mut paths)?;
        Ok(g.add(gt, d)?)
    }

    pub fn value(&self, s: &ParamStore<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.eval(&mut g, s)?;
        Ok(g.scalar(l))
    }
}

/// Gradient check of a [`MicroObjective`], grouped by sub-network. With
/// `bits = 32` the analytic gradient is computed in `f32` while the
/// finite-difference reference stays in `f64`, both on the same
/// `f32`-rounded weights.
pub fn check_gradients(obj: &MicroObjective, bits: u32, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let base = match bits {
        64 => obj.params.clone(),
        32 => obj.params.cast::<f32>().cast::<f64>(),
        other => return Err(Error::contract(format!("precision must be 32 or 64, got {other}"))),
    };
    let analytic = if bits == 64 {
        let mut g = Graph::new();
        let l = obj.eval(&mut g, &base)?;
        collect(&g, l, &base)?
    } else {
        let s32 = base.cast::<f32>();
        let mut g = Graph::new();
        let l = obj.eval(&mut g, &s32)?;
        collect(&g, l, &s32)?
    };
    let mut groups: Vec<(String, Vec<ParamId>)> = crate::model::ParamGroup::ALL
        .iter()
        .map(|g| (g.name().to_string(), Vec::new()))
        .collect();
    for (id, name, _) in base.iter() {
        let k = obj.model.param_group(name) as usize;
        groups[k].1.push(id);
    }
    groups.retain(|(_, v)| !v.is_empty());
    let value = |p: &ParamStore<f64>| obj.value(p);
    run_check(&base, &groups, &analytic, &value, opts)
}
