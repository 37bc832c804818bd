//! Two-path alternating optimisation.
//!
//! Every step runs an encoded path (reference → `E_att` → `z_r` → `T̂_enc`)
//! and a sampled path (`z_s ~ N(0, I)` → `T̂_sam` → recovered `ẑ`), updates
//! the discriminator on detached fakes, then updates prenet, generator and
//! attention parameters against the freshly updated discriminator.

mod checkpoint;
mod gradcheck;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use m3d_autograd::{cst, Gradients, Graph, ParamId, ParamStore, Real, Var};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{
    check_gradients, grad_check, micro_objective, GradCheckOptions, GradCheckReport, GroupReport, MicroObjective,
};

use crate::attention::standard_normal;
use crate::datamodel::{ModelConfig, PairedExample, Sample, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{ParamGroup, Translator};
use crate::objectives::{compose_total, graph as loss, LossBreakdown, LossParts};

/// Adam over a fixed subset of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(cfg: &ModelConfig, store: &ParamStore<f32>, ids: Vec<ParamId>) -> Self {
        let zeros: Vec<_> = ids.iter().map(|&id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
            t: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; parameters without a gradient this step are left alone.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[k])
                .and(&mut self.v[k])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Translator,
    pub params: ParamStore<f32>,
    pub adam_d: Adam,
    pub adam_g: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub consecutive_diverged: usize,
}

/// Stream of the step-noise generator; the data order uses its own streams.
const NOISE_STREAM: u64 = 1;

impl TrainState {
    pub fn new(cfg: &ModelConfig, task: &TaskSpec) -> Result<Self> {
        let (model, init) = Translator::new(cfg, task)?;
        let params = init.cast::<f32>();
        let (d_ids, g_ids) = split_ids(&model, &params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Self {
            adam_d: Adam::new(cfg, &params, d_ids),
            adam_g: Adam::new(cfg, &params, g_ids),
            model,
            params,
            step: 0,
            rng,
            consecutive_diverged: 0,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.model.cfg
    }

    pub fn task(&self) -> &TaskSpec {
        &self.model.task
    }

    /// Parameters promoted to `f64` (exact), for value-level inspection.
    pub fn params_f64(&self) -> ParamStore<f64> {
        self.params.cast()
    }
}

fn split_ids(model: &Translator, store: &ParamStore<f32>) -> (Vec<ParamId>, Vec<ParamId>) {
    store.iter().map(|(id, name, _)| (id, model.is_disc_param(name))).fold(
        (Vec::new(), Vec::new()),
        |(mut d, mut g), (id, is_d)| {
            if is_d { d.push(id) } else { g.push(id) }
            (d, g)
        },
    )
}

/// How often each fake reached the discriminator during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PathCounters {
    pub enc_to_d: usize,
    pub sam_to_d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub losses: LossBreakdown,
    /// L2 norm of the gradient per parameter group.
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub wall_time: Duration,
    pub diverged: bool,
    pub counters: PathCounters,
    /// Discriminator parameters were bit-identical before and after the
    /// generator sub-step.
    pub alternation_ok: bool,
}

/// Graph nodes of one shape group.
pub(crate) struct PathNodes {
    pub src: Var,
    pub tgt: Var,
    pub t_enc: Option<Var>,
    pub t_sam: Option<Var>,
    pub terms: loss::Terms,
    /// Share of the whole batch.
    pub weight: f64,
}

/// Splits a batch into runs of identical (source, target) shapes.
pub(crate) fn group_by_shape<'a>(batch: &[&'a PairedExample]) -> Vec<Vec<&'a PairedExample>> {
    let key = |e: &PairedExample| (e.source.shape().to_vec(), e.target.shape().to_vec(), e.reference.shape().to_vec());
    let mut groups: Vec<Vec<&PairedExample>> = Vec::new();
    for &ex in batch {
        match groups.iter_mut().find(|g| key(g[0]) == key(ex)) {
            Some(g) => g.push(ex),
            None => groups.push(vec![ex]),
        }
    }
    groups
}

pub(crate) fn noise<T: Real>(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> ArrayD<T> {
    let v = standard_normal(rng, n * dim).into_iter().map(|x| cst::<T>(x)).collect();
    ArrayD::from_shape_vec(IxDyn(&[n, dim]), v).expect("len")
}

/// Both generator paths for every group, up to (not including) the
/// adversarial terms. Noise is drawn per group: `ε` for the encoded path,
/// then `z_s`, then (when recovery samples) the recovery `ε`.
pub(crate) fn forward_paths<T: Real>(
    model: &Translator,
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    groups: &[Vec<&PairedExample>],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PathNodes>> {
    let cfg = &model.cfg;
    let w = cfg.loss;
    let need_enc = w.lambda_1 > 0.0 || w.lambda_3 > 0.0;
    let need_sam = w.lambda_2 > 0.0 || w.lambda_3 > 0.0;
    let zdim = cfg.latent_dim;
    let total_n: usize = groups.iter().map(Vec::len).sum();
    let mut paths = Vec::new();
    for grp in groups {
        let n = grp.len();
        let srcs: Vec<&Sample> = grp.iter().map(|e| &e.source).collect();
        let tgts: Vec<&Sample> = grp.iter().map(|e| &e.target).collect();
        let refs: Vec<&Sample> = grp.iter().map(|e| &e.reference).collect();
        let src = g.constant(model.source_tensor(&srcs)?);
        let tgt = g.constant(model.target_tensor(&tgts)?);
        let out_len = Translator::out_len(tgts[0]);
        let repr = model.source_repr(g, s, src)?;
        let mut terms = loss::Terms::default();
        let (mut t_enc, mut z_r) = (None, None);
        if need_enc {
            let r = g.constant(model.target_tensor(&refs)?);
            let e = model.encode(g, s, r)?;
            let eps = g.constant(noise(rng, n, zdim));
            let half = g.scale(e.logvar, 0.5);
            let sd = g.exp(half);
            let spread = g.mul(sd, eps)?;
            let z = g.add(e.mu, spread)?;
            let code = model.code(g, s, z)?;
            let out = model.generate(g, s, repr, code, out_len)?;
            terms.rec = Some(loss::rec(g, out, tgt, cfg.norm)?);
            terms.kl = Some(loss::kl(g, e.mu, e.logvar)?);
            t_enc = Some(out);
            z_r = Some(z);
        }
        let (mut t_sam, mut z_s) = (None, None);
        if need_sam {
            let z = g.constant(noise(rng, n, zdim));
            let code = model.code(g, s, z)?;
            let out = model.generate(g, s, repr, code, out_len)?;
            let (mu_hat, lv_hat) = model.recover(g, s, out)?;
            let z_hat = if cfg.recovery_uses_mean {
                mu_hat
            } else {
                let eps = g.constant(noise(rng, n, zdim));
                let half = g.scale(lv_hat, 0.5);
                let sd = g.exp(half);
                let spread = g.mul(sd, eps)?;
                g.add(mu_hat, spread)?
            };
            terms.lat = Some(loss::lat(g, z, z_hat)?);
            t_sam = Some(out);
            z_s = Some(z);
        }
        if let (Some(a), Some(b), Some(za), Some(zb)) = (t_enc, t_sam, z_r, z_s) {
            if w.lambda_3 > 0.0 {
                terms.dist = Some(loss::dist(g, a, b, za, zb, cfg.dist_eps, cfg.norm)?);
            }
        }
        paths.push(PathNodes {
            src,
            tgt,
            t_enc,
            t_sam,
            terms,
            weight: n as f64 / total_n as f64,
        });
    }
    Ok(paths)
}

/// `λ1·Σ d_enc + λ2·Σ d_sam` over groups, each weighted by its batch share.
/// `nodes` holds `(src, real, fake_enc, fake_sam, weight)` already living in
/// `g`.
pub(crate) fn discriminator_loss<T: Real>(
    model: &Translator,
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    nodes: &[(Var, Var, Option<Var>, Option<Var>, f64)],
    counters: &mut PathCounters,
) -> Result<Var> {
    let w = model.cfg.loss;
    let mut total = g.scalar_constant(T::zero());
    for &(src, real, enc, sam, weight) in nodes {
        let real_logit = model.discriminate(g, s, src, real)?;
        for (fake, lambda, is_enc) in [(enc, w.lambda_1, true), (sam, w.lambda_2, false)] {
            let Some(fake) = fake else { continue };
            if lambda == 0.0 {
                continue;
            }
            let fake_logit = model.discriminate(g, s, src, fake)?;
            let l = loss::gan_d(g, real_logit, fake_logit)?;
            let l = g.scale(l, lambda * weight);
            total = g.add(total, l)?;
            if is_enc {
                counters.enc_to_d += 1;
            } else {
                counters.sam_to_d += 1;
            }
        }
    }
    Ok(total)
}

/// Adds the adversarial terms and returns the weighted generator total with
/// its unweighted parts (`gan_d` left at zero).
pub(crate) fn generator_total<T: Real>(
    model: &Translator,
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    paths: &mut [PathNodes],
) -> Result<(Var, LossParts)> {
    let w = model.cfg.loss;
    let mut parts = LossParts::default();
    let mut total = g.scalar_constant(T::zero());
    for p in paths {
        for (fake, lambda, slot) in [
            (p.t_enc, w.lambda_1, &mut p.terms.gan_enc),
            (p.t_sam, w.lambda_2, &mut p.terms.gan_sam),
        ] {
            if let (Some(fake), true) = (fake, lambda > 0.0) {
                let logit = model.discriminate(g, s, p.src, fake)?;
                *slot = Some(loss::gan_g(g, logit, model.cfg.gan_generator_loss));
            }
        }
        let t = loss::total(g, &p.terms, &w)?;
        let t = g.scale(t, p.weight);
        total = g.add(total, t)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).to_f64().unwrap_or(f64::NAN));
        parts.gan_enc += p.weight * val(p.terms.gan_enc);
        parts.gan_sam += p.weight * val(p.terms.gan_sam);
        parts.rec += p.weight * val(p.terms.rec);
        parts.kl += p.weight * val(p.terms.kl);
        parts.lat += p.weight * val(p.terms.lat);
        parts.dist += p.weight * val(p.terms.dist);
    }
    Ok((total, parts))
}

fn params_hash(store: &ParamStore<f32>, ids: &[ParamId]) -> u64 {
    // FNV-1a over the raw bits.
    let mut h = 0xcbf29ce484222325u64;
    for &id in ids {
        for x in store.get(id) {
            for b in x.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

fn grad_norms(
    model: &Translator,
    store: &ParamStore<f32>,
    grads: &Gradients<f32>,
    only_disc: bool,
    out: &mut BTreeMap<ParamGroup, f64>,
) -> bool {
    let mut finite = true;
    for (id, name, _) in store.iter() {
        if model.is_disc_param(name) != only_disc {
            continue;
        }
        if let Some(g) = grads.param(id) {
            let ss: f64 = g.iter().map(|&x| (x as f64) * (x as f64)).sum();
            finite &= ss.is_finite();
            *out.entry(model.param_group(name)).or_insert(0.0) += ss;
        }
    }
    finite
}

/// One alternating update. On a non-finite loss or gradient the parameters
/// and optimiser moments are restored and the step is flagged as diverged;
/// the step counter and noise stream still advance.
pub fn train_step(state: &mut TrainState, batch: &[&PairedExample]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    for ex in batch {
        if ex.source.modality() != state.task().source || ex.target.modality() != state.task().target {
            return Err(Error::contract(format!(
                "task {} expects ({}, {}) pairs, got ({}, {})",
                state.task().name,
                state.task().source,
                state.task().target,
                ex.source.modality(),
                ex.target.modality()
            )));
        }
    }
    let started = Instant::now();
    let snapshot = (state.params.clone(), state.adam_d.clone(), state.adam_g.clone());
    let model = state.model.clone();
    let groups = group_by_shape(batch);

    let mut g = Graph::<f32>::new();
    let mut paths = forward_paths(&model, &mut g, &state.params, &groups, &mut state.rng)?;

    // Discriminator sub-step on detached copies of the fakes.
    let mut counters = PathCounters::default();
    let mut gd = Graph::<f32>::new();
    let mut copy = |v: Var| gd.constant(g.value(v).clone());
    let nodes: Vec<_> = paths
        .iter()
        .map(|p| (copy(p.src), copy(p.tgt), p.t_enc.map(&mut copy), p.t_sam.map(&mut copy), p.weight))
        .collect();
    let d_total = discriminator_loss(&model, &mut gd, &state.params, &nodes, &mut counters)?;
    let gan_d = gd.scalar(d_total) as f64;
    let mut norms = BTreeMap::new();
    let mut finite = gan_d.is_finite();
    if finite && counters.enc_to_d + counters.sam_to_d > 0 {
        let grads = gd.backward(d_total)?;
        finite &= grad_norms(&model, &state.params, &grads, true, &mut norms);
        if finite {
            state.adam_d.update(&mut state.params, &grads);
        }
    }
    drop(gd);

    // Generator sub-step against the updated discriminator.
    let d_hash = params_hash(&state.params, &state.adam_d.ids);
    let (g_total, mut parts) = generator_total(&model, &mut g, &state.params, &mut paths)?;
    parts.gan_d = gan_d;
    let losses = compose_total(&parts, &model.cfg.loss);
    finite &= losses.is_finite() && (g.scalar(g_total) as f64).is_finite();
    if finite {
        let grads = g.backward(g_total)?;
        finite &= grad_norms(&model, &state.params, &grads, false, &mut norms);
        if finite {
            state.adam_g.update(&mut state.params, &grads);
        }
    }
    let alternation_ok = params_hash(&state.params, &state.adam_d.ids) == d_hash;

    state.step += 1;
    if finite {
        state.consecutive_diverged = 0;
    } else {
        (state.params, state.adam_d, state.adam_g) = snapshot;
        state.consecutive_diverged += 1;
    }
    for v in norms.values_mut() {
        *v = v.sqrt();
    }
    Ok(StepMetrics {
        step: state.step,
        losses,
        grad_norms: norms,
        wall_time: started.elapsed(),
        diverged: !finite,
        counters,
        alternation_ok,
    })
}

/// Steps implied by the config for a dataset of `n` examples.
pub fn total_steps(cfg: &ModelConfig, n: usize) -> u64 {
    if cfg.max_steps > 0 {
        cfg.max_steps as u64
    } else {
        (cfg.epochs * n.div_ceil(cfg.batch_size)) as u64
    }
}

/// Example indices of the batch trained at `step` (0-based): a fresh
/// seeded shuffle per epoch.
pub fn batch_indices(cfg: &ModelConfig, n: usize, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let end = ((k + 1) * cfg.batch_size).min(n);
    order[k * cfg.batch_size..end].to_vec()
}

/// Where a run writes its artefacts.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOutput<'a> {
    /// Run directory: `config.toml`, `metrics.csv`, `checkpoint/` and
    /// `checkpoints/step_NNNNNNNN/`. `None` trains in memory only.
    pub dir: Option<&'a Path>,
    /// Print one progress line every this many steps (0 = silent).
    pub log_every: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Trains from scratch for the configured number of steps.
pub fn train(cfg: &ModelConfig, task: &TaskSpec, data: &[PairedExample], out: RunOutput) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, task)?;
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        crate::datamodel::config_file::save(&dir.join("config.toml"), cfg)?;
        let header = format!("{}\n", LossBreakdown::CSV_HEADER);
        crate::datamodel::archive::write_atomic(&dir.join(METRICS_FILE), header.as_bytes())?;
    }
    let until = total_steps(cfg, data.len());
    run_steps(&mut state, data, until, out)?;
    Ok(state)
}

/// Continues a run from a checkpoint directory to the configured end.
/// `metrics.csv` in the run directory is truncated to the checkpoint's step
/// before new rows are appended.
pub fn resume(checkpoint: &Path, data: &[PairedExample], out: RunOutput) -> Result<TrainState> {
    let mut state = load_checkpoint(checkpoint)?;
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        crate::datamodel::config_file::save(&dir.join("config.toml"), state.cfg())?;
        let path = dir.join(METRICS_FILE);
        let old = fs::read_to_string(&path).unwrap_or_default();
        let mut kept = format!("{}\n", LossBreakdown::CSV_HEADER);
        for line in old.lines().skip(1) {
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step <= state.step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        crate::datamodel::archive::write_atomic(&path, kept.as_bytes())?;
    }
    let until = total_steps(state.cfg(), data.len());
    run_steps(&mut state, data, until, out)?;
    Ok(state)
}

/// Runs steps until `state.step == until`, writing metrics and checkpoints
/// if an output directory is given. The final checkpoint goes to
/// `<dir>/checkpoint`.
pub fn run_steps(state: &mut TrainState, data: &[PairedExample], until: u64, out: RunOutput) -> Result<()> {
    if data.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let mut csv = String::new();
    let every = state.cfg().checkpoint_every as u64;
    while state.step < until {
        let idx = batch_indices(state.cfg(), data.len(), state.step);
        let batch: Vec<&PairedExample> = idx.iter().map(|&i| &data[i]).collect();
        let m = train_step(state, &batch)?;
        if m.diverged && state.consecutive_diverged >= state.cfg().diverge_limit {
            return Err(Error::Diverged(state.consecutive_diverged));
        }
        if out.log_every > 0 && (m.step % out.log_every == 0 || m.step == until) {
            eprintln!(
                "step {:>6}  d {:.4}  g_enc {:.4}  g_sam {:.4}  rec {:.4}  kl {:.3}  lat {:.4}  dist {:.4}",
                m.step, m.losses.gan_d, m.losses.gan_g_enc, m.losses.gan_g_sam, m.losses.rec, m.losses.kl,
                m.losses.lat, m.losses.dist
            );
        }
        if let Some(dir) = out.dir {
            csv.push_str(&m.losses.csv_row(m.step));
            csv.push('\n');
            let periodic = every > 0 && state.step.is_multiple_of(every);
            if periodic || state.step == until {
                append(&dir.join(METRICS_FILE), &csv)?;
                csv.clear();
            }
            if periodic {
                save_checkpoint(state, &dir.join("checkpoints").join(format!("step_{:08}", state.step)))?;
            }
        }
    }
    if let Some(dir) = out.dir {
        append(&dir.join(METRICS_FILE), &csv)?;
        save_checkpoint(state, &dir.join("checkpoint"))?;
    }
    Ok(())
}

fn append(path: &Path, rows: &str) -> Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let mut text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    text.push_str(rows);
    crate::datamodel::archive::write_atomic(path, text.as_bytes())
}
