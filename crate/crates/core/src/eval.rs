//! Sampling from trained models and the desk-scale evaluation protocols:
//! diversity, domain-transfer accuracy, realism (content preservation) and
//! mode coverage, plus the four-variant ablation grid.
//!
//! Diversity uses mean-L1 distance in sample space (pixels or frames; for
//! text, the fraction of differing token positions) as a stand-in for a
//! perceptual metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use m3d_autograd::{Graph, ParamStore, Real};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::standard_normal;
use crate::datamodel::archive::write_atomic;
use crate::datamodel::{ModalityTag, ModelConfig, PairedExample, Sample};
use crate::error::{Error, Result};
use crate::model::Translator;
use crate::synthdata::{self, Dataset, DataSpec, ShapeClass};
use crate::trainer::{self, load_checkpoint, RunOutput, TrainState};

// ---------------------------------------------------------------- sampling

#[derive(Debug, Clone, PartialEq)]
pub enum SampleMode {
    /// One `T_enc`, steered by a reference from the target domain.
    Reference(Sample),
    /// `n` draws of `T_sam`; draw `i` uses noise stream `i` of `seed`.
    Prior { n: usize, seed: u64 },
}

/// Prior latent of draw `index` under `seed`.
pub fn prior_latent(dim: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    standard_normal(&mut rng, dim)
}

fn latent_batch<T: Real>(zs: &[Vec<f64>]) -> ArrayD<T> {
    let dim = zs[0].len();
    let data = zs.iter().flatten().map(|&v| T::from(v).expect("finite")).collect();
    ArrayD::from_shape_vec(IxDyn(&[zs.len(), dim]), data).expect("len")
}

/// `G(S_i, z_i)` for equally shaped sources in one batched pass.
pub fn generate_batch<T: Real>(
    model: &Translator,
    params: &ParamStore<T>,
    sources: &[&Sample],
    zs: &[Vec<f64>],
) -> Result<Vec<Sample>> {
    if sources.len() != zs.len() {
        return Err(Error::contract("one latent per source required"));
    }
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(z) = zs.iter().find(|z| z.len() != model.cfg.latent_dim) {
        return Err(Error::shape(format!(
            "latent of dim {} for latent_dim {}",
            z.len(),
            model.cfg.latent_dim
        )));
    }
    let mut g = Graph::<T>::new();
    let src = g.constant(model.source_tensor(sources)?);
    let repr = model.source_repr(&mut g, params, src)?;
    let z = g.constant(latent_batch(zs));
    let code = model.code(&mut g, params, z)?;
    let out = model.generate(&mut g, params, repr, code, model.default_out_len(sources[0]))?;
    (0..sources.len()).map(|i| model.decode_output(g.value(out), i)).collect()
}

/// Posterior means of `E_att` for equally shaped references.
pub fn encode_batch<T: Real>(model: &Translator, params: &ParamStore<T>, refs: &[&Sample]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::<T>::new();
    let r = g.constant(model.target_tensor(refs)?);
    let e = model.encode(&mut g, params, r)?;
    let mu = g.value(e.mu);
    Ok(mu.outer_iter().map(|row| row.iter().map(|v| v.to_f64().expect("finite")).collect()).collect())
}

/// Runs `f` over index groups of equal source (and, if given, reference)
/// shape, in chunks of `chunk`, and scatters results back into order.
fn by_shape<F>(keys: &[Vec<usize>], chunk: usize, mut f: F) -> Result<Vec<Sample>>
where
    F: FnMut(&[usize]) -> Result<Vec<Sample>>,
{
    let mut groups: BTreeMap<&Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut out: Vec<Option<Sample>> = vec![None; keys.len()];
    for idx in groups.values() {
        for part in idx.chunks(chunk.max(1)) {
            for (i, s) in part.iter().zip(f(part)?) {
                out[*i] = Some(s);
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("filled")).collect())
}

const EVAL_CHUNK: usize = 32;

/// `T_sam` for each `(source, latent)` pair, batched by source shape.
pub fn generate_many<T: Real>(
    model: &Translator,
    params: &ParamStore<T>,
    sources: &[&Sample],
    zs: &[Vec<f64>],
) -> Result<Vec<Sample>> {
    let keys: Vec<Vec<usize>> = sources.iter().map(|s| s.shape().to_vec()).collect();
    by_shape(&keys, EVAL_CHUNK, |idx| {
        let s: Vec<&Sample> = idx.iter().map(|&i| sources[i]).collect();
        let z: Vec<Vec<f64>> = idx.iter().map(|&i| zs[i].clone()).collect();
        generate_batch(model, params, &s, &z)
    })
}

/// `T_enc` for each `(source, reference)` pair, using the posterior mean.
pub fn transfer_many<T: Real>(
    model: &Translator,
    params: &ParamStore<T>,
    sources: &[&Sample],
    refs: &[&Sample],
) -> Result<Vec<Sample>> {
    let keys: Vec<Vec<usize>> = sources
        .iter()
        .zip(refs)
        .map(|(s, r)| s.shape().iter().chain(r.shape()).copied().collect())
        .collect();
    by_shape(&keys, EVAL_CHUNK, |idx| {
        let s: Vec<&Sample> = idx.iter().map(|&i| sources[i]).collect();
        let r: Vec<&Sample> = idx.iter().map(|&i| refs[i]).collect();
        let z = encode_batch(model, params, &r)?;
        generate_batch(model, params, &s, &z)
    })
}

/// Samples from an in-memory model, honouring the task's inference-output
/// pattern.
pub fn sample_with<T: Real>(
    model: &Translator,
    params: &ParamStore<T>,
    source: &Sample,
    mode: &SampleMode,
) -> Result<Vec<Sample>> {
    let task = &model.task;
    if source.modality() != task.source {
        return Err(Error::contract(format!(
            "task {} takes {} sources, got {}",
            task.name,
            task.source,
            source.modality()
        )));
    }
    match mode {
        SampleMode::Reference(r) => {
            if !task.inference.encoded {
                return Err(Error::contract(format!(
                    "task {} has no reference-conditioned output (T_enc = ×); use prior sampling",
                    task.name
                )));
            }
            if r.modality() != task.target {
                return Err(Error::contract(format!("reference must be {}, got {}", task.target, r.modality())));
            }
            transfer_many(model, params, &[source], &[r])
        }
        SampleMode::Prior { n, seed } => {
            if !task.inference.sampled {
                return Err(Error::contract(format!("task {} has no prior-sampled output (T_sam = ×)", task.name)));
            }
            let zs: Vec<Vec<f64>> = (0..*n).map(|i| prior_latent(model.cfg.latent_dim, *seed, i)).collect();
            let srcs = vec![source; *n];
            generate_many(model, params, &srcs, &zs)
        }
    }
}

/// Loads a checkpoint and samples from it.
pub fn sample(checkpoint: &Path, source: &Sample, mode: &SampleMode) -> Result<Vec<Sample>> {
    let state = load_checkpoint(checkpoint)?;
    sample_with(&state.model, &state.params, source, mode)
}

// ---------------------------------------------------------------- metrics

/// Mean-L1 distance between two samples of the same shape; for text the
/// fraction of positions whose ids differ.
pub fn sample_distance(a: &Sample, b: &Sample) -> Result<f64> {
    if a.shape() != b.shape() || a.modality() != b.modality() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(match (a.values(), b.values()) {
        (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / x.len() as f64,
        _ => {
            let (x, y) = (a.ids().expect("text"), b.ids().expect("text"));
            x.iter().zip(y).filter(|(p, q)| p != q).count() as f64 / x.len() as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    pub per_source: Vec<f64>,
    pub grand_mean: f64,
    /// Standard error of the grand mean across sources.
    pub std_error: f64,
    pub n_sources: usize,
    /// Smallest group size.
    pub n_samples_per_source: usize,
}

/// Mean over all unordered pairs within each group, then over groups.
pub fn diversity_score(groups: &[Vec<Sample>]) -> Result<DiversityReport> {
    if groups.is_empty() {
        return Err(Error::contract("no sample groups"));
    }
    let mut per_source = Vec::with_capacity(groups.len());
    for (k, grp) in groups.iter().enumerate() {
        if grp.len() < 2 {
            return Err(Error::contract(format!("group {k} has {} sample(s); need at least 2", grp.len())));
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..grp.len() {
            for j in i + 1..grp.len() {
                sum += sample_distance(&grp[i], &grp[j])?;
                pairs += 1;
            }
        }
        per_source.push(sum / pairs as f64);
    }
    let n = per_source.len() as f64;
    let grand_mean = per_source.iter().sum::<f64>() / n;
    let std_error = if per_source.len() > 1 {
        let var = per_source.iter().map(|d| (d - grand_mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(DiversityReport {
        grand_mean,
        std_error,
        n_sources: groups.len(),
        n_samples_per_source: groups.iter().map(Vec::len).min().unwrap_or(0),
        per_source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainAccuracy {
    pub accuracy: f64,
    pub hits: usize,
    /// Classified, but as the wrong style.
    pub wrong: usize,
    /// Rejected by the oracle; counted as misses.
    pub unclassified: usize,
}

/// Fraction of samples whose oracle style equals the style of the reference
/// that conditioned them.
pub fn domain_accuracy<F>(synthesized: &[Sample], reference_styles: &[usize], oracle: F) -> Result<DomainAccuracy>
where
    F: Fn(usize, &Sample) -> Option<usize>,
{
    if synthesized.len() != reference_styles.len() {
        return Err(Error::contract("one reference style per synthesized sample required"));
    }
    let mut r = DomainAccuracy {
        accuracy: 0.0,
        hits: 0,
        wrong: 0,
        unclassified: 0,
    };
    for (i, (s, &want)) in synthesized.iter().zip(reference_styles).enumerate() {
        match oracle(i, s) {
            Some(got) if got == want => r.hits += 1,
            Some(_) => r.wrong += 1,
            None => r.unclassified += 1,
        }
    }
    r.accuracy = if synthesized.is_empty() { 0.0 } else { r.hits as f64 / synthesized.len() as f64 };
    Ok(r)
}

/// Number of styles in `0..k` the oracle never reports.
pub fn mode_coverage<F>(synthesized: &[Sample], oracle: F, k_styles: usize) -> usize
where
    F: Fn(usize, &Sample) -> Option<usize>,
{
    let seen: BTreeSet<usize> = synthesized
        .iter()
        .enumerate()
        .filter_map(|(i, s)| oracle(i, s))
        .filter(|&s| s < k_styles)
        .collect();
    k_styles - seen.len()
}

/// Fraction of samples whose oracle content class equals the expected one.
pub fn realism_accuracy<F>(synthesized: &[Sample], expected: &[usize], content_oracle: F) -> Result<f64>
where
    F: Fn(&Sample) -> Option<usize>,
{
    if synthesized.len() != expected.len() {
        return Err(Error::contract("one expected class per synthesized sample required"));
    }
    if synthesized.is_empty() {
        return Ok(0.0);
    }
    let hits = synthesized
        .iter()
        .zip(expected)
        .filter(|(s, &e)| content_oracle(s) == Some(e))
        .count();
    Ok(hits as f64 / synthesized.len() as f64)
}

/// Style of a target-domain sample generated from `source`. Silhouette
/// sources supply the foreground mask; otherwise the sample's own painted
/// mask is used.
pub fn style_oracle(spec: &DataSpec, source: &Sample, sample: &Sample) -> Option<usize> {
    match synthdata::silhouette_mask(source) {
        Some(mask) if sample.modality() == ModalityTag::Image => synthdata::target_style(spec, sample, Some(&mask)),
        _ => synthdata::target_style(spec, sample, None),
    }
}

/// Content class of a generated sample, comparable to [`Label::content`]
/// for image and caption targets.
///
/// [`Label::content`]: crate::synthdata::Label::content
pub fn content_oracle(sample: &Sample) -> Option<usize> {
    match sample.modality() {
        ModalityTag::Image => synthdata::image_content(sample).map(ShapeClass::index),
        ModalityTag::Text => synthdata::parse_caption(sample.ids()?).0.map(ShapeClass::index),
        ModalityTag::Sequence => None,
    }
}

// ---------------------------------------------------------------- protocol

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Sources used for diversity.
    pub diversity_sources: usize,
    /// Prior draws per diversity source.
    pub samples_per_source: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            diversity_sources: 100,
            samples_per_source: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub diversity: DiversityReport,
    /// `None` when the task has no reference-conditioned output.
    pub domain: Option<DomainAccuracy>,
    /// `None` when the target modality has no content oracle.
    pub realism: Option<f64>,
    pub misses: usize,
    pub k_styles: usize,
}

impl EvalReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("diversity", self.diversity.grand_mean),
            ("diversity_se", self.diversity.std_error),
        ];
        if let Some(d) = self.domain {
            v.push(("domain_accuracy", d.accuracy));
            v.push(("domain_unclassified", d.unclassified as f64));
        }
        if let Some(r) = self.realism {
            v.push(("realism_accuracy", r));
        }
        v.push(("miss", self.misses as f64));
        v
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.rows().iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
        f.write_str(&parts.join(" "))
    }
}

/// Evaluates a model on a held-out split.
///
/// * diversity: `samples_per_source` prior draws for each of the first
///   `diversity_sources` sources;
/// * coverage and realism: the same draws, judged by the oracles;
/// * domain accuracy: one `T_enc` per test example, conditioned on the
///   target of another test example drawn by a seeded permutation.
pub fn evaluate<T: Real>(model: &Translator, params: &ParamStore<T>, test: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    if opts.samples_per_source < 2 {
        return Err(Error::contract("samples_per_source must be at least 2"));
    }
    let spec = &test.spec;
    let n_src = opts.diversity_sources.clamp(1, test.len());
    let m = opts.samples_per_source;
    let mut sources = Vec::with_capacity(n_src * m);
    let mut zs = Vec::with_capacity(n_src * m);
    for i in 0..n_src {
        for j in 0..m {
            sources.push(&test.examples[i].source);
            zs.push(prior_latent(model.cfg.latent_dim, opts.seed, i * m + j));
        }
    }
    let drawn = generate_many(model, params, &sources, &zs)?;
    let groups: Vec<Vec<Sample>> = drawn.chunks(m).map(<[Sample]>::to_vec).collect();
    let diversity = diversity_score(&groups)?;
    let misses = mode_coverage(&drawn, |i, s| style_oracle(spec, sources[i], s), spec.k_styles());
    let realism = match model.task.target {
        ModalityTag::Sequence => None,
        _ => {
            let expected: Vec<usize> = (0..drawn.len()).map(|i| test.labels[i / m].content).collect();
            Some(realism_accuracy(&drawn, &expected, content_oracle)?)
        }
    };

    let domain = if model.task.inference.encoded {
        let mut perm: Vec<usize> = (0..test.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ 0xd0d0));
        let srcs: Vec<&Sample> = test.examples.iter().map(|e| &e.source).collect();
        let refs: Vec<&Sample> = perm.iter().map(|&j| &test.examples[j].target).collect();
        let want: Vec<usize> = perm.iter().map(|&j| test.labels[j].style).collect();
        let out = transfer_many(model, params, &srcs, &refs)?;
        Some(domain_accuracy(&out, &want, |i, s| style_oracle(spec, srcs[i], s))?)
    } else {
        None
    };
    Ok(EvalReport {
        diversity,
        domain,
        realism,
        misses,
        k_styles: spec.k_styles(),
    })
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut csv = String::from("metric,value\n");
    for (k, v) in report.rows() {
        csv.push_str(&format!("{k},{v:?}\n"));
    }
    write_atomic(path, csv.as_bytes())
}

// ---------------------------------------------------------------- ablation

/// The four rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// cVAE-GAN path only (`λ2 = λ3 = 0`).
    Vae,
    /// Both paths, no distance regulariser (`λ3 = 0`).
    VaeLat,
    /// Full objective with the token layer replaced by a direct projection.
    AllNoAttention,
    /// Full objective.
    All,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vae, Variant::VaeLat, Variant::AllNoAttention, Variant::All];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Vae => "L_VAE",
            Variant::VaeLat => "L_VAE+lat",
            Variant::AllNoAttention => "L_all w/o Att",
            Variant::All => "L_all",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Vae => {
                c.loss.lambda_2 = 0.0;
                c.loss.lambda_3 = 0.0;
            }
            Variant::VaeLat => c.loss.lambda_3 = 0.0,
            Variant::AllNoAttention => c.use_attention = false,
            Variant::All => {}
        }
        c
    }
}

/// One trained (variant, seed) cell; `None` metrics mark a diverged run.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub seed: u64,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub cells: Vec<AblationCell>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationRow {
    fn metric(&self, f: impl Fn(&EvalReport) -> Option<f64>) -> Option<f64> {
        median(self.cells.iter().filter_map(|c| c.report.as_ref().and_then(&f)).collect())
    }

    /// Medians over non-diverged seeds.
    pub fn diversity(&self) -> Option<f64> {
        self.metric(|r| Some(r.diversity.grand_mean))
    }

    pub fn domain(&self) -> Option<f64> {
        self.metric(|r| r.domain.map(|d| d.accuracy))
    }

    pub fn realism(&self) -> Option<f64> {
        self.metric(|r| r.realism)
    }

    pub fn misses(&self) -> Option<f64> {
        self.metric(|r| Some(r.misses as f64))
    }

    pub fn diverged(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_none()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> &AblationRow {
        self.rows.iter().find(|r| r.variant == v).expect("all variants present")
    }

    /// `L_all ≥ L_VAE+lat ≥ L_VAE` on median diversity.
    pub fn ordering_holds(&self) -> bool {
        match (self.row(Variant::All).diversity(), self.row(Variant::VaeLat).diversity(), self.row(Variant::Vae).diversity()) {
            (Some(a), Some(b), Some(c)) => a >= b && b >= c,
            _ => false,
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("variant,seeds,diverged,diversity,domain_accuracy,realism_accuracy,miss,per_seed_diversity\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.cells.iter().map(|c| c.seed.to_string()).collect();
            let per: Vec<String> = r
                .cells
                .iter()
                .map(|c| fmt(c.report.as_ref().map(|x| x.diversity.grand_mean)))
                .collect();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.variant.label(),
                seeds.join(" "),
                r.diverged(),
                fmt(r.diversity()),
                fmt(r.domain()),
                fmt(r.realism()),
                fmt(r.misses()),
                per.join(" ")
            ));
        }
        if self.rows.iter().any(|r| r.diverged() > 0) {
            s.push_str("# diverged runs are excluded from the medians\n");
        }
        s
    }

    /// Bar chart of median diversity per variant.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 300.0, 40.0);
        let vals: Vec<f64> = self.rows.iter().map(|r| r.diversity().unwrap_or(0.0)).collect();
        let top = vals.iter().cloned().fold(1e-9, f64::max) * 1.15;
        let bw = (w - 2.0 * pad) / vals.len() as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <text x=\"{pad}\" y=\"20\">median diversity (mean-L1)</text>\n\
             <line x1=\"{pad}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n",
            y0 = h - pad,
            x1 = w - pad
        );
        for (i, (r, v)) in self.rows.iter().zip(&vals).enumerate() {
            let bh = (h - 2.0 * pad - 20.0) * v / top;
            let x = pad + i as f64 * bw + 0.15 * bw;
            let y = h - pad - bh;
            s.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4a7fb5\"/>\n\
                 <text x=\"{x:.1}\" y=\"{:.1}\">{v:.4}</text>\n\
                 <text x=\"{x:.1}\" y=\"{:.1}\">{}</text>\n",
                0.7 * bw,
                y - 4.0,
                h - pad + 15.0,
                r.variant.label().replace('<', "&lt;")
            ));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        write_atomic(&dir.join("ablation.csv"), self.to_csv().as_bytes())?;
        write_atomic(&dir.join("ablation.svg"), self.to_svg().as_bytes())
    }
}

/// Trains every variant for every seed on `train` and evaluates on `test`.
/// A run that diverges is kept in the report with no metrics.
pub fn run_ablation(
    base: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    opts: &EvalOptions,
    log_every: u64,
) -> Result<AblationReport> {
    run_variants(&Variant::ALL, base, train, test, seeds, opts, log_every)
}

/// [`run_ablation`] restricted to some variants.
pub fn run_variants(
    variants: &[Variant],
    base: &ModelConfig,
    train: &Dataset,
    test: &Dataset,
    seeds: &[u64],
    opts: &EvalOptions,
    log_every: u64,
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::contract(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let task = crate::datamodel::task_registry()
        .into_iter()
        .find(|t| t.data == train.kind)
        .ok_or_else(|| Error::contract(format!("no task trains on {:?}", train.kind)))?;
    let mut rows = Vec::new();
    for &v in variants {
        let mut cells = Vec::new();
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let report = match train_and_eval(&cfg, &task, &train.examples, test, opts, log_every) {
                Ok(r) => Some(r),
                Err(Error::Diverged(_)) => None,
                Err(e) => return Err(e),
            };
            if log_every > 0 {
                let line = report.as_ref().map_or_else(|| "diverged".to_string(), |r| r.to_string());
                eprintln!("{} seed {seed}: {line}", v.label());
            }
            cells.push(AblationCell { seed, report });
        }
        rows.push(AblationRow { variant: v, cells });
    }
    Ok(AblationReport { rows })
}

fn train_and_eval(
    cfg: &ModelConfig,
    task: &crate::datamodel::TaskSpec,
    data: &[PairedExample],
    test: &Dataset,
    opts: &EvalOptions,
    log_every: u64,
) -> Result<EvalReport> {
    let state: TrainState = trainer::train(cfg, task, data, RunOutput { dir: None, log_every })?;
    evaluate(&state.model, &state.params, test, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Sample {
        Sample::image(1, 1, 2, vec![v, v]).unwrap()
    }

    #[test]
    fn diversity_examples() {
        let same = diversity_score(&[vec![img(0.5), img(0.5), img(0.5)]]).unwrap();
        assert_eq!(same.grand_mean, 0.0);
        let pair = diversity_score(&[vec![img(0.0), img(0.25)]]).unwrap();
        assert_eq!(pair.grand_mean, 0.25);
        assert!(diversity_score(&[vec![img(0.0)]]).is_err());
    }

    #[test]
    fn counting_examples() {
        let s = vec![img(0.0); 4];
        let styles = [0usize, 1, 1, 3];
        let oracle = |i: usize, _: &Sample| Some(styles[i]);
        let d = domain_accuracy(&s, &[0, 1, 1, 2], oracle).unwrap();
        assert_eq!((d.accuracy, d.hits, d.wrong), (0.75, 3, 1));
        assert_eq!(mode_coverage(&s[..3], oracle, 4), 2);
        assert_eq!(mode_coverage(&[], oracle, 4), 4);
        let rejected = domain_accuracy(&s, &[0, 0, 0, 0], |_, _| None).unwrap();
        assert_eq!((rejected.accuracy, rejected.unclassified), (0.0, 4));
    }

    #[test]
    fn text_distance_counts_positions() {
        let a = Sample::text(vec![1, 2, 3, 4]).unwrap();
        let b = Sample::text(vec![1, 2, 0, 0]).unwrap();
        assert_eq!(sample_distance(&a, &b).unwrap(), 0.5);
    }
}
