//! The `m3d` command line: one subcommand per capability.
//!
//! Exit codes: 0 success, 1 usage or contract error, 2 I/O or archive
//! error, 3 training diverged. The last line printed to stdout is always
//! `RESULT key=value ...`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::datamodel::archive::{read_sample, write_sample};
use crate::datamodel::{config_file, find_task, task_registry, DataKind, ModalityTag, ModelConfig, Preset, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, SampleMode};
use crate::synthdata::{self, CaptionImageSpec, DataSpec, Dataset, SequenceStyleSpec, ShapeStyleSpec};
use crate::trainer::{self, GradCheckOptions, RunOutput};

pub const SEED_ENV: &str = "M3D_SEED";

#[derive(Debug, Parser)]
#[command(name = "m3d", version, about = "Multi-modal, multi-domain translation at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus.
    GenData(GenDataArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Sample from a trained checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the four-variant ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference check of the full objective on a micro model.
    Gradcheck(GradcheckArgs),
    /// Print the token bank and, optionally, a reference's attention.
    InspectTokens(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Shapes,
    Captions,
    CaptionsReversed,
    CaptionsTranslated,
    Sequences,
    SequencesReversed,
}

impl From<KindArg> for DataKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Shapes => DataKind::Shapes,
            KindArg::Captions => DataKind::Captions,
            KindArg::CaptionsReversed => DataKind::CaptionsReversed,
            KindArg::CaptionsTranslated => DataKind::CaptionsTranslated,
            KindArg::Sequences => DataKind::Sequences,
            KindArg::SequencesReversed => DataKind::SequencesReversed,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed (falls back to $M3D_SEED, then 1).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Upper bound on worker threads; runs are single-threaded and
    /// bit-stable, so only 1 is currently used.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus family and orientation.
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// TOML file with spec fields; omitted fields keep their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Number of examples (overrides the spec file).
    #[arg(long)]
    pub n: Option<usize>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file; partial files overlay the preset named in them (desk if
    /// absent).
    #[arg(long)]
    pub config: PathBuf,
    /// Task name or alias.
    #[arg(long)]
    pub task: String,
    /// Dataset directory; generated from the task's corpus when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Examples to generate when --data is omitted.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hard step budget (overrides the config).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Progress line every this many steps (0 = silent).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Reference,
    Prior,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Expected task; checked against the registry before anything loads.
    #[arg(long)]
    pub task: Option<String>,
    /// Source sample (.m3dt).
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Prior)]
    pub mode: ModeArg,
    /// Reference sample (.m3dt) for --mode reference.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Number of prior draws.
    #[arg(long, default_value_t = 6)]
    pub n: usize,
    /// Output directory for the samples.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated subset of diversity,domain,realism,coverage.
    #[arg(long, default_value = "diversity,domain,realism,coverage")]
    pub metrics: String,
    /// Sources used for diversity.
    #[arg(long, default_value_t = 100)]
    pub sources: usize,
    /// Prior draws per source.
    #[arg(long, default_value_t = 6)]
    pub samples_per_source: usize,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Base config (overlay as for `train`).
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seeds (at least 3).
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    /// Dataset directory; a colored-shapes corpus is generated when omitted.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Leading examples used for training; the rest are the test split.
    #[arg(long, default_value_t = 2000)]
    pub train_size: usize,
    /// Test examples generated when --dataset is omitted.
    #[arg(long, default_value_t = 500)]
    pub test_size: usize,
    /// Output directory for ablation.csv and ablation.svg.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub log_every: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Micro,
    Desk,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = PresetArg::Micro)]
    pub preset: PresetArg,
    /// 64 or 32.
    #[arg(long, default_value_t = 64)]
    pub precision: u32,
    /// Task to check; all six published tasks when omitted.
    #[arg(long)]
    pub task: Option<String>,
    /// Coordinates sampled per parameter group.
    #[arg(long, default_value_t = 200)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub epsilon: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference sample (.m3dt) whose attention weights to print.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Maps an error onto the exit-code contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::CorruptArchive { .. } | Error::Version { .. } => 2,
        Error::Diverged(_) => 3,
        _ => 1,
    }
}

fn seed(c: &Common) -> Result<u64> {
    if c.workers == 0 {
        return Err(Error::contract("--workers must be at least 1"));
    }
    match c.seed {
        Some(s) => Ok(s),
        None => match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Error::contract(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
            Err(_) => Ok(1),
        },
    }
}

fn result_line(fields: &[(&str, String)]) -> String {
    let kv: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("RESULT {}", kv.join(" "))
}

/// Parses `argv` (program name first) and runs the command.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                println!("{}", result_line(&[("status", "usage-error".into())]));
            }
            return code;
        }
    };
    match run(cli.command) {
        Ok(fields) => {
            println!("{}", result_line(&fields));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            println!("{}", result_line(&[("status", "error".into()), ("code", code.to_string())]));
            code
        }
    }
}

pub fn run(cmd: Command) -> Result<Vec<(&'static str, String)>> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::InspectTokens(a) => inspect(a),
    }
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(format!("read {}", p.display()), e))
}

/// Default spec for a corpus kind, optionally patched by a TOML file.
pub fn data_spec(kind: DataKind, patch: Option<&str>, n: Option<usize>, seed: u64) -> Result<DataSpec> {
    fn patched<S: serde::Serialize + serde::de::DeserializeOwned>(base: S, patch: Option<&str>) -> Result<S> {
        let Some(text) = patch else { return Ok(base) };
        let p: toml::Table = toml::from_str(text).map_err(|e| Error::contract(format!("spec parse error: {e}")))?;
        let mut t = match toml::Value::try_from(base) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("specs serialise to tables"),
        };
        for (k, v) in p {
            if !t.contains_key(&k) {
                return Err(Error::contract(format!("unknown spec key {k:?}")));
            }
            t.insert(k, v);
        }
        toml::Value::Table(t).try_into().map_err(|e| Error::contract(format!("spec error: {e}")))
    }
    let mut spec = match kind {
        DataKind::Shapes => DataSpec::Shapes(patched(ShapeStyleSpec { seed, ..Default::default() }, patch)?),
        DataKind::Captions | DataKind::CaptionsReversed | DataKind::CaptionsTranslated => {
            DataSpec::Captions(patched(CaptionImageSpec { seed, ..Default::default() }, patch)?)
        }
        DataKind::Sequences | DataKind::SequencesReversed => {
            DataSpec::Sequences(patched(SequenceStyleSpec { seed, ..Default::default() }, patch)?)
        }
    };
    if let Some(n) = n {
        match &mut spec {
            DataSpec::Shapes(s) => s.n_examples = n,
            DataSpec::Captions(s) => s.n_examples = n,
            DataSpec::Sequences(s) => s.n_examples = n,
        }
    }
    Ok(spec)
}

fn gen_data(a: GenDataArgs) -> Result<Vec<(&'static str, String)>> {
    let seed = seed(&a.common)?;
    let patch = a.spec.as_deref().map(read_text).transpose()?;
    let kind: DataKind = a.kind.into();
    let spec = data_spec(kind, patch.as_deref(), a.n, seed)?;
    let ds = synthdata::generate(&spec, kind)?;
    synthdata::save_dataset(&ds, &a.out)?;
    Ok(vec![
        ("command", "gen-data".into()),
        ("examples", ds.len().to_string()),
        ("out", a.out.display().to_string()),
    ])
}

/// Loads a config file, overlaying it on the preset it names (desk by
/// default).
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = read_text(path)?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::contract(format!("config parse error: {e}")))?;
    let preset = match table.get("preset").and_then(|v| v.as_str()) {
        Some("paper") => Preset::Paper,
        Some("micro") => Preset::Micro,
        _ => Preset::Desk,
    };
    let cfg = config_file::overlay(&ModelConfig::for_preset(preset), &text)?;
    crate::datamodel::validate_config(&cfg).map_err(Error::Config)?;
    Ok(cfg)
}

/// Adjusts data-dependent sizes (image source channels, vocabulary) to a
/// dataset.
pub fn fit_to_data(cfg: &mut ModelConfig, task: &TaskSpec, ds: &Dataset) -> Result<()> {
    if ds.kind != task.data {
        return Err(Error::contract(format!(
            "task {} trains on {:?} data, dataset holds {:?}",
            task.name, task.data, ds.kind
        )));
    }
    if let Some(first) = ds.examples.first() {
        if task.source == ModalityTag::Image {
            cfg.source_image_channels = first.source.shape()[0];
        }
    }
    let max_id = ds
        .examples
        .iter()
        .flat_map(|e| [&e.source, &e.target])
        .filter_map(|s| s.ids())
        .flatten()
        .max()
        .copied();
    if let Some(m) = max_id {
        cfg.vocab_size = cfg.vocab_size.max(m as usize + 1);
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<Vec<(&'static str, String)>> {
    let task = find_task(&a.task)?;
    let mut cfg = load_config(&a.config)?;
    cfg.seed = seed(&a.common)?;
    if let Some(s) = a.steps {
        cfg.max_steps = s;
    }
    let ds = match &a.data {
        Some(dir) => synthdata::load_dataset(dir)?,
        None => synthdata::generate(&data_spec(task.data, None, Some(a.n), cfg.seed)?, task.data)?,
    };
    fit_to_data(&mut cfg, &task, &ds)?;
    let out = RunOutput {
        dir: Some(&a.out),
        log_every: a.log_every,
    };
    let state = match &a.resume {
        Some(ck) => trainer::resume(ck, &ds.examples, out)?,
        None => trainer::train(&cfg, &task, &ds.examples, out)?,
    };
    Ok(vec![
        ("command", "train".into()),
        ("task", task.slug().into()),
        ("steps", state.step.to_string()),
        ("checkpoint", a.out.join("checkpoint").display().to_string()),
    ])
}

fn sample(a: SampleArgs) -> Result<Vec<(&'static str, String)>> {
    let seed = seed(&a.common)?;
    if let Some(name) = &a.task {
        let t = find_task(name)?;
        if a.mode == ModeArg::Reference && !t.inference.encoded {
            return Err(Error::contract(format!(
                "task {} has no reference-conditioned output in the task registry (T_enc = ×)",
                t.name
            )));
        }
    }
    let state = trainer::load_checkpoint(&a.checkpoint)?;
    if let Some(name) = &a.task {
        if find_task(name)?.name != state.task().name {
            return Err(Error::contract(format!("checkpoint was trained for {}", state.task().name)));
        }
    }
    let source = match &a.source {
        Some(p) => read_sample(p)?,
        None => {
            let spec = data_spec(state.task().data, None, Some(1), seed)?;
            synthdata::generate(&spec, state.task().data)?.examples.remove(0).source
        }
    };
    let mode = match a.mode {
        ModeArg::Prior => SampleMode::Prior { n: a.n, seed },
        ModeArg::Reference => {
            let p = a
                .reference
                .as_ref()
                .ok_or_else(|| Error::contract("--mode reference needs --reference"))?;
            SampleMode::Reference(read_sample(p)?)
        }
    };
    let out = eval::sample_with(&state.model, &state.params, &source, &mode)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(format!("create {}", a.out.display()), e))?;
    for (i, s) in out.iter().enumerate() {
        write_sample(&a.out.join(format!("sample_{i:03}.m3dt")), s)?;
        if s.modality() == ModalityTag::Image {
            synthdata::write_ppm(s, &a.out.join(format!("sample_{i:03}.ppm")))?;
        }
        if let Some(ids) = s.ids() {
            println!("{i}: {}", synthdata::Vocab::captions().decode(ids));
        }
    }
    Ok(vec![
        ("command", "sample".into()),
        ("samples", out.len().to_string()),
        ("out", a.out.display().to_string()),
    ])
}

fn evaluate(a: EvalArgs) -> Result<Vec<(&'static str, String)>> {
    const KNOWN: [&str; 4] = ["diversity", "domain", "realism", "coverage"];
    let wanted: Vec<&str> = a.metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|m| !KNOWN.contains(m)) {
        return Err(Error::contract(format!("unknown metric {bad:?}; expected some of {}", KNOWN.join(","))));
    }
    let opts = EvalOptions {
        diversity_sources: a.sources,
        samples_per_source: a.samples_per_source,
        seed: seed(&a.common)?,
    };
    let state = trainer::load_checkpoint(&a.checkpoint)?;
    let ds = synthdata::load_dataset(&a.dataset)?;
    let mut report = eval::evaluate(&state.model, &state.params, &ds, &opts)?;
    if !wanted.contains(&"domain") {
        report.domain = None;
    }
    if !wanted.contains(&"realism") {
        report.realism = None;
    }
    let mut csv = String::from("metric,value\n");
    let mut fields = vec![("command", "eval".to_string())];
    for (k, v) in report.rows() {
        let keep = match k {
            "diversity" | "diversity_se" => wanted.contains(&"diversity"),
            "miss" => wanted.contains(&"coverage"),
            _ => true,
        };
        if keep {
            csv.push_str(&format!("{k},{v:?}\n"));
            fields.push((k, format!("{v:.6}")));
        }
    }
    crate::datamodel::archive::write_atomic(&a.out, csv.as_bytes())?;
    Ok(fields)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::contract(format!("bad seed {x:?}"))))
        .collect()
}

fn ablate(a: AblateArgs) -> Result<Vec<(&'static str, String)>> {
    let base = load_config(&a.config)?;
    let seeds = parse_seeds(&a.seeds)?;
    let data_seed = seed(&a.common)?;
    let ds = match &a.dataset {
        Some(d) => synthdata::load_dataset(d)?,
        None => synthdata::generate(
            &data_spec(DataKind::Shapes, None, Some(a.train_size + a.test_size), data_seed)?,
            DataKind::Shapes,
        )?,
    };
    if ds.len() <= a.train_size {
        return Err(Error::contract(format!("dataset of {} leaves no test split after {}", ds.len(), a.train_size)));
    }
    let (train, test) = ds.split(a.train_size);
    let task = task_registry()
        .into_iter()
        .find(|t| t.data == ds.kind)
        .ok_or_else(|| Error::contract("no task for this dataset"))?;
    let mut cfg = base;
    fit_to_data(&mut cfg, &task, &ds)?;
    let opts = EvalOptions {
        seed: data_seed,
        ..Default::default()
    };
    let report = eval::run_ablation(&cfg, &train, &test, &seeds, &opts, a.log_every)?;
    report.write(&a.out)?;
    print!("{}", report.to_csv());
    let med = |v: eval::Variant| report.row(v).diversity().map_or("NA".into(), |d| format!("{d:.6}"));
    Ok(vec![
        ("command", "ablate".into()),
        ("div_all", med(eval::Variant::All)),
        ("div_vae_lat", med(eval::Variant::VaeLat)),
        ("div_vae", med(eval::Variant::Vae)),
        ("div_no_att", med(eval::Variant::AllNoAttention)),
        ("ordering", report.ordering_holds().to_string()),
    ])
}

fn gradcheck(a: GradcheckArgs) -> Result<Vec<(&'static str, String)>> {
    let seed = seed(&a.common)?;
    let cfg = match a.preset {
        PresetArg::Micro => ModelConfig::micro(),
        PresetArg::Desk => ModelConfig::desk(),
    };
    let tasks: Vec<TaskSpec> = match &a.task {
        Some(t) => vec![find_task(t)?],
        None => task_registry().into_iter().take(6).collect(),
    };
    let opts = GradCheckOptions {
        epsilon: a.epsilon,
        coords_per_group: a.coords,
        seed,
        ..GradCheckOptions::f64()
    };
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for t in &tasks {
        let obj = trainer::micro_objective(&cfg, t, seed)?;
        let r = trainer::check_gradients(&obj, a.precision, &opts)?;
        println!(
            "{:<14} params {:>5}  max rel {:.3e}  checked {:>4}  kinks {:>3}  worst {:?}",
            t.name,
            obj.params.num_elements(),
            r.max_rel_error,
            r.checked,
            r.skipped_kinks,
            r.worst
        );
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped_kinks;
    }
    Ok(vec![
        ("command", "gradcheck".into()),
        ("precision", a.precision.to_string()),
        ("max_rel_error", format!("{worst:.3e}")),
        ("checked", checked.to_string()),
        ("skipped_kinks", skipped.to_string()),
        ("pass", (worst < if a.precision == 64 { 1e-5 } else { 1e-3 }).to_string()),
    ])
}

fn inspect(a: InspectArgs) -> Result<Vec<(&'static str, String)>> {
    seed(&a.common)?;
    let state = trainer::load_checkpoint(&a.checkpoint)?;
    let p64 = state.params_f64();
    let bank = state
        .model
        .token_bank(&p64)
        .ok_or_else(|| Error::contract("this model has no token layer (use_attention = false)"))?;
    let tokens = bank.tokens();
    for (i, row) in tokens.outer_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("token {i:>2}  norm {norm:.4}");
    }
    let mut fields = vec![
        ("command", "inspect-tokens".to_string()),
        ("n_tokens", bank.n_tokens().to_string()),
        ("n_heads", bank.n_heads().to_string()),
    ];
    if let Some(p) = &a.reference {
        let r = read_sample(p)?;
        let (_, w) = state.model.encode_gaussian(&p64, &r)?;
        if let Some(w) = w {
            for h in 0..w.n_heads {
                let row: Vec<String> = w.row(h).iter().map(|x| format!("{x:.3}")).collect();
                println!("head {h}: {}", row.join(" "));
            }
            let top = (0..w.n_tokens)
                .max_by(|&i, &j| w.row(0)[i].total_cmp(&w.row(0)[j]))
                .unwrap_or(0);
            fields.push(("top_token_head0", top.to_string()));
        }
    }
    Ok(fields)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn help_documents_every_flag() {
        let mut root = Cli::command();
        root.build();
        for sub in root.get_subcommands() {
            let help = sub.clone().render_long_help().to_string();
            for arg in sub.get_arguments() {
                if let Some(long) = arg.get_long() {
                    assert!(help.contains(&format!("--{long}")), "{}: --{long} missing from help", sub.get_name());
                }
            }
        }
        let names: Vec<&str> = root.get_subcommands().map(|s| s.get_name()).filter(|n| *n != "help").collect();
        assert_eq!(names, ["gen-data", "train", "sample", "eval", "ablate", "gradcheck", "inspect-tokens"]);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(dispatch(["m3d", "train", "--task", "shapes", "--out", "x"]), 1);
        assert_eq!(dispatch(["m3d", "gen-data", "--kind", "shapes", "--out", "x", "--bogus"]), 1);
        assert_eq!(dispatch(["m3d", "--help"]), 0);
    }

    #[test]
    fn forbidden_reference_mode_is_rejected_before_loading() {
        let code = dispatch([
            "m3d", "sample", "--task", "text→image", "--mode", "reference", "--checkpoint", "/nonexistent", "--out", "x",
        ]);
        assert_eq!(code, 1);
    }
}
