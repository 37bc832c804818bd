//! Seeded synthetic corpora with a known one-to-many structure, their
//! closed-form style/content oracles, and on-disk persistence.
//!
//! * **Shapes**: a binary silhouette (circle, square, triangle, bar) maps to
//!   the same shape painted in one of `k` foreground/background palettes.
//! * **Captions**: "a red square" ↔ a red square; captions that omit the
//!   colour word ("a square") are paired with any style.
//! * **Sequences**: content tokens ↔ frames carrying a per-style spectral
//!   envelope plus a per-token pattern; style is independent of content.
//!
//! Style and content labels are written to a sidecar `labels.csv` for the
//! evaluation oracles; training never reads them.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::archive::{read_sample, write_atomic, write_sample};
use crate::datamodel::{DataKind, ModalityTag, PairedExample, Sample};
use crate::error::{Error, Result};

/// `(foreground, background)` RGB in `[0, 1]`.
pub const PALETTES: [([f32; 3], [f32; 3]); 8] = [
    ([1.0, 0.1, 0.1], [0.05, 0.05, 0.25]),
    ([0.1, 1.0, 0.1], [0.25, 0.05, 0.05]),
    ([0.2, 0.4, 1.0], [0.2, 0.2, 0.05]),
    ([1.0, 1.0, 0.1], [0.05, 0.2, 0.2]),
    ([1.0, 0.1, 1.0], [0.15, 0.15, 0.15]),
    ([0.1, 1.0, 1.0], [0.2, 0.05, 0.25]),
    ([1.0, 0.55, 0.05], [0.05, 0.2, 0.05]),
    ([1.0, 1.0, 1.0], [0.0, 0.0, 0.0]),
];

pub const COLOR_WORDS: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Bar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [ShapeClass::Circle, ShapeClass::Square, ShapeClass::Triangle, ShapeClass::Bar];

    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Bar => "bar",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ShapeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Colored-shapes corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeStyleSpec {
    pub resolution: usize,
    pub k_styles: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for ShapeStyleSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            k_styles: 4,
            n_examples: 1000,
            seed: 1,
        }
    }
}

/// Caption/image corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionImageSpec {
    pub resolution: usize,
    pub k_styles: usize,
    pub n_examples: usize,
    pub seed: u64,
    /// Probability that a caption leaves out its colour word.
    pub omit_color: f64,
}

impl Default for CaptionImageSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            k_styles: 4,
            n_examples: 1000,
            seed: 1,
            omit_color: 0.5,
        }
    }
}

/// Styled-frames corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceStyleSpec {
    pub frame_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub k_styles: usize,
    /// Distinct content tokens (ids `1..=n_content`).
    pub n_content: usize,
    pub n_examples: usize,
    pub seed: u64,
}

impl Default for SequenceStyleSpec {
    fn default() -> Self {
        Self {
            frame_dim: 8,
            min_len: 6,
            max_len: 10,
            k_styles: 4,
            n_content: 6,
            n_examples: 1000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DataSpec {
    Shapes(ShapeStyleSpec),
    Captions(CaptionImageSpec),
    Sequences(SequenceStyleSpec),
}

impl DataSpec {
    pub fn k_styles(&self) -> usize {
        match self {
            DataSpec::Shapes(s) => s.k_styles,
            DataSpec::Captions(s) => s.k_styles,
            DataSpec::Sequences(s) => s.k_styles,
        }
    }

    pub fn n_examples(&self) -> usize {
        match self {
            DataSpec::Shapes(s) => s.n_examples,
            DataSpec::Captions(s) => s.n_examples,
            DataSpec::Sequences(s) => s.n_examples,
        }
    }
}

/// Oracle-only ground truth for one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    /// Shape class index, or the first content token for sequences.
    pub content: usize,
    pub style: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DataKind,
    pub spec: DataSpec,
    pub examples: Vec<PairedExample>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `(first n, rest)`.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            kind: self.kind,
            spec: self.spec.clone(),
            examples: self.examples[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
        };
        (part(0..n), part(n..self.len()))
    }
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

/// Balanced style assignment: each block of `k` consecutive examples is a
/// seeded permutation of `0..k`.
fn balanced_styles(seed: u64, n: usize, k: usize) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5757_5757);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut block: Vec<usize> = (0..k).collect();
        block.shuffle(&mut r);
        out.extend(block);
    }
    out.truncate(n);
    out
}

fn check_k(k: usize, max: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::contract(format!("k_styles must be at least 2, got {k}")));
    }
    if k > max {
        return Err(Error::contract(format!("k_styles must be at most {max}, got {k}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- shapes

/// Boolean foreground mask `[res × res]` of a randomly placed shape.
pub fn draw_shape(class: ShapeClass, res: usize, rng: &mut impl Rng) -> Vec<bool> {
    let r = res as f32;
    let s = r / 32.0;
    let mut mask = vec![false; res * res];
    let mut fill = |inside: &dyn Fn(f32, f32) -> bool| {
        for y in 0..res {
            for x in 0..res {
                mask[y * res + x] = inside(x as f32 + 0.5, y as f32 + 0.5);
            }
        }
    };
    match class {
        ShapeClass::Circle => {
            let rad = rng.random_range(6.0..10.0) * s;
            let cx = rng.random_range(rad + 1.0..r - rad - 1.0);
            let cy = rng.random_range(rad + 1.0..r - rad - 1.0);
            fill(&|x, y| (x - cx).powi(2) + (y - cy).powi(2) <= rad * rad);
        }
        ShapeClass::Square => {
            let side = rng.random_range(10.0..18.0) * s;
            let x0 = rng.random_range(1.0..r - side - 1.0).floor();
            let y0 = rng.random_range(1.0..r - side - 1.0).floor();
            let side = side.round();
            fill(&|x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side);
        }
        ShapeClass::Triangle => {
            let base = rng.random_range(14.0..22.0) * s;
            let h = base * rng.random_range(0.8..1.2);
            let x0 = rng.random_range(1.0..r - base - 1.0);
            let y0 = rng.random_range(1.0..r - h - 1.0);
            // Apex at the top centre.
            fill(&|x, y| {
                let t = (y - y0) / h;
                (0.0..=1.0).contains(&t) && (x - (x0 + base / 2.0)).abs() <= t * base / 2.0
            });
        }
        ShapeClass::Bar => {
            let long = rng.random_range(18.0..26.0) * s;
            let short = rng.random_range(4.0..7.0) * s;
            let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            let (w, h) = (w.round(), h.round());
            let x0 = rng.random_range(1.0..r - w - 1.0).floor();
            let y0 = rng.random_range(1.0..r - h - 1.0).floor();
            fill(&|x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
        }
    }
    mask
}

pub fn silhouette(mask: &[bool], res: usize) -> Result<Sample> {
    Sample::image(1, res, res, mask.iter().map(|&m| if m { 1.0 } else { -1.0 }).collect())
}

/// Paints a mask with palette `style`, values in `[-1, 1]`.
pub fn paint(mask: &[bool], res: usize, style: usize) -> Result<Sample> {
    let (fg, bg) = PALETTES[style];
    let mut data = vec![0.0f32; 3 * res * res];
    for c in 0..3 {
        for (i, &m) in mask.iter().enumerate() {
            let v = if m { fg[c] } else { bg[c] };
            data[c * res * res + i] = 2.0 * v - 1.0;
        }
    }
    Sample::image(3, res, res, data)
}

fn shape_examples(res: usize, n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<bool>, ShapeClass, usize)>> {
    if res < 16 {
        return Err(Error::contract(format!("resolution must be at least 16, got {res}")));
    }
    let styles = balanced_styles(seed, n, k);
    (0..n)
        .map(|i| {
            let mut rng = example_rng(seed, i);
            let class = ShapeClass::ALL[rng.random_range(0..4)];
            Ok((draw_shape(class, res, &mut rng), class, styles[i]))
        })
        .collect()
}

pub fn gen_colored_shapes(spec: &ShapeStyleSpec) -> Result<Dataset> {
    check_k(spec.k_styles, PALETTES.len())?;
    let mut examples = Vec::with_capacity(spec.n_examples);
    let mut labels = Vec::with_capacity(spec.n_examples);
    for (mask, class, style) in shape_examples(spec.resolution, spec.n_examples, spec.k_styles, spec.seed)? {
        let src = silhouette(&mask, spec.resolution)?;
        let tgt = paint(&mask, spec.resolution, style)?;
        examples.push(PairedExample::training(src, tgt));
        labels.push(Label {
            content: class.index(),
            style,
        });
    }
    Ok(Dataset {
        kind: DataKind::Shapes,
        spec: DataSpec::Shapes(spec.clone()),
        examples,
        labels,
    })
}

// ---------------------------------------------------------------- captions

/// Word list of the caption language: `<pad>`, "a", colours, shapes.
/// A second copy of the language (for translation) starts at
/// [`Vocab::SECOND_OFFSET`].
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const SECOND_OFFSET: u32 = 14;

    pub fn captions() -> Self {
        Self::build(
            std::iter::once("<pad>")
                .chain(["a"])
                .chain(COLOR_WORDS)
                .chain(ShapeClass::ALL.map(ShapeClass::word)),
        )
        .expect("built-in words are distinct")
    }

    /// Errors on duplicates or words containing whitespace.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut v: Vec<String> = Vec::new();
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::contract(format!("invalid vocabulary word {w:?}")));
            }
            if v.iter().any(|x| x == w) {
                return Err(Error::contract(format!("duplicate vocabulary word {w:?}")));
            }
            v.push(w.to_string());
        }
        Ok(Self { words: v })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::contract(format!("unknown word {word:?}")))
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get((id % Self::SECOND_OFFSET) as usize).map(String::as_str)
    }

    /// Whitespace-separated words to ids, padded to `len` with `<pad>`.
    pub fn encode(&self, text: &str, len: usize) -> Result<Vec<u32>> {
        let mut ids = text.split_whitespace().map(|w| self.id(w)).collect::<Result<Vec<_>>>()?;
        if ids.len() > len {
            return Err(Error::contract(format!("caption {text:?} longer than {len} words")));
        }
        ids.resize(len, Self::PAD);
        Ok(ids)
    }

    /// Inverse of [`Vocab::encode`] (either copy of the language); padding
    /// is dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i % Self::SECOND_OFFSET != Self::PAD)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub const CAPTION_LEN: usize = 3;

fn caption_text(class: ShapeClass, style: Option<usize>) -> String {
    match style {
        Some(s) => format!("a {} {}", COLOR_WORDS[s], class.word()),
        None => format!("a {}", class.word()),
    }
}

/// Parses a (possibly generated) caption back into `(shape, colour)`.
pub fn parse_caption(ids: &[u32]) -> (Option<ShapeClass>, Option<usize>) {
    let vocab = Vocab::captions();
    let mut shape = None;
    let mut color = None;
    for &id in ids {
        let Some(w) = vocab.word(id) else { continue };
        if let Some(c) = COLOR_WORDS.iter().position(|&x| x == w) {
            color = color.or(Some(c));
        } else if let Some(s) = ShapeClass::ALL.iter().find(|s| s.word() == w) {
            shape = shape.or(Some(*s));
        }
    }
    (shape, color)
}

/// Captions paired with painted shapes, oriented per `kind`
/// (`Captions`, `CaptionsReversed` or `CaptionsTranslated`).
pub fn gen_toy_captions(spec: &CaptionImageSpec, kind: DataKind) -> Result<Dataset> {
    check_k(spec.k_styles, PALETTES.len())?;
    if !(0.0..=1.0).contains(&spec.omit_color) {
        return Err(Error::contract("omit_color must lie in [0, 1]"));
    }
    let vocab = Vocab::captions();
    let mut examples = Vec::with_capacity(spec.n_examples);
    let mut labels = Vec::with_capacity(spec.n_examples);
    for (i, (mask, class, style)) in shape_examples(spec.resolution, spec.n_examples, spec.k_styles, spec.seed)?
        .into_iter()
        .enumerate()
    {
        let mut rng = example_rng(spec.seed ^ 0xc0ffee, i);
        let omit = rng.random_bool(spec.omit_color);
        let caption = vocab.encode(&caption_text(class, (!omit).then_some(style)), CAPTION_LEN)?;
        let full = vocab.encode(&caption_text(class, Some(style)), CAPTION_LEN)?;
        let text = Sample::text(caption)?;
        let pair = match kind {
            DataKind::Captions => PairedExample::training(text, paint(&mask, spec.resolution, style)?),
            DataKind::CaptionsReversed => PairedExample::training(paint(&mask, spec.resolution, style)?, text),
            DataKind::CaptionsTranslated => {
                let second = full.iter().map(|&id| if id == Vocab::PAD { id } else { id + Vocab::SECOND_OFFSET });
                PairedExample::training(text, Sample::text(second.collect())?)
            }
            other => return Err(Error::contract(format!("{other:?} is not a caption corpus"))),
        };
        examples.push(pair);
        labels.push(Label {
            content: class.index(),
            style,
        });
    }
    Ok(Dataset {
        kind,
        spec: DataSpec::Captions(spec.clone()),
        examples,
        labels,
    })
}

// ---------------------------------------------------------------- sequences

/// Sylvester–Hadamard matrix of order `n` (a power of two).
fn hadamard(n: usize) -> Vec<Vec<f32>> {
    let mut h = vec![vec![1.0f32]];
    while h.len() < n {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// Per-style spectral envelopes: scaled, mutually orthogonal sign patterns.
pub fn style_envelopes(frame_dim: usize, k: usize) -> Result<Vec<Vec<f32>>> {
    let n = frame_dim.next_power_of_two();
    if k > n {
        return Err(Error::contract(format!("at most {n} styles fit frame_dim {frame_dim}")));
    }
    let h = hadamard(n);
    Ok((0..k).map(|s| h[s][..frame_dim].iter().map(|v| 0.7 * v).collect()).collect())
}

/// Additive frame pattern of content token `c` (1-based).
pub fn content_pattern(frame_dim: usize, c: usize) -> Vec<f32> {
    (0..frame_dim)
        .map(|f| 0.25 * (std::f32::consts::PI * (c * (2 * f + 1)) as f32 / frame_dim as f32).cos())
        .collect()
}

/// Content tokens paired with styled frames, oriented per `kind`
/// (`Sequences` or `SequencesReversed`).
pub fn gen_sequence_styles(spec: &SequenceStyleSpec, kind: DataKind) -> Result<Dataset> {
    if spec.frame_dim < 2 || !spec.frame_dim.is_power_of_two() {
        return Err(Error::contract("frame_dim must be a power of two ≥ 2"));
    }
    check_k(spec.k_styles, spec.frame_dim)?;
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::contract("need 0 < min_len ≤ max_len"));
    }
    if spec.n_content == 0 {
        return Err(Error::contract("n_content must be positive"));
    }
    let env = style_envelopes(spec.frame_dim, spec.k_styles)?;
    let styles = balanced_styles(spec.seed, spec.n_examples, spec.k_styles);
    let mut examples = Vec::with_capacity(spec.n_examples);
    let mut labels = Vec::with_capacity(spec.n_examples);
    for (i, &style) in styles.iter().enumerate() {
        let mut rng = example_rng(spec.seed, i);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(1..=spec.n_content as u32)).collect();
        let frames = styled_frames(&tokens, &env[style], spec.frame_dim);
        let text = Sample::text(tokens.clone())?;
        let seq = Sample::sequence(len, spec.frame_dim, frames)?;
        let pair = match kind {
            DataKind::Sequences => PairedExample::training(text, seq),
            DataKind::SequencesReversed => PairedExample::training(seq, text),
            other => return Err(Error::contract(format!("{other:?} is not a sequence corpus"))),
        };
        examples.push(pair);
        labels.push(Label {
            content: tokens[0] as usize,
            style,
        });
    }
    Ok(Dataset {
        kind,
        spec: DataSpec::Sequences(spec.clone()),
        examples,
        labels,
    })
}

/// Frames for a token sequence in a given envelope.
pub fn styled_frames(tokens: &[u32], envelope: &[f32], frame_dim: usize) -> Vec<f32> {
    tokens
        .iter()
        .flat_map(|&c| {
            let p = content_pattern(frame_dim, c as usize);
            (0..frame_dim).map(move |f| envelope[f] + p[f])
        })
        .collect()
}

/// Generates the corpus a task kind trains on.
pub fn generate(spec: &DataSpec, kind: DataKind) -> Result<Dataset> {
    match (spec, kind) {
        (DataSpec::Shapes(s), DataKind::Shapes) => gen_colored_shapes(s),
        (DataSpec::Captions(s), k) => gen_toy_captions(s, k),
        (DataSpec::Sequences(s), k) => gen_sequence_styles(s, k),
        (s, k) => Err(Error::contract(format!("spec {s:?} cannot produce {k:?} data"))),
    }
}

// ---------------------------------------------------------------- oracles

/// Foreground mask of a clean painted image (max channel above 0.6 in
/// `[0, 1]` units).
pub fn painted_mask(img: &Sample) -> Option<Vec<bool>> {
    let v = img.values()?;
    let sh = img.shape();
    if img.modality() != ModalityTag::Image || sh[0] != 3 {
        return None;
    }
    let n = sh[1] * sh[2];
    Some(
        (0..n)
            .map(|i| (0..3).map(|c| (v[c * n + i] + 1.0) / 2.0).fold(f32::MIN, f32::max) > 0.6)
            .collect(),
    )
}

/// Mask of a silhouette source (`> 0`).
pub fn silhouette_mask(src: &Sample) -> Option<Vec<bool>> {
    (src.modality() == ModalityTag::Image && src.shape()[0] == 1)
        .then(|| src.values().expect("real").iter().map(|&v| v > 0.0).collect())
}

/// Largest RMS colour distance (in `[0, 1]` units) at which the style
/// oracle still accepts a match.
pub const STYLE_REJECT: f32 = 0.3;

/// Nearest palette (among the first `k`) to the mean foreground and
/// background colours under `mask`; `None` when nothing is close enough or
/// either region is empty.
pub fn image_style(img: &Sample, mask: &[bool], k: usize) -> Option<usize> {
    let v = img.values()?;
    let sh = img.shape();
    if img.modality() != ModalityTag::Image || sh[0] != 3 || mask.len() != sh[1] * sh[2] {
        return None;
    }
    let n = mask.len();
    let nf = mask.iter().filter(|&&m| m).count();
    if nf == 0 || nf == n {
        return None;
    }
    let mut fg = [0.0f32; 3];
    let mut bg = [0.0f32; 3];
    for c in 0..3 {
        for (i, &m) in mask.iter().enumerate() {
            let x = (v[c * n + i] + 1.0) / 2.0;
            if m {
                fg[c] += x;
            } else {
                bg[c] += x;
            }
        }
        fg[c] /= nf as f32;
        bg[c] /= (n - nf) as f32;
    }
    let (best, d) = PALETTES[..k]
        .iter()
        .enumerate()
        .map(|(s, (pf, pb))| {
            let d2: f32 = (0..3).map(|c| (fg[c] - pf[c]).powi(2) + (bg[c] - pb[c]).powi(2)).sum();
            (s, (d2 / 6.0).sqrt())
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    (d <= STYLE_REJECT).then_some(best)
}

/// Bounding-box fill/aspect rules; `None` for anything that is not a clean
/// instance of one class.
pub fn shape_class(mask: &[bool], res: usize) -> Option<ShapeClass> {
    let (mut x0, mut x1, mut y0, mut y1, mut count) = (usize::MAX, 0, usize::MAX, 0, 0usize);
    for y in 0..res {
        for x in 0..res {
            if mask[y * res + x] {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                count += 1;
            }
        }
    }
    if count < 8 {
        return None;
    }
    let (w, h) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
    let fill = count as f32 / (w * h);
    let aspect = w.max(h) / w.min(h);
    if aspect >= 2.0 {
        return (fill > 0.85).then_some(ShapeClass::Bar);
    }
    if aspect >= 1.5 {
        return None;
    }
    match fill {
        f if f > 0.9 => Some(ShapeClass::Square),
        f if f > 0.65 => Some(ShapeClass::Circle),
        f if f > 0.35 => Some(ShapeClass::Triangle),
        _ => None,
    }
}

/// Shape class of a generated image, read through [`painted_mask`].
pub fn image_content(img: &Sample) -> Option<ShapeClass> {
    let mask = painted_mask(img)?;
    shape_class(&mask, img.shape()[1])
}

/// Envelope whose projection on the time-averaged frame is largest;
/// `None` if that projection is under half the envelope amplitude.
pub fn sequence_style(seq: &Sample, k: usize) -> Option<usize> {
    let v = seq.values()?;
    let sh = seq.shape();
    if seq.modality() != ModalityTag::Sequence || sh[0] == 0 {
        return None;
    }
    let (t, f) = (sh[0], sh[1]);
    let env = style_envelopes(f, k).ok()?;
    let mean: Vec<f32> = (0..f).map(|j| (0..t).map(|i| v[i * f + j]).sum::<f32>() / t as f32).collect();
    let (best, score) = env
        .iter()
        .enumerate()
        .map(|(s, e)| (s, e.iter().zip(&mean).map(|(a, b)| a * b).sum::<f32>() / (0.7 * f as f32)))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    (score >= 0.35).then_some(best)
}

/// Style of any target sample under the dataset's oracle. Images use
/// `mask` when given (the source silhouette), else their own painted mask.
pub fn target_style(spec: &DataSpec, target: &Sample, mask: Option<&[bool]>) -> Option<usize> {
    let k = spec.k_styles();
    match target.modality() {
        ModalityTag::Image => {
            let own;
            let m = match mask {
                Some(m) => m,
                None => {
                    own = painted_mask(target)?;
                    &own
                }
            };
            image_style(target, m, k)
        }
        ModalityTag::Sequence => sequence_style(target, k),
        ModalityTag::Text => parse_caption(target.ids()?).1.filter(|&c| c < k),
    }
}

/// Optional eyeballing aid: writes an image sample as binary PPM.
pub fn write_ppm(img: &Sample, path: &Path) -> Result<()> {
    let v = img.values().ok_or_else(|| Error::contract("not an image"))?;
    let sh = img.shape();
    if img.modality() != ModalityTag::Image {
        return Err(Error::contract("not an image"));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            let x = v[ch.min(c - 1) * h * w + i];
            bytes.push((((x + 1.0) / 2.0).clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- persistence

pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: DataKind,
    count: usize,
    spec: DataSpec,
}

fn io_err(ctx: String) -> impl FnOnce(std::io::Error) -> Error {
    move |e| Error::io(ctx, e)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(io_err(format!("create {}", samples.display())))?;
    for (i, ex) in ds.examples.iter().enumerate() {
        write_sample(&samples.join(format!("{i:06}.src.m3dt")), &ex.source)?;
        write_sample(&samples.join(format!("{i:06}.tgt.m3dt")), &ex.target)?;
    }
    let mut csv = String::from("index,content,style\n");
    for (i, l) in ds.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{},{}\n", l.content, l.style));
    }
    write_atomic(&dir.join("labels.csv"), csv.as_bytes())?;
    let manifest = Manifest {
        format: "m3d-dataset".into(),
        version: DATASET_VERSION,
        kind: ds.kind,
        count: ds.len(),
        spec: ds.spec.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::contract(e.to_string()))?;
    write_atomic(&dir.join("manifest.txt"), text.as_bytes())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(io_err(format!("read {}", mpath.display())))?;
    let probe: toml::Table = toml::from_str(&text).map_err(|e| Error::CorruptArchive {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let version = probe.get("version").and_then(|v| v.as_integer()).unwrap_or(-1);
    if version != DATASET_VERSION as i64 {
        return Err(Error::Version {
            found: version.max(0) as u32,
            expected: DATASET_VERSION,
        });
    }
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::CorruptArchive {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let samples = dir.join("samples");
    let on_disk = fs::read_dir(&samples)
        .map_err(io_err(format!("read {}", samples.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".m3dt"))
        .count();
    if on_disk != 2 * m.count {
        return Err(Error::Dataset(format!(
            "manifest lists {} examples but {} contains {on_disk} sample files",
            m.count,
            samples.display()
        )));
    }
    let mut examples = Vec::with_capacity(m.count);
    for i in 0..m.count {
        let src = read_sample(&samples.join(format!("{i:06}.src.m3dt")))?;
        let tgt = read_sample(&samples.join(format!("{i:06}.tgt.m3dt")))?;
        examples.push(PairedExample::training(src, tgt));
    }
    let lpath = dir.join("labels.csv");
    let ltext = fs::read_to_string(&lpath).map_err(io_err(format!("read {}", lpath.display())))?;
    let mut labels = Vec::with_capacity(m.count);
    for (n, line) in ltext.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<usize>().ok();
        match (f.len(), f.first().and_then(|s| parse(s)), f.get(1).and_then(|s| parse(s)), f.get(2).and_then(|s| parse(s))) {
            (3, Some(i), Some(content), Some(style)) if i == n => labels.push(Label { content, style }),
            _ => {
                return Err(Error::CorruptArchive {
                    path: lpath,
                    reason: format!("bad row {}: {line:?}", n + 1),
                })
            }
        }
    }
    if labels.len() != m.count {
        return Err(Error::Dataset(format!(
            "manifest lists {} examples but labels.csv has {} rows",
            m.count,
            labels.len()
        )));
    }
    Ok(Dataset {
        kind: m.kind,
        spec: m.spec,
        examples,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_is_recognised_on_clean_draws() {
        for class in ShapeClass::ALL {
            for seed in 0..200 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = draw_shape(class, 32, &mut rng);
                assert_eq!(shape_class(&m, 32), Some(class), "{class} seed {seed}");
            }
        }
    }

    #[test]
    fn palettes_are_recognised() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = draw_shape(ShapeClass::Circle, 32, &mut rng);
        for s in 0..8 {
            let img = paint(&m, 32, s).unwrap();
            assert_eq!(image_style(&img, &m, 8), Some(s));
            assert_eq!(painted_mask(&img).unwrap(), m);
        }
    }

    #[test]
    fn hadamard_rows_orthogonal() {
        let h = hadamard(8);
        for i in 0..8 {
            for j in 0..8 {
                let d: f32 = h[i].iter().zip(&h[j]).map(|(a, b)| a * b).sum();
                assert_eq!(d, if i == j { 8.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn caption_round_trip() {
        let v = Vocab::captions();
        assert_eq!(v.len(), 14);
        let ids = v.encode("a red square", 3).unwrap();
        assert_eq!(v.decode(&ids), "a red square");
        assert_eq!(parse_caption(&ids), (Some(ShapeClass::Square), Some(0)));
        let second: Vec<u32> = ids.iter().map(|i| i + Vocab::SECOND_OFFSET).collect();
        assert_eq!(parse_caption(&second), (Some(ShapeClass::Square), Some(0)));
        assert!(v.encode("a purple square", 3).is_err());
        assert!(Vocab::build(["a", "b", "a"]).is_err());
    }
}
