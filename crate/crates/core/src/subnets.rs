//! Modality subnets: prenets that map raw samples to a unified
//! representation, modality-specific generators, and the conditional
//! discriminator.
//!
//! Tensor layouts inside the graph: images `[B, C, H, W]`, sequences
//! `[B, T, F]`, text `[B, L, V]` as one-hot rows (or soft distributions for
//! generated text).

use m3d_autograd::{Conv2dSpec, ConvTranspose2dSpec, Graph, ParamId, ParamStore, Real, Var};

use crate::datamodel::{ModalityTag, ModelConfig, ZInjection};
use crate::error::{Error, Result};
use crate::nn::{broadcast_spatial, broadcast_time, instance_norm, stack_time, Builder, Conv, ConvT, Dense, Gru};

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
const LEAK: f64 = 0.2;

/// Prenet output in value form.
#[derive(Debug, Clone, PartialEq)]
pub enum UnifiedRepr {
    /// `[T, F]` feature frames.
    Frames {
        origin: ModalityTag,
        t: usize,
        f: usize,
        data: Vec<f64>,
    },
    /// `[C, H, W]` feature map.
    Spatial {
        origin: ModalityTag,
        c: usize,
        h: usize,
        w: usize,
        data: Vec<f64>,
    },
}

impl UnifiedRepr {
    pub fn data(&self) -> &[f64] {
        match self {
            UnifiedRepr::Frames { data, .. } | UnifiedRepr::Spatial { data, .. } => data,
        }
    }
}

/// Conditional discriminator output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorScore {
    pub logit: f64,
}

impl DiscriminatorScore {
    pub fn prob(&self) -> f64 {
        1.0 / (1.0 + (-self.logit).exp())
    }
}

/// `[B, L, D]` to the conv-friendly `[B, D, 1, L]`.
fn to_conv1d<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1])?;
    Ok(g.reshape(t, &[sh[0], sh[2], 1, sh[1]])?)
}

/// `[B, D, 1, L]` back to `[B, L, D]`.
fn from_conv1d<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    let t = g.reshape(x, &[sh[0], sh[1], sh[3]])?;
    Ok(g.permute(t, &[0, 2, 1])?)
}

/// Width-`k` convolution along time with "same" padding.
fn conv1d(bld: &mut Builder, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
    let spec = Conv2dSpec::new((1, 1), (0, 0, (k - 1) / 2, k / 2));
    Conv::new(bld, name, cin, cout, (1, k), spec, gain)
}

/// Character embedding, fully-connected layers and a CBHG-style block
/// (conv1d bank, max-pool, projections, residual, dense layers, BiGRU).
#[derive(Debug, Clone)]
pub struct TextPrenet {
    pub emb: ParamId,
    pub fcs: Vec<Dense>,
    pub bank: Vec<Conv>,
    pub proj1: Conv,
    pub proj2: Conv,
    pub dense: Vec<Dense>,
    pub fwd: Gru,
    pub bwd: Gru,
    pub vocab: usize,
}

impl TextPrenet {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig) -> Self {
        let e = cfg.char_embed_dim;
        let emb = bld.normal(&format!("{name}.emb"), &[cfg.vocab_size, e], 1.0);
        let mut fcs = Vec::new();
        let mut d = e;
        for (i, &u) in cfg.text_fc_units.iter().enumerate() {
            fcs.push(Dense::new(bld, &format!("{name}.fc{i}"), d, u, RELU_GAIN));
            d = u;
        }
        let u = cfg.cbhg_units;
        let k = cfg.conv1d_bank_size;
        let bank = (1..=k)
            .map(|w| conv1d(bld, &format!("{name}.bank{w}"), d, u, w, RELU_GAIN))
            .collect();
        let proj1 = conv1d(bld, &format!("{name}.proj1"), k * u, u, 3, RELU_GAIN);
        let proj2 = conv1d(bld, &format!("{name}.proj2"), u, d, 3, 1.0);
        let mut dense = Vec::new();
        let mut din = d;
        for i in 0..cfg.cbhg_fc_layers {
            dense.push(Dense::new(bld, &format!("{name}.dense{i}"), din, u, RELU_GAIN));
            din = u;
        }
        let fwd = Gru::new(bld, &format!("{name}.gru_fwd"), din, u);
        let bwd = Gru::new(bld, &format!("{name}.gru_bwd"), din, u);
        Self {
            emb,
            fcs,
            bank,
            proj1,
            proj2,
            dense,
            fwd,
            bwd,
            vocab: cfg.vocab_size,
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.units
    }

    /// `[B, L, V]` to `[B, L, 2U]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != self.vocab || sh[1] == 0 {
            return Err(Error::shape(format!(
                "text input must be [B, L>0, {}], got {sh:?}",
                self.vocab
            )));
        }
        let (b, l) = (sh[0], sh[1]);
        let flat = g.reshape(x, &[b * l, self.vocab])?;
        let emb = g.param(s, self.emb);
        let mut h = g.matmul(flat, emb)?;
        for fc in &self.fcs {
            h = fc.forward(g, s, h)?;
            h = g.relu(h);
        }
        let d = g.shape(h)[1];
        let h = g.reshape(h, &[b, l, d])?;
        let c = to_conv1d(g, h)?;
        let mut outs = Vec::with_capacity(self.bank.len());
        for conv in &self.bank {
            let y = conv.forward(g, s, c)?;
            outs.push(g.relu(y));
        }
        let y = g.concat(&outs, 1)?;
        let y = g.max_pool_last(y, 2)?;
        let y = self.proj1.forward(g, s, y)?;
        let y = g.relu(y);
        let y = self.proj2.forward(g, s, y)?;
        let y = from_conv1d(g, y)?;
        let mut y = g.add(y, h)?;
        for layer in &self.dense {
            y = layer.forward(g, s, y)?;
            y = g.relu(y);
        }
        let f = self.fwd.run(g, s, y, None, false)?;
        let r = self.bwd.run(g, s, y, None, true)?;
        let both: Vec<Var> = f
            .iter()
            .zip(&r)
            .map(|(&a, &bk)| g.concat(&[a, bk], 1))
            .collect::<std::result::Result<_, _>>()?;
        stack_time(g, &both)
    }

    /// Mean of the hidden frames over time: `[B, 2U]`.
    pub fn global<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.forward(g, s, x)?;
        Ok(g.mean_axis(h, 1, false)?)
    }
}

/// Two-layer conv prenet for images (spatial size preserved).
#[derive(Debug, Clone)]
pub struct ImagePrenet {
    pub convs: Vec<Conv>,
    pub channels: usize,
}

impl ImagePrenet {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, cin: usize) -> Self {
        let mut c = cin;
        let mut convs = Vec::new();
        for (i, &co) in cfg.prenet_conv_channels.iter().enumerate() {
            convs.push(Conv::square(bld, &format!("{name}.conv{i}"), c, co, 3, 1, RELU_GAIN));
            c = co;
        }
        Self { convs, channels: c }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut x = x;
        for c in &self.convs {
            x = c.forward(g, s, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Two-layer conv prenet over `[T, F]` spectra: stride 1 along time so the
/// frame count is preserved, `prenet_freq_stride` along features.
#[derive(Debug, Clone)]
pub struct SeqPrenet {
    pub convs: Vec<Conv>,
    pub out_dim: usize,
}

impl SeqPrenet {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig) -> Self {
        let (mut c, mut f) = (1, cfg.frame_dim);
        let mut convs = Vec::new();
        let spec = Conv2dSpec::new((1, cfg.prenet_freq_stride), (1, 1, 1, 1));
        for (i, &co) in cfg.prenet_conv_channels.iter().enumerate() {
            convs.push(Conv::new(bld, &format!("{name}.conv{i}"), c, co, (3, 3), spec, RELU_GAIN));
            c = co;
            f = (f - 1) / cfg.prenet_freq_stride + 1;
        }
        Self {
            convs,
            out_dim: c * f,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 3 || sh[1] == 0 {
            return Err(Error::shape(format!("sequence input must be [B, T>0, F], got {sh:?}")));
        }
        let mut y = g.reshape(x, &[sh[0], 1, sh[1], sh[2]])?;
        for c in &self.convs {
            y = c.forward(g, s, y)?;
            y = g.relu(y);
        }
        let ys = g.shape(y).to_vec();
        let y = g.permute(y, &[0, 2, 1, 3])?;
        Ok(g.reshape(y, &[ys[0], ys[2], ys[1] * ys[3]])?)
    }
}

#[derive(Debug, Clone)]
pub enum Prenet {
    Image(ImagePrenet),
    Sequence(SeqPrenet),
    Text(TextPrenet),
}

impl Prenet {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, source: ModalityTag) -> Self {
        match source {
            ModalityTag::Image => Prenet::Image(ImagePrenet::new(bld, name, cfg, cfg.source_image_channels)),
            ModalityTag::Sequence => Prenet::Sequence(SeqPrenet::new(bld, name, cfg)),
            ModalityTag::Text => Prenet::Text(TextPrenet::new(bld, name, cfg)),
        }
    }

    /// Channels (spatial output) or frame width (sequential output).
    pub fn out_dim(&self) -> usize {
        match self {
            Prenet::Image(p) => p.channels,
            Prenet::Sequence(p) => p.out_dim,
            Prenet::Text(p) => p.out_dim(),
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, Prenet::Image(_))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Prenet::Image(p) => p.forward(g, s, x),
            Prenet::Sequence(p) => p.forward(g, s, x),
            Prenet::Text(p) => p.forward(g, s, x),
        }
    }
}

/// Adapts a prenet output to a generator of the other layout.
#[derive(Debug, Clone)]
pub enum Bridge {
    /// Time-averaged frames, a dense layer to a quarter-resolution map and
    /// two stride-2 transposed convolutions.
    FramesToSpatial {
        dense: Dense,
        up: [ConvT; 2],
        channels: usize,
        size: usize,
    },
    /// Image rows become time steps: `[B, C, H, W]` to `[B, H, C * W]`.
    SpatialToFrames,
}

impl Bridge {
    pub fn frames_to_spatial(bld: &mut Builder, name: &str, cfg: &ModelConfig, fin: usize) -> Self {
        let c = *cfg.prenet_conv_channels.last().expect("validated non-empty");
        let q = cfg.image_size / 4;
        let spec = ConvTranspose2dSpec::new(2, 1);
        Bridge::FramesToSpatial {
            dense: Dense::new(bld, &format!("{name}.dense"), fin, c * q * q, RELU_GAIN),
            up: [
                ConvT::new(bld, &format!("{name}.up0"), c, c, 4, spec, RELU_GAIN),
                ConvT::new(bld, &format!("{name}.up1"), c, c, 4, spec, RELU_GAIN),
            ],
            channels: c,
            size: cfg.image_size,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Bridge::FramesToSpatial {
                dense,
                up,
                channels,
                size,
            } => {
                let b = g.shape(x)[0];
                let m = g.mean_axis(x, 1, false)?;
                let h = dense.forward(g, s, m)?;
                let h = g.relu(h);
                let mut h = g.reshape(h, &[b, *channels, size / 4, size / 4])?;
                for u in up {
                    h = u.forward(g, s, h)?;
                    h = g.relu(h);
                }
                Ok(h)
            }
            Bridge::SpatialToFrames => {
                let sh = g.shape(x).to_vec();
                let t = g.permute(x, &[0, 2, 1, 3])?;
                Ok(g.reshape(t, &[sh[0], sh[2], sh[1] * sh[3]])?)
            }
        }
    }
}

/// Residual block: two convolutions (optionally instance-normalised) plus a
/// projected or identity skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub c1: Conv,
    pub c2: Conv,
    pub skip: Option<Conv>,
    pub norm: bool,
}

impl ResBlock {
    fn new(bld: &mut Builder, name: &str, cin: usize, cout: usize, stride: usize, norm: bool) -> Self {
        let skip = (cin != cout || stride != 1)
            .then(|| Conv::new(bld, &format!("{name}.skip"), cin, cout, (1, 1), Conv2dSpec::square(stride, 0), 1.0));
        Self {
            c1: Conv::square(bld, &format!("{name}.c1"), cin, cout, 3, stride, RELU_GAIN),
            c2: Conv::square(bld, &format!("{name}.c2"), cout, cout, 3, 1, 1.0),
            skip,
            norm,
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = self.c1.forward(g, s, x)?;
        if self.norm {
            y = instance_norm(g, y)?;
        }
        y = g.relu(y);
        y = self.c2.forward(g, s, y)?;
        if self.norm {
            y = instance_norm(g, y)?;
        }
        let sk = match &self.skip {
            Some(c) => c.forward(g, s, x)?,
            None => x,
        };
        let y = g.add(y, sk)?;
        Ok(g.relu(y))
    }
}

/// Decoder-side residual block; upsampling blocks use stride-2 transposed
/// convolutions. Never normalised (see [`ImageGenerator`]).
#[derive(Debug, Clone)]
pub enum UpBlock {
    Same(ResBlock),
    Up { c1: ConvT, c2: Conv, skip: ConvT },
}

impl UpBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            UpBlock::Same(r) => r.forward(g, s, x),
            UpBlock::Up { c1, c2, skip } => {
                let y = c1.forward(g, s, x)?;
                let y = g.relu(y);
                let y = c2.forward(g, s, y)?;
                let sk = skip.forward(g, s, x)?;
                let y = g.add(y, sk)?;
                Ok(g.relu(y))
            }
        }
    }
}

/// Residual encoder/decoder. The latent code is spatially broadcast and
/// concatenated at the bottleneck (or at the input). Instance norm, when
/// enabled, is applied on the compressing half only: normalising after the
/// code enters would subtract exactly the spatially constant signal the
/// code contributes.
#[derive(Debug, Clone)]
pub struct ImageGenerator {
    pub stem: Conv,
    pub down: Vec<ResBlock>,
    pub up: Vec<UpBlock>,
    pub out: ConvT,
    pub injection: ZInjection,
    pub code_dim: usize,
    pub in_channels: usize,
}

impl ImageGenerator {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, cin: usize, code_dim: usize) -> Self {
        let base = cfg.image_base_channels;
        let stem_in = cin + if cfg.z_injection == ZInjection::Input { code_dim } else { 0 };
        let stem = Conv::square(bld, &format!("{name}.stem"), stem_in, base, 3, 1, RELU_GAIN);
        let mut c = base;
        let mut down = Vec::new();
        for i in 0..cfg.image_resblocks_down {
            let (co, st) = if i < cfg.image_downsamples { (c * 2, 2) } else { (c, 1) };
            down.push(ResBlock::new(bld, &format!("{name}.down{i}"), c, co, st, cfg.instance_norm));
            c = co;
        }
        let mut up = Vec::new();
        let n_up = cfg.image_resblocks_up;
        for j in 0..n_up {
            let extra = if j == 0 && cfg.z_injection == ZInjection::Bottleneck { code_dim } else { 0 };
            let cin = c + extra;
            let nm = format!("{name}.up{j}");
            if j >= n_up - cfg.image_downsamples {
                let co = (c / 2).max(1);
                let s2 = ConvTranspose2dSpec::new(2, 1);
                up.push(UpBlock::Up {
                    c1: ConvT::new(bld, &format!("{nm}.c1"), cin, co, 4, s2, RELU_GAIN),
                    c2: Conv::square(bld, &format!("{nm}.c2"), co, co, 3, 1, 1.0),
                    skip: ConvT::new(bld, &format!("{nm}.skip"), cin, co, 2, ConvTranspose2dSpec::new(2, 0), 1.0),
                });
                c = co;
            } else {
                let mut r = ResBlock::new(bld, &nm, cin, c, 1, false);
                r.norm = false;
                up.push(UpBlock::Same(r));
            }
        }
        let out = ConvT::new(bld, &format!("{name}.out"), c, 3, 3, ConvTranspose2dSpec::new(1, 1), 1.0);
        Self {
            stem,
            down,
            up,
            out,
            injection: cfg.z_injection,
            code_dim,
            in_channels: cin,
        }
    }

    /// `x: [B, C, H, W]`, `code: [B, Z]` to an image `[B, 3, H, W]` in
    /// `[-1, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, code: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 4 || sh[1] != self.in_channels {
            return Err(Error::shape(format!(
                "image generator expects [B, {}, H, W], got {sh:?}",
                self.in_channels
            )));
        }
        if g.shape(code) != [sh[0], self.code_dim] {
            return Err(Error::shape(format!(
                "latent code of shape {:?}, expected [{}, {}]",
                g.shape(code),
                sh[0],
                self.code_dim
            )));
        }
        let mut h = x;
        if self.injection == ZInjection::Input {
            let zb = broadcast_spatial(g, code, sh[2], sh[3])?;
            h = g.concat(&[h, zb], 1)?;
        }
        h = self.stem.forward(g, s, h)?;
        h = g.relu(h);
        for blk in &self.down {
            h = blk.forward(g, s, h)?;
        }
        for (j, blk) in self.up.iter().enumerate() {
            if j == 0 && self.injection == ZInjection::Bottleneck {
                let hs = g.shape(h).to_vec();
                let zb = broadcast_spatial(g, code, hs[2], hs[3])?;
                h = g.concat(&[h, zb], 1)?;
            }
            h = blk.forward(g, s, h)?;
        }
        let y = self.out.forward(g, s, h)?;
        Ok(g.tanh(y))
    }
}

/// Sequence generator: the code is replicated at every source step and
/// concatenated, a residual two-layer GRU builds a memory, and a one-layer
/// GRU decoder reads it either through content-based attention or by
/// direct time alignment.
#[derive(Debug, Clone)]
pub struct SeqGenerator {
    pub inp: Dense,
    pub mem: [Gru; 2],
    pub query: Dense,
    pub dec: Gru,
    pub out: Dense,
    pub target: ModalityTag,
    pub attention: bool,
    pub code_dim: usize,
    pub in_dim: usize,
}

impl SeqGenerator {
    pub fn new(
        bld: &mut Builder,
        name: &str,
        cfg: &ModelConfig,
        fin: usize,
        code_dim: usize,
        target: ModalityTag,
    ) -> Self {
        let h = cfg.generator_gru_units;
        let fout = match target {
            ModalityTag::Text => cfg.vocab_size,
            _ => cfg.frame_dim,
        };
        Self {
            inp: Dense::new(bld, &format!("{name}.inp"), fin + code_dim, h, 1.0),
            mem: [
                Gru::new(bld, &format!("{name}.mem0"), h, h),
                Gru::new(bld, &format!("{name}.mem1"), h, h),
            ],
            query: Dense::new(bld, &format!("{name}.query"), h, h, 1.0),
            dec: Gru::new(bld, &format!("{name}.dec"), h + code_dim, h),
            out: Dense::new(bld, &format!("{name}.out"), 2 * h, fout, 1.0),
            target,
            attention: cfg.seq_attention,
            code_dim,
            in_dim: fin,
        }
    }

    /// Source with the code appended at every step: `[B, T, F + Z]`.
    pub fn condition<T: Real>(&self, g: &mut Graph<T>, x: Var, code: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 3 || sh[2] != self.in_dim {
            return Err(Error::shape(format!(
                "sequence generator expects [B, T, {}], got {sh:?}",
                self.in_dim
            )));
        }
        if sh[1] == 0 {
            return Err(Error::shape("zero-length source".to_string()));
        }
        if g.shape(code) != [sh[0], self.code_dim] {
            return Err(Error::shape(format!(
                "latent code of shape {:?}, expected [{}, {}]",
                g.shape(code),
                sh[0],
                self.code_dim
            )));
        }
        let zt = broadcast_time(g, code, sh[1])?;
        Ok(g.concat(&[x, zt], 2)?)
    }

    /// Returns `[B, out_len, F]` frames, or per-step distributions
    /// `[B, out_len, V]` for text.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        code: Var,
        out_len: usize,
    ) -> Result<Var> {
        if out_len == 0 {
            return Err(Error::shape("output length must be ≥1".to_string()));
        }
        let xc = self.condition(g, x, code)?;
        let sh = g.shape(xc).to_vec();
        let (b, t) = (sh[0], sh[1]);
        let h0 = self.inp.forward(g, s, xc)?;
        let mut m = g.tanh(h0);
        for gru in &self.mem {
            let st = gru.run(g, s, m, None, false)?;
            let st = stack_time(g, &st)?;
            m = g.add(m, st)?;
        }
        let units = self.dec.units;
        let mut h = g.mean_axis(m, 1, false)?;
        let mut feats = Vec::with_capacity(out_len);
        for step in 0..out_len {
            let ctx = if self.attention {
                let q = self.query.forward(g, s, h)?;
                let q = g.reshape(q, &[b, units, 1])?;
                let e = g.batch_matmul(m, q)?;
                let e = g.reshape(e, &[b, 1, t])?;
                let e = g.scale(e, 1.0 / (units as f64).sqrt());
                let a = g.softmax(e)?;
                let c = g.batch_matmul(a, m)?;
                g.reshape(c, &[b, units])?
            } else {
                let src = step * t / out_len;
                let c = g.narrow(m, 1, src, 1)?;
                g.reshape(c, &[b, units])?
            };
            let inp = g.concat(&[ctx, code], 1)?;
            h = self.dec.step(g, s, inp, h)?;
            feats.push(g.concat(&[h, ctx], 1)?);
        }
        let feats = stack_time(g, &feats)?;
        let y = self.out.forward(g, s, feats)?;
        match self.target {
            ModalityTag::Text => Ok(g.softmax(y)?),
            _ => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Generator {
    Image(ImageGenerator),
    Sequence(SeqGenerator),
}

/// How the discriminator sees the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    /// Raw source channels concatenated to an image target of equal size.
    Channels(usize),
    /// Mean source vector broadcast over the target's positions.
    Mean(usize),
}

/// Conditional discriminator: conv stack (strided 3×3 for images, width-3
/// over time for sequences and text) with leaky ReLUs, a global mean and a
/// dense logit.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub convs: Vec<Conv>,
    pub out: Dense,
    pub source: ModalityTag,
    pub target: ModalityTag,
    pub cond: Conditioning,
}

impl Discriminator {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, source: ModalityTag, target: ModalityTag) -> Self {
        let cond = match (source, target) {
            (ModalityTag::Image, ModalityTag::Image) => Conditioning::Channels(cfg.source_image_channels),
            (ModalityTag::Image, _) => Conditioning::Mean(cfg.source_image_channels * cfg.image_size),
            (ModalityTag::Sequence, _) => Conditioning::Mean(cfg.frame_dim),
            (ModalityTag::Text, _) => Conditioning::Mean(cfg.vocab_size),
        };
        let cdim = match cond {
            Conditioning::Channels(c) | Conditioning::Mean(c) => c,
        };
        let tdim = match target {
            ModalityTag::Image => 3,
            ModalityTag::Sequence => cfg.frame_dim,
            ModalityTag::Text => cfg.vocab_size,
        };
        let mut c = tdim + cdim;
        let mut convs = Vec::new();
        for (i, &co) in cfg.disc_channels.iter().enumerate() {
            let nm = format!("{name}.conv{i}");
            convs.push(match target {
                ModalityTag::Image => Conv::square(bld, &nm, c, co, 3, 2, RELU_GAIN),
                _ => conv1d(bld, &nm, c, co, 3, RELU_GAIN),
            });
            c = co;
        }
        let out = Dense::new(bld, &format!("{name}.out"), c, 1, 1.0);
        Self {
            convs,
            out,
            source,
            target,
            cond,
        }
    }

    fn summary<T: Real>(&self, g: &mut Graph<T>, src: Var) -> Result<Var> {
        let sh = g.shape(src).to_vec();
        match self.source {
            ModalityTag::Image => {
                let m = g.mean_axis(src, 2, false)?;
                Ok(g.reshape(m, &[sh[0], sh[1] * sh[3]])?)
            }
            _ => Ok(g.mean_axis(src, 1, false)?),
        }
    }

    /// Logits `[B]` for (source, target) pairs.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, src: Var, tgt: Var) -> Result<Var> {
        let ts = g.shape(tgt).to_vec();
        let ss = g.shape(src).to_vec();
        if ts.first() != ss.first() {
            return Err(Error::shape(format!("source batch {ss:?} vs target batch {ts:?}")));
        }
        let mut h = match (self.cond, self.target) {
            (Conditioning::Channels(_), _) => {
                if ss.len() != 4 || ss[2..] != ts[2..] {
                    return Err(Error::shape(format!("source {ss:?} and target {ts:?} differ in size")));
                }
                g.concat(&[tgt, src], 1)?
            }
            (Conditioning::Mean(_), ModalityTag::Image) => {
                let m = self.summary(g, src)?;
                let mb = broadcast_spatial(g, m, ts[2], ts[3])?;
                g.concat(&[tgt, mb], 1)?
            }
            (Conditioning::Mean(_), _) => {
                let m = self.summary(g, src)?;
                let mb = broadcast_time(g, m, ts[1])?;
                let x = g.concat(&[tgt, mb], 2)?;
                to_conv1d(g, x)?
            }
        };
        for c in &self.convs {
            h = c.forward(g, s, h)?;
            h = g.leaky_relu(h, LEAK);
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let pooled = g.mean_axis(flat, 2, false)?;
        let logit = self.out.forward(g, s, pooled)?;
        Ok(g.reshape(logit, &[hs[0]])?)
    }
}
