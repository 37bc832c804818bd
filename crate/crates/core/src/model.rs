//! A complete translator for one task: source prenet, optional layout
//! bridge, target generator, attention module and discriminator.

use m3d_autograd::{Graph, ParamStore, Real, Var};
use ndarray::{ArrayD, Axis, IxDyn};

use crate::attention::{
    AttentionWeights, Attention, DomainEmbedding, Encoded, GaussianLatent, ReferenceEmbedding, TokenBank,
};
use crate::datamodel::{
    validate_config, LatentCode, ModalityTag, ModelConfig, Sample, TaskSpec, WeightSharing,
};
use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::subnets::{Bridge, Discriminator, DiscriminatorScore, Generator, ImageGenerator, Prenet, SeqGenerator, UnifiedRepr};

/// The four separately tracked parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Prenet,
    Generator,
    Attention,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Prenet,
        ParamGroup::Generator,
        ParamGroup::Attention,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Prenet => "prenet",
            ParamGroup::Generator => "generator",
            ParamGroup::Attention => "attention",
            ParamGroup::Discriminator => "discriminator",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Translator {
    pub cfg: ModelConfig,
    pub task: TaskSpec,
    pub prenet: Prenet,
    pub bridge: Option<Bridge>,
    pub generator: Generator,
    pub att: Attention,
    pub disc: Discriminator,
    disc_prefix: String,
}

fn short(m: ModalityTag) -> &'static str {
    match m {
        ModalityTag::Image => "image",
        ModalityTag::Text => "text",
        ModalityTag::Sequence => "sequence",
    }
}

impl Translator {
    /// Builds the network and its freshly initialised parameters (seeded by
    /// `cfg.seed`).
    pub fn new(cfg: &ModelConfig, task: &TaskSpec) -> Result<(Self, ParamStore<f64>)> {
        validate_config(cfg).map_err(Error::Config)?;
        let (src, tgt) = (short(task.source), short(task.target));
        let name = |part: &str| match cfg.weight_sharing {
            WeightSharing::PerModality => part.to_string(),
            WeightSharing::PerTask => format!("{}.{part}", task.slug()),
        };
        let mut bld = Builder::new(cfg.seed);
        let prenet = Prenet::new(&mut bld, &name(&format!("prenet.{src}")), cfg, task.source);
        let att = Attention::new(&mut bld, &name(&format!("att.{tgt}")), cfg, task.target);
        let code = att.code_dim();
        let bridge_name = name(&format!("bridge.{src}_{tgt}"));
        let (bridge, generator) = match task.target {
            ModalityTag::Image => {
                let (bridge, cin) = if prenet.is_spatial() {
                    (None, prenet.out_dim())
                } else {
                    let b = Bridge::frames_to_spatial(&mut bld, &bridge_name, cfg, prenet.out_dim());
                    let c = *cfg.prenet_conv_channels.last().expect("validated");
                    (Some(b), c)
                };
                let g = ImageGenerator::new(&mut bld, &name("gen.image"), cfg, cin, code);
                (bridge, Generator::Image(g))
            }
            target => {
                let (bridge, fin) = if prenet.is_spatial() {
                    (Some(Bridge::SpatialToFrames), prenet.out_dim() * cfg.image_size)
                } else {
                    (None, prenet.out_dim())
                };
                let nm = name(&format!("gen.{}", short(target)));
                let g = SeqGenerator::new(&mut bld, &nm, cfg, fin, code, target);
                (bridge, Generator::Sequence(g))
            }
        };
        let disc_prefix = name(&format!("disc.{src}_{tgt}"));
        let disc = Discriminator::new(&mut bld, &disc_prefix, cfg, task.source, task.target);
        let model = Self {
            cfg: cfg.clone(),
            task: task.clone(),
            prenet,
            bridge,
            generator,
            att,
            disc,
            disc_prefix: format!("{disc_prefix}."),
        };
        Ok((model, bld.finish()))
    }

    /// Whether a parameter belongs to the discriminator.
    pub fn is_disc_param(&self, name: &str) -> bool {
        name.starts_with(&self.disc_prefix)
    }

    /// Sub-network a parameter belongs to, from its name.
    pub fn param_group(&self, name: &str) -> ParamGroup {
        let local = match self.cfg.weight_sharing {
            WeightSharing::PerModality => name,
            WeightSharing::PerTask => name.split_once('.').map_or(name, |(_, rest)| rest),
        };
        match local.split('.').next().unwrap_or_default() {
            "prenet" | "bridge" => ParamGroup::Prenet,
            "gen" => ParamGroup::Generator,
            "att" => ParamGroup::Attention,
            _ => ParamGroup::Discriminator,
        }
    }

    /// Packs samples of one shape into a batch tensor; text becomes one-hot
    /// rows over the vocabulary.
    pub fn batch_tensor<T: Real>(&self, samples: &[&Sample], modality: ModalityTag) -> Result<ArrayD<T>> {
        let first = samples.first().ok_or_else(|| Error::contract("empty batch"))?;
        let shape = first.shape().to_vec();
        for s in samples {
            if s.modality() != modality {
                return Err(Error::contract(format!(
                    "expected a {modality} sample, got {}",
                    s.modality()
                )));
            }
            if s.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "batch mixes shapes {shape:?} and {:?}",
                    s.shape()
                )));
            }
        }
        let b = samples.len();
        match modality {
            ModalityTag::Text => {
                let v = self.cfg.vocab_size;
                let l = shape[0];
                let mut out = ArrayD::zeros(IxDyn(&[b, l, v]));
                for (i, s) in samples.iter().enumerate() {
                    s.validate(Some(v))?;
                    for (j, &id) in s.ids().expect("text").iter().enumerate() {
                        out[[i, j, id as usize]] = T::one();
                    }
                }
                Ok(out)
            }
            _ => {
                if modality == ModalityTag::Image {
                    let s = self.cfg.image_size;
                    if shape[1] != s || shape[2] != s {
                        return Err(Error::shape(format!(
                            "image of size {}×{} does not match the configured {s}×{s}",
                            shape[1], shape[2]
                        )));
                    }
                } else if shape[1] != self.cfg.frame_dim {
                    return Err(Error::shape(format!(
                        "frames of width {} do not match frame_dim {}",
                        shape[1], self.cfg.frame_dim
                    )));
                }
                let mut full = vec![b];
                full.extend_from_slice(&shape);
                let data: Vec<T> = samples
                    .iter()
                    .flat_map(|s| s.values().expect("real").iter().map(|&v| T::from(v).expect("finite")))
                    .collect();
                Ok(ArrayD::from_shape_vec(IxDyn(&full), data).expect("sizes checked"))
            }
        }
    }

    pub fn source_tensor<T: Real>(&self, samples: &[&Sample]) -> Result<ArrayD<T>> {
        let t = self.batch_tensor(samples, self.task.source)?;
        if self.task.source == ModalityTag::Image && t.shape()[1] != self.cfg.source_image_channels {
            return Err(Error::shape(format!(
                "source images have {} channels, config expects {}",
                t.shape()[1],
                self.cfg.source_image_channels
            )));
        }
        Ok(t)
    }

    pub fn target_tensor<T: Real>(&self, samples: &[&Sample]) -> Result<ArrayD<T>> {
        let t = self.batch_tensor(samples, self.task.target)?;
        if self.task.target == ModalityTag::Image && t.shape()[1] != 3 {
            return Err(Error::shape(format!("target images must have 3 channels, got {}", t.shape()[1])));
        }
        Ok(t)
    }

    /// Output length used when no target is available.
    pub fn default_out_len(&self, source: &Sample) -> usize {
        match (self.task.source, self.task.target) {
            (_, ModalityTag::Image) => self.cfg.image_size,
            (ModalityTag::Image, _) => self.cfg.text_out_len,
            _ => source.shape()[0],
        }
    }

    /// Target-layout output length for a given target sample.
    pub fn out_len(target: &Sample) -> usize {
        match target.modality() {
            ModalityTag::Image => target.shape()[1],
            _ => target.shape()[0],
        }
    }

    /// Prenet followed by the bridge, if the generator needs the other
    /// layout.
    pub fn source_repr<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, src: Var) -> Result<Var> {
        let r = self.prenet.forward(g, s, src)?;
        match &self.bridge {
            Some(b) => b.forward(g, s, r),
            None => Ok(r),
        }
    }

    pub fn generate<T: Real>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        repr: Var,
        code: Var,
        out_len: usize,
    ) -> Result<Var> {
        match &self.generator {
            Generator::Image(gen) => gen.forward(g, s, repr, code),
            Generator::Sequence(gen) => gen.forward(g, s, repr, code, out_len),
        }
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r: Var) -> Result<Encoded> {
        self.att.encode(g, s, r)
    }

    pub fn code<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        self.att.code(g, s, z)
    }

    pub fn recover<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, t: Var) -> Result<(Var, Var)> {
        self.att.recover(g, s, t)
    }

    pub fn discriminate<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, src: Var, tgt: Var) -> Result<Var> {
        self.disc.forward(g, s, src, tgt)
    }

    /// Converts row `i` of a generated batch back into a sample. Text is
    /// decoded greedily.
    pub fn decode_output<T: Real>(&self, out: &ArrayD<T>, i: usize) -> Result<Sample> {
        let row = out.index_axis(Axis(0), i);
        let f = |v: &T| v.to_f32().unwrap_or(f32::NAN);
        match self.task.target {
            ModalityTag::Image => {
                let sh = row.shape();
                let data = row.iter().map(|v| f(v).clamp(-1.0, 1.0)).collect();
                Sample::image(sh[0], sh[1], sh[2], data)
            }
            ModalityTag::Sequence => {
                let sh = row.shape();
                Sample::sequence(sh[0], sh[1], row.iter().map(f).collect())
            }
            ModalityTag::Text => {
                let ids = row
                    .outer_iter()
                    .map(|dist| {
                        let mut best = 0;
                        for (j, v) in dist.iter().enumerate() {
                            if *v > dist[best] {
                                best = j;
                            }
                        }
                        best as u32
                    })
                    .collect();
                Sample::text(ids)
            }
        }
    }

    fn constant_batch<T: Real>(&self, g: &mut Graph<T>, s: &Sample, source: bool) -> Result<Var> {
        let t = if source {
            self.source_tensor(&[s])?
        } else {
            self.target_tensor(&[s])?
        };
        Ok(g.constant(t))
    }

    fn latent_var<T: Real>(&self, g: &mut Graph<T>, z: &LatentCode) -> Result<Var> {
        if z.dim() != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent code of dim {} for a model with latent_dim {}",
                z.dim(),
                self.cfg.latent_dim
            )));
        }
        let data = z.values.iter().map(|&v| T::from(v).expect("finite")).collect();
        Ok(g.constant(ArrayD::from_shape_vec(IxDyn(&[1, z.dim()]), data).expect("len")))
    }

    pub fn encode_reference<T: Real>(&self, s: &ParamStore<T>, r: &Sample) -> Result<ReferenceEmbedding> {
        let mut g = Graph::new();
        let rv = self.constant_batch(&mut g, r, false)?;
        let e = self.att.enc.forward(&mut g, s, rv)?;
        Ok(ReferenceEmbedding(to_f64(g.value(e))))
    }

    /// Token attention for a reference embedding; `None` weights when the
    /// model has no token layer.
    pub fn attend_tokens<T: Real>(
        &self,
        s: &ParamStore<T>,
        q: &ReferenceEmbedding,
    ) -> Result<(DomainEmbedding, Option<AttentionWeights>)> {
        match &self.att.utl {
            Some(utl) if self.cfg.kl_placement == crate::datamodel::KlPlacement::PostUtl => {
                let (d, w) = TokenBank::from_layer(utl, s).attend(&q.0)?;
                Ok((d, Some(w)))
            }
            _ => Ok((DomainEmbedding(q.0.clone()), None)),
        }
    }

    pub fn project_gaussian<T: Real>(&self, s: &ParamStore<T>, d: &DomainEmbedding) -> Result<GaussianLatent> {
        if d.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("domain embedding must be finite"));
        }
        let mut g = Graph::<T>::new();
        let data = d.0.iter().map(|&v| T::from(v).expect("finite")).collect();
        let dv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, d.0.len()]), data).expect("len"));
        let (mu, lv) = self.att.project(&mut g, s, dv)?;
        Ok(GaussianLatent {
            mu: to_f64(g.value(mu)),
            logvar: to_f64(g.value(lv)),
        })
    }

    /// Full `E_att` pass on one reference.
    pub fn encode_gaussian<T: Real>(&self, s: &ParamStore<T>, r: &Sample) -> Result<(GaussianLatent, Option<AttentionWeights>)> {
        let mut g = Graph::new();
        let rv = self.constant_batch(&mut g, r, false)?;
        let e = self.att.encode(&mut g, s, rv)?;
        let weights = e.weights.map(|w| {
            let v = g.value(w);
            AttentionWeights {
                n_heads: v.shape()[1],
                n_tokens: v.shape()[2],
                data: to_f64(v),
            }
        });
        Ok((
            GaussianLatent {
                mu: to_f64(g.value(e.mu)),
                logvar: to_f64(g.value(e.logvar)),
            },
            weights,
        ))
    }

    /// Source prenet output (before any bridge).
    pub fn prenet_repr<T: Real>(&self, s: &ParamStore<T>, x: &Sample) -> Result<UnifiedRepr> {
        let mut g = Graph::new();
        let xv = self.constant_batch(&mut g, x, true)?;
        let y = self.prenet.forward(&mut g, s, xv)?;
        let sh = g.shape(y).to_vec();
        let data = to_f64(g.value(y));
        let origin = x.modality();
        Ok(if self.prenet.is_spatial() {
            UnifiedRepr::Spatial {
                origin,
                c: sh[1],
                h: sh[2],
                w: sh[3],
                data,
            }
        } else {
            UnifiedRepr::Frames {
                origin,
                t: sh[1],
                f: sh[2],
                data,
            }
        })
    }

    /// Time-averaged text prenet states, `φ(t) = (1/L) Σ h_i`.
    pub fn prenet_text_global<T: Real>(&self, s: &ParamStore<T>, x: &Sample) -> Result<ReferenceEmbedding> {
        let Prenet::Text(p) = &self.prenet else {
            return Err(Error::contract("source prenet is not a text prenet"));
        };
        if x.is_empty() {
            return Err(Error::contract("empty text"));
        }
        let mut g = Graph::new();
        let xv = self.constant_batch(&mut g, x, true)?;
        let y = p.global(&mut g, s, xv)?;
        Ok(ReferenceEmbedding(to_f64(g.value(y))))
    }

    /// `G(S, z)` for one source; `out_len` defaults per
    /// [`Translator::default_out_len`].
    pub fn generate_sample<T: Real>(
        &self,
        s: &ParamStore<T>,
        source: &Sample,
        z: &LatentCode,
        out_len: Option<usize>,
    ) -> Result<Sample> {
        let mut g = Graph::new();
        let sv = self.constant_batch(&mut g, source, true)?;
        let repr = self.source_repr(&mut g, s, sv)?;
        let zv = self.latent_var(&mut g, z)?;
        let code = self.code(&mut g, s, zv)?;
        let len = out_len.unwrap_or_else(|| self.default_out_len(source));
        let out = self.generate(&mut g, s, repr, code, len)?;
        self.decode_output(g.value(out), 0)
    }

    /// Scores a (source, target) pair; the target may be a generated sample.
    pub fn score<T: Real>(&self, s: &ParamStore<T>, source: &Sample, target: &Sample) -> Result<DiscriminatorScore> {
        if source.modality() != self.task.source || target.modality() != self.task.target {
            return Err(Error::contract(format!(
                "discriminator for {} expects ({}, {}), got ({}, {})",
                self.task.name,
                self.task.source,
                self.task.target,
                source.modality(),
                target.modality()
            )));
        }
        let mut g = Graph::new();
        let sv = self.constant_batch(&mut g, source, true)?;
        let tv = self.constant_batch(&mut g, target, false)?;
        let l = self.discriminate(&mut g, s, sv, tv)?;
        Ok(DiscriminatorScore {
            logit: g.scalar(l).to_f64().expect("finite"),
        })
    }

    pub fn token_bank<T: Real>(&self, s: &ParamStore<T>) -> Option<TokenBank> {
        self.att.utl.as_ref().map(|u| TokenBank::from_layer(u, s))
    }
}

pub(crate) fn to_f64<T: Real>(a: &ArrayD<T>) -> Vec<f64> {
    a.iter().map(|v| v.to_f64().expect("real")).collect()
}
