//! Universal attention module: reference encoder, universal token layer and
//! the Gaussian projection that turns a domain embedding into a latent code.

use m3d_autograd::{Graph, ParamStore, Real, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{KlPlacement, LatentCode, LatentOrigin, ModalityTag, ModelConfig, Recovery};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, Dense, Gru};
use crate::subnets::TextPrenet;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Fixed-length summary of a reference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEmbedding(pub Vec<f64>);

/// Attention-weighted combination of value-projected tokens, heads
/// concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainEmbedding(pub Vec<f64>);

/// Softmax weights, one row of `n_tokens` per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub n_heads: usize,
    pub n_tokens: usize,
    pub data: Vec<f64>,
}

impl AttentionWeights {
    pub fn row(&self, head: usize) -> &[f64] {
        &self.data[head * self.n_tokens..(head + 1) * self.n_tokens]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Reparameterised draw `mu + exp(logvar / 2) * eps`.
pub fn sample_latent(g: &GaussianLatent, rng: &mut impl Rng) -> LatentCode {
    let values = g
        .mu
        .iter()
        .zip(&g.logvar)
        .map(|(&m, &lv)| {
            let e: f64 = StandardNormal.sample(rng);
            m + (0.5 * lv).exp() * e
        })
        .collect();
    LatentCode {
        values,
        origin: LatentOrigin::EncodedReference,
    }
}

pub fn sample_prior(dim: usize, rng: &mut impl Rng) -> Result<LatentCode> {
    if dim == 0 {
        return Err(Error::contract("latent dim must be ≥1"));
    }
    LatentCode::new(standard_normal(rng, dim), LatentOrigin::SampledPrior)
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `Enc_r`: a strided conv stack whose rows (images) or frames (sequences)
/// are summarised by a GRU. Text references are averaged prenet states.
#[derive(Debug, Clone)]
pub enum RefEncoder {
    Conv {
        convs: Vec<Conv>,
        gru: Gru,
        modality: ModalityTag,
    },
    Text(TextPrenet),
}

impl RefEncoder {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, target: ModalityTag) -> Self {
        let (mut cin, mut width, stride) = match target {
            ModalityTag::Text => return RefEncoder::Text(TextPrenet::new(bld, name, cfg)),
            ModalityTag::Image => (3, cfg.image_size, (2, 2)),
            ModalityTag::Sequence => (1, cfg.frame_dim, (1, cfg.ref_encoder_stride)),
        };
        let mut convs = Vec::new();
        for (i, &c) in cfg.ref_encoder_channels.iter().enumerate() {
            let spec = m3d_autograd::Conv2dSpec::new(stride, (1, 1, 1, 1));
            convs.push(Conv::new(bld, &format!("{name}.conv{i}"), cin, c, (3, 3), spec, 2f64.sqrt()));
            cin = c;
            width = (width - 1) / stride.1 + 1;
        }
        let gru = Gru::new(bld, &format!("{name}.gru"), cin * width, cfg.ref_gru_units);
        RefEncoder::Conv {
            convs,
            gru,
            modality: target,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            RefEncoder::Conv { gru, .. } => gru.units,
            RefEncoder::Text(t) => t.out_dim(),
        }
    }

    /// `r` in the target layout (`[B, 3, H, W]`, `[B, T, F]` or
    /// `[B, L, V]`); returns `[B, out_dim]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r: Var) -> Result<Var> {
        match self {
            RefEncoder::Text(t) => t.global(g, s, r),
            RefEncoder::Conv {
                convs,
                gru,
                modality,
            } => {
                let mut x = if *modality == ModalityTag::Sequence {
                    let sh = g.shape(r).to_vec();
                    if sh.len() != 3 || sh[1] == 0 {
                        return Err(Error::shape(format!("sequence reference of shape {sh:?}")));
                    }
                    g.reshape(r, &[sh[0], 1, sh[1], sh[2]])?
                } else {
                    r
                };
                for c in convs {
                    x = c.forward(g, s, x)?;
                    x = g.relu(x);
                }
                let sh = g.shape(x).to_vec();
                let rows = g.permute(x, &[0, 2, 1, 3])?;
                let rows = g.reshape(rows, &[sh[0], sh[2], sh[1] * sh[3]])?;
                let states = gru.run(g, s, rows, None, false)?;
                Ok(*states.last().expect("at least one row"))
            }
        }
    }
}

/// Global token bank with per-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct TokenLayer {
    pub bank: m3d_autograd::ParamId,
    pub wq: m3d_autograd::ParamId,
    pub wk: m3d_autograd::ParamId,
    pub wv: m3d_autograd::ParamId,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub n_heads: usize,
    pub query_dim: usize,
}

impl TokenLayer {
    pub fn new(
        bld: &mut Builder,
        name: &str,
        query_dim: usize,
        n_tokens: usize,
        token_dim: usize,
        n_heads: usize,
    ) -> Self {
        let td = token_dim as f64;
        Self {
            bank: bld.normal(&format!("{name}.bank"), &[n_tokens, token_dim], 0.5),
            wq: bld.normal(&format!("{name}.wq"), &[query_dim, token_dim], 1.0 / (query_dim as f64).sqrt()),
            wk: bld.normal(&format!("{name}.wk"), &[token_dim, token_dim], 1.0 / td.sqrt()),
            wv: bld.normal(&format!("{name}.wv"), &[token_dim, token_dim], 1.0 / td.sqrt()),
            n_tokens,
            token_dim,
            n_heads,
            query_dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    /// Value-projected tokens per head, `[h, N, dk]`.
    pub fn values<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>) -> Result<Var> {
        let bank = g.param(s, self.bank);
        let wv = g.param(s, self.wv);
        let v = g.matmul(bank, wv)?;
        let v = g.reshape(v, &[self.n_tokens, self.n_heads, self.head_dim()])?;
        Ok(g.permute(v, &[1, 0, 2])?)
    }

    /// `q: [B, query_dim]` to (domain embedding `[B, token_dim]`, weights
    /// `[B, h, N]`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, q: Var) -> Result<(Var, Var)> {
        let b = g.shape(q)[0];
        let (h, n, dk) = (self.n_heads, self.n_tokens, self.head_dim());
        let wq = g.param(s, self.wq);
        let qp = g.matmul(q, wq)?;
        let qp = g.reshape(qp, &[b, h, dk])?;
        let qp = g.permute(qp, &[1, 0, 2])?; // [h, B, dk]
        let bank = g.param(s, self.bank);
        let wk = g.param(s, self.wk);
        let k = g.matmul(bank, wk)?;
        let k = g.reshape(k, &[n, h, dk])?;
        let k = g.permute(k, &[1, 2, 0])?; // [h, dk, N]
        let logits = g.batch_matmul(qp, k)?;
        let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
        let w = g.softmax(logits)?; // [h, B, N]
        let v = self.values(g, s)?;
        let ctx = g.batch_matmul(w, v)?; // [h, B, dk]
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let domain = g.reshape(ctx, &[b, self.token_dim])?;
        let weights = g.permute(w, &[1, 0, 2])?;
        Ok((domain, weights))
    }
}

/// Nodes produced by one pass of the attention module.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub reference: Var,
    /// `[B, h, N]`; absent without a token layer.
    pub weights: Option<Var>,
    pub domain: Var,
    pub mu: Var,
    pub logvar: Var,
}

/// `E_att`.
#[derive(Debug, Clone)]
pub struct Attention {
    pub enc: RefEncoder,
    pub utl: Option<TokenLayer>,
    pub mu: Dense,
    pub logvar: Dense,
    pub recovery_head: Option<Dense>,
    pub placement: KlPlacement,
    pub recovery: Recovery,
    pub latent_dim: usize,
}

impl Attention {
    pub fn new(bld: &mut Builder, name: &str, cfg: &ModelConfig, target: ModalityTag) -> Self {
        let enc = RefEncoder::new(bld, &format!("{name}.enc"), cfg, target);
        let rd = enc.out_dim();
        let z = cfg.latent_dim;
        let (utl, gauss_in) = match (cfg.use_attention, cfg.kl_placement) {
            (false, _) => (None, rd),
            (true, KlPlacement::PostUtl) => (
                Some(TokenLayer::new(bld, &format!("{name}.utl"), rd, cfg.n_tokens, cfg.token_dim, cfg.n_heads)),
                cfg.token_dim,
            ),
            (true, KlPlacement::PreUtl) => (
                Some(TokenLayer::new(bld, &format!("{name}.utl"), z, cfg.n_tokens, cfg.token_dim, cfg.n_heads)),
                rd,
            ),
        };
        let mu = Dense::new(bld, &format!("{name}.mu"), gauss_in, z, 1.0);
        let logvar = Dense::new(bld, &format!("{name}.logvar"), gauss_in, z, 0.1);
        let recovery_head = (cfg.recovery == Recovery::EncoderOnly)
            .then(|| Dense::new(bld, &format!("{name}.recover"), rd, z, 1.0));
        Self {
            enc,
            utl,
            mu,
            logvar,
            recovery_head,
            placement: cfg.kl_placement,
            recovery: cfg.recovery,
            latent_dim: z,
        }
    }

    /// Width of the code handed to the generator.
    pub fn code_dim(&self) -> usize {
        match (&self.utl, self.placement) {
            (Some(u), KlPlacement::PreUtl) => u.token_dim,
            _ => self.latent_dim,
        }
    }

    pub fn project<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, d: Var) -> Result<(Var, Var)> {
        let mu = self.mu.forward(g, s, d)?;
        let lv = self.logvar.forward(g, s, d)?;
        Ok((mu, g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)))
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, r: Var) -> Result<Encoded> {
        let reference = self.enc.forward(g, s, r)?;
        match (&self.utl, self.placement) {
            (Some(utl), KlPlacement::PostUtl) => {
                let (domain, w) = utl.forward(g, s, reference)?;
                let (mu, logvar) = self.project(g, s, domain)?;
                Ok(Encoded {
                    reference,
                    weights: Some(w),
                    domain,
                    mu,
                    logvar,
                })
            }
            (Some(utl), KlPlacement::PreUtl) => {
                let (mu, logvar) = self.project(g, s, reference)?;
                let (domain, w) = utl.forward(g, s, mu)?;
                Ok(Encoded {
                    reference,
                    weights: Some(w),
                    domain,
                    mu,
                    logvar,
                })
            }
            (None, _) => {
                let (mu, logvar) = self.project(g, s, reference)?;
                Ok(Encoded {
                    reference,
                    weights: None,
                    domain: reference,
                    mu,
                    logvar,
                })
            }
        }
    }

    /// Maps a latent `z: [B, latent_dim]` to the generator's code.
    pub fn code<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z: Var) -> Result<Var> {
        match (&self.utl, self.placement) {
            (Some(utl), KlPlacement::PreUtl) => Ok(utl.forward(g, s, z)?.0),
            _ => Ok(z),
        }
    }

    /// Latent Gaussian read back from a generated sample.
    pub fn recover<T: Real>(&self, g: &mut Graph<T>, s: &ParamStore<T>, t: Var) -> Result<(Var, Var)> {
        match &self.recovery_head {
            Some(head) => {
                let r = self.enc.forward(g, s, t)?;
                let mu = head.forward(g, s, r)?;
                let zero = g.constant(ArrayD::zeros(IxDyn(g.shape(mu))));
                Ok((mu, zero))
            }
            None => {
                let e = self.encode(g, s, t)?;
                Ok((e.mu, e.logvar))
            }
        }
    }
}

/// Stand-alone token bank evaluated at `f64`, for inspection and property
/// checks.
#[derive(Debug, Clone)]
pub struct TokenBank {
    layer: TokenLayer,
    store: ParamStore<f64>,
}

impl TokenBank {
    pub fn random(
        n_tokens: usize,
        token_dim: usize,
        query_dim: usize,
        n_heads: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_tokens == 0 || token_dim == 0 || query_dim == 0 || n_heads == 0 || !token_dim.is_multiple_of(n_heads) {
            return Err(Error::contract(format!(
                "token bank needs positive sizes and token_dim divisible by n_heads \
                 (tokens {n_tokens}, dim {token_dim}, query {query_dim}, heads {n_heads})"
            )));
        }
        let mut bld = Builder::new(seed);
        let layer = TokenLayer::new(&mut bld, "utl", query_dim, n_tokens, token_dim, n_heads);
        Ok(Self {
            layer,
            store: bld.finish(),
        })
    }

    /// Bank from explicit matrices: `tokens: [N, D]`, `wq: [Q, D]`,
    /// `wk, wv: [D, D]`.
    pub fn from_matrices(
        tokens: Array2<f64>,
        wq: Array2<f64>,
        wk: Array2<f64>,
        wv: Array2<f64>,
        n_heads: usize,
    ) -> Result<Self> {
        let (n, d) = tokens.dim();
        let q = wq.nrows();
        if wq.ncols() != d || wk.dim() != (d, d) || wv.dim() != (d, d) {
            return Err(Error::shape("token bank projection shapes disagree".to_string()));
        }
        let mut bank = Self::random(n, d, q, n_heads, 0)?;
        for (id, m) in [
            (bank.layer.bank, tokens),
            (bank.layer.wq, wq),
            (bank.layer.wk, wk),
            (bank.layer.wv, wv),
        ] {
            *bank.store.get_mut(id) = m.into_dyn();
        }
        Ok(bank)
    }

    /// Builds a bank from a layer of a trained model.
    pub fn from_layer<T: Real>(layer: &TokenLayer, store: &ParamStore<T>) -> Self {
        let mut own = ParamStore::new();
        let cast = |id| store.get(id).mapv(|v: T| v.to_f64().expect("finite"));
        let ids = [layer.bank, layer.wq, layer.wk, layer.wv].map(|id| own.add(store.name(id), cast(id)));
        Self {
            layer: TokenLayer {
                bank: ids[0],
                wq: ids[1],
                wk: ids[2],
                wv: ids[3],
                ..layer.clone()
            },
            store: own,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.layer.n_tokens
    }

    pub fn n_heads(&self) -> usize {
        self.layer.n_heads
    }

    pub fn query_dim(&self) -> usize {
        self.layer.query_dim
    }

    pub fn tokens(&self) -> &ArrayD<f64> {
        self.store.get(self.layer.bank)
    }

    /// Value-projected tokens, `[h, N, dk]`.
    pub fn value_tokens(&self) -> Array3<f64> {
        let mut g = Graph::new();
        let v = self.layer.values(&mut g, &self.store).expect("shapes fixed at construction");
        g.value(v)
            .clone()
            .into_dimensionality()
            .expect("rank 3")
    }

    pub fn attend(&self, q: &[f64]) -> Result<(DomainEmbedding, AttentionWeights)> {
        if q.len() != self.layer.query_dim {
            return Err(Error::shape(format!(
                "query of length {} for a bank expecting {}",
                q.len(),
                self.layer.query_dim
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("query must be finite"));
        }
        let mut g = Graph::new();
        let qv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, q.len()]), q.to_vec()).expect("len"));
        let (d, w) = self.layer.forward(&mut g, &self.store, qv)?;
        Ok((
            DomainEmbedding(g.value(d).iter().copied().collect()),
            AttentionWeights {
                n_heads: self.layer.n_heads,
                n_tokens: self.layer.n_tokens,
                data: g.value(w).iter().copied().collect(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_uniform_weights() {
        // Query orthogonal to both keys.
        let tokens = array![[1.0, 0.0], [0.0, 1.0]];
        let wq = array![[0.0, 0.0], [0.0, 0.0]];
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let bank = TokenBank::from_matrices(tokens, wq, eye.clone(), eye, 1).unwrap();
        let (d, w) = bank.attend(&[0.3, -0.2]).unwrap();
        assert_eq!(w.row(0), &[0.5, 0.5]);
        assert_eq!(d.0, vec![0.5, 0.5]);
    }

    #[test]
    fn log_ratio_logits() {
        // Single-dim keys make the logit equal q * key.
        let tokens = array![[2f64.ln()], [0.0], [0.0]];
        let one = array![[1.0]];
        let bank = TokenBank::from_matrices(tokens, one.clone(), one.clone(), one, 1).unwrap();
        let (_, w) = bank.attend(&[1.0]).unwrap();
        for (a, b) in w.row(0).iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prior_moments_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!(sample_prior(0, &mut rng).is_err());
        let a = sample_prior(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_prior(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_prior(1, &mut rng).unwrap().values[0]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 0.02, "{m}");
        assert!((0.95..=1.05).contains(&v), "{v}");
    }

    #[test]
    fn reparameterised_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = GaussianLatent {
            mu: vec![0.0; 3],
            logvar: vec![0.0; 3],
        };
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let z = sample_latent(&g, &mut rng);
            assert_eq!(z.origin, LatentOrigin::EncodedReference);
            for i in 0..3 {
                sum[i] += z.values[i];
                sq[i] += z.values[i] * z.values[i];
            }
        }
        for i in 0..3 {
            let m = sum[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            assert!(m.abs() < 0.02 && (v - 1.0).abs() < 0.05, "{m} {v}");
        }
        let tight = GaussianLatent {
            mu: vec![1.5, -2.0],
            logvar: vec![LOGVAR_MIN; 2],
        };
        let z = sample_latent(&tight, &mut rng);
        // The noise is scaled by exp(-5); five standard deviations bound it.
        for (a, b) in z.values.iter().zip(&tight.mu) {
            assert!((a - b).abs() < 5.0 * (-5f64).exp());
        }
    }
}
