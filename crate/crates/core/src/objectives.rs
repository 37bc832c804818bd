//! Loss terms of the two-path objective, in value form (for inspection and
//! oracles) and graph form (for training).
//!
//! Sign convention: the generator minimises
//! `λ1·total_vae + λ2·total_lat − λ3·dist`, i.e. it *maximises* the
//! distance regulariser, which penalises collapse onto a single output.

use m3d_autograd::{Graph, Real, Var};

use crate::attention::GaussianLatent;
use crate::datamodel::{GanGeneratorLoss, LatentCode, LatentOrigin, LossWeights, Norm, Sample};
use crate::error::{Error, Result};
use crate::subnets::DiscriminatorScore;

/// Unweighted terms measured on one step's two paths.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    /// Discriminator loss (already weighted per path).
    pub gan_d: f64,
    /// Generator GAN loss on the reference-encoded output.
    pub gan_enc: f64,
    /// Generator GAN loss on the prior-sampled output.
    pub gan_sam: f64,
    pub rec: f64,
    pub kl: f64,
    pub lat: f64,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub gan_d: f64,
    pub gan_g_enc: f64,
    pub gan_g_sam: f64,
    pub rec: f64,
    pub kl: f64,
    pub lat: f64,
    pub dist: f64,
    pub total_vae: f64,
    pub total_lat: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,gan_d,gan_g_enc,gan_g_sam,rec,kl,lat,dist,total";

    pub fn is_finite(&self) -> bool {
        [
            self.gan_d,
            self.gan_g_enc,
            self.gan_g_sam,
            self.rec,
            self.kl,
            self.lat,
            self.dist,
            self.total_vae,
            self.total_lat,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// One CSV row; `{:?}` float formatting round-trips exactly.
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.gan_d, self.gan_g_enc, self.gan_g_sam, self.rec, self.kl, self.lat, self.dist, self.total
        )
    }
}

pub fn compose_total(p: &LossParts, w: &LossWeights) -> LossBreakdown {
    let total_vae = p.gan_enc + w.lambda_rec * p.rec + w.lambda_kl * p.kl;
    let total_lat = p.gan_sam + w.lambda_lat * p.lat;
    LossBreakdown {
        gan_d: p.gan_d,
        gan_g_enc: p.gan_enc,
        gan_g_sam: p.gan_sam,
        rec: p.rec,
        kl: p.kl,
        lat: p.lat,
        dist: p.dist,
        total_vae,
        total_lat,
        total: w.lambda_1 * total_vae + w.lambda_2 * total_lat - w.lambda_3 * p.dist,
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(d_loss, g_loss)` with `d_loss = −[log σ(real) + log(1 − σ(fake))]` and
/// the non-saturating `g_loss = −log σ(fake)`.
pub fn loss_gan(real: DiscriminatorScore, fake: DiscriminatorScore) -> (f64, f64) {
    (softplus(-real.logit) + softplus(fake.logit), softplus(-fake.logit))
}

fn check_same_shape(a: &Sample, b: &Sample) -> Result<()> {
    if a.shape() != b.shape() || a.modality() != b.modality() {
        return Err(Error::shape(format!(
            "{} {:?} vs {} {:?}",
            a.modality(),
            a.shape(),
            b.modality(),
            b.shape()
        )));
    }
    Ok(())
}

fn norm_distance(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    let n = a.len() as f64;
    match norm {
        Norm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
        Norm::L2 => (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt(),
    }
}

/// Mean absolute error (or RMS under [`Norm::L2`]).
pub fn loss_rec(t_hat: &Sample, t: &Sample, norm: Norm) -> Result<f64> {
    check_same_shape(t_hat, t)?;
    Ok(norm_distance(&t_hat.to_f64(), &t.to_f64(), norm))
}

/// `½ Σ (μ² + e^logvar − 1 − logvar)`.
pub fn loss_kl(g: &GaussianLatent) -> f64 {
    0.5 * g
        .mu
        .iter()
        .zip(&g.logvar)
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

pub fn loss_latent_regression(z_s: &LatentCode, z_hat: &LatentCode) -> Result<f64> {
    if z_s.origin != LatentOrigin::SampledPrior {
        return Err(Error::contract("latent regression target must be a prior sample"));
    }
    if z_s.dim() != z_hat.dim() {
        return Err(Error::shape(format!("latent dims {} vs {}", z_s.dim(), z_hat.dim())));
    }
    Ok(norm_distance(&z_s.values, &z_hat.values, Norm::L1))
}

/// `‖t1 − t2‖ / (‖z1 − z2‖ + eps)` with mean-L1 norms.
pub fn loss_distance_reg(
    t1: &Sample,
    t2: &Sample,
    z1: &LatentCode,
    z2: &LatentCode,
    eps: f64,
    norm: Norm,
) -> Result<f64> {
    check_same_shape(t1, t2)?;
    if !(eps > 0.0) {
        return Err(Error::contract("eps must be positive"));
    }
    if z1.dim() != z2.dim() {
        return Err(Error::shape(format!("latent dims {} vs {}", z1.dim(), z2.dim())));
    }
    let num = norm_distance(&t1.to_f64(), &t2.to_f64(), norm);
    let den = norm_distance(&z1.values, &z2.values, Norm::L1) + eps;
    Ok(num / den)
}

/// Graph-side loss builders. All return scalars averaged over the batch.
pub mod graph {
    use super::*;

    fn per_example<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let sh = g.shape(x).to_vec();
        let rest: usize = sh[1..].iter().product();
        Ok(g.reshape(x, &[sh[0], rest])?)
    }

    /// Per-example distance `[B]` between two equally shaped batches.
    pub fn distance<T: Real>(g: &mut Graph<T>, a: Var, b: Var, norm: Norm) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape(format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        let d = g.sub(a, b)?;
        let d = per_example(g, d)?;
        match norm {
            Norm::L1 => {
                let a = g.abs(d);
                Ok(g.mean_axis(a, 1, false)?)
            }
            Norm::L2 => {
                let sq = g.square(d);
                let m = g.mean_axis(sq, 1, false)?;
                // Keeps the gradient finite at zero distance.
                let m = g.add_scalar(m, 1e-12);
                Ok(g.sqrt(m))
            }
        }
    }

    pub fn gan_d<T: Real>(g: &mut Graph<T>, real: Var, fake: Var) -> Result<Var> {
        let nr = g.neg(real);
        let a = g.softplus(nr);
        let b = g.softplus(fake);
        let s = g.add(a, b)?;
        Ok(g.mean_all(s))
    }

    pub fn gan_g<T: Real>(g: &mut Graph<T>, fake: Var, kind: GanGeneratorLoss) -> Var {
        match kind {
            GanGeneratorLoss::NonSaturating => {
                let nf = g.neg(fake);
                let l = g.softplus(nf);
                g.mean_all(l)
            }
            // log(1 − σ(f)) = −softplus(f)
            GanGeneratorLoss::Minimax => {
                let l = g.softplus(fake);
                let l = g.neg(l);
                g.mean_all(l)
            }
        }
    }

    pub fn rec<T: Real>(g: &mut Graph<T>, t_hat: Var, t: Var, norm: Norm) -> Result<Var> {
        let d = distance(g, t_hat, t, norm)?;
        Ok(g.mean_all(d))
    }

    pub fn kl<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
        let m2 = g.square(mu);
        let e = g.exp(logvar);
        let s = g.add(m2, e)?;
        let s = g.sub(s, logvar)?;
        let s = g.add_scalar(s, -1.0);
        let per = g.sum_axis(s, 1, false)?;
        let m = g.mean_all(per);
        Ok(g.scale(m, 0.5))
    }

    pub fn lat<T: Real>(g: &mut Graph<T>, z: Var, z_hat: Var) -> Result<Var> {
        let d = distance(g, z, z_hat, Norm::L1)?;
        Ok(g.mean_all(d))
    }

    pub fn dist<T: Real>(
        g: &mut Graph<T>,
        t1: Var,
        t2: Var,
        z1: Var,
        z2: Var,
        eps: f64,
        norm: Norm,
    ) -> Result<Var> {
        let num = distance(g, t1, t2, norm)?;
        let den = distance(g, z1, z2, Norm::L1)?;
        let den = g.add_scalar(den, eps);
        let r = g.div(num, den)?;
        Ok(g.mean_all(r))
    }

    /// Graph nodes of the generator-side terms; `None` marks an inactive
    /// path.
    #[derive(Debug, Clone, Copy, Default)]
    pub struct Terms {
        pub gan_enc: Option<Var>,
        pub gan_sam: Option<Var>,
        pub rec: Option<Var>,
        pub kl: Option<Var>,
        pub lat: Option<Var>,
        pub dist: Option<Var>,
    }

    /// Weighted generator total, mirroring [`super::compose_total`].
    pub fn total<T: Real>(g: &mut Graph<T>, t: &Terms, w: &LossWeights) -> Result<Var> {
        let mut acc = g.scalar_constant(T::zero());
        let items = [
            (t.gan_enc, w.lambda_1),
            (t.rec, w.lambda_1 * w.lambda_rec),
            (t.kl, w.lambda_1 * w.lambda_kl),
            (t.gan_sam, w.lambda_2),
            (t.lat, w.lambda_2 * w.lambda_lat),
            (t.dist, -w.lambda_3),
        ];
        for (v, k) in items {
            if let Some(v) = v {
                if k != 0.0 {
                    let s = g.scale(v, k);
                    acc = g.add(acc, s)?;
                }
            }
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(l: f64) -> DiscriminatorScore {
        DiscriminatorScore { logit: l }
    }

    #[test]
    fn gan_at_half() {
        let (d, g) = loss_gan(score(0.0), score(0.0));
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((g - 2f64.ln()).abs() < 1e-12);
        let (d, _) = loss_gan(score(40.0), score(-40.0));
        assert!(d < 1e-15);
    }

    #[test]
    fn compose_examples() {
        let p = LossParts {
            gan_d: 0.0,
            gan_enc: 1.0,
            rec: 2.0,
            kl: 3.0,
            gan_sam: 4.0,
            lat: 5.0,
            dist: 6.0,
        };
        let ones = LossWeights {
            lambda_rec: 1.0,
            lambda_kl: 1.0,
            lambda_lat: 1.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 1.0,
        };
        let b = compose_total(&p, &ones);
        assert_eq!((b.total_vae, b.total_lat, b.total), (6.0, 9.0, 9.0));
        let only_gan = LossWeights {
            lambda_rec: 0.0,
            lambda_kl: 0.0,
            lambda_lat: 0.0,
            lambda_1: 1.0,
            lambda_2: 0.0,
            lambda_3: 0.0,
        };
        assert_eq!(compose_total(&p, &only_gan).total, 1.0);
    }

    #[test]
    fn kl_closed_form_values() {
        let zero = GaussianLatent {
            mu: vec![0.0; 4],
            logvar: vec![0.0; 4],
        };
        assert_eq!(loss_kl(&zero), 0.0);
        let one = GaussianLatent {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(loss_kl(&one), 0.5);
    }

    #[test]
    fn rec_and_latent_examples() {
        let t = Sample::image(1, 1, 2, vec![0.0, 0.25]).unwrap();
        let t5 = Sample::image(1, 1, 2, vec![0.5, 0.75]).unwrap();
        assert_eq!(loss_rec(&t, &t, Norm::L1).unwrap(), 0.0);
        assert_eq!(loss_rec(&t5, &t, Norm::L1).unwrap(), 0.5);
        let zs = LatentCode::new(vec![1.0, -1.0], LatentOrigin::SampledPrior).unwrap();
        let zh = LatentCode::new(vec![0.0, 0.0], LatentOrigin::EncodedReference).unwrap();
        assert_eq!(loss_latent_regression(&zs, &zh).unwrap(), 1.0);
        assert!(loss_latent_regression(&zh, &zs).is_err());
    }

    #[test]
    fn distance_examples() {
        let a = Sample::sequence(1, 2, vec![0.0, 0.0]).unwrap();
        let b = Sample::sequence(1, 2, vec![2.0, -2.0]).unwrap();
        let z1 = LatentCode::new(vec![0.0], LatentOrigin::SampledPrior).unwrap();
        let z2 = LatentCode::new(vec![1.0], LatentOrigin::EncodedReference).unwrap();
        let d = loss_distance_reg(&a, &b, &z1, &z2, 1e-9, Norm::L1).unwrap();
        assert!((d - 2.0).abs() < 1e-8);
        assert_eq!(loss_distance_reg(&a, &a, &z1, &z2, 1e-9, Norm::L1).unwrap(), 0.0);
        let same = loss_distance_reg(&a, &b, &z1, &z1, 1e-3, Norm::L1).unwrap();
        assert!((same - 2000.0).abs() < 1e-9);
        assert!(loss_distance_reg(&a, &b, &z1, &z2, 0.0, Norm::L1).is_err());
    }
}
