//! The four-term objective: per-level adversarial losses for the
//! discriminators, and adversarial + fidelity + reconstruction terms for the
//! generator.

use crate::error::{Error, Result};
use crate::nn::{Graph, Scalar, Var};

use super::model::{self, NeganModel};

/// How the generator's adversarial term is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvMode {
    /// -mean log D(fake): the standard non-saturating surrogate (default)
    NonSaturating,
    /// +mean log(1 - D(fake)): the literal minimax objective
    Minimax,
}

/// Loss weights; fidelity pulls G(x0, k*n0) toward x0, reconstruction pins
/// G(x0, 0) to x0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_fid: f64,
    pub lambda_rec: f64,
    pub adv: AdvMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fid: 10.0,
            lambda_rec: 10.0,
            adv: AdvMode::NonSaturating,
        }
    }
}

/// Binary cross-entropy for discriminator j over already-built graph nodes:
/// -mean log D(real) - mean log(1 - D(fake)).
pub fn discriminator_bce<S: Scalar>(g: &mut Graph<S>, d_real: Var, d_fake: Var) -> Var {
    let lr = g.mean_log(d_real);
    let lf = g.mean_log1m(d_fake);
    let lr = g.scale(lr, -1.0);
    let lf = g.scale(lf, -1.0);
    g.add(lr, lf)
}

/// Discriminator loss for level j: real targets vs freshly generated fakes
/// (the generator is treated as a constant input here, so only D's
/// parameters receive gradients).
pub fn discriminator_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &NeganModel<S>,
    j: usize,
    real: Var,
    fake: Var,
) -> Result<Var> {
    if j >= model.s_levels() {
        return Err(Error::Invalid(format!(
            "level {j} has no discriminator (model has {})",
            model.s_levels()
        )));
    }
    let d_real = model::discriminator_forward(g, &model.discs[j], &model.arch, real);
    let d_fake = model::discriminator_forward(g, &model.discs[j], &model.arch, fake);
    Ok(discriminator_bce(g, d_real, d_fake))
}

/// The generator objective split into its graph nodes so callers can log
/// the raw (unweighted) terms.
pub struct GeneratorTerms {
    pub total: Var,
    pub adv: Var,
    /// mean|x0 - G(x0, k_j n0)| before weighting
    pub fid: Var,
    /// mean|x0 - G(x0, 0)| before weighting
    pub rec: Var,
    pub fake: Var,
}

/// Generator loss restricted to level j plus the always-on k = 0
/// reconstruction term:
///   adv_j + lambda_fid * mean|x0 - G(x0, k_j n0)| + lambda_rec * mean|x0 - G(x0, 0)|
/// `input_kj` and `input_zero` are the (N, 2, H, W) generator inputs at
/// factor k_j and 0; `x0` is the normalized clean batch (N, 1, H, W).
pub fn generator_loss_terms<S: Scalar>(
    g: &mut Graph<S>,
    model: &NeganModel<S>,
    j: usize,
    input_kj: Var,
    input_zero: Var,
    x0: Var,
    weights: &LossWeights,
) -> Result<GeneratorTerms> {
    if j >= model.s_levels() {
        return Err(Error::Invalid(format!(
            "level {j} has no discriminator (model has {})",
            model.s_levels()
        )));
    }
    let fake = model::generator_forward(g, &model.gen, &model.arch, input_kj);
    let recon = model::generator_forward(g, &model.gen, &model.arch, input_zero);
    let d_fake = model::discriminator_forward(g, &model.discs[j], &model.arch, fake);

    let adv = match weights.adv {
        AdvMode::NonSaturating => {
            let l = g.mean_log(d_fake);
            g.scale(l, -1.0)
        }
        AdvMode::Minimax => g.mean_log1m(d_fake),
    };
    let fid = g.mean_abs_diff(x0, fake);
    let rec = g.mean_abs_diff(x0, recon);
    let wfid = g.scale(fid, weights.lambda_fid);
    let wrec = g.scale(rec, weights.lambda_rec);
    let t = g.add(adv, wfid);
    let total = g.add(t, wrec);
    Ok(GeneratorTerms {
        total,
        adv,
        fid,
        rec,
        fake,
    })
}

pub fn generator_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &NeganModel<S>,
    j: usize,
    input_kj: Var,
    input_zero: Var,
    x0: Var,
    weights: &LossWeights,
) -> Result<Var> {
    generator_loss_terms(g, model, j, input_kj, input_zero, x0, weights).map(|t| t.total)
}
