//! Training losses.
//!
//! Discriminator outputs are logits; probabilities are `sigmoid(logit)` and
//! every logarithm is taken of a probability floored at [`LOG_FLOOR`].

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gan::discriminator::Logits;
use crate::tensor::{Graph, Scalar, Var};

pub const LOG_FLOOR: f64 = 1e-12;

/// `log(max(σ(logit), floor))`.
fn log_prob<S: Scalar>(g: &mut Graph<S>, logit: Var) -> Result<Var> {
    let p = g.sigmoid(logit);
    let p = g.clamp_min(p, LOG_FLOOR);
    g.log(p)
}

/// `log(max(1 − σ(logit), floor))`.
fn log_one_minus_prob<S: Scalar>(g: &mut Graph<S>, logit: Var) -> Result<Var> {
    let p = g.sigmoid(logit);
    let q = g.one_minus(p);
    let q = g.clamp_min(q, LOG_FLOOR);
    g.log(q)
}

fn batch_mean<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let all = g.concat(terms, 0)?;
    Ok(g.mean(all))
}

/// `−½ [log D(x) + log D(x, s)]`, averaged over the batch of fake logits.
pub fn generator_adv_loss<S: Scalar>(g: &mut Graph<S>, fake: &[Logits]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for l in fake {
        let a = log_prob(g, l.uncond)?;
        let c = log_prob(g, l.cond)?;
        let s = g.add(a, c)?;
        terms.push(g.scale(s, -0.5));
    }
    batch_mean(g, &terms)
}

/// `−½ [log D(x_r) + log(1 − D(x_f)) + log D(x_r, s) + log(1 − D(x_f, s))]`,
/// batch-averaged.
///
/// With `mismatched` logits (real images paired with a wrong caption) the
/// conditional fake term becomes the mean of the fake and mismatched terms.
pub fn discriminator_loss<S: Scalar>(
    g: &mut Graph<S>,
    real: &[Logits],
    fake: &[Logits],
    mismatched: Option<&[Logits]>,
) -> Result<Var> {
    if real.len() != fake.len() || mismatched.is_some_and(|m| m.len() != real.len()) {
        return Err(Error::Contract("real, fake and mismatched batches must agree".into()));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (i, (r, f)) in real.iter().zip(fake).enumerate() {
        let a = log_prob(g, r.uncond)?;
        let b = log_one_minus_prob(g, f.uncond)?;
        let c = log_prob(g, r.cond)?;
        let mut d = log_one_minus_prob(g, f.cond)?;
        if let Some(m) = mismatched {
            let w = log_one_minus_prob(g, m[i].cond)?;
            let sum = g.add(d, w)?;
            d = g.scale(sum, 0.5);
        }
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        let s = g.add(ab, cd)?;
        terms.push(g.scale(s, -0.5));
    }
    batch_mean(g, &terms)
}

/// `B×B` cosine similarities between rows of `a` and rows of `b`.
pub fn cosine_similarity_matrix<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    let an = l2_normalize_rows(g, a)?;
    let bn = l2_normalize_rows(g, b)?;
    let bt = g.transpose(bn)?;
    g.matmul(an, bt)
}

fn l2_normalize_rows<S: Scalar>(g: &mut Graph<S>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.affine(ss, 1.0, 1e-12);
    let norm = g.sqrt(ss)?;
    let norm = g.expand(norm, &shape)?;
    g.div(x, norm)
}

/// Symmetric cross-entropy over a `B×B` score matrix whose diagonal holds the
/// matching pairs: mean row loss plus mean column loss.
pub fn match_loss_from_scores<S: Scalar>(g: &mut Graph<S>, scores: Var) -> Result<Var> {
    let shape = g.shape(scores).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Contract(format!("score matrix must be square, got {shape:?}")));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::Contract("matching loss needs a batch of at least 2".into()));
    }
    let mut eye = vec![S::ZERO; n * n];
    for i in 0..n {
        eye[i * n + i] = S::ONE;
    }
    let eye = g.constant(crate::tensor::Tensor::new(&[n, n], eye)?);
    let rows = g.log_softmax(scores, 1)?;
    let cols = g.log_softmax(scores, 0)?;
    let both = g.add(rows, cols)?;
    let picked = g.mul(both, eye)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Matching loss between paired image and sentence embeddings (`B×D` each):
/// cosine similarities scaled by `gamma`, then symmetric cross-entropy.
pub fn match_loss<S: Scalar>(g: &mut Graph<S>, images: Var, sentences: Var, gamma: f64) -> Result<Var> {
    if g.shape(images)[0] < 2 {
        return Err(Error::Contract("matching loss needs a batch of at least 2".into()));
    }
    let sims = cosine_similarity_matrix(g, images, sentences)?;
    let scaled = g.scale(sims, gamma);
    match_loss_from_scores(g, scaled)
}

/// `Σ_i L_{G_i} + λ₁·L_CA + λ₂·L_match`.
pub fn total_generator_loss<S: Scalar>(
    g: &mut Graph<S>,
    adversarial: &[Var],
    ca: Var,
    matching: Var,
    lambda_ca: f64,
    lambda_match: f64,
) -> Result<Var> {
    if lambda_ca < 0.0 || lambda_match < 0.0 {
        return Err(Error::Contract("loss weights must be non-negative".into()));
    }
    let mut terms = adversarial.to_vec();
    terms.push(g.scale(ca, lambda_ca));
    terms.push(g.scale(matching, lambda_match));
    let all = g.concat(&terms, 0)?;
    Ok(g.sum(all))
}

/// Scalar losses of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub step: usize,
    pub g_adv: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub ca_loss: f64,
    pub match_loss: f64,
    /// Matching loss of the encoders on real pairs.
    pub match_real: f64,
    pub total: f64,
}

impl LossReport {
    /// The weighted generator total recomputed from the parts.
    pub fn weighted_total(&self, lambda_ca: f64, lambda_match: f64) -> f64 {
        self.g_adv.iter().sum::<f64>() + lambda_ca * self.ca_loss + lambda_match * self.match_loss
    }

    pub fn is_finite(&self) -> bool {
        self.g_adv.iter().chain(&self.d_loss).all(|v| v.is_finite())
            && self.ca_loss.is_finite()
            && self.match_loss.is_finite()
            && self.total.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logit(g: &mut Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::new(&[1, 1], vec![v]).unwrap())
    }

    #[test]
    fn chance_level_losses() {
        let mut g = Graph::<f64>::new();
        let l = Logits {
            uncond: logit(&mut g, 0.0),
            cond: logit(&mut g, 0.0),
        };
        let ga = generator_adv_loss(&mut g, &[l, l]).unwrap();
        assert!((g.value(ga).item() - 2f64.ln()).abs() < 1e-12);
        let d = discriminator_loss(&mut g, &[l], &[l], None).unwrap();
        assert!((g.value(d).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_stay_finite() {
        let mut g = Graph::<f64>::new();
        let hi = logit(&mut g, 1e4);
        let lo = logit(&mut g, -1e4);
        let real = Logits { uncond: hi, cond: hi };
        let fake = Logits { uncond: lo, cond: lo };
        let d = discriminator_loss(&mut g, &[real], &[fake], None).unwrap();
        assert!(g.value(d).item().abs() < 1e-9);
        let gl = generator_adv_loss(&mut g, &[fake]).unwrap();
        let v = g.value(gl).item();
        assert!(v.is_finite() && (v - -(LOG_FLOOR.ln())).abs() < 1e-6);
    }

    #[test]
    fn match_loss_needs_two() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[1, 3], 1.0));
        assert!(matches!(match_loss(&mut g, a, a, 10.0), Err(Error::Contract(_))));
    }

    #[test]
    fn total_weights() {
        let mut g = Graph::<f64>::new();
        let adv = g.constant(Tensor::scalar(1.0));
        let ca = g.constant(Tensor::scalar(0.2));
        let m = g.constant(Tensor::scalar(0.1));
        let t = total_generator_loss(&mut g, &[adv], ca, m, 1.0, 5.0).unwrap();
        assert!((g.value(t).item() - 1.7).abs() < 1e-12);
        let t0 = total_generator_loss(&mut g, &[adv], ca, m, 0.0, 0.0).unwrap();
        assert_eq!(g.value(t0).item(), 1.0);
        assert!(total_generator_loss(&mut g, &[adv], ca, m, -1.0, 0.0).is_err());
    }
}
