//! Alignment, reconstruction and scoring losses. KL terms are summed over
//! latent dimensions and averaged over the batch; Huber terms are means
//! over all entries.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{huber_mean, normalize_rows, Activation, Reduce, Tape, Tensor};

/// Diagonal Gaussian parameterized by mean and log standard deviation,
/// one distribution per row.
#[derive(Clone, Debug)]
pub struct Gaussian {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl Gaussian {
    pub fn standard(rows: usize, cols: usize) -> Self {
        Gaussian {
            mu: Tensor::constant(Array2::zeros((rows, cols))),
            log_sigma: Tensor::constant(Array2::zeros((rows, cols))),
        }
    }

    /// Constant Gaussian from a standard deviation, which must be positive.
    pub fn from_sigma(mu: Array2<f64>, sigma: Array2<f64>) -> Result<Self> {
        if mu.dim() != sigma.dim() {
            return Err(Error::shape("gaussian", "mean and sigma shapes differ"));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::invalid(format!("standard deviation must be positive, got {s}")));
        }
        Ok(Gaussian {
            mu: Tensor::constant(mu),
            log_sigma: Tensor::constant(sigma.mapv(f64::ln)),
        })
    }

    pub fn sigma(&self, tape: &Tape) -> Result<Tensor> {
        tape.exp(&self.log_sigma)
    }

    fn variance(&self, tape: &Tape) -> Result<Tensor> {
        tape.exp(&tape.scale(&self.log_sigma, 2.0)?)
    }

    fn rows(&self) -> usize {
        self.mu.shape().0
    }
}

fn batch_sum(tape: &Tape, elem: &Tensor, rows: usize) -> Result<Tensor> {
    tape.scale(&tape.sum(elem)?, 1.0 / rows as f64)
}

/// `KL(p ‖ q)`.
pub fn kl(tape: &Tape, p: &Gaussian, q: &Gaussian) -> Result<Tensor> {
    let log_ratio = tape.sub(&q.log_sigma, &p.log_sigma)?;
    let diff = tape.act(&tape.sub(&p.mu, &q.mu)?, Activation::Square)?;
    let num = tape.add(&p.variance(tape)?, &diff)?;
    let frac = tape.div(&num, &tape.scale(&q.variance(tape)?, 2.0)?)?;
    let elem = tape.offset(&tape.add(&log_ratio, &frac)?, -0.5)?;
    batch_sum(tape, &elem, p.rows())
}

/// `KL(p ‖ N(0, I))`.
pub fn kl_standard(tape: &Tape, p: &Gaussian) -> Result<Tensor> {
    let sq = tape.act(&p.mu, Activation::Square)?;
    let half = tape.scale(&tape.add(&p.variance(tape)?, &sq)?, 0.5)?;
    let elem = tape.offset(&tape.sub(&half, &p.log_sigma)?, -0.5)?;
    batch_sum(tape, &elem, p.rows())
}

/// Jensen-Shannon divergence with the mixture replaced by its
/// moment-matched Gaussian `M`, which reduces to
/// `½ Σ ln(var_M / (σ_p σ_q))` per row.
pub fn js(tape: &Tape, p: &Gaussian, q: &Gaussian) -> Result<Tensor> {
    let diff = tape.act(&tape.sub(&p.mu, &q.mu)?, Activation::Square)?;
    let var_m = tape.add(
        &tape.scale(&tape.add(&p.variance(tape)?, &q.variance(tape)?)?, 0.5)?,
        &tape.scale(&diff, 0.25)?,
    )?;
    let log_m = tape.act(&var_m, Activation::Log)?;
    let elem = tape.sub(&log_m, &tape.add(&p.log_sigma, &q.log_sigma)?)?;
    batch_sum(tape, &tape.scale(&elem, 0.5)?, p.rows())
}

/// Reconstruction from both latents plus agreement between the two
/// reconstructions.
pub fn loss_rec(tape: &Tape, x: &Tensor, from_motion: &Tensor, from_text: &Tensor, delta: f64) -> Result<Tensor> {
    let a = huber_mean(tape, from_text, x, delta)?;
    let b = huber_mean(tape, from_motion, x, delta)?;
    let c = huber_mean(tape, from_motion, from_text, delta)?;
    tape.add(&tape.add(&a, &b)?, &c)
}

/// Symmetric KL between the two posteriors plus KL of each to the prior.
pub fn loss_kl(tape: &Tape, q_text: &Gaussian, q_motion: &Gaussian) -> Result<Tensor> {
    let parts = [
        kl(tape, q_text, q_motion)?,
        kl(tape, q_motion, q_text)?,
        kl_standard(tape, q_motion)?,
        kl_standard(tape, q_text)?,
    ];
    let mut total = parts[0].clone();
    for p in &parts[1..] {
        total = tape.add(&total, p)?;
    }
    Ok(total)
}

pub fn loss_lat(tape: &Tape, z_motion: &Tensor, z_text: &Tensor, delta: f64) -> Result<Tensor> {
    huber_mean(tape, z_motion, z_text, delta)
}

/// Symmetric InfoNCE over cosine similarities: row `i` of `a` should match
/// row `i` of `b` against every other row, and vice versa.
pub fn loss_infonce(tape: &Tape, a: &Tensor, b: &Tensor, tau: f64) -> Result<Tensor> {
    if a.shape() != b.shape() || a.shape().0 == 0 {
        return Err(Error::shape("infonce", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    for t in [a, b] {
        if t.value().rows().into_iter().any(|r| r.dot(&r) == 0.0) {
            return Err(Error::invalid("infonce needs nonzero rows"));
        }
    }
    let n = a.shape().0;
    let an = normalize_rows(tape, a)?;
    let bn = normalize_rows(tape, b)?;
    let logits = tape.scale(&tape.matmul(&an, &tape.transpose(&bn)?)?, 1.0 / tau)?;
    let eye = Tensor::constant(Array2::eye(n));
    let diag = tape.sum(&tape.mul(&logits, &eye)?)?;
    let lse_rows = tape.sum(&tape.reduce(&logits, Reduce::LogSumExpRows)?)?;
    let lse_cols = tape.sum(&tape.reduce(&tape.transpose(&logits)?, Reduce::LogSumExpRows)?)?;
    let total = tape.sub(&tape.add(&lse_rows, &lse_cols)?, &tape.scale(&diag, 2.0)?)?;
    tape.scale(&total, 1.0 / n as f64)
}

/// Weighted parts of cross-representation alignment.
#[derive(Clone, Debug)]
pub struct CraParts {
    pub huber: Tensor,
    pub js: Tensor,
    pub infonce: Tensor,
    pub total: Tensor,
}

#[allow(clippy::too_many_arguments)]
pub fn loss_cra(
    tape: &Tape,
    z1: &Tensor,
    z2: &Tensor,
    q1: &Gaussian,
    q2: &Gaussian,
    alpha: [f64; 3],
    tau: f64,
    delta: f64,
) -> Result<CraParts> {
    let huber = huber_mean(tape, z1, z2, delta)?;
    let js = js(tape, q1, q2)?;
    let infonce = loss_infonce(tape, z1, z2, tau)?;
    let total = tape.add(
        &tape.add(&tape.scale(&huber, alpha[0])?, &tape.scale(&js, alpha[1])?)?,
        &tape.scale(&infonce, alpha[2])?,
    )?;
    Ok(CraParts {
        huber,
        js,
        infonce,
        total,
    })
}

/// Unweighted components of the semantic objective and their weighted sum.
#[derive(Clone, Debug)]
pub struct SemanticParts {
    pub rec: Tensor,
    pub kl: Tensor,
    pub lat: Tensor,
    pub cl: Tensor,
    pub cra: Tensor,
    pub total: Tensor,
}

pub fn combine_semantic(
    tape: &Tape,
    rec: Tensor,
    kl: Tensor,
    lat: Tensor,
    cl: Tensor,
    cra: Tensor,
    lambda: [f64; 4],
) -> Result<SemanticParts> {
    let mut total = rec.clone();
    for (part, w) in [(&kl, lambda[0]), (&lat, lambda[1]), (&cl, lambda[2]), (&cra, lambda[3])] {
        total = tape.add(&total, &tape.scale(part, w)?)?;
    }
    Ok(SemanticParts {
        rec,
        kl,
        lat,
        cl,
        cra,
        total,
    })
}

/// `−log σ(s_w − s_l)`, averaged over rows.
pub fn loss_pref(tape: &Tape, winner: &Tensor, loser: &Tensor) -> Result<Tensor> {
    let neg_margin = tape.sub(loser, winner)?;
    tape.mean(&tape.act(&neg_margin, Activation::Softplus)?)
}

/// Binary cross-entropy of classifier logits, label 1 for real motions.
pub fn loss_auth(tape: &Tape, logits: &Tensor, is_real: &[bool]) -> Result<Tensor> {
    if logits.shape() != (is_real.len(), 1) {
        return Err(Error::shape("auth loss", "one logit per example required"));
    }
    let sign = Array2::from_shape_fn((is_real.len(), 1), |(i, _)| if is_real[i] { -1.0 } else { 1.0 });
    let signed = tape.mul(logits, &Tensor::constant(sign))?;
    tape.mean(&tape.act(&signed, Activation::Softplus)?)
}

/// Preference loss for a single score margin.
pub fn pref_value(margin: f64) -> f64 {
    crate::graph::softplus(-margin)
}

/// Binary cross-entropy for a probability `p` of being real.
pub fn bce(p: f64, is_real: bool) -> f64 {
    if is_real {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
