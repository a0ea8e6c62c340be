use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::DecoderHead;

/// Upper bound on per-dimension posterior variance when clamping is on.
pub const VARIANCE_CEILING: f64 = 1e-2;

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLosses {
    pub reconstruction: f64,
    pub kl: f64,
    pub classification: f64,
    pub total: f64,
}

impl VaeLosses {
    pub(crate) fn accumulate(&mut self, other: &VaeLosses) {
        self.reconstruction += other.reconstruction;
        self.kl += other.kl;
        self.classification += other.classification;
        self.total += other.total;
    }

    pub(crate) fn scaled(&self, c: f64) -> VaeLosses {
        VaeLosses {
            reconstruction: self.reconstruction * c,
            kl: self.kl * c,
            classification: self.classification * c,
            total: self.total * c,
        }
    }
}

/// `-½ Σ (1 + log_var − mu² − exp(log_var))` averaged over rows.
pub fn kl_loss(mu: &[Vec<f64>], log_var: &[Vec<f64>]) -> Result<f64> {
    if mu.len() != log_var.len() || mu.is_empty() {
        return Err(Error::dim("kl_loss", &[mu.len()], &[log_var.len()]));
    }
    let mut total = 0.0;
    for (m, lv) in mu.iter().zip(log_var) {
        if m.len() != lv.len() {
            return Err(Error::dim("kl_loss", &[m.len()], &[lv.len()]));
        }
        let s: f64 = m.iter().zip(lv).map(|(&m, &lv)| m * m + lv.exp() - lv).sum();
        total += 0.5 * s - 0.5 * m.len() as f64;
    }
    Ok(total / mu.len() as f64)
}

pub fn covariance_clamp(log_var: &[f64]) -> Vec<f64> {
    let ceiling = VARIANCE_CEILING.ln();
    log_var.iter().map(|&x| x.min(ceiling)).collect()
}

/// KL of one row, on the tape.
pub(crate) fn kl_var<'t>(mu: Var<'t>, log_var: Var<'t>) -> Result<Var<'t>> {
    let d = mu.value().len() as f64;
    Ok(mu
        .square()
        .add(log_var.exp())?
        .sub(log_var)?
        .sum()
        .affine(0.5, -0.5 * d))
}

pub(crate) fn clamp_var(log_var: Var<'_>) -> Var<'_> {
    log_var.clamp_max(VARIANCE_CEILING.ln())
}

/// Negative log-softmax probability of `label`.
pub(crate) fn cross_entropy<'t>(logits: Var<'t>, label: usize) -> Result<Var<'t>> {
    Ok(logits.log_softmax_rows().pick(label)?.scale(-1.0))
}

/// Per-step targets `[dx, dy, lift, end]` in normalised units.
pub(crate) fn step_targets(rows: &[[f64; 3]]) -> Vec<[f64; 4]> {
    let n = rows.len();
    rows.iter()
        .enumerate()
        .map(|(i, r)| [r[0], r[1], r[2], if i + 1 == n { 1.0 } else { 0.0 }])
        .collect()
}

/// Summed binary cross-entropy with logits: `softplus(l) − y·l`.
fn bce_sum<'t>(tape: &'t Tape, logits: Var<'t>, targets: Tensor) -> Result<Var<'t>> {
    let y = tape.leaf(targets);
    logits.softplus().sum().sub(logits.mul(y)?.sum())
}

/// Reconstruction loss summed over steps for decoder outputs `out`.
/// The regression head scores offsets as a Gaussian with fixed deviation
/// `sigma`, dropping the constant normaliser so the term stays ≥ 0.
pub(crate) fn reconstruction<'t>(
    tape: &'t Tape,
    head: DecoderHead,
    sigma: f64,
    out: Var<'t>,
    targets: &[[f64; 4]],
) -> Result<Var<'t>> {
    let n = targets.len();
    let width = out.shape()[1];
    let flags = Tensor::new(vec![n, 2], targets.iter().flat_map(|t| [t[2], t[3]]).collect())?;
    let flag_loss = bce_sum(tape, out.slice_cols(width - 2, width)?, flags)?;
    let offset_loss = match head {
        DecoderHead::Regression => {
            let y = tape.leaf(Tensor::new(vec![n, 2], targets.iter().flat_map(|t| [t[0], t[1]]).collect())?);
            out.slice_cols(0, 2)?.sub(y)?.square().sum().scale(0.5 / (sigma * sigma))
        }
        DecoderHead::Mixture { components: k } => {
            let tx = tape.leaf(Tensor::new(
                vec![n, k],
                targets.iter().flat_map(|t| std::iter::repeat_n(t[0], k)).collect(),
            )?);
            let ty = tape.leaf(Tensor::new(
                vec![n, k],
                targets.iter().flat_map(|t| std::iter::repeat_n(t[1], k)).collect(),
            )?);
            let log_pi = out.slice_cols(0, k)?.log_softmax_rows();
            let mx = out.slice_cols(k, 2 * k)?;
            let my = out.slice_cols(2 * k, 3 * k)?;
            let lsx = out.slice_cols(3 * k, 4 * k)?;
            let lsy = out.slice_cols(4 * k, 5 * k)?;
            let zx = tx.sub(mx)?.mul(lsx.scale(-1.0).exp())?;
            let zy = ty.sub(my)?.mul(lsy.scale(-1.0).exp())?;
            // log π + log N(x) + log N(y), per component
            let joint = log_pi
                .sub(zx.square().add(zy.square())?.scale(0.5))?
                .sub(lsx.add(lsy)?)?
                .affine(1.0, -2.0 * HALF_LN_TAU);
            // logsumexp over components: a_0 − log_softmax(a)_0
            let lse = joint
                .slice_cols(0, 1)?
                .sub(joint.log_softmax_rows().slice_cols(0, 1)?)?;
            lse.sum().scale(-1.0)
        }
    };
    offset_loss.add(flag_loss)
}
