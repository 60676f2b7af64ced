//! Routing-aware training objective: probability clamping, the
//! confidence-weighted task loss, and the exploration / exploitation
//! auxiliaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

pub const DEFAULT_CLAMP_FLOOR: f64 = 0.05;
pub const DEFAULT_C1: f64 = 0.1;
pub const DEFAULT_C2: f64 = 0.01;

/// Rejects floors that would make a clamped distribution over `k` orders
/// exceed one everywhere.
pub fn check_floor(floor: f64, k: usize) -> Result<()> {
    if !(floor >= 0.0) || floor * k as f64 >= 1.0 {
        return Err(Error::Config(format!(
            "clamp floor {floor} is incompatible with {k} orders"
        )));
    }
    Ok(())
}

/// Entry-wise `max(p, floor)` without renormalization.
pub fn clamp_probs(pi: &[f64], floor: f64) -> Result<Vec<f64>> {
    check_floor(floor, pi.len())?;
    Ok(pi.iter().map(|&p| p.max(floor)).collect())
}

/// Graph version of [`clamp_probs`] for a `[B, K]` (or `[K]`) tensor.
pub fn clamp_probs_var<F: Element>(g: &mut Graph<F>, pi: Var, floor: f64) -> Result<Var> {
    let k = *g.shape(pi).last().unwrap_or(&0);
    check_floor(floor, k)?;
    Ok(g.clamp_min(pi, floor)?)
}

fn batch_and_k<F: Element>(g: &Graph<F>, pis: Var, what: &'static str) -> Result<(usize, usize)> {
    match *g.shape(pis) {
        [b, k] if b > 0 && k > 0 => Ok((b, k)),
        [0, _] => Err(Error::EmptyBatch(what)),
        ref s => Err(Error::Dimension(format!("{what}: expected [B, K], got {s:?}"))),
    }
}

/// `KL(uniform || m / Σm)` where `m` is the batch-mean clamped routing
/// distribution. Dividing by `Σm` keeps the divergence proper when the
/// floor has lifted the total above one; for unclamped inputs it is
/// `-(1/K) Σ_k log m_k - log K`.
pub fn exploration_loss<F: Element>(g: &mut Graph<F>, pis: Var) -> Result<Var> {
    batch_and_k(g, pis, "exploration_loss")?;
    let mean = g.mean_axis(pis, 0)?;
    let logs = g.log(mean)?;
    let avg_log = g.mean_all(logs)?;
    let avg = g.mean_all(mean)?;
    let log_avg = g.log(avg)?;
    Ok(g.sub(log_avg, avg_log)?)
}

/// `-mean_b KL(uniform || pi_b / Σpi_b)`; for unclamped inputs this is
/// `mean_{b,k} log pi_bk + log K`.
pub fn exploitation_loss<F: Element>(g: &mut Graph<F>, pis: Var) -> Result<Var> {
    batch_and_k(g, pis, "exploitation_loss")?;
    let logs = g.log(pis)?;
    let avg_log = g.mean_all(logs)?;
    let row_mean = g.mean_axis(pis, 1)?;
    let log_row_mean = g.log(row_mean)?;
    let norm = g.mean_all(log_row_mean)?;
    Ok(g.sub(avg_log, norm)?)
}

/// Batch mean of `Σ_m Σ_n γ_bm λ_bn L_b^{m,n}`.
///
/// `path_losses[m][n]` holds per-instance losses of shape `[B]`. A missing
/// weight matrix means that side has a single order with weight one.
pub fn weighted_task_loss<F: Element>(
    g: &mut Graph<F>,
    path_losses: &[Vec<Var>],
    gamma: Option<Var>,
    lambda: Option<Var>,
) -> Result<Var> {
    let m = path_losses.len();
    let n = path_losses.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || path_losses.iter().any(|row| row.len() != n) {
        return Err(Error::Dimension(format!("path loss grid is not rectangular ({m} rows)")));
    }
    let batch = g.shape(path_losses[0][0])[0];
    for (side, w, k) in [("encoder", gamma, m), ("decoder", lambda, n)] {
        match w {
            Some(w) if g.shape(w) != [batch, k] => {
                return Err(Error::Dimension(format!(
                    "{side} weights {:?} do not match batch {batch} x {k} orders",
                    g.shape(w)
                )))
            }
            None if k != 1 => {
                return Err(Error::Dimension(format!("{side} has {k} orders but no weights")));
            }
            _ => {}
        }
    }

    let mut acc: Option<Var> = None;
    for (mi, row) in path_losses.iter().enumerate() {
        let gm = gamma.map(|w| g.select_col(w, mi)).transpose()?;
        for (ni, &loss) in row.iter().enumerate() {
            let ln = lambda.map(|w| g.select_col(w, ni)).transpose()?;
            let weight = match (gm, ln) {
                (Some(a), Some(b)) => Some(g.mul(a, b)?),
                (a, b) => a.or(b),
            };
            let term = match weight {
                Some(w) => g.mul(loss, w)?,
                None => loss,
            };
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
    }
    let per_instance = acc.expect("grid is non-empty");
    Ok(g.mean_all(per_instance)?)
}

/// Scalar loss components recorded for one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    /// Batch-mean loss of every (encoder order, decoder order) path.
    pub path_losses: Vec<Vec<f64>>,
    pub l_c: f64,
    pub l_d_enc: f64,
    pub l_d_dec: f64,
    pub l_s_enc: f64,
    pub l_s_dec: f64,
    pub total: f64,
    pub c1: f64,
    pub c2: f64,
    pub clamp_floor: f64,
}

impl LossBundle {
    /// `l_c + c1 (l_d_enc + l_d_dec) + c2 (l_s_enc + l_s_dec)`.
    pub fn combine(&self) -> f64 {
        total_loss(self.l_c, self.l_d_enc + self.l_d_dec, self.l_s_enc + self.l_s_dec, self.c1, self.c2)
    }
}

pub fn total_loss(l_c: f64, l_d: f64, l_s: f64, c1: f64, c2: f64) -> f64 {
    l_c + c1 * l_d + c2 * l_s
}

/// Graph version of [`total_loss`]; absent auxiliaries contribute zero.
pub fn total_loss_var<F: Element>(
    g: &mut Graph<F>,
    l_c: Var,
    l_d: &[Var],
    l_s: &[Var],
    c1: f64,
    c2: f64,
) -> Result<Var> {
    let mut total = l_c;
    for (terms, c) in [(l_d, c1), (l_s, c2)] {
        if c == 0.0 {
            continue;
        }
        for &t in terms {
            let scaled = g.scale(t, c)?;
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}
