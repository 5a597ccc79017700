//! Pessimistic offline learning: value iteration with lower confidence
//! bounds (VI-LCB) under the Bernstein-style penalty, plus single-policy
//! concentrability diagnostics.

use ndarray::{Array1, Array2, ArrayView1};

use crate::envs::TransitionDataset;
use crate::error::{Error, Result};
use crate::mdp::{self, DiscountedMdp, Distribution, Policy, QTable};

/// Parameters of the Bernstein-style penalty.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyConfig {
    pub c_b: f64,
    pub delta: f64,
    /// Total dataset size `N`.
    pub total_samples: u64,
    pub discount: f64,
}

impl PenaltyConfig {
    pub fn new(c_b: f64, delta: f64, total_samples: u64, discount: f64) -> Result<Self> {
        if !(c_b.is_finite() && c_b > 0.0) {
            return Err(Error::arg(format!("c_b = {c_b} must be positive")));
        }
        if !(0.0 < delta && delta < 1.0) {
            return Err(Error::arg(format!("delta = {delta} outside (0, 1)")));
        }
        if total_samples == 0 {
            return Err(Error::arg("total sample count N must be at least 1"));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::arg(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            c_b,
            delta,
            total_samples,
            discount,
        })
    }

    /// `log(N / ((1 - gamma) delta))`.
    pub fn log_term(&self) -> f64 {
        (self.total_samples as f64 / ((1.0 - self.discount) * self.delta)).ln()
    }

    /// Iteration count `ceil(log(N / (1 - gamma)) / log(1 / gamma))`
    /// sufficient for `1/N` accuracy to the fixed point.
    pub fn suggested_tau_max(&self) -> usize {
        let n = self.total_samples as f64;
        let num = (n / (1.0 - self.discount)).ln();
        let den = (1.0 / self.discount).ln();
        (num / den).ceil().max(1.0) as usize
    }
}

/// Bernstein penalty for one pair:
/// `min{ max{ sqrt(c_b L Var_{p_hat}(v) / n), 2 c_b L / ((1 - gamma) n) }, 1/(1 - gamma) } + 5/N`
/// with `L = log(N / ((1 - gamma) delta))`. Unvisited pairs (`n = 0`) take
/// the divergent limit and clamp to `1/(1 - gamma) + 5/N`.
pub fn bernstein_penalty(
    cfg: &PenaltyConfig,
    n_sa: u64,
    p_hat_row: ArrayView1<'_, f64>,
    v: ArrayView1<'_, f64>,
) -> f64 {
    let horizon = 1.0 / (1.0 - cfg.discount);
    let tail = 5.0 / cfg.total_samples as f64;
    if n_sa == 0 {
        return horizon + tail;
    }
    let l = cfg.log_term();
    let n = n_sa as f64;
    let var = mdp::variance(p_hat_row, v).unwrap_or(0.0);
    let bernstein = (cfg.c_b * l * var / n).sqrt();
    let floor = 2.0 * cfg.c_b * l / ((1.0 - cfg.discount) * n);
    bernstein.max(floor).min(horizon) + tail
}

/// Pessimistic Bellman operator with an arbitrary penalty rule:
/// `T_pe(Q)(s, a) = max{ r(s, a) + gamma p_hat_{s,a} v - b(s, a; v), 0 }`
/// where `v(s) = max_a Q(s, a)`.
pub fn pessimistic_bellman_with<F>(
    q: &QTable,
    p_hat: &Array2<f64>,
    reward: &Array2<f64>,
    discount: f64,
    penalty: F,
) -> QTable
where
    F: Fn(usize, usize, ArrayView1<'_, f64>) -> f64,
{
    let (s_n, a_n) = reward.dim();
    let v: Array1<f64> = q
        .values()
        .rows()
        .into_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut out = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let row = p_hat.row(s * a_n + a);
            let expect: f64 = row.iter().zip(&v).map(|(p, vv)| p * vv).sum();
            let b = penalty(s, a, v.view());
            out[(s, a)] = (reward[(s, a)] + discount * expect - b).max(0.0);
        }
    }
    QTable::new(out)
}

/// Pessimistic Bellman operator with the Bernstein penalty recomputed from
/// the current value estimate.
pub fn pessimistic_bellman(
    q: &QTable,
    p_hat: &Array2<f64>,
    reward: &Array2<f64>,
    discount: f64,
    cfg: &PenaltyConfig,
    visits: &Array1<u64>,
) -> QTable {
    let a_n = reward.ncols();
    pessimistic_bellman_with(q, p_hat, reward, discount, |s, a, v| {
        bernstein_penalty(cfg, visits[s * a_n + a], p_hat.row(s * a_n + a), v)
    })
}

/// Offline value iteration with LCB: applies the pessimistic operator
/// `tau_max` times from the all-zero table and returns the greedy policy of
/// the final iterate.
pub fn vi_lcb(
    ds: &TransitionDataset,
    reward: &Array2<f64>,
    discount: f64,
    cfg: &PenaltyConfig,
    tau_max: usize,
) -> Result<(Policy, QTable)> {
    if reward.dim() != (ds.num_states(), ds.num_actions()) {
        return Err(Error::dim("reward table does not match dataset dimensions"));
    }
    if tau_max == 0 {
        return Err(Error::arg("tau_max must be at least 1"));
    }
    let p_hat = ds.empirical_kernel();
    let mut q = QTable::zeros(ds.num_states(), ds.num_actions());
    for _ in 0..tau_max {
        q = pessimistic_bellman(&q, &p_hat, reward, discount, cfg, ds.visit_counts());
    }
    Ok((mdp::greedy_policy(&q), q))
}

/// Single-policy concentrability coefficient
/// `C* = max_{(s,a)} d*(s, a) / d_b(s, a)` with `d* = occupancy(mdp, pi*, rho)`.
/// The clipped variant replaces the numerator by `min{d*(s, a), 1/S}`.
/// Pairs never visited by `pi*` contribute nothing; a pair with positive
/// `d*` but zero behavior mass yields infinity.
pub fn concentrability(
    mdp: &DiscountedMdp,
    pi_star: &Policy,
    rho: &Distribution,
    behavior: &Distribution,
    clipped: bool,
) -> Result<f64> {
    let pairs = mdp.num_states() * mdp.num_actions();
    if behavior.len() != pairs {
        return Err(Error::dim(
            "behavior distribution must cover all (s, a) pairs",
        ));
    }
    let d_star = mdp::occupancy(mdp, pi_star, rho)?;
    let cap = 1.0 / mdp.num_states() as f64;
    let mut worst: f64 = 0.0;
    for idx in 0..pairs {
        let mut num = d_star.probs()[idx];
        if clipped {
            num = num.min(cap);
        }
        if num == 0.0 {
            continue;
        }
        let den = behavior.probs()[idx];
        if den == 0.0 {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(num / den);
    }
    Ok(worst)
}
