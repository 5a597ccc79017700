//! Learners that query a generative model: plain and perturbed model-based
//! planning, and synchronous Q-learning / TD learning with the
//! rescaled-linear or constant learning-rate schedules.

use ndarray::{Array1, Array2};

use crate::envs::{RngStream, RowSampler, TransitionDataset};
use crate::error::{Error, Result};
use crate::mdp::{self, DiscountedMdp, Policy, QTable, VTable};

/// Learning-rate schedules admissible for synchronous Q-learning and TD
/// learning. Natural logarithms throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `eta_t = 1 / (1 + c (1 - gamma) t / ln^3 T)`.
    RescaledLinear,
    /// `eta_t = 1 / (1 + c (1 - gamma) T / ln^3 T)` for every `t`.
    Constant,
}

#[derive(Debug, Clone, Copy)]
pub struct LearningRateSchedule {
    kind: ScheduleKind,
    c: f64,
    horizon_t: usize,
    discount: f64,
}

impl LearningRateSchedule {
    /// `c = 0` is allowed and yields the full step `eta_t = 1` everywhere,
    /// which the noise-free reduction tests rely on.
    pub fn new(kind: ScheduleKind, c: f64, horizon_t: usize, discount: f64) -> Result<Self> {
        if horizon_t < 2 {
            return Err(Error::arg("schedule horizon T must be at least 2"));
        }
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::arg(format!(
                "schedule coefficient c = {c} must be >= 0"
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::arg(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            kind,
            c,
            horizon_t,
            discount,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon_t
    }

    /// Emits `eta_t` for `0 <= t <= T`; always in `(0, 1]`.
    pub fn rate(&self, t: usize) -> Result<f64> {
        if t > self.horizon_t {
            return Err(Error::arg(format!(
                "t = {t} beyond schedule horizon T = {}",
                self.horizon_t
            )));
        }
        let log_t = (self.horizon_t as f64).ln();
        let log_cubed = log_t * log_t * log_t;
        let steps = match self.kind {
            ScheduleKind::RescaledLinear => t as f64,
            ScheduleKind::Constant => self.horizon_t as f64,
        };
        Ok(1.0 / (1.0 + self.c * (1.0 - self.discount) * steps / log_cubed))
    }
}

/// Uniform reward-perturbation settings for the perturbed model-based
/// planner. `xi = 0` disables perturbation; `seed` names the substream the
/// perturbation noise is drawn from.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationConfig {
    pub xi: f64,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn none() -> Self {
        PerturbationConfig { xi: 0.0, seed: 0 }
    }

    pub fn new(xi: f64, seed: u64) -> Result<Self> {
        if !(xi.is_finite() && xi >= 0.0) {
            return Err(Error::arg(format!(
                "perturbation size xi = {xi} must be >= 0"
            )));
        }
        Ok(PerturbationConfig { xi, seed })
    }

    /// Perturbation size `(1 - gamma) epsilon / (S^5 A^5)` with the leading
    /// universal constant taken to be 1.
    pub fn theorem_xi(epsilon: f64, discount: f64, num_states: usize, num_actions: usize) -> f64 {
        let s = num_states as f64;
        let a = num_actions as f64;
        (1.0 - discount) * epsilon / (s.powi(5) * a.powi(5))
    }
}

/// Adds i.i.d. `Unif(0, xi)` noise to every reward entry; all other model
/// fields are unchanged. Noise is drawn from `rng.split(cfg.seed)` row-major
/// over `(s, a)`.
pub fn perturb_rewards(
    mdp: &DiscountedMdp,
    cfg: &PerturbationConfig,
    rng: &RngStream,
) -> Result<DiscountedMdp> {
    if cfg.xi == 0.0 {
        return Ok(mdp.clone());
    }
    let mut noise = rng.split(cfg.seed);
    let perturbed = Array2::from_shape_fn(mdp.reward().dim(), |(s, a)| {
        mdp.reward()[(s, a)] + cfg.xi * noise.next_f64()
    });
    mdp.with_rewards_relaxed(perturbed)
}

/// Model-based policy learning: builds the empirical kernel from a
/// generative dataset, optionally perturbs the rewards, plans to
/// convergence on the empirical MDP and returns the greedy policy with its
/// Q-estimate.
pub fn model_based_plan(
    ds: &TransitionDataset,
    reward: &Array2<f64>,
    discount: f64,
    cfg: &PerturbationConfig,
) -> Result<(Policy, QTable)> {
    if reward.dim() != (ds.num_states(), ds.num_actions()) {
        return Err(Error::dim("reward table does not match dataset dimensions"));
    }
    let p_hat = ds.empirical_kernel();
    let mut empirical = DiscountedMdp::new(p_hat, reward.clone(), discount)?;
    if cfg.xi > 0.0 {
        empirical = perturb_rewards(&empirical, cfg, &RngStream::new(cfg.seed))?;
    }
    let (q, _) = mdp::solve_optimal(&empirical)?;
    Ok((mdp::greedy_policy(&q), q))
}

fn check_q_init(q0: &QTable, mdp: &DiscountedMdp) -> Result<()> {
    if q0.values().dim() != (mdp.num_states(), mdp.num_actions()) {
        return Err(Error::dim("q0 shape does not match mdp"));
    }
    let bound = mdp.value_bound();
    for &x in q0.values() {
        if !(0.0..=bound).contains(&x) {
            return Err(Error::arg(format!("q0 entry {x} outside [0, {bound}]")));
        }
    }
    Ok(())
}

/// Synchronous Q-learning (generative model). At iteration `t` one next
/// state is drawn for every pair from the substream `rng.split(t)` in
/// row-major `(s, a)` order, and all entries update at once:
/// `Q_t = (1 - eta_t) Q_{t-1} + eta_t (r + gamma max_a' Q_{t-1}(s', a'))`.
///
/// When `reference` is supplied, the sup-norm error against it is recorded
/// every `trace_every` iterations.
pub fn sync_q_learning_traced(
    mdp: &DiscountedMdp,
    sched: &LearningRateSchedule,
    iters: usize,
    q0: &QTable,
    rng: &RngStream,
    reference: Option<&QTable>,
    trace_every: usize,
) -> Result<(QTable, Vec<(usize, f64)>)> {
    check_q_init(q0, mdp)?;
    let s_n = mdp.num_states();
    let a_n = mdp.num_actions();
    let sampler = RowSampler::from_mdp(mdp);
    let mut q = q0.values().clone();
    let mut trace = Vec::new();
    let mut v = Array1::zeros(s_n);
    for t in 1..=iters {
        let eta = sched.rate(t)?;
        for s in 0..s_n {
            v[s] = q.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut draw = rng.split(t as u64);
        let mut next = Array2::zeros((s_n, a_n));
        for s in 0..s_n {
            for a in 0..a_n {
                let sp = sampler.sample(s * a_n + a, &mut draw);
                let target = mdp.reward()[(s, a)] + mdp.discount() * v[sp];
                next[(s, a)] = (1.0 - eta) * q[(s, a)] + eta * target;
            }
        }
        q = next;
        if let Some(q_star) = reference {
            if trace_every > 0 && t % trace_every == 0 {
                let err = crate::linalg::linf_diff(q.iter(), q_star.values().iter());
                trace.push((t, err));
            }
        }
    }
    Ok((QTable::new(q), trace))
}

pub fn sync_q_learning(
    mdp: &DiscountedMdp,
    sched: &LearningRateSchedule,
    iters: usize,
    q0: &QTable,
    rng: &RngStream,
) -> Result<QTable> {
    Ok(sync_q_learning_traced(mdp, sched, iters, q0, rng, None, 0)?.0)
}

/// Synchronous TD learning on a Markov reward process (an MDP with `A = 1`):
/// `V_t(s) = (1 - eta_t) V_{t-1}(s) + eta_t (r(s) + gamma V_{t-1}(s_t(s)))`.
/// Uses the same per-iteration substream layout as Q-learning, so with
/// `A = 1` both produce bitwise-identical iterates.
pub fn sync_td_learning(
    mrp: &DiscountedMdp,
    sched: &LearningRateSchedule,
    iters: usize,
    v0: &VTable,
    rng: &RngStream,
) -> Result<VTable> {
    if mrp.num_actions() != 1 {
        return Err(Error::arg(format!(
            "TD learning needs a Markov reward process (A = 1), got A = {}",
            mrp.num_actions()
        )));
    }
    if v0.values().len() != mrp.num_states() {
        return Err(Error::dim("v0 length does not match mrp"));
    }
    let bound = mrp.value_bound();
    for &x in v0.values() {
        if !(0.0..=bound).contains(&x) {
            return Err(Error::arg(format!("v0 entry {x} outside [0, {bound}]")));
        }
    }
    let s_n = mrp.num_states();
    let sampler = RowSampler::from_mdp(mrp);
    let mut v = v0.values().clone();
    for t in 1..=iters {
        let eta = sched.rate(t)?;
        let mut draw = rng.split(t as u64);
        let mut next = Array1::zeros(s_n);
        for s in 0..s_n {
            let sp = sampler.sample(s, &mut draw);
            next[s] = (1.0 - eta) * v[s] + eta * (mrp.reward()[(s, 0)] + mrp.discount() * v[sp]);
        }
        v = next;
    }
    Ok(VTable::new(v))
}
