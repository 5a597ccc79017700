//! Online episodic learning with optimism in the face of uncertainty:
//! UCB value iteration with Hoeffding or Bernstein bonuses, an optional
//! doubling-epoch model refresh, and exact regret accounting against the
//! true model.

use ndarray::{Array1, Array2};

use crate::envs::{rollout_episode, RngStream};
use crate::error::{Error, Result};
use crate::mdp::{self, EpisodicMdp};

/// Bonus families for the optimistic backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BonusKind {
    Hoeffding,
    Bernstein,
}

/// When the optimistic tables are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshMode {
    /// Refresh before every episode (the UCBVI skeleton).
    EveryEpisode,
    /// Refresh only when some `(s, a, h)` visit count reaches a power of 2.
    Doubling,
}

/// Bonus parameters shared by a run. The log factor is
/// `log(S A H K / delta)`.
#[derive(Debug, Clone, Copy)]
pub struct BonusParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub episodes: usize,
    pub delta: f64,
    pub c_b: f64,
    pub kind: BonusKind,
}

impl BonusParams {
    pub fn log_factor(&self) -> f64 {
        let num = (self.num_states * self.num_actions * self.horizon * self.episodes.max(1)) as f64;
        (num / self.delta).ln()
    }
}

/// Exploration bonus for one `(s, a, h)` tuple with `n` visits. Unvisited
/// pairs take the maximal optimism `H`. The Bernstein variant needs an
/// empirical next-value variance estimate.
pub fn bonus(params: &BonusParams, n: u64, h: usize, variance_estimate: Option<f64>) -> f64 {
    if n == 0 {
        return params.horizon as f64;
    }
    let n = n as f64;
    let log = params.log_factor();
    let steps_left = (params.horizon - h + 1) as f64;
    match params.kind {
        BonusKind::Hoeffding => params.c_b * steps_left * (log / n).sqrt(),
        BonusKind::Bernstein => {
            let var = variance_estimate.unwrap_or(0.0).max(0.0);
            params.c_b * ((var * log / n).sqrt() + steps_left * log / n)
        }
    }
}

/// Mutable learner state: per-step transition counts, empirical kernels and
/// the optimistic tables produced by the latest refresh.
#[derive(Debug, Clone)]
pub struct OnlineState {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    /// Per step `h`: visit counts over pairs, indexed `s * A + a`.
    visit_counts: Vec<Array1<u64>>,
    /// Per step `h`: transition counts of shape `(S*A, S)`.
    transition_counts: Vec<Array2<u64>>,
    /// Known deterministic reward tables, one per step.
    pub rewards: Vec<Array2<f64>>,
    /// Optimistic tables from the latest refresh.
    pub q: Vec<Array2<f64>>,
    pub v: Vec<Array1<f64>>,
    pub policy: Vec<Vec<usize>>,
    pub episode: usize,
    pub epoch: usize,
    pub refreshes: usize,
}

impl OnlineState {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize) -> Self {
        OnlineState {
            num_states,
            num_actions,
            horizon,
            visit_counts: vec![Array1::zeros(num_states * num_actions); horizon],
            transition_counts: vec![Array2::zeros((num_states * num_actions, num_states)); horizon],
            rewards: vec![Array2::zeros((num_states, num_actions)); horizon],
            q: vec![Array2::zeros((num_states, num_actions)); horizon],
            v: vec![Array1::zeros(num_states); horizon + 1],
            policy: vec![vec![0; num_states]; horizon],
            episode: 0,
            epoch: 0,
            refreshes: 0,
        }
    }

    /// Fresh state carrying the model's known reward tables.
    pub fn for_mdp(mdp: &EpisodicMdp) -> Self {
        let mut state = Self::new(mdp.num_states(), mdp.num_actions(), mdp.horizon());
        state.rewards = (1..=mdp.horizon())
            .map(|h| mdp.reward_at(h).clone())
            .collect();
        state
    }

    pub fn visits(&self, h: usize, s: usize, a: usize) -> u64 {
        self.visit_counts[h - 1][s * self.num_actions + a]
    }

    /// Records one observed transition at step `h`; returns true when the
    /// new count is a power of two (a doubling-epoch boundary).
    pub fn record(&mut self, h: usize, s: usize, a: usize, s_next: usize) -> bool {
        let row = s * self.num_actions + a;
        self.visit_counts[h - 1][row] += 1;
        self.transition_counts[h - 1][(row, s_next)] += 1;
        let n = self.visit_counts[h - 1][row];
        n & (n - 1) == 0
    }

    /// Per-step empirical kernels; unvisited rows use the uniform 1/S row.
    pub fn empirical_kernels(&self) -> Vec<Array2<f64>> {
        let s_n = self.num_states;
        self.transition_counts
            .iter()
            .map(|counts| {
                let mut p = Array2::zeros((s_n * self.num_actions, s_n));
                for (row, mut out) in counts.rows().into_iter().zip(p.rows_mut()) {
                    let total: u64 = row.iter().sum();
                    if total == 0 {
                        out.fill(1.0 / s_n as f64);
                    } else {
                        for (o, &c) in out.iter_mut().zip(row) {
                            *o = c as f64 / total as f64;
                        }
                    }
                }
                p
            })
            .collect()
    }
}

/// Per-step Q-tables, V-tables (including the terminal zero layer) and the
/// greedy policy of a backward pass.
pub type BackwardTables = (Vec<Array2<f64>>, Vec<Array1<f64>>, Vec<Vec<usize>>);

/// Optimistic backward pass over explicit kernels and bonuses:
/// `Q_h = min{ r_h + P_h V_{h+1} + b_h, H }`, `V_h = max_a Q_h`, greedy
/// policy per step. Exposed so reductions (true kernel, zero bonus) can be
/// tested directly.
pub fn optimistic_backward(
    kernels: &[Array2<f64>],
    rewards: &[Array2<f64>],
    bonuses: &[Array2<f64>],
    num_states: usize,
    num_actions: usize,
) -> BackwardTables {
    let horizon = kernels.len();
    let cap = horizon as f64;
    let mut q = vec![Array2::zeros((num_states, num_actions)); horizon];
    let mut v = vec![Array1::zeros(num_states); horizon + 1];
    let mut policy = vec![vec![0usize; num_states]; horizon];
    for h in (1..=horizon).rev() {
        for s in 0..num_states {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..num_actions {
                let row = kernels[h - 1].row(s * num_actions + a);
                let expect: f64 = row.iter().zip(&v[h]).map(|(p, vv)| p * vv).sum();
                let raw = rewards[h - 1][(s, a)] + expect + bonuses[h - 1][(s, a)];
                let value = raw.min(cap).max(0.0);
                q[h - 1][(s, a)] = value;
                if value > best_v {
                    best_v = value;
                    best = a;
                }
            }
            v[h - 1][s] = best_v;
            policy[h - 1][s] = best;
        }
    }
    (q, v, policy)
}

/// Recomputes the optimistic Q/V tables and greedy policy from the current
/// counts.
pub fn ucb_refresh(state: &mut OnlineState, params: &BonusParams) {
    let kernels = state.empirical_kernels();
    let s_n = state.num_states;
    let a_n = state.num_actions;
    let horizon = state.horizon;
    let mut q = vec![Array2::zeros((s_n, a_n)); horizon];
    let mut v = vec![Array1::zeros(s_n); horizon + 1];
    let mut policy = vec![vec![0usize; s_n]; horizon];
    let cap = horizon as f64;
    for h in (1..=horizon).rev() {
        for s in 0..s_n {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..a_n {
                let row = kernels[h - 1].row(s * a_n + a);
                let expect: f64 = row.iter().zip(&v[h]).map(|(p, vv)| p * vv).sum();
                let n = state.visit_counts[h - 1][s * a_n + a];
                let variance = match params.kind {
                    BonusKind::Hoeffding => None,
                    BonusKind::Bernstein => Some(mdp::variance(row, v[h].view()).unwrap_or(0.0)),
                };
                let b = bonus(params, n, h, variance);
                let value = (state.rewards[h - 1][(s, a)] + expect + b)
                    .min(cap)
                    .max(0.0);
                q[h - 1][(s, a)] = value;
                if value > best_v {
                    best_v = value;
                    best = a;
                }
            }
            v[h - 1][s] = best_v;
            policy[h - 1][s] = best;
        }
    }
    state.q = q;
    state.v = v;
    state.policy = policy;
    state.refreshes += 1;
}

/// Per-episode regret bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct RegretTrace {
    /// `V_1^*(s_1^k)` per episode.
    pub v_star: Vec<f64>,
    /// `V_1^{pi_k}(s_1^k)` per episode.
    pub v_policy: Vec<f64>,
    /// Running sum of the per-episode gaps.
    pub cumulative: Vec<f64>,
    /// Epoch index active during each episode.
    pub epoch_index: Vec<usize>,
    /// Refreshes where optimism `Q_h >= Q_h^*` held for every `(s, a, h)`.
    pub optimistic_refreshes: usize,
    pub total_refreshes: usize,
}

impl RegretTrace {
    pub fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    pub fn cumulative_at(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }
}

/// Sums the per-episode gaps. The total is nonnegative because the optimal
/// value dominates every policy value.
pub fn regret_summary(trace: &RegretTrace) -> (f64, Vec<f64>) {
    let per_episode: Vec<f64> = trace
        .v_star
        .iter()
        .zip(&trace.v_policy)
        .map(|(s, p)| s - p)
        .collect();
    (per_episode.iter().sum(), per_episode)
}

/// Runs `episodes` episodes of optimistic online learning on the true
/// model. Regret is measured exactly: the greedy policy of each episode is
/// evaluated against the true kernel (the learner itself only sees sampled
/// transitions).
pub fn run_online(
    mdp: &EpisodicMdp,
    episodes: usize,
    delta: f64,
    c_b: f64,
    kind: BonusKind,
    refresh: RefreshMode,
    rng: &RngStream,
) -> Result<(RegretTrace, OnlineState)> {
    if !(0.0 < delta && delta < 1.0) {
        return Err(Error::arg(format!("delta = {delta} outside (0, 1)")));
    }
    let params = BonusParams {
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        horizon: mdp.horizon(),
        episodes,
        delta,
        c_b,
        kind,
    };
    let mut state = OnlineState::for_mdp(mdp);

    let exact = mdp::backward_induction(mdp);
    let mut trace = RegretTrace::default();
    let mut running = 0.0;
    let mut refresh_due = true;
    for episode in 1..=episodes {
        state.episode = episode;
        if refresh_due || refresh == RefreshMode::EveryEpisode {
            ucb_refresh(&mut state, &params);
            trace.total_refreshes += 1;
            let optimistic = state
                .q
                .iter()
                .zip(&exact.q)
                .all(|(qh, qh_star)| qh.iter().zip(qh_star).all(|(o, t)| *o >= t - 1e-9));
            if optimistic {
                trace.optimistic_refreshes += 1;
            }
            if refresh_due {
                state.epoch += 1;
            }
            refresh_due = false;
        }

        let v_pi = mdp::evaluate_episodic_policy(mdp, &state.policy)?;
        let mut episode_rng = rng.split(episode as u64);
        let rollout = rollout_episode(mdp, &state.policy, &mut episode_rng)?;
        let s1 = rollout.steps[0].state;
        trace.v_star.push(exact.v[0][s1]);
        trace.v_policy.push(v_pi[0][s1]);
        running += exact.v[0][s1] - v_pi[0][s1];
        trace.cumulative.push(running);
        trace.epoch_index.push(state.epoch);

        for step in &rollout.steps {
            let boundary = state.record(step.step, step.state, step.action, step.next_state);
            if boundary && refresh == RefreshMode::Doubling {
                refresh_due = true;
            }
        }
    }
    Ok((trace, state))
}
