//! Exact tabular MDP machinery: model types, Bellman operators, planning,
//! policy evaluation and occupancy measures.
//!
//! Transition kernels are stored as row-stochastic matrices of shape
//! `(S*A, S)` where row `s * A + a` holds `P(. | s, a)`. All argmax
//! tie-breaks pick the lowest action index so results are reproducible
//! across platforms.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance for "rows sum to one" style invariants.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Stopping rule for converged planning: iterate until the sup-norm change
/// drops below `(1 - gamma) * PLAN_TOL`, or the iteration cap is hit.
pub const PLAN_TOL: f64 = 1e-10;
const PLAN_ITER_CAP: usize = 1_000_000;

fn check_rows_stochastic(rows: &Array2<f64>, what: &str) -> Result<()> {
    for (i, row) in rows.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &p in row {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::arg(format!("{what} row {i} has entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::arg(format!(
                "{what} row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_rewards_unit(reward: &Array2<f64>, what: &str) -> Result<()> {
    for &r in reward {
        if !r.is_finite() || !(0.0..=1.0).contains(&r) {
            return Err(Error::arg(format!("{what} reward {r} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Discounted infinite-horizon tabular MDP `(S, A, P, r, gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedMdp {
    num_states: usize,
    num_actions: usize,
    transition: Array2<f64>,
    reward: Array2<f64>,
    discount: f64,
}

impl DiscountedMdp {
    /// Builds a model and validates every invariant: row-stochastic kernel,
    /// rewards in `[0, 1]`, discount in `[0, 1)`.
    pub fn new(transition: Array2<f64>, reward: Array2<f64>, discount: f64) -> Result<Self> {
        let (num_states, num_actions) = reward.dim();
        if num_states == 0 || num_actions == 0 {
            return Err(Error::arg("mdp needs at least one state and action"));
        }
        if transition.dim() != (num_states * num_actions, num_states) {
            return Err(Error::dim(format!(
                "transition shape {:?} does not match (S*A, S) = ({}, {})",
                transition.dim(),
                num_states * num_actions,
                num_states
            )));
        }
        check_rows_stochastic(&transition, "transition")?;
        check_rewards_unit(&reward, "mdp")?;
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::arg(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
        })
    }

    /// Same checks as [`DiscountedMdp::new`] except the reward range, which
    /// is only required to be finite and nonnegative. Used for randomly
    /// perturbed rewards that may exceed 1 by the perturbation size.
    pub(crate) fn new_relaxed_rewards(
        transition: Array2<f64>,
        reward: Array2<f64>,
        discount: f64,
    ) -> Result<Self> {
        let (num_states, num_actions) = reward.dim();
        if transition.dim() != (num_states * num_actions, num_states) {
            return Err(Error::dim("transition shape does not match rewards"));
        }
        check_rows_stochastic(&transition, "transition")?;
        for &r in &reward {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::arg(format!("reward {r} not finite nonnegative")));
            }
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::arg(format!("discount {discount} outside [0, 1)")));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            reward,
            discount,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Row-stochastic kernel of shape `(S*A, S)`.
    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    /// `P(. | s, a)` as a view.
    pub fn transition_row(&self, state: usize, action: usize) -> ArrayView1<'_, f64> {
        self.transition.row(state * self.num_actions + action)
    }

    /// Reward table of shape `(S, A)`.
    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    /// `1 / (1 - gamma)`, the ceiling of any attainable value.
    pub fn value_bound(&self) -> f64 {
        1.0 / (1.0 - self.discount)
    }

    /// Replaces the reward table, keeping kernel and discount.
    pub(crate) fn with_rewards_relaxed(&self, reward: Array2<f64>) -> Result<Self> {
        Self::new_relaxed_rewards(self.transition.clone(), reward, self.discount)
    }
}

/// Non-stationary finite-horizon MDP `(S, A, H, {P_h}, {r_h}, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodicMdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    transition_h: Vec<Array2<f64>>,
    reward_h: Vec<Array2<f64>>,
    initial_dist: Array1<f64>,
}

impl EpisodicMdp {
    pub fn new(
        transition_h: Vec<Array2<f64>>,
        reward_h: Vec<Array2<f64>>,
        initial_dist: Array1<f64>,
    ) -> Result<Self> {
        if transition_h.is_empty() || transition_h.len() != reward_h.len() {
            return Err(Error::dim("need one kernel and one reward table per step"));
        }
        let horizon = transition_h.len();
        let (num_states, num_actions) = reward_h[0].dim();
        if num_states == 0 || num_actions == 0 {
            return Err(Error::arg("mdp needs at least one state and action"));
        }
        for (h, (p, r)) in transition_h.iter().zip(&reward_h).enumerate() {
            if r.dim() != (num_states, num_actions)
                || p.dim() != (num_states * num_actions, num_states)
            {
                return Err(Error::dim(format!(
                    "step {} arrays have inconsistent shapes",
                    h + 1
                )));
            }
            check_rows_stochastic(p, &format!("step-{} transition", h + 1))?;
            check_rewards_unit(r, &format!("step-{}", h + 1))?;
        }
        if initial_dist.len() != num_states {
            return Err(Error::dim("initial distribution length != S"));
        }
        check_rows_stochastic(
            &initial_dist.clone().insert_axis(ndarray::Axis(0)),
            "initial distribution",
        )?;
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            transition_h,
            reward_h,
            initial_dist,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Kernel at step `h` (1-based), shape `(S*A, S)`.
    pub fn transition_at(&self, h: usize) -> &Array2<f64> {
        &self.transition_h[h - 1]
    }

    pub fn reward_at(&self, h: usize) -> &Array2<f64> {
        &self.reward_h[h - 1]
    }

    pub fn initial_dist(&self) -> &Array1<f64> {
        &self.initial_dist
    }
}

/// Dense `(S, A)` table of action values.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable(Array2<f64>);

impl QTable {
    pub fn new(values: Array2<f64>) -> Self {
        QTable(values)
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        QTable(Array2::zeros((num_states, num_actions)))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    /// Per-state maximum, `V(s) = max_a Q(s, a)`.
    pub fn state_values(&self) -> VTable {
        VTable(
            self.0
                .rows()
                .into_iter()
                .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        )
    }

    pub fn linf_distance(&self, other: &QTable) -> f64 {
        linalg::linf_diff(self.0.iter(), other.0.iter())
    }
}

/// Dense `(S,)` table of state values.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable(Array1<f64>);

impl VTable {
    pub fn new(values: Array1<f64>) -> Self {
        VTable(values)
    }

    pub fn zeros(num_states: usize) -> Self {
        VTable(Array1::zeros(num_states))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array1<f64> {
        self.0
    }

    pub fn linf_distance(&self, other: &VTable) -> f64 {
        linalg::linf_diff(self.0.iter(), other.0.iter())
    }

    /// Expectation under a state distribution.
    pub fn expectation(&self, dist: &Distribution) -> Result<f64> {
        if dist.len() != self.0.len() {
            return Err(Error::dim("value/distribution length mismatch"));
        }
        Ok(self.0.iter().zip(dist.probs()).map(|(v, p)| v * p).sum())
    }
}

/// Stationary policy: a deterministic map `S -> A` or a row-stochastic
/// `(S, A)` matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Array2<f64>),
}

impl Policy {
    pub fn deterministic(actions: Vec<usize>) -> Self {
        Policy::Deterministic(actions)
    }

    pub fn stochastic(probs: Array2<f64>) -> Result<Self> {
        check_rows_stochastic(&probs, "policy")?;
        Ok(Policy::Stochastic(probs))
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Policy::Stochastic(Array2::from_elem(
            (num_states, num_actions),
            1.0 / num_actions as f64,
        ))
    }

    pub fn num_states(&self) -> usize {
        match self {
            Policy::Deterministic(d) => d.len(),
            Policy::Stochastic(p) => p.nrows(),
        }
    }

    /// Checks the policy is usable with an `S`-state, `A`-action model.
    pub fn validate_for(&self, num_states: usize, num_actions: usize) -> Result<()> {
        match self {
            Policy::Deterministic(d) => {
                if d.len() != num_states {
                    return Err(Error::dim("policy length != S"));
                }
                if let Some(&a) = d.iter().find(|&&a| a >= num_actions) {
                    return Err(Error::arg(format!("policy selects action {a} >= A")));
                }
            }
            Policy::Stochastic(p) => {
                if p.dim() != (num_states, num_actions) {
                    return Err(Error::dim("policy shape != (S, A)"));
                }
            }
        }
        Ok(())
    }

    /// `pi(a | s)`.
    pub fn prob(&self, state: usize, action: usize) -> f64 {
        match self {
            Policy::Deterministic(d) => {
                if d[state] == action {
                    1.0
                } else {
                    0.0
                }
            }
            Policy::Stochastic(p) => p[(state, action)],
        }
    }

    /// Dense `(S, A)` probability matrix (one-hot rows when deterministic).
    pub fn to_matrix(&self, num_actions: usize) -> Array2<f64> {
        match self {
            Policy::Deterministic(d) => {
                let mut m = Array2::zeros((d.len(), num_actions));
                for (s, &a) in d.iter().enumerate() {
                    m[(s, a)] = 1.0;
                }
                m
            }
            Policy::Stochastic(p) => p.clone(),
        }
    }

    pub fn as_deterministic(&self) -> Option<&[usize]> {
        match self {
            Policy::Deterministic(d) => Some(d),
            Policy::Stochastic(_) => None,
        }
    }

    /// True if every action probability is strictly positive.
    pub fn is_interior(&self) -> bool {
        match self {
            Policy::Deterministic(_) => false,
            Policy::Stochastic(p) => p.iter().all(|&x| x > 0.0),
        }
    }
}

/// Probability vector over a finite index set.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution(Array1<f64>);

impl Distribution {
    pub fn new(probs: Array1<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::arg(format!("distribution entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::arg(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Distribution(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Distribution(Array1::from_elem(n, 1.0 / n as f64))
    }

    pub fn point_mass(n: usize, index: usize) -> Self {
        let mut p = Array1::zeros(n);
        p[index] = 1.0;
        Distribution(p)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn probs(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }
}

/// Variance of `values` under the probability vector `weights`:
/// `sum_i q_i v_i^2 - (sum_i q_i v_i)^2`.
pub fn variance(weights: ArrayView1<'_, f64>, values: ArrayView1<'_, f64>) -> Result<f64> {
    if weights.len() != values.len() {
        return Err(Error::dim(format!(
            "variance over {} weights and {} values",
            weights.len(),
            values.len()
        )));
    }
    let mut first = 0.0;
    let mut second = 0.0;
    for (&q, &v) in weights.iter().zip(values.iter()) {
        first += q * v;
        second += q * v * v;
    }
    Ok((second - first * first).max(0.0))
}

/// Bellman optimality operator:
/// `T(Q)(s, a) = r(s, a) + gamma * sum_{s'} P(s' | s, a) max_{a'} Q(s', a')`.
pub fn bellman_optimality(mdp: &DiscountedMdp, q: &QTable) -> Result<QTable> {
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    if q.values().dim() != (s_n, a_n) {
        return Err(Error::dim("q-table shape does not match mdp"));
    }
    let v = q.state_values();
    let mut out = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let row = mdp.transition_row(s, a);
            let expect: f64 = row.iter().zip(v.values()).map(|(p, vv)| p * vv).sum();
            out[(s, a)] = mdp.reward()[(s, a)] + mdp.discount() * expect;
        }
    }
    Ok(QTable(out))
}

/// Applies the Bellman optimality operator `iters` times to `q0`.
pub fn value_iteration(mdp: &DiscountedMdp, q0: &QTable, iters: usize) -> Result<QTable> {
    let mut q = q0.clone();
    for _ in 0..iters {
        q = bellman_optimality(mdp, &q)?;
    }
    Ok(q)
}

/// Q-value iteration from zero until the sup-norm change drops below
/// `(1 - gamma) * PLAN_TOL` (or the iteration cap). Returns the Q-estimate
/// and the number of operator applications.
pub fn solve_optimal(mdp: &DiscountedMdp) -> Result<(QTable, usize)> {
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    let threshold = (1.0 - mdp.discount()) * PLAN_TOL;
    for iter in 1..=PLAN_ITER_CAP {
        let next = bellman_optimality(mdp, &q)?;
        let delta = next.linf_distance(&q);
        q = next;
        if delta <= threshold {
            return Ok((q, iter));
        }
    }
    Ok((q, PLAN_ITER_CAP))
}

/// Greedy policy of a Q-table; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> Policy {
    let actions = q
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (a, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = a;
                    best_v = v;
                }
            }
            best
        })
        .collect();
    Policy::Deterministic(actions)
}

/// Exact policy evaluation by solving `(I - gamma P_pi) V = r_pi`, then
/// `Q(s, a) = r(s, a) + gamma P_{s,a} V`.
pub fn evaluate_policy(mdp: &DiscountedMdp, pi: &Policy) -> Result<(VTable, QTable)> {
    pi.validate_for(mdp.num_states(), mdp.num_actions())?;
    let s_n = mdp.num_states();
    let a_n = mdp.num_actions();
    let mut system = Array2::zeros((s_n, s_n));
    let mut rhs = Array1::zeros(s_n);
    for s in 0..s_n {
        system[(s, s)] = 1.0;
        for a in 0..a_n {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            rhs[s] += w * mdp.reward()[(s, a)];
            let row = mdp.transition_row(s, a);
            for (sp, &p) in row.iter().enumerate() {
                system[(s, sp)] -= mdp.discount() * w * p;
            }
        }
    }
    let v = linalg::solve(&system, &rhs)?;
    let mut q = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let row = mdp.transition_row(s, a);
            let expect: f64 = row.iter().zip(v.iter()).map(|(p, vv)| p * vv).sum();
            q[(s, a)] = mdp.reward()[(s, a)] + mdp.discount() * expect;
        }
    }
    Ok((VTable(v), QTable(q)))
}

/// Policy iteration: each round evaluates the current policy exactly and
/// greedifies. With `iters = 0` this returns `(pi0, Q^{pi0})`.
pub fn policy_iteration(
    mdp: &DiscountedMdp,
    pi0: &Policy,
    iters: usize,
) -> Result<(Policy, QTable)> {
    let mut pi = pi0.clone();
    let (_, mut q) = evaluate_policy(mdp, &pi)?;
    for _ in 0..iters {
        pi = greedy_policy(&q);
        let (_, next_q) = evaluate_policy(mdp, &pi)?;
        q = next_q;
    }
    Ok((pi, q))
}

/// Discounted occupancy distribution over state-action pairs,
/// `d(s, a) = (1 - gamma) sum_t gamma^t P(s_t = s, a_t = a | s_0 ~ rho, pi)`,
/// flattened row-major (index `s * A + a`).
pub fn occupancy(mdp: &DiscountedMdp, pi: &Policy, rho: &Distribution) -> Result<Distribution> {
    pi.validate_for(mdp.num_states(), mdp.num_actions())?;
    let s_n = mdp.num_states();
    let a_n = mdp.num_actions();
    if rho.len() != s_n {
        return Err(Error::dim("initial distribution length != S"));
    }
    // State occupancy solves (I - gamma P_pi^T) d = (1 - gamma) rho.
    let mut system = Array2::zeros((s_n, s_n));
    for s in 0..s_n {
        system[(s, s)] = 1.0;
    }
    for s in 0..s_n {
        for a in 0..a_n {
            let w = pi.prob(s, a);
            if w == 0.0 {
                continue;
            }
            let row = mdp.transition_row(s, a);
            for (sp, &p) in row.iter().enumerate() {
                system[(sp, s)] -= mdp.discount() * w * p;
            }
        }
    }
    let rhs = rho.probs() * (1.0 - mdp.discount());
    let d_state = linalg::solve(&system, &rhs)?;
    let mut d = Array1::zeros(s_n * a_n);
    for s in 0..s_n {
        for a in 0..a_n {
            d[s * a_n + a] = (d_state[s] * pi.prob(s, a)).max(0.0);
        }
    }
    let total: f64 = d.sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numeric("occupancy mass is not positive".into()));
    }
    Distribution::new(d / total)
}

/// Output of exact finite-horizon dynamic programming.
#[derive(Debug, Clone)]
pub struct BackwardInduction {
    /// `q[h - 1]` is the optimal Q-table at step `h`.
    pub q: Vec<Array2<f64>>,
    /// `v[h - 1]` at step `h`; `v[H]` is the terminal zero layer.
    pub v: Vec<Array1<f64>>,
    /// Greedy optimal action per step and state.
    pub policy: Vec<Vec<usize>>,
}

/// Exact finite-horizon DP with `V_{H+1} = 0`.
pub fn backward_induction(mdp: &EpisodicMdp) -> BackwardInduction {
    let (s_n, a_n, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut q = vec![Array2::zeros((s_n, a_n)); horizon];
    let mut v = vec![Array1::zeros(s_n); horizon + 1];
    let mut policy = vec![vec![0usize; s_n]; horizon];
    for h in (1..=horizon).rev() {
        let p_h = mdp.transition_at(h);
        let r_h = mdp.reward_at(h);
        for s in 0..s_n {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for a in 0..a_n {
                let row = p_h.row(s * a_n + a);
                let expect: f64 = row.iter().zip(&v[h]).map(|(p, vv)| p * vv).sum();
                let value = r_h[(s, a)] + expect;
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
    BackwardInduction { q, v, policy }
}

/// Exact value of a step-indexed deterministic policy in a finite-horizon
/// MDP; returns `V^pi_h` for `h = 1..=H+1` (terminal layer zero).
pub fn evaluate_episodic_policy(
    mdp: &EpisodicMdp,
    policy: &[Vec<usize>],
) -> Result<Vec<Array1<f64>>> {
    let (s_n, a_n, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    if policy.len() != horizon {
        return Err(Error::dim("policy must define all H steps"));
    }
    let mut v = vec![Array1::zeros(s_n); horizon + 1];
    for h in (1..=horizon).rev() {
        if policy[h - 1].len() != s_n {
            return Err(Error::dim("per-step policy length != S"));
        }
        let p_h = mdp.transition_at(h);
        let r_h = mdp.reward_at(h);
        for s in 0..s_n {
            let a = policy[h - 1][s];
            if a >= a_n {
                return Err(Error::arg(format!("policy selects action {a} >= A")));
            }
            let row = p_h.row(s * a_n + a);
            let expect: f64 = row.iter().zip(&v[h]).map(|(p, vv)| p * vv).sum();
            v[h - 1][s] = r_h[(s, a)] + expect;
        }
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

fn push_matrix(out: &mut String, m: &Array2<f64>) {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().peekable(),
        }
    }

    fn next_content(&mut self) -> Option<&'a str> {
        loop {
            let line = self.inner.next()?;
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Some(trimmed);
            }
        }
    }

    fn expect_scalar(&mut self, key: &str) -> Result<&'a str> {
        let line = self
            .next_content()
            .ok_or_else(|| Error::Parse(format!("missing key `{key}`")))?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(k), Some(v)) if k == key => Ok(v),
            _ => Err(Error::Parse(format!(
                "expected `{key} <value>`, got `{line}`"
            ))),
        }
    }

    fn expect_header(&mut self, key: &str) -> Result<()> {
        let line = self
            .next_content()
            .ok_or_else(|| Error::Parse(format!("missing section `{key}`")))?;
        if line.split_whitespace().collect::<Vec<_>>() == [key] {
            Ok(())
        } else {
            Err(Error::Parse(format!(
                "expected section `{key}`, got `{line}`"
            )))
        }
    }

    fn read_matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let line = self
                .next_content()
                .ok_or_else(|| Error::Parse(format!("{what}: missing row {i}")))?;
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("{what}: bad number `{tok}`")))
                })
                .collect::<Result<_>>()?;
            if values.len() != cols {
                return Err(Error::Parse(format!(
                    "{what}: row {i} has {} entries, expected {cols}",
                    values.len()
                )));
            }
            data.extend(values);
        }
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Parse(format!("{what}: {e}")))
    }
}

fn parse_scalar<T: std::str::FromStr>(token: &str, key: &str) -> Result<T> {
    token
        .parse::<T>()
        .map_err(|_| Error::Parse(format!("bad value `{token}` for key `{key}`")))
}

impl DiscountedMdp {
    /// Serializes to the line-oriented text format with keys
    /// `S, A, gamma, rewards, transitions`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("S {}\n", self.num_states));
        out.push_str(&format!("A {}\n", self.num_actions));
        out.push_str(&format!("gamma {}\n", self.discount));
        out.push_str("rewards\n");
        push_matrix(&mut out, &self.reward);
        out.push_str("transitions\n");
        push_matrix(&mut out, &self.transition);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let s_n: usize = parse_scalar(lines.expect_scalar("S")?, "S")?;
        let a_n: usize = parse_scalar(lines.expect_scalar("A")?, "A")?;
        let gamma: f64 = parse_scalar(lines.expect_scalar("gamma")?, "gamma")?;
        lines.expect_header("rewards")?;
        let reward = lines.read_matrix(s_n, a_n, "rewards")?;
        lines.expect_header("transitions")?;
        let transition = lines.read_matrix(s_n * a_n, s_n, "transitions")?;
        DiscountedMdp::new(transition, reward, gamma)
    }
}

impl EpisodicMdp {
    /// Serializes to the same format as the discounted variant with an `H`
    /// key, an `initial_dist` row and per-step reward/transition arrays.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("S {}\n", self.num_states));
        out.push_str(&format!("A {}\n", self.num_actions));
        out.push_str(&format!("H {}\n", self.horizon));
        out.push_str("initial_dist\n");
        let line: Vec<String> = self.initial_dist.iter().map(|x| format!("{x}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
        for h in 1..=self.horizon {
            out.push_str(&format!("rewards_h {h}\n"));
            push_matrix(&mut out, &self.reward_h[h - 1]);
            out.push_str(&format!("transitions_h {h}\n"));
            push_matrix(&mut out, &self.transition_h[h - 1]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let s_n: usize = parse_scalar(lines.expect_scalar("S")?, "S")?;
        let a_n: usize = parse_scalar(lines.expect_scalar("A")?, "A")?;
        let horizon: usize = parse_scalar(lines.expect_scalar("H")?, "H")?;
        lines.expect_header("initial_dist")?;
        let mu = lines.read_matrix(1, s_n, "initial_dist")?.row(0).to_owned();
        let mut rewards = Vec::with_capacity(horizon);
        let mut transitions = Vec::with_capacity(horizon);
        for h in 1..=horizon {
            let got: usize = parse_scalar(lines.expect_scalar("rewards_h")?, "rewards_h")?;
            if got != h {
                return Err(Error::Parse(format!("expected rewards_h {h}, got {got}")));
            }
            rewards.push(lines.read_matrix(s_n, a_n, "rewards_h")?);
            let got: usize = parse_scalar(lines.expect_scalar("transitions_h")?, "transitions_h")?;
            if got != h {
                return Err(Error::Parse(format!(
                    "expected transitions_h {h}, got {got}"
                )));
            }
            transitions.push(lines.read_matrix(s_n * a_n, s_n, "transitions_h")?);
        }
        EpisodicMdp::new(transitions, rewards, mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_episodic, random_mdp, RngStream};
    use ndarray::array;

    fn single_state(reward: f64, gamma: f64) -> DiscountedMdp {
        DiscountedMdp::new(array![[1.0]], array![[reward]], gamma).unwrap()
    }

    #[test]
    fn variance_matches_hand_values() {
        let q = array![0.5, 0.5];
        let v = array![0.0, 1.0];
        assert!((variance(q.view(), v.view()).unwrap() - 0.25).abs() < 1e-15);

        let q = array![1.0, 0.0];
        let v = array![3.0, 7.0];
        assert!(variance(q.view(), v.view()).unwrap().abs() < 1e-15);

        // Direct evaluation: 0.2*1 + 0.3*4 + 0.5*9 = 5.9, mean 2.3, 5.9 - 5.29 = 0.61.
        let q = array![0.2, 0.3, 0.5];
        let v = array![1.0, 2.0, 3.0];
        assert!((variance(q.view(), v.view()).unwrap() - 0.61).abs() < 1e-12);
    }

    #[test]
    fn variance_rejects_length_mismatch() {
        let q = array![0.5, 0.5];
        let v = array![1.0];
        assert!(matches!(
            variance(q.view(), v.view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bellman_single_state() {
        let mdp = single_state(1.0, 0.9);
        let out = bellman_optimality(&mdp, &QTable::zeros(1, 1)).unwrap();
        assert!((out.values()[(0, 0)] - 1.0).abs() < 1e-15);

        // Q* = 1 / (1 - gamma) = 10 is the fixed point.
        let out = bellman_optimality(&mdp, &QTable::new(array![[10.0]])).unwrap();
        assert!((out.values()[(0, 0)] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn bellman_is_gamma_contraction() {
        let root = RngStream::new(0x5eed_0001);
        for trial in 0..200u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(6, 3, 0.9, 0.8, &mut rng).unwrap();
            let q1 = QTable::new(Array2::from_shape_fn((6, 3), |_| 10.0 * rng.next_f64()));
            let q2 = QTable::new(Array2::from_shape_fn((6, 3), |_| 10.0 * rng.next_f64()));
            let lhs = bellman_optimality(&mdp, &q1)
                .unwrap()
                .linf_distance(&bellman_optimality(&mdp, &q2).unwrap());
            let rhs = mdp.discount() * q1.linf_distance(&q2);
            assert!(lhs <= rhs + 1e-12, "contraction violated: {lhs} > {rhs}");
        }
    }

    #[test]
    fn value_iteration_geometric_series() {
        let mdp = single_state(1.0, 0.9);
        for k in 0..25usize {
            let q = value_iteration(&mdp, &QTable::zeros(1, 1), k).unwrap();
            let expected = (1.0 - 0.9f64.powi(k as i32)) / 0.1;
            assert!((q.values()[(0, 0)] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn value_iteration_zero_iters_is_identity() {
        let mut rng = RngStream::new(7);
        let mdp = random_mdp(4, 2, 0.8, 1.0, &mut rng).unwrap();
        let q0 = QTable::new(Array2::from_shape_fn((4, 2), |_| rng.next_f64()));
        let q = value_iteration(&mdp, &q0, 0).unwrap();
        assert_eq!(q, q0);
    }

    #[test]
    fn value_iteration_converges_linearly() {
        let mut rng = RngStream::new(11);
        let mdp = random_mdp(8, 3, 0.9, 0.7, &mut rng).unwrap();
        let (q_star, _) = solve_optimal(&mdp).unwrap();
        let q0 = QTable::zeros(8, 3);
        let base = q0.linf_distance(&q_star);
        let mut q = q0;
        for k in 1..=60 {
            q = bellman_optimality(&mdp, &q).unwrap();
            let bound = mdp.discount().powi(k) * base;
            assert!(q.linf_distance(&q_star) <= bound + 1e-9);
        }
        // Fixed point: T(Q*) = Q*.
        let fp = bellman_optimality(&mdp, &q_star).unwrap();
        assert!(fp.linf_distance(&q_star) <= 1e-8);
    }

    #[test]
    fn policy_iteration_zero_rounds_evaluates_input() {
        let mut rng = RngStream::new(13);
        let mdp = random_mdp(5, 2, 0.9, 1.0, &mut rng).unwrap();
        let pi0 = Policy::uniform(5, 2);
        let (pi, q) = policy_iteration(&mdp, &pi0, 0).unwrap();
        assert_eq!(pi, pi0);
        let (_, q_ref) = evaluate_policy(&mdp, &pi0).unwrap();
        assert_eq!(q, q_ref);
    }

    #[test]
    fn policy_iteration_single_round_suffices_when_myopic() {
        // gamma = 0 makes the greedy step on exact Q optimal immediately.
        let transition = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let reward = array![[0.2, 0.9], [0.8, 0.1]];
        let mdp = DiscountedMdp::new(transition, reward, 0.0).unwrap();
        let (pi, _) = policy_iteration(&mdp, &Policy::uniform(2, 2), 1).unwrap();
        assert_eq!(pi.as_deterministic().unwrap(), &[1, 0]);
    }

    #[test]
    fn policy_iteration_improves_monotonically() {
        let mut rng = RngStream::new(17);
        let mdp = random_mdp(8, 3, 0.9, 0.6, &mut rng).unwrap();
        let mut pi = Policy::uniform(8, 3);
        let (mut v_prev, mut q) = evaluate_policy(&mdp, &pi).unwrap();
        for _ in 0..10 {
            pi = greedy_policy(&q);
            let (v, next_q) = evaluate_policy(&mdp, &pi).unwrap();
            for (new, old) in v.values().iter().zip(v_prev.values()) {
                assert!(*new >= old - 1e-10);
            }
            v_prev = v;
            q = next_q;
        }
    }

    #[test]
    fn evaluate_policy_hand_cases() {
        let mdp = single_state(1.0, 0.9);
        let (v, _) = evaluate_policy(&mdp, &Policy::deterministic(vec![0])).unwrap();
        assert!((v.values()[0] - 10.0).abs() < 1e-9);

        // Deterministic chain 1 -> 2 -> 2 with r = (0, 1), gamma = 0.5:
        // V(2) = 1 / 0.5 = 2, V(1) = 0 + 0.5 * 2 = 1.
        let transition = array![[0.0, 1.0], [0.0, 1.0]];
        let reward = array![[0.0], [1.0]];
        let chain = DiscountedMdp::new(transition, reward, 0.5).unwrap();
        let (v, _) = evaluate_policy(&chain, &Policy::deterministic(vec![0, 0])).unwrap();
        assert!((v.values()[0] - 1.0).abs() < 1e-9);
        assert!((v.values()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn values_stay_in_range() {
        let root = RngStream::new(19);
        for trial in 0..20u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(6, 3, 0.95, 0.5, &mut rng).unwrap();
            let pi = Policy::uniform(6, 3);
            let (v, _) = evaluate_policy(&mdp, &pi).unwrap();
            for &x in v.values() {
                assert!(x >= -1e-12 && x <= mdp.value_bound() + 1e-9);
            }
        }
    }

    #[test]
    fn occupancy_basics() {
        let mdp = single_state(1.0, 0.9);
        let d = occupancy(
            &mdp,
            &Policy::deterministic(vec![0]),
            &Distribution::uniform(1),
        )
        .unwrap();
        assert!((d.probs()[0] - 1.0).abs() < 1e-12);

        let mut rng = RngStream::new(23);
        let mdp = random_mdp(5, 3, 0.9, 0.8, &mut rng).unwrap();
        let pi = Policy::uniform(5, 3);
        let d = occupancy(&mdp, &pi, &Distribution::uniform(5)).unwrap();
        assert!((d.probs().sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn occupancy_at_gamma_zero_is_initial_times_policy() {
        let mut rng = RngStream::new(29);
        let mdp = random_mdp(4, 2, 0.0, 1.0, &mut rng).unwrap();
        let probs = array![[0.3, 0.7], [0.9, 0.1], [0.5, 0.5], [0.2, 0.8]];
        let pi = Policy::stochastic(probs.clone()).unwrap();
        let rho = Distribution::new(array![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = occupancy(&mdp, &pi, &rho).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                let expected = rho.probs()[s] * probs[(s, a)];
                assert!((d.probs()[s * 2 + a] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occupancy_identity_links_value() {
        // V^pi(rho) = 1 / (1 - gamma) * sum_{s,a} d(s,a) r(s,a).
        let root = RngStream::new(31);
        for trial in 0..10u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(6, 2, 0.9, 0.7, &mut rng).unwrap();
            let pi = Policy::uniform(6, 2);
            let rho = Distribution::uniform(6);
            let (v, _) = evaluate_policy(&mdp, &pi).unwrap();
            let d = occupancy(&mdp, &pi, &rho).unwrap();
            let via_occupancy: f64 = (0..6)
                .flat_map(|s| (0..2).map(move |a| (s, a)))
                .map(|(s, a)| d.probs()[s * 2 + a] * mdp.reward()[(s, a)])
                .sum::<f64>()
                / (1.0 - mdp.discount());
            let direct = v.expectation(&rho).unwrap();
            assert!((via_occupancy - direct).abs() < 1e-8);
        }
    }

    #[test]
    fn greedy_ties_break_low() {
        let q = QTable::new(array![[0.0, 1.0], [1.0, 1.0]]);
        let pi = greedy_policy(&q);
        assert_eq!(pi.as_deterministic().unwrap(), &[1, 0]);
    }

    #[test]
    fn greedy_invariant_under_positive_affine_per_state() {
        let mut rng = RngStream::new(37);
        let q = QTable::new(Array2::from_shape_fn((5, 4), |_| rng.next_f64()));
        let base = greedy_policy(&q);
        let scale = 2.5;
        let shifted = QTable::new(Array2::from_shape_fn((5, 4), |(s, a)| {
            scale * q.values()[(s, a)] + (s as f64) * 0.7
        }));
        assert_eq!(greedy_policy(&shifted), base);
    }

    #[test]
    fn greedy_of_q_star_is_optimal() {
        let root = RngStream::new(41);
        for trial in 0..10u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(5, 3, 0.9, 0.8, &mut rng).unwrap();
            let (q_star, _) = solve_optimal(&mdp).unwrap();
            let pi = greedy_policy(&q_star);
            let (v_pi, _) = evaluate_policy(&mdp, &pi).unwrap();
            let v_star = q_star.state_values();
            assert!(v_pi.linf_distance(&v_star) < 1e-6);
        }
    }

    #[test]
    fn backward_induction_terminal_cases() {
        let mut rng = RngStream::new(43);
        let mdp = random_episodic(3, 2, 1, &mut rng).unwrap();
        let out = backward_induction(&mdp);
        assert_eq!(&out.q[0], mdp.reward_at(1));

        // All-zero rewards give all-zero values.
        let p = vec![mdp.transition_at(1).clone(); 3];
        let r = vec![Array2::zeros((3, 2)); 3];
        let zero = EpisodicMdp::new(p, r, mdp.initial_dist().clone()).unwrap();
        let out = backward_induction(&zero);
        for v in &out.v {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn backward_induction_matches_policy_enumeration() {
        // Brute-force oracle: enumerate all deterministic step-indexed
        // policies of a 2-step, 2-state, 2-action instance.
        let mut rng = RngStream::new(47);
        let mdp = random_episodic(2, 2, 2, &mut rng).unwrap();
        let out = backward_induction(&mdp);

        let all_maps = [[0usize, 0], [0, 1], [1, 0], [1, 1]];
        let mut best = Array1::from_elem(2, f64::NEG_INFINITY);
        for m1 in &all_maps {
            for m2 in &all_maps {
                let v = evaluate_episodic_policy(&mdp, &[m1.to_vec(), m2.to_vec()]).unwrap();
                for s in 0..2 {
                    if v[0][s] > best[s] {
                        best[s] = v[0][s];
                    }
                }
            }
        }
        for s in 0..2 {
            assert!((out.v[0][s] - best[s]).abs() < 1e-12);
        }
        for (h, v_h) in out.v.iter().enumerate().take(mdp.horizon()) {
            let cap = (mdp.horizon() - h) as f64;
            for &x in v_h {
                assert!(x >= 0.0 && x <= cap + 1e-12);
            }
        }
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(DiscountedMdp::new(array![[0.9]], array![[0.5]], 0.9).is_err());
        assert!(DiscountedMdp::new(array![[1.0]], array![[1.5]], 0.9).is_err());
        assert!(DiscountedMdp::new(array![[1.0]], array![[0.5]], 1.0).is_err());
        assert!(Policy::stochastic(array![[0.4, 0.4]]).is_err());
        assert!(Distribution::new(array![0.5, 0.6]).is_err());
        assert!(Distribution::new(array![-0.5, 1.5]).is_err());
    }

    #[test]
    fn discounted_text_round_trip() {
        let mut rng = RngStream::new(53);
        let mdp = random_mdp(3, 2, 0.9, 0.8, &mut rng).unwrap();
        let text = mdp.to_text();
        let back = DiscountedMdp::from_text(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn discounted_text_golden_parse() {
        let text = "S 2\nA 1\ngamma 0.5\nrewards\n0\n1\ntransitions\n0 1\n0 1\n";
        let mdp = DiscountedMdp::from_text(text).unwrap();
        assert_eq!(mdp.num_states(), 2);
        assert_eq!(mdp.num_actions(), 1);
        let (v, _) = evaluate_policy(&mdp, &Policy::deterministic(vec![0, 0])).unwrap();
        assert!((v.values()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn episodic_text_round_trip() {
        let mut rng = RngStream::new(59);
        let mdp = random_episodic(3, 2, 4, &mut rng).unwrap();
        let back = EpisodicMdp::from_text(&mdp.to_text()).unwrap();
        assert_eq!(mdp, back);
    }
}
