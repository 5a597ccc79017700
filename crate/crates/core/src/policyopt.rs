//! Exact-gradient policy optimization on tabular MDPs: projected policy
//! gradient under direct parameterization, softmax policy gradient, natural
//! policy gradient (multiplicative weights), and entropy-regularized NPG
//! with soft (entropy-regularized) evaluation and planning.
//!
//! Gradients and value functions are evaluated exactly through the linear
//! solves in [`crate::mdp`]; no sampling happens in this module.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mdp::{self, DiscountedMdp, Distribution, Policy, QTable, VTable};

/// Softmax logits over actions, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPolicy {
    theta: Array2<f64>,
}

impl LogitPolicy {
    pub fn new(theta: Array2<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::arg("logits must be finite"));
        }
        Ok(LogitPolicy { theta })
    }

    /// Zero logits: the uniform policy.
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        LogitPolicy {
            theta: Array2::zeros((num_states, num_actions)),
        }
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn into_theta(self) -> Array2<f64> {
        self.theta
    }

    /// Induced stochastic policy via row-wise softmax.
    pub fn to_policy(&self) -> Policy {
        Policy::Stochastic(softmax_rows(&self.theta))
    }

    /// Logits reproducing a strictly positive stochastic policy.
    pub fn from_policy(pi: &Policy, num_actions: usize) -> Result<Self> {
        let probs = pi.to_matrix(num_actions);
        if probs.iter().any(|&p| p <= 0.0) {
            return Err(Error::arg(
                "log-parameterization needs a strictly positive policy",
            ));
        }
        Ok(LogitPolicy {
            theta: probs.mapv(f64::ln),
        })
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows(theta: &Array2<f64>) -> Array2<f64> {
    let mut out = theta.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// `log(sum_i exp(x_i))` with max subtraction.
pub(crate) fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropy-regularized value functions at temperature `tau`.
#[derive(Debug, Clone)]
pub struct SoftValues {
    pub v: VTable,
    pub q: QTable,
    pub tau: f64,
}

fn require_stochastic(pi: &Policy) -> Result<&Array2<f64>> {
    match pi {
        Policy::Stochastic(p) => Ok(p),
        Policy::Deterministic(_) => Err(Error::arg("this operation needs a stochastic policy")),
    }
}

/// Exact gradient of `V^pi(rho)` under direct parameterization:
/// `grad(s, a) = d_rho^pi(s) Q^pi(s, a) / (1 - gamma)` where `d_rho^pi(s)`
/// is the state marginal of the discounted occupancy.
pub fn direct_gradient(
    mdp: &DiscountedMdp,
    pi: &Policy,
    rho: &Distribution,
) -> Result<Array2<f64>> {
    require_stochastic(pi)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let d = mdp::occupancy(mdp, pi, rho)?;
    let (_, q) = mdp::evaluate_policy(mdp, pi)?;
    let mut grad = Array2::zeros((s_n, a_n));
    let scale = 1.0 / (1.0 - mdp.discount());
    for s in 0..s_n {
        let d_state: f64 = (0..a_n).map(|a| d.probs()[s * a_n + a]).sum();
        for a in 0..a_n {
            grad[(s, a)] = scale * d_state * q.values()[(s, a)];
        }
    }
    Ok(grad)
}

/// Euclidean projection onto the probability simplex by the sorting-based
/// thresholding rule.
pub fn simplex_project(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (1.0 - cumulative) / (j + 1) as f64;
        if u + candidate > 0.0 {
            threshold = candidate;
        }
    }
    let mut out = Array1::zeros(n);
    for (o, &x) in out.iter_mut().zip(v.iter()) {
        *o = (x + threshold).max(0.0);
    }
    out
}

/// One projected policy-gradient step: per-state projection of
/// `pi(. | s) + eta * grad(s, .)` onto the simplex.
pub fn projected_pg_step(
    mdp: &DiscountedMdp,
    pi: &Policy,
    rho: &Distribution,
    eta: f64,
) -> Result<Policy> {
    if eta <= 0.0 {
        return Err(Error::arg(format!("step size {eta} must be positive")));
    }
    let probs = require_stochastic(pi)?.clone();
    let grad = direct_gradient(mdp, pi, rho)?;
    let mut next = Array2::zeros(probs.dim());
    for s in 0..mdp.num_states() {
        let stepped = &probs.row(s) + &(eta * &grad.row(s));
        let projected = simplex_project(stepped.view());
        next.row_mut(s).assign(&projected);
    }
    // Projection output sums to one up to roundoff; renormalize the tail.
    for mut row in next.rows_mut() {
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    Policy::stochastic(next)
}

/// Exact softmax policy gradient:
/// `grad(s, a) = d_rho^pi(s) pi(a | s) A^pi(s, a) / (1 - gamma)`.
pub fn softmax_gradient(
    mdp: &DiscountedMdp,
    lp: &LogitPolicy,
    rho: &Distribution,
) -> Result<Array2<f64>> {
    let pi = lp.to_policy();
    let probs = require_stochastic(&pi)?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let d = mdp::occupancy(mdp, &pi, rho)?;
    let (v, q) = mdp::evaluate_policy(mdp, &pi)?;
    let mut grad = Array2::zeros((s_n, a_n));
    let scale = 1.0 / (1.0 - mdp.discount());
    for s in 0..s_n {
        let d_state: f64 = (0..a_n).map(|a| d.probs()[s * a_n + a]).sum();
        for a in 0..a_n {
            let advantage = q.values()[(s, a)] - v.values()[s];
            grad[(s, a)] = scale * d_state * probs[(s, a)] * advantage;
        }
    }
    Ok(grad)
}

/// One softmax policy-gradient ascent step on the logits.
pub fn softmax_pg_step(
    mdp: &DiscountedMdp,
    lp: &LogitPolicy,
    rho: &Distribution,
    eta: f64,
) -> Result<LogitPolicy> {
    if eta <= 0.0 {
        return Err(Error::arg(format!("step size {eta} must be positive")));
    }
    let grad = softmax_gradient(mdp, lp, rho)?;
    LogitPolicy::new(lp.theta() + &(eta * &grad))
}

/// Natural policy gradient step (multiplicative weights):
/// `pi'(a | s) ~ pi(a | s) exp(eta Q(s, a) / (1 - gamma))`.
pub fn npg_step(pi: &Policy, q: &QTable, eta: f64, discount: f64) -> Result<Policy> {
    if eta <= 0.0 {
        return Err(Error::arg(format!("step size {eta} must be positive")));
    }
    let probs = require_stochastic(pi)?;
    if probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::arg("NPG requires an interior policy"));
    }
    if probs.dim() != q.values().dim() {
        return Err(Error::dim("policy and q-table shapes differ"));
    }
    let scale = eta / (1.0 - discount);
    let logits = Array2::from_shape_fn(probs.dim(), |(s, a)| {
        probs[(s, a)].ln() + scale * q.values()[(s, a)]
    });
    Ok(Policy::Stochastic(softmax_rows(&logits)))
}

/// The same multiplicative-weights update expressed on softmax logits,
/// `theta' = theta + eta Q / (1 - gamma)`. Equivalent to [`npg_step`] on
/// the induced policies, but logits stay finite however concentrated the
/// policy becomes, so long optimization runs never leave the softmax class.
pub fn npg_step_logits(
    lp: &LogitPolicy,
    q: &QTable,
    eta: f64,
    discount: f64,
) -> Result<LogitPolicy> {
    if eta <= 0.0 {
        return Err(Error::arg(format!("step size {eta} must be positive")));
    }
    if lp.theta().dim() != q.values().dim() {
        return Err(Error::dim("logits and q-table shapes differ"));
    }
    let scale = eta / (1.0 - discount);
    LogitPolicy::new(lp.theta() + &(scale * q.values()))
}

/// Exact entropy-regularized policy evaluation: solves
/// `V(s) = sum_a pi(a|s) [r(s, a) - tau log pi(a|s) + gamma P_{s,a} V]`
/// and sets `Q(s, a) = r(s, a) + gamma P_{s,a} V`.
pub fn soft_evaluate(mdp: &DiscountedMdp, pi: &Policy, tau: f64) -> Result<SoftValues> {
    if tau < 0.0 {
        return Err(Error::arg(format!("temperature {tau} must be nonnegative")));
    }
    let probs = require_stochastic(pi)?;
    pi.validate_for(mdp.num_states(), mdp.num_actions())?;
    if tau > 0.0 && probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::arg(
            "entropy regularization needs an interior policy",
        ));
    }
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut system = Array2::zeros((s_n, s_n));
    let mut rhs = Array1::zeros(s_n);
    for s in 0..s_n {
        system[(s, s)] = 1.0;
        for a in 0..a_n {
            let w = probs[(s, a)];
            if w == 0.0 {
                continue;
            }
            let mut payoff = mdp.reward()[(s, a)];
            if tau > 0.0 {
                payoff -= tau * w.ln();
            }
            rhs[s] += w * payoff;
            for (sp, &p) in mdp.transition_row(s, a).iter().enumerate() {
                system[(s, sp)] -= mdp.discount() * w * p;
            }
        }
    }
    let v = linalg::solve(&system, &rhs)?;
    let mut q = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let expect: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vv)| p * vv)
                .sum();
            q[(s, a)] = mdp.reward()[(s, a)] + mdp.discount() * expect;
        }
    }
    Ok(SoftValues {
        v: VTable::new(v),
        q: QTable::new(q),
        tau,
    })
}

/// Soft optimal planning: iterates the soft Bellman optimality operator
/// `Q <- r + gamma P (tau * logsumexp(Q / tau))` and returns the soft
/// optimum together with the Boltzmann policy `pi ~ exp(Q / tau)`.
pub fn soft_optimal(mdp: &DiscountedMdp, tau: f64, iters: usize) -> Result<(SoftValues, Policy)> {
    if tau <= 0.0 {
        return Err(Error::arg(
            "soft planning needs tau > 0; use value iteration at tau = 0",
        ));
    }
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut q = Array2::zeros((s_n, a_n));
    let mut v = Array1::zeros(s_n);
    for _ in 0..iters {
        for s in 0..s_n {
            let scaled = q.row(s).mapv(|x| x / tau);
            v[s] = tau * log_sum_exp(scaled.view());
        }
        let mut next = Array2::zeros((s_n, a_n));
        for s in 0..s_n {
            for a in 0..a_n {
                let expect: f64 = mdp
                    .transition_row(s, a)
                    .iter()
                    .zip(&v)
                    .map(|(p, vv)| p * vv)
                    .sum();
                next[(s, a)] = mdp.reward()[(s, a)] + mdp.discount() * expect;
            }
        }
        q = next;
    }
    for s in 0..s_n {
        let scaled = q.row(s).mapv(|x| x / tau);
        v[s] = tau * log_sum_exp(scaled.view());
    }
    let policy = Policy::Stochastic(softmax_rows(&q.mapv(|x| x / tau)));
    Ok((
        SoftValues {
            v: VTable::new(v),
            q: QTable::new(q),
            tau,
        },
        policy,
    ))
}

/// Entropy-regularized NPG step:
/// `pi'(a | s) ~ pi(a | s)^{1 - eta tau / (1 - gamma)} exp(eta Q_tau(s, a) / (1 - gamma))`.
/// Requires `0 < eta <= (1 - gamma) / tau` and an interior policy.
pub fn entropy_npg_step(
    pi: &Policy,
    q_tau: &QTable,
    eta: f64,
    tau: f64,
    discount: f64,
) -> Result<Policy> {
    if tau <= 0.0 {
        return Err(Error::arg("entropy NPG needs tau > 0"));
    }
    let max_eta = (1.0 - discount) / tau;
    if !(eta > 0.0 && eta <= max_eta) {
        return Err(Error::arg(format!(
            "step size {eta} outside (0, {max_eta}] for tau = {tau}"
        )));
    }
    let probs = require_stochastic(pi)?;
    if probs.iter().any(|&p| p <= 0.0) {
        return Err(Error::arg("entropy NPG requires an interior policy"));
    }
    if probs.dim() != q_tau.values().dim() {
        return Err(Error::dim("policy and q-table shapes differ"));
    }
    let keep = 1.0 - eta * tau / (1.0 - discount);
    let scale = eta / (1.0 - discount);
    let logits = Array2::from_shape_fn(probs.dim(), |(s, a)| {
        keep * probs[(s, a)].ln() + scale * q_tau.values()[(s, a)]
    });
    Ok(Policy::Stochastic(softmax_rows(&logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{random_mdp, RngStream};
    use crate::mdp::{evaluate_policy, greedy_policy, solve_optimal};
    use ndarray::array;

    fn random_interior_policy(s: usize, a: usize, rng: &mut RngStream) -> Policy {
        let mut probs = Array2::from_shape_fn((s, a), |_| 0.2 + rng.next_f64());
        for mut row in probs.rows_mut() {
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        Policy::stochastic(probs).unwrap()
    }

    /// Value of an arbitrary (not necessarily normalized) action-weight
    /// matrix; the multilinear extension used by finite differences.
    fn value_of_weights(mdp: &DiscountedMdp, weights: &Array2<f64>, rho: &Distribution) -> f64 {
        let s_n = mdp.num_states();
        let a_n = mdp.num_actions();
        let mut system = Array2::zeros((s_n, s_n));
        let mut rhs = Array1::zeros(s_n);
        for s in 0..s_n {
            system[(s, s)] = 1.0;
            for a in 0..a_n {
                let w = weights[(s, a)];
                rhs[s] += w * mdp.reward()[(s, a)];
                for (sp, &p) in mdp.transition_row(s, a).iter().enumerate() {
                    system[(s, sp)] -= mdp.discount() * w * p;
                }
            }
        }
        let v = crate::linalg::solve(&system, &rhs).unwrap();
        v.iter().zip(rho.probs()).map(|(x, p)| x * p).sum()
    }

    #[test]
    fn direct_gradient_single_state_myopic() {
        let mdp = DiscountedMdp::new(array![[1.0], [1.0]], array![[1.0, 0.0]], 0.0).unwrap();
        let pi = Policy::uniform(1, 2);
        let grad = direct_gradient(&mdp, &pi, &Distribution::uniform(1)).unwrap();
        assert!((grad[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(grad[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn direct_gradient_matches_finite_differences() {
        let root = RngStream::new(1);
        for trial in 0..10u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(4, 3, 0.9, 0.8, &mut rng).unwrap();
            let pi = random_interior_policy(4, 3, &mut rng);
            let rho = Distribution::uniform(4);
            let grad = direct_gradient(&mdp, &pi, &rho).unwrap();
            let weights = pi.to_matrix(3);
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for s in 0..4 {
                for a in 0..3 {
                    let mut plus = weights.clone();
                    plus[(s, a)] += h;
                    let mut minus = weights.clone();
                    minus[(s, a)] -= h;
                    let fd = (value_of_weights(&mdp, &plus, &rho)
                        - value_of_weights(&mdp, &minus, &rho))
                        / (2.0 * h);
                    worst = worst.max((fd - grad[(s, a)]).abs());
                }
            }
            assert!(
                worst / scale <= 1e-5,
                "relative gradient error {}",
                worst / scale
            );
        }
    }

    #[test]
    fn direct_gradient_nonnegative_for_nonnegative_rewards() {
        let mut rng = RngStream::new(2);
        let mdp = random_mdp(4, 2, 0.9, 0.8, &mut rng).unwrap();
        let pi = random_interior_policy(4, 2, &mut rng);
        let grad = direct_gradient(&mdp, &pi, &Distribution::uniform(4)).unwrap();
        assert!(grad.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn projection_basics() {
        let on_simplex = array![0.2, 0.5, 0.3];
        let out = simplex_project(on_simplex.view());
        for (a, b) in out.iter().zip(on_simplex.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // KKT by hand: projecting (2, 0) clips to the vertex (1, 0).
        let out = simplex_project(array![2.0, 0.0].view());
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);

        let out = simplex_project(array![0.6, 0.6].view());
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_kkt_support_enumeration() {
        // Oracle: try every support set, solve the equality-constrained
        // problem and keep the KKT-feasible candidate.
        fn project_oracle(v: ArrayView1<'_, f64>) -> Array1<f64> {
            let n = v.len();
            let mut best: Option<(f64, Array1<f64>)> = None;
            for mask in 1u32..(1 << n) {
                let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                let sum: f64 = support.iter().map(|&i| v[i]).sum();
                let lambda = (1.0 - sum) / support.len() as f64;
                let mut x = Array1::zeros(n);
                let mut feasible = true;
                for &i in &support {
                    x[i] = v[i] + lambda;
                    if x[i] < -1e-12 {
                        feasible = false;
                    }
                }
                for i in 0..n {
                    if !support.contains(&i) && v[i] + lambda > 1e-12 {
                        feasible = false;
                    }
                }
                if feasible {
                    let dist: f64 = (0..n).map(|i| (x[i] - v[i]).powi(2)).sum();
                    if best.as_ref().map_or(true, |(d, _)| dist < *d) {
                        best = Some((dist, x));
                    }
                }
            }
            best.unwrap().1
        }

        let mut rng = RngStream::new(3);
        for _ in 0..100 {
            let n = 2 + rng.below(3);
            let v = Array1::from_shape_fn(n, |_| rng.uniform(-2.0, 2.0));
            let fast = simplex_project(v.view());
            let slow = project_oracle(v.view());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-9, "{fast:?} vs {slow:?}");
            }
        }
    }

    #[test]
    fn projected_step_fixed_when_rewards_flat() {
        // Equal rewards and gamma = 0: the gradient is constant per state,
        // and the projection absorbs constant shifts.
        let transition = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let reward = array![[0.4, 0.4], [0.4, 0.4]];
        let mdp = DiscountedMdp::new(transition, reward, 0.0).unwrap();
        let pi = Policy::stochastic(array![[0.3, 0.7], [0.6, 0.4]]).unwrap();
        let next = projected_pg_step(&mdp, &pi, &Distribution::uniform(2), 0.1).unwrap();
        let before = pi.to_matrix(2);
        let after = next.to_matrix(2);
        for (a, b) in after.iter().zip(before.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projected_ascent_is_monotone_below_smoothness_step() {
        let root = RngStream::new(4);
        let rho = Distribution::uniform(5);
        for trial in 0..5u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(5, 3, 0.9, 0.7, &mut rng).unwrap();
            let eta = 0.1f64.powi(0) * (1.0 - 0.9f64).powi(3) / (2.0 * 0.9 * 3.0);
            let mut pi = random_interior_policy(5, 3, &mut rng);
            let mut value = evaluate_policy(&mdp, &pi)
                .unwrap()
                .0
                .expectation(&rho)
                .unwrap();
            for _ in 0..50 {
                pi = projected_pg_step(&mdp, &pi, &rho, eta).unwrap();
                let next = evaluate_policy(&mdp, &pi)
                    .unwrap()
                    .0
                    .expectation(&rho)
                    .unwrap();
                assert!(next >= value - 1e-10, "value decreased: {next} < {value}");
                value = next;
            }
        }
    }

    #[test]
    fn projected_pg_satisfies_iteration_bound() {
        // Gradient-domination bound at T = 500 with the exact
        // distribution-mismatch coefficient of the instance.
        let mut rng = RngStream::new(5);
        let mdp = random_mdp(5, 3, 0.9, 0.8, &mut rng).unwrap();
        let rho = Distribution::uniform(5);
        let eta = (1.0 - 0.9f64).powi(3) / (2.0 * 0.9 * 3.0);
        let t_total = 500;

        let (q_star, _) = solve_optimal(&mdp).unwrap();
        let pi_star = greedy_policy(&q_star);
        let v_star_rho = q_star.state_values().expectation(&rho).unwrap();
        let d_star = mdp::occupancy(&mdp, &pi_star, &rho).unwrap();
        let mismatch = (0..5)
            .map(|s| {
                let d_s: f64 = (0..3).map(|a| d_star.probs()[s * 3 + a]).sum();
                d_s / rho.probs()[s]
            })
            .fold(0.0f64, f64::max);

        let mut pi = Policy::uniform(5, 3);
        let v0 = evaluate_policy(&mdp, &pi)
            .unwrap()
            .0
            .expectation(&rho)
            .unwrap();
        let mut min_gap = v_star_rho - v0;
        for _ in 0..t_total {
            pi = projected_pg_step(&mdp, &pi, &rho, eta).unwrap();
            let v = evaluate_policy(&mdp, &pi)
                .unwrap()
                .0
                .expectation(&rho)
                .unwrap();
            min_gap = min_gap.min(v_star_rho - v);
        }
        let bound = 4.0 * 5.0f64.sqrt() / (1.0 - 0.9)
            * mismatch
            * (2.0 * (v_star_rho - v0) / (eta * t_total as f64)).sqrt();
        assert!(
            min_gap <= bound + 1e-9,
            "min gap {min_gap} exceeds the iteration bound {bound}"
        );
    }

    #[test]
    fn softmax_gradient_vanishes_at_near_deterministic_optimum() {
        let mut rng = RngStream::new(6);
        let mdp = random_mdp(4, 2, 0.9, 0.8, &mut rng).unwrap();
        let (q_star, _) = solve_optimal(&mdp).unwrap();
        let pi_star = greedy_policy(&q_star);
        // Sharpen the optimal policy to near-determinism inside the softmax class.
        let probs = pi_star
            .to_matrix(2)
            .mapv(|x| if x > 0.5 { 1.0 - 1e-9 } else { 1e-9 });
        let lp = LogitPolicy::new(probs.mapv(f64::ln)).unwrap();
        let grad = softmax_gradient(&mdp, &lp, &Distribution::uniform(4)).unwrap();
        for &g in &grad {
            assert!(g.abs() < 1e-6, "gradient entry {g} not near zero");
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let root = RngStream::new(7);
        for trial in 0..10u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(4, 3, 0.9, 0.8, &mut rng).unwrap();
            let rho = Distribution::uniform(4);
            let lp = LogitPolicy::new(Array2::from_shape_fn((4, 3), |_| rng.uniform(-1.0, 1.0)))
                .unwrap();
            let grad = softmax_gradient(&mdp, &lp, &rho).unwrap();
            let h = 1e-6;
            let mut worst: f64 = 0.0;
            let scale = grad.iter().fold(1e-12f64, |m, g| m.max(g.abs()));
            for s in 0..4 {
                for a in 0..3 {
                    let mut plus = lp.theta().clone();
                    plus[(s, a)] += h;
                    let mut minus = lp.theta().clone();
                    minus[(s, a)] -= h;
                    let value =
                        |theta: &Array2<f64>| value_of_weights(&mdp, &softmax_rows(theta), &rho);
                    let fd = (value(&plus) - value(&minus)) / (2.0 * h);
                    worst = worst.max((fd - grad[(s, a)]).abs());
                }
            }
            assert!(
                worst / scale <= 1e-5,
                "relative gradient error {}",
                worst / scale
            );
        }
    }

    #[test]
    fn softmax_ascent_is_monotone_at_theorem_step() {
        let mut rng = RngStream::new(8);
        let mdp = random_mdp(4, 3, 0.9, 0.7, &mut rng).unwrap();
        let rho = Distribution::uniform(4);
        let eta = (1.0 - 0.9f64).powi(3) / 8.0;
        let mut lp = LogitPolicy::uniform(4, 3);
        let mut value = evaluate_policy(&mdp, &lp.to_policy())
            .unwrap()
            .0
            .expectation(&rho)
            .unwrap();
        for _ in 0..200 {
            lp = softmax_pg_step(&mdp, &lp, &rho, eta).unwrap();
            let next = evaluate_policy(&mdp, &lp.to_policy())
                .unwrap()
                .0
                .expectation(&rho)
                .unwrap();
            assert!(next >= value - 1e-10);
            value = next;
        }
    }

    #[test]
    fn npg_step_basics() {
        // Constant Q per state leaves the policy unchanged.
        let pi = Policy::stochastic(array![[0.3, 0.7]]).unwrap();
        let q = QTable::new(array![[2.0, 2.0]]);
        let next = npg_step(&pi, &q, 0.5, 0.9).unwrap();
        let after = next.to_matrix(2);
        assert!((after[(0, 0)] - 0.3).abs() < 1e-12);

        // Logistic arithmetic: uniform policy, Q = (1, 0), eta/(1-gamma) = 1.
        let pi = Policy::uniform(1, 2);
        let q = QTable::new(array![[1.0, 0.0]]);
        let next = npg_step(&pi, &q, 0.5, 0.5).unwrap();
        let after = next.to_matrix(2);
        let e = std::f64::consts::E;
        assert!((after[(0, 0)] - e / (1.0 + e)).abs() < 1e-12);
        assert!((after[(0, 1)] - 1.0 / (1.0 + e)).abs() < 1e-12);

        // Non-interior policies are rejected.
        let det = Policy::stochastic(array![[1.0, 0.0]]).unwrap();
        assert!(npg_step(&det, &q, 0.5, 0.5).is_err());
    }

    #[test]
    fn npg_absorbs_per_state_constants() {
        let mut rng = RngStream::new(9);
        let pi = random_interior_policy(4, 3, &mut rng);
        let q = QTable::new(Array2::from_shape_fn((4, 3), |_| 5.0 * rng.next_f64()));
        let shifted = QTable::new(Array2::from_shape_fn((4, 3), |(s, a)| {
            q.values()[(s, a)] + 3.0 * s as f64
        }));
        let a = npg_step(&pi, &q, 0.7, 0.9).unwrap().to_matrix(3);
        let b = npg_step(&pi, &shifted, 0.7, 0.9).unwrap().to_matrix(3);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn npg_probability_and_logit_forms_agree() {
        let mut rng = RngStream::new(14);
        let mdp = random_mdp(4, 3, 0.9, 0.8, &mut rng).unwrap();
        let mut pi = Policy::uniform(4, 3);
        let mut lp = LogitPolicy::uniform(4, 3);
        for _ in 0..10 {
            let (_, q) = evaluate_policy(&mdp, &pi).unwrap();
            pi = npg_step(&pi, &q, 0.5, 0.9).unwrap();
            let (_, q_lp) = evaluate_policy(&mdp, &lp.to_policy()).unwrap();
            lp = npg_step_logits(&lp, &q_lp, 0.5, 0.9).unwrap();
            let a = pi.to_matrix(3);
            let b = lp.to_policy().to_matrix(3);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn npg_satisfies_sublinear_bound() {
        let root = RngStream::new(10);
        for trial in 0..3u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(5, 4, 0.9, 0.8, &mut rng).unwrap();
            let rho = Distribution::uniform(5);
            let (q_star, _) = solve_optimal(&mdp).unwrap();
            let v_star_rho = q_star.state_values().expectation(&rho).unwrap();
            let eta = 1.0;
            let bound_constant = (4.0f64).ln() / eta + 1.0 / (1.0 - 0.9f64).powi(2);
            let mut lp = LogitPolicy::uniform(5, 4);
            for t in 1..=300usize {
                let (_, q) = evaluate_policy(&mdp, &lp.to_policy()).unwrap();
                lp = npg_step_logits(&lp, &q, eta, 0.9).unwrap();
                let v = evaluate_policy(&mdp, &lp.to_policy())
                    .unwrap()
                    .0
                    .expectation(&rho)
                    .unwrap();
                assert!(
                    v_star_rho - v <= bound_constant / t as f64 + 1e-9,
                    "trial {trial}, t = {t}: gap {} above {}",
                    v_star_rho - v,
                    bound_constant / t as f64
                );
            }
        }
    }

    #[test]
    fn soft_evaluate_reductions() {
        let mut rng = RngStream::new(11);
        let mdp = random_mdp(4, 2, 0.9, 0.8, &mut rng).unwrap();
        let pi = random_interior_policy(4, 2, &mut rng);
        let soft = soft_evaluate(&mdp, &pi, 0.0).unwrap();
        let (v, q) = evaluate_policy(&mdp, &pi).unwrap();
        assert!(soft.v.linf_distance(&v) < 1e-10);
        assert!(soft.q.linf_distance(&q) < 1e-10);

        // Single state and action: entropy of a point mass is zero.
        let single = DiscountedMdp::new(array![[1.0]], array![[0.7]], 0.5).unwrap();
        let pi1 = Policy::stochastic(array![[1.0]]).unwrap();
        let soft = soft_evaluate(&single, &pi1, 0.3).unwrap();
        assert!((soft.v.values()[0] - 0.7 / 0.5).abs() < 1e-10);

        // Uniform policy over A actions with constant reward c:
        // V = (c + tau log A) / (1 - gamma).
        let uniform_mdp =
            DiscountedMdp::new(array![[1.0], [1.0], [1.0]], array![[0.4, 0.4, 0.4]], 0.5).unwrap();
        let pi_u = Policy::uniform(1, 3);
        let tau = 0.2;
        let soft = soft_evaluate(&uniform_mdp, &pi_u, tau).unwrap();
        let expected = (0.4 + tau * 3.0f64.ln()) / 0.5;
        assert!((soft.v.values()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn soft_optimal_consistency() {
        let mut rng = RngStream::new(12);
        let mdp = random_mdp(4, 3, 0.9, 0.8, &mut rng).unwrap();
        let tau = 0.2;
        let (soft, pi) = soft_optimal(&mdp, tau, 800).unwrap();
        // Soft evaluation of the soft-optimal policy reproduces V_tau*.
        let eval = soft_evaluate(&mdp, &pi, tau).unwrap();
        assert!(eval.v.linf_distance(&soft.v) < 1e-8);

        // Value bound: v_tau <= (1 + tau log A) / (1 - gamma).
        let cap = (1.0 + tau * 3.0f64.ln()) / (1.0 - 0.9);
        for &x in soft.v.values() {
            assert!(x <= cap + 1e-9);
        }

        // Near-greedy as tau -> 0.
        let (q_star, _) = solve_optimal(&mdp).unwrap();
        let greedy = greedy_policy(&q_star);
        let (_, pi_small) = soft_optimal(&mdp, 1e-6, 2000).unwrap();
        let probs = pi_small.to_matrix(3);
        for s in 0..4 {
            let mut best = 0;
            for a in 1..3 {
                if probs[(s, a)] > probs[(s, best)] {
                    best = a;
                }
            }
            assert_eq!(best, greedy.as_deterministic().unwrap()[s]);
        }

        // Regularized optimum is near-optimal for the raw objective.
        let rho = Distribution::uniform(4);
        let (v_soft_pi, _) = evaluate_policy(&mdp, &pi).unwrap();
        let v_star_rho = q_star.state_values().expectation(&rho).unwrap();
        let slack = tau * 3.0f64.ln() / (1.0 - 0.9);
        assert!(v_soft_pi.expectation(&rho).unwrap() >= v_star_rho - slack - 1e-9);
    }

    #[test]
    fn single_state_soft_optimal_matches_boltzmann() {
        let mdp = DiscountedMdp::new(array![[1.0], [1.0]], array![[1.0, 0.0]], 0.0).unwrap();
        let (_, pi) = soft_optimal(&mdp, 1.0, 50).unwrap();
        let probs = pi.to_matrix(2);
        let e = std::f64::consts::E;
        assert!((probs[(0, 0)] - e / (e + 1.0)).abs() < 1e-10);
    }

    #[test]
    fn entropy_npg_step_cases() {
        // eta = (1 - gamma) / tau zeroes the old-policy exponent.
        let pi = Policy::stochastic(array![[0.9, 0.1]]).unwrap();
        let q = QTable::new(array![[0.3, 0.8]]);
        let tau = 0.2;
        let gamma = 0.9;
        let eta = (1.0 - gamma) / tau;
        let next = entropy_npg_step(&pi, &q, eta, tau, gamma)
            .unwrap()
            .to_matrix(2);
        let boltzmann = softmax_rows(&q.values().mapv(|x| x / tau));
        for (a, b) in next.iter().zip(boltzmann.iter()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Constant Q and uniform policy stay uniform.
        let pi = Policy::uniform(1, 3);
        let q = QTable::new(array![[1.0, 1.0, 1.0]]);
        let next = entropy_npg_step(&pi, &q, 0.2, tau, gamma)
            .unwrap()
            .to_matrix(3);
        for &x in &next {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }

        // Step sizes above (1 - gamma) / tau are rejected.
        assert!(entropy_npg_step(&pi, &q, eta * 1.01, tau, gamma).is_err());
    }

    #[test]
    fn entropy_npg_converges_linearly() {
        let mut rng = RngStream::new(13);
        let mdp = random_mdp(5, 4, 0.9, 0.8, &mut rng).unwrap();
        let tau = 0.1;
        let gamma = 0.9;
        let (soft_star, _) = soft_optimal(&mdp, tau, 1500).unwrap();
        let prefactor = 15.0 * (1.0 + tau * 4.0f64.ln()) / (1.0 - gamma);
        for &eta in &[
            (1.0 - gamma) / tau,
            0.5 * (1.0 - gamma) * (1.0 - gamma) / tau,
        ] {
            let mut pi = Policy::uniform(5, 4);
            for t in 1..=200usize {
                let q_tau = soft_evaluate(&mdp, &pi, tau).unwrap().q;
                pi = entropy_npg_step(&pi, &q_tau, eta, tau, gamma).unwrap();
                let v_t = soft_evaluate(&mdp, &pi, tau).unwrap().v;
                let gap = soft_star.v.linf_distance(&v_t);
                let bound = prefactor * (1.0 - eta * tau).powi(t as i32 - 1);
                assert!(gap <= bound + 1e-9, "t = {t}: {gap} > {bound}");
                // Iterates stay strictly positive.
                assert!(pi.is_interior());
            }
        }
    }
}
