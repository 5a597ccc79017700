//! Distributionally robust MDPs under total-variation uncertainty: scalar
//! dual evaluation of the worst-case expectation, the robust Bellman
//! operator, robust value iteration (DRVI), robust policy evaluation and
//! the model-based robust learner.

use ndarray::{Array1, Array2, ArrayView1};

use crate::envs::TransitionDataset;
use crate::error::{Error, Result};
use crate::mdp::{self, DiscountedMdp, Policy, QTable, VTable};

/// A nominal kernel with a total-variation uncertainty radius applied
/// rectangularly to every state-action pair.
#[derive(Debug, Clone)]
pub struct RobustMdp {
    nominal: DiscountedMdp,
    radius: f64,
}

impl RobustMdp {
    pub fn new(nominal: DiscountedMdp, radius: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&radius) {
            return Err(Error::arg(format!("TV radius {radius} outside [0, 1]")));
        }
        Ok(RobustMdp { nominal, radius })
    }

    pub fn nominal(&self) -> &DiscountedMdp {
        &self.nominal
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

/// Worst-case expectation of `v >= 0` over the TV ball of radius `sigma`
/// around `p`, via the scalar dual
/// `max_alpha { p . [v]_alpha - sigma (alpha - min_s' [v]_alpha(s')) }`.
/// The objective is piecewise linear in `alpha`, so it is maximized by
/// scanning the breakpoints (the distinct entries of `v`). For `alpha` in
/// `[v_min, v_max]` the inner minimum is just `v_min`.
pub fn tv_worst_case(p: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, sigma: f64) -> Result<f64> {
    if p.len() != v.len() {
        return Err(Error::dim(format!(
            "distribution of length {} against values of length {}",
            p.len(),
            v.len()
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::arg(format!("TV radius {sigma} outside [0, 1]")));
    }
    if let Some(&bad) = v.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::arg(format!(
            "value entry {bad}; the dual requires v >= 0"
        )));
    }
    let v_min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best = f64::NEG_INFINITY;
    for &alpha in v.iter() {
        let truncated: f64 = p
            .iter()
            .zip(v.iter())
            .map(|(&pi, &vi)| pi * vi.min(alpha))
            .sum();
        let objective = truncated - sigma * (alpha - v_min);
        if objective > best {
            best = objective;
        }
    }
    Ok(best)
}

/// Robust Bellman operator:
/// `T_sigma(Q)(s, a) = r(s, a) + gamma inf_{P in U_sigma(P0_{s,a})} P v`
/// with `v(s) = max_a Q(s, a)`.
pub fn robust_bellman(rmdp: &RobustMdp, q: &QTable) -> Result<QTable> {
    let nominal = rmdp.nominal();
    let (s_n, a_n) = (nominal.num_states(), nominal.num_actions());
    if q.values().dim() != (s_n, a_n) {
        return Err(Error::dim("q-table shape does not match rmdp"));
    }
    let v: Array1<f64> = q
        .values()
        .rows()
        .into_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut out = Array2::zeros((s_n, a_n));
    for s in 0..s_n {
        for a in 0..a_n {
            let worst = tv_worst_case(nominal.transition_row(s, a), v.view(), rmdp.radius())?;
            out[(s, a)] = nominal.reward()[(s, a)] + nominal.discount() * worst;
        }
    }
    Ok(QTable::new(out))
}

/// Distributionally robust value iteration from `Q_0 = 0`; returns the
/// final Q-estimate and its greedy policy.
pub fn drvi(rmdp: &RobustMdp, iters: usize) -> Result<(QTable, Policy)> {
    let nominal = rmdp.nominal();
    let mut q = QTable::zeros(nominal.num_states(), nominal.num_actions());
    for _ in 0..iters {
        q = robust_bellman(rmdp, &q)?;
    }
    let pi = mdp::greedy_policy(&q);
    Ok((q, pi))
}

/// Robust value of a policy: fixed-point iteration of the policy-restricted
/// robust operator
/// `V(s) <- sum_a pi(a | s) [r(s, a) + gamma inf_P P V]` from `V = 0`.
pub fn robust_eval(rmdp: &RobustMdp, pi: &Policy, iters: usize) -> Result<VTable> {
    let nominal = rmdp.nominal();
    pi.validate_for(nominal.num_states(), nominal.num_actions())?;
    let s_n = nominal.num_states();
    let a_n = nominal.num_actions();
    let mut v = Array1::zeros(s_n);
    for _ in 0..iters {
        let mut next = Array1::zeros(s_n);
        for s in 0..s_n {
            let mut acc = 0.0;
            for a in 0..a_n {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                let worst = tv_worst_case(nominal.transition_row(s, a), v.view(), rmdp.radius())?;
                acc += w * (nominal.reward()[(s, a)] + nominal.discount() * worst);
            }
            next[s] = acc;
        }
        v = next;
    }
    Ok(VTable::new(v))
}

/// Model-based robust learning: builds the empirical nominal kernel from
/// generative samples, forms the empirical robust MDP and runs DRVI.
pub fn robust_learn(
    ds: &TransitionDataset,
    reward: &Array2<f64>,
    discount: f64,
    sigma: f64,
    iters: usize,
) -> Result<Policy> {
    if reward.dim() != (ds.num_states(), ds.num_actions()) {
        return Err(Error::dim("reward table does not match dataset dimensions"));
    }
    let p_hat = ds.empirical_kernel();
    let nominal = DiscountedMdp::new(p_hat, reward.clone(), discount)?;
    let rmdp = RobustMdp::new(nominal, sigma)?;
    let (_, pi) = drvi(&rmdp, iters)?;
    Ok(pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_generative, random_mdp, RngStream};
    use crate::genmodel::{model_based_plan, PerturbationConfig};
    use crate::mdp::{evaluate_policy, solve_optimal, value_iteration};
    use ndarray::array;

    /// Primal oracle: exact LP optimum over the TV ball by greedy mass
    /// transport from the most valuable states to the least valuable one.
    pub(crate) fn tv_worst_case_lp(
        p: ArrayView1<'_, f64>,
        v: ArrayView1<'_, f64>,
        sigma: f64,
    ) -> f64 {
        let mut q: Vec<f64> = p.to_vec();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap().then(i.cmp(&j)));
        let imin = *order.last().unwrap();
        let mut budget = sigma;
        for &i in &order {
            if budget <= 0.0 || v[i] <= v[imin] {
                break;
            }
            let take = budget.min(q[i]);
            q[i] -= take;
            q[imin] += take;
            budget -= take;
        }
        q.iter().zip(v.iter()).map(|(qi, vi)| qi * vi).sum()
    }

    #[test]
    fn dual_trivial_cases() {
        let p = array![0.5, 0.5];
        let v = array![0.0, 1.0];
        // sigma = 0: no perturbation allowed.
        assert_eq!(tv_worst_case(p.view(), v.view(), 0.0).unwrap(), 0.5);
        // Hand case: worst kernel (0.75, 0.25) gives 0.25.
        assert!((tv_worst_case(p.view(), v.view(), 0.25).unwrap() - 0.25).abs() < 1e-12);
        // Radius 1 covers the simplex: min v.
        assert!((tv_worst_case(p.view(), v.view(), 1.0).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn dual_rejects_negative_values() {
        let p = array![1.0];
        let v = array![-0.5];
        assert!(tv_worst_case(p.view(), v.view(), 0.1).is_err());
    }

    #[test]
    fn dual_matches_lp_oracle() {
        let root = RngStream::new(1);
        for trial in 0..300u64 {
            let mut rng = root.split(trial);
            let n = 2 + rng.below(5);
            let mut p = Array1::from_shape_fn(n, |_| rng.next_f64_open());
            let total = p.sum();
            p.mapv_inplace(|x| x / total);
            let v = Array1::from_shape_fn(n, |_| 10.0 * rng.next_f64());
            let sigma = rng.next_f64();
            let dual = tv_worst_case(p.view(), v.view(), sigma).unwrap();
            let lp = tv_worst_case_lp(p.view(), v.view(), sigma);
            assert!((dual - lp).abs() < 1e-9, "dual {dual} vs lp {lp}");
        }
    }

    #[test]
    fn dual_monotone_in_radius_and_bounded() {
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let n = 2 + rng.below(5);
            let mut p = Array1::from_shape_fn(n, |_| rng.next_f64_open());
            let total = p.sum();
            p.mapv_inplace(|x| x / total);
            let v = Array1::from_shape_fn(n, |_| 5.0 * rng.next_f64());
            let v_min = v.iter().copied().fold(f64::INFINITY, f64::min);
            let nominal: f64 = p.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let mut prev = f64::INFINITY;
            for &sigma in &[0.0, 0.1, 0.3, 0.6, 1.0] {
                let w = tv_worst_case(p.view(), v.view(), sigma).unwrap();
                assert!(w <= prev + 1e-12);
                assert!(w >= v_min - 1e-12 && w <= nominal + 1e-12);
                prev = w;
            }
        }
    }

    #[test]
    fn robust_bellman_reduces_to_standard_at_zero_radius() {
        let mut rng = RngStream::new(3);
        let mdp = random_mdp(5, 2, 0.9, 0.8, &mut rng).unwrap();
        let rmdp = RobustMdp::new(mdp.clone(), 0.0).unwrap();
        let q = QTable::new(Array2::from_shape_fn((5, 2), |_| 10.0 * rng.next_f64()));
        let robust = robust_bellman(&rmdp, &q).unwrap();
        let standard = crate::mdp::bellman_optimality(&mdp, &q).unwrap();
        assert!(robust.linf_distance(&standard) < 1e-12);
    }

    #[test]
    fn single_state_ignores_radius() {
        let mdp = DiscountedMdp::new(array![[1.0], [1.0]], array![[0.4, 0.9]], 0.9).unwrap();
        for &sigma in &[0.0, 0.3, 1.0] {
            let rmdp = RobustMdp::new(mdp.clone(), sigma).unwrap();
            let q = QTable::new(array![[1.0, 2.0]]);
            let out = robust_bellman(&rmdp, &q).unwrap();
            assert!((out.values()[(0, 0)] - (0.4 + 0.9 * 2.0)).abs() < 1e-12);
            assert!((out.values()[(0, 1)] - (0.9 + 0.9 * 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn robust_operator_is_gamma_contraction() {
        let root = RngStream::new(4);
        for trial in 0..200u64 {
            let mut rng = root.split(trial);
            let mdp = random_mdp(5, 2, 0.9, 0.7, &mut rng).unwrap();
            let rmdp = RobustMdp::new(mdp, rng.next_f64()).unwrap();
            let q1 = QTable::new(Array2::from_shape_fn((5, 2), |_| 10.0 * rng.next_f64()));
            let q2 = QTable::new(Array2::from_shape_fn((5, 2), |_| 10.0 * rng.next_f64()));
            let lhs = robust_bellman(&rmdp, &q1)
                .unwrap()
                .linf_distance(&robust_bellman(&rmdp, &q2).unwrap());
            assert!(lhs <= 0.9 * q1.linf_distance(&q2) + 1e-12);
        }
    }

    #[test]
    fn drvi_zero_radius_tracks_value_iteration() {
        let mut rng = RngStream::new(5);
        let mdp = random_mdp(4, 2, 0.9, 0.8, &mut rng).unwrap();
        let rmdp = RobustMdp::new(mdp.clone(), 0.0).unwrap();
        let (q, _) = drvi(&rmdp, 30).unwrap();
        let exact = value_iteration(&mdp, &QTable::zeros(4, 2), 30).unwrap();
        assert!(q.linf_distance(&exact) < 1e-12);

        let (q0, pi0) = drvi(&rmdp, 0).unwrap();
        assert!(q0.values().iter().all(|&x| x == 0.0));
        assert_eq!(pi0.as_deterministic().unwrap(), &[0, 0, 0, 0]);
    }

    #[test]
    fn drvi_contracts_to_its_fixed_point() {
        let mut rng = RngStream::new(6);
        let mdp = random_mdp(5, 2, 0.9, 0.7, &mut rng).unwrap();
        let rmdp = RobustMdp::new(mdp, 0.3).unwrap();
        let t = 40;
        let (q_t, _) = drvi(&rmdp, t).unwrap();
        let (q_ref, _) = drvi(&rmdp, 4 * t).unwrap();
        let bound = 0.9f64.powi(t as i32) / 0.1;
        assert!(q_t.linf_distance(&q_ref) <= bound);
        for &x in q_t.values() {
            assert!((0.0..=10.0 + 1e-9).contains(&x));
        }
    }

    #[test]
    fn robust_value_never_exceeds_nominal_value() {
        let mut rng = RngStream::new(7);
        let mdp = random_mdp(5, 3, 0.9, 0.7, &mut rng).unwrap();
        let (q_star, _) = solve_optimal(&mdp).unwrap();
        let rmdp = RobustMdp::new(mdp, 0.4).unwrap();
        let (q_rob, _) = drvi(&rmdp, 200).unwrap();
        for (r, s) in q_rob.values().iter().zip(q_star.values()) {
            assert!(*r <= s + 1e-9);
        }
    }

    #[test]
    fn robust_eval_reductions() {
        // sigma = 0 matches exact policy evaluation after enough sweeps.
        let mut rng = RngStream::new(8);
        let mdp = random_mdp(5, 2, 0.9, 0.8, &mut rng).unwrap();
        let pi = Policy::uniform(5, 2);
        let rmdp = RobustMdp::new(mdp.clone(), 0.0).unwrap();
        let iters = ((1e-7f64).ln() / 0.9f64.ln()).ceil() as usize;
        let v = robust_eval(&rmdp, &pi, iters).unwrap();
        let (v_exact, _) = evaluate_policy(&mdp, &pi).unwrap();
        assert!(v.linf_distance(&v_exact) < 1e-6);

        // Single state: V = r(pi) / (1 - gamma) regardless of sigma.
        let single = DiscountedMdp::new(array![[1.0], [1.0]], array![[0.2, 0.6]], 0.5).unwrap();
        for &sigma in &[0.0, 0.5, 1.0] {
            let rm = RobustMdp::new(single.clone(), sigma).unwrap();
            let v = robust_eval(&rm, &Policy::deterministic(vec![1]), 100).unwrap();
            assert!((v.values()[0] - 0.6 / 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn robust_eval_lower_bounds_sampled_kernels() {
        // Worst case over the ball is no better than the value under any
        // sampled kernel inside the ball.
        let mut rng = RngStream::new(9);
        let mdp = random_mdp(4, 2, 0.9, 1.0, &mut rng).unwrap();
        let sigma = 0.2;
        let rmdp = RobustMdp::new(mdp.clone(), sigma).unwrap();
        let pi = Policy::uniform(4, 2);
        let v_rob = robust_eval(&rmdp, &pi, 400).unwrap();

        for _ in 0..50 {
            // Perturb each row within TV distance sigma: move a random
            // amount of mass from one donor state to one receiver state.
            let mut kernel = mdp.transition().clone();
            for mut row in kernel.rows_mut() {
                let donor = rng.below(4);
                let receiver = rng.below(4);
                let amount = (rng.next_f64() * sigma).min(row[donor]);
                row[donor] -= amount;
                row[receiver] += amount;
            }
            let sampled = DiscountedMdp::new(kernel, mdp.reward().clone(), 0.9).unwrap();
            let (v_sample, _) = evaluate_policy(&sampled, &pi).unwrap();
            for (rob, smp) in v_rob.values().iter().zip(v_sample.values()) {
                assert!(*rob <= smp + 1e-8, "robust value above sampled kernel");
            }
        }
    }

    #[test]
    fn robust_learn_recovers_deterministic_nominal() {
        let mut rng = RngStream::new(10);
        let mdp = random_mdp(5, 2, 0.9, 1.0 / 5.0, &mut rng).unwrap();
        let ds = collect_generative(&mdp, 1, &RngStream::new(0)).unwrap();
        let sigma = 0.3;
        let learned = robust_learn(&ds, mdp.reward(), 0.9, sigma, 150).unwrap();
        let rmdp = RobustMdp::new(mdp, sigma).unwrap();
        let (_, direct) = drvi(&rmdp, 150).unwrap();
        assert_eq!(learned, direct);
    }

    #[test]
    fn robust_learn_zero_radius_matches_model_based_plan() {
        let mut rng = RngStream::new(11);
        let mdp = random_mdp(5, 2, 0.9, 0.8, &mut rng).unwrap();
        let ds = collect_generative(&mdp, 200, &RngStream::new(3)).unwrap();
        let robust = robust_learn(&ds, mdp.reward(), 0.9, 0.0, 400).unwrap();
        let (plan, _) =
            model_based_plan(&ds, mdp.reward(), 0.9, &PerturbationConfig::none()).unwrap();
        assert_eq!(robust, plan);
    }

    #[test]
    fn robust_suboptimality_shrinks_with_samples() {
        let mut rng = RngStream::new(12);
        let mdp = random_mdp(5, 2, 0.9, 0.7, &mut rng).unwrap();
        let sigma = 0.3;
        let rmdp = RobustMdp::new(mdp.clone(), sigma).unwrap();
        let eval_iters = 250;
        let (q_opt, pi_opt) = drvi(&rmdp, eval_iters).unwrap();
        let _ = q_opt;
        let v_opt = robust_eval(&rmdp, &pi_opt, eval_iters).unwrap();

        let mut medians = Vec::new();
        for &n in &[100usize, 1_000, 10_000] {
            let mut gaps = Vec::new();
            for seed in 0..20u64 {
                let ds = collect_generative(&mdp, n, &RngStream::new(700 + seed)).unwrap();
                let pi_hat = robust_learn(&ds, mdp.reward(), 0.9, sigma, eval_iters).unwrap();
                let v_hat = robust_eval(&rmdp, &pi_hat, eval_iters).unwrap();
                let gap = v_opt
                    .values()
                    .iter()
                    .zip(v_hat.values())
                    .map(|(o, h)| o - h)
                    .fold(0.0, f64::max);
                gaps.push(gap);
            }
            gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(0.5 * (gaps[9] + gaps[10]));
        }
        assert!(
            medians[0] >= medians[1] - 1e-9 && medians[1] >= medians[2] - 1e-9,
            "medians not nonincreasing: {medians:?}"
        );
        assert!(
            medians[2] <= 0.15,
            "median robust gap at N=1e4 is {}",
            medians[2]
        );
    }
}
