//! Python bindings for the tabrl laboratory: the discounted MDP type,
//! generative datasets, planning and learning entry points, the robust
//! dual, and the tabular preference-optimization toolkit.
//!
//! Matrices cross the boundary as plain nested lists; everything here runs
//! at tabular scale where conversion cost is irrelevant.

use ndarray::{Array1, Array2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tabrl_core::envs::{self, RngStream};
use tabrl_core::genmodel::{self, LearningRateSchedule, PerturbationConfig, ScheduleKind};
use tabrl_core::mdp::{self, Distribution, Policy, QTable};
use tabrl_core::offline::{self, PenaltyConfig};
use tabrl_core::policyopt::{self, LogitPolicy};
use tabrl_core::rlhf;
use tabrl_core::robust::{self, RobustMdp};

fn err(e: tabrl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_array2(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if nrows == 0 || ncols == 0 {
        return Err(PyValueError::new_err(format!("{what}: empty matrix")));
    }
    let mut flat = Vec::with_capacity(nrows * ncols);
    for (i, row) in rows.into_iter().enumerate() {
        if row.len() != ncols {
            return Err(PyValueError::new_err(format!("{what}: ragged row {i}")));
        }
        flat.extend(row);
    }
    Array2::from_shape_vec((nrows, ncols), flat)
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn to_lists(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn policy_to_actions(pi: &Policy) -> PyResult<Vec<usize>> {
    pi.as_deterministic()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| PyValueError::new_err("expected a deterministic policy"))
}

/// Tabular discounted MDP with a row-stochastic `(S*A, S)` kernel.
#[pyclass(name = "DiscountedMdp", skip_from_py_object)]
#[derive(Clone)]
struct PyDiscountedMdp {
    inner: mdp::DiscountedMdp,
}

#[pymethods]
impl PyDiscountedMdp {
    /// Build from explicit arrays: `transitions` has one row per (s, a)
    /// pair in row-major order, `rewards` is S x A.
    #[new]
    fn new(transitions: Vec<Vec<f64>>, rewards: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        let transition = to_array2(transitions, "transitions")?;
        let reward = to_array2(rewards, "rewards")?;
        Ok(Self {
            inner: mdp::DiscountedMdp::new(transition, reward, gamma).map_err(err)?,
        })
    }

    /// Seeded random instance; rows have `ceil(sparsity * S)` support states.
    #[staticmethod]
    fn random(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        sparsity: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut rng = RngStream::new(seed);
        Ok(Self {
            inner: envs::random_mdp(num_states, num_actions, gamma, sparsity, &mut rng)
                .map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mdp::DiscountedMdp::from_text(text).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.discount()
    }

    fn rewards(&self) -> Vec<Vec<f64>> {
        to_lists(self.inner.reward())
    }

    fn transitions(&self) -> Vec<Vec<f64>> {
        to_lists(self.inner.transition())
    }

    /// Q-value iteration to convergence; returns `(q, iterations)`.
    fn solve(&self) -> PyResult<(Vec<Vec<f64>>, usize)> {
        let (q, iters) = mdp::solve_optimal(&self.inner).map_err(err)?;
        Ok((to_lists(q.values()), iters))
    }

    /// Exact evaluation of a deterministic policy; returns `(v, q)`.
    fn evaluate(&self, actions: Vec<usize>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let (v, q) =
            mdp::evaluate_policy(&self.inner, &Policy::deterministic(actions)).map_err(err)?;
        Ok((v.values().to_vec(), to_lists(q.values())))
    }

    /// Discounted state-action occupancy of a deterministic policy under a
    /// uniform initial distribution, flattened row-major.
    fn occupancy(&self, actions: Vec<usize>) -> PyResult<Vec<f64>> {
        let rho = Distribution::uniform(self.inner.num_states());
        let d = mdp::occupancy(&self.inner, &Policy::deterministic(actions), &rho).map_err(err)?;
        Ok(d.probs().to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "DiscountedMdp(S={}, A={}, gamma={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.discount()
        )
    }
}

/// Counted transition samples from a generative model or offline draws.
#[pyclass(name = "TransitionDataset", skip_from_py_object)]
#[derive(Clone)]
struct PyTransitionDataset {
    inner: envs::TransitionDataset,
}

#[pymethods]
impl PyTransitionDataset {
    #[getter]
    fn total(&self) -> u64 {
        self.inner.total()
    }

    fn visits(&self, state: usize, action: usize) -> u64 {
        self.inner.visits(state, action)
    }

    fn empirical_kernel(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.empirical_kernel())
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __repr__(&self) -> String {
        format!(
            "TransitionDataset(S={}, A={}, total={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.total()
        )
    }
}

/// Apply the Bellman optimality operator `iters` times to the zero table.
#[pyfunction]
fn value_iteration(mdp: &PyDiscountedMdp, iters: usize) -> PyResult<Vec<Vec<f64>>> {
    let q0 = QTable::zeros(mdp.inner.num_states(), mdp.inner.num_actions());
    let q = mdp::value_iteration(&mdp.inner, &q0, iters).map_err(err)?;
    Ok(to_lists(q.values()))
}

/// Greedy action per state, ties to the lowest index.
#[pyfunction]
fn greedy_policy(q: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    let q = QTable::new(to_array2(q, "q")?);
    policy_to_actions(&mdp::greedy_policy(&q))
}

/// Draw `n_per_pair` next-state samples for every pair from the seed.
#[pyfunction]
fn collect_generative(
    mdp: &PyDiscountedMdp,
    n_per_pair: usize,
    seed: u64,
) -> PyResult<PyTransitionDataset> {
    let ds =
        envs::collect_generative(&mdp.inner, n_per_pair, &RngStream::new(seed)).map_err(err)?;
    Ok(PyTransitionDataset { inner: ds })
}

/// Model-based planning on the empirical MDP; `xi > 0` perturbs rewards.
#[pyfunction]
#[pyo3(signature = (dataset, rewards, gamma, xi = 0.0, perturb_seed = 0))]
fn model_based_plan(
    dataset: &PyTransitionDataset,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    xi: f64,
    perturb_seed: u64,
) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let reward = to_array2(rewards, "rewards")?;
    let cfg = PerturbationConfig::new(xi, perturb_seed).map_err(err)?;
    let (pi, q) = genmodel::model_based_plan(&dataset.inner, &reward, gamma, &cfg).map_err(err)?;
    Ok((policy_to_actions(&pi)?, to_lists(q.values())))
}

/// Synchronous Q-learning from the zero table.
#[pyfunction]
#[pyo3(signature = (mdp, iters, seed, c = 1.0, schedule = "rescaled-linear"))]
fn sync_q_learning(
    mdp: &PyDiscountedMdp,
    iters: usize,
    seed: u64,
    c: f64,
    schedule: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let kind = match schedule {
        "rescaled-linear" => ScheduleKind::RescaledLinear,
        "constant" => ScheduleKind::Constant,
        other => return Err(PyValueError::new_err(format!("unknown schedule `{other}`"))),
    };
    let sched = LearningRateSchedule::new(kind, c, iters, mdp.inner.discount()).map_err(err)?;
    let q0 = QTable::zeros(mdp.inner.num_states(), mdp.inner.num_actions());
    let q = genmodel::sync_q_learning(&mdp.inner, &sched, iters, &q0, &RngStream::new(seed))
        .map_err(err)?;
    Ok(to_lists(q.values()))
}

/// Offline value iteration with the Bernstein-style lower confidence bound.
/// `tau_max = 0` picks the iteration count prescribed for 1/N accuracy.
#[pyfunction]
#[pyo3(signature = (dataset, rewards, gamma, c_b = 1.0, delta = 0.1, tau_max = 0))]
fn vi_lcb(
    dataset: &PyTransitionDataset,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    c_b: f64,
    delta: f64,
    tau_max: usize,
) -> PyResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let reward = to_array2(rewards, "rewards")?;
    let cfg = PenaltyConfig::new(c_b, delta, dataset.inner.total().max(1), gamma).map_err(err)?;
    let tau = if tau_max == 0 {
        cfg.suggested_tau_max()
    } else {
        tau_max
    };
    let (pi, q) = offline::vi_lcb(&dataset.inner, &reward, gamma, &cfg, tau).map_err(err)?;
    Ok((policy_to_actions(&pi)?, to_lists(q.values())))
}

/// Worst-case expectation of `v >= 0` over the TV ball of radius `sigma`.
#[pyfunction]
fn tv_worst_case(p: Vec<f64>, v: Vec<f64>, sigma: f64) -> PyResult<f64> {
    robust::tv_worst_case(
        Array1::from_vec(p).view(),
        Array1::from_vec(v).view(),
        sigma,
    )
    .map_err(err)
}

/// Distributionally robust value iteration; returns `(q, policy)`.
#[pyfunction]
fn drvi(mdp: &PyDiscountedMdp, sigma: f64, iters: usize) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let rmdp = RobustMdp::new(mdp.inner.clone(), sigma).map_err(err)?;
    let (q, pi) = robust::drvi(&rmdp, iters).map_err(err)?;
    Ok((to_lists(q.values()), policy_to_actions(&pi)?))
}

/// Euclidean projection onto the probability simplex.
#[pyfunction]
fn simplex_project(v: Vec<f64>) -> Vec<f64> {
    policyopt::simplex_project(Array1::from_vec(v).view()).to_vec()
}

/// Natural policy gradient with exact evaluation from the uniform policy;
/// returns the value trace `V^{(t)}(uniform rho)` for `t = 1..=steps`.
#[pyfunction]
fn npg_values(mdp: &PyDiscountedMdp, eta: f64, steps: usize) -> PyResult<Vec<f64>> {
    let rho = Distribution::uniform(mdp.inner.num_states());
    let mut lp = LogitPolicy::uniform(mdp.inner.num_states(), mdp.inner.num_actions());
    let mut values = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, q) = mdp::evaluate_policy(&mdp.inner, &lp.to_policy()).map_err(err)?;
        lp = policyopt::npg_step_logits(&lp, &q, eta, mdp.inner.discount()).map_err(err)?;
        let (v, _) = mdp::evaluate_policy(&mdp.inner, &lp.to_policy()).map_err(err)?;
        values.push(v.expectation(&rho).map_err(err)?);
    }
    Ok(values)
}

/// Soft value table, soft Q-table and Boltzmann policy rows.
type SoftPlan = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Entropy-regularized planning; returns `(v_tau, q_tau, policy_rows)`.
#[pyfunction]
fn soft_optimal(mdp: &PyDiscountedMdp, tau: f64, iters: usize) -> PyResult<SoftPlan> {
    let (soft, pi) = policyopt::soft_optimal(&mdp.inner, tau, iters).map_err(err)?;
    let rows = match pi {
        Policy::Stochastic(p) => to_lists(&p),
        Policy::Deterministic(_) => unreachable!("soft planning returns a stochastic policy"),
    };
    Ok((soft.v.values().to_vec(), to_lists(soft.q.values()), rows))
}

/// Prompt/answer preference world with a Bradley-Terry oracle.
#[pyclass(name = "PrefWorld", skip_from_py_object)]
#[derive(Clone)]
struct PyPrefWorld {
    inner: rlhf::PrefWorld,
}

#[pymethods]
impl PyPrefWorld {
    /// Seeded random world: uniform prompts and reference policy, centered
    /// rewards.
    #[staticmethod]
    fn random(prompts: usize, answers: usize, beta: f64, seed: u64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed);
        Ok(Self {
            inner: rlhf::PrefWorld::random(prompts, answers, beta, &mut rng).map_err(err)?,
        })
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    fn true_reward(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.true_reward)
    }

    fn reference_policy(&self) -> Vec<Vec<f64>> {
        to_lists(&self.inner.pi_ref)
    }

    /// Bradley-Terry win probability under the world's true reward.
    fn bt_prob(&self, x: usize, y1: usize, y2: usize) -> PyResult<f64> {
        rlhf::bt_prob(&self.inner.true_reward, x, y1, y2).map_err(err)
    }

    /// Sample `(x, preferred, rejected)` triples from the reference policy.
    fn sample_preferences(&self, n: usize, seed: u64) -> PyResult<Vec<(usize, usize, usize)>> {
        let mut rng = RngStream::new(seed);
        let ds = rlhf::sample_preferences(&self.inner, &self.inner.pi_ref.clone(), n, &mut rng)
            .map_err(err)?;
        Ok(ds
            .items
            .iter()
            .map(|i| (i.prompt, i.preferred, i.rejected))
            .collect())
    }

    /// DPO loss and gradient at the given policy logits.
    fn dpo_loss(
        &self,
        logits: Vec<Vec<f64>>,
        items: Vec<(usize, usize, usize)>,
    ) -> PyResult<(f64, Vec<Vec<f64>>)> {
        let theta = to_array2(logits, "logits")?;
        let ds = dataset_from(items);
        let (loss, grad) = rlhf::dpo_loss(&self.inner, &theta, &ds).map_err(err)?;
        Ok((loss, to_lists(&grad)))
    }

    /// Full-batch gradient descent on the VPO objective
    /// (`sign` is "online" or "offline"); returns the final logits.
    #[pyo3(signature = (items, alpha, steps, lr, sign = "online"))]
    fn fit_vpo(
        &self,
        items: Vec<(usize, usize, usize)>,
        alpha: f64,
        steps: usize,
        lr: f64,
        sign: &str,
    ) -> PyResult<Vec<Vec<f64>>> {
        let sign = match sign {
            "online" => rlhf::VpoSign::Online,
            "offline" => rlhf::VpoSign::Offline,
            other => return Err(PyValueError::new_err(format!("unknown sign `{other}`"))),
        };
        let ds = dataset_from(items);
        let theta0 = Array2::zeros((self.inner.num_prompts, self.inner.num_answers));
        let (theta, _) = rlhf::optimize_logits(
            |t| rlhf::vpo_loss(&self.inner, t, &ds, alpha, sign),
            &theta0,
            steps,
            lr,
        )
        .map_err(err)?;
        Ok(to_lists(&theta))
    }
}

fn dataset_from(items: Vec<(usize, usize, usize)>) -> rlhf::PreferenceDataset {
    rlhf::PreferenceDataset {
        items: items
            .into_iter()
            .map(|(prompt, preferred, rejected)| rlhf::PrefItem {
                prompt,
                preferred,
                rejected,
            })
            .collect(),
    }
}

#[pymodule]
fn tabrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDiscountedMdp>()?;
    m.add_class::<PyTransitionDataset>()?;
    m.add_class::<PyPrefWorld>()?;
    m.add_function(wrap_pyfunction!(value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_policy, m)?)?;
    m.add_function(wrap_pyfunction!(collect_generative, m)?)?;
    m.add_function(wrap_pyfunction!(model_based_plan, m)?)?;
    m.add_function(wrap_pyfunction!(sync_q_learning, m)?)?;
    m.add_function(wrap_pyfunction!(vi_lcb, m)?)?;
    m.add_function(wrap_pyfunction!(tv_worst_case, m)?)?;
    m.add_function(wrap_pyfunction!(drvi, m)?)?;
    m.add_function(wrap_pyfunction!(simplex_project, m)?)?;
    m.add_function(wrap_pyfunction!(npg_values, m)?)?;
    m.add_function(wrap_pyfunction!(soft_optimal, m)?)?;
    Ok(())
}
