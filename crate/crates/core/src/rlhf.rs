//! Tabular preference optimization: Bradley-Terry simulation, reward MLE,
//! KL-regularized values, the closed-form optimal policy, DPO, and VPO in
//! its online and offline variants.
//!
//! A policy over answers is a row-stochastic `(X, Y)` matrix; trainable
//! policies are parameterized by logits through a row-wise softmax.

use ndarray::{Array1, Array2};

use crate::envs::RngStream;
use crate::error::{Error, Result};
use crate::policyopt::softmax_rows;

/// Numerically stable `log(sigmoid(z))`.
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A finite prompt/answer world with a ground-truth reward, reference,
/// calibration and behavior policies, and the KL weight `beta`.
#[derive(Debug, Clone)]
pub struct PrefWorld {
    pub num_prompts: usize,
    pub num_answers: usize,
    /// Prompt distribution `rho`.
    pub rho: Array1<f64>,
    pub true_reward: Array2<f64>,
    pub pi_ref: Array2<f64>,
    pub pi_cal: Array2<f64>,
    pub pi_b: Array2<f64>,
    pub beta: f64,
}

fn check_policy_rows(m: &Array2<f64>, what: &str, strictly_positive: bool) -> Result<()> {
    for (x, row) in m.rows().into_iter().enumerate() {
        let mut sum = 0.0;
        for &p in row {
            if !p.is_finite() || p < 0.0 || (strictly_positive && p == 0.0) {
                return Err(Error::arg(format!("{what} row {x} has entry {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!("{what} row {x} sums to {sum}")));
        }
    }
    Ok(())
}

impl PrefWorld {
    pub fn new(
        rho: Array1<f64>,
        true_reward: Array2<f64>,
        pi_ref: Array2<f64>,
        pi_cal: Array2<f64>,
        pi_b: Array2<f64>,
        beta: f64,
    ) -> Result<Self> {
        let (num_prompts, num_answers) = true_reward.dim();
        if num_prompts == 0 || num_answers == 0 {
            return Err(Error::arg("world needs at least one prompt and answer"));
        }
        if rho.len() != num_prompts {
            return Err(Error::dim("rho length != number of prompts"));
        }
        let mut total = 0.0;
        for &p in &rho {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::arg(format!("rho entry {p}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!("rho sums to {total}")));
        }
        for m in [&pi_ref, &pi_cal, &pi_b] {
            if m.dim() != (num_prompts, num_answers) {
                return Err(Error::dim("policy shape != (X, Y)"));
            }
        }
        check_policy_rows(&pi_ref, "pi_ref", true)?;
        check_policy_rows(&pi_cal, "pi_cal", false)?;
        check_policy_rows(&pi_b, "pi_b", false)?;
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::arg(format!("beta = {beta} must be positive")));
        }
        Ok(Self {
            num_prompts,
            num_answers,
            rho,
            true_reward,
            pi_ref,
            pi_cal,
            pi_b,
            beta,
        })
    }

    /// Random world: uniform prompt distribution, uniform reference policy
    /// (also used for calibration and behavior), rewards uniform in
    /// `[-2, 2]` then centered under `pi_cal` per prompt.
    pub fn random(
        num_prompts: usize,
        num_answers: usize,
        beta: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let rho = Array1::from_elem(num_prompts, 1.0 / num_prompts as f64);
        let uniform = Array2::from_elem((num_prompts, num_answers), 1.0 / num_answers as f64);
        let mut reward =
            Array2::from_shape_fn((num_prompts, num_answers), |_| rng.uniform(-2.0, 2.0));
        for mut row in reward.rows_mut() {
            let mean = row.sum() / num_answers as f64;
            row.mapv_inplace(|r| r - mean);
        }
        Self::new(rho, reward, uniform.clone(), uniform.clone(), uniform, beta)
    }

    /// `E_{x ~ rho, y ~ pi_cal}[r(x, y)]`; zero for calibrated rewards.
    pub fn calibration_residual(&self, reward: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for x in 0..self.num_prompts {
            for y in 0..self.num_answers {
                total += self.rho[x] * self.pi_cal[(x, y)] * reward[(x, y)];
            }
        }
        total
    }

    /// Projects a reward table into the calibrated class by removing the
    /// per-prompt mean under `pi_cal`.
    pub fn calibrate(&self, reward: &Array2<f64>) -> Array2<f64> {
        let mut out = reward.clone();
        for x in 0..self.num_prompts {
            let mean: f64 = (0..self.num_answers)
                .map(|y| self.pi_cal[(x, y)] * reward[(x, y)])
                .sum();
            for y in 0..self.num_answers {
                out[(x, y)] -= mean;
            }
        }
        out
    }
}

/// One preference comparison: `y_plus` was preferred over `y_minus`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrefItem {
    pub prompt: usize,
    pub preferred: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PreferenceDataset {
    pub items: Vec<PrefItem>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Bradley-Terry probability that `y1` beats `y2` on prompt `x`:
/// `sigma(r(x, y1) - r(x, y2))`.
pub fn bt_prob(reward: &Array2<f64>, x: usize, y1: usize, y2: usize) -> Result<f64> {
    let (xs, ys) = reward.dim();
    if x >= xs || y1 >= ys || y2 >= ys {
        return Err(Error::arg("bt_prob index out of range"));
    }
    Ok(sigmoid(reward[(x, y1)] - reward[(x, y2)]))
}

const MAX_REDRAWS: usize = 100_000;

/// Samples `n` preference triples: `x ~ rho`, two distinct answers from the
/// generator policy, winner labeled by the Bradley-Terry oracle under the
/// world's true reward. Identical-answer draws are redrawn.
pub fn sample_preferences(
    world: &PrefWorld,
    generator: &Array2<f64>,
    n: usize,
    rng: &mut RngStream,
) -> Result<PreferenceDataset> {
    if world.num_answers < 2 {
        return Err(Error::arg("preference sampling needs at least two answers"));
    }
    if generator.dim() != (world.num_prompts, world.num_answers) {
        return Err(Error::dim("generator shape != (X, Y)"));
    }
    check_policy_rows(generator, "generator", false)?;
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.categorical(world.rho.view());
        let row = generator.row(x);
        let y1 = rng.categorical(row);
        let mut y2 = rng.categorical(row);
        let mut redraws = 0;
        while y2 == y1 {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Numeric(format!(
                    "generator row {x} is almost a point mass; cannot draw distinct answers"
                )));
            }
            y2 = rng.categorical(row);
        }
        let p = bt_prob(&world.true_reward, x, y1, y2)?;
        let (preferred, rejected) = if rng.next_f64() < p {
            (y1, y2)
        } else {
            (y2, y1)
        };
        items.push(PrefItem {
            prompt: x,
            preferred,
            rejected,
        });
    }
    Ok(PreferenceDataset { items })
}

/// Negative Bradley-Terry log-likelihood of a reward table and its exact
/// gradient.
pub fn mle_loss(reward: &Array2<f64>, ds: &PreferenceDataset) -> (f64, Array2<f64>) {
    let mut loss = 0.0;
    let mut grad = Array2::zeros(reward.dim());
    for item in &ds.items {
        let margin = reward[(item.prompt, item.preferred)] - reward[(item.prompt, item.rejected)];
        loss -= log_sigmoid(margin);
        let coeff = -(1.0 - sigmoid(margin));
        grad[(item.prompt, item.preferred)] += coeff;
        grad[(item.prompt, item.rejected)] -= coeff;
    }
    (loss, grad)
}

/// KL-regularized value
/// `J(r, pi) = E_{x ~ rho, y ~ pi}[r] - beta E_{x ~ rho}[KL(pi || pi_ref)]`.
pub fn kl_value(world: &PrefWorld, reward: &Array2<f64>, pi: &Array2<f64>) -> Result<f64> {
    if pi.dim() != (world.num_prompts, world.num_answers) || reward.dim() != pi.dim() {
        return Err(Error::dim("kl_value shapes do not match the world"));
    }
    check_policy_rows(pi, "pi", false)?;
    let mut value = 0.0;
    for x in 0..world.num_prompts {
        let mut kl = 0.0;
        let mut expected = 0.0;
        for y in 0..world.num_answers {
            let p = pi[(x, y)];
            if p == 0.0 {
                continue;
            }
            let reference = world.pi_ref[(x, y)];
            if reference == 0.0 {
                return Err(Error::arg(format!(
                    "pi places mass on ({x}, {y}) where pi_ref is zero"
                )));
            }
            expected += p * reward[(x, y)];
            kl += p * (p / reference).ln();
        }
        value += world.rho[x] * (expected - world.beta * kl);
    }
    Ok(value)
}

/// Closed-form maximizer of the KL-regularized value:
/// `pi_r(y | x) ~ pi_ref(y | x) exp(r(x, y) / beta)`.
pub fn closed_form_policy(world: &PrefWorld, reward: &Array2<f64>) -> Array2<f64> {
    let logits = Array2::from_shape_fn(reward.dim(), |(x, y)| {
        world.pi_ref[(x, y)].ln() + reward[(x, y)] / world.beta
    });
    softmax_rows(&logits)
}

/// Per-row log-softmax of the logits; the induced policy's `log pi(y | x)`.
fn log_softmax_rows(theta: &Array2<f64>) -> Array2<f64> {
    let mut out = theta.clone();
    for mut row in out.rows_mut() {
        let lse = crate::policyopt::log_sum_exp(row.view());
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// DPO loss over policy logits and its exact gradient:
/// `-sum log sigma(beta [log pi/pi_ref(y+) - log pi/pi_ref(y-)])`.
pub fn dpo_loss(
    world: &PrefWorld,
    logits: &Array2<f64>,
    ds: &PreferenceDataset,
) -> Result<(f64, Array2<f64>)> {
    if logits.dim() != (world.num_prompts, world.num_answers) {
        return Err(Error::dim("logits shape != (X, Y)"));
    }
    let log_pi = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    for item in &ds.items {
        let x = item.prompt;
        let margin = world.beta
            * ((log_pi[(x, item.preferred)] - world.pi_ref[(x, item.preferred)].ln())
                - (log_pi[(x, item.rejected)] - world.pi_ref[(x, item.rejected)].ln()));
        loss -= log_sigmoid(margin);
        // d margin / d theta(x, y) = beta (1{y = y+} - 1{y = y-}); the
        // softmax normalization terms cancel between the two answers.
        let coeff = -(1.0 - sigmoid(margin)) * world.beta;
        grad[(x, item.preferred)] += coeff;
        grad[(x, item.rejected)] -= coeff;
    }
    Ok((loss, grad))
}

/// Regularizer orientation for VPO: optimism for online data collection,
/// pessimism for a fixed offline dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpoSign {
    Online,
    Offline,
}

impl VpoSign {
    pub fn factor(self) -> f64 {
        match self {
            VpoSign::Online => 1.0,
            VpoSign::Offline => -1.0,
        }
    }
}

/// VPO loss: the DPO term plus
/// `sign * alpha * beta * E_{x ~ rho, y ~ pi_cal}[log pi(y | x)]`.
/// With `alpha = 0` this is exactly the DPO loss.
pub fn vpo_loss(
    world: &PrefWorld,
    logits: &Array2<f64>,
    ds: &PreferenceDataset,
    alpha: f64,
    sign: VpoSign,
) -> Result<(f64, Array2<f64>)> {
    if alpha < 0.0 {
        return Err(Error::arg(format!("alpha = {alpha} must be nonnegative")));
    }
    let (mut loss, mut grad) = dpo_loss(world, logits, ds)?;
    if alpha == 0.0 {
        return Ok((loss, grad));
    }
    let log_pi = log_softmax_rows(logits);
    let pi = softmax_rows(logits);
    let scale = sign.factor() * alpha * world.beta;
    for x in 0..world.num_prompts {
        let weight = world.rho[x];
        let mut expected_log = 0.0;
        for y in 0..world.num_answers {
            expected_log += world.pi_cal[(x, y)] * log_pi[(x, y)];
        }
        loss += scale * weight * expected_log;
        for y in 0..world.num_answers {
            // d E_{y' ~ pi_cal}[log pi(y')] / d theta(x, y)
            //   = pi_cal(y | x) - pi(y | x).
            grad[(x, y)] += scale * weight * (world.pi_cal[(x, y)] - pi[(x, y)]);
        }
    }
    Ok((loss, grad))
}

/// VPO with the regularizer written as a KL divergence,
/// `sign * alpha * beta * (-E_x KL(pi_cal || pi))`. Differs from
/// [`vpo_loss`] by a term constant in the logits, so gradients and argmins
/// coincide.
pub fn vpo_loss_kl(
    world: &PrefWorld,
    logits: &Array2<f64>,
    ds: &PreferenceDataset,
    alpha: f64,
    sign: VpoSign,
) -> Result<(f64, Array2<f64>)> {
    let (mut loss, grad) = vpo_loss(world, logits, ds, alpha, sign)?;
    if alpha == 0.0 {
        return Ok((loss, grad));
    }
    // Shift by the pi-independent entropy term E[log pi_cal].
    let scale = sign.factor() * alpha * world.beta;
    for x in 0..world.num_prompts {
        for y in 0..world.num_answers {
            let c = world.pi_cal[(x, y)];
            if c > 0.0 {
                loss -= scale * world.rho[x] * c * c.ln();
            }
        }
    }
    Ok((loss, grad))
}

/// Full-batch gradient descent on tabular logits. Returns the final logits
/// and the loss evaluated before each step.
pub fn optimize_logits<F>(
    loss_fn: F,
    theta0: &Array2<f64>,
    steps: usize,
    lr: f64,
) -> Result<(Array2<f64>, Vec<f64>)>
where
    F: Fn(&Array2<f64>) -> Result<(f64, Array2<f64>)>,
{
    if lr <= 0.0 {
        return Err(Error::arg(format!("learning rate {lr} must be positive")));
    }
    let mut theta = theta0.clone();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = loss_fn(&theta)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {step} (loss = {loss})"
            )));
        }
        trace.push(loss);
        theta = &theta - &(lr * &grad);
    }
    Ok((theta, trace))
}

/// Per-round telemetry of the online VPO loop.
#[derive(Debug, Clone)]
pub struct VpoRound {
    pub round: usize,
    /// True KL-regularized value `J(r*, pi_t)` of the post-update policy.
    pub true_value: f64,
    pub dpo_term: f64,
    pub regularizer_term: f64,
}

#[derive(Debug, Clone)]
pub struct OnlineVpoOutcome {
    /// Logits after each round's update.
    pub logits: Array2<f64>,
    pub dataset: PreferenceDataset,
    pub rounds: Vec<VpoRound>,
}

/// Online VPO: per round, sample a batch of comparisons from the current
/// policy, append them, and re-optimize the sign `+1` objective from the
/// previous logits.
pub fn online_vpo(
    world: &PrefWorld,
    rounds: usize,
    alpha: f64,
    batch_per_round: usize,
    opt_steps: usize,
    lr: f64,
    rng: &RngStream,
) -> Result<OnlineVpoOutcome> {
    if rounds == 0 {
        return Err(Error::arg("online VPO needs at least one round"));
    }
    let mut logits = Array2::zeros((world.num_prompts, world.num_answers));
    let mut dataset = PreferenceDataset::default();
    let mut telemetry = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let policy = softmax_rows(&logits);
        let mut round_rng = rng.split(round as u64);
        let batch = sample_preferences(world, &policy, batch_per_round, &mut round_rng)?;
        dataset.items.extend(batch.items);
        let (next, _) = optimize_logits(
            |theta| vpo_loss(world, theta, &dataset, alpha, VpoSign::Online),
            &logits,
            opt_steps,
            lr,
        )?;
        logits = next;

        let policy = softmax_rows(&logits);
        let true_value = kl_value(world, &world.true_reward, &policy)?;
        let (dpo_term, _) = dpo_loss(world, &logits, &dataset)?;
        let (vpo_total, _) = vpo_loss(world, &logits, &dataset, alpha, VpoSign::Online)?;
        telemetry.push(VpoRound {
            round,
            true_value,
            dpo_term,
            regularizer_term: vpo_total - dpo_term,
        });
    }
    Ok(OnlineVpoOutcome {
        logits,
        dataset,
        rounds: telemetry,
    })
}
