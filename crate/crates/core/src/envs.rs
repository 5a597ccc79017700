//! Stochastic sampling layer: seeded pseudo-random streams, generative-model
//! queries, episodic rollouts, offline dataset generation and random
//! instance generators.
//!
//! Every draw goes through [`RngStream`], a ChaCha8-backed generator with
//! explicit 64-bit seeding and substream splitting. Identical seeds produce
//! identical sample sequences on every platform.

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
#[cfg(test)]
use crate::mdp::ROW_SUM_TOL;
use crate::mdp::{DiscountedMdp, Distribution, EpisodicMdp};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; used to derive substream keys.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, platform-independent random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            key: seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Key this stream was derived from.
    pub fn seed(&self) -> u64 {
        self.key
    }

    /// Derives an independent substream. Splitting is pure: it does not
    /// advance this stream, and `split(i)` always names the same stream.
    pub fn split(&self, index: u64) -> Self {
        RngStream::new(mix64(self.key ^ mix64(index)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]`; never exactly zero.
    pub fn next_f64_open(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Unbiased uniform integer in `[0, n)` by rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Inverse-CDF categorical draw over an explicit probability row.
    pub fn categorical(&mut self, probs: ArrayView1<'_, f64>) -> usize {
        let u = self.next_f64();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            cum += p;
            if u < cum {
                return i;
            }
        }
        last_positive
    }

    /// Draws `k` distinct indices from `0..n` by partial Fisher-Yates.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for j in 0..k {
            let pick = j + self.below(n - j);
            pool.swap(j, pick);
        }
        pool.truncate(k);
        pool
    }
}

/// Precomputed per-row cumulative sums for repeated categorical draws from
/// the same kernel.
#[derive(Debug, Clone)]
pub struct RowSampler {
    cum: Vec<Vec<f64>>,
    support_end: Vec<usize>,
}

impl RowSampler {
    pub fn new(rows: &Array2<f64>) -> Self {
        let mut cum = Vec::with_capacity(rows.nrows());
        let mut support_end = Vec::with_capacity(rows.nrows());
        for row in rows.rows() {
            let mut acc = 0.0;
            let mut c = Vec::with_capacity(row.len());
            let mut last_positive = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last_positive = i;
                }
                acc += p;
                c.push(acc);
            }
            cum.push(c);
            support_end.push(last_positive);
        }
        RowSampler { cum, support_end }
    }

    pub fn from_mdp(mdp: &DiscountedMdp) -> Self {
        Self::new(mdp.transition())
    }

    /// One inverse-CDF draw from row `row` using a single uniform variate.
    pub fn sample(&self, row: usize, rng: &mut RngStream) -> usize {
        let u = rng.next_f64();
        let c = &self.cum[row];
        let idx = c.partition_point(|&x| x <= u);
        idx.min(self.support_end[row])
    }
}

/// Counted transition samples shared by the model-based, offline and robust
/// learners. Rows of `counts` are indexed `s * A + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    num_states: usize,
    num_actions: usize,
    counts: Array2<u64>,
    visits: Array1<u64>,
    total: u64,
}

impl TransitionDataset {
    pub fn empty(num_states: usize, num_actions: usize) -> Self {
        TransitionDataset {
            num_states,
            num_actions,
            counts: Array2::zeros((num_states * num_actions, num_states)),
            visits: Array1::zeros(num_states * num_actions),
            total: 0,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn record(&mut self, state: usize, action: usize, next_state: usize) {
        let row = state * self.num_actions + action;
        self.counts[(row, next_state)] += 1;
        self.visits[row] += 1;
        self.total += 1;
    }

    pub fn visits(&self, state: usize, action: usize) -> u64 {
        self.visits[state * self.num_actions + action]
    }

    pub fn visit_counts(&self) -> &Array1<u64> {
        &self.visits
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Empirical kernel: `counts / visits` per row, or the uniform row
    /// `1/S` for pairs that were never visited.
    pub fn empirical_kernel(&self) -> Array2<f64> {
        let s = self.num_states;
        let mut out = Array2::zeros((s * self.num_actions, s));
        for (row, mut out_row) in self.counts.rows().into_iter().zip(out.rows_mut()) {
            let total: u64 = row.iter().sum();
            if total == 0 {
                out_row.fill(1.0 / s as f64);
            } else {
                for (o, &c) in out_row.iter_mut().zip(row) {
                    *o = c as f64 / total as f64;
                }
            }
        }
        out
    }

    /// Serializes as flat columnar text: header `s,a,s_next`, one row per
    /// sample in canonical sorted order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,a,s_next\n");
        for s in 0..self.num_states {
            for a in 0..self.num_actions {
                let row = self.counts.row(s * self.num_actions + a);
                for (sp, &c) in row.iter().enumerate() {
                    for _ in 0..c {
                        out.push_str(&format!("{s},{a},{sp}\n"));
                    }
                }
            }
        }
        out
    }

    pub fn from_csv(text: &str, num_states: usize, num_actions: usize) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next().map(str::trim) {
            Some("s,a,s_next") => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header `s,a,s_next`, got {other:?}"
                )))
            }
        }
        let mut ds = TransitionDataset::empty(num_states, num_actions);
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!("row {i}: expected 3 fields")));
            }
            let parse = |tok: &str| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Parse(format!("row {i}: bad index `{tok}`")))
            };
            let (s, a, sp) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            if s >= num_states || a >= num_actions || sp >= num_states {
                return Err(Error::Parse(format!("row {i}: index out of range")));
            }
            ds.record(s, a, sp);
        }
        Ok(ds)
    }

    /// Alternative persistence for generative datasets: the counts matrix.
    pub fn to_counts_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("S {}\n", self.num_states));
        out.push_str(&format!("A {}\n", self.num_actions));
        out.push_str("counts\n");
        for row in self.counts.rows() {
            let line: Vec<String> = row.iter().map(|c| format!("{c}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_counts_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let scalar = |line: Option<&str>, key: &str| -> Result<usize> {
            let line = line.ok_or_else(|| Error::Parse(format!("missing `{key}`")))?;
            let mut it = line.split_whitespace();
            match (it.next(), it.next()) {
                (Some(k), Some(v)) if k == key => v
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad `{key}` value"))),
                _ => Err(Error::Parse(format!("expected `{key} <n>`"))),
            }
        };
        let s = scalar(lines.next(), "S")?;
        let a = scalar(lines.next(), "A")?;
        match lines.next().map(str::trim) {
            Some("counts") => {}
            other => return Err(Error::Parse(format!("expected `counts`, got {other:?}"))),
        }
        let mut ds = TransitionDataset::empty(s, a);
        for row in 0..s * a {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("missing counts row {row}")))?;
            let values: Vec<u64> = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse()
                        .map_err(|_| Error::Parse(format!("bad count `{tok}`")))
                })
                .collect::<Result<_>>()?;
            if values.len() != s {
                return Err(Error::Parse(format!("counts row {row} has wrong length")));
            }
            for (sp, &c) in values.iter().enumerate() {
                ds.counts[(row, sp)] = c;
                ds.visits[row] += c;
                ds.total += c;
            }
        }
        Ok(ds)
    }
}

/// One step of an episode: `(h, s, a, r, s')` with `h` starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// A length-`H` sample trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<EpisodeStep>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// One generative-model query: an independent draw from `P(. | s, a)`.
pub fn sample_next_state(
    mdp: &DiscountedMdp,
    state: usize,
    action: usize,
    rng: &mut RngStream,
) -> Result<usize> {
    if state >= mdp.num_states() || action >= mdp.num_actions() {
        return Err(Error::arg(format!(
            "state-action ({state}, {action}) out of range"
        )));
    }
    Ok(rng.categorical(mdp.transition_row(state, action)))
}

/// Draws `n_per_pair` independent next-state samples for every state-action
/// pair. Each pair gets its own substream (split by row-major pair index),
/// so datasets with different `n_per_pair` share their common prefix.
pub fn collect_generative(
    mdp: &DiscountedMdp,
    n_per_pair: usize,
    rng: &RngStream,
) -> Result<TransitionDataset> {
    if n_per_pair == 0 {
        return Err(Error::arg("n_per_pair must be at least 1"));
    }
    let sampler = RowSampler::from_mdp(mdp);
    let mut ds = TransitionDataset::empty(mdp.num_states(), mdp.num_actions());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            let pair = s * mdp.num_actions() + a;
            let mut sub = rng.split(pair as u64);
            for _ in 0..n_per_pair {
                let sp = sampler.sample(pair, &mut sub);
                ds.record(s, a, sp);
            }
        }
    }
    Ok(ds)
}

/// Rolls out one episode under a step-indexed deterministic policy.
pub fn rollout_episode(
    mdp: &EpisodicMdp,
    policy: &[Vec<usize>],
    rng: &mut RngStream,
) -> Result<EpisodeTrace> {
    if policy.len() != mdp.horizon() {
        return Err(Error::dim("policy must define all H steps"));
    }
    let mut state = rng.categorical(mdp.initial_dist().view());
    let mut steps = Vec::with_capacity(mdp.horizon());
    for h in 1..=mdp.horizon() {
        let action = policy[h - 1][state];
        if action >= mdp.num_actions() {
            return Err(Error::arg(format!("policy selects action {action} >= A")));
        }
        let reward = mdp.reward_at(h)[(state, action)];
        let row = mdp.transition_at(h).row(state * mdp.num_actions() + action);
        let next_state = rng.categorical(row);
        steps.push(EpisodeStep {
            step: h,
            state,
            action,
            reward,
            next_state,
        });
        state = next_state;
    }
    Ok(EpisodeTrace { steps })
}

/// Draws `n` i.i.d. transitions `(s, a) ~ behavior`, `s' ~ P(. | s, a)`.
pub fn draw_offline_dataset(
    mdp: &DiscountedMdp,
    behavior: &Distribution,
    n: usize,
    rng: &mut RngStream,
) -> Result<TransitionDataset> {
    if behavior.len() != mdp.num_states() * mdp.num_actions() {
        return Err(Error::dim(
            "behavior distribution must cover all (s, a) pairs",
        ));
    }
    let sampler = RowSampler::from_mdp(mdp);
    let mut ds = TransitionDataset::empty(mdp.num_states(), mdp.num_actions());
    for _ in 0..n {
        let pair = rng.categorical(behavior.view());
        let s = pair / mdp.num_actions();
        let a = pair % mdp.num_actions();
        let sp = sampler.sample(pair, rng);
        ds.record(s, a, sp);
    }
    Ok(ds)
}

/// Random instance generator. Each transition row places mass on
/// `ceil(sparsity * S)` distinct support states with normalized uniform
/// weights; rewards are uniform on `[0, 1)`.
pub fn random_mdp(
    num_states: usize,
    num_actions: usize,
    discount: f64,
    sparsity: f64,
    rng: &mut RngStream,
) -> Result<DiscountedMdp> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::arg("need S >= 1 and A >= 1"));
    }
    if !(0.0 < sparsity && sparsity <= 1.0) {
        return Err(Error::arg(format!("sparsity {sparsity} outside (0, 1]")));
    }
    let support = ((sparsity * num_states as f64).ceil() as usize).clamp(1, num_states);
    let mut transition = Array2::zeros((num_states * num_actions, num_states));
    for mut row in transition.rows_mut() {
        let idx = rng.choose_distinct(num_states, support);
        let mut total = 0.0;
        let weights: Vec<f64> = (0..support).map(|_| rng.next_f64_open()).collect();
        for &w in &weights {
            total += w;
        }
        for (i, &sp) in idx.iter().enumerate() {
            row[sp] = weights[i] / total;
        }
    }
    let reward = Array2::from_shape_fn((num_states, num_actions), |_| rng.next_f64());
    DiscountedMdp::new(transition, reward, discount)
}

/// Random non-stationary finite-horizon instance with dense rows, uniform
/// rewards and a random initial distribution.
pub fn random_episodic(
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<EpisodicMdp> {
    if num_states == 0 || num_actions == 0 || horizon == 0 {
        return Err(Error::arg("need S, A, H >= 1"));
    }
    let mut transitions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut p = Array2::zeros((num_states * num_actions, num_states));
        for mut row in p.rows_mut() {
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = rng.next_f64_open();
                total += *x;
            }
            row.mapv_inplace(|x| x / total);
        }
        transitions.push(p);
        rewards.push(Array2::from_shape_fn((num_states, num_actions), |_| {
            rng.next_f64()
        }));
    }
    let mut mu = Array1::from_shape_fn(num_states, |_| rng.next_f64_open());
    let total = mu.sum();
    mu.mapv_inplace(|x| x / total);
    EpisodicMdp::new(transitions, rewards, mu)
}

/// L1 distance between a probability row and an empirical row.
pub fn l1_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}
