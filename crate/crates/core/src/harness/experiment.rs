//! Seeded experiment execution over (sweep value, seed) grids. Cells run in
//! parallel; outputs are merged in canonical order so reruns of the same
//! configuration are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::envs::{
    collect_generative, draw_offline_dataset, random_episodic, random_mdp, RngStream,
};
use crate::error::{Error, Result};
use crate::genmodel::{
    model_based_plan, sync_q_learning_traced, sync_td_learning, LearningRateSchedule,
    PerturbationConfig, ScheduleKind,
};
use crate::mdp::{
    self, evaluate_policy, greedy_policy, solve_optimal, DiscountedMdp, Distribution, EpisodicMdp,
    Policy, QTable, VTable,
};
use crate::offline::{concentrability, vi_lcb, PenaltyConfig};
use crate::online::{run_online, BonusKind, RefreshMode};
use crate::policyopt::{
    entropy_npg_step, npg_step_logits, projected_pg_step, soft_evaluate, soft_optimal,
    softmax_pg_step, LogitPolicy,
};
use crate::rlhf::{online_vpo, PrefWorld};
use crate::robust::{drvi, robust_eval, robust_learn, RobustMdp};

use super::config::{ExperimentConfig, ExperimentKind};
use super::RunRecord;

/// Files produced by one run cell, named relative to the output directory.
type TraceFiles = Vec<(String, String)>;

/// Result of [`run_experiment`]: the records plus every file written.
#[derive(Debug)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub files: Vec<PathBuf>,
}

fn load_or_random_mdp(cfg: &ExperimentConfig, rng: &mut RngStream) -> Result<DiscountedMdp> {
    let file = cfg.get_str("instance.file")?;
    if !file.is_empty() {
        let text = fs::read_to_string(&file)?;
        return DiscountedMdp::from_text(&text);
    }
    random_mdp(
        cfg.get_usize("instance.s")?,
        cfg.get_usize("instance.a")?,
        cfg.get_f64("instance.gamma")?,
        cfg.get_f64("instance.sparsity")?,
        rng,
    )
}

fn max_gap(v_star: &VTable, v: &VTable) -> f64 {
    v_star
        .values()
        .iter()
        .zip(v.values())
        .map(|(s, p)| s - p)
        .fold(0.0, f64::max)
}

fn run_plan(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let mdp = load_or_random_mdp(cfg, &mut root.split(0))?;
    let (q_vi, vi_iterations) = solve_optimal(&mdp)?;

    // Policy iteration until the greedy policy stabilizes.
    let mut pi = Policy::uniform(mdp.num_states(), mdp.num_actions());
    let (_, mut q_pi) = evaluate_policy(&mdp, &pi)?;
    let mut pi_rounds = 0usize;
    for _ in 0..10_000 {
        let next = greedy_policy(&q_pi);
        pi_rounds += 1;
        let (_, q_next) = evaluate_policy(&mdp, &next)?;
        let stable = next == pi;
        pi = next;
        q_pi = q_next;
        if stable {
            break;
        }
    }

    let v_star = q_vi.state_values();
    let value_mean = v_star.values().sum() / mdp.num_states() as f64;
    Ok((
        vec![
            ("vi_iterations".into(), vi_iterations as f64),
            ("pi_rounds".into(), pi_rounds as f64),
            ("value_mean".into(), value_mean),
            ("vi_pi_gap".into(), q_vi.linf_distance(&q_pi)),
        ],
        Vec::new(),
    ))
}

fn schedule_kind(name: &str) -> Result<ScheduleKind> {
    match name {
        "rescaled-linear" => Ok(ScheduleKind::RescaledLinear),
        "constant" => Ok(ScheduleKind::Constant),
        other => Err(Error::Config(format!("unknown schedule `{other}`"))),
    }
}

fn run_gen_model(
    cfg: &ExperimentConfig,
    seed: u64,
    trace_name: &str,
) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let mdp = load_or_random_mdp(cfg, &mut root.split(0))?;
    let (q_star, _) = solve_optimal(&mdp)?;
    let method = cfg.get_str("algo.method")?;
    let mut traces = Vec::new();
    let metrics = match method.as_str() {
        "model-based" => {
            let n = cfg.get_usize("algo.n_per_pair")?;
            let ds = collect_generative(&mdp, n, &root.split(1))?;
            let xi = cfg.get_f64("algo.xi")?;
            let perturb = PerturbationConfig::new(xi, root.split(2).seed())?;
            let (pi, q_hat) = model_based_plan(&ds, mdp.reward(), mdp.discount(), &perturb)?;
            let (v_pi, _) = evaluate_policy(&mdp, &pi)?;
            vec![
                ("n".into(), n as f64),
                ("subopt".into(), max_gap(&q_star.state_values(), &v_pi)),
                ("q_err".into(), q_hat.linf_distance(&q_star)),
            ]
        }
        "q-learning" => {
            let t = cfg.get_usize("algo.t")?;
            let sched = LearningRateSchedule::new(
                schedule_kind(&cfg.get_str("algo.schedule")?)?,
                cfg.get_f64("algo.c")?,
                t,
                mdp.discount(),
            )?;
            let every = cfg.get_usize("trace.every")?;
            let q0 = QTable::zeros(mdp.num_states(), mdp.num_actions());
            let reference = if every > 0 { Some(&q_star) } else { None };
            let (q, trace) =
                sync_q_learning_traced(&mdp, &sched, t, &q0, &root.split(1), reference, every)?;
            if !trace.is_empty() {
                let mut body = String::from("t,linf_error\n");
                for (t, err) in &trace {
                    let _ = writeln!(body, "{t},{err}");
                }
                traces.push((format!("{trace_name}.csv"), body));
            }
            vec![
                ("t".into(), t as f64),
                ("q_err".into(), q.linf_distance(&q_star)),
            ]
        }
        "td" => {
            if mdp.num_actions() != 1 {
                return Err(Error::Config(
                    "algo.method = td needs instance.a = 1 (a Markov reward process)".into(),
                ));
            }
            let t = cfg.get_usize("algo.t")?;
            let sched = LearningRateSchedule::new(
                schedule_kind(&cfg.get_str("algo.schedule")?)?,
                cfg.get_f64("algo.c")?,
                t,
                mdp.discount(),
            )?;
            let v0 = VTable::zeros(mdp.num_states());
            let v = sync_td_learning(&mdp, &sched, t, &v0, &root.split(1))?;
            let v_star = q_star.state_values();
            vec![
                ("t".into(), t as f64),
                ("v_err".into(), v.linf_distance(&v_star)),
            ]
        }
        other => return Err(Error::Config(format!("unknown algo.method `{other}`"))),
    };
    Ok((metrics, traces))
}

fn run_online_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    trace_name: &str,
) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let file = cfg.get_str("instance.file")?;
    let mdp = if file.is_empty() {
        random_episodic(
            cfg.get_usize("instance.s")?,
            cfg.get_usize("instance.a")?,
            cfg.get_usize("instance.h")?,
            &mut root.split(0),
        )?
    } else {
        EpisodicMdp::from_text(&fs::read_to_string(&file)?)?
    };
    let episodes = cfg.get_usize("algo.episodes")?;
    let bonus = match cfg.get_str("algo.bonus")?.as_str() {
        "hoeffding" => BonusKind::Hoeffding,
        "bernstein" => BonusKind::Bernstein,
        other => return Err(Error::Config(format!("unknown algo.bonus `{other}`"))),
    };
    let refresh = match cfg.get_str("algo.refresh")?.as_str() {
        "every-episode" => RefreshMode::EveryEpisode,
        "doubling" => RefreshMode::Doubling,
        other => return Err(Error::Config(format!("unknown algo.refresh `{other}`"))),
    };
    let (trace, _) = run_online(
        &mdp,
        episodes,
        cfg.get_f64("algo.delta")?,
        cfg.get_f64("algo.c_b")?,
        bonus,
        refresh,
        &root.split(1),
    )?;
    let mut files = Vec::new();
    if cfg.get_str("trace.enabled")? == "true" {
        let mut body = String::from("episode,instant_gap,cumulative_regret,epoch_index\n");
        for k in 0..trace.cumulative.len() {
            let gap = trace.v_star[k] - trace.v_policy[k];
            let _ = writeln!(
                body,
                "{},{gap},{},{}",
                k + 1,
                trace.cumulative[k],
                trace.epoch_index[k]
            );
        }
        files.push((format!("{trace_name}.csv"), body));
    }
    let quarter = trace.cumulative_at(episodes / 4);
    let optimism_rate = if trace.total_refreshes > 0 {
        trace.optimistic_refreshes as f64 / trace.total_refreshes as f64
    } else {
        1.0
    };
    Ok((
        vec![
            ("episodes".into(), episodes as f64),
            ("total_regret".into(), trace.total()),
            ("regret_quarter".into(), quarter),
            ("optimism_rate".into(), optimism_rate),
        ],
        files,
    ))
}

fn run_offline(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let mdp = load_or_random_mdp(cfg, &mut root.split(0))?;
    let n = cfg.get_usize("algo.n")?;
    if n == 0 {
        return Err(Error::Config("algo.n must be at least 1".into()));
    }
    let (q_star, _) = solve_optimal(&mdp)?;
    let v_star = q_star.state_values();
    let pi_star = greedy_policy(&q_star);
    let rho = Distribution::uniform(mdp.num_states());
    let d_star = mdp::occupancy(&mdp, &pi_star, &rho)?;

    let mix = cfg.get_f64("algo.expert_mix")?;
    let pairs = mdp.num_states() * mdp.num_actions();
    let uniform = 1.0 / pairs as f64;
    let behavior = Distribution::new(d_star.probs().mapv(|x| mix * x + (1.0 - mix) * uniform))?;

    let ds = draw_offline_dataset(&mdp, &behavior, n, &mut root.split(1))?;
    let penalty = PenaltyConfig::new(
        cfg.get_f64("algo.c_b")?,
        cfg.get_f64("algo.delta")?,
        ds.total().max(1),
        mdp.discount(),
    )?;
    let tau_max = match cfg.get_usize("algo.tau_max")? {
        0 => penalty.suggested_tau_max(),
        t => t,
    };
    let (pi_hat, _) = vi_lcb(&ds, mdp.reward(), mdp.discount(), &penalty, tau_max)?;
    let (v_hat, _) = evaluate_policy(&mdp, &pi_hat)?;
    let subopt = v_star.expectation(&rho)? - v_hat.expectation(&rho)?;

    let c_star = concentrability(&mdp, &pi_star, &rho, &behavior, false)?;
    let c_clip = concentrability(&mdp, &pi_star, &rho, &behavior, true)?;
    Ok((
        vec![
            ("n".into(), n as f64),
            ("c_star".into(), c_star),
            ("c_star_clipped".into(), c_clip),
            ("subopt_gap".into(), subopt),
        ],
        Vec::new(),
    ))
}

fn run_robust(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let mdp = load_or_random_mdp(cfg, &mut root.split(0))?;
    let sigma = cfg.get_f64("algo.sigma")?;
    let n = cfg.get_usize("algo.n")?;
    if n == 0 {
        return Err(Error::Config("algo.n must be at least 1".into()));
    }
    let iters = match cfg.get_usize("algo.iters")? {
        0 => {
            let num = (n as f64 / (1.0 - mdp.discount())).ln();
            (num / (1.0 / mdp.discount()).ln()).ceil().max(1.0) as usize
        }
        t => t,
    };
    let ds = collect_generative(&mdp, n, &root.split(1))?;
    let pi_hat = robust_learn(&ds, mdp.reward(), mdp.discount(), sigma, iters)?;

    let rmdp = RobustMdp::new(mdp.clone(), sigma)?;
    let eval_iters = iters.max(200);
    let (_, pi_opt) = drvi(&rmdp, eval_iters)?;
    let v_opt = robust_eval(&rmdp, &pi_opt, eval_iters)?;
    let v_hat = robust_eval(&rmdp, &pi_hat, eval_iters)?;
    Ok((
        vec![
            ("sigma".into(), sigma),
            ("n".into(), n as f64),
            ("robust_subopt".into(), max_gap(&v_opt, &v_hat)),
        ],
        Vec::new(),
    ))
}

fn run_policy_opt(
    cfg: &ExperimentConfig,
    seed: u64,
    trace_name: &str,
) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let mdp = load_or_random_mdp(cfg, &mut root.split(0))?;
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.discount();
    let rho = Distribution::uniform(s_n);
    let method = cfg.get_str("algo.method")?;
    let tau = cfg.get_f64("algo.tau")?;
    let steps = cfg.get_usize("algo.steps")?;
    let every = cfg.get_usize("trace.every")?;
    let eta = match (cfg.get_f64("algo.eta")?, method.as_str()) {
        (0.0, "projected-pg") => (1.0 - gamma).powi(3) / (2.0 * gamma * a_n as f64),
        (0.0, "softmax-pg") => (1.0 - gamma).powi(3) / 8.0,
        (0.0, "npg") => 1.0,
        (0.0, "entropy-npg") => (1.0 - gamma) / tau,
        (eta, _) => eta,
    };

    // Reference values: the soft optimum for entropy-npg, V* otherwise.
    let soft_star = if method == "entropy-npg" {
        Some(soft_optimal(&mdp, tau, 2_000)?.0)
    } else {
        None
    };
    let (q_star, _) = solve_optimal(&mdp)?;
    let v_star = q_star.state_values();
    let v_star_rho = v_star.expectation(&rho)?;

    let mut pi = Policy::uniform(s_n, a_n);
    let mut lp = LogitPolicy::uniform(s_n, a_n);
    let mut body = String::from("t,value_at_rho,linf_gap_to_opt\n");
    let mut final_value = 0.0;
    let mut final_gap = 0.0;
    for t in 1..=steps {
        match method.as_str() {
            "projected-pg" => pi = projected_pg_step(&mdp, &pi, &rho, eta)?,
            "softmax-pg" => {
                lp = softmax_pg_step(&mdp, &lp, &rho, eta)?;
                pi = lp.to_policy();
            }
            "npg" => {
                let (_, q) = evaluate_policy(&mdp, &pi)?;
                lp = npg_step_logits(&lp, &q, eta, gamma)?;
                pi = lp.to_policy();
            }
            "entropy-npg" => {
                let q_tau = soft_evaluate(&mdp, &pi, tau)?.q;
                pi = entropy_npg_step(&pi, &q_tau, eta, tau, gamma)?;
            }
            other => return Err(Error::Config(format!("unknown algo.method `{other}`"))),
        }
        let (value_at_rho, gap) = match &soft_star {
            Some(star) => {
                let soft = soft_evaluate(&mdp, &pi, tau)?;
                (soft.v.expectation(&rho)?, star.v.linf_distance(&soft.v))
            }
            None => {
                let (v, _) = evaluate_policy(&mdp, &pi)?;
                (v.expectation(&rho)?, v_star_rho - v.expectation(&rho)?)
            }
        };
        if every > 0 && t % every == 0 {
            let _ = writeln!(body, "{t},{value_at_rho},{gap}");
        }
        final_value = value_at_rho;
        final_gap = gap;
    }
    let mut traces = Vec::new();
    if every > 0 {
        traces.push((format!("{trace_name}.csv"), body));
    }
    Ok((
        vec![
            ("final_value".into(), final_value),
            ("final_gap".into(), final_gap),
        ],
        traces,
    ))
}

fn run_rlhf(
    cfg: &ExperimentConfig,
    seed: u64,
    trace_name: &str,
) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    let root = RngStream::new(seed);
    let world = PrefWorld::random(
        cfg.get_usize("instance.prompts")?,
        cfg.get_usize("instance.answers")?,
        cfg.get_f64("algo.beta")?,
        &mut root.split(0),
    )?;
    let outcome = online_vpo(
        &world,
        cfg.get_usize("algo.rounds")?,
        cfg.get_f64("algo.alpha")?,
        cfg.get_usize("algo.batch")?,
        cfg.get_usize("algo.steps")?,
        cfg.get_f64("algo.lr")?,
        &root.split(1),
    )?;
    let mut traces = Vec::new();
    if cfg.get_str("trace.enabled")? == "true" {
        let mut body = String::from("round,true_value_J,dpo_term,regularizer_term\n");
        for round in &outcome.rounds {
            let _ = writeln!(
                body,
                "{},{},{},{}",
                round.round, round.true_value, round.dpo_term, round.regularizer_term
            );
        }
        traces.push((format!("{trace_name}.csv"), body));
    }
    let final_j = outcome.rounds.last().map(|r| r.true_value).unwrap_or(0.0);
    Ok((
        vec![
            ("final_j".into(), final_j),
            ("dataset_size".into(), outcome.dataset.len() as f64),
        ],
        traces,
    ))
}

fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    trace_name: &str,
) -> Result<(Vec<(String, f64)>, TraceFiles)> {
    match cfg.kind {
        ExperimentKind::Plan => run_plan(cfg, seed),
        ExperimentKind::GenModel => run_gen_model(cfg, seed, trace_name),
        ExperimentKind::Online => run_online_experiment(cfg, seed, trace_name),
        ExperimentKind::Offline => run_offline(cfg, seed),
        ExperimentKind::Robust => run_robust(cfg, seed),
        ExperimentKind::PolicyOpt => run_policy_opt(cfg, seed, trace_name),
        ExperimentKind::Rlhf => run_rlhf(cfg, seed, trace_name),
    }
}

/// Executes every (sweep value, seed) cell of the configuration, writes
/// `results.csv`, `manifest.txt` and any per-run trace files under
/// `out_dir`, and returns the records. Cells run in parallel; emission
/// order is canonical, so reruns produce byte-identical files.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    let seeds = cfg.seeds()?;
    let cells = cfg.sweep_cells()?;
    let hash = cfg.hash();

    let mut jobs = Vec::new();
    for (cell_idx, cell) in cells.iter().enumerate() {
        for (seed_idx, &seed) in seeds.iter().enumerate() {
            jobs.push((cell_idx, seed_idx, cell.clone(), seed));
        }
    }

    let outcomes: Vec<Result<(usize, usize, RunRecord, TraceFiles)>> = jobs
        .into_par_iter()
        .map(|(cell_idx, seed_idx, cell, seed)| {
            let cell_cfg = cfg.with_cell(&cell);
            let trace_name = match &cell {
                Some((_, value)) => format!("trace_s{seed}_v{value}"),
                None => format!("trace_s{seed}"),
            };
            let start = Instant::now();
            let (metrics, traces) = run_cell(&cell_cfg, seed, &trace_name)?;
            let record = RunRecord {
                config_hash: hash.clone(),
                seed,
                sweep: cell.clone(),
                metrics,
                wall_clock: start.elapsed(),
            };
            Ok((cell_idx, seed_idx, record, traces))
        })
        .collect();

    let mut completed = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        completed.push(outcome?);
    }
    completed.sort_by_key(|(cell_idx, seed_idx, _, _)| (*cell_idx, *seed_idx));

    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let manifest_path = out_dir.join("manifest.txt");
    fs::write(
        &manifest_path,
        format!("config_hash = {hash}\n{}", cfg.manifest()),
    )?;
    files.push(manifest_path);

    let mut csv = String::from("config_hash,seed");
    let sweep_param = cfg.get_str("sweep.param")?;
    if !sweep_param.is_empty() {
        let _ = write!(csv, ",{sweep_param}");
    }
    if let Some((_, _, first, _)) = completed.first() {
        for (name, _) in &first.metrics {
            let _ = write!(csv, ",{name}");
        }
    }
    csv.push('\n');
    let mut records = Vec::with_capacity(completed.len());
    for (_, _, record, traces) in completed {
        let _ = write!(csv, "{},{}", record.config_hash, record.seed);
        if let Some((_, value)) = &record.sweep {
            let _ = write!(csv, ",{value}");
        }
        for (_, value) in &record.metrics {
            let _ = write!(csv, ",{value}");
        }
        csv.push('\n');
        for (name, content) in traces {
            let path = out_dir.join(name);
            fs::write(&path, content)?;
            files.push(path);
        }
        records.push(record);
    }
    let results_path = out_dir.join("results.csv");
    fs::write(&results_path, csv)?;
    files.push(results_path);

    Ok(ExperimentOutput { records, files })
}
