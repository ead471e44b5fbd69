//! Policy rollouts on the risky point-mass task and the risk metrics
//! reported for them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::OfflineDataset;
use crate::env::{self, BehaviorAgentKind, EnvState, RiskyPointMassConfig, Vec2};
use crate::error::{Result, UdacError};
use crate::tensor::Tensor;
use crate::trainer::{Trainer, TrainerConfig, UdacModel};

/// Maps a batch of positions `[B, 2]` to environment-unit actions `[B, 2]`.
pub trait Policy {
    fn act_batch(&self, config: &RiskyPointMassConfig, states: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl Policy for UdacModel {
    fn act_batch(&self, _config: &RiskyPointMassConfig, states: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self.denormalize(&self.act(states, rng)?))
    }
}

impl Policy for BehaviorAgentKind {
    fn act_batch(&self, config: &RiskyPointMassConfig, states: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let mut out = Vec::with_capacity(states.len());
        for r in 0..states.rows() {
            let p = states.row(r);
            out.extend(self.action(config, [p[0], p[1]], rng));
        }
        Ok(Tensor::matrix(states.rows(), 2, out))
    }
}

/// A fixed action regardless of state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPolicy(pub Vec2);

impl Policy for ConstantPolicy {
    fn act_batch(&self, _config: &RiskyPointMassConfig, states: &Tensor, _rng: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(Tensor::matrix(
            states.rows(),
            2,
            (0..states.rows()).flat_map(|_| self.0).collect(),
        ))
    }
}

/// Mean of the `ceil(alpha n)` smallest values.
pub fn cvar_empirical(returns: &[f64], alpha: f64) -> Result<f64> {
    if returns.is_empty() {
        return Err(UdacError::Empty("returns"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(UdacError::invalid(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((alpha * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(UdacError::Empty("KS sample"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Largest per-column KS statistic between two `[n, d]` samples.
pub fn ks_columns(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(UdacError::Dimension("KS samples have different widths".into()));
    }
    let col = |t: &Tensor, c: usize| (0..t.rows()).map(|r| t.get(r, c)).collect::<Vec<_>>();
    let mut d = 0.0f64;
    for c in 0..a.cols() {
        d = d.max(ks_statistic(&col(a, c), &col(b, c))?);
    }
    Ok(d)
}

/// Metrics for the episodes of one evaluation seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub mean_return: f64,
    pub median_return: f64,
    pub cvar10_return: f64,
    pub violations_mean: f64,
    pub violations_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub returns: Vec<f64>,
    pub violations: Vec<usize>,
    pub lengths: Vec<usize>,
    pub mean_return: f64,
    pub median_return: f64,
    pub cvar10_return: f64,
    /// Mean number of steps per episode spent inside the risky disk.
    pub violations_mean: f64,
    pub violations_total: usize,
    pub per_seed: Vec<SeedSummary>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "seed,episodes,mean_return,median_return,cvar10_return,violations_mean,violations_total";

    /// One row per seed followed by a pooled `all` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        let per = self.episodes / self.seeds.len().max(1);
        for p in &self.per_seed {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                p.seed, per, p.mean_return, p.median_return, p.cvar10_return, p.violations_mean, p.violations_total
            );
        }
        let _ = writeln!(
            s,
            "all,{},{},{},{},{},{}",
            self.episodes,
            self.mean_return,
            self.median_return,
            self.cvar10_return,
            self.violations_mean,
            self.violations_total
        );
        s
    }
}

/// One finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub positions: Vec<Vec2>,
    pub rewards: Vec<f64>,
    pub in_risky: Vec<bool>,
}

impl EpisodeTrace {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn violations(&self) -> usize {
        self.in_risky.iter().filter(|&&b| b).count()
    }
}

/// Run `episodes` episodes in lockstep so the policy sees one batch of
/// states per time step. Episode `k` starts from `episode_seeds(seed)[k]`;
/// the policy draws from its own stream derived from `seed`.
pub fn rollout<P: Policy + ?Sized>(
    policy: &P,
    config: &RiskyPointMassConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeTrace>> {
    if episodes == 0 {
        return Err(UdacError::invalid("episodes must be at least 1"));
    }
    let mut states: Vec<Option<EnvState>> = env::episode_seeds(seed, episodes)
        .into_iter()
        .map(|s| Some(env::reset(config, s)))
        .collect();
    let mut traces = vec![
        EpisodeTrace {
            positions: Vec::new(),
            rewards: Vec::new(),
            in_risky: Vec::new(),
        };
        episodes
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1B5_4A32_D192_ED03);
    loop {
        let active: Vec<usize> = (0..episodes).filter(|&k| states[k].is_some()).collect();
        if active.is_empty() {
            break;
        }
        let obs: Vec<f64> = active
            .iter()
            .flat_map(|&k| states[k].as_ref().unwrap().position)
            .collect();
        let actions = policy.act_batch(config, &Tensor::matrix(active.len(), 2, obs), &mut rng)?;
        for (row, &k) in active.iter().enumerate() {
            let s = states[k].take().unwrap();
            let a = actions.row(row);
            let res = env::step(config, s, [a[0], a[1]])?;
            let t = &mut traces[k];
            t.positions.push(res.next_state.position);
            t.rewards.push(res.reward);
            t.in_risky.push(res.in_risky_region);
            if !res.done {
                states[k] = Some(res.next_state);
            }
        }
    }
    Ok(traces)
}

/// Roll out `episodes` episodes for every seed and pool the metrics.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    config: &RiskyPointMassConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(UdacError::invalid("at least one evaluation seed"));
    }
    let mut returns = Vec::new();
    let mut violations = Vec::new();
    let mut lengths = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let traces = rollout(policy, config, episodes, seed)?;
        let r: Vec<f64> = traces.iter().map(EpisodeTrace::total_reward).collect();
        let v: Vec<usize> = traces.iter().map(EpisodeTrace::violations).collect();
        per_seed.push(SeedSummary {
            seed,
            mean_return: mean(&r),
            median_return: median(&r),
            cvar10_return: cvar_empirical(&r, 0.1)?,
            violations_mean: v.iter().sum::<usize>() as f64 / v.len() as f64,
            violations_total: v.iter().sum(),
        });
        lengths.extend(traces.iter().map(|t| t.rewards.len()));
        returns.extend(r);
        violations.extend(v);
    }
    let total: usize = violations.iter().sum();
    Ok(EvalReport {
        episodes: returns.len(),
        seeds: seeds.to_vec(),
        mean_return: mean(&returns),
        median_return: median(&returns),
        cvar10_return: cvar_empirical(&returns, 0.1)?,
        violations_mean: total as f64 / returns.len() as f64,
        violations_total: total,
        returns,
        violations,
        lengths,
        per_seed,
    })
}

/// Train one model per `lambda` (same seed and config otherwise) and
/// evaluate each.
pub fn ablate_lambda(
    dataset: &OfflineDataset,
    config: &TrainerConfig,
    grid: &[f64],
    env_config: &RiskyPointMassConfig,
    episodes: usize,
    seeds: &[u64],
) -> Result<Vec<(f64, EvalReport)>> {
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(UdacError::invalid(format!("lambda {bad} outside [0, 1]")));
    }
    grid.iter()
        .map(|&lambda| {
            let mut cfg = config.clone();
            cfg.actor.lambda = lambda;
            let mut trainer = Trainer::new(dataset, cfg)?;
            trainer.run(dataset)?;
            Ok((lambda, evaluate(&trainer.model, env_config, episodes, seeds)?))
        })
        .collect()
}

pub fn ablation_csv(rows: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("lambda,mean_return,median_return,cvar10_return,violations_mean,violations_total\n");
    for (l, r) in rows {
        let _ = writeln!(
            s,
            "{l},{},{},{},{},{}",
            r.mean_return, r.median_return, r.cvar10_return, r.violations_mean, r.violations_total
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub episode: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub reward: f64,
    pub in_risky: bool,
}

/// Per-step positions (after the step), rewards and risky-region flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryDump {
    pub rows: Vec<TrajectoryRow>,
}

impl TrajectoryDump {
    pub const CSV_HEADER: &'static str = "episode,step,x,y,reward,in_risky";

    pub fn from_traces(traces: &[EpisodeTrace]) -> Self {
        let mut rows = Vec::new();
        for (episode, t) in traces.iter().enumerate() {
            for (step, ((p, r), risky)) in t.positions.iter().zip(&t.rewards).zip(&t.in_risky).enumerate() {
                rows.push(TrajectoryRow {
                    episode,
                    step,
                    x: p[0],
                    y: p[1],
                    reward: *r,
                    in_risky: *risky,
                });
            }
        }
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.episode, r.step, r.x, r.y, r.reward, r.in_risky
            );
        }
        s
    }

    pub fn risky_fraction(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.in_risky).count() as f64 / self.rows.len() as f64
    }
}

pub fn export_trajectories<P: Policy + ?Sized>(
    policy: &P,
    config: &RiskyPointMassConfig,
    episodes: usize,
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<TrajectoryDump> {
    let dump = TrajectoryDump::from_traces(&rollout(policy, config, episodes, seed)?);
    fs::write(path, dump.to_csv())?;
    Ok(dump)
}
