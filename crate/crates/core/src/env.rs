//! Risky PointMass: a 2D navigation task where the straight route to the goal
//! crosses a disk that randomly charges a large penalty, plus scripted
//! behavior agents used to generate heterogeneous offline data.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UdacError};

pub type Vec2 = [f64; 2];

fn norm(v: Vec2) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Distance from `p` to the segment `a`-`b`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskyPointMassConfig {
    pub arena_half_width: f64,
    pub start_low: Vec2,
    pub start_high: Vec2,
    pub goal_position: Vec2,
    pub goal_radius: f64,
    pub risky_center: Vec2,
    pub risky_radius: f64,
    /// Per-axis velocity cap.
    pub max_action_magnitude: f64,
    pub max_episode_steps: usize,
    pub penalty_magnitude: f64,
    pub penalty_probability: f64,
    pub step_cost_scale: f64,
}

impl Default for RiskyPointMassConfig {
    fn default() -> Self {
        Self {
            arena_half_width: 1.0,
            start_low: [-1.0, -0.1],
            start_high: [-0.8, 0.1],
            goal_position: [0.9, 0.0],
            goal_radius: 0.1,
            risky_center: [0.0, 0.0],
            risky_radius: 0.3,
            max_action_magnitude: 0.1,
            max_episode_steps: 100,
            penalty_magnitude: 70.0,
            penalty_probability: 0.1,
            step_cost_scale: 1.0,
        }
    }
}

impl RiskyPointMassConfig {
    pub fn start_center(&self) -> Vec2 {
        [
            0.5 * (self.start_low[0] + self.start_high[0]),
            0.5 * (self.start_low[1] + self.start_high[1]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(UdacError::invalid(m));
        if !(self.penalty_probability > 0.0 && self.penalty_probability <= 1.0) {
            return bad(format!(
                "penalty_probability {} not in (0, 1]",
                self.penalty_probability
            ));
        }
        if !(self.penalty_magnitude > 0.0) {
            return bad(format!("penalty_magnitude {} must be positive", self.penalty_magnitude));
        }
        if !(self.arena_half_width > 0.0 && self.max_action_magnitude > 0.0) {
            return bad("arena_half_width and max_action_magnitude must be positive".into());
        }
        if !(self.goal_radius > 0.0 && self.risky_radius > 0.0 && self.step_cost_scale >= 0.0) {
            return bad("goal_radius, risky_radius must be positive, step_cost_scale >= 0".into());
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be at least 1".into());
        }
        for k in 0..2 {
            if self.start_low[k] > self.start_high[k] {
                return bad("start_low must not exceed start_high".into());
            }
        }
        let d = point_segment_distance(self.risky_center, self.start_center(), self.goal_position);
        if d >= self.risky_radius {
            return bad(format!(
                "risky disk does not separate start and goal (segment distance {d:.3} >= radius {})",
                self.risky_radius
            ));
        }
        Ok(())
    }

    pub fn in_risky_region(&self, p: Vec2) -> bool {
        norm(sub(p, self.risky_center)) <= self.risky_radius
    }

    pub fn at_goal(&self, p: Vec2) -> bool {
        norm(sub(p, self.goal_position)) <= self.goal_radius
    }

    pub fn distance_to_goal(&self, p: Vec2) -> f64 {
        norm(sub(p, self.goal_position))
    }

    /// Largest possible magnitude of a single-step reward.
    pub fn reward_bound(&self) -> f64 {
        let w = self.arena_half_width;
        let corner = [self.goal_position[0].abs() + w, self.goal_position[1].abs() + w];
        self.step_cost_scale * norm(corner) + self.penalty_magnitude
    }

    /// Flat `key = value` text, one field per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let v2 = |v: Vec2| format!("{},{}", v[0], v[1]);
        let _ = writeln!(s, "arena_half_width = {}", self.arena_half_width);
        let _ = writeln!(s, "start_low = {}", v2(self.start_low));
        let _ = writeln!(s, "start_high = {}", v2(self.start_high));
        let _ = writeln!(s, "goal_position = {}", v2(self.goal_position));
        let _ = writeln!(s, "goal_radius = {}", self.goal_radius);
        let _ = writeln!(s, "risky_center = {}", v2(self.risky_center));
        let _ = writeln!(s, "risky_radius = {}", self.risky_radius);
        let _ = writeln!(s, "max_action_magnitude = {}", self.max_action_magnitude);
        let _ = writeln!(s, "max_episode_steps = {}", self.max_episode_steps);
        let _ = writeln!(s, "penalty_magnitude = {}", self.penalty_magnitude);
        let _ = writeln!(s, "penalty_probability = {}", self.penalty_probability);
        let _ = writeln!(s, "step_cost_scale = {}", self.step_cost_scale);
        s
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line_no, key, value) in crate::kv::parse(text)? {
            let perr = |msg: String| UdacError::Parse { line: line_no, msg };
            let num = |v: &str| v.parse::<f64>().map_err(|e| perr(format!("{key}: {e}")));
            let pair = |v: &str| -> Result<Vec2> {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(perr(format!("{key}: expected two comma-separated numbers")));
                }
                Ok([num(parts[0])?, num(parts[1])?])
            };
            match key.as_str() {
                "arena_half_width" => cfg.arena_half_width = num(&value)?,
                "start_low" => cfg.start_low = pair(&value)?,
                "start_high" => cfg.start_high = pair(&value)?,
                "goal_position" => cfg.goal_position = pair(&value)?,
                "goal_radius" => cfg.goal_radius = num(&value)?,
                "risky_center" => cfg.risky_center = pair(&value)?,
                "risky_radius" => cfg.risky_radius = num(&value)?,
                "max_action_magnitude" => cfg.max_action_magnitude = num(&value)?,
                "max_episode_steps" => {
                    cfg.max_episode_steps = value.parse().map_err(|e| perr(format!("max_episode_steps: {e}")))?
                }
                "penalty_magnitude" => cfg.penalty_magnitude = num(&value)?,
                "penalty_probability" => cfg.penalty_probability = num(&value)?,
                "step_cost_scale" => cfg.step_cost_scale = num(&value)?,
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_kv())?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub position: Vec2,
    pub step_index: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    /// Goal reached or step limit hit.
    pub done: bool,
    /// Goal reached; the only case where the return does not bootstrap.
    pub terminal: bool,
    pub in_risky_region: bool,
    pub penalty_fired: bool,
}

/// Start an episode: position uniform in the start box.
pub fn reset(config: &RiskyPointMassConfig, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut position = [0.0; 2];
    for k in 0..2 {
        position[k] = rng.gen_range(config.start_low[k]..=config.start_high[k]);
    }
    EnvState {
        position,
        step_index: 0,
        rng,
    }
}

/// Advance one step. Actions are clipped to the per-axis cap and positions to
/// the arena. The reward is `-scale * |p' - goal|`, minus the penalty when `p'`
/// is inside the risky disk and the Bernoulli draw fires.
pub fn step(config: &RiskyPointMassConfig, state: EnvState, action: Vec2) -> Result<StepResult> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(UdacError::NonFinite(format!("action {action:?}")));
    }
    let EnvState {
        position,
        step_index,
        mut rng,
    } = state;
    let cap = config.max_action_magnitude;
    let w = config.arena_half_width;
    let mut next = [0.0; 2];
    for k in 0..2 {
        next[k] = (position[k] + action[k].clamp(-cap, cap)).clamp(-w, w);
    }
    // Drawn every step so the stream does not depend on the path taken.
    let coin = rng.gen::<f64>() < config.penalty_probability;
    let in_risky = config.in_risky_region(next);
    let penalty_fired = in_risky && coin;
    let mut reward = -config.step_cost_scale * config.distance_to_goal(next);
    if penalty_fired {
        reward -= config.penalty_magnitude;
    }
    let step_index = step_index + 1;
    let terminal = config.at_goal(next);
    let done = terminal || step_index >= config.max_episode_steps;
    Ok(StepResult {
        next_state: EnvState {
            position: next,
            step_index,
            rng,
        },
        reward,
        done,
        terminal,
        in_risky_region: in_risky,
        penalty_fired,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BehaviorAgentKind {
    /// Straight line to the goal, through the risky disk.
    DirectToGoal { noise_scale: f64 },
    /// Waypoints on an arc of radius `risky_radius + margin` above the disk.
    DetourAroundRisk { noise_scale: f64, margin: f64 },
    /// `nominal` plus uniform noise of `noise_scale * cap` per axis.
    UniformNoisy { nominal: Vec2, noise_scale: f64 },
}

impl BehaviorAgentKind {
    /// Quality class used by the guidance classifier: 0 for the preferred
    /// (risk-avoiding) mode, 1 otherwise.
    pub fn quality_label(&self) -> u32 {
        match self {
            BehaviorAgentKind::DetourAroundRisk { .. } => 0,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BehaviorAgentKind::DirectToGoal { .. } => "direct",
            BehaviorAgentKind::DetourAroundRisk { .. } => "detour",
            BehaviorAgentKind::UniformNoisy { .. } => "noisy",
        }
    }

    /// The three agents of the default mixture, in manifest order.
    pub fn default_mixture() -> [BehaviorAgentKind; 3] {
        [
            BehaviorAgentKind::DirectToGoal { noise_scale: 0.1 },
            BehaviorAgentKind::DetourAroundRisk {
                noise_scale: 0.1,
                margin: 0.1,
            },
            BehaviorAgentKind::UniformNoisy {
                nominal: [0.05, 0.0],
                noise_scale: 1.0,
            },
        ]
    }

    fn noise_scale(&self) -> f64 {
        match *self {
            BehaviorAgentKind::DirectToGoal { noise_scale }
            | BehaviorAgentKind::DetourAroundRisk { noise_scale, .. }
            | BehaviorAgentKind::UniformNoisy { noise_scale, .. } => noise_scale,
        }
    }

    /// Scripted action at `position`, within the per-axis cap.
    pub fn action<R: Rng + ?Sized>(&self, config: &RiskyPointMassConfig, position: Vec2, rng: &mut R) -> Vec2 {
        let cap = config.max_action_magnitude;
        let nominal = match *self {
            BehaviorAgentKind::DirectToGoal { .. } => toward(position, config.goal_position, cap),
            BehaviorAgentKind::DetourAroundRisk { margin, .. } => {
                toward(position, detour_waypoint(config, position, margin), cap)
            }
            BehaviorAgentKind::UniformNoisy { nominal, .. } => nominal,
        };
        let ns = self.noise_scale();
        let mut a = nominal;
        if ns > 0.0 {
            for v in a.iter_mut() {
                *v += rng.gen_range(-1.0..1.0) * ns * cap;
            }
        }
        [a[0].clamp(-cap, cap), a[1].clamp(-cap, cap)]
    }
}

/// Move toward `target` along the straight line, scaled so neither axis
/// exceeds `cap`.
fn toward(p: Vec2, target: Vec2, cap: f64) -> Vec2 {
    let d = sub(target, p);
    let m = d[0].abs().max(d[1].abs());
    if m <= cap {
        d
    } else {
        [d[0] * cap / m, d[1] * cap / m]
    }
}

const DETOUR_ARC_SEGMENTS: usize = 6;

/// Next waypoint on the upper arc around the risky disk. The waypoints sit
/// far enough out that the chords between them also clear
/// `risky_radius + margin`.
pub fn detour_waypoint(config: &RiskyPointMassConfig, p: Vec2, margin: f64) -> Vec2 {
    use std::f64::consts::PI;
    let c = config.risky_center;
    let step = PI / DETOUR_ARC_SEGMENTS as f64;
    let tolerance = 0.1 * step;
    // Waypoints are abandoned early and not always reached exactly, so a leg
    // can span up to 1.5 steps of arc.
    let radius = (config.risky_radius + margin) / (0.75 * step).cos();
    let rel = sub(p, c);
    let mut phi = rel[1].atan2(rel[0]);
    if phi < 0.0 {
        phi += 2.0 * PI;
    }
    if phi > 1.5 * PI {
        return config.goal_position;
    }
    for k in 1..DETOUR_ARC_SEGMENTS {
        let angle = PI - k as f64 * step;
        if phi > PI || angle < phi - tolerance {
            return [c[0] + radius * angle.cos(), c[1] + radius * angle.sin()];
        }
    }
    config.goal_position
}

/// One logged step, in environment units.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvTransition {
    pub state: Vec2,
    pub action: Vec2,
    pub reward: f64,
    pub next_state: Vec2,
    pub terminal: bool,
    pub in_risky_region: bool,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub agent: BehaviorAgentKind,
    pub transitions: Vec<EnvTransition>,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn violations(&self) -> usize {
        self.transitions.iter().filter(|t| t.in_risky_region).count()
    }
}

/// Derive independent per-episode seeds from one master seed.
pub fn episode_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

/// Run one scripted episode. The environment and the agent's noise use
/// separate streams derived from `seed`.
pub fn run_scripted_episode(config: &RiskyPointMassConfig, agent: BehaviorAgentKind, seed: u64) -> Result<Episode> {
    let mut state = reset(config, seed);
    let mut agent_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut transitions = Vec::new();
    loop {
        let s = state.position;
        let a = agent.action(config, s, &mut agent_rng);
        let res = step(config, state, a)?;
        transitions.push(EnvTransition {
            state: s,
            action: a,
            reward: res.reward,
            next_state: res.next_state.position,
            terminal: res.terminal,
            in_risky_region: res.in_risky_region,
        });
        if res.done {
            break;
        }
        state = res.next_state;
    }
    Ok(Episode { agent, transitions })
}

pub fn rollout_behavior(
    config: &RiskyPointMassConfig,
    agent: BehaviorAgentKind,
    episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if episodes == 0 {
        return Err(UdacError::invalid("episodes must be at least 1"));
    }
    episode_seeds(seed, episodes)
        .into_iter()
        .map(|s| run_scripted_episode(config, agent, s))
        .collect()
}

/// Split `episodes` across agents by `ratios`, largest remainder first, so
/// each count is within one episode of its exact share.
pub fn mixture_counts(ratios: &[f64], episodes: usize) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|&r| !(r >= 0.0)) || !(total > 0.0) {
        return Err(UdacError::invalid(format!("bad mixture ratios {ratios:?}")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r / total * episodes as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = episodes - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    Ok(counts)
}

/// Episodes from several agents in the given proportions, interleaved in
/// round-robin order of agent index.
pub fn rollout_mixture(
    config: &RiskyPointMassConfig,
    agents: &[BehaviorAgentKind],
    ratios: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if agents.len() != ratios.len() {
        return Err(UdacError::invalid("one mixture ratio per agent"));
    }
    let counts = mixture_counts(ratios, episodes)?;
    let seeds = episode_seeds(seed, episodes);
    let mut out = Vec::with_capacity(episodes);
    let mut k = 0;
    for (agent, &n) in agents.iter().zip(&counts) {
        for _ in 0..n {
            out.push(run_scripted_episode(config, *agent, seeds[k])?);
            k += 1;
        }
    }
    Ok(out)
}
