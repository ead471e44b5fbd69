//! Small tabular MDPs and a Monte-Carlo sampler of their return
//! distributions, used as ground truth for the distributional critic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{OfflineDataset, Transition};
use crate::error::{Result, UdacError};

/// Discrete distribution as `(probability, value)` atoms.
pub type Atoms = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s * n_actions + a][s']`.
    pub transitions: Vec<Vec<f64>>,
    /// Reward distribution per `(s, a)`.
    pub rewards: Vec<Atoms>,
    pub terminal: Vec<bool>,
    pub gamma: f64,
}

const ROW_TOLERANCE: f64 = 1e-9;

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(UdacError::invalid(format!(
            "{what}: probabilities {row:?} do not sum to 1"
        )));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let sa = self.n_states * self.n_actions;
        if sa == 0 || sa > 100 {
            return Err(UdacError::invalid(format!("|S||A| = {sa} outside 1..=100")));
        }
        if self.transitions.len() != sa || self.rewards.len() != sa || self.terminal.len() != self.n_states {
            return Err(UdacError::Dimension(
                "tabular MDP tables do not match |S| and |A|".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(UdacError::invalid(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != self.n_states {
                return Err(UdacError::Dimension(format!(
                    "transition row {i} has {} entries",
                    row.len()
                )));
            }
            check_row(row, &format!("transition row {i}"))?;
        }
        for (i, atoms) in self.rewards.iter().enumerate() {
            let p: Vec<f64> = atoms.iter().map(|a| a.0).collect();
            check_row(&p, &format!("reward distribution {i}"))?;
        }
        Ok(())
    }

    fn sample_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
        let k = s * self.n_actions + a;
        let atoms = &self.rewards[k];
        let r = atoms[draw(atoms.iter().map(|x| x.0), rng)].1;
        let next = draw(self.transitions[k].iter().copied(), rng);
        (r, next)
    }

    /// One-hot state encoding.
    pub fn encode_state(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[s] = 1.0;
        v
    }

    /// Transitions collected under `policy` (`policy[s][a]`), starting from
    /// `start`, as an offline dataset with one-hot states and scalar actions
    /// `a` (bounds `[0, n_actions - 1]`, or `[-1, 1]` for a single action).
    pub fn collect_dataset(
        &self,
        policy: &[Vec<f64>],
        start: usize,
        episodes: usize,
        horizon: usize,
        seed: u64,
    ) -> Result<OfflineDataset> {
        self.check_policy(policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..episodes {
            let mut s = start;
            for _ in 0..horizon {
                if self.terminal[s] {
                    break;
                }
                let a = draw(policy[s].iter().copied(), &mut rng);
                let (r, next) = self.sample_step(s, a, &mut rng);
                out.push(Transition {
                    state: self.encode_state(s),
                    action: vec![a as f64],
                    reward: r,
                    next_state: self.encode_state(next),
                    done: self.terminal[next],
                    quality_label: 0,
                });
                s = next;
            }
        }
        let high = if self.n_actions > 1 {
            (self.n_actions - 1) as f64
        } else {
            1.0
        };
        let low = if self.n_actions > 1 { 0.0 } else { -1.0 };
        OfflineDataset::new(out, vec![low], vec![high], vec![("tabular".into(), episodes as u64)])
    }

    fn check_policy(&self, policy: &[Vec<f64>]) -> Result<()> {
        self.validate()?;
        if policy.len() != self.n_states || policy.iter().any(|r| r.len() != self.n_actions) {
            return Err(UdacError::Dimension("policy table does not match |S| x |A|".into()));
        }
        for (s, row) in policy.iter().enumerate() {
            check_row(row, &format!("policy row {s}"))?;
        }
        Ok(())
    }
}

/// Sorted Monte-Carlo samples of `sum_t gamma^t r_t` from `(start, first
/// action)` under `policy`, truncated after `horizon` steps.
pub fn chain_mdp_oracle(
    mdp: &TabularMdp,
    policy: &[Vec<f64>],
    start: usize,
    first_action: Option<usize>,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    mdp.check_policy(policy)?;
    if samples < 10_000 {
        return Err(UdacError::invalid(format!("need at least 10^4 samples, got {samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (mut s, mut g, mut disc) = (start, 0.0, 1.0);
        for t in 0..horizon {
            if mdp.terminal[s] {
                break;
            }
            let a = match (t, first_action) {
                (0, Some(a)) => a,
                _ => draw(policy[s].iter().copied(), &mut rng),
            };
            let (r, next) = mdp.sample_step(s, a, &mut rng);
            g += disc * r;
            disc *= mdp.gamma;
            s = next;
        }
        out.push(g);
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}
