//! The fixed offline dataset: storage, minibatch sampling, action
//! normalization and the `UDACDS1` file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "UDACDS1"
//! u32 state_dim, u32 action_dim, u64 count
//! action_dim x f64 action_low, action_dim x f64 action_high
//! u32 manifest entries, each { u32 name_len, name, u64 episodes }
//! count x record { state, action, reward, next_state, done, label }  (all f64)
//! u32 crc32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::checkpoint::{verify_crc, Reader};
use crate::env::{Episode, RiskyPointMassConfig};
use crate::error::{Result, UdacError};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 7] = b"UDACDS1";

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Environment units.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True only for genuine termination; time-limit cut-offs bootstrap.
    pub done: bool,
    /// 0 = preferred mode, 1 = sub-optimal. Only the guidance classifier
    /// reads it.
    pub quality_label: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// `(agent name, episode count)` in generation order.
    pub source_manifest: Vec<(String, u64)>,
}

/// A minibatch laid out as matrices, actions normalized to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl OfflineDataset {
    pub fn new(
        transitions: Vec<Transition>,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        source_manifest: Vec<(String, u64)>,
    ) -> Result<Self> {
        let first = transitions.first().ok_or(UdacError::Empty("dataset"))?;
        let (state_dim, action_dim) = (first.state.len(), first.action.len());
        if action_low.len() != action_dim || action_high.len() != action_dim {
            return Err(UdacError::Dimension(format!(
                "action bounds have {}/{} entries for action_dim {action_dim}",
                action_low.len(),
                action_high.len()
            )));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.state.len() != state_dim || t.next_state.len() != state_dim || t.action.len() != action_dim {
                return Err(UdacError::Dimension(format!(
                    "transition {i} has inconsistent dimensions"
                )));
            }
            let finite = t
                .state
                .iter()
                .chain(&t.action)
                .chain(&t.next_state)
                .all(|x| x.is_finite())
                && t.reward.is_finite();
            if !finite {
                return Err(UdacError::NonFinite(format!("transition {i}")));
            }
        }
        Ok(Self {
            transitions,
            state_dim,
            action_dim,
            action_low,
            action_high,
            source_manifest,
        })
    }

    /// Flatten scripted episodes; each transition is labelled with its
    /// agent's quality class.
    pub fn from_episodes(episodes: &[Episode], config: &RiskyPointMassConfig) -> Result<Self> {
        let mut manifest: Vec<(String, u64)> = Vec::new();
        let mut transitions = Vec::new();
        for ep in episodes {
            let name = ep.agent.name();
            match manifest.iter_mut().find(|(n, _)| n == name) {
                Some((_, c)) => *c += 1,
                None => manifest.push((name.to_owned(), 1)),
            }
            let label = ep.agent.quality_label();
            transitions.extend(ep.transitions.iter().map(|t| Transition {
                state: t.state.to_vec(),
                action: t.action.to_vec(),
                reward: t.reward,
                next_state: t.next_state.to_vec(),
                done: t.terminal,
                quality_label: label,
            }));
        }
        let cap = config.max_action_magnitude;
        Self::new(transitions, vec![-cap; 2], vec![cap; 2], manifest)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `batch_size` uniform draws with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.transitions.is_empty() {
            return Err(UdacError::Empty("dataset"));
        }
        if batch_size == 0 {
            return Err(UdacError::invalid("batch size must be at least 1"));
        }
        Ok((0..batch_size)
            .map(|_| rng.gen_range(0..self.transitions.len()))
            .collect())
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(batch_size, rng)?;
        self.gather(&idx)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Batch> {
        let (ds, da) = (self.state_dim, self.action_dim);
        let b = indices.len();
        let mut states = Vec::with_capacity(b * ds);
        let mut next_states = Vec::with_capacity(b * ds);
        let mut actions = Vec::with_capacity(b * da);
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        let mut labels = Vec::with_capacity(b);
        for &i in indices {
            let t = self
                .transitions
                .get(i)
                .ok_or_else(|| UdacError::invalid(format!("index {i} out of range")))?;
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
            actions.extend(self.normalize_action(&t.action)?);
            rewards.push(t.reward);
            dones.push(t.done);
            labels.push(t.quality_label as usize);
        }
        Ok(Batch {
            states: Tensor::matrix(b, ds, states),
            actions: Tensor::matrix(b, da, actions),
            rewards,
            next_states: Tensor::matrix(b, ds, next_states),
            dones,
            labels,
        })
    }

    fn check_bounds(&self) -> Result<()> {
        for (lo, hi) in self.action_low.iter().zip(&self.action_high) {
            if !(hi - lo > 0.0) {
                return Err(UdacError::invalid(format!("zero-width action bound [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Affine map from `[low, high]` to `[-1, 1]`.
    pub fn normalize_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        self.check_bounds()?;
        Ok(action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| 2.0 * (a - lo) / (hi - lo) - 1.0)
            .collect())
    }

    pub fn denormalize_action(&self, action: &[f64]) -> Result<Vec<f64>> {
        self.check_bounds()?;
        Ok(action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| lo + (a + 1.0) * 0.5 * (hi - lo))
            .collect())
    }

    /// Bytes per transition record.
    pub fn record_size(&self) -> usize {
        8 * (2 * self.state_dim + self.action_dim + 3)
    }

    /// Bytes before the first record.
    pub fn header_size(&self) -> usize {
        let manifest: usize = self.source_manifest.iter().map(|(n, _)| 12 + n.len()).sum();
        DATASET_MAGIC.len() + 16 + 16 * self.action_dim + 4 + manifest
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.header_size() + self.len() * self.record_size() + 4);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.action_dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for x in self.action_low.iter().chain(&self.action_high) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.extend_from_slice(&(self.source_manifest.len() as u32).to_le_bytes());
        for (name, count) in &self.source_manifest {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&count.to_le_bytes());
        }
        for t in &self.transitions {
            let tail = [if t.done { 1.0 } else { 0.0 }, t.quality_label as f64];
            let fields = t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .chain(&t.next_state)
                .chain(tail.iter());
            for x in fields {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < DATASET_MAGIC.len() {
            return Err(UdacError::Truncated("magic"));
        }
        if &bytes[..DATASET_MAGIC.len()] != DATASET_MAGIC {
            return Err(UdacError::BadMagic { expected: "UDACDS1" });
        }
        let mut r = Reader::new(bytes);
        r.take(DATASET_MAGIC.len(), "magic")?;
        let state_dim = r.u32("state_dim")? as usize;
        let action_dim = r.u32("action_dim")? as usize;
        let count = r.u64("count")? as usize;
        if state_dim == 0 || action_dim == 0 {
            return Err(UdacError::Dimension(format!(
                "state_dim {state_dim} / action_dim {action_dim} must be positive"
            )));
        }
        let mut bounds = Vec::with_capacity(2 * action_dim);
        for _ in 0..2 * action_dim {
            bounds.push(r.f64("action bounds")?);
        }
        let action_high = bounds.split_off(action_dim);
        let action_low = bounds;
        let entries = r.u32("manifest")? as usize;
        let mut source_manifest = Vec::with_capacity(entries.min(64));
        for _ in 0..entries {
            let n = r.u32("manifest name")? as usize;
            let name = String::from_utf8_lossy(r.take(n, "manifest name")?).into_owned();
            source_manifest.push((name, r.u64("manifest count")?));
        }
        let record = 8 * (2 * state_dim + action_dim + 3);
        let expected = count
            .checked_mul(record)
            .and_then(|p| p.checked_add(4))
            .ok_or_else(|| UdacError::Dimension("record count overflows".into()))?;
        match r.remaining().cmp(&expected) {
            std::cmp::Ordering::Less => return Err(UdacError::Truncated("transition records")),
            std::cmp::Ordering::Greater => {
                return Err(UdacError::Dimension(format!(
                    "{} payload bytes do not match {count} records of {record} bytes",
                    r.remaining() - 4
                )))
            }
            std::cmp::Ordering::Equal => {}
        }
        verify_crc(bytes)?;
        let mut read_vec = |n: usize| (0..n).map(|_| r.f64("record")).collect::<Result<Vec<f64>>>();
        let mut transitions = Vec::with_capacity(count);
        for _ in 0..count {
            let state = read_vec(state_dim)?;
            let action = read_vec(action_dim)?;
            let reward = read_vec(1)?[0];
            let next_state = read_vec(state_dim)?;
            let tail = read_vec(2)?;
            transitions.push(Transition {
                state,
                action,
                reward,
                next_state,
                done: tail[0] != 0.0,
                quality_label: tail[1] as u32,
            });
        }
        Self::new(transitions, action_low, action_high, source_manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Count of transitions per quality label.
    pub fn label_counts(&self) -> Vec<usize> {
        let max = self
            .transitions
            .iter()
            .map(|t| t.quality_label as usize)
            .max()
            .unwrap_or(0);
        let mut counts = vec![0; max + 1];
        for t in &self.transitions {
            counts[t.quality_label as usize] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout_mixture, BehaviorAgentKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one() -> OfflineDataset {
        OfflineDataset::new(
            vec![Transition {
                state: vec![0.0, 0.0],
                action: vec![0.1, -0.05],
                reward: -1.5,
                next_state: vec![0.1, -0.05],
                done: false,
                quality_label: 1,
            }],
            vec![-0.1, -0.1],
            vec![0.1, 0.1],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_transition_batch() {
        let d = one();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = d.sample_batch(1, &mut rng).unwrap();
        assert_eq!(b.rewards, vec![-1.5]);
        assert_eq!(b.actions.data(), &[1.0, -0.5]);
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            OfflineDataset::new(vec![], vec![], vec![], vec![]),
            Err(UdacError::Empty(_))
        ));
    }

    #[test]
    fn sampling_deterministic_and_uniform() {
        let mut d = one();
        let t = d.transitions[0].clone();
        d.transitions = (0..10).map(|_| t.clone()).collect();
        let a = d.sample_indices(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = d.sample_indices(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let n = 1_000_000;
        let idx = d.sample_indices(n, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut freq = [0usize; 10];
        for i in idx {
            freq[i] += 1;
        }
        let mut tv = 0.0;
        for f in freq {
            let p = f as f64 / n as f64;
            assert!((p - 0.1).abs() < 0.002, "frequency {p}");
            tv += (p - 0.1).abs();
        }
        assert!(0.5 * tv < 0.01);
    }

    #[test]
    fn normalization_endpoints_and_zero_width() {
        let d = one();
        assert_eq!(d.normalize_action(&[0.1, 0.0]).unwrap(), vec![1.0, 0.0]);
        let mut bad = d.clone();
        bad.action_high[0] = -0.1;
        assert!(bad.normalize_action(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let d = one();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let a = vec![rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
            let back = d.denormalize_action(&d.normalize_action(&a).unwrap()).unwrap();
            worst = worst.max((back[0] - a[0]).abs()).max((back[1] - a[1]).abs());
        }
        assert!(worst < 1e-12);
    }

    #[test]
    fn file_round_trip_and_size() {
        let cfg = RiskyPointMassConfig::default();
        let eps = rollout_mixture(&cfg, &BehaviorAgentKind::default_mixture(), &[0.4, 0.4, 0.2], 300, 5).unwrap();
        let d = OfflineDataset::from_episodes(&eps, &cfg).unwrap();
        assert_eq!(
            d.source_manifest,
            vec![("direct".into(), 120), ("detour".into(), 120), ("noisy".into(), 60)]
        );
        let bytes = d.encode();
        assert_eq!(bytes.len(), d.header_size() + d.len() * d.record_size() + 4);
        let back = OfflineDataset::decode(&bytes).unwrap();
        assert_eq!(back, d);

        let one = one();
        assert_eq!(OfflineDataset::decode(&one.encode()).unwrap(), one);
    }

    #[test]
    fn load_errors_are_distinct() {
        let d = one();
        let bytes = d.encode();

        let mut corrupt = bytes.clone();
        let k = d.header_size() + 3;
        corrupt[k] ^= 0x01;
        assert!(matches!(
            OfflineDataset::decode(&corrupt),
            Err(UdacError::Checksum { .. })
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            OfflineDataset::decode(&magic),
            Err(UdacError::BadMagic { .. })
        ));

        assert!(matches!(
            OfflineDataset::decode(&bytes[..bytes.len() - 10]),
            Err(UdacError::Truncated(_))
        ));

        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0u8; 8]);
        assert!(matches!(OfflineDataset::decode(&extra), Err(UdacError::Dimension(_))));
    }

    #[test]
    fn labels_follow_agents() {
        let cfg = RiskyPointMassConfig::default();
        let eps = rollout_mixture(&cfg, &BehaviorAgentKind::default_mixture(), &[0.4, 0.4, 0.2], 20, 1).unwrap();
        let d = OfflineDataset::from_episodes(&eps, &cfg).unwrap();
        let detour: usize = eps
            .iter()
            .filter(|e| e.agent.quality_label() == 0)
            .map(|e| e.transitions.len())
            .sum();
        assert_eq!(d.label_counts()[0], detour);
        assert_eq!(d.label_counts().iter().sum::<usize>(), d.len());
    }
}
