//! Implicit quantile critic `F^-1(s, a; tau)` for continuous actions.
//!
//! The state-action pair is embedded by a linear layer + Mish, the quantile
//! level by `n_cos` cosine features `cos(pi k tau)` through another linear
//! layer + Mish; the two embeddings are multiplied elementwise and a
//! three-layer head maps the product to one quantile value.

use rand::distributions::Open01;
use rand::Rng;

use crate::error::{Result, UdacError};
use crate::nn::{Activation, BoundMlp, MlpParams, Parameterized};
use crate::optim::soft_update;
use crate::tape::{quantile_huber_value, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitQuantileCritic {
    pub embed_params: MlpParams,
    pub tau_embed: MlpParams,
    pub head_params: MlpParams,
    pub n_cos: usize,
    pub state_dim: usize,
    pub action_dim: usize,
}

#[derive(Clone, Debug)]
pub struct BoundCritic {
    embed: BoundMlp,
    tau_embed: BoundMlp,
    head: BoundMlp,
    n_cos: usize,
}

impl BoundCritic {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.embed.vars.clone();
        v.extend(&self.tau_embed.vars);
        v.extend(&self.head.vars);
        v
    }

    /// Quantile values `[B, N]` for states `[B, ds]`, actions `[B, da]` and
    /// per-row quantile levels `taus` (`[B, N]`).
    pub fn quantiles(&self, tape: &mut Tape, states: Var, actions: Var, taus: &Tensor) -> Result<Var> {
        let b = tape.value(states).rows();
        if tape.value(actions).rows() != b || taus.rows() != b {
            return Err(UdacError::Shape {
                op: "critic quantiles (batch)",
                expected: vec![b],
                actual: vec![tape.value(actions).rows(), taus.rows()],
            });
        }
        let n = taus.cols();
        let sa = tape.concat_cols(&[states, actions]);
        let emb = self.embed.forward(tape, sa)?;
        let emb = tape.repeat_rows(emb, n);
        let feats = tape.constant(cosine_features(taus.data(), self.n_cos));
        let temb = self.tau_embed.forward(tape, feats)?;
        let fused = tape.mul(emb, temb);
        let q = self.head.forward(tape, fused)?;
        Ok(tape.reshape(q, &[b, n]))
    }
}

/// `[len(taus), n_cos]` matrix of `cos(pi k tau)`, `k = 0..n_cos`.
pub fn cosine_features(taus: &[f64], n_cos: usize) -> Tensor {
    let mut data = Vec::with_capacity(taus.len() * n_cos);
    for &t in taus {
        let c1 = (std::f64::consts::PI * t).cos();
        let (mut prev, mut cur) = (c1, 1.0);
        for _ in 0..n_cos {
            data.push(cur);
            let next = 2.0 * c1 * cur - prev;
            prev = cur;
            cur = next;
        }
    }
    Tensor::matrix(taus.len(), n_cos, data)
}

impl ImplicitQuantileCritic {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: usize, n_cos: usize, rng: &mut R) -> Self {
        let embed_params = MlpParams::init(&[state_dim + action_dim, hidden], Activation::Mish, rng)
            .with_output_activation(Activation::Mish);
        let tau_embed =
            MlpParams::init(&[n_cos, hidden], Activation::Mish, rng).with_output_activation(Activation::Mish);
        let head_params = MlpParams::init(&[hidden, hidden, hidden, 1], Activation::Mish, rng);
        Self {
            embed_params,
            tau_embed,
            head_params,
            n_cos,
            state_dim,
            action_dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundCritic {
        BoundCritic {
            embed: self.embed_params.bind(tape, trainable),
            tau_embed: self.tau_embed.bind(tape, trainable),
            head: self.head_params.bind(tape, trainable),
            n_cos: self.n_cos,
        }
    }

    /// Evaluate without gradients.
    pub fn eval(&self, states: &Tensor, actions: &Tensor, taus: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let a = tape.constant(actions.clone());
        let q = bound.quantiles(&mut tape, s, a, taus)?;
        Ok(tape.value(q).clone())
    }

    /// A single quantile value.
    pub fn quantile_value(&self, state: &[f64], action: &[f64], tau: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(UdacError::invalid(format!("quantile level {tau} outside [0, 1]")));
        }
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(UdacError::Dimension(format!(
                "critic expects state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        let q = self.eval(
            &Tensor::row_vector(state.to_vec()),
            &Tensor::row_vector(action.to_vec()),
            &Tensor::scalar(tau),
        )?;
        Ok(q.item())
    }
}

impl Parameterized for ImplicitQuantileCritic {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embed_params.params();
        p.extend(self.tau_embed.params());
        p.extend(self.head_params.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embed_params.params_mut();
        p.extend(self.tau_embed.params_mut());
        p.extend(self.head_params.params_mut());
        p
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.embed_params.param_names(&format!("{prefix}embed."));
        n.extend(self.tau_embed.param_names(&format!("{prefix}tau_embed.")));
        n.extend(self.head_params.param_names(&format!("{prefix}head.")));
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticPair {
    pub online: ImplicitQuantileCritic,
    pub target: ImplicitQuantileCritic,
}

impl CriticPair {
    pub fn new(online: ImplicitQuantileCritic) -> Self {
        Self {
            target: online.clone(),
            online,
        }
    }

    pub fn soft_update(&mut self, mu: f64) -> Result<()> {
        soft_update(self.target.params_mut(), self.online.params(), mu)
    }
}

/// Quantile levels for one critic update: `taus` for the online estimate,
/// `taus_prime` for the bootstrapped target, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileGrid {
    pub taus: Tensor,
    pub taus_prime: Tensor,
}

impl QuantileGrid {
    /// Independent `U(0, 1)` levels for every row.
    pub fn sample<R: Rng + ?Sized>(batch: usize, n: usize, k: usize, rng: &mut R) -> Self {
        let mut draw = |cols: usize| {
            let data = (0..batch * cols).map(|_| rng.sample::<f64, _>(Open01)).collect();
            Tensor::matrix(batch, cols, data)
        };
        let taus = draw(n);
        let taus_prime = draw(k);
        Self { taus, taus_prime }
    }

    /// The same `taus` / `taus_prime` vectors repeated for every row.
    pub fn broadcast(batch: usize, taus: &[f64], taus_prime: &[f64]) -> Self {
        let rep = |v: &[f64]| {
            let data = (0..batch).flat_map(|_| v.iter().copied()).collect();
            Tensor::matrix(batch, v.len(), data)
        };
        Self {
            taus: rep(taus),
            taus_prime: rep(taus_prime),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: &Tensor| t.data().iter().all(|&x| x > 0.0 && x < 1.0);
        if !ok(&self.taus) || !ok(&self.taus_prime) {
            return Err(UdacError::invalid("quantile levels must lie strictly inside (0, 1)"));
        }
        Ok(())
    }
}

/// Scalar quantile Huber loss with input validation.
pub fn quantile_huber(delta: f64, tau: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(UdacError::invalid(format!(
            "huber threshold must be positive, got {kappa}"
        )));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(UdacError::invalid(format!("quantile level {tau} outside [0, 1]")));
    }
    Ok(quantile_huber_value(delta, tau, kappa))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(UdacError::invalid(format!("discount {gamma} outside [0, 1)")));
    }
    Ok(())
}

/// Distributional TD error for one transition:
/// `r + gamma * F'^-1(s', a'; tau') - F^-1(s, a; tau)`, the bootstrap term
/// dropped on terminal transitions. The next-state term uses the target
/// critic.
#[allow(clippy::too_many_arguments)]
pub fn td_error(
    pair: &CriticPair,
    state: &[f64],
    action: &[f64],
    reward: f64,
    next_state: &[f64],
    done: bool,
    next_action: &[f64],
    tau: f64,
    tau_prime: f64,
    gamma: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    let current = pair.online.quantile_value(state, action, tau)?;
    let bootstrap = if done || gamma == 0.0 {
        0.0
    } else {
        gamma * pair.target.quantile_value(next_state, next_action, tau_prime)?
    };
    Ok(reward + bootstrap - current)
}

/// Inputs to one critic update. `next_actions` are the policy's actions at
/// the next states and `rewards` are already scaled.
pub struct CriticBatch<'a> {
    pub states: &'a Tensor,
    pub actions: &'a Tensor,
    pub rewards: &'a [f64],
    pub next_states: &'a Tensor,
    pub dones: &'a [bool],
}

/// Bootstrapped target samples `[B, K]`, computed with the target critic
/// and detached from the tape.
pub fn td_targets(
    target: &ImplicitQuantileCritic,
    batch: &CriticBatch<'_>,
    next_actions: &Tensor,
    taus_prime: &Tensor,
    gamma: f64,
) -> Result<Tensor> {
    check_gamma(gamma)?;
    let next_q = target.eval(batch.next_states, next_actions, taus_prime)?;
    let (b, k) = (next_q.rows(), next_q.cols());
    let mut out = Tensor::zeros(&[b, k]);
    for r in 0..b {
        let keep = if batch.dones[r] { 0.0 } else { gamma };
        for j in 0..k {
            out.set(r, j, batch.rewards[r] + keep * next_q.get(r, j));
        }
    }
    Ok(out)
}

/// Critic objective: mean over the batch of
/// `(1/(N K)) sum_i sum_j L_kappa(delta_ij; tau_i)`.
///
/// Only `online` carries gradient; targets enter as constants.
pub fn critic_loss(
    tape: &mut Tape,
    online: &BoundCritic,
    targets: Tensor,
    batch: &CriticBatch<'_>,
    grid: &QuantileGrid,
    kappa: f64,
) -> Result<Var> {
    if batch.rewards.is_empty() {
        return Err(UdacError::Empty("critic batch"));
    }
    if !(kappa > 0.0) {
        return Err(UdacError::invalid(format!(
            "huber threshold must be positive, got {kappa}"
        )));
    }
    let s = tape.constant(batch.states.clone());
    let a = tape.constant(batch.actions.clone());
    let q = online.quantiles(tape, s, a, &grid.taus)?;
    Ok(tape.quantile_huber(q, targets, grid.taus.clone(), kappa))
}

/// Empirical quantile `F^-1(tau)` of sorted samples (left-continuous inverse
/// of the empirical CDF).
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let k = ((tau * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// The 99-point quantile grid `k / 100`.
pub fn w1_grid() -> Vec<f64> {
    (1..100).map(|k| k as f64 / 100.0).collect()
}

/// Mean absolute quantile difference over the 99-point grid between a
/// quantile function and an empirical sample.
pub fn wasserstein1_quantiles(quantile_fn: impl Fn(f64) -> f64, samples: &[f64]) -> Result<f64> {
    if samples.len() < 100 {
        return Err(UdacError::invalid(format!(
            "need at least 100 samples for the W1 diagnostic, got {}",
            samples.len()
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    let grid = w1_grid();
    let total: f64 = grid
        .iter()
        .map(|&t| (quantile_fn(t) - empirical_quantile(&sorted, t)).abs())
        .sum();
    Ok(total / grid.len() as f64)
}

/// W1 diagnostic between the critic's distribution at `(s, a)` and samples.
pub fn wasserstein1_diagnostic(
    critic: &ImplicitQuantileCritic,
    state: &[f64],
    action: &[f64],
    samples: &[f64],
) -> Result<f64> {
    let grid = w1_grid();
    let q = critic.eval(
        &Tensor::row_vector(state.to_vec()),
        &Tensor::row_vector(action.to_vec()),
        &Tensor::row_vector(grid.clone()),
    )?;
    wasserstein1_quantiles(
        |t| {
            let k = grid.iter().position(|&g| g == t).expect("grid level");
            q.data()[k]
        },
        samples,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic(seed: u64) -> ImplicitQuantileCritic {
        ImplicitQuantileCritic::new(2, 1, 16, 8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn cosine_recurrence_matches_direct() {
        let taus = [0.0, 0.013, 0.25, 0.5, 0.77, 0.999, 1.0];
        let f = cosine_features(&taus, 64);
        for (r, &t) in taus.iter().enumerate() {
            for k in 0..64 {
                let direct = (std::f64::consts::PI * k as f64 * t).cos();
                assert!((f.get(r, k) - direct).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut c = critic(0);
        c.head_params.zero_last_layer();
        for tau in [0.0, 0.3, 1.0] {
            assert_eq!(c.quantile_value(&[0.2, -0.4], &[0.5], tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn quantile_value_deterministic_and_checked() {
        let c = critic(1);
        let a = c.quantile_value(&[0.1, 0.2], &[0.3], 0.3).unwrap();
        let b = c.quantile_value(&[0.1, 0.2], &[0.3], 0.3).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(c.quantile_value(&[0.1, 0.2], &[0.3], 1.2).is_err());
        assert!(c.quantile_value(&[0.1], &[0.3], 0.5).is_err());
    }

    #[test]
    fn huber_reference_values() {
        assert_eq!(quantile_huber(0.0, 0.3, 1.0).unwrap(), 0.0);
        assert!((quantile_huber(2.0, 0.5, 1.0).unwrap() - 0.75).abs() < 1e-15);
        assert!((quantile_huber(0.5, 0.9, 1.0).unwrap() - 0.1125).abs() < 1e-15);
        assert!(quantile_huber(1.0, 0.5, 0.0).is_err());
        // negative residuals use |delta| in the linear branch
        assert!((quantile_huber(-2.0, 0.5, 1.0).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn huber_continuous_at_threshold() {
        for &tau in &[0.1, 0.5, 0.9] {
            for &k in &[0.5, 1.0, 3.0] {
                for s in [-1.0, 1.0] {
                    let inside = quantile_huber(s * k * (1.0 - 1e-12), tau, k).unwrap();
                    let at = quantile_huber(s * k, tau, k).unwrap();
                    assert!((inside - at).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn huber_tends_to_pinball() {
        let kappa = 1e-6;
        for &(d, tau) in &[(0.7, 0.2), (-1.3, 0.8), (2.0, 0.5), (-0.05, 0.05)] {
            let w: f64 = if d < 0.0 { 1.0 - tau } else { tau };
            let pinball = w * f64::abs(d);
            let h = quantile_huber(d, tau, kappa).unwrap();
            assert!(((h - pinball) / pinball).abs() < 1e-3);
        }
    }

    fn zero_pair() -> CriticPair {
        let mut c = critic(3);
        c.head_params.zero_last_layer();
        CriticPair::new(c)
    }

    #[test]
    fn td_error_conventions() {
        let pair = zero_pair();
        let (s, a) = ([0.1, 0.1], [0.2]);
        let d = td_error(&pair, &s, &a, 2.0, &s, false, &a, 0.4, 0.7, 0.9).unwrap();
        assert_eq!(d, 2.0);
        let d = td_error(&pair, &s, &a, 1.5, &s, true, &a, 0.4, 0.7, 0.9).unwrap();
        assert_eq!(d, 1.5);
        assert!(td_error(&pair, &s, &a, 1.0, &s, false, &a, 0.4, 0.7, 1.0).is_err());

        let c = critic(4);
        let pair = CriticPair::new(c.clone());
        let q = c.quantile_value(&s, &a, 0.4).unwrap();
        for tp in [0.1, 0.5, 0.9] {
            let d = td_error(&pair, &s, &a, 0.5, &s, false, &a, 0.4, tp, 0.0).unwrap();
            assert_eq!(d, 0.5 - q);
        }
    }

    #[test]
    fn loss_reduces_to_hand_sums() {
        // Zero critic: pred = 0 so delta = target.
        let pair = zero_pair();
        let states = Tensor::matrix(1, 2, vec![0.0, 0.0]);
        let actions = Tensor::matrix(1, 1, vec![0.0]);
        let batch = CriticBatch {
            states: &states,
            actions: &actions,
            rewards: &[0.0],
            next_states: &states,
            dones: &[true],
        };
        let grid = QuantileGrid::broadcast(1, &[0.3, 0.8], &[0.5, 0.5]);
        let targets = Tensor::matrix(1, 2, vec![2.0, 0.5]);
        let mut tape = Tape::new();
        let online = pair.online.bind(&mut tape, true);
        let l = critic_loss(&mut tape, &online, targets, &batch, &grid, 1.0).unwrap();
        let expected = (quantile_huber(2.0, 0.3, 1.0).unwrap()
            + quantile_huber(0.5, 0.3, 1.0).unwrap()
            + quantile_huber(2.0, 0.8, 1.0).unwrap()
            + quantile_huber(0.5, 0.8, 1.0).unwrap())
            / 4.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-15);

        let grid1 = QuantileGrid::broadcast(1, &[0.9], &[0.5]);
        let mut tape = Tape::new();
        let online = pair.online.bind(&mut tape, true);
        let l = critic_loss(&mut tape, &online, Tensor::scalar(0.5), &batch, &grid1, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), quantile_huber(0.5, 0.9, 1.0).unwrap());
    }

    #[test]
    fn consistent_critic_has_zero_loss() {
        let pair = zero_pair();
        let states = Tensor::matrix(3, 2, vec![0.1; 6]);
        let actions = Tensor::matrix(3, 1, vec![0.2; 3]);
        let batch = CriticBatch {
            states: &states,
            actions: &actions,
            rewards: &[0.0; 3],
            next_states: &states,
            dones: &[false; 3],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = QuantileGrid::sample(3, 4, 5, &mut rng);
        grid.validate().unwrap();
        let targets = td_targets(&pair.target, &batch, &actions, &grid.taus_prime, 0.9).unwrap();
        let mut tape = Tape::new();
        let online = pair.online.bind(&mut tape, true);
        let l = critic_loss(&mut tape, &online, targets, &batch, &grid, 1.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let pair = zero_pair();
        let e = Tensor::zeros(&[0, 2]);
        let batch = CriticBatch {
            states: &e,
            actions: &e,
            rewards: &[],
            next_states: &e,
            dones: &[],
        };
        let mut tape = Tape::new();
        let online = pair.online.bind(&mut tape, true);
        let grid = QuantileGrid::broadcast(0, &[0.5], &[0.5]);
        assert!(critic_loss(&mut tape, &online, Tensor::zeros(&[0, 1]), &batch, &grid, 1.0).is_err());
    }

    #[test]
    fn w1_reference_values() {
        let bern: Vec<f64> = (0..1000).map(|i| (i % 2) as f64).collect();
        let d = wasserstein1_quantiles(|_| 0.5, &bern).unwrap();
        assert!((d - 0.5).abs() < 1e-12);
        let c1 = vec![1.5; 200];
        assert!((wasserstein1_quantiles(|_| -0.5, &c1).unwrap() - 2.0).abs() < 1e-12);
        let mut sorted = bern.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let exact = wasserstein1_quantiles(|t| empirical_quantile(&sorted, t), &bern).unwrap();
        assert_eq!(exact, 0.0);
        assert!(wasserstein1_quantiles(|_| 0.0, &[1.0; 10]).is_err());
    }

    #[test]
    fn soft_update_tracks_online() {
        let mut pair = CriticPair::new(critic(5));
        for p in pair.online.params_mut() {
            p.data_mut().fill(1.0);
        }
        pair.soft_update(1.0).unwrap();
        assert_eq!(pair.online, pair.target);
    }
}
