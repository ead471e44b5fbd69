//! Risk-averse deterministic actor `pi(s) = clip(lambda * xi(s, beta) + beta, -1, 1)`
//! where `beta` is drawn from the behavior diffusion model and `xi` is a
//! tanh-bounded perturbation network.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::critic::{BoundCritic, ImplicitQuantileCritic};
use crate::diffusion::{diffusion_loss, DiffusionPolicy, NoiseModel, NoiseSchedule};
use crate::error::{Result, UdacError};
use crate::nn::{Activation, BoundMlp, MlpParams, Parameterized};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Risk measure applied to the critic's quantile function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistortionSpec {
    CVaR(f64),
    Mean,
    Wang(f64),
    Cpw(f64),
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DistortionSpec::CVaR(a) if !(a > 0.0 && a <= 1.0) => {
                Err(UdacError::invalid(format!("CVaR level must be in (0, 1], got {a}")))
            }
            DistortionSpec::Wang(e) | DistortionSpec::Cpw(e) if !e.is_finite() => Err(UdacError::invalid(format!(
                "distortion parameter must be finite, got {e}"
            ))),
            DistortionSpec::Cpw(e) if e <= 0.0 => Err(UdacError::invalid(format!("CPW eta must be positive, got {e}"))),
            _ => Ok(()),
        }
    }

    /// Map base levels `u` (drawn on `(0, 1)`) to the levels where the
    /// quantile function is evaluated.
    pub fn distort(&self, u: f64) -> Result<f64> {
        match *self {
            DistortionSpec::CVaR(alpha) => Ok(alpha * u),
            DistortionSpec::Mean => Ok(u),
            DistortionSpec::Wang(eta) => wang_distortion_tau(u, eta),
            DistortionSpec::Cpw(eta) => cpw_distortion_tau(u, eta),
        }
    }
}

impl fmt::Display for DistortionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistortionSpec::CVaR(a) => write!(f, "cvar:{a}"),
            DistortionSpec::Mean => write!(f, "mean"),
            DistortionSpec::Wang(e) => write!(f, "wang:{e}"),
            DistortionSpec::Cpw(e) => write!(f, "cpw:{e}"),
        }
    }
}

impl FromStr for DistortionSpec {
    type Err = UdacError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let param = |name: &str| -> Result<f64> {
            let a = arg.ok_or_else(|| UdacError::invalid(format!("{name} needs a parameter, e.g. {name}:0.1")))?;
            a.trim()
                .parse::<f64>()
                .map_err(|e| UdacError::invalid(format!("bad {name} parameter {a:?}: {e}")))
        };
        let spec = match kind.to_ascii_lowercase().as_str() {
            "cvar" => DistortionSpec::CVaR(param("cvar")?),
            "mean" if arg.is_none() => DistortionSpec::Mean,
            "wang" => DistortionSpec::Wang(param("wang")?),
            "cpw" => DistortionSpec::Cpw(param("cpw")?),
            _ => return Err(UdacError::invalid(format!("unsupported distortion {s:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_open_unit(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(UdacError::invalid(format!(
            "distortion level must be in (0, 1), got {tau}"
        )))
    }
}

/// Wang transform `Phi(Phi^-1(tau) + eta)`.
pub fn wang_distortion_tau(tau: f64, eta: f64) -> Result<f64> {
    check_open_unit(tau)?;
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(n.cdf(n.inverse_cdf(tau) + eta))
}

/// Cumulative probability weighting `tau^eta / (tau^eta + (1 - tau)^eta)^(1/eta)`.
pub fn cpw_distortion_tau(tau: f64, eta: f64) -> Result<f64> {
    check_open_unit(tau)?;
    let (a, b) = (tau.powf(eta), (1.0 - tau).powf(eta));
    Ok(a / (a + b).powf(1.0 / eta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorConfig {
    pub lambda: f64,
    pub distortion: DistortionSpec,
    pub n_tau: usize,
    pub diffusion_loss_weight: f64,
    /// Stratified base levels `(k - u_k) / n`; plain uniform draws otherwise.
    pub stratified: bool,
}

impl Default for ActorConfig {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            distortion: DistortionSpec::CVaR(0.1),
            n_tau: 16,
            diffusion_loss_weight: 1.0,
            stratified: true,
        }
    }
}

impl ActorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(UdacError::invalid(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.n_tau == 0 {
            return Err(UdacError::invalid("n_tau must be at least 1"));
        }
        if !(self.diffusion_loss_weight >= 0.0) {
            return Err(UdacError::invalid("diffusion_loss_weight must be non-negative"));
        }
        self.distortion.validate()
    }
}

/// `[rows, n]` matrix of distorted quantile levels.
pub fn sample_levels<R: Rng + ?Sized>(
    spec: &DistortionSpec,
    rows: usize,
    n: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if n == 0 {
        return Err(UdacError::invalid("n_tau must be at least 1"));
    }
    let mut data = Vec::with_capacity(rows * n);
    for _ in 0..rows {
        for k in 1..=n {
            let u: f64 = rng.sample(rand::distributions::Open01);
            let base = if stratified { (k as f64 - u) / n as f64 } else { u };
            data.push(spec.distort(base)?);
        }
    }
    Ok(Tensor::matrix(rows, n, data))
}

/// A differentiable quantile function `F^-1(s, a; tau)`.
pub trait QuantileModel {
    fn quantiles(&self, tape: &mut Tape, states: Var, actions: Var, taus: &Tensor) -> Result<Var>;
}

impl QuantileModel for BoundCritic {
    fn quantiles(&self, tape: &mut Tape, states: Var, actions: Var, taus: &Tensor) -> Result<Var> {
        BoundCritic::quantiles(self, tape, states, actions, taus)
    }
}

impl QuantileModel for ImplicitQuantileCritic {
    fn quantiles(&self, tape: &mut Tape, states: Var, actions: Var, taus: &Tensor) -> Result<Var> {
        self.bind(tape, false).quantiles(tape, states, actions, taus)
    }
}

/// Per-row distorted value `[B, 1]`: the mean of `F^-1` over `n_tau`
/// distorted levels.
#[allow(clippy::too_many_arguments)]
pub fn distorted_value<Q: QuantileModel, R: Rng + ?Sized>(
    tape: &mut Tape,
    critic: &Q,
    states: Var,
    actions: Var,
    spec: &DistortionSpec,
    n_tau: usize,
    stratified: bool,
    rng: &mut R,
) -> Result<Var> {
    let rows = tape.value(states).rows();
    let levels = sample_levels(spec, rows, n_tau, stratified, rng)?;
    let q = critic.quantiles(tape, states, actions, &levels)?;
    Ok(tape.row_mean(q))
}

/// Distorted value of one state-action pair, without gradients.
pub fn distorted_value_at<Q: QuantileModel, R: Rng + ?Sized>(
    critic: &Q,
    state: &[f64],
    action: &[f64],
    spec: &DistortionSpec,
    n_tau: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::row_vector(state.to_vec()));
    let a = tape.constant(Tensor::row_vector(action.to_vec()));
    let v = distorted_value(&mut tape, critic, s, a, spec, n_tau, true, rng)?;
    Ok(tape.value(v).item())
}

/// `xi(s, beta)`: input `[s, beta]`, tanh-squashed output of width `action_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationModel {
    pub params: MlpParams,
    pub state_dim: usize,
    pub action_dim: usize,
}

impl PerturbationModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let params = MlpParams::init(
            &[state_dim + action_dim, hidden, hidden, hidden, action_dim],
            Activation::Mish,
            rng,
        )
        .with_output_activation(Activation::Tanh);
        Self {
            params,
            state_dim,
            action_dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.params.bind(tape, trainable)
    }

    /// `xi(s, beta)` without gradients.
    pub fn eval(&self, states: &Tensor, betas: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let b = tape.constant(betas.clone());
        let x = tape.concat_cols(&[s, b]);
        let out = bound.forward(&mut tape, x)?;
        Ok(tape.value(out).clone())
    }
}

impl Parameterized for PerturbationModel {
    fn params(&self) -> Vec<&Tensor> {
        self.params.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.params_mut()
    }
    fn param_names(&self, prefix: &str) -> Vec<String> {
        self.params.param_names(prefix)
    }
}

/// `clip(lambda * xi + beta, -1, 1)` for plain vectors.
pub fn compose_action(lambda: f64, xi: &[f64], beta: &[f64]) -> Vec<f64> {
    xi.iter()
        .zip(beta)
        .map(|(x, b)| (lambda * x + b).clamp(-1.0, 1.0))
        .collect()
}

/// `clip(lambda * xi(s, beta) + beta, -1, 1)` on the tape.
pub fn perturbed_action(tape: &mut Tape, xi: &BoundMlp, states: Var, betas: Var, lambda: f64) -> Result<Var> {
    let x = tape.concat_cols(&[states, betas]);
    let p = xi.forward(tape, x)?;
    let p = tape.scale(p, lambda);
    let a = tape.add(p, betas);
    Ok(tape.clamp(a, -1.0, 1.0))
}

/// Behavior model plus perturbation: the full policy used for acting.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskActor {
    pub perturbation: PerturbationModel,
    pub behavior: DiffusionPolicy,
    pub lambda: f64,
}

impl RiskActor {
    /// Actions in normalized units for a batch of states.
    pub fn act<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        let betas = self.behavior.sample(states, rng)?;
        self.act_with_behavior(states, &betas)
    }

    pub fn act_with_behavior(&self, states: &Tensor, betas: &Tensor) -> Result<Tensor> {
        if self.lambda == 0.0 {
            return Ok(betas.clone());
        }
        let mut tape = Tape::new();
        let bound = self.perturbation.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let b = tape.constant(betas.clone());
        let a = perturbed_action(&mut tape, &bound, s, b, self.lambda)?;
        Ok(tape.value(a).clone())
    }
}

/// Tape nodes of one actor objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ActorLoss {
    pub total: Var,
    pub distorted: Var,
    pub diffusion: Var,
}

/// Inputs to the combined actor + behavior-model objective.
pub struct ActorBatch<'a> {
    pub states: &'a Tensor,
    /// Dataset actions (normalized), the denoising targets.
    pub actions: &'a Tensor,
    /// One behavior sample per state, treated as a constant.
    pub betas: &'a Tensor,
}

/// `-mean_s D[F^-1(s, pi(s); tau)] + w * diffusion_loss`. The critic is
/// expected to be bound without gradients.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<Q: QuantileModel, M: NoiseModel, R: Rng + ?Sized>(
    tape: &mut Tape,
    xi: &BoundMlp,
    critic: &Q,
    eps_model: &M,
    schedule: &NoiseSchedule,
    batch: &ActorBatch<'_>,
    config: &ActorConfig,
    rng: &mut R,
) -> Result<ActorLoss> {
    if batch.states.rows() == 0 {
        return Err(UdacError::Empty("actor batch"));
    }
    config.validate()?;
    let s = tape.constant(batch.states.clone());
    let b = tape.constant(batch.betas.clone());
    let a = perturbed_action(tape, xi, s, b, config.lambda)?;
    let v = distorted_value(
        tape,
        critic,
        s,
        a,
        &config.distortion,
        config.n_tau,
        config.stratified,
        rng,
    )?;
    let v = tape.mean(v);
    let d = diffusion_loss(tape, eps_model, schedule, batch.states, batch.actions, rng)?;
    let neg = tape.scale(v, -1.0);
    let wd = tape.scale(d, config.diffusion_loss_weight);
    let total = tape.add(neg, wd);
    Ok(ActorLoss {
        total,
        distorted: v,
        diffusion: d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `F^-1(s, a; tau) = tau`.
    struct Identity;
    impl QuantileModel for Identity {
        fn quantiles(&self, tape: &mut Tape, _s: Var, _a: Var, taus: &Tensor) -> Result<Var> {
            Ok(tape.constant(taus.clone()))
        }
    }

    /// `F^-1(s, a; tau) = c`.
    struct Constant(f64);
    impl QuantileModel for Constant {
        fn quantiles(&self, tape: &mut Tape, _s: Var, _a: Var, taus: &Tensor) -> Result<Var> {
            Ok(tape.constant(Tensor::full(taus.shape(), self.0)))
        }
    }

    #[test]
    fn parse_and_display() {
        for (s, want) in [
            ("cvar:0.1", DistortionSpec::CVaR(0.1)),
            ("mean", DistortionSpec::Mean),
            ("wang:-0.75", DistortionSpec::Wang(-0.75)),
            ("cpw:0.71", DistortionSpec::Cpw(0.71)),
        ] {
            let got: DistortionSpec = s.parse().unwrap();
            assert_eq!(got, want);
            assert_eq!(got.to_string(), s);
        }
        for bad in ["cvar", "cvar:0", "cvar:1.5", "mean:1", "pow:2", "wang:x", "cpw:-1"] {
            assert!(bad.parse::<DistortionSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn distortion_identities() {
        for k in 1..100 {
            let t = k as f64 / 100.0;
            assert!((wang_distortion_tau(t, 0.0).unwrap() - t).abs() < 1e-9);
            assert!((cpw_distortion_tau(t, 1.0).unwrap() - t).abs() < 1e-12);
        }
        assert!((wang_distortion_tau(0.5, -0.5).unwrap() - 0.308_537_538_725_986_9).abs() < 1e-9);
        assert!(wang_distortion_tau(0.0, 0.1).is_err());
        assert!(cpw_distortion_tau(1.0, 0.7).is_err());
    }

    #[test]
    fn distortions_monotone() {
        for spec in [
            DistortionSpec::Wang(-0.75),
            DistortionSpec::Cpw(0.71),
            DistortionSpec::CVaR(0.3),
        ] {
            let mut prev = 0.0;
            for k in 1..1000 {
                let g = spec.distort(k as f64 / 1000.0).unwrap();
                assert!(g > prev && g < 1.0, "{spec} at {k}");
                prev = g;
            }
        }
    }

    #[test]
    fn constant_critic_any_distortion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for spec in [
            DistortionSpec::CVaR(0.1),
            DistortionSpec::Mean,
            DistortionSpec::Wang(-0.75),
            DistortionSpec::Cpw(0.71),
        ] {
            let v = distorted_value_at(&Constant(3.25), &[0.0], &[0.0], &spec, 32, &mut rng).unwrap();
            assert!((v - 3.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_of_uniform_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = distorted_value_at(&Identity, &[0.0], &[0.0], &DistortionSpec::CVaR(0.1), 10_000, &mut rng).unwrap();
        assert!((v - 0.05).abs() < 0.005, "{v}");
        let m = distorted_value_at(&Identity, &[0.0], &[0.0], &DistortionSpec::Mean, 10_000, &mut rng).unwrap();
        let c1 = distorted_value_at(&Identity, &[0.0], &[0.0], &DistortionSpec::CVaR(1.0), 10_000, &mut rng).unwrap();
        assert!((m - 0.5).abs() < 0.005 && (c1 - 0.5).abs() < 0.005);
    }

    #[test]
    fn cvar1_and_mean_draw_the_same_levels() {
        let a = sample_levels(
            &DistortionSpec::CVaR(1.0),
            3,
            8,
            true,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        let b = sample_levels(&DistortionSpec::Mean, 3, 8, true, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cvar_monotone_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prev = f64::NEG_INFINITY;
        for alpha in [0.05, 0.1, 0.25, 0.5, 1.0] {
            let v = distorted_value_at(
                &Identity,
                &[0.0],
                &[0.0],
                &DistortionSpec::CVaR(alpha),
                10_000,
                &mut rng,
            )
            .unwrap();
            assert!(v >= prev - 0.01);
            prev = v;
        }
    }

    #[test]
    fn compose_action_cases() {
        let a = compose_action(0.5, &[1.0, -1.0], &[0.2, 0.0]);
        assert_eq!(a, vec![0.7, -0.5]);
        assert_eq!(compose_action(0.0, &[1.0, -1.0], &[0.2, -0.4]), vec![0.2, -0.4]);
        assert_eq!(compose_action(1.0, &[1.0], &[0.5]), vec![1.0]);
    }

    #[test]
    fn zero_lambda_imitates_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let behavior = DiffusionPolicy {
            model: crate::diffusion::EpsilonModel::new(2, 2, 8, 4, &mut rng),
            schedule: NoiseSchedule::vp(5).unwrap(),
            classifier: crate::diffusion::GuidanceClassifier::new(2, 2, 8, 4, 2, &mut rng),
            guidance: crate::diffusion::GuidanceConfig::disabled(),
        };
        let actor = RiskActor {
            perturbation: PerturbationModel::new(2, 2, 8, &mut rng),
            behavior,
            lambda: 0.0,
        };
        let states = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let a = actor.act(&states, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = actor
            .behavior
            .sample(&states, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn perturbation_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = PerturbationModel::new(2, 2, 16, &mut rng);
        for w in p.params.layer_weights.iter_mut() {
            w.scale_assign(25.0);
        }
        let s = Tensor::matrix(2, 2, vec![3.0, -2.0, 0.5, 9.0]);
        let xi = p.eval(&s, &Tensor::matrix(2, 2, vec![1.0, -1.0, 0.0, 0.5])).unwrap();
        assert!(xi.data().iter().all(|x| x.abs() <= 1.0));
    }
}
