//! Conditional denoising-diffusion behavior policy with classifier guidance.
//!
//! Actions live in the normalized box `[-1, 1]^d`. The reverse chain starts
//! from `a^N ~ N(0, I)` and applies
//!
//! ```text
//! a^{i-1} = (a^i - beta_i / sqrt(1 - alpha_bar_i) * eps(a^i, s, i)) / sqrt(alpha_i)
//!         + sqrt(beta_i) z,          z ~ N(0, I), z = 0 at i = 1
//! ```
//!
//! With guidance enabled, each post-mean iterate is pushed along the
//! gradient of the classifier's log-probability of the preferred class
//! before noise is added.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, UdacError};
use crate::nn::{sinusoidal_embedding, Activation, BoundMlp, MlpParams, Parameterized};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const VP_BETA_MIN: f64 = 0.1;
pub const VP_BETA_MAX: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Discretized variance-preserving schedule:
    /// `beta_i = 1 - exp(-b_min/N - (b_max - b_min)(2i - 1)/(2 N^2))`.
    pub fn vp(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(UdacError::invalid("diffusion needs at least one step"));
        }
        let nf = n as f64;
        let betas = (1..=n)
            .map(|i| {
                let t = (2.0 * i as f64 - 1.0) / (2.0 * nf * nf);
                1.0 - (-VP_BETA_MIN / nf - (VP_BETA_MAX - VP_BETA_MIN) * t).exp()
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary betas in `[0, 1)`. A zero beta is a degenerate no-noise step.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(UdacError::invalid(format!(
                "betas must be non-empty and in [0, 1): {betas:?}"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar` at step `i`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.alpha_bars[i - 1]
        }
    }

    /// Coefficients `(1/sqrt(alpha_i), beta_i / (sqrt(alpha_i) sqrt(1 - alpha_bar_i)))`
    /// of the reverse-chain mean at step `i`.
    pub fn mean_coefficients(&self, i: usize) -> (f64, f64) {
        let (a, b, ab) = (self.alphas[i - 1], self.betas[i - 1], self.alpha_bars[i - 1]);
        let eps_coef = if b == 0.0 {
            0.0
        } else {
            b / (a.sqrt() * (1.0 - ab).sqrt())
        };
        (1.0 / a.sqrt(), eps_coef)
    }
}

/// `sqrt(alpha_bar_i) a0 + sqrt(1 - alpha_bar_i) eps`.
pub fn forward_noise(a0: &[f64], i: usize, schedule: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    if i < 1 || i > schedule.steps() {
        return Err(UdacError::invalid(format!(
            "diffusion step {i} outside 1..={}",
            schedule.steps()
        )));
    }
    if a0.len() != eps.len() {
        return Err(UdacError::Dimension("action and noise lengths differ".into()));
    }
    let ab = schedule.alpha_bar(i);
    Ok(a0
        .iter()
        .zip(eps)
        .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
        .collect())
}

/// Anything that predicts the injected noise from `(a^i, s, i)`.
pub trait NoiseModel {
    fn predict(&self, tape: &mut Tape, noisy: Var, states: Var, steps: &[usize]) -> Result<Var>;
}

/// Per-row sinusoidal embeddings of diffusion steps.
pub fn step_embeddings(steps: &[usize], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &i in steps {
        data.extend(sinusoidal_embedding(i, dim)?);
    }
    Ok(Tensor::matrix(steps.len(), dim, data))
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Input layout `[a^i, s, emb(i)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonModel {
    pub params: MlpParams,
    pub state_dim: usize,
    pub action_dim: usize,
    pub time_dim: usize,
}

impl EpsilonModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        let params = MlpParams::init(
            &[action_dim + state_dim + time_dim, hidden, hidden, hidden, action_dim],
            Activation::Mish,
            rng,
        );
        Self {
            params,
            state_dim,
            action_dim,
            time_dim,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEpsilon {
        BoundEpsilon {
            mlp: self.params.bind(tape, trainable),
            time_dim: self.time_dim,
        }
    }
}

impl NoiseModel for EpsilonModel {
    fn predict(&self, tape: &mut Tape, noisy: Var, states: Var, steps: &[usize]) -> Result<Var> {
        self.bind(tape, false).predict(tape, noisy, states, steps)
    }
}

impl Parameterized for EpsilonModel {
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

#[derive(Clone, Debug)]
pub struct BoundEpsilon {
    pub mlp: BoundMlp,
    time_dim: usize,
}

impl NoiseModel for BoundEpsilon {
    fn predict(&self, tape: &mut Tape, noisy: Var, states: Var, steps: &[usize]) -> Result<Var> {
        let emb = tape.constant(step_embeddings(steps, self.time_dim)?);
        let x = tape.concat_cols(&[noisy, states, emb]);
        self.mlp.forward(tape, x)
    }
}

/// Denoising objective: batch mean of `|eps - eps_model(sqrt(ab_i) a + sqrt(1 - ab_i) eps, s, i)|^2`
/// with `i ~ U{1..N}` and `eps ~ N(0, I)` drawn per row.
pub fn diffusion_loss<M: NoiseModel, R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &M,
    schedule: &NoiseSchedule,
    states: &Tensor,
    actions: &Tensor,
    rng: &mut R,
) -> Result<Var> {
    let b = actions.rows();
    if b == 0 {
        return Err(UdacError::Empty("diffusion batch"));
    }
    let d = actions.cols();
    let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
    let eps = normal_matrix(b, d, rng);
    let mut noisy = Tensor::zeros(&[b, d]);
    for r in 0..b {
        let row = forward_noise(actions.row(r), steps[r], schedule, eps.row(r))?;
        for (c, v) in row.into_iter().enumerate() {
            noisy.set(r, c, v);
        }
    }
    let x = tape.constant(noisy);
    let s = tape.constant(states.clone());
    let pred = model.predict(tape, x, s, &steps)?;
    let target = tape.constant(eps);
    let diff = tape.sub(target, pred);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub enabled: bool,
    pub target_class: usize,
    pub guidance_scale: f64,
    pub grad_steps_per_diffusion_step: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            target_class: 0,
            guidance_scale: 0.1,
            grad_steps_per_diffusion_step: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Quality classifier on noised actions: input `[a^i, s, emb(i)]`, output
/// class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceClassifier {
    pub params: MlpParams,
    pub state_dim: usize,
    pub action_dim: usize,
    pub time_dim: usize,
    pub n_classes: usize,
}

impl GuidanceClassifier {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        time_dim: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Self {
        let params = MlpParams::init(
            &[action_dim + state_dim + time_dim, hidden, hidden, hidden, n_classes],
            Activation::Mish,
            rng,
        );
        Self {
            params,
            state_dim,
            action_dim,
            time_dim,
            n_classes,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        self.params.bind(tape, trainable)
    }

    /// Row-wise log-softmax of the logits at `(a, s, step)`.
    pub fn log_probs_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        actions: Var,
        states: Var,
        steps: &[usize],
    ) -> Result<Var> {
        let emb = tape.constant(step_embeddings(steps, self.time_dim)?);
        let x = tape.concat_cols(&[actions, states, emb]);
        let logits = bound.forward(tape, x)?;
        Ok(tape.log_softmax(logits))
    }

    /// Class probabilities `[B, n_classes]`.
    pub fn probabilities(&self, actions: &Tensor, states: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let a = tape.constant(actions.clone());
        let s = tape.constant(states.clone());
        let lp = self.log_probs_on_tape(&mut tape, &bound, a, s, steps)?;
        Ok(tape.value(lp).map(f64::exp))
    }

    /// `d/da log p(target_class | a, s, step)` for every row.
    pub fn guidance_gradient(
        &self,
        actions: &Tensor,
        states: &Tensor,
        step: usize,
        target_class: usize,
    ) -> Result<Tensor> {
        if target_class >= self.n_classes {
            return Err(UdacError::invalid(format!(
                "class {target_class} >= {}",
                self.n_classes
            )));
        }
        let b = actions.rows();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let a = tape.leaf(actions.clone());
        let s = tape.constant(states.clone());
        let lp = self.log_probs_on_tape(&mut tape, &bound, a, s, &vec![step; b])?;
        let picked = tape.gather(lp, &vec![target_class; b]);
        let total = tape.sum(picked);
        Ok(tape.backward(total)?.wrt(a))
    }
}

impl Parameterized for GuidanceClassifier {
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

/// Mean cross-entropy of the classifier on actions noised to a random step
/// `i ~ U{0..N}` (step 0 is the clean action).
#[allow(clippy::too_many_arguments)]
pub fn classifier_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    classifier: &GuidanceClassifier,
    bound: &BoundMlp,
    schedule: &NoiseSchedule,
    states: &Tensor,
    actions: &Tensor,
    labels: &[usize],
    rng: &mut R,
) -> Result<Var> {
    let b = actions.rows();
    if b == 0 {
        return Err(UdacError::Empty("classifier batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classifier.n_classes) {
        return Err(UdacError::invalid(format!("unknown quality label {bad}")));
    }
    let d = actions.cols();
    let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(0..=schedule.steps())).collect();
    let eps = normal_matrix(b, d, rng);
    let mut noisy = Tensor::zeros(&[b, d]);
    for r in 0..b {
        let ab = schedule.alpha_bar(steps[r]);
        for c in 0..d {
            noisy.set(r, c, ab.sqrt() * actions.get(r, c) + (1.0 - ab).sqrt() * eps.get(r, c));
        }
    }
    let a = tape.constant(noisy);
    let s = tape.constant(states.clone());
    let lp = classifier.log_probs_on_tape(tape, bound, a, s, &steps)?;
    let picked = tape.gather(lp, labels);
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Draw one action per row of `states` from the reverse chain.
pub fn reverse_sample<M: NoiseModel, R: Rng + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    states: &Tensor,
    action_dim: usize,
    rng: &mut R,
    guidance: &GuidanceConfig,
    classifier: Option<&GuidanceClassifier>,
) -> Result<Tensor> {
    let b = states.rows();
    let guide = match (guidance.enabled, classifier) {
        (true, Some(c)) => Some(c),
        (true, None) => return Err(UdacError::invalid("guidance enabled without a classifier")),
        (false, _) => None,
    };
    let mut a = normal_matrix(b, action_dim, rng);
    for i in (1..=schedule.steps()).rev() {
        let eps_hat = {
            let mut tape = Tape::new();
            let x = tape.constant(a.clone());
            let s = tape.constant(states.clone());
            let e = model.predict(&mut tape, x, s, &vec![i; b])?;
            tape.value(e).clone()
        };
        let (c_in, c_eps) = schedule.mean_coefficients(i);
        for (ai, ei) in a.data_mut().iter_mut().zip(eps_hat.data()) {
            *ai = c_in * *ai - c_eps * ei;
        }
        if let Some(clf) = guide {
            for _ in 0..guidance.grad_steps_per_diffusion_step {
                let g = clf.guidance_gradient(&a, states, i - 1, guidance.target_class)?;
                for (ai, gi) in a.data_mut().iter_mut().zip(g.data()) {
                    *ai += guidance.guidance_scale * gi;
                }
            }
        }
        if i > 1 {
            let sd = schedule.betas[i - 1].sqrt();
            for ai in a.data_mut() {
                *ai += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    Ok(a.map(|x| x.clamp(-1.0, 1.0)))
}

/// The behavior model: noise predictor, schedule, classifier and guidance
/// settings bundled for sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionPolicy {
    pub model: EpsilonModel,
    pub schedule: NoiseSchedule,
    pub classifier: GuidanceClassifier,
    pub guidance: GuidanceConfig,
}

impl DiffusionPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        reverse_sample(
            &self.model,
            &self.schedule,
            states,
            self.model.action_dim,
            rng,
            &self.guidance,
            Some(&self.classifier),
        )
    }
}
