//! The offline training loop.
//!
//! Each gradient step runs, in order: one critic update, one guidance
//! classifier update, one combined perturbation + diffusion update, and the
//! soft target updates. Everything random draws from a single ChaCha8 stream
//! seeded from the config, so a run is a pure function of `(dataset, config)`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::actor::{actor_loss, ActorBatch, ActorConfig, DistortionSpec, PerturbationModel, RiskActor};
use crate::checkpoint;
use crate::critic::{critic_loss, td_targets, CriticBatch, CriticPair, ImplicitQuantileCritic, QuantileGrid};
use crate::dataset::{Batch, OfflineDataset};
use crate::diffusion::{
    classifier_loss, diffusion_loss, DiffusionPolicy, EpsilonModel, GuidanceClassifier, GuidanceConfig, NoiseSchedule,
};
use crate::error::{Result, UdacError};
use crate::nn::Parameterized;
use crate::optim::{clip_grad_norm, soft_update, AdamState};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const MODEL_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.kv";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub batch_size: usize,
    pub gradient_steps: usize,
    pub critic_lr: f64,
    pub diffusion_lr: f64,
    pub actor_lr: f64,
    pub classifier_lr: f64,
    pub mu: f64,
    pub n_quantiles: usize,
    pub k_quantiles: usize,
    pub huber_kappa: f64,
    pub diffusion_steps: usize,
    pub actor: ActorConfig,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    /// Multiplies every dataset reward before it reaches the critic.
    pub reward_scale: f64,
    pub critic_hidden: usize,
    pub n_cos: usize,
    pub diffusion_hidden: usize,
    pub classifier_hidden: usize,
    pub actor_hidden: usize,
    pub time_dim: usize,
    pub grad_clip: f64,
    pub freeze_taus: bool,
    pub target_actor_bootstrap: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_size: 256,
            gradient_steps: 1000,
            critic_lr: 1e-3,
            diffusion_lr: 1e-3,
            actor_lr: 1e-4,
            classifier_lr: 1e-3,
            mu: 0.005,
            n_quantiles: 8,
            k_quantiles: 8,
            huber_kappa: 1.0,
            diffusion_steps: 5,
            actor: ActorConfig::default(),
            guidance: GuidanceConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            reward_scale: 1.0,
            critic_hidden: 256,
            n_cos: 64,
            diffusion_hidden: 256,
            classifier_hidden: 256,
            actor_hidden: 256,
            time_dim: 16,
            grad_clip: 10.0,
            freeze_taus: false,
            target_actor_bootstrap: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("critic_lr", self.critic_lr),
            ("diffusion_lr", self.diffusion_lr),
            ("actor_lr", self.actor_lr),
            ("classifier_lr", self.classifier_lr),
            ("huber_kappa", self.huber_kappa),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(UdacError::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(UdacError::invalid(format!("mu must be in (0, 1], got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(UdacError::invalid(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if !self.reward_scale.is_finite() {
            return Err(UdacError::invalid("reward_scale must be finite"));
        }
        if !self.guidance.guidance_scale.is_finite() || self.guidance.guidance_scale < 0.0 {
            return Err(UdacError::invalid("guidance_scale must be finite and non-negative"));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("n_quantiles", self.n_quantiles),
            ("k_quantiles", self.k_quantiles),
            ("diffusion_steps", self.diffusion_steps),
            ("critic_hidden", self.critic_hidden),
            ("n_cos", self.n_cos),
            ("diffusion_hidden", self.diffusion_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("actor_hidden", self.actor_hidden),
        ] {
            if v == 0 {
                return Err(UdacError::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(UdacError::invalid("time_dim must be a positive even number"));
        }
        self.actor.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("gamma", self.gamma.to_string());
        put("batch_size", self.batch_size.to_string());
        put("gradient_steps", self.gradient_steps.to_string());
        put("critic_lr", self.critic_lr.to_string());
        put("diffusion_lr", self.diffusion_lr.to_string());
        put("actor_lr", self.actor_lr.to_string());
        put("classifier_lr", self.classifier_lr.to_string());
        put("mu", self.mu.to_string());
        put("n_quantiles", self.n_quantiles.to_string());
        put("k_quantiles", self.k_quantiles.to_string());
        put("huber_kappa", self.huber_kappa.to_string());
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("lambda", self.actor.lambda.to_string());
        put("distortion", self.actor.distortion.to_string());
        put("n_tau", self.actor.n_tau.to_string());
        put("diffusion_loss_weight", self.actor.diffusion_loss_weight.to_string());
        put("stratified_taus", self.actor.stratified.to_string());
        put("guidance", self.guidance.enabled.to_string());
        put("guidance_target", self.guidance.target_class.to_string());
        put("guidance_scale", self.guidance.guidance_scale.to_string());
        put(
            "guidance_grad_steps",
            self.guidance.grad_steps_per_diffusion_step.to_string(),
        );
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("reward_scale", self.reward_scale.to_string());
        put("critic_hidden", self.critic_hidden.to_string());
        put("n_cos", self.n_cos.to_string());
        put("diffusion_hidden", self.diffusion_hidden.to_string());
        put("classifier_hidden", self.classifier_hidden.to_string());
        put("actor_hidden", self.actor_hidden.to_string());
        put("time_dim", self.time_dim.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("freeze_taus", self.freeze_taus.to_string());
        put("target_actor_bootstrap", self.target_actor_bootstrap.to_string());
        s
    }

    /// Parse `key = value` lines over the defaults; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (line, key, value) in crate::kv::parse(text)? {
            let perr = |msg: String| UdacError::Parse { line, msg };
            macro_rules! parse {
                ($t:ty) => {
                    value
                        .parse::<$t>()
                        .map_err(|e| perr(format!("{key}: {e}")))?
                };
            }
            match key.as_str() {
                "gamma" => c.gamma = parse!(f64),
                "batch_size" => c.batch_size = parse!(usize),
                "gradient_steps" => c.gradient_steps = parse!(usize),
                "critic_lr" => c.critic_lr = parse!(f64),
                "diffusion_lr" => c.diffusion_lr = parse!(f64),
                "actor_lr" => c.actor_lr = parse!(f64),
                "classifier_lr" => c.classifier_lr = parse!(f64),
                "mu" => c.mu = parse!(f64),
                "n_quantiles" => c.n_quantiles = parse!(usize),
                "k_quantiles" => c.k_quantiles = parse!(usize),
                "huber_kappa" => c.huber_kappa = parse!(f64),
                "diffusion_steps" => c.diffusion_steps = parse!(usize),
                "lambda" => c.actor.lambda = parse!(f64),
                "distortion" => {
                    c.actor.distortion = value.parse::<DistortionSpec>().map_err(|e| perr(e.to_string()))?
                }
                "n_tau" => c.actor.n_tau = parse!(usize),
                "diffusion_loss_weight" => c.actor.diffusion_loss_weight = parse!(f64),
                "stratified_taus" => c.actor.stratified = parse!(bool),
                "guidance" => c.guidance.enabled = parse!(bool),
                "guidance_target" => c.guidance.target_class = parse!(usize),
                "guidance_scale" => c.guidance.guidance_scale = parse!(f64),
                "guidance_grad_steps" => c.guidance.grad_steps_per_diffusion_step = parse!(usize),
                "seed" => c.seed = parse!(u64),
                "checkpoint_every" => c.checkpoint_every = parse!(usize),
                "eval_every" => c.eval_every = parse!(usize),
                "reward_scale" => c.reward_scale = parse!(f64),
                "critic_hidden" => c.critic_hidden = parse!(usize),
                "n_cos" => c.n_cos = parse!(usize),
                "diffusion_hidden" => c.diffusion_hidden = parse!(usize),
                "classifier_hidden" => c.classifier_hidden = parse!(usize),
                "actor_hidden" => c.actor_hidden = parse!(usize),
                "time_dim" => c.time_dim = parse!(usize),
                "grad_clip" => c.grad_clip = parse!(f64),
                "freeze_taus" => c.freeze_taus = parse!(bool),
                "target_actor_bootstrap" => c.target_actor_bootstrap = parse!(bool),
                other => return Err(perr(format!("unknown key {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_kv())?;
        Ok(())
    }
}

/// Every network of a trained agent plus the action bounds needed to act in
/// environment units.
#[derive(Clone, Debug, PartialEq)]
pub struct UdacModel {
    pub critic: CriticPair,
    pub actor: RiskActor,
    pub perturbation_target: PerturbationModel,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

impl UdacModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        action_low: Vec<f64>,
        action_high: Vec<f64>,
        config: &TrainerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if action_low.len() != action_dim || action_high.len() != action_dim {
            return Err(UdacError::Dimension("action bounds do not match action_dim".into()));
        }
        let critic = CriticPair::new(ImplicitQuantileCritic::new(
            state_dim,
            action_dim,
            config.critic_hidden,
            config.n_cos,
            rng,
        ));
        let model = EpsilonModel::new(state_dim, action_dim, config.diffusion_hidden, config.time_dim, rng);
        let classifier =
            GuidanceClassifier::new(state_dim, action_dim, config.classifier_hidden, config.time_dim, 2, rng);
        let perturbation = PerturbationModel::new(state_dim, action_dim, config.actor_hidden, rng);
        Ok(Self {
            critic,
            perturbation_target: perturbation.clone(),
            actor: RiskActor {
                perturbation,
                behavior: DiffusionPolicy {
                    model,
                    schedule: NoiseSchedule::vp(config.diffusion_steps)?,
                    classifier,
                    guidance: config.guidance.clone(),
                },
                lambda: config.actor.lambda,
            },
            action_low,
            action_high,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.critic.online.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.critic.online.action_dim
    }

    /// Normalized actions for a batch of states.
    pub fn act<R: Rng + ?Sized>(&self, states: &Tensor, rng: &mut R) -> Result<Tensor> {
        self.actor.act(states, rng)
    }

    /// Map normalized actions back to environment units.
    pub fn denormalize(&self, actions: &Tensor) -> Tensor {
        let mut out = actions.clone();
        let d = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let (lo, hi) = (self.action_low[i % d], self.action_high[i % d]);
            *v = lo + (*v + 1.0) * 0.5 * (hi - lo);
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.extend(self.critic.online.named_params("critic.online."));
        out.extend(self.critic.target.named_params("critic.target."));
        out.extend(self.actor.behavior.model.named_params("diffusion."));
        out.extend(self.actor.behavior.classifier.named_params("classifier."));
        out.extend(self.actor.perturbation.named_params("actor.online."));
        out.extend(self.perturbation_target.named_params("actor.target."));
        out.push(("meta.action_low".into(), Tensor::row_vector(self.action_low.clone())));
        out.push(("meta.action_high".into(), Tensor::row_vector(self.action_high.clone())));
        out.push((
            "meta.betas".into(),
            Tensor::row_vector(self.actor.behavior.schedule.betas.clone()),
        ));
        out
    }

    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        self.critic.online.load_named("critic.online.", records)?;
        self.critic.target.load_named("critic.target.", records)?;
        self.actor.behavior.model.load_named("diffusion.", records)?;
        self.actor.behavior.classifier.load_named("classifier.", records)?;
        self.actor.perturbation.load_named("actor.online.", records)?;
        self.perturbation_target.load_named("actor.target.", records)?;
        let da = self.action_dim();
        let bounds = |name: &str| -> Result<Vec<f64>> {
            let t = checkpoint::find(records, name)?;
            if t.len() != da {
                return Err(UdacError::Dimension(format!(
                    "{name}: {} entries for action_dim {da}",
                    t.len()
                )));
            }
            Ok(t.data().to_vec())
        };
        self.action_low = bounds("meta.action_low")?;
        self.action_high = bounds("meta.action_high")?;
        let betas = checkpoint::find(records, "meta.betas")?;
        if betas.len() != self.actor.behavior.schedule.steps() {
            return Err(UdacError::Dimension(format!(
                "checkpoint has {} diffusion steps, config has {}",
                betas.len(),
                self.actor.behavior.schedule.steps()
            )));
        }
        self.actor.behavior.schedule = NoiseSchedule::from_betas(betas.data().to_vec())?;
        Ok(())
    }

    /// Write `model.ckpt` and `config.kv` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>, config: &TrainerConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        config.save(dir.join(CONFIG_FILE))?;
        checkpoint::save(dir.join(MODEL_FILE), &self.named_params())
    }

    /// Load a model directory written by [`UdacModel::save_dir`]. Shapes come
    /// from the stored config and the checkpoint's dims must match them.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<(Self, TrainerConfig)> {
        let dir = dir.as_ref();
        let config = TrainerConfig::load(dir.join(CONFIG_FILE))?;
        let records = checkpoint::load(dir.join(MODEL_FILE))?;
        let model = Self::from_records(&config, &records)?;
        Ok((model, config))
    }

    pub fn from_records(config: &TrainerConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let low = checkpoint::find(records, "meta.action_low")?;
        let embed = checkpoint::find(records, "critic.online.embed.layer0.weight")?;
        let da = low.len();
        let ds = embed
            .rows()
            .checked_sub(da)
            .ok_or_else(|| UdacError::Dimension("critic input narrower than the action".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::new(ds, da, vec![-1.0; da], vec![1.0; da], config, &mut rng)?;
        model.load_named(records)?;
        Ok(model)
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub diffusion_loss: f64,
    pub classifier_loss: f64,
    pub critic_grad_norm: f64,
    pub actor_grad_norm: f64,
    pub diffusion_grad_norm: f64,
    pub classifier_grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "step,critic_loss,actor_loss,diffusion_loss,classifier_loss";

    pub fn csv_row(r: &StepRecord) -> String {
        format!(
            "{},{},{},{},{}",
            r.step, r.critic_loss, r.actor_loss, r.diffusion_loss, r.classifier_loss
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&Self::csv_row(r));
            s.push('\n');
        }
        s
    }

    /// Bit patterns of every logged value, for exact comparisons.
    pub fn fingerprint(&self) -> Vec<u64> {
        self.records
            .iter()
            .flat_map(|r| {
                [
                    r.step as u64,
                    r.critic_loss.to_bits(),
                    r.actor_loss.to_bits(),
                    r.diffusion_loss.to_bits(),
                    r.classifier_loss.to_bits(),
                ]
            })
            .collect()
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(UdacError::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// The distributional critic with its optimizer, usable on its own for
/// policy evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticLearner {
    pub pair: CriticPair,
    pub opt: AdamState,
    /// Quantile levels drawn once when taus are frozen.
    pub frozen: Option<(Vec<f64>, Vec<f64>)>,
}

impl CriticLearner {
    pub fn new(critic: ImplicitQuantileCritic, lr: f64) -> Self {
        let opt = AdamState::new(&critic.params(), lr);
        Self {
            pair: CriticPair::new(critic),
            opt,
            frozen: None,
        }
    }

    fn grid<R: Rng + ?Sized>(&mut self, config: &TrainerConfig, rows: usize, rng: &mut R) -> QuantileGrid {
        if config.freeze_taus {
            let (t, tp) = self.frozen.get_or_insert_with(|| {
                let t = (0..config.n_quantiles).map(|_| rng.sample(Open01)).collect();
                let tp = (0..config.k_quantiles).map(|_| rng.sample(Open01)).collect();
                (t, tp)
            });
            QuantileGrid::broadcast(rows, t, tp)
        } else {
            QuantileGrid::sample(rows, config.n_quantiles, config.k_quantiles, rng)
        }
    }

    /// One Adam step on the online critic. Returns `(loss, grad norm)`; the
    /// target network is not touched.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        config: &TrainerConfig,
        batch: &Batch,
        next_actions: &Tensor,
        step: usize,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let rewards: Vec<f64> = batch.rewards.iter().map(|r| r * config.reward_scale).collect();
        let cb = CriticBatch {
            states: &batch.states,
            actions: &batch.actions,
            rewards: &rewards,
            next_states: &batch.next_states,
            dones: &batch.dones,
        };
        let grid = self.grid(config, batch.len(), rng);
        let targets = td_targets(&self.pair.target, &cb, next_actions, &grid.taus_prime, config.gamma)?;
        let mut tape = Tape::new();
        let bound = self.pair.online.bind(&mut tape, true);
        let loss = critic_loss(&mut tape, &bound, targets, &cb, &grid, config.huber_kappa)?;
        let value = tape.value(loss).item();
        check_finite(step, "critic loss", value)?;
        let grads = tape.backward(loss)?;
        let mut g = grads.collect(&bound.vars());
        let norm = clip_grad_norm(&mut g, config.grad_clip);
        check_finite(step, "critic gradient norm", norm)?;
        self.opt.step(self.pair.online.params_mut(), &g)?;
        Ok((value, norm))
    }
}

/// Critic-only policy evaluation: fit `Z^pi` of the policy `next_action`
/// (mapping next states to normalized actions) on `dataset`. Returns the
/// learner and the per-step losses.
pub fn fit_critic(
    dataset: &OfflineDataset,
    config: &TrainerConfig,
    next_action: impl Fn(&Tensor) -> Tensor,
) -> Result<(CriticLearner, Vec<f64>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let critic = ImplicitQuantileCritic::new(
        dataset.state_dim,
        dataset.action_dim,
        config.critic_hidden,
        config.n_cos,
        &mut rng,
    );
    let mut learner = CriticLearner::new(critic, config.critic_lr);
    let mut losses = Vec::with_capacity(config.gradient_steps);
    for step in 0..config.gradient_steps {
        let batch = dataset.sample_batch(config.batch_size, &mut rng)?;
        let next = next_action(&batch.next_states);
        let (loss, _) = learner.update(config, &batch, &next, step, &mut rng)?;
        learner.pair.soft_update(config.mu)?;
        losses.push(loss);
    }
    Ok((learner, losses))
}

/// Train only the behavior model and its guidance classifier (no critic or
/// perturbation updates). Returns the trained policy and per-step
/// `(diffusion loss, classifier loss)`.
pub fn fit_behavior(dataset: &OfflineDataset, config: &TrainerConfig) -> Result<(DiffusionPolicy, Vec<(f64, f64)>)> {
    let mut t = Trainer::new(dataset, config.clone())?;
    let mut losses = Vec::with_capacity(config.gradient_steps);
    for _ in 0..config.gradient_steps {
        let batch = dataset.sample_batch(config.batch_size, &mut t.rng)?;
        let (c, _) = t.classifier_step(&batch)?;
        let (d, _) = t.diffusion_step(&batch)?;
        losses.push((d, c));
        t.step += 1;
    }
    Ok((t.model.actor.behavior, losses))
}

/// Full training state: model, optimizers, random stream and log.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub model: UdacModel,
    pub critic: CriticLearner,
    pub actor_opt: AdamState,
    pub diffusion_opt: AdamState,
    pub classifier_opt: AdamState,
    pub rng: ChaCha8Rng,
    pub step: usize,
    pub log: TrainLog,
}

impl Trainer {
    pub fn new(dataset: &OfflineDataset, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = UdacModel::new(
            dataset.state_dim,
            dataset.action_dim,
            dataset.action_low.clone(),
            dataset.action_high.clone(),
            &config,
            &mut rng,
        )?;
        let critic = CriticLearner::new(model.critic.online.clone(), config.critic_lr);
        model.critic = critic.pair.clone();
        Ok(Self {
            actor_opt: AdamState::new(&model.actor.perturbation.params(), config.actor_lr),
            diffusion_opt: AdamState::new(&model.actor.behavior.model.params(), config.diffusion_lr),
            classifier_opt: AdamState::new(&model.actor.behavior.classifier.params(), config.classifier_lr),
            critic,
            model,
            rng,
            step: 0,
            log: TrainLog::default(),
            config,
        })
    }

    fn check_dims(&self, dataset: &OfflineDataset) -> Result<()> {
        if dataset.state_dim != self.model.state_dim() || dataset.action_dim != self.model.action_dim() {
            return Err(UdacError::Dimension(format!(
                "dataset dims ({}, {}) vs model ({}, {})",
                dataset.state_dim,
                dataset.action_dim,
                self.model.state_dim(),
                self.model.action_dim()
            )));
        }
        Ok(())
    }

    /// Policy actions at the next states, from the online or target
    /// perturbation network.
    fn next_actions(&mut self, next_states: &Tensor) -> Result<Tensor> {
        let betas = self.model.actor.behavior.sample(next_states, &mut self.rng)?;
        if self.config.target_actor_bootstrap {
            let mut target = self.model.actor.clone();
            target.perturbation = self.model.perturbation_target.clone();
            target.act_with_behavior(next_states, &betas)
        } else {
            self.model.actor.act_with_behavior(next_states, &betas)
        }
    }

    pub fn critic_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let next = self.next_actions(&batch.next_states)?;
        self.critic.pair.target = self.model.critic.target.clone();
        self.critic.pair.online = self.model.critic.online.clone();
        let out = self
            .critic
            .update(&self.config, batch, &next, self.step, &mut self.rng)?;
        self.model.critic.online = self.critic.pair.online.clone();
        Ok(out)
    }

    pub fn classifier_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let clf = &mut self.model.actor.behavior.classifier;
        let mut tape = Tape::new();
        let bound = clf.bind(&mut tape, true);
        let loss = classifier_loss(
            &mut tape,
            clf,
            &bound,
            &self.model.actor.behavior.schedule,
            &batch.states,
            &batch.actions,
            &batch.labels,
            &mut self.rng,
        )?;
        let value = tape.value(loss).item();
        check_finite(self.step, "classifier loss", value)?;
        let mut g = tape.backward(loss)?.collect(&bound.vars);
        let norm = clip_grad_norm(&mut g, self.config.grad_clip);
        check_finite(self.step, "classifier gradient norm", norm)?;
        self.classifier_opt.step(clf.params_mut(), &g)?;
        Ok((value, norm))
    }

    /// Combined perturbation + diffusion update. Returns
    /// `(actor loss, diffusion loss, actor grad norm, diffusion grad norm)`.
    pub fn actor_step(&mut self, batch: &Batch) -> Result<(f64, f64, f64, f64)> {
        let betas = self.model.actor.behavior.sample(&batch.states, &mut self.rng)?;
        let mut actor_cfg = self.config.actor.clone();
        actor_cfg.lambda = self.model.actor.lambda;
        let mut tape = Tape::new();
        let xi = self.model.actor.perturbation.bind(&mut tape, true);
        let eps = self.model.actor.behavior.model.bind(&mut tape, true);
        let critic = self.model.critic.online.bind(&mut tape, false);
        let parts = actor_loss(
            &mut tape,
            &xi,
            &critic,
            &eps,
            &self.model.actor.behavior.schedule,
            &ActorBatch {
                states: &batch.states,
                actions: &batch.actions,
                betas: &betas,
            },
            &actor_cfg,
            &mut self.rng,
        )?;
        let actor_value = -tape.value(parts.distorted).item();
        let diffusion_value = tape.value(parts.diffusion).item();
        check_finite(self.step, "actor loss", actor_value)?;
        check_finite(self.step, "diffusion loss", diffusion_value)?;
        let grads = tape.backward(parts.total)?;
        let mut g_xi = grads.collect(&xi.vars);
        let mut g_eps = grads.collect(&eps.mlp.vars);
        let n_xi = clip_grad_norm(&mut g_xi, self.config.grad_clip);
        let n_eps = clip_grad_norm(&mut g_eps, self.config.grad_clip);
        check_finite(self.step, "actor gradient norm", n_xi)?;
        check_finite(self.step, "diffusion gradient norm", n_eps)?;
        self.actor_opt.step(self.model.actor.perturbation.params_mut(), &g_xi)?;
        self.diffusion_opt
            .step(self.model.actor.behavior.model.params_mut(), &g_eps)?;
        Ok((actor_value, diffusion_value, n_xi, n_eps))
    }

    /// Denoising-only update of the behavior model. Returns `(loss, grad norm)`.
    pub fn diffusion_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let behavior = &mut self.model.actor.behavior;
        let mut tape = Tape::new();
        let eps = behavior.model.bind(&mut tape, true);
        let loss = diffusion_loss(
            &mut tape,
            &eps,
            &behavior.schedule,
            &batch.states,
            &batch.actions,
            &mut self.rng,
        )?;
        let value = tape.value(loss).item();
        check_finite(self.step, "diffusion loss", value)?;
        let mut g = tape.backward(loss)?.collect(&eps.mlp.vars);
        let norm = clip_grad_norm(&mut g, self.config.grad_clip);
        check_finite(self.step, "diffusion gradient norm", norm)?;
        self.diffusion_opt.step(behavior.model.params_mut(), &g)?;
        Ok((value, norm))
    }

    pub fn soft_updates(&mut self) -> Result<()> {
        self.model.critic.soft_update(self.config.mu)?;
        soft_update(
            self.model.perturbation_target.params_mut(),
            self.model.actor.perturbation.params(),
            self.config.mu,
        )?;
        self.critic.pair = self.model.critic.clone();
        Ok(())
    }

    /// One full iteration. Parameters are only committed step by step, so a
    /// divergence error leaves the model as it was before the failing update.
    pub fn train_step(&mut self, dataset: &OfflineDataset) -> Result<StepRecord> {
        self.check_dims(dataset)?;
        let batch = dataset.sample_batch(self.config.batch_size, &mut self.rng)?;
        let (critic_loss, critic_grad_norm) = self.critic_step(&batch)?;
        let (classifier_loss, classifier_grad_norm) = self.classifier_step(&batch)?;
        let (actor_loss, diffusion_loss, actor_grad_norm, diffusion_grad_norm) = self.actor_step(&batch)?;
        self.soft_updates()?;
        let rec = StepRecord {
            step: self.step,
            critic_loss,
            actor_loss,
            diffusion_loss,
            classifier_loss,
            critic_grad_norm,
            actor_grad_norm,
            diffusion_grad_norm,
            classifier_grad_norm,
        };
        self.step += 1;
        self.log.records.push(rec.clone());
        Ok(rec)
    }

    /// Run until `config.gradient_steps` steps have been taken, calling
    /// `hook` after every step.
    pub fn run_with(&mut self, dataset: &OfflineDataset, mut hook: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while self.step < self.config.gradient_steps {
            self.train_step(dataset)?;
            hook(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self, dataset: &OfflineDataset) -> Result<()> {
        self.run_with(dataset, |_| Ok(()))
    }

    /// Model parameters, optimizer moments, step counter and random-stream
    /// position.
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor)> {
        let mut out = self.model.named_params();
        for (name, opt) in [
            ("critic", &self.critic.opt),
            ("actor", &self.actor_opt),
            ("diffusion", &self.diffusion_opt),
            ("classifier", &self.classifier_opt),
        ] {
            out.extend(adam_records(name, opt));
        }
        if let Some((t, tp)) = &self.critic.frozen {
            out.push(("trainer.frozen_taus".into(), Tensor::row_vector(t.clone())));
            out.push(("trainer.frozen_taus_prime".into(), Tensor::row_vector(tp.clone())));
        }
        out.push(("trainer.step".into(), Tensor::scalar(f64::from_bits(self.step as u64))));
        out.extend(rng_records(&self.rng));
        out
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, &self.checkpoint_records())
    }

    /// Rebuild a trainer from [`Trainer::checkpoint_records`]. The log starts
    /// empty.
    pub fn restore(dataset: &OfflineDataset, config: TrainerConfig, records: &[(String, Tensor)]) -> Result<Self> {
        let mut t = Trainer::new(dataset, config)?;
        t.model.load_named(records)?;
        t.critic.pair = t.model.critic.clone();
        load_adam("critic", &mut t.critic.opt, records)?;
        load_adam("actor", &mut t.actor_opt, records)?;
        load_adam("diffusion", &mut t.diffusion_opt, records)?;
        load_adam("classifier", &mut t.classifier_opt, records)?;
        t.critic.frozen = match (
            checkpoint::find(records, "trainer.frozen_taus"),
            checkpoint::find(records, "trainer.frozen_taus_prime"),
        ) {
            (Ok(a), Ok(b)) => Some((a.data().to_vec(), b.data().to_vec())),
            _ => None,
        };
        t.step = checkpoint::find(records, "trainer.step")?.item().to_bits() as usize;
        t.rng = restore_rng(records)?;
        Ok(t)
    }

    pub fn load_checkpoint(dataset: &OfflineDataset, config: TrainerConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::restore(dataset, config, &checkpoint::load(path)?)
    }
}

/// Integers are stored bit-for-bit inside f64 slots.
fn bits(v: u64) -> f64 {
    f64::from_bits(v)
}

fn adam_records(name: &str, opt: &AdamState) -> Vec<(String, Tensor)> {
    let mut out = vec![(format!("optim.{name}.step"), Tensor::scalar(bits(opt.step_count)))];
    for (i, m) in opt.first_moment.iter().enumerate() {
        out.push((format!("optim.{name}.m{i}"), m.clone()));
    }
    for (i, v) in opt.second_moment.iter().enumerate() {
        out.push((format!("optim.{name}.v{i}"), v.clone()));
    }
    out
}

fn load_adam(name: &str, opt: &mut AdamState, records: &[(String, Tensor)]) -> Result<()> {
    opt.step_count = checkpoint::find(records, &format!("optim.{name}.step"))?
        .item()
        .to_bits();
    for (prefix, slots) in [("m", &mut opt.first_moment), ("v", &mut opt.second_moment)] {
        for (i, slot) in slots.iter_mut().enumerate() {
            let key = format!("optim.{name}.{prefix}{i}");
            let t = checkpoint::find(records, &key)?;
            if t.shape() != slot.shape() {
                return Err(UdacError::Dimension(format!(
                    "{key}: {:?} vs {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    Ok(())
}

fn rng_records(rng: &ChaCha8Rng) -> Vec<(String, Tensor)> {
    let seed = rng.get_seed();
    let words: Vec<f64> = seed
        .chunks(8)
        .map(|c| bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let pos = rng.get_word_pos();
    vec![
        ("rng.seed".into(), Tensor::row_vector(words)),
        ("rng.stream".into(), Tensor::scalar(bits(rng.get_stream()))),
        (
            "rng.word_pos".into(),
            Tensor::row_vector(vec![bits(pos as u64), bits((pos >> 64) as u64)]),
        ),
    ]
}

fn restore_rng(records: &[(String, Tensor)]) -> Result<ChaCha8Rng> {
    let words = checkpoint::find(records, "rng.seed")?;
    if words.len() != 4 {
        return Err(UdacError::Dimension("rng.seed must hold 4 words".into()));
    }
    let mut seed = [0u8; 32];
    for (i, w) in words.data().iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_bits().to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(checkpoint::find(records, "rng.stream")?.item().to_bits());
    let pos = checkpoint::find(records, "rng.word_pos")?;
    if pos.len() != 2 {
        return Err(UdacError::Dimension("rng.word_pos must hold 2 words".into()));
    }
    rng.set_word_pos(pos.data()[0].to_bits() as u128 | ((pos.data()[1].to_bits() as u128) << 64));
    Ok(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;

    pub(crate) fn tiny_config() -> TrainerConfig {
        TrainerConfig {
            batch_size: 8,
            gradient_steps: 3,
            critic_hidden: 8,
            n_cos: 8,
            diffusion_hidden: 8,
            classifier_hidden: 8,
            actor_hidden: 8,
            time_dim: 4,
            n_quantiles: 4,
            k_quantiles: 4,
            diffusion_steps: 3,
            ..TrainerConfig::default()
        }
    }

    pub(crate) fn tiny_dataset() -> OfflineDataset {
        let transitions = (0..20)
            .map(|i| {
                let x = i as f64 / 20.0;
                Transition {
                    state: vec![x, -x],
                    action: vec![0.05 * (x - 0.5), 0.02],
                    reward: -x,
                    next_state: vec![x + 0.05, -x],
                    done: i % 7 == 6,
                    quality_label: (i % 2) as u32,
                }
            })
            .collect();
        OfflineDataset::new(transitions, vec![-0.1, -0.1], vec![0.1, 0.1], vec![("test".into(), 1)]).unwrap()
    }

    #[test]
    fn kv_round_trip() {
        let mut c = TrainerConfig::default();
        c.actor.distortion = DistortionSpec::Wang(-0.75);
        c.freeze_taus = true;
        c.reward_scale = 0.01;
        let back = TrainerConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert!(TrainerConfig::from_kv("bogus = 1").is_err());
        assert!(TrainerConfig::from_kv("mu = 0").is_err());
        assert!(TrainerConfig::from_kv("lambda = 1.5").is_err());
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.gradient_steps = 0;
        let mut t = Trainer::new(&ds, cfg.clone()).unwrap();
        let init = t.model.clone();
        t.run(&ds).unwrap();
        assert_eq!(t.model, init);
        assert!(t.log.records.is_empty());
    }

    #[test]
    fn update_isolation() {
        let ds = tiny_dataset();
        let mut t = Trainer::new(&ds, tiny_config()).unwrap();
        let batch = ds.sample_batch(8, &mut t.rng.clone()).unwrap();
        let before = t.model.clone();
        t.critic_step(&batch).unwrap();
        assert_ne!(t.model.critic.online, before.critic.online);
        assert_eq!(t.model.actor, before.actor);
        assert_eq!(t.model.critic.target, before.critic.target);

        let mid = t.model.clone();
        t.actor_step(&batch).unwrap();
        assert_eq!(t.model.critic, mid.critic);
        assert_ne!(t.model.actor.perturbation, mid.actor.perturbation);
        assert_ne!(t.model.actor.behavior.model, mid.actor.behavior.model);
        assert_eq!(t.model.actor.behavior.classifier, mid.actor.behavior.classifier);
    }

    #[test]
    fn same_seed_same_log() {
        let ds = tiny_dataset();
        let mut a = Trainer::new(&ds, tiny_config()).unwrap();
        let mut b = Trainer::new(&ds, tiny_config()).unwrap();
        a.run(&ds).unwrap();
        b.run(&ds).unwrap();
        assert_eq!(a.log.fingerprint(), b.log.fingerprint());
        assert_eq!(a.log.records.len(), 3);
        assert!(a
            .log
            .to_csv()
            .starts_with("step,critic_loss,actor_loss,diffusion_loss,classifier_loss\n"));
    }

    #[test]
    fn checkpoint_replay_is_bitwise() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.gradient_steps = 6;
        cfg.freeze_taus = true;
        let mut full = Trainer::new(&ds, cfg.clone()).unwrap();
        for _ in 0..3 {
            full.train_step(&ds).unwrap();
        }
        let bytes = checkpoint::encode(&full.checkpoint_records());
        let mut resumed = Trainer::restore(&ds, cfg, &checkpoint::decode(&bytes).unwrap()).unwrap();
        for _ in 0..3 {
            full.train_step(&ds).unwrap();
            resumed.train_step(&ds).unwrap();
        }
        assert_eq!(full.log.fingerprint()[15..], resumed.log.fingerprint()[..]);
        assert_eq!(full.model, resumed.model);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let ds = tiny_dataset();
        let t = Trainer::new(&ds, tiny_config()).unwrap();
        let recs = t.checkpoint_records();
        let mut cfg = tiny_config();
        cfg.critic_hidden = 16;
        assert!(matches!(
            Trainer::restore(&ds, cfg, &recs),
            Err(UdacError::Dimension(_))
        ));
    }

    #[test]
    fn model_dir_round_trip() {
        let ds = tiny_dataset();
        let t = Trainer::new(&ds, tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.model.save_dir(dir.path(), &t.config).unwrap();
        let (m, c) = UdacModel::load_dir(dir.path()).unwrap();
        assert_eq!(m, t.model);
        assert_eq!(c, t.config);
    }
}
