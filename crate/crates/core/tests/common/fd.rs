//! Finite-difference checks shared by the gradient tests and the acceptance
//! suite. Each `*_cases` function returns the worst relative error of every
//! random case.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udac::actor::{distorted_value, perturbed_action, DistortionSpec, PerturbationModel};
use udac::critic::{critic_loss, CriticBatch, ImplicitQuantileCritic, QuantileGrid};
use udac::diffusion::{diffusion_loss, EpsilonModel, GuidanceClassifier, NoiseSchedule};
use udac::nn::{Activation, MlpParams, Parameterized};
use udac::{Tape, Tensor, Var};

pub const CASES: usize = 100;
const COORDS_PER_CASE: usize = 4;
const STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-5;
/// Denominator floor so coordinates with a vanishing gradient are judged on
/// absolute error.
const REL_FLOOR: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

/// `build` puts the model on a tape (trainable when asked) and returns the
/// scalar loss together with the parameter vars, in `params()` order.
fn check_params<P, F>(model: &P, rng: &mut ChaCha8Rng, build: F) -> f64
where
    P: Parameterized + Clone,
    F: Fn(&P, &mut Tape) -> (Var, Vec<Var>),
{
    let mut tape = Tape::new();
    let (loss, vars) = build(model, &mut tape);
    let grads = tape.backward(loss).unwrap().collect(&vars);
    let eval = |m: &P| {
        let mut t = Tape::new();
        let (l, _) = build(m, &mut t);
        t.value(l).item()
    };
    let sizes: Vec<usize> = model.params().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..COORDS_PER_CASE {
        let p = rng.gen_range(0..sizes.len());
        let i = rng.gen_range(0..sizes[p]);
        let shifted = |h: f64| {
            let mut m = model.clone();
            m.params_mut()[p].data_mut()[i] += h;
            eval(&m)
        };
        let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
        worst = worst.max(rel_err(grads[p].data()[i], numeric));
    }
    worst
}

fn check_input(x: &Tensor, rng: &mut ChaCha8Rng, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let loss = f(&mut tape, v);
    let g = tape.backward(loss).unwrap().wrt(v);
    let eval = |t: Tensor| {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let l = f(&mut tape, v);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..COORDS_PER_CASE {
        let i = rng.gen_range(0..x.len());
        let mut up = x.clone();
        up.data_mut()[i] += STEP;
        let mut down = x.clone();
        down.data_mut()[i] -= STEP;
        let numeric = (eval(up) - eval(down)) / (2.0 * STEP);
        worst = worst.max(rel_err(g.data()[i], numeric));
    }
    worst
}

pub fn mlp_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let act = [Activation::Mish, Activation::Tanh][case % 2];
        let (din, h, dout, b) = (
            rng.gen_range(1..5),
            rng.gen_range(2..9),
            rng.gen_range(1..4),
            rng.gen_range(1..6),
        );
        let mlp = MlpParams::init(&[din, h, h, dout], act, &mut rng);
        let x = uniform(b, din, -2.0, 2.0, &mut rng);
        let proj = uniform(b, dout, -1.0, 1.0, &mut rng);
        let forward = |tape: &mut Tape, m: &MlpParams, input: Var, trainable: bool| {
            let bound = m.bind(tape, trainable);
            let out = bound.forward(tape, input).unwrap();
            let w = tape.constant(proj.clone());
            let y = tape.mul(out, w);
            (tape.sum(y), bound.vars)
        };
        let e1 = check_params(&mlp, &mut rng, |m, tape| {
            let input = tape.constant(x.clone());
            forward(tape, m, input, true)
        });
        let e2 = check_input(&x, &mut rng, |tape, input| forward(tape, &mlp, input, false).0);
        errs.push(e1.max(e2));
    }
    errs
}

pub fn quantile_huber_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errs = Vec::new();
    for _ in 0..CASES {
        let (b, n, k) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let kappa = [0.1, 0.5, 1.0][rng.gen_range(0..3)];
        let pred = uniform(b, n, -2.0, 2.0, &mut rng);
        let target = uniform(b, k, -2.0, 2.0, &mut rng);
        let taus = uniform(b, n, 0.01, 0.99, &mut rng);
        errs.push(check_input(&pred, &mut rng, |tape, p| {
            tape.quantile_huber(p, target.clone(), taus.clone(), kappa)
        }));
    }
    errs
}

pub fn critic_loss_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs = Vec::new();
    for _ in 0..CASES {
        let (ds, da, b) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..5));
        let critic = ImplicitQuantileCritic::new(ds, da, 8, 8, &mut rng);
        let states = uniform(b, ds, -1.0, 1.0, &mut rng);
        let actions = uniform(b, da, -1.0, 1.0, &mut rng);
        let rewards: Vec<f64> = (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dones = vec![false; b];
        let grid = QuantileGrid::sample(b, 4, 4, &mut rng);
        let targets = uniform(b, 4, -1.0, 1.0, &mut rng);
        let batch = CriticBatch {
            states: &states,
            actions: &actions,
            rewards: &rewards,
            next_states: &states,
            dones: &dones,
        };
        errs.push(check_params(&critic, &mut rng, |c, tape| {
            let bound = c.bind(tape, true);
            let loss = critic_loss(tape, &bound, targets.clone(), &batch, &grid, 0.5).unwrap();
            (loss, bound.vars())
        }));
    }
    errs
}

pub fn diffusion_loss_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let (ds, da, b) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..6));
        let model = EpsilonModel::new(ds, da, 8, 4, &mut rng);
        let schedule = NoiseSchedule::vp(rng.gen_range(1..8)).unwrap();
        let states = uniform(b, ds, -1.0, 1.0, &mut rng);
        let actions = uniform(b, da, -1.0, 1.0, &mut rng);
        let noise_seed = case as u64;
        errs.push(check_params(&model, &mut rng, |m, tape| {
            let bound = m.bind(tape, true);
            let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
            let loss = diffusion_loss(tape, &bound, &schedule, &states, &actions, &mut noise).unwrap();
            (loss, bound.mlp.vars)
        }));
    }
    errs
}

pub fn actor_objective_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = [
        DistortionSpec::CVaR(0.1),
        DistortionSpec::Mean,
        DistortionSpec::Wang(-0.75),
        DistortionSpec::Cpw(0.71),
    ];
    let mut errs = Vec::new();
    for case in 0..CASES {
        let (ds, da, b) = (rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(1..5));
        let critic = ImplicitQuantileCritic::new(ds, da, 8, 8, &mut rng);
        let xi = PerturbationModel::new(ds, da, 8, &mut rng);
        let states = uniform(b, ds, -1.0, 1.0, &mut rng);
        // |0.4 * tanh(.) + beta| < 0.9 keeps every action off the clip boundary.
        let betas = uniform(b, da, -0.5, 0.5, &mut rng);
        let spec = specs[case % specs.len()];
        let tau_seed = case as u64;
        errs.push(check_params(&xi, &mut rng, |m, tape| {
            let bound = m.bind(tape, true);
            let q = critic.bind(tape, false);
            let s = tape.constant(states.clone());
            let beta = tape.constant(betas.clone());
            let a = perturbed_action(tape, &bound, s, beta, 0.4).unwrap();
            let mut taus = ChaCha8Rng::seed_from_u64(tau_seed);
            let v = distorted_value(tape, &q, s, a, &spec, 8, true, &mut taus).unwrap();
            (tape.mean(v), bound.vars)
        }));
    }
    errs
}

pub fn classifier_cases() -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errs = Vec::new();
    for _ in 0..CASES {
        let (ds, da, b, classes) = (
            rng.gen_range(1..4),
            rng.gen_range(1..3),
            rng.gen_range(1..6),
            rng.gen_range(2..4),
        );
        let clf = GuidanceClassifier::new(ds, da, 8, 4, classes, &mut rng);
        let states = uniform(b, ds, -1.0, 1.0, &mut rng);
        let actions = uniform(b, da, -1.5, 1.5, &mut rng);
        let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(0..6)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        let log_prob = |tape: &mut Tape, c: &GuidanceClassifier, a: Var, trainable: bool| {
            let bound = c.bind(tape, trainable);
            let s = tape.constant(states.clone());
            let lp = c.log_probs_on_tape(tape, &bound, a, s, &steps).unwrap();
            let picked = tape.gather(lp, &labels);
            (tape.sum(picked), bound.vars)
        };
        let e1 = check_params(&clf, &mut rng, |c, tape| {
            let a = tape.constant(actions.clone());
            log_prob(tape, c, a, true)
        });
        let e2 = check_input(&actions, &mut rng, |tape, a| log_prob(tape, &clf, a, false).0);
        errs.push(e1.max(e2));
    }
    errs
}
