//! Finite-difference audit of the losses and of the full model.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, ChangeMask, DistanceKind, LossConfig};
use crate::network::{forward_graph, DecoderKind, EncoderConfig, ModelConfig, ModelParams};
use crate::tensor::{finite_diff_check_with_fault, BackwardFault, Graph, Tensor, Var};

pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-6;
const MODEL_COORDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Losses,
    Network,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "losses" => Ok(Scope::Losses),
            "network" => Ok(Scope::Network),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!("unknown gradcheck scope `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trial: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self, prefix: &str) -> f64 {
        self.checks
            .iter()
            .filter(|c| c.name.starts_with(prefix))
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    fn push(&mut self, name: String, trial: usize, err: f64, tolerance: f64) {
        self.checks.push(CheckResult {
            name,
            trial,
            max_rel_error: err,
            tolerance,
            passed: err < tolerance,
        });
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_mask(shape: &[usize], rng: &mut ChaCha8Rng) -> ChangeMask {
    let n: usize = shape.iter().product();
    // at least one pixel of each class so every branch is exercised
    let bits: Vec<bool> = (0..n).map(|i| if i < 2 { i == 0 } else { rng.random_bool(0.3) }).collect();
    ChangeMask::from_bools(shape, bits).expect("valid shape")
}

type LossFn = fn(&mut Graph<f64>, Var, Var, &ChangeMask, &LossConfig) -> Result<Var>;

fn loss_cases() -> Vec<(&'static str, LossFn)> {
    vec![
        ("losses/contrastive_euclidean", |g, a, b, y, c| {
            losses::contrastive_loss(g, a, b, y, &LossConfig { margin: c.margin, ..LossConfig::default() })
        }),
        ("losses/contrastive_cosine", |g, a, b, y, _| {
            losses::contrastive_loss(g, a, b, y, &LossConfig::with_distance(DistanceKind::Cosine))
        }),
        ("losses/hsac", |g, a, b, y, c| losses::hsac_loss(g, a, b, y, c.tau)),
        ("losses/hsac_oneline", |g, a, b, y, c| losses::hsac_loss_oneline(g, a, b, y, c.tau)),
        ("losses/cross_entropy", |g, a, _, y, _| {
            let l = g.sum_channels(a)?;
            losses::cross_entropy_loss(g, l, y)
        }),
        ("losses/dice", |g, a, _, y, _| {
            let l = g.sum_channels(a)?;
            losses::dice_loss(g, l, y)
        }),
        ("losses/total", |g, a, b, y, c| {
            let m = losses::hsac_loss(g, a, b, y, c.tau)?;
            let l = g.sum_channels(a)?;
            let ce = losses::cross_entropy_loss(g, l, y)?;
            let dice = losses::dice_loss(g, l, y)?;
            losses::total_loss(g, m, ce, dice, c)
        }),
    ]
}

fn check_losses(report: &mut GradcheckReport, trials: usize, rng: &mut ChaCha8Rng, fault: Option<BackwardFault>) -> Result<()> {
    let shape = [2, 4, 3, 3];
    for trial in 0..trials {
        let f1 = random(&shape, rng);
        let f2 = random(&shape, rng);
        let y = random_mask(&[2, 1, 3, 3], rng);
        let cfg = LossConfig {
            tau: rng.random_range(0.1..1.0),
            margin: rng.random_range(1.0..3.0),
            ..LossConfig::default()
        };
        let all: Vec<usize> = (0..f1.numel()).collect();
        for (name, loss) in loss_cases() {
            let wrt_first = |g: &mut Graph<f64>, x: Var| {
                let other = g.constant(f2.clone());
                loss(g, x, other, &y, &cfg)
            };
            let e1 = finite_diff_check_with_fault(wrt_first, &f1, STEP, &all, fault)?;
            let wrt_second = |g: &mut Graph<f64>, x: Var| {
                let other = g.constant(f1.clone());
                loss(g, other, x, &y, &cfg)
            };
            let e2 = finite_diff_check_with_fault(wrt_second, &f2, STEP, &all, fault)?;
            report.push(name.to_string(), trial, e1.max(e2), LOSS_TOLERANCE);
        }
    }
    Ok(())
}

/// The model checked end to end: default widths on 32×32 inputs.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_size: 32,
            ..EncoderConfig::default()
        },
        decoder: DecoderKind::Metric,
        decoder_width: 16,
    }
}

struct ModelCase {
    cfg: ModelConfig,
    params: ModelParams<f64>,
    img1: Tensor<f64>,
    img2: Tensor<f64>,
    mask: ChangeMask,
    loss: LossConfig,
    use_hsac: bool,
}

impl ModelCase {
    /// Total training objective with `name` replaced by the variable `x`
    /// (or the first image when `name` is `None`).
    fn loss(&self, g: &mut Graph<f64>, name: Option<&str>, x: Var) -> Result<Var> {
        let mut bound = self.params.bind(g, false);
        let img1 = match name {
            Some(n) => {
                bound = bound.with_override(n, x);
                g.constant(self.img1.clone())
            }
            None => x,
        };
        let img2 = g.constant(self.img2.clone());
        let out = forward_graph(g, &bound, &self.cfg, img1, img2)?;
        let y = self.mask.downsample(2)?;
        let metric = if self.use_hsac {
            losses::hsac_loss_from_cosine(g, out.d_cos, &y, self.loss.tau)?
        } else {
            losses::contrastive_loss(g, out.proj1.raw, out.proj2.raw, &y, &self.loss)?
        };
        let logits = out.logits.ok_or_else(|| Error::Contract("model has no decoder".into()))?;
        let ce = losses::cross_entropy_loss(g, logits, &self.mask)?;
        let dice = losses::dice_loss(g, logits, &self.mask)?;
        losses::total_loss(g, metric, ce, dice, &self.loss)
    }
}

fn check_network(report: &mut GradcheckReport, trials: usize, rng: &mut ChaCha8Rng, fault: Option<BackwardFault>) -> Result<()> {
    let cfg = check_model_config();
    let size = cfg.encoder.input_size;
    let params = ModelParams::<f64>::init(&cfg, rng.random())?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for trial in 0..trials {
        let case = ModelCase {
            cfg: cfg.clone(),
            params: params.clone(),
            img1: Tensor::from_fn(&[1, 3, size, size], |_| rng.random_range(0.0..1.0)),
            img2: Tensor::from_fn(&[1, 3, size, size], |_| rng.random_range(0.0..1.0)),
            mask: random_mask(&[1, 1, size, size], rng),
            loss: LossConfig::default(),
            use_hsac: trial % 2 == 0,
        };
        let label = if case.use_hsac { "hsac" } else { "con" };
        let name = names.choose(rng).expect("model has parameters").clone();
        let x = params.get(&name).expect("listed name").clone();
        let coords: Vec<usize> = (0..MODEL_COORDS).map(|_| rng.random_range(0..x.numel())).collect();
        let err = finite_diff_check_with_fault(|g, v| case.loss(g, Some(&name), v), &x, STEP, &coords, fault)?;
        report.push(format!("network/{label}/{name}"), trial, err, MODEL_TOLERANCE);

        let coords: Vec<usize> = (0..MODEL_COORDS).map(|_| rng.random_range(0..case.img1.numel())).collect();
        let err = finite_diff_check_with_fault(|g, v| case.loss(g, None, v), &case.img1, STEP, &coords, fault)?;
        report.push(format!("network/{label}/input"), trial, err, MODEL_TOLERANCE);
    }
    Ok(())
}

/// Runs the requested checks; `fault` corrupts one backward rule so the
/// suite can demonstrate that it notices.
pub fn run_suite(scope: Scope, trials: usize, seed: u64, fault: Option<BackwardFault>) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::Config("gradcheck needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradcheckReport::default();
    if matches!(scope, Scope::Losses | Scope::All) {
        check_losses(&mut report, trials, &mut rng, fault)?;
    }
    if matches!(scope, Scope::Network | Scope::All) {
        check_network(&mut report, trials, &mut rng, fault)?;
    }
    Ok(report)
}
