//! Joint metric/segmentation training with AdamW and polynomial decay.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{grid_for, metric_distance_kind, run_inference, threshold_sweep};
use crate::losses::{self, ChangeMask, LossConfig};
use crate::network::{forward_graph, DecoderKind, EncoderConfig, Model, ModelConfig, ModelParams};
use crate::synthdata::ChangeSample;
use crate::tensor::{Graph, Tensor, Var};

/// Which objectives and decoder a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_hsac: bool,
    pub use_con: bool,
    pub use_seg: bool,
    pub use_metric_induction: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::deepcl()
    }
}

impl AblationFlags {
    /// Metric-only model with the margin contrastive loss.
    pub const fn con_metric() -> Self {
        Self {
            use_hsac: false,
            use_con: true,
            use_seg: false,
            use_metric_induction: false,
        }
    }

    pub const fn hsac_metric() -> Self {
        Self {
            use_hsac: true,
            use_con: false,
            use_seg: false,
            use_metric_induction: false,
        }
    }

    pub const fn seg_simple() -> Self {
        Self {
            use_hsac: false,
            use_con: false,
            use_seg: true,
            use_metric_induction: false,
        }
    }

    pub const fn seg_metric_induced() -> Self {
        Self {
            use_metric_induction: true,
            ..Self::seg_simple()
        }
    }

    pub const fn con_decoder() -> Self {
        Self {
            use_con: true,
            ..Self::seg_metric_induced()
        }
    }

    pub const fn deepcl() -> Self {
        Self {
            use_hsac: true,
            ..Self::seg_metric_induced()
        }
    }

    /// The six ablation settings, in table order.
    pub const ROWS: [(&'static str, AblationFlags); 6] = [
        ("con", Self::con_metric()),
        ("hsac", Self::hsac_metric()),
        ("seg_simple", Self::seg_simple()),
        ("seg_md", Self::seg_metric_induced()),
        ("con_md", Self::con_decoder()),
        ("hsac_md", Self::deepcl()),
    ];

    pub fn has_metric_loss(&self) -> bool {
        self.use_hsac || self.use_con
    }

    pub fn decoder(&self) -> DecoderKind {
        match (self.use_seg, self.use_metric_induction) {
            (false, _) => DecoderKind::None,
            (true, false) => DecoderKind::Simple,
            (true, true) => DecoderKind::Metric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_hsac && self.use_con {
            return Err(Error::Config("choose one metric loss, not both".into()));
        }
        if !self.use_seg && !self.has_metric_loss() {
            return Err(Error::Config("no objective enabled: need a metric loss or segmentation".into()));
        }
        if self.use_metric_induction && !self.use_seg {
            return Err(Error::Config("metric induction requires the segmentation decoder".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub loss: LossConfig,
    pub flags: AblationFlags,
    pub encoder: EncoderConfig,
    pub decoder_width: usize,
    pub augment: bool,
    /// Hold out every fifth sample (by generator seed) for validation.
    pub validation_split: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 0.01,
            poly_power: 0.9,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            betas: (0.9, 0.999),
            eps: 1e-8,
            loss: LossConfig::default(),
            flags: AblationFlags::default(),
            encoder: EncoderConfig::default(),
            decoder_width: 16,
            augment: true,
            validation_split: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if !(self.poly_power > 0.0) {
            return bad(format!("poly_power must be > 0, got {}", self.poly_power));
        }
        let (b1, b2) = self.betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad(format!("betas must lie in (0,1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight decay >= 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        self.loss.validate()?;
        self.flags.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.flags.decoder(),
            decoder_width: self.decoder_width,
        }
    }
}

/// `lr0 · (1 - iter/max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::param("poly_lr", format!("iter {iter} outside 0..={max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).max(0.0).powf(power))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

fn decays(name: &str) -> bool {
    !name.ends_with(".bias")
}

/// One AdamW update. Bias tensors are exempt from weight decay.
pub fn adamw_step(
    params: &mut ModelParams<f32>,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).map(Tensor::numel).unwrap_or(0);
        match grads.get(name) {
            Some(g) if g.len() == n => {}
            Some(g) => {
                return Err(Error::Contract(format!(
                    "gradient for `{name}` has {} entries, parameter has {n}",
                    g.len()
                )))
            }
            None => return Err(Error::Contract(format!("missing gradient for `{name}`"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for name in &names {
        let g = &grads[name];
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
        let theta = params.data_mut(name).expect("name from params");
        for i in 0..g.len() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.eps) + wd * theta[i] as f64;
            theta[i] = (theta[i] as f64 - lr * update) as f32;
        }
    }
    Ok(())
}

/// Draws one of the eight rotation/flip symmetries of the square.
pub fn augment(sample: &ChangeSample, rng: &mut impl Rng) -> ChangeSample {
    let turns = rng.random_range(0..4u8);
    let flip = rng.random_bool(0.5);
    sample.transformed(turns, flip)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss_metric: f64,
    pub loss_ce: f64,
    pub loss_dice: f64,
    pub val_f1_seg: Option<f64>,
    pub val_f1_metric: Option<f64>,
}

impl EpochLog {
    pub fn total(&self, loss: &LossConfig) -> f64 {
        loss.metric_weight * self.loss_metric + loss.seg_weight * (self.loss_ce + self.loss_dice)
    }
}

pub fn write_log_csv<W: Write>(out: W, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn save_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    write_log_csv(&mut buf, log)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Train/validation partition: samples whose seed (or index, for loaded
/// data) is divisible by five go to validation.
pub fn split_validation(samples: &[ChangeSample], enabled: bool) -> (Vec<&ChangeSample>, Vec<&ChangeSample>) {
    if !enabled {
        return (samples.iter().collect(), Vec::new());
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        let key = s.meta.seed.unwrap_or(i as u64);
        if key % 5 == 0 {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    if train.is_empty() {
        return (val, Vec::new());
    }
    (train, val)
}

/// Stacks samples into `[N,3,H,W]` image batches and a `[N,1,H,W]` mask.
pub fn collate<'a>(samples: impl IntoIterator<Item = &'a ChangeSample>) -> Result<(Tensor<f32>, Tensor<f32>, ChangeMask)> {
    let samples: Vec<&ChangeSample> = samples.into_iter().collect();
    let t1: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.img_t1).collect();
    let t2: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.img_t2).collect();
    let m: Vec<&Tensor<f32>> = samples.iter().map(|s| s.mask.tensor()).collect();
    Ok((Tensor::stack(&t1)?, Tensor::stack(&t2)?, ChangeMask::new(Tensor::stack(&m)?)?))
}

/// Scalar loss components of one batch, recorded on `g`.
pub struct StepLosses {
    pub total: Var,
    pub metric: Option<Var>,
    pub ce: Option<Var>,
    pub dice: Option<Var>,
}

fn nan_guard<T>(step: usize, component: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite { .. } => Error::NanLoss {
            step,
            component: component.to_string(),
        },
        other => other,
    })
}

/// Forward pass plus every configured objective.
pub fn build_losses(
    g: &mut Graph<f32>,
    params: &crate::network::BoundParams,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    img1: Var,
    img2: Var,
    mask: &ChangeMask,
    step: usize,
) -> Result<StepLosses> {
    let out = nan_guard(step, "forward", forward_graph(g, params, model_cfg, img1, img2))?;
    let flags = cfg.flags;
    let metric = if flags.has_metric_loss() {
        let y = mask.downsample(2)?;
        let l = if flags.use_hsac {
            losses::hsac_loss_from_cosine(g, out.d_cos, &y, cfg.loss.tau)
        } else {
            losses::contrastive_loss(g, out.proj1.raw, out.proj2.raw, &y, &cfg.loss)
        };
        Some(nan_guard(step, "loss_metric", l)?)
    } else {
        None
    };
    let (ce, dice) = match (flags.use_seg, out.logits) {
        (true, Some(logits)) => (
            Some(nan_guard(step, "loss_ce", losses::cross_entropy_loss(g, logits, mask))?),
            Some(nan_guard(step, "loss_dice", losses::dice_loss(g, logits, mask))?),
        ),
        _ => (None, None),
    };
    let total = match (metric, ce, dice) {
        (Some(m), Some(c), Some(d)) => losses::total_loss(g, m, c, d, &cfg.loss)?,
        (Some(m), _, _) => g.scale(m, cfg.loss.metric_weight)?,
        (None, Some(c), Some(d)) => {
            let s = g.add(c, d)?;
            g.scale(s, cfg.loss.seg_weight)?
        }
        _ => return Err(Error::Contract("no loss component configured".into())),
    };
    Ok(StepLosses {
        total: nan_guard(step, "total", Ok(total))?,
        metric,
        ce,
        dice,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch; `on_epoch` sees every log row as it is produced.
pub fn train_with_progress(
    cfg: &TrainConfig,
    samples: &[ChangeSample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let model_cfg = cfg.model_config();
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let (train_set, val_set) = split_validation(samples, cfg.validation_split);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut state = OptimState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut lr = cfg.lr0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_m, mut sum_ce, mut sum_dice) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ChangeSample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(train_set[i], &mut rng)
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let (x1, x2, mask) = collate(&batch)?;
            let mut g = Graph::<f32>::new();
            let bound = model.params.bind(&mut g, true);
            let (v1, v2) = (g.constant(x1), g.constant(x2));
            let losses = build_losses(&mut g, &bound, cfg, &model_cfg, v1, v2, &mask, step)?;
            let value = |g: &Graph<f32>, v: Option<Var>| -> Result<f64> {
                v.map(|v| g.scalar_value(v).map(|x| x as f64)).unwrap_or(Ok(0.0))
            };
            sum_m += value(&g, losses.metric)?;
            sum_ce += value(&g, losses.ce)?;
            sum_dice += value(&g, losses.dice)?;
            nan_guard(step, "backward", g.backward(losses.total))?;
            let grads: BTreeMap<String, Vec<f32>> = bound
                .iter()
                .map(|(name, v)| (name.to_string(), g.grad(v).map(<[f32]>::to_vec).unwrap_or_default()))
                .collect();
            lr = poly_lr(step, max_iter, cfg.lr0, cfg.poly_power)?;
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg)?;
            step += 1;
        }
        let n = steps_per_epoch as f64;
        let (val_f1_seg, val_f1_metric) = validate(&model, cfg, &val_set)?;
        let row = EpochLog {
            epoch,
            step,
            lr,
            loss_metric: sum_m / n,
            loss_ce: sum_ce / n,
            loss_dice: sum_dice / n,
            val_f1_seg,
            val_f1_metric,
        };
        on_epoch(&row);
        log.push(row);
    }
    Ok(TrainOutcome { model, log })
}

pub fn train(cfg: &TrainConfig, samples: &[ChangeSample]) -> Result<TrainOutcome> {
    train_with_progress(cfg, samples, |_| {})
}

/// Validation F1 of the segmentation path and of the metric path at its
/// best validation threshold.
fn validate(model: &Model<f32>, cfg: &TrainConfig, val: &[&ChangeSample]) -> Result<(Option<f64>, Option<f64>)> {
    if val.is_empty() {
        return Ok((None, None));
    }
    let set = run_inference(model, val.iter().copied(), cfg.batch_size.max(16))?;
    let seg = set.seg_report()?.map(|r| r.f1);
    let metric = if cfg.flags.has_metric_loss() {
        let kind = metric_distance_kind(&cfg.flags, &cfg.loss);
        Some(threshold_sweep(&set.distance_maps(kind), &set.gt, &grid_for(kind, &cfg.loss))?.best.f1)
    } else {
        None
    };
    Ok((seg, metric))
}
