//! Pixel metrics, threshold selection, temperature and ablation sweeps.
//!
//! All metrics pool pixels over the whole evaluation set before dividing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{hsac_gradient_weight, ChangeMask, DistanceKind, DistanceMap, LossConfig};
use crate::network::{predict_from_distance, predict_seg, Model};
use crate::synthdata::ChangeSample;
use crate::training::{collate, train, AblationFlags, EpochLog, TrainConfig};

pub const AGGREGATION: &str = "pooled_pixels";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// Fraction of truly unchanged pixels predicted as changed.
    pub fn false_positive_rate(&self) -> f64 {
        let neg = self.fp + self.tn;
        if neg == 0 {
            0.0
        } else {
            self.fp as f64 / neg as f64
        }
    }
}

pub fn confusion(pred: &ChangeMask, gt: &ChangeMask) -> Result<ConfusionMatrix> {
    if pred.shape() != gt.shape() {
        return Err(Error::dim(
            "confusion",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, g) in pred.bits().zip(gt.bits()) {
        match (p, g) {
            (true, true) => cm.tp += 1,
            (false, false) => cm.tn += 1,
            (true, false) => cm.fp += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: ConfusionMatrix,
}

/// IoU, precision, recall and F1 of the changed class. With nothing to
/// find and nothing predicted all four are 1; any other zero denominator
/// gives 0.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let (tp, fp, fn_) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64);
    if cm.tp == 0 && cm.fp == 0 && cm.fn_ == 0 {
        return MetricsReport {
            iou: 1.0,
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
            confusion: *cm,
        };
    }
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    MetricsReport {
        iou: ratio(tp, tp + fp + fn_),
        precision,
        recall,
        f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        confusion: *cm,
    }
}

/// `0.01, 0.02, …, 2.00`.
pub fn default_grid() -> Vec<f64> {
    (1..=200).map(|i| i as f64 / 100.0).collect()
}

/// Threshold grid for a metric path: the default grid for cosine
/// dissimilarity, and `0.01` steps up to twice the margin for raw
/// Euclidean distances, which are not bounded by 2.
pub fn grid_for(kind: DistanceKind, loss: &LossConfig) -> Vec<f64> {
    match kind {
        DistanceKind::Cosine => default_grid(),
        DistanceKind::Euclidean => {
            let top = (2.0 * loss.margin).max(2.0);
            (1..=(top * 100.0).round() as usize).map(|i| i as f64 / 100.0).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best_thre: f64,
    pub best: MetricsReport,
    pub reports: Vec<(f64, MetricsReport)>,
}

/// Scores every threshold of `grid` (ascending) on the pooled pixels of
/// all maps. Maps at a coarser resolution than their masks are upsampled
/// by nearest neighbour. Ties in F1 go to the smaller threshold.
pub fn threshold_sweep(maps: &[DistanceMap], gts: &[ChangeMask], grid: &[f64]) -> Result<SweepResult> {
    if maps.is_empty() || maps.len() != gts.len() {
        return Err(Error::Contract(format!(
            "threshold sweep needs matching non-empty inputs, got {} maps and {} masks",
            maps.len(),
            gts.len()
        )));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|t| !t.is_finite()) {
        return Err(Error::param("threshold_sweep", "grid must be non-empty, finite and strictly ascending"));
    }
    // bucket k holds pixels whose dissimilarity exceeds exactly the first
    // k grid points, i.e. predicted changed for thresholds grid[..k]
    let mut pos = vec![0u64; grid.len() + 1];
    let mut neg = vec![0u64; grid.len() + 1];
    for (map, gt) in maps.iter().zip(gts) {
        let (n, _, h, w) = map.values.dims4()?;
        let (gn, _, gh, gw) = gt.tensor().dims4()?;
        if gn != n || gh % h != 0 || gw % w != 0 || gh / h != gw / w {
            return Err(Error::dim(
                "threshold_sweep",
                format!("map {:?} does not tile mask {:?}", map.values.shape(), gt.shape()),
            ));
        }
        let f = gh / h;
        let dis: Vec<f64> = map.dissimilarity().collect();
        let gt_bits = gt.tensor().data();
        for ni in 0..n {
            for y in 0..gh {
                for x in 0..gw {
                    let d = dis[ni * h * w + (y / f) * w + x / f];
                    let k = grid.partition_point(|&t| t < d);
                    if gt_bits[(ni * gh + y) * gw + x] == 1.0 {
                        pos[k] += 1;
                    } else {
                        neg[k] += 1;
                    }
                }
            }
        }
    }
    let (total_pos, total_neg): (u64, u64) = (pos.iter().sum(), neg.iter().sum());
    // predicted changed at threshold j: buckets k > j
    let mut above_pos: u64 = total_pos - pos[0];
    let mut above_neg: u64 = total_neg - neg[0];
    let mut reports = Vec::with_capacity(grid.len());
    for (j, &t) in grid.iter().enumerate() {
        if j > 0 {
            above_pos -= pos[j];
            above_neg -= neg[j];
        }
        let cm = ConfusionMatrix {
            tp: above_pos,
            fp: above_neg,
            fn_: total_pos - above_pos,
            tn: total_neg - above_neg,
        };
        reports.push((t, metrics(&cm)));
    }
    let (best_thre, best) = reports
        .iter()
        .fold(None::<(f64, MetricsReport)>, |acc, &(t, r)| match acc {
            Some((_, b)) if b.f1 >= r.f1 => acc,
            _ => Some((t, r)),
        })
        .expect("grid is non-empty");
    Ok(SweepResult {
        best_thre,
        best,
        reports,
    })
}

/// Distance the metric path of a run thresholds: cosine for the hard
/// sample-aware loss, the configured contrastive distance otherwise.
pub fn metric_distance_kind(flags: &AblationFlags, loss: &LossConfig) -> DistanceKind {
    if flags.use_con {
        loss.distance_kind
    } else {
        DistanceKind::Cosine
    }
}

/// Model outputs over a sample set, batched.
#[derive(Clone, Debug)]
pub struct InferenceSet {
    pub d_cos: Vec<DistanceMap>,
    pub euclidean: Vec<DistanceMap>,
    pub seg: Option<Vec<ChangeMask>>,
    pub gt: Vec<ChangeMask>,
}

impl InferenceSet {
    pub fn distance_maps(&self, kind: DistanceKind) -> Vec<DistanceMap> {
        match kind {
            DistanceKind::Cosine => self.d_cos.clone(),
            DistanceKind::Euclidean => self.euclidean.clone(),
        }
    }

    pub fn seg_confusion(&self) -> Result<Option<ConfusionMatrix>> {
        let Some(seg) = &self.seg else { return Ok(None) };
        let mut cm = ConfusionMatrix::default();
        for (p, g) in seg.iter().zip(&self.gt) {
            cm.merge(&confusion(p, g)?);
        }
        Ok(Some(cm))
    }

    pub fn seg_report(&self) -> Result<Option<MetricsReport>> {
        Ok(self.seg_confusion()?.map(|cm| metrics(&cm)))
    }

    pub fn metric_confusion(&self, kind: DistanceKind, d_thre: f64) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::default();
        for (map, g) in self.distance_maps(kind).iter().zip(&self.gt) {
            let f = g.shape()[2] / map.values.shape()[2];
            cm.merge(&confusion(&predict_from_distance(map, d_thre, f)?, g)?);
        }
        Ok(cm)
    }

    pub fn metric_report(&self, kind: DistanceKind, d_thre: f64) -> Result<MetricsReport> {
        Ok(metrics(&self.metric_confusion(kind, d_thre)?))
    }
}

pub fn run_inference<'a>(
    model: &Model<f32>,
    samples: impl IntoIterator<Item = &'a ChangeSample>,
    batch_size: usize,
) -> Result<InferenceSet> {
    let samples: Vec<&ChangeSample> = samples.into_iter().collect();
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::Contract("inference needs samples and a positive batch size".into()));
    }
    let mut set = InferenceSet {
        d_cos: Vec::new(),
        euclidean: Vec::new(),
        seg: model.config.decoder.ne(&crate::network::DecoderKind::None).then(Vec::new),
        gt: Vec::new(),
    };
    for chunk in samples.chunks(batch_size) {
        let (x1, x2, mask) = collate(chunk.iter().copied())?;
        let pred = model.forward(&x1, &x2)?;
        set.d_cos.push(pred.distance_map(DistanceKind::Cosine));
        set.euclidean.push(pred.distance_map(DistanceKind::Euclidean));
        if let (Some(seg), Some(logits)) = (set.seg.as_mut(), pred.logits.as_ref()) {
            seg.push(predict_seg(logits)?);
        }
        set.gt.push(mask);
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub y: u8,
    pub d_cos: f64,
    pub weight: f64,
}

/// Gradient weight of the hard sample-aware loss over `d_cos` for both
/// labels and every temperature.
pub fn gradient_weight_curve(taus: &[f64], grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::param("gradient_weight_curve", format!("temperature {t} must be > 0")));
    }
    let mut out = Vec::with_capacity(taus.len() * grid.len() * 2);
    for &tau in taus {
        for y in [0u8, 1] {
            for &d in grid {
                out.push(CurvePoint {
                    tau,
                    y,
                    d_cos: d,
                    weight: hsac_gradient_weight(d, y == 1, tau),
                });
            }
        }
    }
    Ok(out)
}

/// `n` evenly spaced points on `[-1, 1]`.
pub fn cosine_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

pub const DEFAULT_TAUS: [f64; 6] = [0.05, 0.1, 0.2, 0.5, 1.0, 10.0];

/// Which inference path a sweep cell is scored on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPath {
    Metric,
    Seg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub label: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub path: EvalPath,
}

impl SweepCell {
    pub fn key(&self) -> String {
        format!("{}_seed{}", self.label, self.seed)
    }
}

pub fn temperature_cells(base: &TrainConfig, taus: &[f64], seeds: &[u64]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for &tau in taus {
        for &seed in seeds {
            let mut config = base.clone();
            config.seed = seed;
            config.loss.tau = tau;
            config.flags = AblationFlags::hsac_metric();
            cells.push(SweepCell {
                label: format!("tau{tau}"),
                seed,
                config,
                path: EvalPath::Metric,
            });
        }
    }
    cells
}

pub fn ablation_cells(base: &TrainConfig, seeds: &[u64]) -> Vec<SweepCell> {
    let mut cells = Vec::new();
    for (label, flags) in AblationFlags::ROWS {
        for &seed in seeds {
            let mut config = base.clone();
            config.seed = seed;
            config.flags = flags;
            cells.push(SweepCell {
                label: label.to_string(),
                seed,
                config,
                path: if flags.use_seg { EvalPath::Seg } else { EvalPath::Metric },
            });
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub path: EvalPath,
    /// Threshold chosen on the training set (metric path only).
    pub d_thre: Option<f64>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
    pub log: Vec<EpochLog>,
}

/// Scores a trained model on `test`. The metric path picks its threshold
/// by sweeping the training samples.
pub fn score_model(
    model: &Model<f32>,
    cfg: &TrainConfig,
    path: EvalPath,
    train_set: &[ChangeSample],
    test: &[ChangeSample],
) -> Result<(Option<f64>, MetricsReport)> {
    let batch = 16;
    let test_out = run_inference(model, test, batch)?;
    match path {
        EvalPath::Seg => {
            let r = test_out
                .seg_report()?
                .ok_or_else(|| Error::Contract("segmentation scoring needs a decoder".into()))?;
            Ok((None, r))
        }
        EvalPath::Metric => {
            let kind = metric_distance_kind(&cfg.flags, &cfg.loss);
            let train_out = run_inference(model, train_set, batch)?;
            let sweep = threshold_sweep(&train_out.distance_maps(kind), &train_out.gt, &grid_for(kind, &cfg.loss))?;
            Ok((Some(sweep.best_thre), test_out.metric_report(kind, sweep.best_thre)?))
        }
    }
}

/// Trains and scores one cell. Training failures are recorded, not raised.
pub fn run_cell(cell: &SweepCell, train_set: &[ChangeSample], test: &[ChangeSample]) -> CellResult {
    let mut result = CellResult {
        label: cell.label.clone(),
        seed: cell.seed,
        path: cell.path,
        d_thre: None,
        report: None,
        error: None,
        log: Vec::new(),
    };
    let scored = train(&cell.config, train_set).and_then(|out| {
        result.log = out.log.clone();
        score_model(&out.model, &cell.config, cell.path, train_set, test)
    });
    match scored {
        Ok((t, r)) => {
            result.d_thre = t;
            result.report = Some(r);
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stdev: f64,
}

impl Stat {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self {
            mean,
            stdev: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub failed: Vec<u64>,
    pub iou: Option<Stat>,
    pub precision: Option<Stat>,
    pub recall: Option<Stat>,
    pub f1: Option<Stat>,
}

/// One row per label, in first-appearance order.
pub fn summarize(results: &[CellResult]) -> Vec<SummaryRow> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let cells: Vec<&CellResult> = results.iter().filter(|r| r.label == label).collect();
            let ok: Vec<&MetricsReport> = cells.iter().filter_map(|c| c.report.as_ref()).collect();
            let stat = |f: fn(&MetricsReport) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                label: label.to_string(),
                seeds: cells.iter().map(|c| c.seed).collect(),
                failed: cells.iter().filter(|c| c.report.is_none()).map(|c| c.seed).collect(),
                iou: stat(|r| r.iou),
                precision: stat(|r| r.precision),
                recall: stat(|r| r.recall),
                f1: stat(|r| r.f1),
            }
        })
        .collect()
}

pub fn temperature_sweep(
    base: &TrainConfig,
    taus: &[f64],
    seeds: &[u64],
    train_set: &[ChangeSample],
    test: &[ChangeSample],
) -> Vec<SummaryRow> {
    let results: Vec<CellResult> = temperature_cells(base, taus, seeds)
        .iter()
        .map(|c| run_cell(c, train_set, test))
        .collect();
    summarize(&results)
}

pub fn ablation_grid(base: &TrainConfig, seeds: &[u64], train_set: &[ChangeSample], test: &[ChangeSample]) -> Vec<CellResult> {
    ablation_cells(base, seeds)
        .iter()
        .map(|c| run_cell(c, train_set, test))
        .collect()
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curve {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}

/// Flat CSV mirror of a summary table.
pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "label", "n_seeds", "n_failed", "iou_mean", "iou_std", "precision_mean", "precision_std", "recall_mean",
        "recall_std", "f1_mean", "f1_std",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.label.clone(), r.seeds.len().to_string(), r.failed.len().to_string()];
        for s in [&r.iou, &r.precision, &r.recall, &r.f1] {
            match s {
                Some(s) => rec.extend([s.mean.to_string(), s.stdev.to_string()]),
                None => rec.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub aggregation: String,
    pub mode: String,
    pub d_thre: Option<f64>,
    pub report: MetricsReport,
}

pub fn write_report_csv<W: Write>(out: W, r: &ReportFile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "aggregation", "d_thre", "iou", "precision", "recall", "f1", "tp", "tn", "fp", "fn"])
        .map_err(csv_err)?;
    let m = &r.report;
    let c = &m.confusion;
    w.write_record([
        r.mode.clone(),
        r.aggregation.clone(),
        r.d_thre.map(|t| t.to_string()).unwrap_or_default(),
        m.iou.to_string(),
        m.precision.to_string(),
        m.recall.to_string(),
        m.f1.to_string(),
        c.tp.to_string(),
        c.tn.to_string(),
        c.fp.to_string(),
        c.fn_.to_string(),
    ])
    .map_err(csv_err)?;
    w.flush().map_err(csv_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[bool], h: usize, w: usize) -> ChangeMask {
        ChangeMask::from_bools(&[1, 1, h, w], bits.iter().copied()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let gt: Vec<bool> = (0..100).map(|i| i < 10).collect();
        let g = mask(&gt, 10, 10);
        let cm = confusion(&g, &g).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 10, tn: 90, fp: 0, fn_: 0 });
        let inv: Vec<bool> = gt.iter().map(|b| !b).collect();
        let cm = confusion(&mask(&inv, 10, 10), &g).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        let q: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
        let cm = confusion(&mask(&p, 4, 4), &mask(&q, 4, 4)).unwrap();
        let count = |a: bool, b: bool| p.iter().zip(&q).filter(|&(&x, &y)| x == a && y == b).count() as u64;
        assert_eq!(cm, ConfusionMatrix { tp: count(true, true), tn: count(false, false), fp: count(true, false), fn_: count(false, true) });
        assert_eq!(cm.total(), 16);
    }

    #[test]
    fn metric_examples() {
        let r = metrics(&ConfusionMatrix { tp: 1, ..Default::default() });
        assert_eq!((r.iou, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        let r = metrics(&ConfusionMatrix { tp: 3, fp: 1, fn_: 2, tn: 10 });
        assert!((r.iou - 0.5).abs() < 1e-15);
        assert!((r.precision - 0.75).abs() < 1e-15);
        assert!((r.recall - 0.6).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let empty = metrics(&ConfusionMatrix { tn: 50, ..Default::default() });
        assert_eq!(empty.f1, 1.0);
        let missed = metrics(&ConfusionMatrix { fn_: 3, tn: 50, ..Default::default() });
        assert_eq!((missed.precision, missed.recall, missed.f1, missed.iou), (0.0, 0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn f1_iou_identity_and_scale_invariance(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000, k in 1u64..50) {
            let cm = ConfusionMatrix { tp, fp, fn_, tn };
            let r = metrics(&cm);
            prop_assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            for v in [r.iou, r.precision, r.recall, r.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let s = metrics(&ConfusionMatrix { tp: tp * k, fp: fp * k, fn_: fn_ * k, tn: tn * k });
            prop_assert!((s.iou - r.iou).abs() < 1e-12 && (s.f1 - r.f1).abs() < 1e-12);
            prop_assert!((s.precision - r.precision).abs() < 1e-12 && (s.recall - r.recall).abs() < 1e-12);
        }
    }

    fn cos_map(sims: &[f32], h: usize, w: usize) -> DistanceMap {
        DistanceMap {
            kind: DistanceKind::Cosine,
            values: Tensor::new(vec![1, 1, h, w], sims.to_vec()).unwrap(),
        }
    }

    #[test]
    fn separable_distances_pick_the_smallest_interior_threshold() {
        // dissimilarity 0 for unchanged, 2 for changed
        let sims = [1.0, -1.0, 1.0, 1.0];
        let gt = mask(&[false, true, false, false], 2, 2);
        let s = threshold_sweep(&[cos_map(&sims, 2, 2)], &[gt], &default_grid()).unwrap();
        assert_eq!(s.best_thre, 0.01);
        assert_eq!(s.best.f1, 1.0);
        assert!(s.reports.iter().filter(|(t, _)| *t < 2.0).all(|(_, r)| r.f1 == 1.0));
    }

    #[test]
    fn all_unchanged_selects_the_grid_maximum() {
        let sims = [0.5, -0.999, 0.2, 0.9];
        let gt = mask(&[false; 4], 2, 2);
        let s = threshold_sweep(&[cos_map(&sims, 2, 2)], &[gt], &default_grid()).unwrap();
        assert_eq!(s.best_thre, 2.0);
        assert_eq!(s.best.confusion.fp, 0);
    }

    #[test]
    fn sweep_matches_exhaustive_evaluation_and_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let maps: Vec<DistanceMap> = (0..3)
            .map(|_| {
                let v: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
                cos_map(&v, 3, 3)
            })
            .collect();
        let gts: Vec<ChangeMask> = (0..3)
            .map(|_| {
                let b: Vec<bool> = (0..36).map(|_| rng.random_bool(0.3)).collect();
                mask(&b, 6, 6)
            })
            .collect();
        let grid = default_grid();
        let s = threshold_sweep(&maps, &gts, &grid).unwrap();
        for (t, r) in &s.reports {
            let mut cm = ConfusionMatrix::default();
            for (m, g) in maps.iter().zip(&gts) {
                cm.merge(&confusion(&predict_from_distance(m, *t, 2).unwrap(), g).unwrap());
            }
            assert_eq!(cm, r.confusion, "threshold {t}");
            assert!(s.best.f1 >= r.f1);
        }
        let first_best = s.reports.iter().find(|(_, r)| r.f1 == s.best.f1).unwrap().0;
        assert_eq!(first_best, s.best_thre);
    }

    #[test]
    fn weight_curve_properties() {
        let grid = cosine_grid(201);
        let curve = gradient_weight_curve(&[0.2, 50.0], &grid).unwrap();
        assert_eq!(curve.len(), 2 * 2 * 201);
        let at = |tau: f64, y: u8, d: f64| {
            curve
                .iter()
                .find(|p| p.tau == tau && p.y == y && (p.d_cos - d).abs() < 1e-12)
                .unwrap()
                .weight
        };
        assert!((at(0.2, 1, 0.5) - 0.924142).abs() < 1e-6);
        for &d in &grid {
            assert!((at(0.2, 0, d) - at(0.2, 1, -d)).abs() < 1e-12);
            assert!((at(50.0, 1, d) - 0.5).abs() < 0.02);
        }
        assert!(gradient_weight_curve(&[0.0], &grid).is_err());
    }

    #[test]
    fn stats_average_by_hand() {
        let s = Stat::of(&[0.5, 0.7, 0.9]).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-15);
        assert!((s.stdev - 0.2).abs() < 1e-12);
        assert_eq!(Stat::of(&[0.3]).unwrap().stdev, 0.0);
    }

    #[test]
    fn cell_tables_have_expected_shape() {
        let base = TrainConfig::default();
        let cells = ablation_cells(&base, &[1, 2]);
        assert_eq!(cells.len(), 12);
        assert_eq!(cells[0].label, "con");
        assert_eq!(cells[11].label, "hsac_md");
        assert_eq!(cells[2].path, EvalPath::Metric);
        assert_eq!(cells[4].path, EvalPath::Seg);
        let t = temperature_cells(&base, &DEFAULT_TAUS, &[0]);
        assert_eq!(t.len(), 6);
        assert!(t.iter().all(|c| c.config.flags == AblationFlags::hsac_metric()));
    }
}
