//! Objectives for the metric space and the output space.
//!
//! The metric-space losses compare the two temporal embeddings pixel by
//! pixel: the classic margin-based contrastive loss, and the hard
//! sample-aware contrastive loss, a binary cross-entropy on the
//! temperature-scaled cosine similarity. Output-space losses (BCE and soft
//! Dice) act on the decoder logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Guard added under every square root of a squared norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// `‖f1 - f2‖₂` on the raw features.
    Euclidean,
    /// `1 - cos(f1, f2)`.
    Cosine,
}

impl DistanceKind {
    pub fn default_margin(self) -> f64 {
        match self {
            DistanceKind::Euclidean => 2.0,
            DistanceKind::Cosine => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Temperature dividing the cosine similarity.
    pub tau: f64,
    /// Hinge margin of the contrastive loss.
    pub margin: f64,
    pub seg_weight: f64,
    pub metric_weight: f64,
    /// Distance used by the contrastive loss.
    pub distance_kind: DistanceKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            margin: DistanceKind::Euclidean.default_margin(),
            seg_weight: 1.0,
            metric_weight: 1.0,
            distance_kind: DistanceKind::Euclidean,
        }
    }
}

impl LossConfig {
    pub fn with_distance(kind: DistanceKind) -> Self {
        Self {
            margin: kind.default_margin(),
            distance_kind: kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.seg_weight >= 0.0 && self.metric_weight >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Binary change labels, 1 = changed.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMask(Tensor<f32>);

impl ChangeMask {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("change mask entries must be 0 or 1".into()));
        }
        Ok(Self(values))
    }

    pub fn from_bools(shape: &[usize], bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let data: Vec<f32> = bits.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self(Tensor::new(shape.to_vec(), data)?))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self(Tensor::zeros(shape))
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn shape(&self) -> &[usize] {
        self.0.shape()
    }

    pub fn len(&self) -> usize {
        self.0.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_changed(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.data().iter().map(|&v| v == 1.0)
    }

    /// Nearest-neighbour downsampling (rank-4 masks only).
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self(self.0.downsample_nearest(factor)?))
    }

    pub(crate) fn as_real<T: Real>(&self) -> Tensor<T> {
        self.0.cast()
    }

    fn complement<T: Real>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.0.shape().to_vec(),
            self.0.data().iter().map(|&v| T::of(1.0 - v as f64)).collect(),
        )
    }
}

/// Per-pixel distance between two temporal embeddings, `[N,1,h,w]`.
///
/// For the cosine kind the stored values are cosine similarities in
/// `[-1, 1]`; for the Euclidean kind they are non-negative distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub kind: DistanceKind,
    pub values: Tensor<f32>,
}

impl DistanceMap {
    /// Dissimilarity oriented so that larger means "more changed":
    /// `1 - D_cos` for the cosine kind, the distance itself otherwise.
    pub fn dissimilarity(&self) -> impl Iterator<Item = f64> + '_ {
        let kind = self.kind;
        self.values.data().iter().map(move |&v| match kind {
            DistanceKind::Cosine => 1.0 - v as f64,
            DistanceKind::Euclidean => v as f64,
        })
    }
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, f1: Var, f2: Var) -> Result<()> {
    if g.shape(f1) != g.shape(f2) {
        return Err(Error::dim(
            op,
            format!("feature shapes {:?} and {:?} differ", g.shape(f1), g.shape(f2)),
        ));
    }
    Ok(())
}

fn check_mask<T: Real>(g: &Graph<T>, op: &'static str, per_pixel: Var, y: &ChangeMask) -> Result<()> {
    if g.shape(per_pixel) != y.shape() {
        return Err(Error::dim(
            op,
            format!("mask shape {:?} does not match per-pixel shape {:?}", y.shape(), g.shape(per_pixel)),
        ));
    }
    Ok(())
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param(op, format!("temperature must be > 0, got {tau}")))
    }
}

/// Cosine similarity of the L2-projected features: `<u1, u2>` per pixel.
pub fn cosine_distance<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<Var> {
    check_pair(g, "cosine_distance", f1, f2)?;
    let u1 = g.l2_normalize(f1, NORM_EPS)?;
    let u2 = g.l2_normalize(f2, NORM_EPS)?;
    g.dot_channels(u1, u2)
}

/// `‖f1 - f2‖₂` per pixel, shifted so that identical features give exactly 0.
pub fn euclidean_distance<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var) -> Result<Var> {
    check_pair(g, "euclidean_distance", f1, f2)?;
    let d = g.sub(f1, f2)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_channels(sq)?;
    let r = g.sqrt(s, NORM_EPS)?;
    g.add_scalar(r, -NORM_EPS.sqrt())
}

/// Margin contrastive loss on raw features.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var, y: &ChangeMask, cfg: &LossConfig) -> Result<Var> {
    let d = match cfg.distance_kind {
        DistanceKind::Euclidean => euclidean_distance(g, f1, f2)?,
        DistanceKind::Cosine => {
            let c = cosine_distance(g, f1, f2)?;
            let neg = g.scale(c, -1.0)?;
            g.add_scalar(neg, 1.0)?
        }
    };
    contrastive_loss_from_distance(g, d, y, cfg.margin)
}

/// Contrastive loss given a distance map: mean distance over unchanged
/// pixels plus mean hinge `max(0, m - D)` over changed pixels. An empty
/// class contributes 0.
pub fn contrastive_loss_from_distance<T: Real>(g: &mut Graph<T>, d: Var, y: &ChangeMask, margin: f64) -> Result<Var> {
    check_mask(g, "contrastive_loss", d, y)?;
    let n_changed = y.count_changed();
    let n_unchanged = y.len() - n_changed;
    let mut total = None;
    if n_unchanged > 0 {
        let keep = g.constant(y.complement());
        let masked = g.mul(d, keep)?;
        let s = g.sum_all(masked)?;
        total = Some(g.scale(s, 1.0 / n_unchanged as f64)?);
    }
    if n_changed > 0 {
        let neg = g.scale(d, -1.0)?;
        let gap = g.add_scalar(neg, margin)?;
        let hinge = g.relu(gap)?;
        let keep = g.constant(y.as_real());
        let masked = g.mul(hinge, keep)?;
        let s = g.sum_all(masked)?;
        let term = g.scale(s, 1.0 / n_changed as f64)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("contrastive loss on an empty mask".into()))
}

/// Hard sample-aware contrastive loss:
/// `-(1/N) Σ [(1-y)·log σ(D/τ) + y·log(1 - σ(D/τ))]` with `D` the cosine
/// similarity of the projected features.
pub fn hsac_loss<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var, y: &ChangeMask, tau: f64) -> Result<Var> {
    check_tau("hsac_loss", tau)?;
    let d = cosine_distance(g, f1, f2)?;
    hsac_loss_from_cosine(g, d, y, tau)
}

/// The same objective expressed on a precomputed cosine map, written as
/// `(1-y)·softplus(-D/τ) + y·softplus(D/τ)` so it never overflows.
pub fn hsac_loss_from_cosine<T: Real>(g: &mut Graph<T>, d_cos: Var, y: &ChangeMask, tau: f64) -> Result<Var> {
    check_tau("hsac_loss", tau)?;
    check_mask(g, "hsac_loss", d_cos, y)?;
    let z = g.scale(d_cos, 1.0 / tau)?;
    let neg_z = g.scale(z, -1.0)?;
    let unchanged_nll = g.softplus(neg_z)?;
    let changed_nll = g.softplus(z)?;
    let w0 = g.constant(y.complement());
    let w1 = g.constant(y.as_real());
    let a = g.mul(unchanged_nll, w0)?;
    let b = g.mul(changed_nll, w1)?;
    let per_pixel = g.add(a, b)?;
    g.mean_all(per_pixel)
}

/// BCE-with-logits on `-<u1,u2>/τ` with the change mask as target.
/// Independent evaluation path for [`hsac_loss`].
pub fn hsac_loss_oneline<T: Real>(g: &mut Graph<T>, f1: Var, f2: Var, y: &ChangeMask, tau: f64) -> Result<Var> {
    check_tau("hsac_loss_oneline", tau)?;
    check_pair(g, "hsac_loss_oneline", f1, f2)?;
    let u1 = g.l2_normalize(f1, NORM_EPS)?;
    let u2 = g.l2_normalize(f2, NORM_EPS)?;
    let s = g.dot_channels(u1, u2)?;
    check_mask(g, "hsac_loss_oneline", s, y)?;
    let logits = g.scale(s, -1.0 / tau)?;
    let target = g.constant(y.as_real());
    g.bce_with_logits(logits, target)
}

/// Magnitude of the coefficient multiplying `d cos / dθ` in the gradient
/// of the hard sample-aware loss: `σ(cos/τ)` for changed pixels and
/// `1 - σ(cos/τ)` for unchanged ones.
pub fn hsac_gradient_weight(d_cos: f64, changed: bool, tau: f64) -> f64 {
    let s = crate::tensor::sigmoid(d_cos / tau);
    if changed {
        s
    } else {
        1.0 - s
    }
}

pub fn cross_entropy_loss<T: Real>(g: &mut Graph<T>, logits: Var, y: &ChangeMask) -> Result<Var> {
    check_mask(g, "cross_entropy_loss", logits, y)?;
    let target = g.constant(y.as_real());
    g.bce_with_logits(logits, target)
}

/// Soft Dice with smoothing 1: `1 - (2Σpy + 1) / (Σp + Σy + 1)`, `p = σ(logits)`.
pub fn dice_loss<T: Real>(g: &mut Graph<T>, logits: Var, y: &ChangeMask) -> Result<Var> {
    check_mask(g, "dice_loss", logits, y)?;
    let p = g.sigmoid(logits)?;
    let target = g.constant(y.as_real());
    let py = g.mul(p, target)?;
    let inter = g.sum_all(py)?;
    let sum_p = g.sum_all(p)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, 1.0)?;
    let den = g.add_scalar(sum_p, y.count_changed() as f64 + 1.0)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// `metric_weight · metric + seg_weight · (ce + dice)`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, metric: Var, ce: Var, dice: Var, cfg: &LossConfig) -> Result<Var> {
    let m = g.scale(metric, cfg.metric_weight)?;
    let seg = g.add(ce, dice)?;
    let seg = g.scale(seg, cfg.seg_weight)?;
    g.add(m, seg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn t4(c: usize, values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, c, 1, values.len() / c], values.to_vec()).unwrap()
    }

    fn vec_pixel(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, values.len(), 1, 1], values.to_vec()).unwrap()
    }

    fn mask(bits: &[bool]) -> ChangeMask {
        ChangeMask::from_bools(&[1, 1, 1, bits.len()], bits.iter().copied()).unwrap()
    }

    fn random_case(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, ChangeMask) {
        let shape = [2, c, h, w];
        let f1 = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let f2 = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        let y = ChangeMask::from_bools(&[2, 1, h, w], (0..2 * h * w).map(|_| rng.random_bool(0.3))).unwrap();
        (f1, f2, y)
    }

    fn eval2(f1: &Tensor<f64>, f2: &Tensor<f64>, op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.constant(f1.clone()), g.constant(f2.clone()));
        let l = op(&mut g, a, b).unwrap();
        g.scalar_value(l).unwrap()
    }

    #[test]
    fn contrastive_examples() {
        let f = t4(3, &[0.2, -0.4, 1.0, 0.5, 0.1, 0.9]);
        let cfg = LossConfig::default();
        let y = mask(&[false, false]);
        assert_eq!(eval2(&f, &f, |g, a, b| contrastive_loss(g, a, b, &y, &cfg)), 0.0);

        let d = t4(1, &[2.5, 0.0]);
        let mut g = Graph::new();
        let dv = g.constant(d);
        let y = mask(&[true, false]);
        let l = contrastive_loss_from_distance(&mut g, dv, &y, 2.0).unwrap();
        assert_eq!(g.scalar_value(l).unwrap(), 0.0, "saturated hinge");

        // changed pixel at D=0 pays the full margin 1, unchanged pixel pays 0.5
        let d = t4(1, &[0.0, 0.5]);
        let mut g = Graph::new();
        let dv = g.constant(d);
        let l = contrastive_loss_from_distance(&mut g, dv, &y, 1.0).unwrap();
        assert!((g.scalar_value(l).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn contrastive_cosine_kind_uses_one_minus_cos() {
        let f1 = vec_pixel(&[1.0, 0.0]);
        let f2 = vec_pixel(&[0.0, 2.0]);
        let cfg = LossConfig::with_distance(DistanceKind::Cosine);
        let y = ChangeMask::zeros(&[1, 1, 1, 1]);
        let l = eval2(&f1, &f2, |g, a, b| contrastive_loss(g, a, b, &y, &cfg));
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_weights_every_active_pixel_equally() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = Tensor::from_fn(&[1, 1, 4, 4], |_| rng.random_range(0.0..3.0));
        let y = ChangeMask::from_bools(&[1, 1, 4, 4], (0..16).map(|i| i % 3 == 0)).unwrap();
        let margin = 2.0;
        let mut g = Graph::new();
        let dv = g.param(d.clone());
        let l = contrastive_loss_from_distance(&mut g, dv, &y, margin).unwrap();
        g.backward(l).unwrap();
        let n1 = y.count_changed() as f64;
        let n0 = 16.0 - n1;
        for ((gr, &dist), changed) in g.grad(dv).unwrap().iter().zip(d.data()).zip(y.bits()) {
            let want = match (changed, dist < margin) {
                (false, _) => 1.0 / n0,
                (true, true) => -1.0 / n1,
                (true, false) => 0.0,
            };
            assert!((gr - want).abs() < 1e-15);
        }
    }

    #[test]
    fn cosine_distance_examples() {
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0], 1.0),
            (&[1.0, 0.0, 0.0], &[0.0, 0.0, 5.0], 0.0),
            (&[0.3, -1.2, 2.0], &[-0.3, 1.2, -2.0], -1.0),
        ];
        for (a, b, want) in cases {
            let mut g = Graph::<f64>::new();
            let (x, y) = (g.constant(vec_pixel(a)), g.constant(vec_pixel(b)));
            let d = cosine_distance(&mut g, x, y).unwrap();
            assert!((g.value(d).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hsac_scalar_examples() {
        let f = vec_pixel(&[0.4, -0.2, 0.9]);
        let neg = vec_pixel(&[-0.4, 0.2, -0.9]);
        let easy = -(sigmoid(5.0)).ln();
        assert!((easy - 0.006715).abs() < 5e-7);
        let y0 = ChangeMask::zeros(&[1, 1, 1, 1]);
        let y1 = ChangeMask::from_bools(&[1, 1, 1, 1], [true]).unwrap();
        for oneline in [false, true] {
            let run = |a: &Tensor<f64>, b: &Tensor<f64>, y: &ChangeMask| {
                eval2(a, b, |g, x, z| {
                    if oneline {
                        hsac_loss_oneline(g, x, z, y, 0.2)
                    } else {
                        hsac_loss(g, x, z, y, 0.2)
                    }
                })
            };
            assert!((run(&f, &f, &y0) - easy).abs() < 1e-12);
            assert!((run(&f, &neg, &y1) - easy).abs() < 1e-12);
            let a = vec_pixel(&[1.0, 0.0, 0.0]);
            let b = vec_pixel(&[0.0, 1.0, 0.0]);
            assert!((run(&a, &b, &y0) - std::f64::consts::LN_2).abs() < 1e-12);
            assert!((run(&a, &b, &y1) - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn hsac_rejects_non_positive_tau() {
        let f = vec_pixel(&[1.0, 2.0]);
        let y = ChangeMask::zeros(&[1, 1, 1, 1]);
        for tau in [0.0, -0.2] {
            let mut g = Graph::<f64>::new();
            let (a, b) = (g.constant(f.clone()), g.constant(f.clone()));
            assert!(matches!(hsac_loss(&mut g, a, b, &y, tau), Err(Error::Parameter { .. })));
            assert!(matches!(hsac_loss_oneline(&mut g, a, b, &y, tau), Err(Error::Parameter { .. })));
        }
    }

    #[test]
    fn gradient_weight_examples() {
        assert!((hsac_gradient_weight(0.5, true, 0.2) - 0.924142).abs() < 5e-7);
        assert!((hsac_gradient_weight(-0.5, true, 0.2) - 0.075858).abs() < 5e-7);
        let ratio = hsac_gradient_weight(0.5, true, 0.2) / hsac_gradient_weight(-0.5, true, 0.2);
        assert!((ratio - 12.18).abs() < 0.005, "{ratio}");
        assert!((hsac_gradient_weight(1.0, false, 0.2) - 0.006693).abs() < 5e-7);
    }

    #[test]
    fn hsac_derivative_in_cosine_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for tau in [0.05, 0.2, 1.0] {
            let d = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
            let y = ChangeMask::from_bools(&[2, 1, 3, 3], (0..18).map(|_| rng.random_bool(0.4))).unwrap();
            let mut g = Graph::new();
            let dv = g.param(d.clone());
            let l = hsac_loss_from_cosine(&mut g, dv, &y, tau).unwrap();
            g.backward(l).unwrap();
            let n = 18.0;
            for ((gr, &c), yb) in g.grad(dv).unwrap().iter().zip(d.data()).zip(y.bits()) {
                let yv = if yb { 1.0 } else { 0.0 };
                let want = -(1.0 / n) * (1.0 - yv - sigmoid(c / tau)) / tau;
                assert!((gr - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn full_chain_gradients_match_finite_differences() {
        for trial in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(700 + trial);
            let (f1, f2, y) = random_case(&mut rng, 8, 2, 2);
            let euclid = LossConfig::default();
            let cos = LossConfig::with_distance(DistanceKind::Cosine);
            type L = Box<dyn Fn(&mut Graph<f64>, Var, Var) -> Result<Var>>;
            let (ya, yb, yc, yd) = (y.clone(), y.clone(), y.clone(), y.clone());
            let losses: Vec<(&str, L)> = vec![
                ("hsac", Box::new(move |g, a, b| hsac_loss(g, a, b, &ya, 0.2))),
                ("hsac_oneline", Box::new(move |g, a, b| hsac_loss_oneline(g, a, b, &yb, 0.2))),
                ("con_euclid", Box::new(move |g, a, b| contrastive_loss(g, a, b, &yc, &euclid))),
                ("con_cos", Box::new(move |g, a, b| contrastive_loss(g, a, b, &yd, &cos))),
            ];
            for (name, loss) in &losses {
                let e1 = finite_diff_check(
                    |g, x| {
                        let b = g.constant(f2.clone());
                        loss(g, x, b)
                    },
                    &f1,
                    1e-6,
                )
                .unwrap();
                let e2 = finite_diff_check(
                    |g, x| {
                        let a = g.constant(f1.clone());
                        loss(g, a, x)
                    },
                    &f2,
                    1e-6,
                )
                .unwrap();
                assert!(e1.max(e2) < 1e-6, "{name} trial {trial}: {e1:e} {e2:e}");
            }
        }
    }

    #[test]
    fn segmentation_losses() {
        let y = ChangeMask::from_bools(&[1, 1, 2, 2], [true, false, true, false]).unwrap();
        let eval = |logits: &[f64], y: &ChangeMask, dice: bool| {
            let mut g = Graph::<f64>::new();
            let l = g.constant(Tensor::new(vec![1, 1, 2, 2], logits.to_vec()).unwrap());
            let v = if dice { dice_loss(&mut g, l, y) } else { cross_entropy_loss(&mut g, l, y) }.unwrap();
            g.scalar_value(v).unwrap()
        };
        assert!((eval(&[0.0; 4], &y, false) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(eval(&[50.0, -50.0, 50.0, -50.0], &y, false) < 1e-20);

        let logits = [0.7, -0.3, -1.5, 2.2];
        let want = -logits
            .iter()
            .zip([1.0, 0.0, 1.0, 0.0])
            .map(|(&x, t)| t * sigmoid(x).ln() + (1.0 - t) * (1.0 - sigmoid(x)).ln())
            .sum::<f64>()
            / 4.0;
        assert!((eval(&logits, &y, false) - want).abs() < 1e-14);

        let ones = ChangeMask::from_bools(&[1, 1, 2, 2], [true; 4]).unwrap();
        assert!(eval(&[50.0; 4], &ones, true).abs() < 1e-15);
        let zeros = ChangeMask::zeros(&[1, 1, 2, 2]);
        assert!(eval(&[-50.0; 4], &zeros, true).abs() < 1e-15);
        // p = 0.5 everywhere, two of four pixels changed: 1 - (2·1 + 1)/(2 + 2 + 1) = 0.4
        assert!((eval(&[0.0; 4], &y, true) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn segmentation_losses_reject_shape_mismatch() {
        let y = ChangeMask::zeros(&[1, 1, 2, 2]);
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(cross_entropy_loss(&mut g, l, &y), Err(Error::Dimension { .. })));
        assert!(matches!(dice_loss(&mut g, l, &y), Err(Error::Dimension { .. })));
    }

    #[test]
    fn total_loss_weighting() {
        let mut g = Graph::<f64>::new();
        let (a, b, c) = (
            g.constant(Tensor::scalar(0.5)),
            g.constant(Tensor::scalar(0.25)),
            g.constant(Tensor::scalar(2.0)),
        );
        let cfg = LossConfig::default();
        let t = total_loss(&mut g, a, b, c, &cfg).unwrap();
        assert_eq!(g.scalar_value(t).unwrap(), 2.75);
        let seg_only = LossConfig { metric_weight: 0.0, ..cfg.clone() };
        let t = total_loss(&mut g, a, b, c, &seg_only).unwrap();
        assert_eq!(g.scalar_value(t).unwrap(), 2.25);
        let metric_only = LossConfig { seg_weight: 0.0, ..cfg };
        let t = total_loss(&mut g, a, b, c, &metric_only).unwrap();
        assert_eq!(g.scalar_value(t).unwrap(), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { margin: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { seg_weight: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn oneline_form_agrees_with_expanded_form(seed in any::<u64>(), tau in 0.01f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f1, f2, y) = random_case(&mut rng, 6, 3, 2);
            let a = eval2(&f1, &f2, |g, x, z| hsac_loss(g, x, z, &y, tau));
            let b = eval2(&f1, &f2, |g, x, z| hsac_loss_oneline(g, x, z, &y, tau));
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }

        #[test]
        fn cosine_equals_half_squared_chord(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f1, f2, _) = random_case(&mut rng, 5, 2, 3);
            let mut g = Graph::<f64>::new();
            let (a, b) = (g.constant(f1), g.constant(f2));
            let d = cosine_distance(&mut g, a, b).unwrap();
            let u1 = g.l2_normalize(a, NORM_EPS).unwrap();
            let u2 = g.l2_normalize(b, NORM_EPS).unwrap();
            let diff = g.sub(u1, u2).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let chord = g.sum_channels(sq).unwrap();
            for (&c, &q) in g.value(d).data().iter().zip(g.value(chord).data()) {
                prop_assert!((c - (1.0 - 0.5 * q)).abs() < 1e-10);
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&c));
            }
        }

        #[test]
        fn gradient_weight_is_monotone(tau in 0.01f64..100.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(hsac_gradient_weight(lo, true, tau) <= hsac_gradient_weight(hi, true, tau));
            prop_assert!(hsac_gradient_weight(lo, false, tau) >= hsac_gradient_weight(hi, false, tau));
        }

        #[test]
        fn losses_are_non_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (f1, f2, y) = random_case(&mut rng, 4, 2, 2);
            let cfg = LossConfig::default();
            prop_assert!(eval2(&f1, &f2, |g, a, b| hsac_loss(g, a, b, &y, 0.2)) >= 0.0);
            prop_assert!(eval2(&f1, &f2, |g, a, b| contrastive_loss(g, a, b, &y, &cfg)) >= 0.0);
            let logits = f1.reshape(&[1, 1, 8, 4]).unwrap();
            let ym = ChangeMask::from_bools(&[1, 1, 8, 4], (0..32).map(|_| rng.random_bool(0.5))).unwrap();
            let mut g = Graph::<f64>::new();
            let l = g.constant(logits);
            let ce = cross_entropy_loss(&mut g, l, &ym).unwrap();
            let dice = dice_loss(&mut g, l, &ym).unwrap();
            prop_assert!(g.scalar_value(ce).unwrap() >= 0.0);
            prop_assert!(g.scalar_value(dice).unwrap() >= 0.0);
        }
    }
}
