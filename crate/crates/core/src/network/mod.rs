//! Siamese pyramid encoder, metric projection head and metric-induced
//! decoder.
//!
//! Both temporal images run through one encoder parameter set. The five
//! pyramid levels are upsampled to the finest level, concatenated and
//! projected onto the unit hypersphere. The decoder fuses the two pyramids
//! level by level, propagates coarse context upward, and (in the
//! metric-induced variant) conditions its finest branch on both embeddings
//! and their cosine map.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ChangeMask, DistanceKind, DistanceMap, NORM_EPS};
use crate::tensor::{Graph, Real, Tensor, UpsampleMode, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

pub const LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub embed_dim: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![8, 16, 24, 32, 48],
            embed_dim: 16,
            input_size: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != LEVELS {
            return Err(Error::Config(format!(
                "encoder needs {LEVELS} stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let stride = 1 << LEVELS;
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input size {} is not divisible by {stride}",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Pure metric model: no segmentation branch.
    None,
    /// Cross-scale decoder on pyramid features only.
    Simple,
    /// Cross-scale decoder whose finest branch also sees the embeddings
    /// and their cosine map.
    #[serde(alias = "metric_induced")]
    Metric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderKind,
    /// Channel width of every fused decoder branch and of the 1×1 heads.
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderKind::Metric,
            decoder_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_width == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }

    /// Name → shape of every trainable tensor, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let enc = &self.encoder;
        let mut out = Vec::new();
        let mut conv = |name: String, k: usize, c: usize, ks: usize| {
            out.push((format!("{name}.weight"), vec![k, c, ks, ks]));
            out.push((format!("{name}.bias"), vec![k]));
        };
        let mut prev = enc.in_channels;
        for (i, &ch) in enc.stage_channels.iter().enumerate() {
            conv(format!("enc.s{}.conv1", i + 1), ch, prev, 3);
            conv(format!("enc.s{}.conv2", i + 1), ch, ch, 3);
            prev = ch;
        }
        let pyramid_width: usize = enc.stage_channels.iter().sum();
        conv("proj".into(), enc.embed_dim, pyramid_width, 3);
        if self.decoder != DecoderKind::None {
            let w = self.decoder_width;
            for (i, &ch) in enc.stage_channels.iter().enumerate() {
                conv(format!("dec.fuse{}", i + 1), w, 2 * ch, 3);
            }
            for i in 1..LEVELS {
                let extra = if i == 1 && self.decoder == DecoderKind::Metric {
                    2 * enc.embed_dim + 1
                } else {
                    0
                };
                conv(format!("dec.cross{i}"), w, w + extra, 3);
            }
            for i in 1..=LEVELS {
                conv(format!("dec.head{i}"), w, w, 1);
            }
            conv("dec.cls".into(), 1, LEVELS * w, 1);
        }
        out
    }

    /// Recovers the architecture from checkpoint parameter shapes.
    pub fn infer<T: Real>(params: &ModelParams<T>, input_size: usize) -> Result<Self> {
        let shape = |name: &str| {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let mut stage_channels = Vec::with_capacity(LEVELS);
        for i in 1..=LEVELS {
            stage_channels.push(shape(&format!("enc.s{i}.conv1.weight"))?[0]);
        }
        let in_channels = shape("enc.s1.conv1.weight")?[1];
        let embed_dim = shape("proj.weight")?[0];
        let (decoder, decoder_width) = match params.get("dec.cls.weight") {
            None => (DecoderKind::None, 16),
            Some(_) => {
                let cross1 = shape("dec.cross1.weight")?;
                let kind = if cross1[1] > cross1[0] {
                    DecoderKind::Metric
                } else {
                    DecoderKind::Simple
                };
                (kind, cross1[0])
            }
        };
        let cfg = Self {
            encoder: EncoderConfig {
                in_channels,
                stage_channels,
                embed_dim,
                input_size,
            },
            decoder,
            decoder_width,
        };
        cfg.validate()?;
        let expected = cfg.param_shapes();
        if expected.len() != params.len()
            || expected
                .iter()
                .any(|(n, s)| params.get(n).map(|t| t.shape()) != Some(&s[..]))
        {
            return Err(Error::Format(
                "checkpoint tensors do not form a consistent model".into(),
            ));
        }
        Ok(cfg)
    }
}

/// Every trainable tensor of the model, keyed by a stable dotted name.
/// The encoder appears once: both temporal branches read the same entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let gain = if name == "dec.cls.weight" { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng)))
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Replaces a tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        *t = Tensor::new(t.shape().to_vec(), data)?;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.tensors.get_mut(name).map(Tensor::data_mut)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a graph leaf, each exactly once.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let t = v.clone().with_requires_grad(trainable);
                (k.clone(), g.leaf(t))
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters recorded on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Routes parameter `name` to `var` instead of its recorded leaf.
    pub fn with_override(mut self, name: &str, var: Var) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }

    fn conv<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = self.var(&format!("{name}.bias"))?;
        g.conv2d(x, w, Some(b), stride, pad)
    }

    fn conv_relu<T: Real>(&self, g: &mut Graph<T>, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(g, name, x, stride, pad)?;
        g.relu(y)
    }
}

/// Five hierarchical feature maps; level `i` has stride `2^i`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// Projection head output: the raw features and their unit-norm version.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub raw: Var,
    pub unit: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub pyr1: FeaturePyramid,
    pub pyr2: FeaturePyramid,
    pub proj1: Projection,
    pub proj2: Projection,
    /// Cosine similarity of the embeddings, `[N,1,H/2,W/2]`.
    pub d_cos: Var,
    pub logits: Option<Var>,
}

pub fn siamese_encode<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, image: Var) -> Result<FeaturePyramid> {
    let (_, c, h, w) = g.value(image).dims4()?;
    let enc = &cfg.encoder;
    if c != enc.in_channels {
        return Err(Error::dim(
            "siamese_encode",
            format!("image has {c} channels, encoder expects {}", enc.in_channels),
        ));
    }
    if h != enc.input_size || w != enc.input_size {
        return Err(Error::Config(format!(
            "image is {h}x{w} but the encoder is configured for {0}x{0}",
            enc.input_size
        )));
    }
    let mut x = image;
    let mut levels = [image; LEVELS];
    for (i, level) in levels.iter_mut().enumerate() {
        x = p.conv_relu(g, &format!("enc.s{}.conv1", i + 1), x, 2, 1)?;
        x = p.conv_relu(g, &format!("enc.s{}.conv2", i + 1), x, 1, 1)?;
        *level = x;
    }
    Ok(FeaturePyramid { levels })
}

fn upsample_to_finest<T: Real>(g: &mut Graph<T>, level: usize, x: Var, mode: UpsampleMode) -> Result<Var> {
    if level == 0 {
        Ok(x)
    } else {
        g.upsample(x, 1 << level, mode)
    }
}

pub fn metric_project<T: Real>(g: &mut Graph<T>, p: &BoundParams, pyr: &FeaturePyramid) -> Result<Projection> {
    let mut ups = Vec::with_capacity(LEVELS);
    for (i, &f) in pyr.levels.iter().enumerate() {
        ups.push(upsample_to_finest(g, i, f, UpsampleMode::Nearest)?);
    }
    let cat = g.concat_channels(&ups)?;
    let raw = p.conv(g, "proj", cat, 1, 1)?;
    let unit = g.l2_normalize(raw, NORM_EPS)?;
    Ok(Projection { raw, unit })
}

/// Change logits at input resolution, `[N,1,H,W]`.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    pyr1: &FeaturePyramid,
    pyr2: &FeaturePyramid,
    u1: Var,
    u2: Var,
    d_cos: Var,
) -> Result<Var> {
    if cfg.decoder == DecoderKind::None {
        return Err(Error::Contract("decode called on a model without decoder".into()));
    }
    let mut fused = Vec::with_capacity(LEVELS);
    for i in 0..LEVELS {
        let cat = g.concat_channels(&[pyr1.levels[i], pyr2.levels[i]])?;
        fused.push(p.conv_relu(g, &format!("dec.fuse{}", i + 1), cat, 1, 1)?);
    }
    let mut branches = [fused[LEVELS - 1]; LEVELS];
    for i in (0..LEVELS - 1).rev() {
        let up = g.upsample(branches[i + 1], 2, UpsampleMode::Nearest)?;
        let mut merged = g.add(fused[i], up)?;
        if i == 0 && cfg.decoder == DecoderKind::Metric {
            merged = g.concat_channels(&[merged, u1, u2, d_cos])?;
        }
        branches[i] = p.conv_relu(g, &format!("dec.cross{}", i + 1), merged, 1, 1)?;
    }
    let mut heads = Vec::with_capacity(LEVELS);
    for (i, &b) in branches.iter().enumerate() {
        let h = p.conv_relu(g, &format!("dec.head{}", i + 1), b, 1, 0)?;
        heads.push(upsample_to_finest(g, i, h, UpsampleMode::Bilinear)?);
    }
    let cat = g.concat_channels(&heads)?;
    let logits = p.conv(g, "dec.cls", cat, 1, 0)?;
    g.upsample(logits, 2, UpsampleMode::Bilinear)
}

/// Full Siamese forward pass on a batch of image pairs.
pub fn forward_graph<T: Real>(g: &mut Graph<T>, p: &BoundParams, cfg: &ModelConfig, img1: Var, img2: Var) -> Result<ForwardVars> {
    if g.shape(img1) != g.shape(img2) {
        return Err(Error::dim(
            "forward",
            format!("image shapes {:?} and {:?} differ", g.shape(img1), g.shape(img2)),
        ));
    }
    let pyr1 = siamese_encode(g, p, cfg, img1)?;
    let pyr2 = siamese_encode(g, p, cfg, img2)?;
    let proj1 = metric_project(g, p, &pyr1)?;
    let proj2 = metric_project(g, p, &pyr2)?;
    let d_cos = g.dot_channels(proj1.unit, proj2.unit)?;
    let logits = match cfg.decoder {
        DecoderKind::None => None,
        _ => Some(decode(g, p, cfg, &pyr1, &pyr2, proj1.unit, proj2.unit, d_cos)?),
    };
    Ok(ForwardVars {
        pyr1,
        pyr2,
        proj1,
        proj2,
        d_cos,
        logits,
    })
}

/// Per-pixel unit-norm embeddings `[N,D,H/2,W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap<T: Real = f32>(Tensor<T>);

impl<T: Real> EmbeddingMap<T> {
    /// Wraps a tensor after checking every channel vector has unit norm.
    pub fn new(t: Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        let hw = h * w;
        for ni in 0..n {
            for p in 0..hw {
                let sq: f64 = (0..c).map(|ci| t.data()[(ni * c + ci) * hw + p].as_f64().powi(2)).sum();
                if (sq.sqrt() - 1.0).abs() > 1e-5 {
                    return Err(Error::Contract(format!(
                        "embedding norm {} at sample {ni} pixel {p}",
                        sq.sqrt()
                    )));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }
}

/// Inference results for a batch of pairs.
#[derive(Clone, Debug)]
pub struct Prediction<T: Real = f32> {
    pub u1: EmbeddingMap<T>,
    pub u2: EmbeddingMap<T>,
    /// Cosine similarity map at embedding resolution.
    pub d_cos: Tensor<T>,
    /// Euclidean distance of the unnormalized projections.
    pub euclidean: Tensor<T>,
    pub logits: Option<Tensor<T>>,
}

impl<T: Real> Prediction<T> {
    pub fn distance_map(&self, kind: DistanceKind) -> DistanceMap {
        let values = match kind {
            DistanceKind::Cosine => self.d_cos.cast(),
            DistanceKind::Euclidean => self.euclidean.cast(),
        };
        DistanceMap { kind, values }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Pyramid of a single image batch, as plain tensors.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(image.clone());
        let pyr = siamese_encode(&mut g, &p, &self.config, x)?;
        Ok(pyr.levels.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn forward(&self, img1: &Tensor<T>, img2: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let (a, b) = (g.constant(img1.clone()), g.constant(img2.clone()));
        let out = forward_graph(&mut g, &p, &self.config, a, b)?;
        let euclid = crate::losses::euclidean_distance(&mut g, out.proj1.raw, out.proj2.raw)?;
        Ok(Prediction {
            u1: EmbeddingMap::new(g.value(out.proj1.unit).clone())?,
            u2: EmbeddingMap::new(g.value(out.proj2.unit).clone())?,
            d_cos: g.value(out.d_cos).clone(),
            euclidean: g.value(euclid).clone(),
            logits: out.logits.map(|l| g.value(l).clone()),
        })
    }
}

/// Thresholds a distance map (`dissimilarity > d_thre` is changed) and
/// upsamples the result by nearest neighbour.
pub fn predict_from_distance(map: &DistanceMap, d_thre: f64, upsample: usize) -> Result<ChangeMask> {
    let (n, _, h, w) = map.values.dims4()?;
    if upsample == 0 {
        return Err(Error::param("predict_metric", "upsample factor must be >= 1"));
    }
    let dis: Vec<bool> = map.dissimilarity().map(|d| d > d_thre).collect();
    let (ho, wo) = (h * upsample, w * upsample);
    let bits = (0..n * ho * wo).map(|i| {
        let (ni, rem) = (i / (ho * wo), i % (ho * wo));
        let (y, x) = (rem / wo / upsample, rem % wo / upsample);
        dis[ni * h * w + y * w + x]
    });
    ChangeMask::from_bools(&[n, 1, ho, wo], bits)
}

/// Metric inference path: `1 - <u1,u2> > d_thre`, at input resolution.
pub fn predict_metric<T: Real>(u1: &EmbeddingMap<T>, u2: &EmbeddingMap<T>, d_thre: f64) -> Result<ChangeMask> {
    let mut g = Graph::<T>::new();
    let (a, b) = (g.constant(u1.0.clone()), g.constant(u2.0.clone()));
    let d = g.dot_channels(a, b)?;
    let map = DistanceMap {
        kind: DistanceKind::Cosine,
        values: g.value(d).cast(),
    };
    predict_from_distance(&map, d_thre, 2)
}

/// Segmentation inference path: changed where `σ(logit) > 0.5`.
pub fn predict_seg<T: Real>(logits: &Tensor<T>) -> Result<ChangeMask> {
    let (n, c, h, w) = logits.dims4()?;
    if c != 1 {
        return Err(Error::dim("predict_seg", format!("expected 1 logit channel, got {c}")));
    }
    ChangeMask::from_bools(&[n, 1, h, w], logits.data().iter().map(|&v| v > T::zero()))
}
