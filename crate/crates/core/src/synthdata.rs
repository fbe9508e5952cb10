//! Synthetic bi-temporal scenes with exact change masks, dataset
//! persistence, and a loader for user-supplied PNG triplets.
//!
//! A scene is a smooth background with non-overlapping rectangles. The
//! second epoch adds or removes objects (the only real changes) and then
//! suffers a global gain/bias shift, a small translation and sensor noise,
//! none of which are labelled.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ChangeMask;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range of the rectangles, in pixels.
    pub min_side: usize,
    pub max_side: usize,
    pub p_change: f64,
    pub gain_range: (f64, f64),
    pub bias_range: (f64, f64),
    /// Misregistration magnitude is drawn uniformly from `0..=max_shift_px`.
    pub max_shift_px: usize,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_objects: 4,
            max_objects: 10,
            min_side: 5,
            max_side: 14,
            p_change: 0.3,
            gain_range: (0.8, 1.2),
            bias_range: (-0.1, 0.1),
            max_shift_px: 2,
            noise_sigma: 0.02,
        }
    }
}

impl SceneConfig {
    /// Visual differences only: no object is ever added or removed.
    pub fn pseudo_only(mut self) -> Self {
        self.p_change = 0.0;
        self
    }

    /// Neither changes nor pseudo-changes.
    pub fn static_scene(mut self) -> Self {
        self.p_change = 0.0;
        self.gain_range = (1.0, 1.0);
        self.bias_range = (0.0, 0.0);
        self.max_shift_px = 0;
        self.noise_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.size < 8 {
            return bad(format!("scene size {} is too small", self.size));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side + 2 > self.size {
            return bad(format!(
                "object sides {}..={} do not fit a {} scene",
                self.min_side, self.max_side, self.size
            ));
        }
        if !(0.0..=1.0).contains(&self.p_change) {
            return bad(format!("p_change {} outside [0, 1]", self.p_change));
        }
        let (g0, g1) = self.gain_range;
        let (b0, b1) = self.bias_range;
        if !(g0 > 0.0 && g0 <= g1 && b0 <= b1 && b0.is_finite() && b1.is_finite() && g1.is_finite()) {
            return bad("gain/bias ranges must be ordered and finite, gain > 0".into());
        }
        if self.max_shift_px * 4 >= self.size {
            return bad(format!("shift {} too large for the scene", self.max_shift_px));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

/// Parameters of the unlabelled second-epoch distortion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoChange {
    pub gain: f64,
    pub bias: f64,
    pub shift_x: i32,
    pub shift_y: i32,
    pub noise_sigma: f64,
}

impl PseudoChange {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            ..Self::default()
        }
    }

    pub fn shift_px(&self) -> u32 {
        self.shift_x.unsigned_abs().max(self.shift_y.unsigned_abs())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Generator seed, absent for loaded image pairs.
    pub seed: Option<u64>,
    pub pseudo: PseudoChange,
    pub added: usize,
    pub removed: usize,
}

/// Axis-aligned object footprint, half-open pixel ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl Rect {
    fn overlaps_padded(&self, o: &Rect) -> bool {
        self.y0 <= o.y1 && o.y0 <= self.y1 && self.x0 <= o.x1 && o.x0 <= self.x1
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChangeSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub img_t1: Tensor<f32>,
    pub img_t2: Tensor<f32>,
    /// `[1,H,W]`.
    pub mask: ChangeMask,
    pub meta: SampleMeta,
}

impl ChangeSample {
    pub fn new(img_t1: Tensor<f32>, img_t2: Tensor<f32>, mask: ChangeMask, meta: SampleMeta) -> Result<Self> {
        let s = img_t1.shape();
        if s.len() != 3 || s[0] != 3 || img_t2.shape() != s || mask.shape() != [1, s[1], s[2]] {
            return Err(Error::dim(
                "sample",
                format!(
                    "images {:?}/{:?} and mask {:?} do not form a [3,H,W]/[1,H,W] sample",
                    s,
                    img_t2.shape(),
                    mask.shape()
                ),
            ));
        }
        Ok(Self {
            img_t1,
            img_t2,
            mask,
            meta,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.img_t1.shape()[1], self.img_t1.shape()[2])
    }

    /// Rotates by `quarter_turns × 90°` counter-clockwise, after an
    /// optional horizontal flip, applied identically to all three maps.
    pub fn transformed(&self, quarter_turns: u8, hflip: bool) -> Self {
        let f = |t: &Tensor<f32>| transform_planes(t, quarter_turns, hflip);
        Self {
            img_t1: f(&self.img_t1),
            img_t2: f(&self.img_t2),
            mask: ChangeMask::new(f(self.mask.tensor())).expect("permutation keeps mask binary"),
            meta: self.meta.clone(),
        }
    }
}

/// Pixel permutation on `[C,H,W]`; square planes are required for odd
/// quarter turns.
fn transform_planes(t: &Tensor<f32>, quarter_turns: u8, hflip: bool) -> Tensor<f32> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let k = quarter_turns % 4;
    assert!(k.is_multiple_of(2) || h == w, "odd rotations need square planes");
    let src = t.data();
    let mut out = vec![0f32; src.len()];
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let xf = if hflip { w - 1 - x } else { x };
                let (ny, nx) = match k {
                    0 => (y, xf),
                    1 => (w - 1 - xf, y),
                    2 => (h - 1 - y, w - 1 - xf),
                    _ => (xf, h - 1 - y),
                };
                dst[ny * w + nx] = plane[y * w + x];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
}

/// `clamp(gain · translate(img) + bias + noise)`, translation with edge
/// replication. `img` is `[C,H,W]`.
pub fn inject_pseudo_change(img: &Tensor<f32>, p: &PseudoChange, seed: u64) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::dim("inject_pseudo_change", format!("expected [C,H,W], got {s:?}")));
    }
    if !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite() && p.gain.is_finite() && p.bias.is_finite()) {
        return Err(Error::param("inject_pseudo_change", format!("{p:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, p.noise_sigma).expect("sigma checked");
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for ci in 0..c {
        for y in 0..h {
            let sy = (y as i64 - p.shift_y as i64).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 - p.shift_x as i64).clamp(0, w as i64 - 1) as usize;
                let mut v = p.gain * src[(ci * h + sy) * w + sx] as f64 + p.bias;
                if p.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

struct Object {
    rect: Rect,
    albedo: [f64; 3],
}

fn sample_object(rng: &mut ChaCha8Rng, cfg: &SceneConfig, placed: &[Rect]) -> Option<Object> {
    for _ in 0..50 {
        let hh = rng.random_range(cfg.min_side..=cfg.max_side);
        let ww = rng.random_range(cfg.min_side..=cfg.max_side);
        let y0 = rng.random_range(1..cfg.size - hh);
        let x0 = rng.random_range(1..cfg.size - ww);
        let rect = Rect {
            y0,
            x0,
            y1: y0 + hh,
            x1: x0 + ww,
        };
        if placed.iter().any(|r| r.overlaps_padded(&rect)) {
            continue;
        }
        // Objects are either dark or bright so they stand out from the
        // mid-grey background.
        let bright = rng.random_bool(0.5);
        let base = if bright {
            rng.random_range(0.7..0.9)
        } else {
            rng.random_range(0.05..0.2)
        };
        let albedo = [0; 3].map(|_: i32| (base + rng.random_range(-0.1..0.1f64)).clamp(0.0, 1.0));
        return Some(Object { rect, albedo });
    }
    None
}

/// Bilinear interpolation of a coarse random grid per channel.
fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    const GRID: usize = 5;
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        let ctrl: Vec<f64> = (0..GRID * GRID).map(|_| rng.random_range(0.3..0.55)).collect();
        for y in 0..size {
            let fy = y as f64 / (size - 1) as f64 * (GRID - 1) as f64;
            let (iy, ty) = ((fy as usize).min(GRID - 2), fy - (fy as usize).min(GRID - 2) as f64);
            for x in 0..size {
                let fx = x as f64 / (size - 1) as f64 * (GRID - 1) as f64;
                let (ix, tx) = ((fx as usize).min(GRID - 2), fx - (fx as usize).min(GRID - 2) as f64);
                let g = |a: usize, b: usize| ctrl[a * GRID + b];
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                out[(c * size + y) * size + x] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    out
}

fn render(bg: &[f64], objects: &[&Object], size: usize) -> Tensor<f32> {
    let mut px = bg.to_vec();
    for o in objects {
        for c in 0..3 {
            for y in o.rect.y0..o.rect.y1 {
                for x in o.rect.x0..o.rect.x1 {
                    px[(c * size + y) * size + x] = o.albedo[c];
                }
            }
        }
    }
    Tensor::new(vec![3, size, size], px.into_iter().map(|v| v as f32).collect()).expect("finite")
}

/// A scene plus the footprints of the objects that changed.
pub fn generate_scene_with_footprints(seed: u64, cfg: &SceneConfig) -> Result<(ChangeSample, Vec<Rect>)> {
    cfg.validate()?;
    let size = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, size);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<Object> = Vec::with_capacity(n);
    for _ in 0..n {
        let rects: Vec<Rect> = objects.iter().map(|o| o.rect).collect();
        if let Some(o) = sample_object(&mut rng, cfg, &rects) {
            objects.push(o);
        }
    }

    let mut in_t1 = vec![true; objects.len()];
    let mut in_t2 = vec![true; objects.len()];
    let (mut added, mut removed) = (0, 0);
    let mut changed = Vec::new();
    for i in 0..objects.len() {
        if !rng.random_bool(cfg.p_change) {
            continue;
        }
        if rng.random_bool(0.5) {
            in_t2[i] = false;
            removed += 1;
            changed.push(objects[i].rect);
        } else {
            // Replace the slot with a new object visible only at T2.
            in_t1[i] = false;
            let rects: Vec<Rect> = objects
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| o.rect)
                .collect();
            match sample_object(&mut rng, cfg, &rects) {
                Some(o) => {
                    objects[i] = o;
                    added += 1;
                    changed.push(objects[i].rect);
                }
                None => in_t1[i] = true,
            }
        }
    }

    let pick = |flags: &[bool]| -> Vec<&Object> {
        objects.iter().zip(flags).filter(|(_, &f)| f).map(|(o, _)| o).collect()
    };
    let img_t1 = render(&bg, &pick(&in_t1), size);
    let clean_t2 = render(&bg, &pick(&in_t2), size);

    let shift = rng.random_range(0..=cfg.max_shift_px) as i32;
    let (shift_x, shift_y) = match rng.random_range(0..4) {
        0 => (shift, 0),
        1 => (-shift, 0),
        2 => (0, shift),
        _ => (0, -shift),
    };
    let pseudo = PseudoChange {
        gain: rng.random_range(cfg.gain_range.0..=cfg.gain_range.1),
        bias: rng.random_range(cfg.bias_range.0..=cfg.bias_range.1),
        shift_x,
        shift_y,
        noise_sigma: cfg.noise_sigma,
    };
    let img_t2 = inject_pseudo_change(&clean_t2, &pseudo, rng.random())?;

    let mask = ChangeMask::from_bools(
        &[1, size, size],
        (0..size * size).map(|i| changed.iter().any(|r| r.contains(i / size, i % size))),
    )?;
    let meta = SampleMeta {
        seed: Some(seed),
        pseudo,
        added,
        removed,
    };
    Ok((ChangeSample::new(img_t1, img_t2, mask, meta)?, changed))
}

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<ChangeSample> {
    generate_scene_with_footprints(seed, cfg).map(|(s, _)| s)
}

/// Samples `base_seed + i` for `i in 0..n`.
pub fn generate_dataset(n: usize, base_seed: u64, cfg: &SceneConfig) -> Result<Vec<ChangeSample>> {
    (0..n as u64)
        .map(|i| generate_scene(base_seed.wrapping_add(i), cfg))
        .collect()
}

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

/// Provenance of a generated dataset, sufficient to regenerate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub base_seed: u64,
    pub config: SceneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub count: usize,
    pub size: usize,
    pub origin: Option<Origin>,
    pub seeds: Vec<Option<u64>>,
    pub samples: Vec<SampleMeta>,
}

pub fn sample_file_name(index: usize) -> String {
    format!("sample_{index:06}.dclt")
}

pub fn write_dataset(dir: &Path, samples: &[ChangeSample], origin: Option<Origin>) -> Result<DatasetManifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot write an empty dataset".into()))?;
    let (h, w) = first.size();
    if h != w || samples.iter().any(|s| s.size() != (h, w)) {
        return Err(Error::Contract("dataset samples must share one square size".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &s.img_t1).expect("in-memory write");
        write_tensor(&mut buf, &s.img_t2).expect("in-memory write");
        write_tensor(&mut buf, s.mask.tensor()).expect("in-memory write");
        let path = dir.join(sample_file_name(i));
        fs::write(&path, buf).map_err(|e| Error::io(path, e))?;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        count: samples.len(),
        size: h,
        origin,
        seeds: samples.iter().map(|s| s.meta.seed).collect(),
        samples: samples.iter().map(|s| s.meta.clone()).collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&path, json).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {}", m.format_version)));
    }
    if m.seeds.len() != m.count || m.samples.len() != m.count {
        return Err(Error::Format(format!(
            "manifest lists {} seeds and {} records for count {}",
            m.seeds.len(),
            m.samples.len(),
            m.count
        )));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ChangeSample>)> {
    let manifest = read_manifest(dir)?;
    let on_disk = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("sample_") && name.ends_with(".dclt")
        })
        .count();
    if on_disk > manifest.count {
        return Err(Error::Integrity {
            index: manifest.count,
            detail: format!("manifest count {} but {on_disk} sample files present", manifest.count),
        });
    }
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let integrity = |detail: String| Error::Integrity { index: i, detail };
        let path = dir.join(sample_file_name(i));
        let bytes = fs::read(&path).map_err(|e| integrity(format!("{}: {e}", path.display())))?;
        let mut r = &bytes[..];
        let mut next = |what: &str| {
            read_tensor::<f32, _>(&mut r).map_err(|e| integrity(format!("{}: {what}: {e}", path.display())))
        };
        let (t1, t2, mask) = (next("t1")?, next("t2")?, next("mask")?);
        if !r.is_empty() {
            return Err(integrity(format!("{}: {} trailing bytes", path.display(), r.len())));
        }
        let mask = ChangeMask::new(mask).map_err(|e| integrity(e.to_string()))?;
        let sample = ChangeSample::new(t1, t2, mask, manifest.samples[i].clone()).map_err(|e| integrity(e.to_string()))?;
        if sample.size() != (manifest.size, manifest.size) {
            return Err(integrity(format!("size {:?} differs from manifest {}", sample.size(), manifest.size)));
        }
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Rebuilds a generated dataset from its manifest alone.
pub fn regenerate(manifest: &DatasetManifest) -> Result<Vec<ChangeSample>> {
    let origin = manifest
        .origin
        .as_ref()
        .ok_or_else(|| Error::Contract("dataset was not generated; nothing to regenerate".into()))?;
    generate_dataset(manifest.count, origin.base_seed, &origin.config)
}

fn load_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// Reads `<id>_A.png`, `<id>_B.png`, `<id>_label.png` triplets, sorted by id.
pub fn load_image_pairs(dir: &Path) -> Result<Vec<ChangeSample>> {
    const PARTS: [&str; 3] = ["_A.png", "_B.png", "_label.png"];
    let mut ids: BTreeMap<String, [Option<PathBuf>; 3]> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, suffix) in PARTS.iter().enumerate() {
            if let Some(id) = name.strip_suffix(suffix) {
                ids.entry(id.to_string()).or_default()[k] = Some(path.clone());
            }
        }
    }
    let incomplete: Vec<String> = ids
        .iter()
        .filter(|(_, p)| p.iter().any(Option::is_none))
        .map(|(id, p)| {
            let missing: Vec<&str> = PARTS.iter().zip(p).filter(|(_, x)| x.is_none()).map(|(s, _)| *s).collect();
            format!("{id} (missing {})", missing.join(", "))
        })
        .collect();
    if !incomplete.is_empty() {
        return Err(Error::Format(format!(
            "incomplete image triplets in {}: {}",
            dir.display(),
            incomplete.join("; ")
        )));
    }
    if ids.is_empty() {
        return Err(Error::Format(format!("no image triplets found in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(ids.len());
    for (id, paths) in ids {
        let [a, b, l] = paths.map(|p| p.expect("completeness checked"));
        let (ia, ib, il) = (load_png(&a)?.to_rgb8(), load_png(&b)?.to_rgb8(), load_png(&l)?.to_luma8());
        let dims = ia.dimensions();
        if ib.dimensions() != dims || il.dimensions() != dims {
            return Err(Error::Image {
                path: dir.join(&id),
                detail: format!(
                    "triplet `{id}` sizes differ: A {:?}, B {:?}, label {:?}",
                    dims,
                    ib.dimensions(),
                    il.dimensions()
                ),
            });
        }
        let (w, h) = (dims.0 as usize, dims.1 as usize);
        let planar = |img: &image::RgbImage| {
            let mut v = vec![0f32; 3 * h * w];
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    v[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], v)
        };
        let mask = ChangeMask::from_bools(&[1, h, w], il.pixels().map(|p| p[0] >= 128))?;
        out.push(ChangeSample::new(planar(&ia)?, planar(&ib)?, mask, SampleMeta::default())?);
    }
    Ok(out)
}
