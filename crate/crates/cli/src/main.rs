use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use deepcl_core::evaluation::{
    self, ablation_cells, grid_for, metric_distance_kind, run_cell, run_inference, summarize, temperature_cells, threshold_sweep,
    CellResult, ReportFile, SweepCell, AGGREGATION, DEFAULT_TAUS,
};
use deepcl_core::gradcheck::{self, Scope};
use deepcl_core::losses::DistanceKind;
use deepcl_core::network::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use deepcl_core::synthdata::{self, ChangeSample, Origin, SceneConfig};
use deepcl_core::tensor::BackwardFault;
use deepcl_core::training::{self, save_log, split_validation, AblationFlags, TrainConfig};
use deepcl_core::Error;

const RUN_MANIFEST: &str = "run.json";

#[derive(Parser)]
#[command(name = "deepcl", version, about = "Change detection with hard sample-aware contrastive learning")]
struct Cli {
    /// JSON file with `scene` and `train` sections; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bi-temporal dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, env = "DEEPCL_SEED")]
        seed: Option<u64>,
        /// Only illumination/misregistration/noise; every mask is empty.
        #[arg(long)]
        pseudo_only: bool,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, value_enum)]
        decoder: Option<DecoderArg>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, env = "DEEPCL_SEED")]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// A distance threshold, or `auto` to sweep on a held-in split.
        #[arg(long, default_value = "auto")]
        thre: String,
        /// Distance for the metric path; defaults to the one the
        /// checkpoint was trained with, if its run manifest is present.
        #[arg(long, value_enum)]
        distance: Option<DistanceArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temperature or ablation sweep; completed cells are reused.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        /// Held-out dataset; without it every fifth sample is held out.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, env = "DEEPCL_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Hsac,
    Con,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderArg {
    Metric,
    Simple,
    None,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeArg {
    Seg,
    Metric,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Temperature,
    Ablation,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Losses,
    Network,
    All,
}

enum Failure {
    Usage(String),
    Runtime(String),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, Failure>;

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    scene: SceneConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
    tool_version: &'static str,
    started_unix: u64,
    duration_secs: f64,
}

struct Run {
    command: &'static str,
    started: Instant,
    started_unix: u64,
}

impl Run {
    fn begin(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    fn finish(&self, dir: &Path, config: serde_json::Value, seeds: Vec<u64>, artifacts: Vec<String>) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command,
            config,
            seeds,
            artifacts,
            tool_version: env!("CARGO_PKG_VERSION"),
            started_unix: self.started_unix,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        write_json(&dir.join(RUN_MANIFEST), &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configs serialize")
}

fn load_config(path: Option<&Path>) -> CliResult<ConfigFile> {
    let Some(path) = path else { return Ok(ConfigFile::default()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_fail(dir, e))
}

fn flags_for(loss: LossArg, decoder: DecoderArg) -> CliResult<AblationFlags> {
    let use_seg = !matches!(decoder, DecoderArg::None);
    let flags = AblationFlags {
        use_hsac: matches!(loss, LossArg::Hsac),
        use_con: matches!(loss, LossArg::Con),
        use_seg,
        use_metric_induction: matches!(decoder, DecoderArg::Metric),
    };
    flags.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(flags)
}

fn gen_data(cfg: ConfigFile, out: &Path, n: usize, seed: Option<u64>, pseudo_only: bool, size: Option<usize>) -> CliResult<()> {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let run = Run::begin("gen-data");
    let mut scene = cfg.scene;
    if let Some(s) = size {
        scene.size = s;
    }
    if pseudo_only {
        scene = scene.pseudo_only();
    }
    scene.validate()?;
    let seed = seed.unwrap_or(0);
    let samples = synthdata::generate_dataset(n, seed, &scene)?;
    let origin = Origin {
        base_seed: seed,
        config: scene.clone(),
    };
    synthdata::write_dataset(out, &samples, Some(origin))?;
    let changed: usize = samples.iter().map(|s| s.mask.count_changed()).sum();
    let pixels: usize = samples.iter().map(|s| s.mask.len()).sum();
    println!(
        "wrote {n} samples to {} ({:.2}% changed pixels)",
        out.display(),
        100.0 * changed as f64 / pixels as f64
    );
    run.finish(
        out,
        serde_json::json!({ "scene": to_value(&scene), "n": n, "pseudo_only": pseudo_only }),
        vec![seed],
        vec![synthdata::MANIFEST_FILE.into(), format!("sample_000000..{:06}.dclt", n - 1)],
    )
}

fn read_samples(dir: &Path) -> CliResult<Vec<ChangeSample>> {
    if dir.join(synthdata::MANIFEST_FILE).exists() {
        Ok(synthdata::read_dataset(dir)?.1)
    } else {
        Ok(synthdata::load_image_pairs(dir)?)
    }
}

fn dataset_size(samples: &[ChangeSample]) -> CliResult<usize> {
    let (h, w) = samples[0].size();
    if h != w || samples.iter().any(|s| s.size() != (h, w)) {
        return Err(Failure::Runtime("all samples must share one square size".into()));
    }
    Ok(h)
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    cfg: ConfigFile,
    data: &Path,
    out: &Path,
    loss: Option<LossArg>,
    decoder: Option<DecoderArg>,
    tau: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
) -> CliResult<()> {
    let run = Run::begin("train");
    let mut tc = cfg.train;
    match (loss, decoder) {
        (None, None) => {}
        (l, d) => {
            let l = l.unwrap_or(if tc.flags.use_con {
                LossArg::Con
            } else if tc.flags.use_hsac {
                LossArg::Hsac
            } else {
                LossArg::None
            });
            let d = d.unwrap_or(match tc.flags.decoder() {
                deepcl_core::network::DecoderKind::Metric => DecoderArg::Metric,
                deepcl_core::network::DecoderKind::Simple => DecoderArg::Simple,
                deepcl_core::network::DecoderKind::None => DecoderArg::None,
            });
            tc.flags = flags_for(l, d)?;
        }
    }
    if let Some(t) = tau {
        tc.loss.tau = t;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    if let Some(b) = batch_size {
        tc.batch_size = b;
    }
    if let Some(s) = seed {
        tc.seed = s;
    }
    tc.flags.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let samples = read_samples(data)?;
    tc.encoder.input_size = dataset_size(&samples)?;
    tc.validate()?;
    create_dir(out)?;
    let outcome = training::train_with_progress(&tc, &samples, |r| {
        let val = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "epoch {:>3} step {:>6} lr {:.2e} metric {:.4} ce {:.4} dice {:.4} val_f1_seg {} val_f1_metric {}",
            r.epoch,
            r.step,
            r.lr,
            r.loss_metric,
            r.loss_ce,
            r.loss_dice,
            val(r.val_f1_seg),
            val(r.val_f1_metric)
        );
    })?;
    save_checkpoint(&out.join("model.dclm"), &outcome.model.params)?;
    save_log(&out.join("train_log.csv"), &outcome.log)?;
    run.finish(
        out,
        serde_json::json!({ "train": to_value(&tc), "data": data.display().to_string() }),
        vec![tc.seed],
        vec!["model.dclm".into(), "train_log.csv".into()],
    )
}

/// Training config recorded next to a checkpoint, if any.
fn sibling_train_config(ckpt: &Path) -> Option<TrainConfig> {
    let manifest = ckpt.parent()?.join(RUN_MANIFEST);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).ok()?).ok()?;
    serde_json::from_value(v.get("config")?.get("train")?.clone()).ok()
}

fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    mode: ModeArg,
    thre: &str,
    distance: Option<DistanceArg>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let run = Run::begin("eval");
    let fixed = match thre {
        "auto" => None,
        t => Some(
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Failure::Usage(format!("--thre expects a number or `auto`, got `{t}`")))?,
        ),
    };
    let samples = read_samples(data)?;
    let size = dataset_size(&samples)?;
    let params = load_checkpoint::<f32>(ckpt)?;
    let model = Model {
        config: ModelConfig::infer(&params, size)?,
        params,
    };
    let trained = sibling_train_config(ckpt);
    let mode_name = match mode {
        ModeArg::Seg => "seg",
        ModeArg::Metric => "metric",
    };
    let out = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(format!("eval_{mode_name}")));
    create_dir(&out)?;

    let (report, d_thre, scored) = match mode {
        ModeArg::Seg => {
            let set = run_inference(&model, &samples, 16)?;
            let r = set
                .seg_report()?
                .ok_or_else(|| Failure::Usage("checkpoint has no segmentation decoder; use --mode metric".into()))?;
            (r, None, samples.len())
        }
        ModeArg::Metric => {
            let kind = match distance {
                Some(DistanceArg::Cosine) => DistanceKind::Cosine,
                Some(DistanceArg::Euclidean) => DistanceKind::Euclidean,
                None => trained
                    .as_ref()
                    .map(|t| metric_distance_kind(&t.flags, &t.loss))
                    .unwrap_or(DistanceKind::Cosine),
            };
            let loss = trained.as_ref().map(|t| t.loss.clone()).unwrap_or_default();
            match fixed {
                Some(t) => {
                    let set = run_inference(&model, &samples, 16)?;
                    (set.metric_report(kind, t)?, Some(t), samples.len())
                }
                None => {
                    let (held_in, held_out) = split_validation(&samples, true);
                    if held_out.is_empty() {
                        return Err(Failure::Usage("--thre auto needs at least 5 samples".into()));
                    }
                    let tune = run_inference(&model, held_in.iter().copied(), 16)?;
                    let sweep = threshold_sweep(&tune.distance_maps(kind), &tune.gt, &grid_for(kind, &loss))?;
                    let test = run_inference(&model, held_out.iter().copied(), 16)?;
                    (test.metric_report(kind, sweep.best_thre)?, Some(sweep.best_thre), held_out.len())
                }
            }
        }
    };
    let file = ReportFile {
        aggregation: AGGREGATION.into(),
        mode: mode_name.into(),
        d_thre,
        report,
    };
    write_json(&out.join("report.json"), &file)?;
    let csv_path = out.join("report.csv");
    let f = fs::File::create(&csv_path).map_err(|e| io_fail(&csv_path, e))?;
    evaluation::write_report_csv(f, &file)?;
    println!(
        "{mode_name}: iou {:.4} precision {:.4} recall {:.4} f1 {:.4} over {scored} samples{}",
        report.iou,
        report.precision,
        report.recall,
        report.f1,
        d_thre.map(|t| format!(" (d_thre {t})")).unwrap_or_default()
    );
    run.finish(
        &out,
        serde_json::json!({ "ckpt": ckpt.display().to_string(), "data": data.display().to_string(), "mode": mode_name, "thre": thre }),
        vec![],
        vec!["report.json".into(), "report.csv".into()],
    )
}

#[allow(clippy::too_many_arguments)]
fn sweep_cmd(
    cfg: ConfigFile,
    kind: SweepKind,
    data: &Path,
    out: &Path,
    seeds: Vec<u64>,
    taus: Option<Vec<f64>>,
    test: Option<PathBuf>,
    epochs: Option<usize>,
    jobs: usize,
) -> CliResult<()> {
    if seeds.is_empty() {
        return Err(Failure::Usage("--seeds needs at least one seed".into()));
    }
    if jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let run = Run::begin("sweep");
    let mut base = cfg.train;
    if let Some(e) = epochs {
        base.epochs = e;
    }
    let samples = read_samples(data)?;
    base.encoder.input_size = dataset_size(&samples)?;
    let (train_set, test_set): (Vec<ChangeSample>, Vec<ChangeSample>) = match &test {
        Some(dir) => (samples, read_samples(dir)?),
        None => {
            let (a, b) = split_validation(&samples, true);
            (a.into_iter().cloned().collect(), b.into_iter().cloned().collect())
        }
    };
    if test_set.is_empty() {
        return Err(Failure::Usage("no held-out samples; pass --test or use at least 5 samples".into()));
    }
    let taus = taus.unwrap_or_else(|| DEFAULT_TAUS.to_vec());
    let cells = match kind {
        SweepKind::Temperature => temperature_cells(&base, &taus, &seeds),
        SweepKind::Ablation => ablation_cells(&base, &seeds),
    };
    for c in &cells {
        c.config.validate()?;
    }
    let cell_dir = out.join("cells");
    create_dir(&cell_dir)?;

    #[derive(Serialize, Deserialize)]
    struct StoredCell {
        cell: SweepCell,
        result: CellResult,
    }
    let stored = |c: &SweepCell| -> Option<CellResult> {
        let text = fs::read_to_string(cell_dir.join(format!("{}.json", c.key()))).ok()?;
        let s: StoredCell = serde_json::from_str(&text).ok()?;
        (s.cell == *c && s.result.error.is_none()).then_some(s.result)
    };
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(cells.iter().map(stored).collect());
    let todo: Vec<usize> = results
        .lock()
        .expect("unpoisoned")
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(i, _)| i)
        .collect();
    println!("{} cells, {} already complete", cells.len(), cells.len() - todo.len());
    let next = AtomicUsize::new(0);
    let write_error: Mutex<Option<Failure>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.min(todo.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(k) else { break };
                let cell = &cells[i];
                let result = run_cell(cell, &train_set, &test_set);
                match (&result.report, &result.error) {
                    (Some(r), _) => println!("{}: f1 {:.4} iou {:.4}", cell.key(), r.f1, r.iou),
                    (None, e) => println!("{}: failed: {}", cell.key(), e.as_deref().unwrap_or("unknown")),
                }
                let stored = StoredCell {
                    cell: cell.clone(),
                    result: result.clone(),
                };
                let saved = write_json(&cell_dir.join(format!("{}.json", cell.key())), &stored)
                    .and_then(|_| save_log(&cell_dir.join(format!("{}_log.csv", cell.key())), &result.log).map_err(Failure::from));
                if let Err(e) = saved {
                    *write_error.lock().expect("unpoisoned") = Some(e);
                }
                results.lock().expect("unpoisoned")[i] = Some(result);
            });
        }
    });
    if let Some(e) = write_error.into_inner().expect("unpoisoned") {
        return Err(e);
    }
    let results: Vec<CellResult> = results.into_inner().expect("unpoisoned").into_iter().flatten().collect();
    let summary = summarize(&results);
    write_json(&out.join("summary.json"), &serde_json::json!({ "aggregation": AGGREGATION, "rows": summary }))?;
    let csv_path = out.join("summary.csv");
    let f = fs::File::create(&csv_path).map_err(|e| io_fail(&csv_path, e))?;
    evaluation::write_summary_csv(f, &summary)?;
    for row in &summary {
        let f1 = row.f1.as_ref().map(|s| format!("{:.4} ± {:.4}", s.mean, s.stdev)).unwrap_or_else(|| "-".into());
        println!("{:<12} f1 {f1}  failed seeds {:?}", row.label, row.failed);
    }
    run.finish(
        out,
        serde_json::json!({ "kind": match kind { SweepKind::Temperature => "temperature", SweepKind::Ablation => "ablation" },
            "base": to_value(&base), "taus": taus, "test": test.map(|p| p.display().to_string()) }),
        seeds,
        vec!["summary.json".into(), "summary.csv".into(), "cells/".into()],
    )
}

fn gradcheck_cmd(scope: ScopeArg, trials: usize, seed: u64, out: Option<PathBuf>, fault: bool) -> CliResult<()> {
    let run = Run::begin("gradcheck");
    let scope = match scope {
        ScopeArg::Losses => Scope::Losses,
        ScopeArg::Network => Scope::Network,
        ScopeArg::All => Scope::All,
    };
    let report = gradcheck::run_suite(scope, trials, seed, fault.then_some(BackwardFault::HalveRelu))?;
    for c in &report.checks {
        println!(
            "{} {:<48} trial {} max_rel_error {:.3e} (tol {:.0e})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.trial,
            c.max_rel_error,
            c.tolerance
        );
    }
    if let Some(dir) = out {
        create_dir(&dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
        run.finish(
            &dir,
            serde_json::json!({ "scope": to_value(&scope), "trials": trials }),
            vec![seed],
            vec!["gradcheck.json".into()],
        )?;
    }
    if report.passed() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            pseudo_only,
            size,
        } => gen_data(cfg, &out, n, seed, pseudo_only, size),
        Command::Train {
            data,
            out,
            loss,
            decoder,
            tau,
            epochs,
            batch_size,
            seed,
        } => train_cmd(cfg, &data, &out, loss, decoder, tau, epochs, batch_size, seed),
        Command::Eval {
            ckpt,
            data,
            mode,
            thre,
            distance,
            out,
        } => eval_cmd(&ckpt, &data, mode, &thre, distance, out),
        Command::Sweep {
            kind,
            data,
            out,
            seeds,
            taus,
            test,
            epochs,
            jobs,
        } => sweep_cmd(cfg, kind, &data, &out, seeds, taus, test, epochs, jobs),
        Command::Gradcheck {
            scope,
            trials,
            seed,
            out,
            inject_fault,
        } => gradcheck_cmd(scope, trials, seed, out, inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Gradcheck) => {
            eprintln!("gradient check failed");
            ExitCode::from(3)
        }
    }
}
