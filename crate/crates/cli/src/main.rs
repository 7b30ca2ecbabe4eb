use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sccam_core::cam::{self, MetricsReport};
use sccam_core::data::{self, DatasetManifest, DatasetSpec, Sample, MANIFEST_VERSION};
use sccam_core::trainer::{self, RunDir, TrainConfig, TrainState};

/// Class activation maps refined with clustered sub-category labels.
#[derive(Parser)]
#[command(name = "sccam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with masks and planted sub-types.
    Generate(GenerateArgs),
    /// Run baseline training plus clustering rounds and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint's CAM masks against ground truth.
    Eval(EvalArgs),
    /// Export CAM heatmaps and masks for selected images.
    Cam(CamArgs),
    /// Run the algorithm once per K and tabulate the final mIoU.
    SweepK(SweepArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset spec JSON; defaults to the bench-v1 preset.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Run config JSON (`dataset`, `output_dir`, `train`).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long, default_value_t = cam::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write one predicted mask PNG per image.
    #[arg(long)]
    export_masks: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Image ids, comma separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<String>,
    #[arg(long, default_value_t = cam::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: TrainOverrides,
    /// K values, comma separated.
    #[arg(long = "ks", value_delimiter = ',', required = true)]
    ks: Vec<usize>,
}

/// Everything `train` needs; written back into each run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    dataset: Option<PathBuf>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    train: TrainConfig,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn usage(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Outcome<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cam(a) => cam_cmd(a),
        Command::SweepK(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Refuses a non-empty directory unless forced, in which case it is removed.
fn prepare_output(dir: &Path, force: bool) -> Outcome<()> {
    let occupied = fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some());
    if occupied {
        if !force {
            return Err(Failure::Usage(anyhow!(
                "{} exists and is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)
            .with_context(|| format!("removing {}", dir.display()))
            .runtime()?;
    }
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Outcome<T> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {what} {}", path.display()))
        .usage()?;
    serde_json::from_str(&text)
        .with_context(|| format!("{what} {}", path.display()))
        .usage()
}

fn generate(a: GenerateArgs) -> Outcome<()> {
    let spec = match &a.spec {
        Some(p) => read_json::<DatasetSpec>(p, "dataset spec")?,
        None => DatasetSpec::bench_v1(),
    };
    spec.validate().context("dataset spec").usage()?;
    prepare_output(&a.out, a.force)?;
    let ds = data::generate_dataset(&spec)
        .context("generating dataset")
        .runtime()?;
    data::write_split(&a.out.join("train"), &ds.train)
        .context("writing train split")
        .runtime()?;
    data::write_split(&a.out.join("eval"), &ds.eval)
        .context("writing eval split")
        .runtime()?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        spec: spec.clone(),
        train_count: ds.train.len(),
        eval_count: ds.eval.len(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(a.out.join("manifest.json"), text + "\n")
        .context("writing manifest")
        .runtime()?;
    println!(
        "generated {} ({} train, {} eval, seed {}) in {}",
        spec.name,
        ds.train.len(),
        ds.eval.len(),
        spec.seed,
        a.out.display()
    );
    Ok(())
}

fn resolve(o: &TrainOverrides) -> Outcome<RunConfig> {
    let mut rc = match &o.config {
        Some(p) => read_json::<RunConfig>(p, "run config")?,
        None => RunConfig {
            dataset: None,
            output_dir: None,
            train: TrainConfig::default(),
        },
    };
    if let Some(v) = &o.dataset {
        rc.dataset = Some(v.clone());
    }
    if let Some(v) = &o.out {
        rc.output_dir = Some(v.clone());
    }
    let t = &mut rc.train;
    if let Some(v) = &o.name {
        t.name = v.clone();
    }
    if let Some(v) = o.rounds {
        t.rounds = v;
    }
    if let Some(v) = o.k {
        t.k = v;
    }
    if let Some(v) = o.lambda {
        t.lambda = v;
    }
    if let Some(v) = o.epochs {
        t.epochs_per_round = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.threshold {
        t.threshold = v;
    }
    t.validate().context("run config").usage()?;
    if rc.dataset.is_none() || rc.output_dir.is_none() {
        return Err(Failure::Usage(anyhow!(
            "a dataset directory and an output directory are required (--dataset, --out or the config file)"
        )));
    }
    Ok(rc)
}

fn load_dataset(root: &Path) -> Outcome<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    data::read_dataset_dir(root)
        .with_context(|| format!("loading dataset {}", root.display()))
        .runtime()
}

fn train(a: TrainArgs) -> Outcome<()> {
    let rc = resolve(&a.run)?;
    let (_, train_set, eval_set) = load_dataset(rc.dataset.as_deref().expect("resolved"))?;
    let dir = RunDir::new(
        rc.output_dir
            .as_ref()
            .expect("resolved")
            .join(&rc.train.name),
    );
    prepare_output(&dir.root, a.run.force)?;
    dir.write_config(&rc).context("writing config").runtime()?;
    let out = trainer::run_algorithm(&train_set, Some(&eval_set), &rc.train, Some(&dir))
        .context("training")
        .runtime()?;
    for r in &out.rounds {
        let m = r.metrics.as_ref().map(|m| &m.metrics);
        println!(
            "round {}: loss {:.4}, mIoU {}, F {}{}",
            r.round,
            r.epochs.last().map_or(f64::NAN, |e| e.loss),
            m.map_or("-".into(), |m| format!("{:.4}", m.miou)),
            m.map_or("-".into(), |m| format!("{:.4}", m.f_score)),
            r.clusters
                .as_ref()
                .and_then(|c| c.mean_nmi())
                .map_or(String::new(), |v| format!(", NMI {v:.4}"))
        );
    }
    println!("run written to {}", dir.root.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Outcome<TrainState> {
    TrainState::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime()
}

fn pick_split(split: &str, train: Vec<Sample>, eval: Vec<Sample>) -> Outcome<Vec<Sample>> {
    match split {
        "train" => Ok(train),
        "eval" => Ok(eval),
        other => Err(Failure::Usage(anyhow!(
            "unknown split {other:?}; expected train or eval"
        ))),
    }
}

fn check_categories(state: &TrainState, manifest: &DatasetManifest) -> Outcome<()> {
    if state.net.arch.num_categories != manifest.spec.num_categories {
        return Err(Failure::Runtime(anyhow!(
            "checkpoint has {} categories, dataset has {}",
            state.net.arch.num_categories,
            manifest.spec.num_categories
        )));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Failure::Usage(anyhow!("threshold must lie in (0,1)")));
    }
    let state = load_checkpoint(&a.checkpoint)?;
    let (manifest, train_set, eval_set) = load_dataset(&a.dataset)?;
    check_categories(&state, &manifest)?;
    let samples = pick_split(&a.split, train_set, eval_set)?;
    prepare_output(&a.out, a.force)?;
    let metrics = cam::evaluate_split(&state.net, &samples, a.threshold)
        .context("evaluation")
        .runtime()?;
    let report = MetricsReport {
        round: state.round,
        threshold: a.threshold,
        split: a.split.clone(),
        images: samples.iter().filter(|s| s.gt_mask.is_some()).count(),
        metrics,
        mean_nmi: None,
    };
    report
        .write(&a.out.join("metrics.json"))
        .context("writing metrics.json")
        .runtime()?;
    if a.export_masks {
        let dir = a.out.join("masks");
        fs::create_dir_all(&dir)
            .context("creating mask directory")
            .runtime()?;
        for s in samples.iter().filter(|s| s.gt_mask.is_some()) {
            let cats: Vec<usize> = s.present_categories().collect();
            let map = cam::compute_cam(&state.net, &s.image, &cats)
                .with_context(|| format!("CAM for {}", s.id))
                .runtime()?;
            let mask = cam::cam_to_mask(&map, a.threshold);
            data::save_gray_png(
                &dir.join(format!("{}.png", s.id)),
                mask.width,
                mask.height,
                mask.data,
            )
            .context("writing mask")
            .runtime()?;
        }
    }
    println!(
        "{} split, τ={}: mIoU {:.4}, precision {:.4}, recall {:.4}, F {:.4}",
        a.split,
        a.threshold,
        report.metrics.miou,
        report.metrics.precision,
        report.metrics.recall,
        report.metrics.f_score
    );
    Ok(())
}

fn cam_cmd(a: CamArgs) -> Outcome<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(Failure::Usage(anyhow!("threshold must lie in (0,1)")));
    }
    let state = load_checkpoint(&a.checkpoint)?;
    let (manifest, train_set, eval_set) = load_dataset(&a.dataset)?;
    check_categories(&state, &manifest)?;
    let chosen: Vec<&Sample> = a
        .ids
        .iter()
        .map(|id| {
            train_set
                .iter()
                .chain(&eval_set)
                .find(|s| &s.id == id)
                .ok_or_else(|| Failure::Runtime(anyhow!("image id {id:?} is not in the dataset")))
        })
        .collect::<Outcome<_>>()?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .runtime()?;
    for s in chosen {
        let cats: Vec<usize> = s.present_categories().collect();
        let map = cam::compute_cam(&state.net, &s.image, &cats)
            .with_context(|| format!("CAM for {}", s.id))
            .runtime()?;
        let files = cam::export_cam(&a.out, s, &map, a.threshold)
            .with_context(|| format!("exporting {}", s.id))
            .runtime()?;
        println!("{}: {} files", s.id, files.len());
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome<()> {
    let rc = resolve(&a.run)?;
    let mut ks = a.ks.clone();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() < 2 {
        return Err(Failure::Usage(anyhow!(
            "--ks needs at least two distinct values"
        )));
    }
    let (_, train_set, eval_set) = load_dataset(rc.dataset.as_deref().expect("resolved"))?;
    let root = rc
        .output_dir
        .as_ref()
        .expect("resolved")
        .join(&rc.train.name);
    prepare_output(&root, a.run.force)?;
    let text = serde_json::to_string_pretty(&rc).expect("config serializes");
    fs::write(root.join("config.json"), text + "\n")
        .context("writing config")
        .runtime()?;
    let rows = cam::sweep_k(&train_set, &eval_set, &rc.train, &ks, Some(&root))
        .context("K sweep")
        .runtime()?;
    for r in &rows {
        println!("K={}: mIoU {:.4}, F {:.4}", r.k, r.miou, r.f_score);
    }
    println!("sweep written to {}", root.join("sweep.csv").display());
    Ok(())
}
