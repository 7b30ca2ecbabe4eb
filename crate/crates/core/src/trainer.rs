//! Multi-label losses, mini-batch Adam training and the alternating round loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cam::{evaluate_split, CamError, MetricsReport, DEFAULT_THRESHOLD};
use crate::data::{augment, AugmentationPolicy, Sample};
use crate::image::Image;
use crate::model::{Architecture, ModelError, NetworkState};
use crate::numeric::{
    bce_with_logit, AdamConfig, AdamState, NumericError, Tape, Var, WeightDecayMode,
};
use crate::rng::{derive_seed, substream, Stream};
use crate::subcluster::{
    build_report, cluster_categories, collect_features, derive_sub_labels, write_assignments_csv,
    ClusterOptions, ClusterReport, SubLabels, SubclusterError,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid loss input: {0}")]
    Loss(String),
    #[error("round {round} needs sub-category labels for every sample")]
    MissingSubLabels { round: usize },
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("clustering: {0}")]
    Cluster(#[from] SubclusterError),
    #[error("evaluation: {0}")]
    Eval(#[from] CamError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("round {round}, {stage}: {source}")]
    Stage {
        round: usize,
        stage: &'static str,
        source: Box<TrainError>,
    },
}

fn at<E: Into<TrainError>>(round: usize, stage: &'static str) -> impl FnOnce(E) -> TrainError {
    move |e| TrainError::Stage {
        round,
        stage,
        source: Box::new(e.into()),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Extractor shape; category and sub-category counts come from the data and `K`.
///
/// The default pools after the first two blocks only, so a 64×64 image gives a 16×16 CAM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub block_channels: Vec<usize>,
    pub pooled_blocks: usize,
    pub feature_dim: usize,
    pub head_bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            block_channels: vec![16, 24, 32, 48],
            pooled_blocks: 2,
            feature_dim: 64,
            head_bias: false,
        }
    }
}

impl NetworkConfig {
    pub fn architecture(&self, num_categories: usize, subcategories: usize) -> Architecture {
        Architecture {
            block_channels: self.block_channels.clone(),
            pooled_blocks: self.pooled_blocks,
            feature_dim: self.feature_dim,
            num_categories,
            subcategories,
            head_bias: self.head_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub name: String,
    pub seed: u64,
    /// Weight of the sub-category loss.
    pub lambda: f64,
    /// Sub-categories per parent category.
    pub k: usize,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate of round `r` is `learning_rate · lr_decay^r`.
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub weight_decay_mode: WeightDecayMode,
    pub augmentation: AugmentationPolicy,
    pub clustering: ClusterOptions,
    pub network: NetworkConfig,
    /// CAM binarization threshold for per-round evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            lambda: 5.0,
            k: 10,
            rounds: 3,
            epochs_per_round: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay: 1.0,
            weight_decay: 5e-4,
            weight_decay_mode: WeightDecayMode::L2,
            augmentation: AugmentationPolicy::default(),
            clustering: ClusterOptions::default(),
            network: NetworkConfig::default(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite non-negative number");
        }
        if self.k == 0 || self.epochs_per_round == 0 || self.batch_size == 0 {
            return fail("k, epochs_per_round and batch_size must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return fail("lr_decay must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return fail("threshold must lie in (0,1)");
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return fail("name must be a non-empty single path component");
        }
        self.adam(0).validate()?;
        self.clustering.validate()?;
        self.network.architecture(1, self.k).validate()?;
        Ok(())
    }

    pub fn adam(&self, round: usize) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate * self.lr_decay.powi(round as i32),
            weight_decay: self.weight_decay,
            decay_mode: self.weight_decay_mode,
            ..AdamConfig::default()
        }
    }
}

fn check_targets(logits: usize, targets: &[u8]) -> Result<(), TrainError> {
    if logits != targets.len() || logits == 0 {
        return Err(TrainError::Loss(format!(
            "{logits} logits against {} targets",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t > 1) {
        return Err(TrainError::Loss(format!("target {t} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 targets.
pub fn multilabel_loss(logits: &[f64], targets: &[u8]) -> Result<f64, TrainError> {
    check_targets(logits.len(), targets)?;
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| bce_with_logit(x, t as f64))
        .sum();
    Ok(total / logits.len() as f64)
}

/// `L_p + λ·L_s`.
pub fn joint_loss(
    parent_logits: &[f64],
    parent_targets: &[u8],
    sub_logits: &[f64],
    sub_targets: &[u8],
    lambda: f64,
) -> Result<f64, TrainError> {
    if !(lambda >= 0.0) {
        return Err(TrainError::Loss(format!("lambda {lambda} is negative")));
    }
    Ok(multilabel_loss(parent_logits, parent_targets)?
        + lambda * multilabel_loss(sub_logits, sub_targets)?)
}

/// Records the mean BCE of `logits` against constant targets.
pub fn tape_multilabel_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[u8],
) -> Result<Var, TrainError> {
    let shape = tape.shape(logits).to_vec();
    check_targets(shape.iter().product(), targets)?;
    let t = tape.constant(shape, targets.iter().map(|&v| v as f64).collect())?;
    let per_entry = tape.bce_with_logits(logits, t)?;
    Ok(tape.mean(per_entry)?)
}

/// Records the joint objective; with no sub targets only the parent term is built.
/// Returns `(total, parent, sub)`.
pub fn tape_joint_loss(
    tape: &mut Tape,
    parent_logits: Var,
    parent_targets: &[u8],
    sub: Option<(Var, &[u8])>,
    lambda: f64,
) -> Result<(Var, Var, Option<Var>), TrainError> {
    if !(lambda >= 0.0) {
        return Err(TrainError::Loss(format!("lambda {lambda} is negative")));
    }
    let lp = tape_multilabel_loss(tape, parent_logits, parent_targets)?;
    match sub {
        None => Ok((lp, lp, None)),
        Some((logits, targets)) => {
            let ls = tape_multilabel_loss(tape, logits, targets)?;
            let weighted = tape.scale(ls, lambda)?;
            Ok((tape.add(lp, weighted)?, lp, Some(ls)))
        }
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Network plus optimizer moments; the sub-category head has its own optimizer.
///
/// Saved as one JSON object (`checkpoint.json`); floats are written in shortest round-trip form,
/// so a reload reproduces every parameter bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub format_version: u32,
    /// Top-level seed every random stream of the run derives from.
    pub seed: u64,
    pub net: NetworkState,
    pub body_optimizer: AdamState,
    pub sub_optimizer: AdamState,
    /// Last completed round.
    pub round: Option<usize>,
}

impl TrainState {
    pub fn new(config: &TrainConfig, num_categories: usize) -> Result<Self, TrainError> {
        config.validate()?;
        let arch = config.network.architecture(num_categories, config.k);
        let net = NetworkState::init(arch, config.seed)?;
        let (body_optimizer, sub_optimizer) = optimizers(&net, config.adam(0))?;
        Ok(Self {
            format_version: CHECKPOINT_VERSION,
            seed: config.seed,
            net,
            body_optimizer,
            sub_optimizer,
            round: None,
        })
    }

    /// Fresh `θ_s` for `k` clusters with zeroed moments; extractor and `θ_p` are untouched.
    pub fn reinit_sub_head(&mut self, seed: u64, k: usize) -> Result<(), TrainError> {
        self.net.reinit_sub_head(seed, k);
        let sub = split_params(&self.net).1;
        self.sub_optimizer = AdamState::new(self.sub_optimizer.config, &sub)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let state: Self = serde_json::from_str(&text).map_err(|e| TrainError::Io {
            path: path.to_path_buf(),
            message: format!("not a checkpoint: {e}"),
        })?;
        if state.format_version != CHECKPOINT_VERSION {
            return Err(TrainError::Io {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint format {} is not the supported version {CHECKPOINT_VERSION}",
                    state.format_version
                ),
            });
        }
        state.net.arch.validate()?;
        Ok(state)
    }
}

fn split_params(
    net: &NetworkState,
) -> (Vec<&crate::numeric::Tensor>, Vec<&crate::numeric::Tensor>) {
    let mut all = net.params();
    let sub = all.split_off(all.len() - net.sub_head_tensor_count());
    (all, sub)
}

fn optimizers(
    net: &NetworkState,
    config: AdamConfig,
) -> Result<(AdamState, AdamState), TrainError> {
    let (body, sub) = split_params(net);
    Ok((
        AdamState::new(config, &body)?,
        AdamState::new(config, &sub)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub round: usize,
    pub epoch: usize,
    pub loss: f64,
    pub parent_loss: f64,
    pub sub_loss: Option<f64>,
}

/// One round of mini-batch Adam: parent loss only at round 0, joint loss afterwards.
pub fn train_round(
    state: &mut TrainState,
    samples: &[Sample],
    sub_labels: Option<&[SubLabels]>,
    config: &TrainConfig,
    round: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    if sub_labels.is_none() && round > 0 {
        return Err(TrainError::MissingSubLabels { round });
    }
    run_epochs(state, samples, sub_labels, config, round)
}

/// Parent-only training with the batch order and augmentation of round `round`.
pub fn train_parent_only(
    state: &mut TrainState,
    samples: &[Sample],
    config: &TrainConfig,
    round: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    run_epochs(state, samples, None, config, round)
}

fn run_epochs(
    state: &mut TrainState,
    samples: &[Sample],
    sub_labels: Option<&[SubLabels]>,
    config: &TrainConfig,
    round: usize,
) -> Result<Vec<EpochLog>, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let c = state.net.arch.num_categories;
    let k = state.net.arch.subcategories;
    if let Some(bad) = samples.iter().find(|s| s.num_categories() != c) {
        return Err(TrainError::Config(format!(
            "sample {} has {} labels, the network has {c} categories",
            bad.id,
            bad.num_categories()
        )));
    }
    if let Some(y) = sub_labels {
        if y.len() != samples.len() || y.iter().any(|l| l.values.len() != c * k) {
            return Err(TrainError::MissingSubLabels { round });
        }
    }
    let adam = config.adam(round);
    state.body_optimizer.config = adam;
    state.sub_optimizer.config = adam;
    let augment_seed = derive_seed(config.seed, &[Stream::Augment as u64]);
    let mut logs = Vec::with_capacity(config.epochs_per_round);
    for epoch in 0..config.epochs_per_round {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut substream(
            config.seed,
            Stream::Batches,
            &[round as u64, epoch as u64],
        ));
        let global_epoch = (round * config.epochs_per_round + epoch) as u64;
        let (mut total, mut parent, mut sub) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let augmented: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    augment(
                        &samples[i],
                        &config.augmentation,
                        augment_seed,
                        global_epoch,
                    )
                })
                .collect();
            let images: Vec<&Image> = augmented.iter().map(|s| &s.image).collect();
            let yp: Vec<u8> = batch
                .iter()
                .flat_map(|&i| samples[i].parent_labels.iter().copied())
                .collect();
            let ys: Option<Vec<u8>> = sub_labels.map(|y| {
                batch
                    .iter()
                    .flat_map(|&i| y[i].values.iter().copied())
                    .collect()
            });
            let mut tape = Tape::new();
            let input = NetworkState::batch_input(&mut tape, &images)?;
            let fwd = state.net.forward(&mut tape, input, true)?;
            let (loss, lp, ls) = tape_joint_loss(
                &mut tape,
                fwd.parent_logits,
                &yp,
                ys.as_deref().map(|t| (fwd.sub_logits, t)),
                config.lambda,
            )?;
            let weight = batch.len() as f64;
            total += tape.value(loss)[0] * weight;
            parent += tape.value(lp)[0] * weight;
            if let Some(ls) = ls {
                sub += tape.value(ls)[0] * weight;
            }
            let mut grads = tape.backward(loss)?;
            state.net.accumulate_grads(&fwd, &mut grads)?;
            let sub_count = state.net.sub_head_tensor_count();
            let mut params = state.net.params_mut();
            let mut sub_params = params.split_off(params.len() - sub_count);
            state.body_optimizer.step(&mut params)?;
            if sub_labels.is_some() {
                state.sub_optimizer.step(&mut sub_params)?;
            } else {
                sub_params.iter_mut().for_each(|t| t.zero_grad());
            }
        }
        let n = samples.len() as f64;
        logs.push(EpochLog {
            round,
            epoch,
            loss: total / n,
            parent_loss: parent / n,
            sub_loss: sub_labels.map(|_| sub / n),
        });
    }
    state.round = Some(round);
    Ok(logs)
}

/// Everything produced by one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifacts {
    pub round: usize,
    pub checkpoint: Option<PathBuf>,
    pub clusters: Option<ClusterReport>,
    pub metrics: Option<MetricsReport>,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rounds: Vec<RoundArtifacts>,
    pub state: TrainState,
}

/// Where a run writes; `None` keeps everything in memory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn round(&self, r: usize) -> PathBuf {
        self.root.join(format!("round-{r}"))
    }

    pub fn checkpoint(&self, r: usize) -> PathBuf {
        self.round(r).join("checkpoint.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log(&self) -> PathBuf {
        self.root.join("log.csv")
    }

    /// Creates the directory and writes `config.json`.
    pub fn write_config(&self, config: &impl Serialize) -> Result<(), TrainError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.config();
        let text = serde_json::to_string_pretty(config).map_err(|e| TrainError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

fn append_log(dir: &RunDir, epochs: &[EpochLog]) -> Result<(), TrainError> {
    let mut text = String::new();
    for e in epochs {
        let sub = e.sub_loss.map_or(String::new(), |v| v.to_string());
        writeln!(
            text,
            "{},{},{},{},{}",
            e.round, e.epoch, e.loss, e.parent_loss, sub
        )
        .expect("string write");
    }
    let path = dir.log();
    if !path.exists() {
        text.insert_str(0, "round,epoch,loss,parent_loss,sub_loss\n");
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    std::io::Write::write_all(&mut f, text.as_bytes()).map_err(io_err(&path))
}

/// Rows `head,row,category,subcategory,w0..w{D-1}` for both classifier heads.
pub fn write_classifier_weights(path: &Path, net: &NetworkState) -> Result<(), TrainError> {
    let map = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(map)?;
    let d = net.arch.feature_dim;
    let mut header = vec![
        "head".to_string(),
        "row".into(),
        "category".into(),
        "subcategory".into(),
    ];
    header.extend((0..d).map(|j| format!("w{j}")));
    w.write_record(&header).map_err(map)?;
    let k = net.arch.subcategories;
    for (name, head) in [("parent", &net.parent_head), ("sub", &net.sub_head)] {
        for (r, row) in head.weight.data().chunks(d).enumerate() {
            let (cat, sub) = if name == "parent" {
                (r, String::new())
            } else {
                (r / k, (r % k).to_string())
            };
            let mut rec = vec![name.to_string(), r.to_string(), cat.to_string(), sub];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(map)?;
        }
    }
    w.flush().map_err(|e| io_err(path)(e))
}

fn finish_round(
    state: &TrainState,
    config: &TrainConfig,
    round: usize,
    eval: Option<&[Sample]>,
    clusters: Option<ClusterReport>,
    epochs: Vec<EpochLog>,
    dir: Option<&RunDir>,
) -> Result<RoundArtifacts, TrainError> {
    let metrics = match eval {
        Some(eval) if eval.iter().any(|s| s.gt_mask.is_some()) => Some(MetricsReport {
            round: Some(round),
            threshold: config.threshold,
            split: "eval".into(),
            images: eval.iter().filter(|s| s.gt_mask.is_some()).count(),
            metrics: evaluate_split(&state.net, eval, config.threshold)?,
            mean_nmi: clusters.as_ref().and_then(ClusterReport::mean_nmi),
        }),
        _ => None,
    };
    let mut checkpoint = None;
    if let Some(dir) = dir {
        let rdir = dir.round(round);
        fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
        let ck = dir.checkpoint(round);
        state.save(&ck)?;
        checkpoint = Some(ck);
        write_classifier_weights(&rdir.join("classifier_weights.csv"), &state.net)?;
        if let Some(report) = &clusters {
            report.write_json(&rdir.join("clusters.json"))?;
        }
        if let Some(m) = &metrics {
            let p = rdir.join("metrics.json");
            m.write(&p).map_err(io_err(&p))?;
        }
        append_log(dir, &epochs)?;
    }
    Ok(RoundArtifacts {
        round,
        checkpoint,
        clusters,
        metrics,
        epochs,
    })
}

/// Round 0: parent-only training from a fresh network.
pub fn run_baseline(
    train: &[Sample],
    eval: Option<&[Sample]>,
    config: &TrainConfig,
    dir: Option<&RunDir>,
) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let c = train
        .first()
        .ok_or_else(|| TrainError::Config("no training samples".into()))?
        .num_categories();
    let mut state = TrainState::new(config, c)?;
    let epochs =
        train_round(&mut state, train, None, config, 0).map_err(at::<TrainError>(0, "training"))?;
    let art = finish_round(&state, config, 0, eval, None, epochs, dir)
        .map_err(at::<TrainError>(0, "evaluation and checkpoint"))?;
    Ok(RunOutput {
        rounds: vec![art],
        state,
    })
}

/// Rounds `1..=config.rounds` on top of a finished baseline.
pub fn continue_rounds(
    mut run: RunOutput,
    train: &[Sample],
    eval: Option<&[Sample]>,
    config: &TrainConfig,
    dir: Option<&RunDir>,
) -> Result<RunOutput, TrainError> {
    config.validate()?;
    let start = run.state.round.map_or(0, |r| r + 1);
    for round in start.max(1)..=config.rounds {
        let features = collect_features(&run.state.net, train, config.clustering.normalize)
            .map_err(at::<SubclusterError>(round, "feature extraction"))?;
        let cluster_seed = derive_seed(config.seed, &[Stream::Clustering as u64, round as u64]);
        let clusters = cluster_categories(&features, config.k, cluster_seed, &config.clustering)
            .map_err(at::<SubclusterError>(round, "clustering"))?;
        let sub_labels =
            derive_sub_labels(&clusters, train, config.k)
                .map_err(at::<SubclusterError>(round, "sub-label derivation"))?;
        let report = build_report(
            &clusters,
            &features,
            train,
            config.k,
            config.clustering.normalize,
            cluster_seed,
        )
        .map_err(at::<SubclusterError>(round, "cluster report"))?;
        run.state
            .reinit_sub_head(derive_seed(config.seed, &[round as u64]), config.k)
            .map_err(at::<TrainError>(round, "sub-head reinitialization"))?;
        let epochs = train_round(&mut run.state, train, Some(&sub_labels), config, round)
            .map_err(at::<TrainError>(round, "training"))?;
        if let Some(dir) = dir {
            let rdir = dir.round(round);
            fs::create_dir_all(&rdir)
                .map_err(io_err(&rdir))
                .map_err(at::<TrainError>(round, "writing artifacts"))?;
            write_assignments_csv(&rdir.join("assignments.csv"), &clusters, train)
                .map_err(at::<SubclusterError>(round, "writing artifacts"))?;
        }
        let art = finish_round(&run.state, config, round, eval, Some(report), epochs, dir)
            .map_err(at::<TrainError>(round, "evaluation and checkpoint"))?;
        run.rounds.push(art);
    }
    Ok(run)
}

/// Baseline round followed by `config.rounds` rounds of clustering and joint training.
pub fn run_algorithm(
    train: &[Sample],
    eval: Option<&[Sample]>,
    config: &TrainConfig,
    dir: Option<&RunDir>,
) -> Result<RunOutput, TrainError> {
    let base = run_baseline(train, eval, config, dir)?;
    continue_rounds(base, train, eval, config, dir)
}
