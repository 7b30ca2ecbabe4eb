//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `ACCEPTANCE_ONLY=1,3` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sccam_core::cam::{sweep_k_from_baseline, ConfusionMatrix};
use sccam_core::data::{generate_dataset, DatasetSpec, Sample};
use sccam_core::image::{Image, LabelGrid};
use sccam_core::model::{Architecture, NetworkState};
use sccam_core::numeric::Tape;
use sccam_core::subcluster::{
    cluster_categories, collect_features, derive_sub_labels, kmeans, ClusterOptions,
};
use sccam_core::trainer::{
    continue_rounds, run_algorithm, run_baseline, tape_joint_loss, train_parent_only, RunOutput,
    TrainConfig, TrainState,
};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero analytically compare by absolute error.
const GRAD_FLOOR: f64 = 1e-5;
const KMEANS_TOL: f64 = 1e-9;
const KMEANS_BELOW_TOL: f64 = 1e-12;
const KMEANS_HIT_RATE: f64 = 0.9;
const HISTORY_SLACK: f64 = 1e-12;
const RATIO_TOL: f64 = 1e-12;
const MIOU_GAIN: f64 = 0.01;
const MIOU_DIP: f64 = 0.005;
const NMI_MARGIN: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: u32, o: &Outcome, elapsed: Duration, limit: Option<Duration>) -> bool {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let pass = o.pass && in_time;
    let limit = limit.map_or("none".to_string(), |l| format!("{}s", l.as_secs()));
    println!(
        "criterion {id}: {} {} (runtime {:.1}s, limit {limit})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

// ---------- criterion 1 ----------

fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    let blocks = rng.random_range(2..=3);
    Architecture {
        block_channels: (0..blocks).map(|_| rng.random_range(2..=4)).collect(),
        pooled_blocks: rng.random_range(0..=2),
        feature_dim: 16,
        num_categories: rng.random_range(2..=3),
        subcategories: rng.random_range(1..=3),
        head_bias: rng.random_bool(0.5),
    }
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    let mut img = Image::filled(side, side, [0.0; 3]);
    img.data
        .iter_mut()
        .for_each(|v| *v = rng.random_range(0.0..1.0));
    img
}

fn random_targets(rng: &mut ChaCha8Rng, c: usize, k: usize) -> (Vec<u8>, Vec<u8>) {
    let mut yp: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.5))).collect();
    if yp.iter().all(|&v| v == 0) {
        yp[rng.random_range(0..c)] = 1;
    }
    let mut ys = vec![0u8; c * k];
    for (i, _) in yp.iter().enumerate().filter(|(_, &v)| v == 1) {
        ys[i * k + rng.random_range(0..k)] = 1;
    }
    (yp, ys)
}

/// Joint loss at the current parameters and the branch signature of the pass.
fn loss_at(
    net: &NetworkState,
    img: &Image,
    yp: &[u8],
    ys: &[u8],
    lambda: f64,
) -> (f64, Vec<usize>) {
    let mut tape = Tape::new();
    let input = NetworkState::batch_input(&mut tape, &[img]).unwrap();
    let fwd = net.forward(&mut tape, input, true).unwrap();
    let (loss, _, _) = tape_joint_loss(
        &mut tape,
        fwd.parent_logits,
        yp,
        Some((fwd.sub_logits, ys)),
        lambda,
    )
    .unwrap();
    (tape.value(loss)[0], tape.branch_signature())
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let lambda = 5.0;
    let (mut worst, mut checked, mut kinks, mut floored) = (0.0f64, 0usize, 0usize, 0usize);
    let mut worst_at = String::new();
    for cfg in 0..5 {
        let arch = random_arch(&mut rng);
        let mut net = NetworkState::init(arch.clone(), rng.random()).unwrap();
        for p in net.params_mut() {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
        for input in 0..20 {
            let img = random_image(&mut rng, 8);
            let (yp, ys) = random_targets(&mut rng, arch.num_categories, arch.subcategories);

            net.zero_grads();
            let mut tape = Tape::new();
            let x = NetworkState::batch_input(&mut tape, &[&img]).unwrap();
            let fwd = net.forward(&mut tape, x, true).unwrap();
            let (loss, _, _) = tape_joint_loss(
                &mut tape,
                fwd.parent_logits,
                &yp,
                Some((fwd.sub_logits, &ys)),
                lambda,
            )
            .unwrap();
            let base_sig = tape.branch_signature();
            let mut grads = tape.backward(loss).unwrap();
            net.accumulate_grads(&fwd, &mut grads).unwrap();
            let analytic: Vec<Vec<f64>> = net
                .params()
                .iter()
                .map(|t| t.grad().map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();

            for (pi, grad) in analytic.iter().enumerate() {
                for j in 0..grad.len() {
                    let orig = net.params()[pi].data()[j];
                    net.params_mut()[pi].data_mut()[j] = orig + GRAD_STEP;
                    let (up, sig_up) = loss_at(&net, &img, &yp, &ys, lambda);
                    net.params_mut()[pi].data_mut()[j] = orig - GRAD_STEP;
                    let (down, sig_down) = loss_at(&net, &img, &yp, &ys, lambda);
                    net.params_mut()[pi].data_mut()[j] = orig;
                    if sig_up != base_sig || sig_down != base_sig {
                        kinks += 1;
                        continue;
                    }
                    let numeric = (up - down) / (2.0 * GRAD_STEP);
                    let a = grad[j];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
                    checked += 1;
                    if a.abs().max(numeric.abs()) < GRAD_FLOOR {
                        floored += 1;
                    }
                    if rel > worst {
                        worst = rel;
                        worst_at = format!(
                            "config {cfg} input {input} tensor {pi}[{j}]: {a:e} vs {numeric:e}"
                        );
                    }
                }
            }
        }
    }
    outcome(
        worst <= GRAD_TOL && checked > 0,
        format!(
            "max rel err {worst:.3e} <= {GRAD_TOL:e} over {checked} entries ({floored} below the {GRAD_FLOOR:e} floor), {kinks} straddling a kink skipped (worst: {worst_at})"
        ),
    )
}

// ---------- criterion 2 ----------

fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut total = 0.0;
        for g in 0..k {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|&i| labels[i] == g)
                .map(|i| &points[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..d {
                let mean = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
                total += members.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(total / n as f64);
        let mut i = 0;
        while i < n && labels[i] == k - 1 {
            labels[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
        labels[i] += 1;
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut hits, mut below, mut non_monotone, mut runs) = (0, 0, 0, 0);
    for i in 0..50u64 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let opt = exhaustive_optimum(&pts, k);
        let r = kmeans(&pts, k, i, 10, 100).unwrap();
        if r.objective < opt - KMEANS_BELOW_TOL {
            below += 1;
        }
        if (r.objective - opt).abs() <= KMEANS_TOL {
            hits += 1;
        }
        for h in &r.histories {
            runs += 1;
            if h.windows(2)
                .any(|w| w[1] > w[0] + HISTORY_SLACK * w[0].max(1.0))
            {
                non_monotone += 1;
            }
        }
    }
    let rate = hits as f64 / 50.0;
    outcome(
        rate >= KMEANS_HIT_RATE && below == 0 && non_monotone == 0,
        format!(
            "{hits}/50 optimal within {KMEANS_TOL:e}, {below} below optimum, {non_monotone}/{runs} restarts non-monotone"
        ),
    )
}

// ---------- criterion 3 ----------

fn random_grid(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    classes: usize,
    used: &[bool],
) -> LabelGrid {
    let allowed: Vec<u8> = (0..classes).filter(|&c| used[c]).map(|c| c as u8).collect();
    let mut g = LabelGrid::zeros(h, w);
    g.data
        .iter_mut()
        .for_each(|v| *v = allowed[rng.random_range(0..allowed.len())]);
    g
}

/// Per-pixel counting: (tp, truth count, pred count) per class.
fn brute_counts(truth: &LabelGrid, pred: &LabelGrid, classes: usize) -> Vec<(u64, u64, u64)> {
    let mut out = vec![(0u64, 0u64, 0u64); classes];
    for i in 0..truth.data.len() {
        let (t, p) = (truth.data[i] as usize, pred.data[i] as usize);
        out[t].1 += 1;
        out[p].2 += 1;
        if t == p {
            out[t].0 += 1;
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut count_mismatch, mut ratio_mismatch) = (0, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let classes = rng.random_range(2..=5);
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let mut used_t: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.7)).collect();
        let mut used_p: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.7)).collect();
        used_t[0] = true;
        used_p[0] = true;
        let truth = random_grid(&mut rng, h, w, classes, &used_t);
        let pred = random_grid(&mut rng, h, w, classes, &used_p);

        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&truth, &pred).unwrap();
        let mut pair = vec![0u64; classes * classes];
        for i in 0..truth.data.len() {
            pair[truth.data[i] as usize * classes + pred.data[i] as usize] += 1;
        }
        if pair != cm.counts {
            count_mismatch += 1;
        }

        let counts = brute_counts(&truth, &pred, classes);
        let ious: Vec<Option<f64>> = counts
            .iter()
            .map(|&(tp, t, p)| (t + p > tp).then(|| tp as f64 / (t + p - tp) as f64))
            .collect();
        let defined: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = defined.iter().sum::<f64>() / defined.len() as f64;
        let tp_fg: u64 = counts[1..].iter().map(|c| c.0).sum();
        let truth_fg: u64 = counts[1..].iter().map(|c| c.1).sum();
        let pred_fg: u64 = counts[1..].iter().map(|c| c.2).sum();
        let precision = if pred_fg == 0 {
            0.0
        } else {
            tp_fg as f64 / pred_fg as f64
        };
        let recall = if truth_fg == 0 {
            0.0
        } else {
            tp_fg as f64 / truth_fg as f64
        };
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };

        let m = cm.metrics();
        let mut diffs = vec![
            (m.miou - miou).abs(),
            (m.precision - precision).abs(),
            (m.recall - recall).abs(),
            (m.f_score - f).abs(),
        ];
        for (a, b) in m.per_class_iou.iter().zip(&ious) {
            match (a, b) {
                (Some(a), Some(b)) => diffs.push((a - b).abs()),
                (None, None) => {}
                _ => diffs.push(f64::INFINITY),
            }
        }
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst = worst.max(d);
        if d > RATIO_TOL {
            ratio_mismatch += 1;
        }
    }
    outcome(
        count_mismatch == 0 && ratio_mismatch == 0,
        format!(
            "{count_mismatch}/100 confusion mismatches, {ratio_mismatch}/100 ratio mismatches (max diff {worst:.1e}, tol {RATIO_TOL:e})"
        ),
    )
}

// ---------- criterion 4 ----------

fn small_spec(name: &str, train: usize, eval: usize) -> DatasetSpec {
    DatasetSpec {
        name: name.into(),
        train_images: train,
        eval_images: eval,
        image_size: 48,
        seed: 11,
        ..DatasetSpec::bench_v1()
    }
}

fn body_bits(state: &TrainState) -> Vec<u64> {
    let params = state.net.params();
    let body = params.len() - state.net.sub_head_tensor_count();
    params[..body]
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

fn criterion_4() -> Outcome {
    let ds = generate_dataset(&small_spec("degenerate", 48, 0)).unwrap();
    let config = TrainConfig {
        lambda: 0.0,
        k: 3,
        rounds: 2,
        epochs_per_round: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let full = run_algorithm(&ds.train, None, &config, None).unwrap();
    let mut parent = run_baseline(&ds.train, None, &config, None).unwrap();
    for round in 1..=config.rounds {
        train_parent_only(&mut parent.state, &ds.train, &config, round).unwrap();
    }
    let a = body_bits(&full.state);
    let identical = a == body_bits(&parent.state);

    let weighted = run_algorithm(
        &ds.train,
        None,
        &TrainConfig {
            lambda: 5.0,
            ..config.clone()
        },
        None,
    )
    .unwrap();
    let lambda_matters = body_bits(&weighted.state) != a;

    let features = collect_features(&full.state.net, &ds.train, true).unwrap();
    let clusters = cluster_categories(&features, 1, 9, &ClusterOptions::default()).unwrap();
    let labels = derive_sub_labels(&clusters, &ds.train, 1).unwrap();
    let replicated = labels
        .iter()
        .zip(&ds.train)
        .filter(|(l, s)| l.values != s.parent_labels)
        .count();

    outcome(
        identical && replicated == 0,
        format!(
            "(a) lambda=0 body weights bit-identical to parent-only: {identical} ({} values; lambda=5 differs: {lambda_matters}); (b) K=1 sub-labels differing from Y_p: {replicated}/{}",
            a.len(),
            ds.train.len()
        ),
    )
}

// ---------- criteria 5-7 ----------

struct Bench {
    train: Vec<Sample>,
    eval: Vec<Sample>,
    config: TrainConfig,
    baseline: RunOutput,
    baseline_time: Duration,
}

fn bench() -> Bench {
    let ds = generate_dataset(&DatasetSpec::bench_v1()).unwrap();
    let config = TrainConfig {
        name: "bench-v1".into(),
        ..TrainConfig::default()
    };
    let (baseline, baseline_time) =
        timed(|| run_baseline(&ds.train, Some(&ds.eval), &config, None).unwrap());
    Bench {
        train: ds.train,
        eval: ds.eval,
        config,
        baseline,
        baseline_time,
    }
}

fn criteria_5_6(b: &Bench) -> (Outcome, Duration, Outcome) {
    let (run, t) = timed(|| {
        continue_rounds(b.baseline.clone(), &b.train, Some(&b.eval), &b.config, None).unwrap()
    });
    let metric = |r: usize| &run.rounds[r].metrics.as_ref().unwrap().metrics;
    let miou: Vec<f64> = run
        .rounds
        .iter()
        .map(|r| r.metrics.as_ref().unwrap().metrics.miou)
        .collect();
    let f: Vec<f64> = (0..run.rounds.len()).map(|r| metric(r).f_score).collect();
    let last = run.rounds.len() - 1;
    let dips: Vec<f64> = miou
        .windows(2)
        .map(|w| w[0] - w[1])
        .filter(|&d| d > 0.0)
        .collect();
    let trend_ok = miou[last] - miou[0] >= MIOU_GAIN
        && f[last] >= f[0]
        && dips.len() <= 1
        && dips.iter().all(|&d| d <= MIOU_DIP);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let c5 = outcome(
        trend_ok,
        format!(
            "mIoU per round [{}] gain {:.4} (need >= {MIOU_GAIN}), F [{}], {} dips (max 1 of <= {MIOU_DIP})",
            fmt(&miou),
            miou[last] - miou[0],
            fmt(&f),
            dips.len()
        ),
    );

    let first = run.rounds[1].clusters.as_ref().unwrap();
    let final_ = run.rounds[last].clusters.as_ref().unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (c1, c3) in first.categories.iter().zip(&final_.categories) {
        let (Some(q1), Some(q3), Some(rand)) = (c1.quality, c3.quality, c3.random_baseline_nmi)
        else {
            ok = false;
            parts.push(format!("category {}: no NMI", c3.category));
            continue;
        };
        ok &= q3.nmi >= q1.nmi + NMI_MARGIN && q3.nmi >= rand + NMI_MARGIN;
        parts.push(format!(
            "c{} round1 {:.3} round{last} {:.3} random {:.3}",
            c3.category, q1.nmi, q3.nmi, rand
        ));
    }
    let c6 = outcome(ok, format!("NMI margin {NMI_MARGIN}: {}", parts.join("; ")));
    (c5, t, c6)
}

fn criterion_7(b: &Bench) -> (Outcome, Duration) {
    let (rows, t) = timed(|| {
        sweep_k_from_baseline(
            &b.baseline,
            &b.train,
            &b.eval,
            &b.config,
            &[1, 2, 4, 8],
            None,
        )
        .unwrap()
    });
    let k1 = rows.iter().find(|r| r.k == 1).unwrap().miou;
    let ok = rows.iter().all(|r| r.miou >= k1);
    let detail = rows
        .iter()
        .map(|r| format!("K={} {:.4}", r.k, r.miou))
        .collect::<Vec<_>>()
        .join(", ");
    (
        outcome(ok, format!("final mIoU {detail}; each K>1 must be >= K=1")),
        t,
    )
}

// ---------- criterion 8 ----------

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sccam"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "sccam {} exited {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn run_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut names = BTreeSet::new();
    names.insert("log.csv".to_string());
    for e in std::fs::read_dir(root).unwrap() {
        let e = e.unwrap();
        if e.path().join("metrics.json").exists() {
            names.insert(format!("{}/metrics.json", e.file_name().to_string_lossy()));
        }
    }
    names
        .into_iter()
        .map(|n| {
            let bytes = std::fs::read(root.join(&n)).unwrap_or_default();
            (n, bytes)
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec_path = root.join("spec.json");
    let spec = small_spec("determinism", 40, 12);
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = root.join("data");
    let config_path = root.join("config.json");
    let config = serde_json::json!({
        "train": { "name": "run", "seed": 4, "k": 2, "rounds": 1, "epochs_per_round": 2, "batch_size": 8 }
    });
    std::fs::write(&config_path, config.to_string()).unwrap();
    let s = |p: &Path| p.to_string_lossy().into_owned();
    let steps = || -> Result<(), String> {
        run_cli(&["generate", "--spec", &s(&spec_path), "--out", &s(&data)])?;
        for out in ["first", "second"] {
            run_cli(&[
                "train",
                "--config",
                &s(&config_path),
                "--dataset",
                &s(&data),
                "--out",
                &s(&root.join(out)),
            ])?;
        }
        Ok(())
    };
    if let Err(e) = steps() {
        return outcome(false, e);
    }
    let a = run_files(&root.join("first/run"));
    let b = run_files(&root.join("second/run"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let complete = a.iter().all(|(_, bytes)| !bytes.is_empty()) && names.len() >= 3;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        complete && a == b,
        format!(
            "compared {} across two runs, differing: [{}]",
            names.join(", "),
            differing.join(", ")
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().is_none_or(|s| s.contains(&id));
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    let mut all = true;

    if wanted(1) {
        let (o, t) = timed(criterion_1);
        all &= report(1, &o, t, mins(2));
    }
    if wanted(2) {
        let (o, t) = timed(criterion_2);
        all &= report(2, &o, t, mins(1));
    }
    if wanted(3) {
        let (o, t) = timed(criterion_3);
        all &= report(3, &o, t, mins(1));
    }
    if wanted(4) {
        let (o, t) = timed(criterion_4);
        all &= report(4, &o, t, mins(5));
    }
    if wanted(5) || wanted(6) || wanted(7) {
        let b = bench();
        if wanted(5) || wanted(6) {
            let (c5, t, c6) = criteria_5_6(&b);
            if wanted(5) {
                all &= report(5, &c5, b.baseline_time + t, mins(20));
            }
            if wanted(6) {
                all &= report(6, &c6, b.baseline_time + t, mins(20));
            }
        }
        if wanted(7) {
            let (o, t) = criterion_7(&b);
            all &= report(7, &o, b.baseline_time + t, mins(60));
        }
    }
    if wanted(8) {
        let (o, t) = timed(criterion_8);
        all &= report(8, &o, t, None);
    }
    if !all {
        std::process::exit(1);
    }
}
