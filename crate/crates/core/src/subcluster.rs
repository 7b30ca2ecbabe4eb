//! Per-category k-means over pooled features, sub-category pseudo labels and cluster diagnostics.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::model::{ModelError, NetworkState};
use crate::rng::{derive_seed, substream, Stream};

#[derive(Debug, thiserror::Error)]
pub enum SubclusterError {
    #[error("invalid clustering input: {0}")]
    Input(String),
    #[error("sample {id} has category {category} but no cluster assignment")]
    MissingAssignment { id: String, category: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    /// L2-normalize pooled features before clustering.
    pub normalize: bool,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: 100,
            normalize: true,
        }
    }
}

impl ClusterOptions {
    pub fn validate(&self) -> Result<(), SubclusterError> {
        if self.restarts == 0 || self.max_iterations == 0 {
            return Err(SubclusterError::Input(
                "restarts and max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pooled features of every sample containing one category.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub category: usize,
    /// Index into the sample slice for each row.
    pub members: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFeatures {
    pub tables: Vec<FeatureTable>,
    /// Categories without a single image; they are not clustered.
    pub empty_categories: Vec<usize>,
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Pooled feature vector of every sample, computed in batches on un-augmented images.
pub fn pooled_features(
    net: &NetworkState,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        out.extend(
            net.extract_features_batch(&images)?
                .into_iter()
                .map(|f| f.pooled),
        );
    }
    Ok(out)
}

/// Splits per-sample pooled vectors into per-category tables.
pub fn feature_tables(
    pooled: &[Vec<f64>],
    samples: &[Sample],
    num_categories: usize,
    normalize: bool,
) -> Result<CategoryFeatures, SubclusterError> {
    if pooled.len() != samples.len() {
        return Err(SubclusterError::Input(format!(
            "{} feature rows for {} samples",
            pooled.len(),
            samples.len()
        )));
    }
    let mut tables = Vec::new();
    let mut empty_categories = Vec::new();
    for c in 0..num_categories {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].has_category(c))
            .collect();
        if members.is_empty() {
            empty_categories.push(c);
            continue;
        }
        let rows = members
            .iter()
            .map(|&i| {
                let mut v = pooled[i].clone();
                if normalize {
                    l2_normalize(&mut v);
                }
                v
            })
            .collect();
        tables.push(FeatureTable {
            category: c,
            members,
            rows,
        });
    }
    Ok(CategoryFeatures {
        tables,
        empty_categories,
    })
}

pub fn collect_features(
    net: &NetworkState,
    samples: &[Sample],
    normalize: bool,
) -> Result<CategoryFeatures, SubclusterError> {
    let pooled = pooled_features(net, samples, 32)?;
    feature_tables(&pooled, samples, net.arch.num_categories, normalize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    /// `K` rows of length `D`.
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index in `0..K` per input row.
    pub assignments: Vec<usize>,
    /// Mean squared distance to the assigned centroid.
    pub objective: f64,
    /// Number of non-empty clusters.
    pub effective_k: usize,
    pub iterations: usize,
    pub converged: bool,
    pub best_restart: usize,
    /// Objective after every assignment step, one list per restart.
    pub histories: Vec<Vec<f64>>,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        self.assignments.iter().for_each(|&a| sizes[a] += 1);
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, sq_dist(point, &centroids[0]));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (k, d) = nearest(p, centroids);
            total += d;
            k
        })
        .collect();
    (labels, total / points.len() as f64)
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if u < d {
                        break;
                    }
                    u -= d;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            // every point already coincides with a centroid; the surplus one collapses
            0
        };
        let c = points[pick].clone();
        dist.iter_mut()
            .zip(points)
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centroids.push(c);
    }
    centroids
}

fn recompute(points: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(p).for_each(|(s, x)| *s += x);
    }
    for (k, c) in centroids.iter_mut().enumerate() {
        if counts[k] > 0 {
            *c = sums[k].iter().map(|s| s / counts[k] as f64).collect();
        }
    }
    counts
}

/// Moves empty centroids onto the points farthest from their own centroid.
fn repair_empty(
    points: &[Vec<f64>],
    labels: &[usize],
    centroids: &mut [Vec<f64>],
    counts: &[usize],
) {
    let mut taken = vec![false; points.len()];
    for k in (0..centroids.len()).filter(|&k| counts[k] == 0) {
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, d)) = far {
            if d > 0.0 {
                taken[i] = true;
                centroids[k] = points[i].clone();
            }
        }
    }
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    objective: f64,
    iterations: usize,
    converged: bool,
    history: Vec<f64>,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iterations: usize) -> LloydRun {
    let (mut labels, mut objective) = assign(points, &centroids);
    let mut history = vec![objective];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iterations {
        iterations += 1;
        let counts = recompute(points, &labels, &mut centroids);
        repair_empty(points, &labels, &mut centroids, &counts);
        let (next, obj) = assign(points, &centroids);
        history.push(obj);
        objective = obj;
        let unchanged = next == labels;
        labels = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    if !converged {
        recompute(points, &labels, &mut centroids);
    }
    LloydRun {
        centroids,
        labels,
        objective,
        iterations,
        converged,
        history,
    }
}

/// Best-of-`restarts` Lloyd from k-means++ seeds. Ties between restarts go to the earliest.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    restarts: usize,
    max_iterations: usize,
) -> Result<KMeansResult, SubclusterError> {
    let dim = points.first().map_or(0, Vec::len);
    if points.is_empty() || k == 0 || dim == 0 || restarts == 0 {
        return Err(SubclusterError::Input(format!(
            "kmeans needs N, K, D and restarts ≥ 1 (N={}, K={k}, D={dim}, restarts={restarts})",
            points.len()
        )));
    }
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(SubclusterError::Input(format!(
            "row {i} has length {}, expected {dim}",
            points[i].len()
        )));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SubclusterError::Input("non-finite feature value".into()));
    }
    // run on a canonical row order so the result does not depend on how rows were listed
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = order.iter().map(|&i| points[i].clone()).collect();
    let points = &sorted[..];
    let mut best: Option<(usize, LloydRun)> = None;
    let mut histories = Vec::with_capacity(restarts);
    for r in 0..restarts {
        let mut rng = substream(seed, Stream::Clustering, &[r as u64]);
        let run = lloyd(points, seed_plus_plus(points, k, &mut rng), max_iterations);
        histories.push(run.history.clone());
        if best
            .as_ref()
            .is_none_or(|(_, b)| run.objective < b.objective)
        {
            best = Some((r, run));
        }
    }
    let (best_restart, run) = best.expect("at least one restart");
    let mut assignments = vec![0; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = run.labels[pos];
    }
    let mut result = KMeansResult {
        centroids: run.centroids,
        assignments,
        objective: run.objective,
        effective_k: 0,
        iterations: run.iterations,
        converged: run.converged,
        best_restart,
        histories,
    };
    result.effective_k = result.cluster_sizes().iter().filter(|&&s| s > 0).count();
    Ok(result)
}

/// Clustering of one category's images.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryClusters {
    pub category: usize,
    pub members: Vec<usize>,
    pub result: KMeansResult,
}

/// Runs k-means for every non-empty table; each category gets its own seed.
pub fn cluster_categories(
    features: &CategoryFeatures,
    k: usize,
    seed: u64,
    options: &ClusterOptions,
) -> Result<Vec<CategoryClusters>, SubclusterError> {
    options.validate()?;
    features
        .tables
        .iter()
        .map(|t| {
            let result = kmeans(
                &t.rows,
                k,
                derive_seed(seed, &[t.category as u64]),
                options.restarts,
                options.max_iterations,
            )?;
            Ok(CategoryClusters {
                category: t.category,
                members: t.members.clone(),
                result,
            })
        })
        .collect()
}

/// Sub-category targets for one sample: `C·K` entries, index `c·K + k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubLabels {
    pub num_categories: usize,
    pub k: usize,
    pub values: Vec<u8>,
}

impl SubLabels {
    pub fn block(&self, c: usize) -> &[u8] {
        &self.values[c * self.k..(c + 1) * self.k]
    }

    /// Zero block for absent categories, one-hot block for present ones.
    pub fn consistent_with(&self, parent_labels: &[u8]) -> bool {
        parent_labels.len() == self.num_categories
            && parent_labels.iter().enumerate().all(|(c, &p)| {
                let ones: usize = self.block(c).iter().map(|&v| v as usize).sum();
                ones == p as usize && self.block(c).iter().all(|&v| v <= 1)
            })
    }
}

pub fn derive_sub_labels(
    clusters: &[CategoryClusters],
    samples: &[Sample],
    k: usize,
) -> Result<Vec<SubLabels>, SubclusterError> {
    let num_categories = samples.first().map_or(0, Sample::num_categories);
    let mut lookup: HashMap<(usize, usize), usize> = HashMap::new();
    for cc in clusters {
        if cc.result.centroids.len() != k {
            return Err(SubclusterError::Input(format!(
                "category {} was clustered with K={} but K={k} was requested",
                cc.category,
                cc.result.centroids.len()
            )));
        }
        for (&m, &a) in cc.members.iter().zip(&cc.result.assignments) {
            lookup.insert((m, cc.category), a);
        }
    }
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if s.num_categories() != num_categories {
                return Err(SubclusterError::Input(format!(
                    "sample {} has {} categories, expected {num_categories}",
                    s.id,
                    s.num_categories()
                )));
            }
            let mut values = vec![0u8; num_categories * k];
            for c in s.present_categories() {
                let a = lookup
                    .get(&(i, c))
                    .ok_or_else(|| SubclusterError::MissingAssignment {
                        id: s.id.clone(),
                        category: c,
                    })?;
                values[c * k + a] = 1;
            }
            Ok(SubLabels {
                num_categories,
                k,
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub nmi: f64,
    pub purity: f64,
    /// One cluster against one sub-type; NMI is reported as 0.
    pub degenerate: bool,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with arithmetic-mean normalization, and purity, of a clustering against reference labels.
pub fn clustering_quality(
    assignments: &[usize],
    reference: &[usize],
) -> Result<ClusterQuality, SubclusterError> {
    if assignments.len() != reference.len() || assignments.is_empty() {
        return Err(SubclusterError::Input(format!(
            "{} assignments against {} reference labels",
            assignments.len(),
            reference.len()
        )));
    }
    let n = assignments.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_ref: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &r) in assignments.iter().zip(reference) {
        *joint.entry((a, r)).or_default() += 1;
        *by_cluster.entry(a).or_default() += 1;
        *by_ref.entry(r).or_default() += 1;
    }
    let mut majority: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(a, _), &c) in &joint {
        let m = majority.entry(a).or_default();
        *m = (*m).max(c);
    }
    let purity = majority.values().sum::<usize>() as f64 / n;
    let h_a = entropy(by_cluster.values().copied(), n);
    let h_r = entropy(by_ref.values().copied(), n);
    let degenerate = by_cluster.len() == 1 && by_ref.len() == 1;
    let nmi = if h_a + h_r <= 0.0 {
        0.0
    } else {
        let mi: f64 = joint
            .iter()
            .map(|(&(a, r), &c)| {
                let pj = c as f64 / n;
                let pa = by_cluster[&a] as f64 / n;
                let pr = by_ref[&r] as f64 / n;
                pj * (pj / (pa * pr)).ln()
            })
            .sum();
        (2.0 * mi / (h_a + h_r)).clamp(0.0, 1.0)
    };
    Ok(ClusterQuality {
        nmi,
        purity,
        degenerate,
    })
}

/// Mean NMI of `trials` uniform random assignments into `k` clusters.
pub fn random_assignment_nmi(
    reference: &[usize],
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<f64, SubclusterError> {
    if trials == 0 || k == 0 {
        return Err(SubclusterError::Input(
            "trials and k must be positive".into(),
        ));
    }
    let mut total = 0.0;
    for t in 0..trials {
        let mut rng = substream(seed, Stream::Clustering, &[u64::MAX, t as u64]);
        let random: Vec<usize> = reference.iter().map(|_| rng.random_range(0..k)).collect();
        total += clustering_quality(&random, reference)?.nmi;
    }
    Ok(total / trials as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: usize,
    pub images: usize,
    pub objective: f64,
    pub effective_k: usize,
    pub cluster_sizes: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    pub quality: Option<ClusterQuality>,
    pub random_baseline_nmi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub k: usize,
    pub normalized: bool,
    pub categories: Vec<CategoryReport>,
    pub empty_categories: Vec<usize>,
}

impl ClusterReport {
    /// Mean NMI over categories with planted sub-types.
    pub fn mean_nmi(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .categories
            .iter()
            .filter_map(|c| c.quality.map(|q| q.nmi))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), SubclusterError> {
        let io = |e: String| SubclusterError::Io {
            path: path.display().to_string(),
            message: e,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| io(e.to_string()))
    }
}

/// Planted sub-types of a category's members, if every member has one.
fn latent_of(cc: &CategoryClusters, samples: &[Sample]) -> Option<Vec<usize>> {
    cc.members
        .iter()
        .map(|&m| {
            samples[m]
                .latent_subtypes
                .get(cc.category)
                .copied()
                .flatten()
        })
        .collect()
}

pub fn build_report(
    clusters: &[CategoryClusters],
    features: &CategoryFeatures,
    samples: &[Sample],
    k: usize,
    normalized: bool,
    baseline_seed: u64,
) -> Result<ClusterReport, SubclusterError> {
    let categories = clusters
        .iter()
        .map(|cc| {
            let latent = latent_of(cc, samples);
            let quality = latent
                .as_ref()
                .map(|l| clustering_quality(&cc.result.assignments, l))
                .transpose()?;
            let random_baseline_nmi = latent
                .as_ref()
                .map(|l| {
                    random_assignment_nmi(
                        l,
                        k,
                        100,
                        derive_seed(baseline_seed, &[cc.category as u64]),
                    )
                })
                .transpose()?;
            Ok(CategoryReport {
                category: cc.category,
                images: cc.members.len(),
                objective: cc.result.objective,
                effective_k: cc.result.effective_k,
                cluster_sizes: cc.result.cluster_sizes(),
                iterations: cc.result.iterations,
                converged: cc.result.converged,
                quality,
                random_baseline_nmi,
            })
        })
        .collect::<Result<_, SubclusterError>>()?;
    Ok(ClusterReport {
        k,
        normalized,
        categories,
        empty_categories: features.empty_categories.clone(),
    })
}

/// `id,category,cluster` rows, cluster indices zero-based.
pub fn write_assignments_csv(
    path: &Path,
    clusters: &[CategoryClusters],
    samples: &[Sample],
) -> Result<(), SubclusterError> {
    let io = |e: String| SubclusterError::Io {
        path: path.display().to_string(),
        message: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.to_string()))?;
    w.write_record(["id", "category", "cluster"])
        .map_err(|e| io(e.to_string()))?;
    for cc in clusters {
        for (&m, &a) in cc.members.iter().zip(&cc.result.assignments) {
            w.write_record([&samples[m].id, &cc.category.to_string(), &a.to_string()])
                .map_err(|e| io(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn sample(id: &str, labels: &[u8]) -> Sample {
        Sample {
            id: id.into(),
            image: Image::filled(8, 8, [0.5; 3]),
            parent_labels: labels.to_vec(),
            gt_mask: None,
            latent_subtypes: labels.iter().map(|&l| (l == 1).then_some(0)).collect(),
        }
    }

    #[test]
    fn four_point_example() {
        let pts = vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ];
        let r = kmeans(&pts, 2, 3, 10, 100).unwrap();
        assert!((r.objective - 0.25).abs() < 1e-12);
        let mut cs = r.centroids.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        assert!(r.converged);
    }

    #[test]
    fn k_equals_n_and_k_exceeds_n() {
        let pts = vec![vec![1.0], vec![2.0], vec![5.0]];
        let r = kmeans(&pts, 3, 0, 10, 100).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.effective_k, 3);
        let r = kmeans(&pts, 5, 0, 10, 100).unwrap();
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.effective_k, 3);
        assert_eq!(r.centroids.len(), 5);
        let one = kmeans(&[vec![4.0, -1.0]], 1, 9, 1, 100).unwrap();
        assert_eq!(one.centroids, vec![vec![4.0, -1.0]]);
        assert_eq!(one.objective, 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kmeans(&[], 2, 0, 1, 10).is_err());
        assert!(kmeans(&[vec![1.0]], 0, 0, 1, 10).is_err());
        assert!(kmeans(&[vec![1.0], vec![1.0, 2.0]], 1, 0, 1, 10).is_err());
        assert!(kmeans(&[vec![f64::NAN]], 1, 0, 1, 10).is_err());
    }

    #[test]
    fn tables_split_by_category_and_normalize() {
        let samples = vec![
            sample("a", &[1, 0, 1]),
            sample("b", &[0, 0, 1]),
            sample("c", &[1, 0, 0]),
            sample("d", &[0, 0, 1]),
        ];
        let pooled: Vec<Vec<f64>> = (0..4).map(|i| vec![3.0, 4.0 + i as f64]).collect();
        let t = feature_tables(&pooled, &samples, 3, true).unwrap();
        assert_eq!(t.empty_categories, vec![1]);
        assert_eq!(t.tables[1].category, 2);
        assert_eq!(t.tables[1].members, vec![0, 1, 3]);
        assert!(t.tables[0].members.contains(&0) && t.tables[1].members.contains(&0));
        for row in t.tables.iter().flat_map(|t| &t.rows) {
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sub_labels_one_hot_in_present_blocks() {
        let samples = vec![
            sample("a", &[0, 1, 0]),
            sample("b", &[0, 0, 0]),
            sample("c", &[1, 1, 0]),
        ];
        let mk = |category, members: Vec<usize>, assignments: Vec<usize>| CategoryClusters {
            category,
            members,
            result: KMeansResult {
                centroids: vec![vec![0.0]; 10],
                assignments,
                objective: 0.0,
                effective_k: 1,
                iterations: 1,
                converged: true,
                best_restart: 0,
                histories: vec![],
            },
        };
        let clusters = vec![mk(0, vec![2], vec![7]), mk(1, vec![0, 2], vec![3, 0])];
        let y = derive_sub_labels(&clusters, &samples, 10).unwrap();
        let ones: Vec<usize> = (0..30).filter(|&i| y[0].values[i] == 1).collect();
        assert_eq!(ones, vec![13]);
        assert!(y[1].values.iter().all(|&v| v == 0));
        assert_eq!(y[2].values.iter().filter(|&&v| v == 1).count(), 2);
        for (s, l) in samples.iter().zip(&y) {
            assert!(l.consistent_with(&s.parent_labels));
        }
        let err = derive_sub_labels(&clusters[1..], &samples, 10).unwrap_err();
        assert!(err.to_string().contains("sample c") && err.to_string().contains("category 0"));
    }

    #[test]
    fn quality_identity_and_counting() {
        let q = clustering_quality(&[2, 2, 0, 0, 1], &[0, 0, 1, 1, 2]).unwrap();
        assert!((q.nmi - 1.0).abs() < 1e-12);
        assert_eq!(q.purity, 1.0);
        // clusters {a,a,b} and {b,b,b}: majorities 2 and 3 of 6
        let q = clustering_quality(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((q.purity - 5.0 / 6.0).abs() < 1e-15);
        let q = clustering_quality(&[0, 0, 0], &[4, 4, 4]).unwrap();
        assert!(q.degenerate);
        assert_eq!(q.nmi, 0.0);
    }

    #[test]
    fn random_assignments_have_low_nmi() {
        let reference: Vec<usize> = (0..2000).map(|i| i % 4).collect();
        let nmi = random_assignment_nmi(&reference, 4, 5, 1).unwrap();
        assert!(nmi < 0.01, "{nmi}");
    }
}
