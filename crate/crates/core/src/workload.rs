//! Synthetic data, query workloads and their exact labels.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::TrainingSet;
use crate::oracle::{distances_from, CountTree, DistanceKind, VectorDataset};
use crate::partition::PartitionLayout;

/// Gaussian mixture with equal component weights, component means drawn from
/// `[-1, 1]^d` and isotropic per-component scales from `[0.05, 0.3]`.
pub fn gen_synthetic(n: usize, d: usize, components: usize, seed: u64) -> Result<VectorDataset> {
    Ok(gen_synthetic_labeled(n, d, components, seed)?.0)
}

/// [`gen_synthetic`] plus the component each row was drawn from.
pub fn gen_synthetic_labeled(n: usize, d: usize, components: usize, seed: u64) -> Result<(VectorDataset, Vec<usize>)> {
    if n == 0 || d == 0 || components == 0 {
        return Err(Error::InvalidConfig("n, d and components must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..components)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let scales: Vec<f64> = (0..components).map(|_| rng.random_range(0.05..=0.3)).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..components);
        labels.push(c);
        for j in 0..d {
            let v = means[c][j] + scales[c] * std_normal.sample(&mut rng);
            // Stored files hold f32; keep memory and disk identical.
            rows.push(v as f32 as f64);
        }
    }
    Ok((VectorDataset::from_flat(d, rows, DistanceKind::Euclidean)?, labels))
}

/// `count` draws, log-uniform over `[lo, hi]`, rounded, deduplicated and sorted.
pub fn targets_in_range<R: Rng + ?Sized>(lo: f64, hi: f64, count: usize, rng: &mut R) -> Result<Vec<usize>> {
    if !(lo >= 1.0 && hi >= lo) || count == 0 {
        return Err(Error::InvalidConfig(format!("empty target range [{lo}, {hi}] or count {count}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut out: Vec<usize> = (0..count)
        .map(|_| {
            let v = if b > a { rng.random_range(a..=b).exp() } else { lo };
            (v.round() as usize).clamp(lo.ceil() as usize, hi.floor() as usize)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Target selectivities over `[1, 0.01 n]`.
pub fn selectivity_targets(n: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 100 {
        return Err(Error::InvalidConfig(format!("dataset of {n} rows is too small for targets up to 1% of it")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    targets_in_range(1.0, (0.01 * n as f64).floor(), count, &mut rng)
}

/// For each target `y`, the smallest threshold with at least `y` results
/// (the `y`-th smallest distance) and the exact inclusive count there.
/// Repeated thresholds are reported once.
pub fn thresholds_for_query(ds: &VectorDataset, x: &[f64], targets: &[usize]) -> Result<Vec<(f64, usize)>> {
    let mut d = distances_from(ds, x)?;
    d.sort_by(f64::total_cmp);
    thresholds_from_sorted(&d, targets)
}

fn thresholds_from_sorted(sorted: &[f64], targets: &[usize]) -> Result<Vec<(f64, usize)>> {
    let mut out: Vec<(f64, usize)> = Vec::with_capacity(targets.len());
    for &y in targets {
        if y == 0 || y > sorted.len() {
            return Err(Error::InvalidConfig(format!("target {y} outside 1..={}", sorted.len())));
        }
        let t = sorted[y - 1];
        if out.last().is_some_and(|&(prev, _)| prev == t) {
            continue;
        }
        out.push((t, sorted.partition_point(|&v| v <= t)));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    /// Index of the query object within the workload.
    pub query: usize,
    pub x: Vec<f64>,
    pub t: f64,
    pub y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_cluster_y: Option<Vec<f64>>,
}

/// How `t_max` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TMaxPolicy {
    /// Largest generated threshold times the factor.
    Observed { factor: f64 },
    Fixed { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    /// Number of query objects.
    pub queries: usize,
    /// Target draws per query.
    pub targets: usize,
    /// Smallest target.
    pub target_min: f64,
    /// Largest target; `None` means 1% of the dataset.
    pub target_max: Option<f64>,
    /// Train/val/test proportions.
    pub split: [f64; 3],
    /// Thresholds kept per validation and test query.
    pub eval_thresholds: usize,
    /// Standard deviation of Gaussian noise added to sampled query objects.
    pub noise_std: f64,
    pub t_max: TMaxPolicy,
    pub seed: u64,
    /// Recount every label with the counting tree.
    pub verify: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            queries: 500,
            targets: 40,
            target_min: 1.0,
            target_max: None,
            split: [0.8, 0.1, 0.1],
            eval_thresholds: 3,
            noise_std: 0.0,
            t_max: TMaxPolicy::Observed { factor: 1.05 },
            seed: 0,
            verify: true,
        }
    }
}

/// Where a workload came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_fingerprint: String,
    pub n: usize,
    pub d: usize,
    pub kind: DistanceKind,
    pub t_max: f64,
    /// Cluster count of the layout used for per-cluster labels, if any.
    pub k: Option<usize>,
    pub config: WorkloadConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub provenance: Provenance,
    pub train: Vec<LabeledQuery>,
    pub val: Vec<LabeledQuery>,
    pub test: Vec<LabeledQuery>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    split: String,
    #[serde(flatten)]
    q: LabeledQuery,
}

#[derive(Serialize, Deserialize)]
struct Header {
    provenance: Provenance,
}

/// Per-split query-object counts in proportion to `split`, differing from
/// the exact shares by less than one.
fn split_sizes(m: usize, split: &[f64; 3]) -> [usize; 3] {
    let total: f64 = split.iter().sum();
    let train = (m as f64 * split[0] / total).round() as usize;
    let val = ((m as f64 * split[1] / total).round() as usize).min(m - train);
    [train, val, m - train - val]
}

/// Labels every threshold of one query; `assign` maps rows to clusters.
fn label_query(
    ds: &VectorDataset,
    x: &[f64],
    targets: &[usize],
    assign: Option<(&[usize], usize)>,
) -> Result<Vec<(f64, usize, Option<Vec<f64>>)>> {
    let dist = distances_from(ds, x)?;
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| dist[i]).collect();
    let pairs = thresholds_from_sorted(&sorted, targets)?;
    Ok(pairs
        .into_iter()
        .map(|(t, y)| {
            let per = assign.map(|(a, k)| {
                let mut c = vec![0.0; k];
                for &row in &order[..y] {
                    c[a[row]] += 1.0;
                }
                c
            });
            (t, y, per)
        })
        .collect())
}

/// Builds a labelled workload: query objects sampled from `ds`, split by
/// object, every generated threshold kept for training and
/// `eval_thresholds` random ones kept per validation/test object.
pub fn build_workload(ds: &VectorDataset, cfg: &WorkloadConfig, layout: Option<&PartitionLayout>) -> Result<Workload> {
    let m = cfg.queries;
    if m < 10 {
        return Err(Error::InvalidConfig(format!("need at least 10 query objects, got {m}")));
    }
    if m > ds.n() {
        return Err(Error::InvalidConfig(format!("{m} query objects requested from {} rows", ds.n())));
    }
    if cfg.split.iter().any(|&s| !(s >= 0.0)) || cfg.split.iter().sum::<f64>() <= 0.0 {
        return Err(Error::InvalidConfig(format!("bad split {:?}", cfg.split)));
    }
    if !(cfg.noise_std >= 0.0) || cfg.eval_thresholds == 0 {
        return Err(Error::InvalidConfig("noise_std must be >= 0 and eval_thresholds positive".into()));
    }
    let hi = cfg.target_max.unwrap_or((0.01 * ds.n() as f64).floor());
    if hi > ds.n() as f64 {
        return Err(Error::InvalidConfig(format!("largest target {hi} exceeds dataset size {}", ds.n())));
    }
    if let Some(l) = layout {
        l.validate(ds.n())?;
    }
    let assignment = layout.map(|l| l.assignment(ds.n()));
    let assign = assignment.as_deref().zip(layout.map(PartitionLayout::k));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = index::sample(&mut rng, ds.n(), m).into_vec();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("positive std");
    let objects: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| {
            let mut x = ds.row(r).to_vec();
            if cfg.noise_std > 0.0 {
                for v in &mut x {
                    *v += noise.sample(&mut rng);
                }
            }
            x
        })
        .collect();
    let query_seeds: Vec<u64> = (0..m).map(|_| rng.random()).collect();
    let mut shuffled: Vec<usize> = (0..m).collect();
    shuffled.shuffle(&mut rng);
    let [n_train, n_val, _] = split_sizes(m, &cfg.split);
    let mut split_of = vec![Split::Test; m];
    for (pos, &q) in shuffled.iter().enumerate() {
        split_of[q] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let per_query: Vec<Vec<LabeledQuery>> = (0..m)
        .into_par_iter()
        .map(|q| {
            let mut qrng = ChaCha8Rng::seed_from_u64(query_seeds[q]);
            let targets = targets_in_range(cfg.target_min, hi, cfg.targets, &mut qrng)?;
            let mut labeled = label_query(ds, &objects[q], &targets, assign)?;
            if split_of[q] != Split::Train && labeled.len() > cfg.eval_thresholds {
                let mut keep = index::sample(&mut qrng, labeled.len(), cfg.eval_thresholds).into_vec();
                keep.sort_unstable();
                labeled = keep.into_iter().map(|i| labeled[i].clone()).collect();
            }
            Ok(labeled
                .into_iter()
                .map(|(t, y, per)| LabeledQuery {
                    query: q,
                    x: objects[q].clone(),
                    t,
                    y: y as f64,
                    per_cluster_y: per,
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let observed = per_query.iter().flatten().map(|e| e.t).fold(0.0, f64::max);
    let t_max = match cfg.t_max {
        TMaxPolicy::Observed { factor } => {
            if !(factor >= 1.0) {
                return Err(Error::InvalidConfig(format!("t_max factor must be >= 1, got {factor}")));
            }
            if observed > 0.0 {
                observed * factor
            } else {
                1.0
            }
        }
        TMaxPolicy::Fixed { value } => {
            if !(value > 0.0) || observed > value {
                return Err(Error::InvalidConfig(format!(
                    "fixed t_max {value} is below the largest generated threshold {observed}"
                )));
            }
            value
        }
    };

    let mut wl = Workload {
        provenance: Provenance {
            dataset_fingerprint: ds.fingerprint(),
            n: ds.n(),
            d: ds.d(),
            kind: ds.kind(),
            t_max,
            k: layout.map(PartitionLayout::k),
            config: cfg.clone(),
        },
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (q, entries) in per_query.into_iter().enumerate() {
        match split_of[q] {
            Split::Train => wl.train.extend(entries),
            Split::Val => wl.val.extend(entries),
            Split::Test => wl.test.extend(entries),
        }
    }
    if cfg.verify {
        wl.verify_labels(ds, 0)?;
    }
    Ok(wl)
}

impl Workload {
    pub fn t_max(&self) -> f64 {
        self.provenance.t_max
    }

    pub fn split(&self, s: Split) -> &[LabeledQuery] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (Split, &LabeledQuery)> {
        self.train
            .iter()
            .map(|q| (Split::Train, q))
            .chain(self.val.iter().map(|q| (Split::Val, q)))
            .chain(self.test.iter().map(|q| (Split::Test, q)))
    }

    /// Recounts labels with the counting tree; `sample` > 0 checks only
    /// every `len / sample`-th entry.
    pub fn verify_labels(&self, ds: &VectorDataset, sample: usize) -> Result<()> {
        let tree = CountTree::build(ds, 0)?;
        let all: Vec<&LabeledQuery> = self.entries().map(|(_, q)| q).collect();
        let step = if sample == 0 { 1 } else { (all.len() / sample).max(1) };
        all.par_iter().step_by(step).try_for_each(|q| {
            let c = tree.count(&q.x, q.t)? as f64;
            if c != q.y {
                return Err(Error::Contract(format!(
                    "label {} of query {} at t={} disagrees with recount {c}",
                    q.y, q.query, q.t
                )));
            }
            Ok(())
        })
    }

    /// Recomputes every label (and per-cluster label) against `ds`.
    pub fn relabel(&mut self, ds: &VectorDataset, layout: Option<&PartitionLayout>) -> Result<()> {
        let Some(layout) = layout else {
            let tree = CountTree::build(ds, 0)?;
            for split in [&mut self.train, &mut self.val, &mut self.test] {
                split.par_iter_mut().try_for_each(|q| -> Result<()> {
                    q.y = tree.count(&q.x, q.t)? as f64;
                    q.per_cluster_y = None;
                    Ok(())
                })?;
            }
            self.provenance.dataset_fingerprint = ds.fingerprint();
            self.provenance.n = ds.n();
            self.provenance.k = None;
            return Ok(());
        };
        let assignment = layout.assignment(ds.n());
        let k = layout.k();
        for split in [&mut self.train, &mut self.val, &mut self.test] {
            // Entries of one query object are contiguous and share `x`.
            let mut groups: Vec<&mut [LabeledQuery]> = Vec::new();
            let mut rest: &mut [LabeledQuery] = split;
            while !rest.is_empty() {
                let len = rest.iter().take_while(|e| e.query == rest[0].query && e.x == rest[0].x).count();
                let (head, tail) = rest.split_at_mut(len);
                groups.push(head);
                rest = tail;
            }
            groups.into_par_iter().try_for_each(|group| -> Result<()> {
                let dist = distances_from(ds, &group[0].x)?;
                for q in group.iter_mut() {
                    let mut c = vec![0.0; k];
                    let mut y = 0.0;
                    for (row, &dv) in dist.iter().enumerate() {
                        if dv <= q.t {
                            y += 1.0;
                            if let Some(slot) = c.get_mut(assignment[row]) {
                                *slot += 1.0;
                            }
                        }
                    }
                    q.y = y;
                    q.per_cluster_y = Some(c);
                }
                Ok(())
            })?;
        }
        self.provenance.dataset_fingerprint = ds.fingerprint();
        self.provenance.n = ds.n();
        self.provenance.k = Some(k);
        Ok(())
    }

    /// Gathers one split into a [`TrainingSet`] gated by `layout`. Per-cluster
    /// labels are included when every entry carries them for `layout.k()`
    /// clusters.
    pub fn training_set(&self, split: Split, layout: &PartitionLayout) -> Result<TrainingSet> {
        let entries = self.split(split);
        let d = self.provenance.d;
        let mut x = Array2::zeros((entries.len(), d));
        for (r, e) in entries.iter().enumerate() {
            if e.x.len() != d {
                return Err(Error::Shape(format!("entry {r} has dim {}, expected {d}", e.x.len())));
            }
            x.row_mut(r).assign(&ndarray::ArrayView1::from(&e.x[..]));
        }
        let t = entries.iter().map(|e| e.t).collect();
        let y = entries.iter().map(|e| e.y).collect();
        let k = layout.k();
        let cluster_y = if !entries.is_empty()
            && entries.iter().all(|e| e.per_cluster_y.as_ref().is_some_and(|c| c.len() == k))
        {
            let mut c = Array2::zeros((entries.len(), k));
            for (r, e) in entries.iter().enumerate() {
                c.row_mut(r).assign(&ndarray::ArrayView1::from(&e.per_cluster_y.as_ref().unwrap()[..]));
            }
            Some(c)
        } else {
            None
        };
        TrainingSet::new(layout, x, t, y, cluster_y)
    }

    /// Header line with provenance, then one JSON object per entry.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &Header {
                provenance: self.provenance.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        for (split, q) in self.entries() {
            let name = match split {
                Split::Train => "train",
                Split::Val => "val",
                Split::Test => "test",
            };
            serde_json::to_writer(
                &mut w,
                &Line {
                    split: name.into(),
                    q: q.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Malformed("empty workload file".into()))??;
        let header: Header = serde_json::from_str(&header)
            .map_err(|e| Error::Malformed(format!("workload header: {e}")))?;
        let mut wl = Workload {
            provenance: header.provenance,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: Line = serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("workload line {}: {e}", i + 2)))?;
            match entry.split.as_str() {
                "train" => wl.train.push(entry.q),
                "val" => wl.val.push(entry.q),
                "test" => wl.test.push(entry.q),
                other => return Err(Error::Malformed(format!("workload line {}: unknown split {other:?}", i + 2))),
            }
        }
        Ok(wl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::selectivity_bruteforce;
    use crate::partition::partition_metric;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(300, 4, 3, 5).unwrap();
        let b = gen_synthetic(300, 4, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(300, 4, 3, 6).unwrap());
        assert!(gen_synthetic(0, 4, 3, 5).is_err());
    }

    fn silhouette(ds: &VectorDataset, labels: &[usize], k: usize) -> f64 {
        let n = ds.n();
        let mut total = 0.0;
        for i in 0..n {
            let mut sum = vec![0.0; k];
            let mut cnt = vec![0usize; k];
            for j in 0..n {
                if i != j {
                    sum[labels[j]] += crate::oracle::euclidean(ds.row(i), ds.row(j));
                    cnt[labels[j]] += 1;
                }
            }
            let own = labels[i];
            if cnt[own] == 0 {
                continue;
            }
            let a = sum[own] / cnt[own] as f64;
            let b = (0..k)
                .filter(|&c| c != own && cnt[c] > 0)
                .map(|c| sum[c] / cnt[c] as f64)
                .fold(f64::INFINITY, f64::min);
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn mixture_has_cluster_structure() {
        let (ds, labels) = gen_synthetic_labeled(1000, 8, 4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shuffled: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
        let real = silhouette(&ds, &labels, 4);
        let random = silhouette(&ds, &shuffled, 4);
        assert!(real > 0.3 && real > random + 0.3, "{real} vs {random}");
    }

    #[test]
    fn target_examples() {
        assert_eq!(selectivity_targets(100, 40, 0).unwrap(), vec![1]);
        assert!(matches!(selectivity_targets(99, 40, 0), Err(Error::InvalidConfig(_))));
        let t = selectivity_targets(100_000, 40, 3).unwrap();
        assert!(t.iter().all(|&v| (1..=1000).contains(&v)));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn log_gaps_are_roughly_even() {
        let mut good = 0;
        for seed in 0..20 {
            let t = selectivity_targets(1_000_000, 40, seed).unwrap();
            let logs: Vec<f64> = t.iter().map(|&v| (v as f64).ln()).collect();
            // Compare coarse gaps (every 8th order statistic) so that ties
            // and rounding near 1 do not dominate.
            let gaps: Vec<f64> = logs.windows(9).step_by(8).map(|w| w[8] - w[0]).collect();
            let max = gaps.iter().cloned().fold(0.0, f64::max);
            let min = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
            if min > 0.0 && max / min < 10.0 {
                good += 1;
            }
        }
        assert!(good >= 16, "{good}/20");
    }

    fn line(values: &[f64]) -> VectorDataset {
        VectorDataset::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>(), DistanceKind::Euclidean).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let ds = line(&[0.1, 0.2, 0.3]);
        assert_eq!(thresholds_for_query(&ds, &[0.0], &[2]).unwrap(), vec![(0.2, 2)]);
        let ds = line(&[0.0, 0.5, 1.0]);
        let r = thresholds_for_query(&ds, &[0.5], &[1]).unwrap();
        assert_eq!(r[0].0, 0.0);
        assert!(r[0].1 >= 1);
        let ds = line(&[0.1, 0.2, 0.2]);
        assert_eq!(thresholds_for_query(&ds, &[0.0], &[2]).unwrap(), vec![(0.2, 3)]);
    }

    fn small_cfg(queries: usize, seed: u64) -> WorkloadConfig {
        WorkloadConfig {
            queries,
            targets: 10,
            split: [0.8, 0.1, 0.1],
            seed,
            ..WorkloadConfig::default()
        }
    }

    #[test]
    fn ten_queries_split_eight_one_one() {
        let ds = gen_synthetic(500, 3, 2, 1).unwrap();
        let wl = build_workload(&ds, &small_cfg(10, 2), None).unwrap();
        let objs = |s: &[LabeledQuery]| s.iter().map(|q| q.query).collect::<BTreeSet<_>>();
        let (a, b, c) = (objs(&wl.train), objs(&wl.val), objs(&wl.test));
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert!(wl.val.len() <= 3 && wl.test.len() <= 3);
        assert!(matches!(build_workload(&ds, &small_cfg(9, 2), None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn labels_match_bruteforce_and_cluster_sums() {
        let ds = gen_synthetic(800, 4, 3, 7).unwrap();
        let layout = partition_metric(&ds, 3, 0.05, 1).unwrap();
        let wl = build_workload(&ds, &small_cfg(30, 3), Some(&layout)).unwrap();
        for (_, q) in wl.entries() {
            assert_eq!(q.y, selectivity_bruteforce(&ds, &q.x, q.t).unwrap() as f64);
            let per = q.per_cluster_y.as_ref().unwrap();
            assert_eq!(per.iter().sum::<f64>(), q.y);
            assert!(q.t <= wl.t_max());
        }
        let mut by_query: std::collections::BTreeMap<usize, Vec<&LabeledQuery>> = Default::default();
        for q in &wl.train {
            by_query.entry(q.query).or_default().push(q);
        }
        for qs in by_query.values() {
            assert!(qs.windows(2).all(|w| w[0].t < w[1].t && w[0].y <= w[1].y));
        }
        let ts = wl.training_set(Split::Train, &layout).unwrap();
        assert!(ts.cluster_y.is_some());
    }

    #[test]
    fn jsonl_round_trip_is_byte_stable() {
        let ds = gen_synthetic(400, 3, 2, 9).unwrap();
        let cfg = WorkloadConfig {
            noise_std: 0.05,
            ..small_cfg(12, 4)
        };
        let a = build_workload(&ds, &cfg, None).unwrap();
        let b = build_workload(&ds, &cfg, None).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let back = Workload::read_jsonl(ba.as_slice()).unwrap();
        assert_eq!(back, a);
        let first: serde_json::Value = serde_json::from_str(std::str::from_utf8(&ba).unwrap().lines().nth(1).unwrap()).unwrap();
        assert!(first.get("x").is_some() && first.get("split").is_some());
    }

    #[test]
    fn fixed_t_max_below_thresholds_rejected() {
        let ds = gen_synthetic(400, 3, 2, 9).unwrap();
        let cfg = WorkloadConfig {
            t_max: TMaxPolicy::Fixed { value: 1e-6 },
            ..small_cfg(12, 4)
        };
        assert!(matches!(build_workload(&ds, &cfg, None), Err(Error::InvalidConfig(_))));
    }

    proptest! {
        #[test]
        fn split_sizes_are_within_one(m in 10usize..2000) {
            let s = split_sizes(m, &[0.8, 0.1, 0.1]);
            prop_assert_eq!(s.iter().sum::<usize>(), m);
            for (got, share) in s.iter().zip([0.8, 0.1, 0.1]) {
                prop_assert!((*got as f64 - share * m as f64).abs() <= 1.0);
            }
        }

        #[test]
        fn thresholds_are_monotone(values in prop::collection::vec(-5.0f64..5.0, 5..60), x in -5.0f64..5.0) {
            let ds = line(&values);
            let n = values.len();
            let targets: Vec<usize> = (1..=n).step_by(3).collect();
            let r = thresholds_for_query(&ds, &[x], &targets).unwrap();
            prop_assert!(r.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
            for (t, y) in r {
                prop_assert_eq!(y, selectivity_bruteforce(&ds, &[x], t).unwrap());
            }
        }
    }
}
