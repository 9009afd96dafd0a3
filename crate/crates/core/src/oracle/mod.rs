//! Ground truth: distance functions, brute-force selectivity, and an exact
//! ball-tree range counter.
//!
//! Threshold tests are inclusive (`dist <= t`) everywhere. The tree only
//! uses ball geometry to prune or to accept whole subtrees with a safety
//! margin; individual rows are always tested with the same [`dist`] the
//! brute-force scan uses, so both counters agree exactly.

mod dataset;

pub use dataset::{DistanceKind, VectorDataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::partition::{build_hierarchy, metric_rows, PointSet, ThresholdSpace};

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[inline]
fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    1.0 - dot / (na.sqrt() * nb.sqrt())
}

/// Distance between two vectors.
pub fn dist(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vector lengths {} and {} differ", a.len(), b.len())));
    }
    match kind {
        DistanceKind::Euclidean => Ok(euclidean(a, b)),
        DistanceKind::Cosine => {
            if a.iter().all(|&v| v == 0.0) || b.iter().all(|&v| v == 0.0) {
                return Err(Error::Domain("cosine distance of a zero vector".into()));
            }
            Ok(cosine_unchecked(a, b))
        }
    }
}

/// Euclidean distance on unit vectors equivalent to cosine similarity `s`:
/// `cos(u, v) >= s` iff `|u - v| <= sqrt(2 (1 - s))`.
pub fn cosine_threshold_to_l2(s: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("cosine similarity {s} outside [-1, 1]")));
    }
    Ok((2.0 * (1.0 - s)).sqrt())
}

fn check_query(ds: &VectorDataset, x: &[f64], t: f64) -> Result<()> {
    if x.len() != ds.d() {
        return Err(Error::Shape(format!("query has dim {} but dataset has {}", x.len(), ds.d())));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!("threshold must be finite and >= 0, got {t}")));
    }
    if ds.kind() == DistanceKind::Cosine && x.iter().all(|&v| v == 0.0) {
        return Err(Error::Domain("cosine query is the zero vector".into()));
    }
    Ok(())
}

/// Exact selectivity by linear scan.
pub fn selectivity_bruteforce(ds: &VectorDataset, x: &[f64], t: f64) -> Result<usize> {
    check_query(ds, x, t)?;
    Ok(count_rows(ds, x, t, ds.rows()))
}

fn count_rows<'a>(ds: &VectorDataset, x: &[f64], t: f64, rows: impl Iterator<Item = &'a [f64]>) -> usize {
    match ds.kind() {
        DistanceKind::Euclidean => rows.filter(|r| euclidean(x, r) <= t).count(),
        DistanceKind::Cosine => rows.filter(|r| cosine_unchecked(x, r) <= t).count(),
    }
}

/// Distances from `x` to every row, in row order.
pub fn distances_from(ds: &VectorDataset, x: &[f64]) -> Result<Vec<f64>> {
    check_query(ds, x, 0.0)?;
    Ok(match ds.kind() {
        DistanceKind::Euclidean => ds.rows().map(|r| euclidean(x, r)).collect(),
        DistanceKind::Cosine => ds.rows().map(|r| cosine_unchecked(x, r)).collect(),
    })
}

/// Leaf size used by the counting tree.
pub const COUNT_TREE_LEAF: usize = 24;

#[derive(Debug, Clone)]
struct CountNode {
    center: Vec<f64>,
    radius: f64,
    count: usize,
    children: Vec<u32>,
    /// Row ids, only for leaves.
    rows: Vec<u32>,
}

/// Ball tree with cached subtree counts for exact range counting.
#[derive(Debug, Clone)]
pub struct CountTree {
    nodes: Vec<CountNode>,
    kind: DistanceKind,
    space: ThresholdSpace,
    n: usize,
    d: usize,
    fingerprint: String,
    /// Copy of the rows in their original encoding.
    rows: Vec<f64>,
}

/// Counting statistics for one query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VisitStats {
    pub nodes: usize,
    pub leaves: usize,
    pub rows_tested: usize,
}

impl CountTree {
    pub fn build(ds: &VectorDataset, seed: u64) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::InvalidConfig("cannot build a counting tree over an empty dataset".into()));
        }
        let (geom, space) = metric_rows(ds)?;
        let points = PointSet { d: ds.d(), data: &geom };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let root = rng.random_range(0..points.len());
        let arena = build_hierarchy(&points, root, |size, _| size <= COUNT_TREE_LEAF);

        // Subtree counts, children before parents (children have larger ids).
        let mut counts = vec![0usize; arena.len()];
        for id in (0..arena.len()).rev() {
            counts[id] = if arena[id].children.is_empty() {
                arena[id].members.len()
            } else {
                arena[id].children.iter().map(|&c| counts[c]).sum()
            };
        }
        let nodes = arena
            .into_iter()
            .zip(counts)
            .map(|(node, count)| CountNode {
                center: points.point(node.center).to_vec(),
                radius: node.radius,
                count,
                children: node.children.iter().map(|&c| c as u32).collect(),
                rows: node.members.iter().map(|&m| m as u32).collect(),
            })
            .collect();
        Ok(CountTree {
            nodes,
            kind: ds.kind(),
            space,
            n: ds.n(),
            d: ds.d(),
            fingerprint: ds.fingerprint(),
            rows: ds.flat().to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> DistanceKind {
        self.kind
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Root ball `(center, radius)` in tree geometry.
    pub fn root_ball(&self) -> (&[f64], f64) {
        (&self.nodes[0].center, self.nodes[0].radius)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// Exact count of rows within `t` of `x`.
    pub fn count(&self, x: &[f64], t: f64) -> Result<usize> {
        self.count_with_stats(x, t).map(|(c, _)| c)
    }

    pub fn count_with_stats(&self, x: &[f64], t: f64) -> Result<(usize, VisitStats)> {
        if x.len() != self.d {
            return Err(Error::Shape(format!("query has dim {} but tree has {}", x.len(), self.d)));
        }
        if !t.is_finite() || t < 0.0 {
            return Err(Error::Domain(format!("threshold must be finite and >= 0, got {t}")));
        }
        let (q, tq, margin) = match self.space {
            ThresholdSpace::Euclidean => (x.to_vec(), t, 1e-9 * (1.0 + t)),
            ThresholdSpace::CosineOnSphere => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Domain("cosine query is the zero vector".into()));
                }
                // sqrt amplifies rounding near zero, hence the wider margin.
                (x.iter().map(|v| v / norm).collect(), (2.0 * t).sqrt(), 1e-6)
            }
        };
        let mut stats = VisitStats::default();
        let mut total = 0usize;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            stats.nodes += 1;
            let dc = euclidean(&q, &node.center);
            let slack = margin + 1e-9 * node.radius;
            if dc - node.radius > tq + slack {
                continue;
            }
            if dc + node.radius <= tq - slack {
                total += node.count;
                continue;
            }
            if node.children.is_empty() {
                stats.leaves += 1;
                stats.rows_tested += node.rows.len();
                total += match self.kind {
                    DistanceKind::Euclidean => node.rows.iter().filter(|&&r| euclidean(x, self.row(r as usize)) <= t).count(),
                    DistanceKind::Cosine => node
                        .rows
                        .iter()
                        .filter(|&&r| cosine_unchecked(x, self.row(r as usize)) <= t)
                        .count(),
                };
            } else {
                stack.extend(node.children.iter().rev());
            }
        }
        Ok((total, stats))
    }

    /// Checks that the tree's cached counts are internally consistent.
    pub fn check_counts(&self) -> bool {
        self.nodes.iter().all(|node| {
            if node.children.is_empty() {
                node.count == node.rows.len()
            } else {
                node.count == node.children.iter().map(|&c| self.nodes[c as usize].count).sum::<usize>()
            }
        }) && self.nodes[0].count == self.n
    }
}

/// Exact selectivity via the counting tree. The tree must have been built
/// over `ds` with the same distance.
pub fn selectivity_tree(tree: &CountTree, ds: &VectorDataset, x: &[f64], t: f64) -> Result<usize> {
    if tree.kind != ds.kind() {
        return Err(Error::InvalidConfig(format!(
            "tree uses {:?} distance but dataset uses {:?}",
            tree.kind,
            ds.kind()
        )));
    }
    if tree.n != ds.n() || tree.fingerprint != ds.fingerprint() {
        return Err(Error::InvalidConfig("tree was built over a different dataset".into()));
    }
    check_query(ds, x, t)?;
    tree.count(x, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_dataset(seed: u64, n: usize, d: usize, kind: DistanceKind) -> VectorDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        VectorDataset::from_rows(&rows, kind).unwrap()
    }

    #[test]
    fn distance_examples() {
        for kind in [DistanceKind::Euclidean, DistanceKind::Cosine] {
            assert!(dist(&[0.3, 0.4], &[0.3, 0.4], kind).unwrap().abs() < 1e-15);
        }
        assert!((dist(&[1.0, 0.0], &[0.0, 1.0], DistanceKind::Cosine).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(dist(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::Euclidean).unwrap(), 5.0);
        assert!(matches!(dist(&[0.0, 0.0], &[3.0, 4.0], DistanceKind::Cosine), Err(Error::Domain(_))));
        assert!(matches!(dist(&[0.0], &[3.0, 4.0], DistanceKind::Euclidean), Err(Error::Shape(_))));
    }

    #[test]
    fn cosine_threshold_conversion() {
        assert_eq!(cosine_threshold_to_l2(1.0).unwrap(), 0.0);
        assert!((cosine_threshold_to_l2(0.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((cosine_threshold_to_l2(0.9).unwrap() - 0.2f64.sqrt()).abs() < 1e-12);
        assert!((cosine_threshold_to_l2(0.9).unwrap() - 0.4472).abs() < 1e-4);
        assert!(cosine_threshold_to_l2(1.5).is_err());
        assert!(cosine_threshold_to_l2(-1.01).is_err());
    }

    #[test]
    fn bruteforce_examples() {
        let ds = VectorDataset::from_rows(&[vec![0.0], vec![1.0], vec![3.0]], DistanceKind::Euclidean).unwrap();
        assert_eq!(selectivity_bruteforce(&ds, &[0.0], 1.0).unwrap(), 2);
        assert_eq!(selectivity_bruteforce(&ds, &[0.5], 0.0).unwrap(), 0);
        assert_eq!(selectivity_bruteforce(&ds, &[0.0], 3.0).unwrap(), 3);
        assert!(selectivity_bruteforce(&ds, &[0.0], -1.0).is_err());
    }

    #[test]
    fn tree_root_shortcuts() {
        let ds = random_dataset(4, 500, 4, DistanceKind::Euclidean);
        let tree = CountTree::build(&ds, 1).unwrap();
        assert!(tree.check_counts());
        let (center, radius) = tree.root_ball();
        let x = vec![0.1, -0.2, 0.3, 0.0];
        let dc = euclidean(&x, center);
        let (all, stats) = tree.count_with_stats(&x, dc + radius + 1.0).unwrap();
        assert_eq!(all, 500);
        assert_eq!(stats.leaves, 0);
        assert_eq!(stats.nodes, 1);

        let far = vec![50.0, 50.0, 50.0, 50.0];
        let dc = euclidean(&far, center);
        let (none, stats) = tree.count_with_stats(&far, (dc - radius) / 2.0).unwrap();
        assert_eq!(none, 0);
        assert_eq!(stats.nodes, 1);
    }

    #[test]
    fn tree_rejects_mismatched_dataset() {
        let ds = random_dataset(5, 100, 3, DistanceKind::Euclidean);
        let tree = CountTree::build(&ds, 1).unwrap();
        let cos = random_dataset(5, 100, 3, DistanceKind::Cosine);
        assert!(matches!(selectivity_tree(&tree, &cos, &[0.1, 0.1, 0.1], 0.5), Err(Error::InvalidConfig(_))));
        let other = random_dataset(6, 100, 3, DistanceKind::Euclidean);
        assert!(matches!(selectivity_tree(&tree, &other, &[0.1, 0.1, 0.1], 0.5), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tree_handles_duplicates() {
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 3) as f64, 0.0]).collect();
        let ds = VectorDataset::from_rows(&rows, DistanceKind::Euclidean).unwrap();
        let tree = CountTree::build(&ds, 2).unwrap();
        for t in [0.0, 0.5, 1.0, 2.0] {
            assert_eq!(tree.count(&[0.0, 0.0], t).unwrap(), selectivity_bruteforce(&ds, &[0.0, 0.0], t).unwrap());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn tree_matches_bruteforce(seed in 0u64..10_000, cosine in any::<bool>()) {
            let kind = if cosine { DistanceKind::Cosine } else { DistanceKind::Euclidean };
            let ds = random_dataset(seed, 300, 5, kind);
            let tree = CountTree::build(&ds, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..20 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = if cosine { rng.random_range(0.0..1.2) } else { rng.random_range(0.0..2.0) };
                prop_assert_eq!(
                    selectivity_tree(&tree, &ds, &x, t).unwrap(),
                    selectivity_bruteforce(&ds, &x, t).unwrap()
                );
            }
            // Thresholds exactly at a row distance exercise the inclusive boundary.
            let x = ds.row(0).to_vec();
            for r in 1..10 {
                let t = dist(&x, ds.row(r), kind).unwrap().max(0.0);
                prop_assert_eq!(tree.count(&x, t).unwrap(), selectivity_bruteforce(&ds, &x, t).unwrap());
            }
        }

        #[test]
        fn metric_sanity(seed in 0u64..10_000) {
            let ds = random_dataset(seed, 3, 6, DistanceKind::Euclidean);
            let (a, b, c) = (ds.row(0), ds.row(1), ds.row(2));
            let e = DistanceKind::Euclidean;
            prop_assert_eq!(dist(a, a, e).unwrap(), 0.0);
            prop_assert!((dist(a, b, e).unwrap() - dist(b, a, e).unwrap()).abs() <= 1e-9);
            prop_assert!(dist(a, c, e).unwrap() <= dist(a, b, e).unwrap() + dist(b, c, e).unwrap() + 1e-9);
        }

        #[test]
        fn cosine_count_equals_l2_count_on_unit_vectors(seed in 0u64..10_000, s in -0.9f64..0.99) {
            let mut ds = random_dataset(seed, 200, 4, DistanceKind::Cosine);
            ds.normalize().unwrap();
            let x = ds.row(0).to_vec();
            let r = cosine_threshold_to_l2(s).unwrap();
            let by_cos = ds.rows().filter(|o| 1.0 - dist(&x, o, DistanceKind::Cosine).unwrap() >= s).count();
            let by_l2 = ds.rows().filter(|o| euclidean(&x, o) <= r).count();
            prop_assert_eq!(by_cos, by_l2);
        }

        #[test]
        fn truth_is_monotone_in_threshold(seed in 0u64..10_000, t in 0.0f64..2.0, dt in 0.0f64..1.0) {
            let ds = random_dataset(seed, 100, 3, DistanceKind::Euclidean);
            let x = [0.0, 0.0, 0.0];
            prop_assert!(selectivity_bruteforce(&ds, &x, t).unwrap() <= selectivity_bruteforce(&ds, &x, t + dt).unwrap());
        }
    }
}
