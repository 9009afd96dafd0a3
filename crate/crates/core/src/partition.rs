//! Data partitioning: a hierarchical ball decomposition of the database,
//! greedy merging of its leaves into `K` balanced clusters, and the
//! per-cluster intersection gate used by the ensemble estimator.
//!
//! The decomposition is a simplified cover tree. A node is split by
//! farthest-point traversal: the node's own center is kept as the first
//! child center and further centers are added, farthest first, until every
//! member lies within half the node radius of some center or eight centers
//! exist. Each member joins its nearest center. Child radii are the exact
//! maximum member distance, so every ball covers its members.
//!
//! Cosine datasets are partitioned on unit-normalized copies under
//! Euclidean distance; the gate converts cosine thresholds accordingly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{euclidean, DistanceKind, VectorDataset};

/// Upper bound on children created when a node is split.
pub const MAX_CHILDREN: usize = 8;

/// Radius below which a node is never split.
pub const MIN_SPLIT_RADIUS: f64 = 1e-9;

/// Default partition ratio.
pub const DEFAULT_RATIO: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallRegion {
    pub members: Vec<usize>,
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutKind {
    Metric,
    Random,
}

/// How query thresholds map into the geometry the balls live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSpace {
    Euclidean,
    /// Balls live on the unit sphere; a cosine distance `t` becomes the
    /// chord length `sqrt(2 t)`.
    CosineOnSphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub balls: Vec<BallRegion>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub clusters: Vec<Cluster>,
    pub kind: LayoutKind,
    pub ratio: f64,
    pub space: ThresholdSpace,
}

/// A node of the ball hierarchy, stored in a flat arena.
#[derive(Debug, Clone)]
pub(crate) struct BallNode {
    /// Index of the center point.
    pub center: usize,
    pub radius: f64,
    pub members: Vec<usize>,
    pub children: Vec<usize>,
}

/// Points under Euclidean distance, addressed by row index.
pub(crate) struct PointSet<'a> {
    pub d: usize,
    pub data: &'a [f64],
}

impl PointSet<'_> {
    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.d
    }
}

/// Splits `members` around `center` by farthest-point traversal.
/// Returns `(center, members)` per child; the first child keeps `center`.
fn split_members(points: &PointSet<'_>, center: usize, radius: f64, members: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let c0 = points.point(center);
    let mut nearest = vec![0usize; members.len()];
    let mut nearest_dist: Vec<f64> = members.iter().map(|&m| euclidean(points.point(m), c0)).collect();
    let mut centers = vec![center];
    let half = radius / 2.0;
    while centers.len() < MAX_CHILDREN {
        let (far_pos, far_dist) = nearest_dist
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &dist)| if dist > best.1 { (i, dist) } else { best });
        if far_dist <= half {
            break;
        }
        let new_center = members[far_pos];
        let slot = centers.len();
        centers.push(new_center);
        let cp = points.point(new_center);
        for (i, &m) in members.iter().enumerate() {
            let dist = euclidean(points.point(m), cp);
            if dist < nearest_dist[i] {
                nearest_dist[i] = dist;
                nearest[i] = slot;
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, &m) in members.iter().enumerate() {
        groups[nearest[i]].push(m);
    }
    centers.into_iter().zip(groups).filter(|(_, g)| !g.is_empty()).collect()
}

fn ball_radius(points: &PointSet<'_>, center: usize, members: &[usize]) -> f64 {
    let c = points.point(center);
    members.iter().map(|&m| euclidean(points.point(m), c)).fold(0.0, f64::max)
}

/// Builds the ball hierarchy over all points. `is_leaf(size, radius)`
/// decides where splitting stops; nodes with radius below
/// [`MIN_SPLIT_RADIUS`] are always leaves.
pub(crate) fn build_hierarchy(points: &PointSet<'_>, root_center: usize, is_leaf: impl Fn(usize, f64) -> bool) -> Vec<BallNode> {
    let all: Vec<usize> = (0..points.len()).collect();
    let radius = ball_radius(points, root_center, &all);
    let mut nodes = vec![BallNode {
        center: root_center,
        radius,
        members: all,
        children: Vec::new(),
    }];
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let (size, radius) = (nodes[id].members.len(), nodes[id].radius);
        if radius < MIN_SPLIT_RADIUS || is_leaf(size, radius) {
            continue;
        }
        let members = std::mem::take(&mut nodes[id].members);
        let groups = split_members(points, nodes[id].center, radius, &members);
        debug_assert!(groups.len() >= 2, "positive radius guarantees a second center");
        for (center, group) in groups {
            let r = ball_radius(points, center, &group);
            let child = nodes.len();
            nodes.push(BallNode {
                center,
                radius: r,
                members: group,
                children: Vec::new(),
            });
            nodes[id].children.push(child);
            stack.push(child);
        }
    }
    nodes
}

/// Rows in the geometry used for partitioning: the dataset itself for
/// Euclidean data, unit-normalized copies for cosine data.
pub(crate) fn metric_rows(ds: &VectorDataset) -> Result<(Vec<f64>, ThresholdSpace)> {
    match ds.kind() {
        DistanceKind::Euclidean => Ok((ds.flat().to_vec(), ThresholdSpace::Euclidean)),
        DistanceKind::Cosine => {
            let mut copy = ds.clone();
            if !copy.is_normalized() {
                copy.normalize()?;
            }
            Ok((copy.flat().to_vec(), ThresholdSpace::CosineOnSphere))
        }
    }
}

/// Leaf regions of the ball hierarchy. A node stays a leaf once it holds at
/// most `ratio · n` rows.
pub fn build_tree(ds: &VectorDataset, ratio: f64, seed: u64) -> Result<Vec<BallRegion>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("partition ratio must be in (0, 1], got {ratio}")));
    }
    if ds.is_empty() {
        return Err(Error::InvalidConfig("cannot partition an empty dataset".into()));
    }
    let (rows, _) = metric_rows(ds)?;
    let points = PointSet { d: ds.d(), data: &rows };
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root = rng.random_range(0..n);
    let limit = ratio * n as f64;
    let nodes = build_hierarchy(&points, root, |size, _| size as f64 <= limit);
    Ok(nodes
        .into_iter()
        .filter(|node| node.children.is_empty())
        .map(|node| BallRegion {
            center: points.point(node.center).to_vec(),
            radius: node.radius,
            members: node.members,
        })
        .collect())
}

/// Greedy longest-first assignment of regions to `k` clusters. Ties go to
/// the lowest cluster index; equal-size regions keep their input order.
/// Clusters left empty (fewer regions than `k`) are dropped.
pub fn merge_regions(regions: Vec<BallRegion>, k: usize, ratio: f64, space: ThresholdSpace) -> Result<PartitionLayout> {
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by(|&a, &b| regions[b].members.len().cmp(&regions[a].members.len()));
    let mut clusters: Vec<Cluster> = (0..k)
        .map(|_| Cluster {
            members: Vec::new(),
            balls: Vec::new(),
        })
        .collect();
    let mut slots: Vec<Option<BallRegion>> = regions.into_iter().map(Some).collect();
    for idx in order {
        let region = slots[idx].take().expect("each region assigned once");
        let target = (0..k).min_by_key(|&c| (clusters[c].members.len(), c)).expect("k >= 1");
        clusters[target].members.extend_from_slice(&region.members);
        clusters[target].balls.push(region);
    }
    clusters.retain(|c| !c.balls.is_empty());
    if clusters.len() < k {
        log::info!("only {} regions available; effective cluster count is {}", clusters.len(), clusters.len());
    }
    for c in &mut clusters {
        c.members.sort_unstable();
    }
    Ok(PartitionLayout {
        clusters,
        kind: LayoutKind::Metric,
        ratio,
        space,
    })
}

/// Ball-tree partitioning followed by greedy merging into `k` clusters.
pub fn partition_metric(ds: &VectorDataset, k: usize, ratio: f64, seed: u64) -> Result<PartitionLayout> {
    let regions = build_tree(ds, ratio, seed)?;
    let space = match ds.kind() {
        DistanceKind::Euclidean => ThresholdSpace::Euclidean,
        DistanceKind::Cosine => ThresholdSpace::CosineOnSphere,
    };
    merge_regions(regions, k, ratio, space)
}

/// Uniform random split into `k` clusters whose sizes differ by at most one.
pub fn partition_random(n: usize, k: usize, seed: u64) -> Result<PartitionLayout> {
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be at least 1".into()));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut clusters: Vec<Cluster> = (0..k)
        .map(|_| Cluster {
            members: Vec::new(),
            balls: Vec::new(),
        })
        .collect();
    for (pos, id) in ids.into_iter().enumerate() {
        clusters[pos % k].members.push(id);
    }
    for c in &mut clusters {
        c.members.sort_unstable();
    }
    Ok(PartitionLayout {
        clusters,
        kind: LayoutKind::Random,
        ratio: 1.0,
        space: ThresholdSpace::Euclidean,
    })
}

/// Slack added to the intersection test so that rounding in the distance
/// computation cannot turn a true intersection into a miss.
fn gate_slack(t: f64, radius: f64) -> f64 {
    1e-9 * (1.0 + t + radius)
}

impl PartitionLayout {
    /// Single cluster containing every row; the gate is always open.
    pub fn single(n: usize) -> Self {
        PartitionLayout {
            clusters: vec![Cluster {
                members: (0..n).collect(),
                balls: Vec::new(),
            }],
            kind: LayoutKind::Random,
            ratio: 1.0,
            space: ThresholdSpace::Euclidean,
        }
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::len).collect()
    }

    /// Maps a query into ball geometry: `(point, threshold)`.
    pub(crate) fn to_ball_space(&self, x: &[f64], t: f64) -> (Vec<f64>, f64) {
        match self.space {
            ThresholdSpace::Euclidean => (x.to_vec(), t),
            ThresholdSpace::CosineOnSphere => {
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let unit = if norm > 0.0 {
                    x.iter().map(|v| v / norm).collect()
                } else {
                    x.to_vec()
                };
                (unit, (2.0 * t.max(0.0)).sqrt())
            }
        }
    }

    /// Per-cluster intersection bits for the query ball `(x, t)`.
    pub fn gate(&self, x: &[f64], t: f64) -> Vec<bool> {
        match self.kind {
            LayoutKind::Random => vec![true; self.k()],
            LayoutKind::Metric => {
                let (q, tq) = self.to_ball_space(x, t);
                self.clusters
                    .iter()
                    .map(|c| {
                        c.balls
                            .iter()
                            .any(|b| euclidean(&q, &b.center) <= tq + b.radius + gate_slack(tq, b.radius))
                    })
                    .collect()
            }
        }
    }

    /// Cluster index per row (`usize::MAX` for rows in no cluster).
    pub fn assignment(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (ci, c) in self.clusters.iter().enumerate() {
            for &m in &c.members {
                if m < n {
                    out[m] = ci;
                }
            }
        }
        out
    }

    /// Checks disjointness and coverage of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (ci, c) in self.clusters.iter().enumerate() {
            for &m in &c.members {
                if m >= n {
                    return Err(Error::Contract(format!("cluster {ci} references row {m} >= {n}")));
                }
                if std::mem::replace(&mut seen[m], true) {
                    return Err(Error::Contract(format!("row {m} appears in more than one cluster")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("row {missing} is in no cluster")));
        }
        Ok(())
    }

    /// Adds a new row to the cluster owning the nearest ball center and
    /// grows that ball if needed. Non-metric layouts use the smallest cluster.
    pub(crate) fn insert_row(&mut self, id: usize, row: &[f64]) {
        match self.kind {
            LayoutKind::Random => {
                let target = (0..self.k()).min_by_key(|&c| (self.clusters[c].len(), c)).unwrap_or(0);
                self.clusters[target].members.push(id);
            }
            LayoutKind::Metric => {
                let (q, _) = self.to_ball_space(row, 0.0);
                let mut best: Option<(usize, usize, f64)> = None;
                for (ci, c) in self.clusters.iter().enumerate() {
                    for (bi, b) in c.balls.iter().enumerate() {
                        let dist = euclidean(&q, &b.center);
                        if best.is_none_or(|(_, _, bd)| dist < bd) {
                            best = Some((ci, bi, dist));
                        }
                    }
                }
                match best {
                    Some((ci, bi, dist)) => {
                        let ball = &mut self.clusters[ci].balls[bi];
                        ball.members.push(id);
                        ball.radius = ball.radius.max(dist);
                        self.clusters[ci].members.push(id);
                    }
                    None => {
                        let c = &mut self.clusters[0];
                        c.members.push(id);
                        c.balls.push(BallRegion {
                            members: vec![id],
                            center: q,
                            radius: 0.0,
                        });
                    }
                }
            }
        }
    }

    /// Rewrites row ids after deletions; `remap[old]` is the new id or
    /// `None` for deleted rows. Balls left empty are dropped.
    pub(crate) fn remap_rows(&mut self, remap: &[Option<usize>]) {
        let apply = |ids: &mut Vec<usize>| {
            *ids = ids.iter().filter_map(|&i| remap.get(i).copied().flatten()).collect();
        };
        for c in &mut self.clusters {
            apply(&mut c.members);
            for b in &mut c.balls {
                apply(&mut b.members);
            }
            c.balls.retain(|b| !b.members.is_empty());
        }
    }

    /// JSON summary for inspection: sizes plus ball centers and radii.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "ratio": self.ratio,
            "space": self.space,
            "k": self.k(),
            "cluster_sizes": self.sizes(),
            "clusters": self.clusters.iter().map(|c| serde_json::json!({
                "size": c.len(),
                "balls": c.balls.iter().map(|b| serde_json::json!({
                    "center": b.center,
                    "radius": b.radius,
                    "size": b.members.len(),
                })).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}
