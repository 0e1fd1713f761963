//! Vertical-aware facade graphs.
//!
//! Two detections are joined when their normalized vertical center distance
//! is at most an adaptive threshold `tau`, derived per facade from the largest
//! gaps between sorted y-centers. Connected components of the resulting
//! graph give the weak floor labels used for training.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facade::{clamp_box, edge_features, node_features, EdgeFeatures, FacadeRecord, NodeFeatures};

/// Threshold used when fewer than two distinct y-centers exist.
pub const TAU_FALLBACK: f64 = 0.05;

/// Which vertical gaps feed the adaptive threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GapMode {
    /// Differences between consecutive sorted y-centers (row pitch).
    #[default]
    Consecutive,
    /// All pairwise y-center distances.
    Pairwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub top_k: usize,
    pub alpha: f64,
    pub gap_mode: GapMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            top_k: 3,
            alpha: 0.5,
            gap_mode: GapMode::Consecutive,
        }
    }
}

/// `alpha` times the mean of the `k` largest consecutive gaps.
pub fn compute_tau(y_centers_norm: &[f64], k: usize, alpha: f64) -> Result<f64> {
    compute_tau_with(y_centers_norm, k, alpha, GapMode::Consecutive)
}

pub fn compute_tau_with(y_centers_norm: &[f64], k: usize, alpha: f64, mode: GapMode) -> Result<f64> {
    if y_centers_norm.is_empty() {
        return Err(Error::invalid("compute_tau needs at least one y-center"));
    }
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut gaps = match mode {
        GapMode::Consecutive => {
            let mut ys = y_centers_norm.to_vec();
            ys.sort_by(f64::total_cmp);
            ys.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()
        }
        GapMode::Pairwise => {
            let ys = y_centers_norm;
            let mut g = Vec::new();
            for i in 0..ys.len() {
                for j in i + 1..ys.len() {
                    g.push((ys[i] - ys[j]).abs());
                }
            }
            g
        }
    };
    gaps.sort_by(|a, b| b.total_cmp(a));
    gaps.truncate(k);
    if gaps.is_empty() {
        return Ok(TAU_FALLBACK);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    if mean <= 0.0 {
        return Ok(TAU_FALLBACK);
    }
    Ok(alpha * mean)
}

/// Graph over the detections of one facade.
#[derive(Clone, Debug)]
pub struct FacadeGraph {
    pub facade_id: String,
    pub nodes: Vec<NodeFeatures>,
    /// Undirected edges `(i, j)` with `i < j`, in lexicographic order.
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<EdgeFeatures>,
    adjacency: Vec<bool>,
    pub tau: f64,
    /// `[tau, rho, sigma_y]`.
    pub global: [f64; 3],
    /// Clamped pixel y-centers; used to order components bottom-up.
    pub y_centers_px: Vec<f64>,
    /// Boxes that had to be clipped to the image frame.
    pub clamped_boxes: usize,
}

impl FacadeGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.len() + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..self.len()).filter(|&j| self.adjacent(i, j)).count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| self.adjacent(i, j))
    }

    /// Normalized vertical center distance between two nodes.
    pub fn dy(&self, i: usize, j: usize) -> f64 {
        (self.nodes[i].center_y() - self.nodes[j].center_y()).abs()
    }

    /// A copy with nodes reordered so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<FacadeGraph> {
        let n = self.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the node set"));
        }
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut adjacency = vec![false; n * n];
        for a in 0..n {
            for b in 0..n {
                adjacency[a * n + b] = self.adjacent(perm[a], perm[b]);
            }
        }
        let mut pairs: Vec<((usize, usize), EdgeFeatures)> = self
            .edges
            .iter()
            .zip(&self.edge_features)
            .map(|(&(i, j), &f)| {
                let (a, b) = (inverse[i], inverse[j]);
                ((a.min(b), a.max(b)), f)
            })
            .collect();
        pairs.sort_by_key(|p| p.0);
        Ok(FacadeGraph {
            facade_id: self.facade_id.clone(),
            nodes: perm.iter().map(|&p| self.nodes[p]).collect(),
            edges: pairs.iter().map(|p| p.0).collect(),
            edge_features: pairs.iter().map(|p| p.1).collect(),
            adjacency,
            tau: self.tau,
            global: self.global,
            y_centers_px: perm.iter().map(|&p| self.y_centers_px[p]).collect(),
            clamped_boxes: self.clamped_boxes,
        })
    }
}

/// Builds the vertical-aware graph of a facade record.
pub fn build_graph(record: &FacadeRecord, cfg: &GraphConfig) -> Result<FacadeGraph> {
    record.validate()?;
    let (w, h) = (record.width as f64, record.height as f64);
    let n = record.boxes.len();
    let mut nodes = Vec::with_capacity(n);
    let mut y_px = Vec::with_capacity(n);
    let mut clamped_boxes = 0;
    for (i, b) in record.boxes.iter().enumerate() {
        let (c, moved) = clamp_box(b, w, h);
        clamped_boxes += usize::from(moved);
        nodes.push(
            node_features(b, w, h).map_err(|e| Error::invalid(format!("facade `{}` box {i}: {e}", record.facade_id)))?,
        );
        y_px.push(c.center().1);
    }
    if n == 0 {
        return Ok(FacadeGraph {
            facade_id: record.facade_id.clone(),
            nodes,
            edges: Vec::new(),
            edge_features: Vec::new(),
            adjacency: Vec::new(),
            tau: TAU_FALLBACK,
            global: [TAU_FALLBACK, 0.0, 0.0],
            y_centers_px: y_px,
            clamped_boxes,
        });
    }
    let ys: Vec<f64> = nodes.iter().map(NodeFeatures::center_y).collect();
    let tau = compute_tau_with(&ys, cfg.top_k, cfg.alpha, cfg.gap_mode)?;

    let mut adjacency = vec![false; n * n];
    let mut edges = Vec::new();
    let mut edge_feats = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if (ys[i] - ys[j]).abs() <= tau {
                adjacency[i * n + j] = true;
                adjacency[j * n + i] = true;
                edges.push((i, j));
                edge_feats.push(edge_features(&record.boxes[i], &record.boxes[j], w, h));
            }
        }
    }

    let rho = nodes.iter().map(|f| f.width() * f.height()).sum();
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let sigma_y = (ys.iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n as f64).sqrt();
    Ok(FacadeGraph {
        facade_id: record.facade_id.clone(),
        nodes,
        edges,
        edge_features: edge_feats,
        adjacency,
        tau,
        global: [tau, rho, sigma_y],
        y_centers_px: y_px,
        clamped_boxes,
    })
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    sets: usize,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            sets: n,
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns `false` if the two were already joined.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        self.sets -= 1;
        true
    }

    pub fn set_count(&self) -> usize {
        self.sets
    }
}

/// Weak floor labels from connected components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabels {
    /// Number of components (0 only for an empty graph).
    pub count: usize,
    /// Floor slot per node; slot 0 is the lowest component in the image.
    pub floor_ids: Vec<usize>,
    /// Slot of each raw component, raw components numbered by first node.
    pub component_order: Vec<usize>,
}

pub fn pseudo_labels(graph: &FacadeGraph) -> PseudoLabels {
    let n = graph.len();
    let mut uf = UnionFind::new(n);
    for &(i, j) in &graph.edges {
        uf.union(i, j);
    }
    let mut raw_of_root = vec![usize::MAX; n];
    let mut raw = vec![0; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let r = uf.find(i);
        if raw_of_root[r] == usize::MAX {
            raw_of_root[r] = members.len();
            members.push(Vec::new());
        }
        raw[i] = raw_of_root[r];
        members[raw[i]].push(i);
    }
    let mean_y: Vec<f64> = members
        .iter()
        .map(|m| m.iter().map(|&i| graph.y_centers_px[i]).sum::<f64>() / m.len() as f64)
        .collect();
    let mut order: Vec<usize> = (0..members.len()).collect();
    // larger pixel y is lower in the image; ties keep raw (first-node) order
    order.sort_by(|&a, &b| mean_y[b].total_cmp(&mean_y[a]).then(a.cmp(&b)));
    let mut component_order = vec![0; members.len()];
    for (slot, &c) in order.iter().enumerate() {
        component_order[c] = slot;
    }
    PseudoLabels {
        count: members.len(),
        floor_ids: raw.iter().map(|&c| component_order[c]).collect(),
        component_order,
    }
}

/// Component count by breadth-first search over the adjacency matrix.
/// Independent of [`UnionFind`]; used to cross-check [`pseudo_labels`].
pub fn components_bfs(graph: &FacadeGraph) -> usize {
    let n = graph.len();
    let mut seen = vec![false; n];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for v in graph.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    count
}

/// Line of the `graph` command's JSONL output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub facade_id: String,
    pub tau: f64,
    pub g: [f64; 3],
    pub edges: Vec<[usize; 2]>,
    pub pseudo_count: usize,
    pub pseudo_ids: Vec<usize>,
}

impl GraphSummary {
    pub fn new(graph: &FacadeGraph, labels: &PseudoLabels) -> Self {
        Self {
            facade_id: graph.facade_id.clone(),
            tau: graph.tau,
            g: graph.global,
            edges: graph.edges.iter().map(|&(i, j)| [i, j]).collect(),
            pseudo_count: labels.count,
            pseudo_ids: labels.floor_ids.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facade::{Category, DetectionBox};
    use proptest::prelude::*;

    fn record_with_centers(ys_px: &[f64], height: u32) -> FacadeRecord {
        FacadeRecord {
            facade_id: "t".into(),
            width: 100,
            height,
            boxes: ys_px
                .iter()
                .enumerate()
                .map(|(i, &y)| DetectionBox::new((7 * i % 90) as f64, y - 2.0, 4.0, 4.0, Category::Window))
                .collect(),
            floor_count: None,
        }
    }

    #[test]
    fn tau_hand_trace() {
        let tau = compute_tau(&[0.2, 0.22, 0.6], 3, 0.5).unwrap();
        assert!((tau - 0.10).abs() < 1e-15, "{tau}");
    }

    #[test]
    fn tau_fallbacks() {
        assert_eq!(compute_tau(&[0.4], 3, 0.5).unwrap(), TAU_FALLBACK);
        assert_eq!(compute_tau(&[0.3, 0.3, 0.3], 3, 0.5).unwrap(), TAU_FALLBACK);
        assert!(compute_tau(&[], 3, 0.5).is_err());
        assert!(compute_tau(&[0.1, 0.2], 0, 0.5).is_err());
    }

    #[test]
    fn pairwise_gaps_are_larger() {
        let ys = [0.1, 0.2, 0.3, 0.4, 0.5];
        let c = compute_tau_with(&ys, 3, 0.5, GapMode::Consecutive).unwrap();
        let p = compute_tau_with(&ys, 3, 0.5, GapMode::Pairwise).unwrap();
        assert!((c - 0.05).abs() < 1e-12);
        assert!((p - 0.5 * (0.4 + 0.3 + 0.3) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn three_node_fixture() {
        let rec = record_with_centers(&[200.0, 220.0, 600.0], 1000);
        let g = build_graph(&rec, &GraphConfig::default()).unwrap();
        assert!((g.tau - 0.10).abs() < 1e-12);
        assert_eq!(g.edges, vec![(0, 1)]);
        let labels = pseudo_labels(&g);
        assert_eq!(labels.count, 2);
        // the 0.6 row is lowest in the image, so it is slot 0
        assert_eq!(labels.floor_ids, vec![1, 1, 0]);
        assert_eq!(labels.component_order, vec![1, 0]);
    }

    #[test]
    fn same_row_far_apart_is_connected() {
        let mut rec = record_with_centers(&[500.0, 500.0], 1000);
        rec.boxes[1].x = 95.0;
        let g = build_graph(&rec, &GraphConfig::default()).unwrap();
        assert!(g.adjacent(0, 1));
        assert_eq!(pseudo_labels(&g).count, 1);
    }

    #[test]
    fn empty_graph() {
        let rec = record_with_centers(&[], 100);
        let g = build_graph(&rec, &GraphConfig::default()).unwrap();
        assert_eq!(g.global, [0.05, 0.0, 0.0]);
        assert!(g.edges.is_empty());
        assert_eq!(pseudo_labels(&g).count, 0);
    }

    #[test]
    fn fully_connected_and_edgeless() {
        let rec = record_with_centers(&[50.0, 50.0, 50.0, 50.0], 100);
        let g = build_graph(&rec, &GraphConfig { alpha: 1.0, ..Default::default() }).unwrap();
        let l = pseudo_labels(&g);
        assert_eq!((l.count, l.floor_ids.clone()), (1, vec![0; 4]));

        let rec = record_with_centers(&[10.0, 30.0, 50.0, 70.0, 90.0], 100);
        let g = build_graph(&rec, &GraphConfig { alpha: 0.5, ..Default::default() }).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(pseudo_labels(&g).count, 5);
        assert_eq!(components_bfs(&g), 5);
    }

    #[test]
    fn global_vector_entries() {
        let rec = record_with_centers(&[20.0, 80.0], 100);
        let g = build_graph(&rec, &GraphConfig::default()).unwrap();
        assert!((g.global[1] - 2.0 * 0.04 * 0.04).abs() < 1e-15);
        assert!((g.global[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn clamped_boxes_are_counted() {
        let mut rec = record_with_centers(&[50.0, 50.0], 100);
        rec.boxes[0].x = -3.0;
        let g = build_graph(&rec, &GraphConfig::default()).unwrap();
        assert_eq!(g.clamped_boxes, 1);
    }

    fn arb_centers() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(5.0f64..995.0, 1..25)
    }

    proptest! {
        #[test]
        fn union_find_matches_bfs(ys in arb_centers(), alpha in 0.0f64..1.0) {
            let rec = record_with_centers(&ys, 1000);
            let g = build_graph(&rec, &GraphConfig { alpha, ..Default::default() }).unwrap();
            let l = pseudo_labels(&g);
            prop_assert_eq!(l.count, components_bfs(&g));
            let distinct: std::collections::BTreeSet<_> = l.floor_ids.iter().collect();
            prop_assert_eq!(distinct.len(), l.count);
            for &(i, j) in &g.edges {
                prop_assert_eq!(l.floor_ids[i], l.floor_ids[j]);
            }
        }

        #[test]
        fn horizontal_translation_keeps_edges(ys in arb_centers(), shift in -50.0f64..50.0) {
            let rec = record_with_centers(&ys, 1000);
            let mut moved = rec.clone();
            for b in &mut moved.boxes {
                b.x = (b.x + shift).clamp(0.0, 90.0);
            }
            let a = build_graph(&rec, &GraphConfig::default()).unwrap();
            let b = build_graph(&moved, &GraphConfig::default()).unwrap();
            prop_assert_eq!(a.edges, b.edges);
        }

        #[test]
        fn vertical_scaling_keeps_pseudo_count(ys in arb_centers(), pow in 0u32..3) {
            let scale = 1u32 << pow;
            let rec = record_with_centers(&ys, 1000);
            let mut scaled = rec.clone();
            scaled.height *= scale;
            for b in &mut scaled.boxes {
                b.y *= scale as f64;
                b.h *= scale as f64;
            }
            let a = build_graph(&rec, &GraphConfig::default()).unwrap();
            let b = build_graph(&scaled, &GraphConfig::default()).unwrap();
            prop_assert_eq!(pseudo_labels(&a).count, pseudo_labels(&b).count);
        }

        #[test]
        fn connected_nodes_have_close_neighbor(ys in arb_centers()) {
            let rec = record_with_centers(&ys, 1000);
            let g = build_graph(&rec, &GraphConfig::default()).unwrap();
            let l = pseudo_labels(&g);
            for i in 0..g.len() {
                if g.degree(i) > 0 {
                    prop_assert!(g.neighbors(i).any(|j| l.floor_ids[j] == l.floor_ids[i] && g.dy(i, j) <= g.tau));
                }
            }
        }
    }
}
