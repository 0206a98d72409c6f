//! Manipulation-relation graph and grasp ordering.
//!
//! An edge `a → b` means object `a` rests on object `b`, so `a` has to be
//! removed before `b` can be grasped safely. The structure is a DAG rather
//! than a tree because an object may rest on several supports. All ties are
//! broken by ascending object id.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::Serialize;
use thiserror::Error;

use crate::scene::{relation_inverse, ObjectBox, ObjectId, Relation, RelationKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("conflicting relations: {0} on {1} and {1} on {0}")]
    Conflict(ObjectId, ObjectId),
    #[error("relation references unknown object {0}")]
    UnknownObject(ObjectId),
    #[error("target {0} is not in the graph")]
    UnknownTarget(ObjectId),
    #[error("relation graph has cycles: {}", format_cycles(.0))]
    Cycle(Vec<Vec<ObjectId>>),
}

fn format_cycles(cycles: &[Vec<ObjectId>]) -> String {
    cycles
        .iter()
        .map(|c| {
            let mut s: Vec<String> = c.iter().map(|id| id.to_string()).collect();
            s.push(c[0].to_string());
            s.join("->")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Two directional relation distributions for the unordered pair `i < j`.
///
/// Probability vectors are indexed `[On, Under, NoRel]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPrediction {
    pub pair: (ObjectId, ObjectId),
    pub probs_ij: [f64; 3],
    pub probs_ji: [f64; 3],
}

/// A relation together with the combined score that selected it, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRelation {
    pub relation: Relation,
    pub confidence: f64,
}

/// Reconciles both directions of a pair into one canonical relation.
///
/// `score(k) = p_ij[k] + p_ji[inverse(k)]`; the highest score wins and exact
/// ties resolve in the order On, Under, NoRel.
pub fn symmetrize_scored(p: &PairPrediction) -> ScoredRelation {
    let mut best = RelationKind::On;
    let mut best_score = f64::NEG_INFINITY;
    for kind in RelationKind::ALL {
        let score = p.probs_ij[kind.index()] + p.probs_ji[relation_inverse(kind).index()];
        if score > best_score {
            best = kind;
            best_score = score;
        }
    }
    ScoredRelation {
        relation: Relation::new(p.pair.0, p.pair.1, best),
        confidence: 0.5 * best_score,
    }
}

pub fn symmetrize_pair(p: &PairPrediction) -> Relation {
    symmetrize_scored(p).relation
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RelationGraph {
    nodes: BTreeSet<ObjectId>,
    edges: BTreeSet<(ObjectId, ObjectId)>,
    #[serde(skip)]
    weights: BTreeMap<(ObjectId, ObjectId), f64>,
}

impl RelationGraph {
    pub fn with_nodes(nodes: impl IntoIterator<Item = ObjectId>) -> Self {
        Self {
            nodes: nodes.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Adds `on_top → below` unless it is a self-edge.
    pub fn add_edge(&mut self, on_top: ObjectId, below: ObjectId, weight: f64) {
        if on_top == below {
            return;
        }
        self.nodes.insert(on_top);
        self.nodes.insert(below);
        self.edges.insert((on_top, below));
        self.weights.insert((on_top, below), weight);
    }

    pub fn remove_edge(&mut self, a: ObjectId, b: ObjectId) -> bool {
        self.weights.remove(&(a, b));
        self.edges.remove(&(a, b))
    }

    pub fn nodes(&self) -> &BTreeSet<ObjectId> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(ObjectId, ObjectId)> {
        &self.edges
    }

    pub fn weight(&self, a: ObjectId, b: ObjectId) -> Option<f64> {
        self.weights.get(&(a, b)).copied()
    }

    fn successors(&self) -> BTreeMap<ObjectId, Vec<ObjectId>> {
        let mut adj: BTreeMap<ObjectId, Vec<ObjectId>> = self.nodes.iter().map(|&n| (n, Vec::new())).collect();
        for &(a, b) in &self.edges {
            adj.entry(a).or_default().push(b);
        }
        adj
    }

    /// Graph restricted to `keep`.
    pub fn induced(&self, keep: &BTreeSet<ObjectId>) -> Self {
        let mut g = Self::with_nodes(self.nodes.intersection(keep).copied());
        for &(a, b) in &self.edges {
            if keep.contains(&a) && keep.contains(&b) {
                g.edges.insert((a, b));
                if let Some(&w) = self.weights.get(&(a, b)) {
                    g.weights.insert((a, b), w);
                }
            }
        }
        g
    }

    /// `On` facts encoded by the edges, in canonical direction.
    pub fn to_relations(&self) -> Vec<Relation> {
        self.edges
            .iter()
            .map(|&(a, b)| Relation::new(a, b, RelationKind::On).canonical())
            .collect()
    }
}

/// Builds the graph from canonical or non-canonical relation facts.
pub fn build_graph(objects: &[ObjectBox], rels: &[Relation]) -> Result<RelationGraph, PlanError> {
    build_weighted_graph(objects, rels.iter().map(|&r| (r, 1.0)))
}

pub fn build_weighted_graph(
    objects: &[ObjectBox],
    rels: impl IntoIterator<Item = (Relation, f64)>,
) -> Result<RelationGraph, PlanError> {
    let mut g = RelationGraph::with_nodes(objects.iter().map(|o| o.id));
    for (r, w) in rels {
        for id in [r.from_id, r.to_id] {
            if !g.nodes.contains(&id) {
                return Err(PlanError::UnknownObject(id));
            }
        }
        let (top, below) = match r.kind {
            RelationKind::On => (r.from_id, r.to_id),
            RelationKind::Under => (r.to_id, r.from_id),
            RelationKind::NoRel => continue,
        };
        if g.edges.contains(&(below, top)) {
            return Err(PlanError::Conflict(top, below));
        }
        g.add_edge(top, below, w);
    }
    Ok(g)
}

/// Objects with nothing resting on them.
pub fn graspable_set(g: &RelationGraph) -> BTreeSet<ObjectId> {
    let covered: BTreeSet<_> = g.edges.iter().map(|&(_, b)| b).collect();
    g.nodes.difference(&covered).copied().collect()
}

/// All elementary cycles, each listed from its smallest id.
///
/// Cycles are enumerated by depth-first search restricted to nodes larger
/// than the start node, so each cycle is found exactly once per rotation.
pub fn detect_cycles(g: &RelationGraph) -> Vec<Vec<ObjectId>> {
    let adj = g.successors();
    let mut cycles = Vec::new();
    for &start in &g.nodes {
        let mut path = vec![start];
        let mut on_path = BTreeSet::from([start]);
        extend_cycles(&adj, start, &mut path, &mut on_path, &mut cycles);
    }
    cycles
}

fn extend_cycles(
    adj: &BTreeMap<ObjectId, Vec<ObjectId>>,
    start: ObjectId,
    path: &mut Vec<ObjectId>,
    on_path: &mut BTreeSet<ObjectId>,
    cycles: &mut Vec<Vec<ObjectId>>,
) {
    let last = *path.last().unwrap();
    for &next in adj.get(&last).map(Vec::as_slice).unwrap_or_default() {
        if next == start {
            cycles.push(path.clone());
        } else if next > start && !on_path.contains(&next) {
            path.push(next);
            on_path.insert(next);
            extend_cycles(adj, start, path, on_path, cycles);
            on_path.remove(&next);
            path.pop();
        }
    }
}

/// Kahn's algorithm with a min-heap so ties resolve by ascending id.
fn removal_order(g: &RelationGraph) -> Result<Vec<ObjectId>, PlanError> {
    let adj = g.successors();
    let mut indegree: BTreeMap<ObjectId, usize> = g.nodes.iter().map(|&n| (n, 0)).collect();
    for &(_, b) in &g.edges {
        *indegree.get_mut(&b).unwrap() += 1;
    }
    let mut ready: BinaryHeap<Reverse<ObjectId>> =
        indegree.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| Reverse(n)).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(Reverse(n)) = ready.pop() {
        order.push(n);
        for &m in &adj[&n] {
            let d = indegree.get_mut(&m).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(m));
            }
        }
    }
    if order.len() == g.nodes.len() {
        Ok(order)
    } else {
        Err(PlanError::Cycle(detect_cycles(g)))
    }
}

/// Removal order that clears every object, each one graspable when its turn comes.
pub fn full_clearing_order(g: &RelationGraph) -> Result<Vec<ObjectId>, PlanError> {
    removal_order(g)
}

/// Objects that must be cleared before `target` (everything resting on it,
/// transitively), followed by `target` itself.
pub fn grasp_order_for_target(g: &RelationGraph, target: ObjectId) -> Result<Vec<ObjectId>, PlanError> {
    if !g.nodes.contains(&target) {
        return Err(PlanError::UnknownTarget(target));
    }
    let mut blockers = BTreeSet::from([target]);
    let mut frontier = vec![target];
    while let Some(n) = frontier.pop() {
        for &(a, b) in &g.edges {
            if b == n && blockers.insert(a) {
                frontier.push(a);
            }
        }
    }
    removal_order(&g.induced(&blockers))
}

/// Removes the lowest-weight edge of some cycle until the graph is acyclic.
///
/// Returns the removed edges in removal order. Weight ties fall to the
/// smallest `(from, to)` pair.
pub fn break_cycles_weakest_edge(g: &mut RelationGraph) -> Vec<(ObjectId, ObjectId)> {
    let mut removed = Vec::new();
    loop {
        let cycles = detect_cycles(g);
        let Some(cycle) = cycles.first() else {
            return removed;
        };
        let weakest = (0..cycle.len())
            .map(|i| (cycle[i], cycle[(i + 1) % cycle.len()]))
            .min_by(|x, y| {
                let wx = g.weight(x.0, x.1).unwrap_or(1.0);
                let wy = g.weight(y.0, y.1).unwrap_or(1.0);
                wx.total_cmp(&wy).then(x.cmp(y))
            })
            .unwrap();
        g.remove_edge(weakest.0, weakest.1);
        removed.push(weakest);
    }
}

/// Serializable relation tree: `{"nodes": [...], "edges": [[a, b], ...], "order": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeDocument {
    pub nodes: Vec<ObjectId>,
    pub edges: Vec<[ObjectId; 2]>,
    pub order: Vec<ObjectId>,
}

impl TreeDocument {
    pub fn new(g: &RelationGraph, order: Vec<ObjectId>) -> Self {
        Self {
            nodes: g.nodes.iter().copied().collect(),
            edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
            order,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree document serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: u32, edges: &[(u32, u32)]) -> RelationGraph {
        let mut g = RelationGraph::with_nodes(0..n);
        for &(a, b) in edges {
            g.add_edge(a, b, 1.0);
        }
        g
    }

    fn objs(n: u32) -> Vec<ObjectBox> {
        (0..n).map(|i| ObjectBox::new(i, i, 0.0, 0.0, 1.0, 1.0)).collect()
    }

    #[test]
    fn symmetrize_examples() {
        let p = PairPrediction {
            pair: (0, 1),
            probs_ij: [0.9, 0.05, 0.05],
            probs_ji: [0.05, 0.9, 0.05],
        };
        assert_eq!(symmetrize_pair(&p).kind, RelationKind::On);
        let p = PairPrediction {
            pair: (0, 1),
            probs_ij: [0.0, 0.0, 1.0],
            probs_ji: [0.0, 0.0, 1.0],
        };
        assert_eq!(symmetrize_pair(&p).kind, RelationKind::NoRel);
        // On: 0.5 + 0.5, Under: 0.5 + 0.5, NoRel: 0 -> tie goes to On.
        let p = PairPrediction {
            pair: (0, 1),
            probs_ij: [0.5, 0.5, 0.0],
            probs_ji: [0.5, 0.5, 0.0],
        };
        let s = symmetrize_scored(&p);
        assert_eq!(s.relation.kind, RelationKind::On);
        assert!((s.confidence - 0.5).abs() < 1e-12);
    }

    #[test]
    fn build_graph_examples() {
        let g = build_graph(&objs(2), &[Relation::new(0, 1, RelationKind::On)]).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
        let g = build_graph(
            &objs(3),
            &[
                Relation::new(0, 1, RelationKind::NoRel),
                Relation::new(0, 2, RelationKind::NoRel),
                Relation::new(1, 2, RelationKind::NoRel),
            ],
        )
        .unwrap();
        assert!(g.edges().is_empty());
        let g = build_graph(&objs(2), &[Relation::new(0, 1, RelationKind::Under)]).unwrap();
        assert!(g.edges().contains(&(1, 0)));
    }

    #[test]
    fn build_graph_rejects_contradictions() {
        let err = build_graph(
            &objs(2),
            &[Relation::new(0, 1, RelationKind::On), Relation::new(1, 0, RelationKind::On)],
        )
        .unwrap_err();
        assert_eq!(err, PlanError::Conflict(1, 0));
        let err = build_graph(&objs(2), &[Relation::new(0, 9, RelationKind::On)]).unwrap_err();
        assert_eq!(err, PlanError::UnknownObject(9));
    }

    #[test]
    fn figure_scene_box_toothpaste_tape() {
        // box = 0, toothpaste = 1, tape = 2
        let g = build_graph(
            &objs(3),
            &[
                Relation::new(0, 1, RelationKind::On),
                Relation::new(1, 2, RelationKind::On),
                Relation::new(0, 2, RelationKind::NoRel),
            ],
        )
        .unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
        assert_eq!(grasp_order_for_target(&g, 2).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn graspable_examples() {
        assert_eq!(graspable_set(&graph(2, &[(0, 1)])), BTreeSet::from([0]));
        assert_eq!(graspable_set(&graph(3, &[])), BTreeSet::from([0, 1, 2]));
        assert_eq!(graspable_set(&graph(3, &[(0, 2), (1, 2)])), BTreeSet::from([0, 1]));
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(detect_cycles(&graph(2, &[(0, 1), (1, 0)])), vec![vec![0, 1]]);
        assert!(detect_cycles(&graph(3, &[(0, 1), (1, 2), (0, 2)])).is_empty());
        assert_eq!(detect_cycles(&graph(3, &[(0, 1), (1, 2), (2, 0)])), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn target_order_examples() {
        assert_eq!(grasp_order_for_target(&graph(4, &[]), 3).unwrap(), vec![3]);
        assert_eq!(grasp_order_for_target(&graph(3, &[(0, 2), (1, 2)]), 2).unwrap(), vec![0, 1, 2]);
        assert_eq!(grasp_order_for_target(&graph(2, &[]), 5), Err(PlanError::UnknownTarget(5)));
        // Cycle above the target blocks planning; a cycle elsewhere does not.
        let g = graph(4, &[(0, 1), (1, 0), (1, 2), (3, 3)]);
        assert!(matches!(grasp_order_for_target(&g, 2), Err(PlanError::Cycle(_))));
        let g = graph(4, &[(0, 1), (1, 0), (3, 2)]);
        assert_eq!(grasp_order_for_target(&g, 2).unwrap(), vec![3, 2]);
    }

    #[test]
    fn clearing_order_examples() {
        assert_eq!(full_clearing_order(&graph(2, &[(0, 1)])).unwrap(), vec![0, 1]);
        assert_eq!(full_clearing_order(&graph(3, &[])).unwrap(), vec![0, 1, 2]);
        assert_eq!(full_clearing_order(&graph(3, &[(0, 1), (1, 2), (0, 2)])).unwrap(), vec![0, 1, 2]);
        let err = full_clearing_order(&graph(2, &[(0, 1), (1, 0)])).unwrap_err();
        assert_eq!(err, PlanError::Cycle(vec![vec![0, 1]]));
        assert_eq!(err.to_string(), "relation graph has cycles: 0->1->0");
    }

    #[test]
    fn weakest_edge_breaking() {
        let mut g = RelationGraph::with_nodes(0..3);
        g.add_edge(0, 1, 0.9);
        g.add_edge(1, 2, 0.6);
        g.add_edge(2, 0, 0.4);
        assert_eq!(break_cycles_weakest_edge(&mut g), vec![(2, 0)]);
        assert_eq!(full_clearing_order(&g).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn tree_json_layout() {
        let g = graph(3, &[(0, 1)]);
        let doc = TreeDocument::new(&g, full_clearing_order(&g).unwrap());
        assert_eq!(doc.to_json(), r#"{"nodes":[0,1,2],"edges":[[0,1]],"order":[0,1,2]}"#);
    }

    #[test]
    fn edges_round_trip_through_relations() {
        let g = graph(4, &[(0, 1), (2, 1), (3, 0)]);
        let back = build_graph(&objs(4), &g.to_relations()).unwrap();
        assert_eq!(back.edges(), g.edges());
    }
}
