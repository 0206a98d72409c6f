//! Planning from ground-truth or predicted relations.

use stackgrasp_core::planner::{break_cycles_weakest_edge, TreeDocument};
use stackgrasp_core::{
    full_clearing_order, grasp_order_for_target, ObjectBox, ObjectId, PlanError, Relation, RelationGraph, RelationKind,
};

/// Like `build_weighted_graph`, except that contradicting facts about one
/// pair become a two-node cycle instead of an error, so they can be reported
/// or broken like any other cycle.
pub fn loose_graph(
    objects: &[ObjectBox],
    rels: impl IntoIterator<Item = (Relation, f64)>,
) -> Result<RelationGraph, PlanError> {
    let mut g = RelationGraph::with_nodes(objects.iter().map(|o| o.id));
    for (r, w) in rels {
        for id in [r.from_id, r.to_id] {
            if !g.nodes().contains(&id) {
                return Err(PlanError::UnknownObject(id));
            }
        }
        match r.kind {
            RelationKind::On => g.add_edge(r.from_id, r.to_id, w),
            RelationKind::Under => g.add_edge(r.to_id, r.from_id, w),
            RelationKind::NoRel => {}
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub tree: TreeDocument,
    /// Blockers of the target followed by the target itself.
    pub target_order: Option<Vec<ObjectId>>,
    /// Edges dropped to make the graph acyclic.
    pub removed: Vec<(ObjectId, ObjectId)>,
}

pub fn plan(mut g: RelationGraph, break_cycles: bool, target: Option<ObjectId>) -> Result<Plan, PlanError> {
    let removed = if break_cycles {
        break_cycles_weakest_edge(&mut g)
    } else {
        Vec::new()
    };
    let order = full_clearing_order(&g)?;
    let target_order = target.map(|t| grasp_order_for_target(&g, t)).transpose()?;
    Ok(Plan {
        tree: TreeDocument::new(&g, order),
        target_order,
        removed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxes(n: u32) -> Vec<ObjectBox> {
        (0..n).map(|i| ObjectBox::new(i, i, 0.0, 0.0, 10.0, 10.0)).collect()
    }

    #[test]
    fn contradiction_becomes_a_two_cycle() {
        let rels = [
            (Relation::new(0, 1, RelationKind::On), 0.9),
            (Relation::new(0, 1, RelationKind::Under), 0.4),
        ];
        let g = loose_graph(&boxes(2), rels).unwrap();
        assert_eq!(plan(g.clone(), false, None), Err(PlanError::Cycle(vec![vec![0, 1]])));
        let p = plan(g, true, None).unwrap();
        assert_eq!(p.removed, vec![(1, 0)]);
        assert_eq!(p.tree.order, vec![0, 1]);
    }

    #[test]
    fn target_order_ends_at_the_target() {
        // 2 on 1 on 0: the target at the bottom needs both removed first
        let rels = [
            (Relation::new(1, 2, RelationKind::Under), 1.0),
            (Relation::new(0, 1, RelationKind::Under), 1.0),
        ];
        let g = loose_graph(&boxes(4), rels).unwrap();
        let p = plan(g, false, Some(0)).unwrap();
        assert_eq!(p.target_order, Some(vec![2, 1, 0]));
        assert_eq!(p.tree.order, vec![2, 1, 0, 3]);
    }

    #[test]
    fn unknown_ids_are_errors() {
        let rels = [(Relation::new(0, 9, RelationKind::On), 1.0)];
        assert_eq!(loose_graph(&boxes(2), rels), Err(PlanError::UnknownObject(9)));
    }
}
