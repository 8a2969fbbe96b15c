//! Boolean masks and the per-view mask tree built from the coverage rule.
//!
//! Mask `A` is covered by mask `B` when more than `θ` of `A` lies inside `B`
//! while less than `θ` of `B` lies inside `A`. A mask's parent is the smallest
//! covering mask at a strictly coarser level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Level;

/// Row-major `H × W` boolean image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Bitmask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Bitmask {
    pub fn empty(width: usize, height: usize) -> Self {
        Bitmask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Hierarchy(format!("{} bits for a {width}x{height} mask", bits.len())));
        }
        Ok(Bitmask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|r| (0..width).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        Bitmask { width, height, bits }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Bitmask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_count(&self, other: &Bitmask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Bitmask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// Row-major indices of set pixels.
    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter_map(|(i, &b)| b.then_some(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskEntry {
    pub id: u32,
    pub level: Level,
    pub view_id: u32,
    pub mask: Bitmask,
}

impl MaskEntry {
    pub fn new(id: u32, level: Level, view_id: u32, mask: Bitmask) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Hierarchy(format!("mask {id} has no set pixels")));
        }
        Ok(MaskEntry { id, level, view_id, mask })
    }

    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.5 && theta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Hierarchy(format!("coverage threshold {theta} outside (0.5, 1]")))
    }
}

/// First two coverage conditions: `|A∩B|/|A| > θ` and `|A∩B|/|B| < θ`.
pub fn is_covered_by(a: &MaskEntry, b: &MaskEntry, theta: f64) -> Result<bool> {
    check_theta(theta)?;
    if !a.mask.same_shape(&b.mask) {
        return Err(Error::Hierarchy(format!(
            "masks {} and {} differ in size",
            a.id, b.id
        )));
    }
    if a.view_id != b.view_id {
        return Err(Error::Hierarchy(format!(
            "masks {} and {} belong to different views",
            a.id, b.id
        )));
    }
    let inter = a.mask.intersection_count(&b.mask) as f64;
    let (area_a, area_b) = (a.area() as f64, b.area() as f64);
    if area_a == 0.0 || area_b == 0.0 {
        return Ok(false);
    }
    Ok(inter / area_a > theta && inter / area_b < theta)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: u32,
    pub level: Level,
    pub parent: Option<u32>,
    pub children: Vec<u32>,
}

/// Forest over the masks of one view.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskTree {
    nodes: Vec<TreeNode>,
    index: BTreeMap<u32, usize>,
}

impl MaskTree {
    /// Assembles a tree from explicit nodes, checking every structural
    /// invariant (unique ids, consistent links, level increase, no cycles).
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id, i).is_some() {
                return Err(Error::Hierarchy(format!("duplicate node id {}", node.id)));
            }
        }
        let tree = MaskTree { nodes, index };
        for node in &tree.nodes {
            if let Some(parent_id) = node.parent {
                let parent = tree
                    .node(parent_id)
                    .ok_or_else(|| Error::Hierarchy(format!("node {} has unknown parent {parent_id}", node.id)))?;
                if parent.level >= node.level {
                    return Err(Error::Hierarchy(format!(
                        "parent {parent_id} is not coarser than child {}",
                        node.id
                    )));
                }
                if !parent.children.contains(&node.id) {
                    return Err(Error::Hierarchy(format!(
                        "parent {parent_id} does not list child {}",
                        node.id
                    )));
                }
            }
            for &child in &node.children {
                match tree.node(child) {
                    Some(c) if c.parent == Some(node.id) => {}
                    _ => {
                        return Err(Error::Hierarchy(format!(
                            "node {} lists child {child} without a back link",
                            node.id
                        )))
                    }
                }
            }
        }
        // strictly increasing levels along parent links rule out cycles
        Ok(tree)
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: u32) -> Option<&TreeNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn parent(&self, id: u32) -> Option<u32> {
        self.node(id).and_then(|n| n.parent)
    }

    /// `(parent, child)` pairs, ordered by child id.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges: Vec<(u32, u32)> = self.nodes.iter().filter_map(|n| n.parent.map(|p| (p, n.id))).collect();
        edges.sort_by_key(|&(_, c)| c);
        edges
    }

    /// True when the node's parent is more than one level coarser.
    pub fn skips_level(&self, id: u32) -> bool {
        match self.node(id) {
            Some(node) => node
                .parent
                .and_then(|p| self.node(p))
                .is_some_and(|p| p.level.index() + 1 < node.level.index()),
            None => false,
        }
    }
}

/// Builds the coverage tree for the masks of one view.
pub fn build_mask_tree(masks: &[MaskEntry], theta: f64) -> Result<MaskTree> {
    check_theta(theta)?;
    if masks.is_empty() {
        return Ok(MaskTree::default());
    }
    let view = masks[0].view_id;
    let mut seen = BTreeMap::new();
    for m in masks {
        if m.view_id != view {
            return Err(Error::Hierarchy(format!(
                "mask {} belongs to view {}, expected {view}",
                m.id, m.view_id
            )));
        }
        if seen.insert(m.id, ()).is_some() {
            return Err(Error::Hierarchy(format!("duplicate mask id {}", m.id)));
        }
    }
    let areas: Vec<usize> = masks.iter().map(MaskEntry::area).collect();
    let mut parents: Vec<Option<usize>> = vec![None; masks.len()];
    for (a, child) in masks.iter().enumerate() {
        let mut best: Option<usize> = None;
        for (b, candidate) in masks.iter().enumerate() {
            if candidate.level >= child.level || !is_covered_by(child, candidate, theta)? {
                continue;
            }
            best = match best {
                Some(current)
                    if (areas[current], masks[current].id) <= (areas[b], candidate.id) =>
                {
                    Some(current)
                }
                _ => Some(b),
            };
        }
        parents[a] = best;
    }
    let mut nodes: Vec<TreeNode> = masks
        .iter()
        .zip(&parents)
        .map(|(m, p)| TreeNode {
            id: m.id,
            level: m.level,
            parent: p.map(|i| masks[i].id),
            children: Vec::new(),
        })
        .collect();
    for (child, parent) in parents.iter().enumerate() {
        if let Some(p) = parent {
            let id = nodes[child].id;
            nodes[*p].children.push(id);
        }
    }
    for node in &mut nodes {
        node.children.sort_unstable();
    }
    MaskTree::from_nodes(nodes)
}

/// Nodes sharing `id`'s parent and level, excluding `id`. Roots are siblings
/// of the other roots at the same level.
pub fn siblings_under(tree: &MaskTree, id: u32) -> Result<Vec<u32>> {
    let node = tree
        .node(id)
        .ok_or_else(|| Error::Hierarchy(format!("unknown node id {id}")))?;
    Ok(tree
        .nodes()
        .iter()
        .filter(|n| n.id != id && n.parent == node.parent && n.level == node.level)
        .map(|n| n.id)
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rect(id: u32, level: Level, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> MaskEntry {
        let mask = Bitmask::from_fn(12, 12, |r, c| rows.contains(&r) && cols.contains(&c));
        MaskEntry::new(id, level, 0, mask).unwrap()
    }

    #[test]
    fn small_mask_inside_large_is_covered() {
        let a = MaskEntry::new(0, Level::Part, 0, Bitmask::from_fn(10, 1, |_, c| c < 3)).unwrap();
        let b = MaskEntry::new(1, Level::Whole, 0, Bitmask::from_fn(10, 1, |_, _| true)).unwrap();
        assert!(is_covered_by(&a, &b, 0.9).unwrap());
    }

    #[test]
    fn identical_masks_not_covered() {
        let a = rect(0, Level::Part, 2..6, 2..6);
        let b = rect(1, Level::Whole, 2..6, 2..6);
        assert!(!is_covered_by(&a, &b, 0.9).unwrap());
    }

    #[test]
    fn disjoint_masks_not_covered() {
        let a = rect(0, Level::Part, 0..2, 0..2);
        let b = rect(1, Level::Whole, 5..9, 5..9);
        assert!(!is_covered_by(&a, &b, 0.9).unwrap());
    }

    #[test]
    fn coverage_rejects_bad_inputs() {
        let a = rect(0, Level::Part, 0..2, 0..2);
        let b = MaskEntry::new(1, Level::Whole, 0, Bitmask::from_fn(4, 4, |_, _| true)).unwrap();
        assert!(is_covered_by(&a, &b, 0.9).is_err());
        assert!(is_covered_by(&a, &a, 0.5).is_err());
        assert!(is_covered_by(&a, &a, 1.01).is_err());
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(MaskEntry::new(0, Level::Whole, 0, Bitmask::empty(3, 3)).is_err());
    }

    #[test]
    fn nested_triple_chains() {
        // areas 4 < 20 < 100
        let w = rect(0, Level::Whole, 0..10, 0..10);
        let p = rect(1, Level::Part, 0..4, 0..5);
        let s = rect(2, Level::Subpart, 0..2, 0..2);
        let tree = build_mask_tree(&[w, p, s], 0.9).unwrap();
        assert_eq!(tree.parent(2), Some(1));
        assert_eq!(tree.parent(1), Some(0));
        assert_eq!(tree.parent(0), None);
        assert_eq!(tree.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn single_mask_is_root() {
        let tree = build_mask_tree(&[rect(4, Level::Part, 0..3, 0..3)], 0.9).unwrap();
        assert_eq!(tree.len(), 1);
        assert!(tree.edges().is_empty());
    }

    #[test]
    fn one_edge_between_disjoint_wholes() {
        let masks = [
            rect(0, Level::Whole, 0..5, 0..5),
            rect(1, Level::Whole, 6..12, 6..12),
            rect(2, Level::Part, 1..3, 1..3),
        ];
        assert_eq!(build_mask_tree(&masks, 0.9).unwrap().edges(), vec![(0, 2)]);
    }

    #[test]
    fn empty_input_gives_empty_tree() {
        assert!(build_mask_tree(&[], 0.9).unwrap().is_empty());
    }

    #[test]
    fn same_level_masks_never_parent() {
        let masks = [rect(0, Level::Part, 0..10, 0..10), rect(1, Level::Part, 0..2, 0..2)];
        assert!(build_mask_tree(&masks, 0.9).unwrap().edges().is_empty());
    }

    #[test]
    fn tie_goes_to_smaller_id() {
        let masks = [
            rect(5, Level::Whole, 0..6, 0..6),
            rect(3, Level::Whole, 0..6, 0..6),
            rect(9, Level::Subpart, 0..2, 0..2),
        ];
        assert_eq!(build_mask_tree(&masks, 0.9).unwrap().parent(9), Some(3));
    }

    #[test]
    fn subpart_may_attach_to_whole_and_is_flagged() {
        let masks = [rect(0, Level::Whole, 0..10, 0..10), rect(1, Level::Subpart, 0..2, 0..2)];
        let tree = build_mask_tree(&masks, 0.9).unwrap();
        assert_eq!(tree.parent(1), Some(0));
        assert!(tree.skips_level(1));
        assert!(!tree.skips_level(0));
    }

    #[test]
    fn siblings() {
        let masks = [
            rect(0, Level::Whole, 0..6, 0..12),
            rect(1, Level::Part, 0..2, 0..2),
            rect(2, Level::Part, 3..5, 0..2),
            rect(3, Level::Part, 0..2, 4..6),
            rect(4, Level::Whole, 7..12, 0..12),
            rect(5, Level::Part, 8..10, 0..3),
            rect(6, Level::Whole, 7..12, 0..12),
        ];
        let tree = build_mask_tree(&masks, 0.9).unwrap();
        assert_eq!(siblings_under(&tree, 1).unwrap(), vec![2, 3]);
        assert!(siblings_under(&tree, 5).unwrap().is_empty());
        assert_eq!(siblings_under(&tree, 0).unwrap(), vec![4, 6]);
        assert!(siblings_under(&tree, 99).is_err());
    }

    #[test]
    fn two_roots_are_siblings() {
        let masks = [rect(0, Level::Whole, 0..3, 0..3), rect(1, Level::Whole, 5..9, 5..9)];
        let tree = build_mask_tree(&masks, 0.9).unwrap();
        assert_eq!(siblings_under(&tree, 0).unwrap(), vec![1]);
        assert_eq!(siblings_under(&tree, 1).unwrap(), vec![0]);
    }

    fn random_masks() -> impl Strategy<Value = Vec<MaskEntry>> {
        prop::collection::vec((1u32..4, prop::collection::vec(any::<bool>(), 36)), 1..8).prop_map(|items| {
            items
                .into_iter()
                .enumerate()
                .filter_map(|(i, (level, mut bits))| {
                    bits[i % 36] = true;
                    MaskEntry::new(i as u32, Level::from_index(level)?, 0, Bitmask::from_bits(6, 6, bits).ok()?).ok()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn coverage_is_asymmetric(masks in random_masks(), theta in 0.51f64..1.0) {
            for a in &masks {
                for b in &masks {
                    prop_assert!(!(is_covered_by(a, b, theta).unwrap() && is_covered_by(b, a, theta).unwrap()));
                }
            }
        }

        #[test]
        fn random_trees_keep_invariants(masks in random_masks(), theta in 0.51f64..1.0) {
            let tree = build_mask_tree(&masks, theta).unwrap();
            prop_assert_eq!(tree.len(), masks.len());
            for node in tree.nodes() {
                if let Some(p) = node.parent {
                    let parent = tree.node(p).unwrap();
                    prop_assert!(parent.level < node.level);
                    prop_assert!(parent.children.contains(&node.id));
                }
                // walking up terminates within three steps
                let mut cursor = node.parent;
                let mut steps = 0;
                while let Some(p) = cursor {
                    cursor = tree.parent(p);
                    steps += 1;
                    prop_assert!(steps <= 2);
                }
            }
        }
    }
}
