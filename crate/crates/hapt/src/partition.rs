//! Recursive dyadic partition of the sample space.
//!
//! The partition is a complete binary tree of half-open cells `(lo, hi]`,
//! truncated at a fixed depth `L`. Every internal node splits its cell at the
//! midpoint; a point lying exactly on a split belongs to the left child, so
//! cells follow the same open-left/closed-right convention as the canonical
//! domain `(0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{HaptError, Result};

/// Address of a node in the dyadic tree: `(level, index)` with the root at
/// `(0, 0)`. Children of `(l, j)` are `(l+1, 2j)` and `(l+1, 2j+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub level: u32,
    pub index: u64,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { level: 0, index: 0 };

    pub fn new(level: u32, index: u64) -> Result<Self> {
        if index >= 1u64 << level {
            return Err(HaptError::invalid(format!(
                "node index {index} out of range at level {level}"
            )));
        }
        Ok(NodeId { level, index })
    }

    pub fn left(self) -> NodeId {
        NodeId { level: self.level + 1, index: 2 * self.index }
    }

    pub fn right(self) -> NodeId {
        NodeId { level: self.level + 1, index: 2 * self.index + 1 }
    }

    pub fn parent(self) -> Option<NodeId> {
        if self.level == 0 {
            None
        } else {
            Some(NodeId { level: self.level - 1, index: self.index / 2 })
        }
    }

    pub fn is_left_child(self) -> bool {
        self.index % 2 == 0
    }

    /// Position in level-major storage of all nodes down to this level.
    pub fn slot(self) -> usize {
        ((1u64 << self.level) - 1 + self.index) as usize
    }

    /// Inverse of [`NodeId::slot`].
    pub fn from_slot(slot: usize) -> NodeId {
        let s = slot as u64 + 1;
        let level = 63 - s.leading_zeros();
        NodeId { level, index: s - (1 << level) }
    }
}

/// How the base measure `Q0` allocates mass to the left child of each node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseMeasure {
    /// Uniform on the domain: `theta0 = 1/2` everywhere.
    Uniform,
    /// Explicit per-node left-mass fractions in level-major order over the
    /// internal nodes, each in `(0, 1)`. The partition geometry stays dyadic.
    PerNodeTheta0(Vec<f64>),
}

/// Truncated dyadic partition of a closed interval domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionTree {
    depth: u32,
    lo: f64,
    hi: f64,
    base: BaseMeasure,
}

impl PartitionTree {
    /// Builds a depth-`L` midpoint partition of `(lo, hi]`.
    pub fn build(depth: u32, domain: (f64, f64), base: BaseMeasure) -> Result<Self> {
        let (lo, hi) = domain;
        if depth < 1 || depth > 30 {
            return Err(HaptError::invalid(format!("depth must be in 1..=30, got {depth}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(HaptError::invalid(format!("degenerate domain ({lo}, {hi}]")));
        }
        if let BaseMeasure::PerNodeTheta0(t) = &base {
            let want = (1usize << depth) - 1;
            if t.len() != want {
                return Err(HaptError::invalid(format!(
                    "base measure needs theta0 for {want} internal nodes, got {}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !(v.is_finite() && *v > 0.0 && *v < 1.0)) {
                return Err(HaptError::invalid("theta0 values must lie in (0, 1)".into()));
            }
        }
        Ok(PartitionTree { depth, lo, hi, base })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Total node count including leaves: `2^(L+1) - 1`.
    pub fn node_count(&self) -> usize {
        (1usize << (self.depth + 1)) - 1
    }

    /// Internal (split) node count: `2^L - 1`.
    pub fn internal_count(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn leaf_count(&self) -> usize {
        1usize << self.depth
    }

    /// Fraction of `Q0`-mass of `A` allocated to its left child.
    pub fn theta0(&self, node: NodeId) -> f64 {
        match &self.base {
            BaseMeasure::Uniform => 0.5,
            BaseMeasure::PerNodeTheta0(t) => t[node.slot()],
        }
    }

    /// The half-open cell `(lo, hi]` of a node.
    pub fn node_interval(&self, node: NodeId) -> (f64, f64) {
        let width = (self.hi - self.lo) / (1u64 << node.level) as f64;
        let a = self.lo + node.index as f64 * width;
        (a, a + width)
    }

    pub fn leaf_width(&self) -> f64 {
        (self.hi - self.lo) / self.leaf_count() as f64
    }

    fn contains(&self, x: f64) -> bool {
        x.is_finite() && x > self.lo && x <= self.hi
    }

    /// Index of the depth-`L` leaf cell containing `x`.
    ///
    /// A point exactly on a split boundary resolves to the lower (left) cell.
    pub fn leaf_index(&self, x: f64) -> Result<u64> {
        if !self.contains(x) {
            return Err(HaptError::OutOfDomain { value: x, lo: self.lo, hi: self.hi });
        }
        let cells = self.leaf_count() as u64;
        let u = (x - self.lo) / (self.hi - self.lo);
        let idx = (u * cells as f64).ceil() as u64;
        Ok(idx.clamp(1, cells) - 1)
    }

    /// Internal nodes on the root-to-leaf path of `x`, with the direction
    /// taken at each (`true` = left child).
    pub fn path_to_leaf(&self, x: f64) -> Result<Vec<(NodeId, bool)>> {
        let leaf = self.leaf_index(x)?;
        let mut path = Vec::with_capacity(self.depth as usize);
        for level in 0..self.depth {
            let index = leaf >> (self.depth - level);
            let went_left = (leaf >> (self.depth - level - 1)) & 1 == 0;
            path.push((NodeId { level, index }, went_left));
        }
        Ok(path)
    }

    /// Q0-mass of a node's cell (the product of `theta0` splits on its path).
    pub fn node_base_mass(&self, node: NodeId) -> f64 {
        match &self.base {
            BaseMeasure::Uniform => 1.0 / (1u64 << node.level) as f64,
            BaseMeasure::PerNodeTheta0(_) => {
                let mut mass = 1.0;
                let mut cur = node;
                while let Some(par) = cur.parent() {
                    let t = self.theta0(par);
                    mass *= if cur.is_left_child() { t } else { 1.0 - t };
                    cur = par;
                }
                mass
            }
        }
    }

    /// Base density `q0(x)` of the truncated tree: piecewise constant, equal
    /// to the leaf's `Q0`-mass divided by its width.
    pub fn base_density(&self, x: f64) -> Result<f64> {
        let leaf = NodeId { level: self.depth, index: self.leaf_index(x)? };
        Ok(self.node_base_mass(leaf) / self.leaf_width())
    }

    /// Conditional density within the leaf containing `x`, i.e. `1/|leaf|`.
    ///
    /// This is the flat closure applied below the truncation depth.
    pub fn leaf_uniform_density(&self, x: f64) -> Result<f64> {
        self.leaf_index(x)?;
        Ok(1.0 / self.leaf_width())
    }
}

/// Per-node, per-sample child counts `(n_i(A_l), n_i(A_r))` over the internal
/// nodes of a [`PartitionTree`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    depth: u32,
    k: usize,
    /// `counts[slot][i] = (n_i(left), n_i(right))`, slot over internal nodes.
    counts: Vec<Vec<(u64, u64)>>,
}

impl CountTable {
    /// Bins every observation of every sample down the tree (`bin_data`).
    pub fn from_samples(tree: &PartitionTree, samples: &[Vec<f64>]) -> Result<Self> {
        if samples.is_empty() {
            return Err(HaptError::invalid("need at least one sample".into()));
        }
        let k = samples.len();
        let depth = tree.depth();
        let mut counts = vec![vec![(0u64, 0u64); k]; tree.internal_count()];
        for (i, sample) in samples.iter().enumerate() {
            for &x in sample {
                let leaf = tree.leaf_index(x).map_err(|e| match e {
                    HaptError::OutOfDomain { value, lo, hi } => {
                        HaptError::SampleOutOfDomain { value, sample: i, lo, hi }
                    }
                    other => other,
                })?;
                for level in 0..depth {
                    let node = NodeId { level, index: leaf >> (depth - level) };
                    let went_left = (leaf >> (depth - level - 1)) & 1 == 0;
                    let cell = &mut counts[node.slot()][i];
                    if went_left {
                        cell.0 += 1;
                    } else {
                        cell.1 += 1;
                    }
                }
            }
        }
        Ok(CountTable { depth, k, counts })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Number of samples.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Per-sample `(left, right)` counts at an internal node.
    pub fn counts_at(&self, node: NodeId) -> &[(u64, u64)] {
        &self.counts[node.slot()]
    }

    /// `n_i(A)` for an internal node.
    pub fn n_i(&self, node: NodeId, i: usize) -> u64 {
        let (l, r) = self.counts[node.slot()][i];
        l + r
    }

    /// Pooled count `n(A)` for an internal node.
    pub fn n(&self, node: NodeId) -> u64 {
        self.counts[node.slot()].iter().map(|(l, r)| l + r).sum()
    }

    /// Total observation count across samples.
    pub fn total(&self) -> u64 {
        self.n(NodeId::ROOT)
    }

    pub fn sample_size(&self, i: usize) -> u64 {
        self.n_i(NodeId::ROOT, i)
    }

    /// Restriction to a subset of samples, preserving the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<CountTable> {
        if indices.is_empty() {
            return Err(HaptError::invalid("empty sample subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.k) {
            return Err(HaptError::invalid(format!("sample index {bad} out of range")));
        }
        let counts = self
            .counts
            .iter()
            .map(|per_sample| indices.iter().map(|&i| per_sample[i]).collect())
            .collect();
        Ok(CountTable { depth: self.depth, k: indices.len(), counts })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_tree(depth: u32) -> PartitionTree {
        PartitionTree::build(depth, (0.0, 1.0), BaseMeasure::Uniform).unwrap()
    }

    #[test]
    fn build_rejects_bad_inputs() {
        assert!(PartitionTree::build(0, (0.0, 1.0), BaseMeasure::Uniform).is_err());
        assert!(PartitionTree::build(2, (1.0, 1.0), BaseMeasure::Uniform).is_err());
        assert!(PartitionTree::build(2, (2.0, 1.0), BaseMeasure::Uniform).is_err());
        assert!(
            PartitionTree::build(2, (0.0, 1.0), BaseMeasure::PerNodeTheta0(vec![0.5; 2])).is_err()
        );
    }

    #[test]
    fn depth_two_geometry() {
        let tree = unit_tree(2);
        assert_eq!(tree.node_count(), 7);
        let (a, b) = tree.node_interval(NodeId { level: 1, index: 1 });
        assert_eq!((a, b), (0.5, 1.0));
        for slot in 0..tree.internal_count() {
            assert_eq!(tree.theta0(NodeId::from_slot(slot)), 0.5);
        }
    }

    #[test]
    fn domain_zero_two_children() {
        let tree = PartitionTree::build(1, (0.0, 2.0), BaseMeasure::Uniform).unwrap();
        assert_eq!(tree.node_interval(NodeId::ROOT.left()), (0.0, 1.0));
        assert_eq!(tree.node_interval(NodeId::ROOT.right()), (1.0, 2.0));
    }

    #[test]
    fn uniform_theta0_at_depth_three() {
        let tree = unit_tree(3);
        for slot in 0..7 {
            assert_eq!(tree.theta0(NodeId::from_slot(slot)), 0.5);
        }
    }

    #[test]
    fn bin_basic_counts() {
        let tree = unit_tree(1);
        let counts = CountTable::from_samples(&tree, &[vec![0.25, 0.75, 0.9]]).unwrap();
        assert_eq!(counts.counts_at(NodeId::ROOT), &[(1, 2)]);
    }

    #[test]
    fn split_point_goes_left() {
        let tree = unit_tree(1);
        let counts = CountTable::from_samples(&tree, &[vec![0.5]]).unwrap();
        assert_eq!(counts.counts_at(NodeId::ROOT), &[(1, 0)]);
    }

    #[test]
    fn two_sample_counts() {
        let tree = unit_tree(2);
        let counts = CountTable::from_samples(&tree, &[vec![0.1], vec![0.6, 0.8]]).unwrap();
        assert_eq!(counts.n(NodeId::ROOT), 3);
        assert_eq!(counts.n_i(NodeId { level: 1, index: 1 }, 1), 2);
        assert_eq!(counts.n_i(NodeId { level: 1, index: 1 }, 0), 0);
    }

    #[test]
    fn out_of_domain_is_reported_with_sample() {
        let tree = unit_tree(2);
        let err = CountTable::from_samples(&tree, &[vec![0.1], vec![1.5]]).unwrap_err();
        match err {
            HaptError::SampleOutOfDomain { value, sample, .. } => {
                assert_eq!(value, 1.5);
                assert_eq!(sample, 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn leaf_uniform_density_values() {
        let tree = unit_tree(2);
        assert_eq!(tree.leaf_uniform_density(0.3).unwrap(), 4.0);
        let tree = PartitionTree::build(1, (0.0, 2.0), BaseMeasure::Uniform).unwrap();
        assert_eq!(tree.leaf_uniform_density(1.5).unwrap(), 1.0);
        let tree = unit_tree(3);
        assert_eq!(tree.leaf_uniform_density(0.9).unwrap(), 8.0);
        assert!(tree.leaf_uniform_density(0.0).is_err());
    }

    #[test]
    fn counts_roll_up_the_tree() {
        let tree = unit_tree(4);
        let samples = vec![
            (0..40).map(|j| (j as f64 + 0.5) / 40.0).collect::<Vec<_>>(),
            (0..17).map(|j| ((j * 7 % 40) as f64 + 0.3) / 40.0).collect::<Vec<_>>(),
        ];
        let counts = CountTable::from_samples(&tree, &samples).unwrap();
        for slot in 0..tree.internal_count() {
            let node = NodeId::from_slot(slot);
            for i in 0..2 {
                let (l, r) = counts.counts_at(node)[i];
                if node.level + 1 < tree.depth() {
                    assert_eq!(l, counts.n_i(node.left(), i));
                    assert_eq!(r, counts.n_i(node.right(), i));
                }
            }
        }
        assert_eq!(counts.sample_size(0), 40);
        assert_eq!(counts.sample_size(1), 17);
    }

    #[test]
    fn path_matches_leaf_bits() {
        let tree = unit_tree(3);
        let path = tree.path_to_leaf(0.9).unwrap();
        assert_eq!(path.len(), 3);
        // 0.9 lies in the last leaf: always right.
        assert!(path.iter().all(|&(_, left)| !left));
        let leaf = tree.leaf_index(0.9).unwrap();
        assert_eq!(leaf, 7);
    }

    #[test]
    fn subset_preserves_order() {
        let tree = unit_tree(2);
        let counts =
            CountTable::from_samples(&tree, &[vec![0.1], vec![0.6, 0.8], vec![0.3]]).unwrap();
        let sub = counts.subset(&[2, 0]).unwrap();
        assert_eq!(sub.k(), 2);
        assert_eq!(sub.sample_size(0), 1);
        assert_eq!(sub.counts_at(NodeId::ROOT)[0], (1, 0));
    }

    #[test]
    fn base_mass_per_node_theta0() {
        let theta0 = vec![0.25, 0.5, 0.5];
        let tree = PartitionTree::build(2, (0.0, 1.0), BaseMeasure::PerNodeTheta0(theta0)).unwrap();
        let leaf = NodeId { level: 2, index: 0 };
        assert!((tree.node_base_mass(leaf) - 0.125).abs() < 1e-15);
        // Density integrates to one over the leaves.
        let total: f64 = (0..4)
            .map(|j| tree.node_base_mass(NodeId { level: 2, index: j }) )
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
