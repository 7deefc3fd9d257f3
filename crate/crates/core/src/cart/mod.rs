//! Binary-classification CART trees with Gini impurity.
//!
//! Leaves carry per-group statistics ([`LeafStats`]) gathered from the
//! training instances that reach them; FORESEE reads its leaf risk off those.

pub(crate) mod grow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DesignMatrix};
use crate::error::{Error, Result};
use grow::{Criterion, GrowParams, RawNode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Random candidate columns per node (random-forest style). `None`
    /// searches the whole feature subset at every node.
    #[serde(default)]
    pub split_features: Option<usize>,
    /// Weight applied to class 0 and class 1 in impurity and leaf majority.
    #[serde(default = "unit_weights")]
    pub class_weight: [f64; 2],
}

fn unit_weights() -> [f64; 2] {
    [1.0, 1.0]
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_leaf: 10,
            split_features: None,
            class_weight: unit_weights(),
        }
    }
}

/// Training view: design matrix plus aligned labels and sensitive groups.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub x: &'a DesignMatrix,
    pub labels: &'a [u8],
    pub sensitive: &'a [u8],
}

impl<'a> Samples<'a> {
    pub fn new(data: &'a Dataset, x: &'a DesignMatrix) -> Self {
        assert_eq!(
            data.len(),
            x.n_rows(),
            "design matrix does not match dataset"
        );
        Samples {
            x,
            labels: &data.labels,
            sensitive: &data.sensitive,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: u32,
    pub positives: u32,
    pub misclassified: u32,
}

impl GroupStats {
    pub fn error_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.misclassified as f64 / self.count as f64)
    }

    pub fn positive_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.positives as f64 / self.count as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafStats {
    /// Indexed by group id: `[unprotected, protected]`.
    pub groups: [GroupStats; 2],
    /// Leaf class chosen by the tie rule (equal class mass -> 0).
    pub tie: bool,
}

impl LeafStats {
    pub fn total(&self) -> u32 {
        self.groups[0].count + self.groups[1].count
    }

    /// Recomputes misclassification counts as if the leaf predicted `class`.
    pub fn with_class(mut self, class: u8) -> Self {
        for g in self.groups.iter_mut() {
            g.misclassified = if class == 1 {
                g.count - g.positives
            } else {
                g.positives
            };
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf_id: usize,
        class: u8,
        stats: LeafStats,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<Node>,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subset: Vec<usize>,
    pub instance_subset: Vec<usize>,
    pub seed: u64,
    pub n_leaves: usize,
}

#[derive(Clone, Copy, Default)]
struct ClassStats {
    weight: [f64; 2],
    count: u32,
    // [group][label]
    cells: [[u32; 2]; 2],
}

struct Gini<'a> {
    labels: &'a [u8],
    sensitive: &'a [u8],
    class_weight: [f64; 2],
}

impl Criterion for Gini<'_> {
    type Stats = ClassStats;

    fn add(&self, s: &mut ClassStats, row: usize, mult: u32) {
        let y = self.labels[row] as usize;
        s.weight[y] += self.class_weight[y] * mult as f64;
        s.count += mult;
        s.cells[self.sensitive[row] as usize][y] += mult;
    }

    fn sub(&self, total: &ClassStats, part: &ClassStats) -> ClassStats {
        let mut out = *total;
        for y in 0..2 {
            out.weight[y] -= part.weight[y];
            for g in 0..2 {
                out.cells[g][y] -= part.cells[g][y];
            }
        }
        out.count -= part.count;
        out
    }

    fn count(&self, s: &ClassStats) -> u32 {
        s.count
    }

    fn weighted_impurity(&self, s: &ClassStats) -> f64 {
        let w = s.weight[0] + s.weight[1];
        if w <= 0.0 {
            return 0.0;
        }
        w - (s.weight[0] * s.weight[0] + s.weight[1] * s.weight[1]) / w
    }

    fn is_pure(&self, s: &ClassStats) -> bool {
        let pos = s.cells[0][1] + s.cells[1][1];
        pos == 0 || pos == s.count
    }
}

/// Gini impurity of a node with `positives` out of `total`.
pub fn gini(positives: f64, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let p = positives / total;
    1.0 - p * p - (1.0 - p) * (1.0 - p)
}

/// Fits a tree on `instances` (duplicates count as repeated draws) using only
/// the design columns in `features`.
pub fn fit_tree(
    samples: Samples<'_>,
    instances: &[usize],
    features: &[usize],
    params: &TreeParams,
    seed: u64,
) -> Result<TreeModel> {
    if instances.is_empty() {
        return Err(Error::InvalidParameter("empty instance subset".into()));
    }
    if features.is_empty() {
        return Err(Error::InvalidParameter("empty feature subset".into()));
    }
    if let Some(&bad) = features.iter().find(|&&f| f >= samples.x.n_cols()) {
        return Err(Error::InvalidParameter(format!(
            "feature {bad} out of range"
        )));
    }
    let mut mult = vec![0u32; samples.x.n_rows()];
    for &i in instances {
        mult[i] += 1;
    }
    let mut features = features.to_vec();
    features.sort_unstable();
    features.dedup();

    let criterion = Gini {
        labels: samples.labels,
        sensitive: samples.sensitive,
        class_weight: params.class_weight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grown = grow::grow(
        samples.x,
        &mult,
        &features,
        &criterion,
        GrowParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            per_node_features: params.split_features,
        },
        &mut rng,
    );

    let mut n_leaves = 0;
    let nodes = grown
        .nodes
        .into_iter()
        .map(|raw| match raw {
            RawNode::Split {
                feature,
                threshold,
                left,
                right,
            } => Node::Internal {
                feature,
                threshold,
                left,
                right,
            },
            RawNode::Leaf { stats } => {
                let tie = stats.weight[1] == stats.weight[0];
                let class = u8::from(stats.weight[1] > stats.weight[0]);
                let mut leaf = LeafStats {
                    groups: Default::default(),
                    tie,
                };
                for g in 0..2 {
                    leaf.groups[g] = GroupStats {
                        count: stats.cells[g][0] + stats.cells[g][1],
                        positives: stats.cells[g][1],
                        misclassified: 0,
                    };
                }
                let leaf_id = n_leaves;
                n_leaves += 1;
                Node::Leaf {
                    leaf_id,
                    class,
                    stats: leaf.with_class(class),
                }
            }
        })
        .collect();

    Ok(TreeModel {
        nodes,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        feature_subset: features,
        instance_subset: instances.to_vec(),
        seed,
        n_leaves,
    })
}

impl TreeModel {
    fn leaf_node(&self, x: &[f64]) -> &Node {
        &self.nodes[self.leaf_index(x)]
    }

    /// Replaces every leaf's group counts with those of `rows` routed
    /// through the tree, keeping each leaf's predicted class.
    pub fn recount_leaves(&mut self, samples: Samples<'_>, rows: &[usize]) {
        let mut counts = vec![LeafStats::default(); self.nodes.len()];
        for &r in rows {
            let k = self.leaf_index(samples.x.row(r));
            let g = &mut counts[k].groups[samples.sensitive[r] as usize];
            g.count += 1;
            g.positives += u32::from(samples.labels[r] == 1);
        }
        for (node, fresh) in self.nodes.iter_mut().zip(counts) {
            if let Node::Leaf { class, stats, .. } = node {
                *stats = LeafStats {
                    tie: stats.tie,
                    ..fresh
                }
                .with_class(*class);
            }
        }
    }

    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut k = 0;
        while let Node::Internal {
            feature,
            threshold,
            left,
            right,
        } = &self.nodes[k]
        {
            k = if x[*feature] <= *threshold {
                *left
            } else {
                *right
            };
        }
        k
    }

    pub fn predict(&self, x: &[f64]) -> u8 {
        match self.leaf_node(x) {
            Node::Leaf { class, .. } => *class,
            Node::Internal { .. } => unreachable!(),
        }
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        match self.leaf_node(x) {
            Node::Leaf { leaf_id, .. } => *leaf_id,
            Node::Internal { .. } => unreachable!(),
        }
    }

    pub fn leaf_stats(&self, x: &[f64]) -> &LeafStats {
        match self.leaf_node(x) {
            Node::Leaf { stats, .. } => stats,
            Node::Internal { .. } => unreachable!(),
        }
    }

    /// Leaves in leaf-id order as `(class, stats)`.
    pub fn leaves(&self) -> Vec<(u8, LeafStats)> {
        let mut out = vec![(0u8, LeafStats::default()); self.n_leaves];
        for node in &self.nodes {
            if let Node::Leaf {
                leaf_id,
                class,
                stats,
            } = node
            {
                out[*leaf_id] = (*class, *stats);
            }
        }
        out
    }

    /// Longest root-to-leaf path, in edges.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match &nodes[k] {
                Node::Internal { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

pub fn accuracy(tree: &TreeModel, samples: Samples<'_>, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidParameter(
            "accuracy over an empty index set".into(),
        ));
    }
    let hits = indices
        .iter()
        .filter(|&&i| tree.predict(samples.x.row(i)) == samples.labels[i])
        .count();
    Ok(hits as f64 / indices.len() as f64)
}
