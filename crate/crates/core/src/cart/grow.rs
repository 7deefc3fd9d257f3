//! Level-wise greedy tree growth shared by the classification and
//! regression trees.
//!
//! Rows enter with a multiplicity (0 = not in the sample, >1 = drawn more
//! than once). Each level walks every candidate column once in globally
//! presorted order and accumulates running statistics per open node, so a
//! level costs O(rows x columns) regardless of how many nodes are open.
//! Two-valued columns (one-hot indicators) only visit their smaller side.

use rand::seq::index;
use rand::Rng;

use crate::dataset::DesignMatrix;

const NONE: u32 = u32::MAX;

pub(crate) trait Criterion {
    type Stats: Copy + Default;

    fn add(&self, stats: &mut Self::Stats, row: usize, mult: u32);
    fn sub(&self, total: &Self::Stats, part: &Self::Stats) -> Self::Stats;
    /// Instances (with multiplicity) summarised by `stats`.
    fn count(&self, stats: &Self::Stats) -> u32;
    /// Node impurity scaled by node weight; a split's score is the sum over
    /// both children, lower is better.
    fn weighted_impurity(&self, stats: &Self::Stats) -> f64;
    fn is_pure(&self, stats: &Self::Stats) -> bool;
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Draw this many candidate columns per node (without replacement).
    pub per_node_features: Option<usize>,
}

pub(crate) enum RawNode<S> {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        stats: S,
    },
}

pub(crate) struct Grown<S> {
    pub nodes: Vec<RawNode<S>>,
}

struct Open<S> {
    stats: S,
    depth: usize,
    split: Option<(usize, f64, usize, usize)>,
}

#[derive(Clone, Copy)]
struct Running<S> {
    left: S,
    last: f64,
    seen: bool,
    best_score: f64,
    best: Option<(usize, f64)>,
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = lo + (hi - lo) / 2.0;
    if t < hi {
        t
    } else {
        lo
    }
}

fn consider<C: Criterion>(
    criterion: &C,
    st: &mut Running<C::Stats>,
    left: &C::Stats,
    right: &C::Stats,
    min_leaf: u32,
    feature: usize,
    threshold: f64,
) {
    if criterion.count(left) < min_leaf || criterion.count(right) < min_leaf {
        return;
    }
    let score = criterion.weighted_impurity(left) + criterion.weighted_impurity(right);
    if score < st.best_score - 1e-12 * (1.0 + st.best_score.abs().min(1e300)) {
        st.best_score = score;
        st.best = Some((feature, threshold));
    }
}

pub(crate) fn grow<C: Criterion, R: Rng>(
    x: &DesignMatrix,
    mult: &[u32],
    features: &[usize],
    criterion: &C,
    params: GrowParams,
    rng: &mut R,
) -> Grown<C::Stats> {
    let n = x.n_rows();
    debug_assert_eq!(mult.len(), n);
    let min_leaf = params.min_leaf.max(1) as u32;

    let mut root = C::Stats::default();
    let mut row_node = vec![NONE; n];
    for r in 0..n {
        if mult[r] > 0 {
            criterion.add(&mut root, r, mult[r]);
            row_node[r] = 0;
        }
    }
    let mut open = vec![Open {
        stats: root,
        depth: 0,
        split: None,
    }];
    let mut frontier = vec![0usize];
    let sorted = x.sorted_columns();

    while !frontier.is_empty() {
        let splittable: Vec<usize> = frontier
            .iter()
            .copied()
            .filter(|&k| {
                let node = &open[k];
                node.depth < params.max_depth
                    && criterion.count(&node.stats) >= 2 * min_leaf
                    && !criterion.is_pure(&node.stats)
            })
            .collect();
        if splittable.is_empty() {
            break;
        }

        let mut slot_of = vec![NONE; open.len()];
        for (s, &k) in splittable.iter().enumerate() {
            slot_of[k] = s as u32;
        }
        // Per-slot candidate columns (sorted ascending for the tie-break).
        let allowed: Option<Vec<Vec<bool>>> = params.per_node_features.map(|m| {
            let m = m.clamp(1, features.len());
            splittable
                .iter()
                .map(|_| {
                    let mut mask = vec![false; x.n_cols()];
                    for i in index::sample(rng, features.len(), m) {
                        mask[features[i]] = true;
                    }
                    mask
                })
                .collect()
        });

        let mut running: Vec<Running<C::Stats>> = splittable
            .iter()
            .map(|_| Running {
                left: C::Stats::default(),
                last: f64::NEG_INFINITY,
                seen: false,
                best_score: f64::INFINITY,
                best: None,
            })
            .collect();

        let mut side = vec![C::Stats::default(); splittable.len()];
        for &f in features {
            let col = &sorted[f];
            let allows = |slot: usize| allowed.as_ref().is_none_or(|m| m[slot][f]);
            if let Some(b) = col.binary_split {
                // Two distinct values: accumulate the smaller side only and
                // derive the other by subtraction.
                let high_side = col.rows.len() - b <= b;
                let range = if high_side { b..col.rows.len() } else { 0..b };
                side.iter_mut().for_each(|s| *s = C::Stats::default());
                for &r in &col.rows[range] {
                    let r = r as usize;
                    let node = row_node[r];
                    if node == NONE {
                        continue;
                    }
                    let slot = slot_of[node as usize];
                    if slot != NONE {
                        criterion.add(&mut side[slot as usize], r, mult[r]);
                    }
                }
                let threshold = midpoint(col.values[b - 1], col.values[b]);
                for (slot, &k) in splittable.iter().enumerate() {
                    if !allows(slot) {
                        continue;
                    }
                    let total = &open[k].stats;
                    let other = criterion.sub(total, &side[slot]);
                    let (left, right) = if high_side {
                        (other, side[slot])
                    } else {
                        (side[slot], other)
                    };
                    let st = &mut running[slot];
                    consider(criterion, st, &left, &right, min_leaf, f, threshold);
                }
                continue;
            }
            for st in running.iter_mut() {
                st.left = C::Stats::default();
                st.seen = false;
            }
            for (&r, &v) in col.rows.iter().zip(&col.values) {
                let r = r as usize;
                let node = row_node[r];
                if node == NONE {
                    continue;
                }
                let slot = slot_of[node as usize];
                if slot == NONE {
                    continue;
                }
                let slot = slot as usize;
                if !allows(slot) {
                    continue;
                }
                let st = &mut running[slot];
                if st.seen && v > st.last {
                    let right = criterion.sub(&open[node as usize].stats, &st.left);
                    let left = st.left;
                    let threshold = midpoint(st.last, v);
                    consider(criterion, st, &left, &right, min_leaf, f, threshold);
                }
                criterion.add(&mut st.left, r, mult[r]);
                st.last = v;
                st.seen = true;
            }
        }

        let mut next = Vec::new();
        let mut child_of = vec![(NONE, NONE); splittable.len()];
        for (slot, &k) in splittable.iter().enumerate() {
            let st = &running[slot];
            let Some((f, t)) = st.best else { continue };
            let parent_score = criterion.weighted_impurity(&open[k].stats);
            if st.best_score > parent_score + 1e-9 * (1.0 + parent_score.abs()) {
                continue;
            }
            let depth = open[k].depth + 1;
            let l = open.len();
            open.push(Open {
                stats: C::Stats::default(),
                depth,
                split: None,
            });
            open.push(Open {
                stats: C::Stats::default(),
                depth,
                split: None,
            });
            open[k].split = Some((f, t, l, l + 1));
            child_of[slot] = (l as u32, (l + 1) as u32);
            next.push(l);
            next.push(l + 1);
        }
        for r in 0..n {
            let node = row_node[r];
            if node == NONE {
                continue;
            }
            let slot = slot_of[node as usize];
            if slot == NONE || child_of[slot as usize].0 == NONE {
                row_node[r] = NONE;
                continue;
            }
            let (f, t, l, rr) = open[node as usize].split.expect("split recorded");
            let child = if x.get(r, f) <= t { l } else { rr };
            row_node[r] = child as u32;
            let stats = &mut open[child].stats;
            criterion.add(stats, r, mult[r]);
        }
        frontier = next;
    }

    let nodes = open
        .into_iter()
        .map(|o| match o.split {
            Some((feature, threshold, left, right)) => RawNode::Split {
                feature,
                threshold,
                left,
                right,
            },
            None => RawNode::Leaf { stats: o.stats },
        })
        .collect();
    Grown { nodes }
}
