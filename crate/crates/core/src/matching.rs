//! Ground truth, matching costs and exact bipartite assignment.

use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::boxes;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{PredictionSet, RepresentationSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// One annotated human-object pair. Boxes are `(cx, cy, w, h)` normalized to
/// the image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInstance<T> {
    pub human_box: [T; 4],
    pub object_box: [T; 4],
    pub object_class: usize,
    pub actions: Vec<bool>,
}

impl<T: Real> GtInstance<T> {
    pub fn object_one_hot(&self, num_object_classes: usize) -> Vec<bool> {
        (0..num_object_classes).map(|c| c == self.object_class).collect()
    }

    pub fn positive_actions(&self) -> impl Iterator<Item = usize> + '_ {
        self.actions.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet<T> {
    pub num_object_classes: usize,
    pub num_action_classes: usize,
    pub instances: Vec<GtInstance<T>>,
}

impl<T: Real> GroundTruthSet<T> {
    pub fn new(num_object_classes: usize, num_action_classes: usize, instances: Vec<GtInstance<T>>) -> Result<Self> {
        let set = Self {
            num_object_classes,
            num_action_classes,
            instances,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.object_class >= self.num_object_classes {
                return Err(Error::Domain(format!(
                    "instance {k}: object class {} out of range {}",
                    inst.object_class, self.num_object_classes
                )));
            }
            if inst.actions.len() != self.num_action_classes {
                return Err(Error::shape("ground_truth", &[inst.actions.len()], &[self.num_action_classes]));
            }
            if !inst.actions.iter().any(|&a| a) {
                return Err(Error::Domain(format!("instance {k} has no action")));
            }
            for b in [inst.human_box, inst.object_box] {
                if !(b[2] > T::zero() && b[3] > T::zero()) || b.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain(format!("instance {k}: degenerate box {b:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Multi-hot action targets `[N_gt, N_a]`.
    pub fn action_targets(&self) -> Tensor<T> {
        let data = self
            .instances
            .iter()
            .flat_map(|i| i.actions.iter().map(|&a| if a { T::one() } else { T::zero() }))
            .collect();
        Tensor::new(vec![self.len(), self.num_action_classes], data).expect("validated widths")
    }

    pub fn human_boxes(&self) -> Tensor<T> {
        boxes_tensor(self.instances.iter().map(|i| i.human_box))
    }

    pub fn object_boxes(&self) -> Tensor<T> {
        boxes_tensor(self.instances.iter().map(|i| i.object_box))
    }
}

pub(crate) fn boxes_tensor<T: Real>(rows: impl Iterator<Item = [T; 4]>) -> Tensor<T> {
    let data: Vec<T> = rows.flatten().collect();
    let n = data.len() / 4;
    Tensor::new(vec![n, 4], data).expect("four columns")
}

/// `(gt_index, query_index)` pairs sorted by ground-truth index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    /// Checks that every ground truth in `0..num_gt` appears once and no
    /// query in `0..num_queries` is used twice.
    pub fn new(mut pairs: Vec<(usize, usize)>, num_gt: usize, num_queries: usize) -> Result<Self> {
        pairs.sort_unstable();
        let mut used = vec![false; num_queries];
        if pairs.len() != num_gt {
            return Err(Error::Domain(format!("assignment has {} pairs for {num_gt} ground truths", pairs.len())));
        }
        for (k, &(g, q)) in pairs.iter().enumerate() {
            if g != k {
                return Err(Error::Domain(format!("ground truth {k} not matched exactly once")));
            }
            if q >= num_queries || used[q] {
                return Err(Error::Domain(format!("query {q} out of range or matched twice")));
            }
            used[q] = true;
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Matched query per ground truth, in ground-truth order.
    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, q)| q).collect()
    }

    /// Total cost under `cost[gt][query]`, summed in ground-truth order.
    pub fn total<C: Cost>(&self, cost: &[Vec<C>]) -> C {
        self.pairs.iter().fold(C::zero(), |acc, &(g, q)| acc + cost[g][q])
    }
}

fn softmax_at<T: Real>(logits: &[T], k: usize) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
    (logits[k] - m).exp() / z
}

/// Matching cost of query `q` against one ground-truth instance.
pub fn pair_cost<T: Real>(preds: &PredictionSet<T>, q: usize, gt: &GtInstance<T>, weights: &LossWeights<T>) -> T {
    let (ph, po) = (preds.human_box(q), preds.object_box(q));
    let l1 = |a: [T; 4], b: [T; 4]| a.iter().zip(&b).map(|(x, y)| (*x - *y).abs()).sum::<T>();
    // Sigmoid box outputs only degenerate on underflow; treat that as the
    // worst possible overlap.
    let g = |a: [T; 4], b: [T; 4]| boxes::giou(a, b).unwrap_or(-T::one());
    let box_term = l1(ph, gt.human_box) + l1(po, gt.object_box);
    let giou_term = (T::one() - g(ph, gt.human_box)) + (T::one() - g(po, gt.object_box));
    let object_term = T::one() - softmax_at(preds.object_logits.row(q), gt.object_class);
    let logits = preds.action_logits.row(q);
    let (mut sum, mut n) = (T::zero(), 0usize);
    for a in gt.positive_actions() {
        sum += T::one() - crate::autodiff::sigmoid(logits[a]);
        n += 1;
    }
    let action_term = if n == 0 { T::zero() } else { sum / T::from_usize(n).unwrap() };
    weights.box_l1 * box_term + weights.giou * giou_term + weights.object * object_term + weights.action * action_term
}

/// `cost[gt][query]` for every pair.
pub fn cost_matrix<T: Real>(preds: &PredictionSet<T>, gts: &GroundTruthSet<T>, weights: &LossWeights<T>) -> Vec<Vec<T>> {
    gts.instances
        .iter()
        .map(|gt| (0..preds.num_queries()).map(|q| pair_cost(preds, q, gt, weights)).collect())
        .collect()
}

/// Scalar usable as an assignment cost.
pub trait Cost: Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + std::fmt::Debug {
    fn zero() -> Self;
    /// Larger than any sum of costs the solver will see.
    fn unbounded() -> Self;
    fn is_valid(self) -> bool;
    /// Whether two totals count as the same optimum.
    fn same_total(a: Self, b: Self) -> bool;
}

impl<T: Real> Cost for T {
    fn zero() -> Self {
        T::zero()
    }
    fn unbounded() -> Self {
        T::infinity()
    }
    fn is_valid(self) -> bool {
        self.is_finite()
    }
    fn same_total(a: Self, b: Self) -> bool {
        let scale = T::one().max(a.abs()).max(b.abs());
        (a - b).abs() <= T::lit(1e-9) * scale
    }
}

impl Cost for i64 {
    fn zero() -> Self {
        0
    }
    fn unbounded() -> Self {
        i64::MAX / 4
    }
    fn is_valid(self) -> bool {
        self.abs() < i64::MAX / 1024
    }
    fn same_total(a: Self, b: Self) -> bool {
        a == b
    }
}

/// Minimum-cost injective assignment of rows to columns (shortest augmenting
/// paths with potentials). Returns the column for each row.
fn solve<C: Cost>(cost: &[Vec<C>], rows: &[usize], cols: &[usize]) -> Vec<usize> {
    let (n, m) = (rows.len(), cols.len());
    let inf = C::unbounded();
    let mut u = vec![C::zero(); n + 1];
    let mut v = vec![C::zero(); m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn optimum<C: Cost>(cost: &[Vec<C>], rows: &[usize], cols: &[usize]) -> C {
    solve(cost, rows, cols)
        .iter()
        .zip(rows)
        .fold(C::zero(), |acc, (&c, &r)| acc + cost[r][cols[c]])
}

/// Exact minimum-cost assignment of every ground truth (row) to a distinct
/// query (column). Among optimal assignments the lexicographically smallest
/// `(gt, query)` sequence is returned.
pub fn hungarian<C: Cost>(cost: &[Vec<C>], num_queries: usize) -> Result<Assignment> {
    let n = cost.len();
    if n > num_queries {
        return Err(Error::Capacity {
            gts: n,
            queries: num_queries,
        });
    }
    for row in cost {
        if row.len() != num_queries {
            return Err(Error::shape("hungarian", &[n, row.len()], &[n, num_queries]));
        }
        if row.iter().any(|c| !c.is_valid()) {
            return Err(Error::Domain("non-finite matching cost".into()));
        }
    }
    if n == 0 {
        return Ok(Assignment { pairs: Vec::new() });
    }

    let mut rows: Vec<usize> = (0..n).collect();
    let mut cols: Vec<usize> = (0..num_queries).collect();
    let mut remaining = optimum(cost, &rows, &cols);
    let mut pairs = Vec::with_capacity(n);
    for g in 0..n {
        rows.retain(|&r| r != g);
        let mut chosen = None;
        for (slot, &q) in cols.iter().enumerate() {
            let mut rest = cols.clone();
            rest.remove(slot);
            let sub = if rows.is_empty() { C::zero() } else { optimum(cost, &rows, &rest) };
            let total = cost[g][q] + sub;
            if C::same_total(total, remaining) {
                chosen = Some((slot, q, sub));
                break;
            }
        }
        let (slot, q, sub) = chosen.expect("some column attains the optimum");
        pairs.push((g, q));
        cols.remove(slot);
        remaining = sub;
    }
    Ok(Assignment { pairs })
}

/// Matched representations; row `k` belongs to ground truth `gt_order[k]`.
#[derive(Clone, Debug)]
pub struct MatchedRepresentations {
    pub ho: Var,
    pub int: Var,
    pub gt_order: Vec<usize>,
}

/// Gathers the query rows matched to each ground truth. Gradients flow only
/// into the matched rows.
pub fn select_matched<T: Real>(
    tape: &mut Tape<T>,
    ho_reps: RepresentationSet,
    int_reps: RepresentationSet,
    assignment: &Assignment,
) -> Result<MatchedRepresentations> {
    let queries = assignment.queries();
    Ok(MatchedRepresentations {
        ho: tape.gather_rows(ho_reps.rows, &queries)?,
        int: tape.gather_rows(int_reps.rows, &queries)?,
        gt_order: assignment.pairs.iter().map(|&(g, _)| g).collect(),
    })
}

/// Brute-force minimum over all injections, ties resolved by lexicographic
/// order. Exponential; a test oracle.
pub fn brute_force<C: Cost>(cost: &[Vec<C>], num_queries: usize) -> Option<(C, Vec<usize>)> {
    fn rec<C: Cost>(
        cost: &[Vec<C>],
        g: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        acc: C,
        best: &mut Option<(C, Vec<usize>)>,
    ) {
        if g == cost.len() {
            if best.as_ref().is_none_or(|(b, _)| acc < *b) {
                *best = Some((acc, cur.clone()));
            }
            return;
        }
        for q in 0..used.len() {
            if !used[q] {
                used[q] = true;
                cur.push(q);
                rec(cost, g + 1, used, cur, acc + cost[g][q], best);
                cur.pop();
                used[q] = false;
            }
        }
    }
    if cost.len() > num_queries {
        return None;
    }
    let mut best = None;
    rec(cost, 0, &mut vec![false; num_queries], &mut Vec::new(), C::zero(), &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PredictionSet;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(h: [f64; 4], o: [f64; 4], class: usize, actions: Vec<bool>) -> GtInstance<f64> {
        GtInstance {
            human_box: h,
            object_box: o,
            object_class: class,
            actions,
        }
    }

    fn preds_from(h: &[[f64; 4]], o: &[[f64; 4]], ol: Vec<Vec<f64>>, al: Vec<Vec<f64>>) -> PredictionSet<f64> {
        PredictionSet {
            human_boxes: boxes_tensor(h.iter().copied()),
            object_boxes: boxes_tensor(o.iter().copied()),
            object_logits: Tensor::from_rows(&ol).unwrap(),
            action_logits: Tensor::from_rows(&al).unwrap(),
        }
    }

    #[test]
    fn perfect_prediction_costs_zero() {
        let h = [0.3, 0.4, 0.2, 0.5];
        let o = [0.6, 0.5, 0.1, 0.2];
        let p = preds_from(&[h], &[o], vec![vec![1e3, -1e3, -1e3]], vec![vec![1e3, -1e3]]);
        let c = pair_cost(&p, 0, &gt(h, o, 0, vec![true, false]), &LossWeights::default());
        assert!(c.abs() < 1e-12, "{c}");
    }

    #[test]
    fn matching_boxes_cost_less() {
        let h = [0.3, 0.4, 0.2, 0.5];
        let o = [0.6, 0.5, 0.1, 0.2];
        let far = [0.8, 0.8, 0.1, 0.1];
        let p = preds_from(&[h, far], &[o, far], vec![vec![0.0; 3]; 2], vec![vec![0.0; 2]; 2]);
        let g = gt(h, o, 1, vec![true, true]);
        let w = LossWeights::default();
        let (c0, c1) = (pair_cost(&p, 0, &g, &w), pair_cost(&p, 1, &g, &w));
        // Query 0: boxes exact, p(class) = 1/3, σ(0) = 1/2.
        assert!((c0 - (2.0 / 3.0 + 0.5)).abs() < 1e-12);
        assert!(c0 < c1);

        let zero = LossWeights {
            box_l1: 0.0,
            giou: 0.0,
            object: 0.0,
            action: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(pair_cost(&p, 1, &g, &zero), 0.0);
    }

    #[test]
    fn hand_cases() {
        let a = hungarian(&[vec![0i64, 9], vec![9, 0]], 2).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let flat = vec![vec![1.0f64; 5]; 3];
        assert_eq!(hungarian(&flat, 5).unwrap().pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let anti = hungarian(&[vec![5i64, 1, 1], vec![1, 5, 5]], 3).unwrap();
        assert_eq!(anti.pairs, vec![(0, 1), (1, 0)]);
        assert!(matches!(
            hungarian(&vec![vec![0.0f64; 2]; 3], 2),
            Err(Error::Capacity { gts: 3, queries: 2 })
        ));
        assert!(hungarian::<f64>(&[], 4).unwrap().is_empty());
        assert!(hungarian(&[vec![f64::NAN, 0.0]], 2).is_err());
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
            let a = hungarian(&cost, 8).unwrap();
            let (best, order) = brute_force(&cost, 8).unwrap();
            assert_eq!(a.total(&cost), best);
            assert_eq!(a.queries(), order);
        }
    }

    #[test]
    fn integer_ties_pick_lexicographic_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(n..=6);
            let cost: Vec<Vec<i64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..3)).collect()).collect();
            let a = hungarian(&cost, m).unwrap();
            let (best, order) = brute_force(&cost, m).unwrap();
            assert_eq!(a.total(&cost), best);
            assert_eq!(a.queries(), order, "{cost:?}");
        }
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
        let best = hungarian(&cost, 16).unwrap().total(&cost);
        for _ in 0..1000 {
            let mut qs: Vec<usize> = (0..16).collect();
            for i in 0..6 {
                let j = rng.random_range(i..16);
                qs.swap(i, j);
            }
            let a = Assignment::new(qs[..6].iter().copied().enumerate().collect(), 6, 16).unwrap();
            assert!(best <= a.total(&cost));
        }
    }

    #[test]
    fn assignment_validation() {
        assert!(Assignment::new(vec![(0, 1), (1, 1)], 2, 3).is_err());
        assert!(Assignment::new(vec![(0, 1)], 2, 3).is_err());
        assert!(Assignment::new(vec![(0, 3)], 1, 3).is_err());
        assert_eq!(Assignment::new(vec![(1, 0), (0, 2)], 2, 3).unwrap().queries(), vec![2, 0]);
    }

    #[test]
    fn ground_truth_validation() {
        let ok = gt([0.5; 4], [0.5; 4], 1, vec![true, false]);
        assert!(GroundTruthSet::new(2, 2, vec![ok.clone()]).is_ok());
        assert!(GroundTruthSet::new(1, 2, vec![ok.clone()]).is_err());
        assert!(GroundTruthSet::new(2, 3, vec![ok.clone()]).is_err());
        let none = gt([0.5; 4], [0.5; 4], 1, vec![false, false]);
        assert!(GroundTruthSet::new(2, 2, vec![none]).is_err());
        assert_eq!(ok.object_one_hot(3), vec![false, true, false]);
    }

    #[test]
    fn select_matched_gathers_rows_and_routes_gradients() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16 * 4).map(|v| v as f64).collect();
        let rp = tape.leaf(Tensor::new(vec![16, 4], data.clone()).unwrap(), true);
        let ri = tape.leaf(Tensor::new(vec![16, 4], data).unwrap(), true);
        let a = Assignment::new(vec![(0, 5), (1, 2), (2, 9)], 3, 16).unwrap();
        let ho = RepresentationSet {
            kind: crate::model::RepresentationKind::HoPair,
            rows: rp,
        };
        let int = RepresentationSet {
            kind: crate::model::RepresentationKind::Interaction,
            rows: ri,
        };
        let m = select_matched(&mut tape, ho, int, &a).unwrap();
        assert_eq!(tape.shape(m.ho), &[3, 4]);
        assert_eq!(tape.value(m.ho).row(0), &[20.0, 21.0, 22.0, 23.0]);
        assert_eq!(tape.value(m.int).row(1), &[8.0, 9.0, 10.0, 11.0]);
        assert_eq!(m.gt_order, vec![0, 1, 2]);
        let loss = tape.sum(m.ho);
        tape.backward(loss).unwrap();
        let g = tape.grad(rp).unwrap();
        for q in 0..16 {
            let expect = if [5, 2, 9].contains(&q) { 1.0 } else { 0.0 };
            assert!(g[q * 4..q * 4 + 4].iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn matched_costs_recompute_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nq = 6;
        let rb = |rng: &mut ChaCha8Rng| {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
            ]
        };
        let h: Vec<[f64; 4]> = (0..nq).map(|_| rb(&mut rng)).collect();
        let o: Vec<[f64; 4]> = (0..nq).map(|_| rb(&mut rng)).collect();
        let ol = (0..nq).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let al = (0..nq).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let p = preds_from(&h, &o, ol, al);
        let gts = GroundTruthSet::new(
            3,
            3,
            (0..3)
                .map(|k| gt(rb(&mut rng), rb(&mut rng), k % 3, vec![true, k % 2 == 0, false]))
                .collect(),
        )
        .unwrap();
        let w = LossWeights::default();
        let cost = cost_matrix(&p, &gts, &w);
        let a = hungarian(&cost, nq).unwrap();
        for &(g, q) in &a.pairs {
            assert_eq!(pair_cost(&p, q, &gts.instances[g], &w), cost[g][q]);
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(
            seed in 0u64..1000,
            shift in -50i64..50,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=4);
            let m = rng.random_range(n..=7);
            let cost: Vec<Vec<i64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(0..5)).collect()).collect();
            let shifted: Vec<Vec<i64>> = cost.iter().map(|r| r.iter().map(|c| c + shift).collect()).collect();
            prop_assert_eq!(hungarian(&cost, m).unwrap(), hungarian(&shifted, m).unwrap());
        }

        #[test]
        fn optimal_on_small_float_matrices(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(0..=6);
            let m = rng.random_range(n.max(1)..=8);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let a = hungarian(&cost, m).unwrap();
            let (best, _) = brute_force(&cost, m).unwrap();
            prop_assert_eq!(a.total(&cost), best);
        }
    }
}
