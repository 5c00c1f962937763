//! Cross-instance re-composition of matched representations.
//!
//! Each matched pair representation is concatenated with the matched
//! interaction representation of every other instance in the batch. The new
//! row inherits boxes and object class from the pair side and actions from
//! the interaction side, with actions the object cannot take masked out.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{action_loss, box_losses, LossVars};
use crate::matching::boxes_tensor;
use crate::model::HoiModel;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Valid (object, action) combinations and their category ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeasibilityTable {
    object_names: Vec<String>,
    action_names: Vec<String>,
    /// Category id of each feasible pair, row-major `[object][action]`.
    ids: Vec<Option<usize>>,
    categories: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    objects: Vec<String>,
    actions: Vec<String>,
    categories: Vec<CategoryEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryEntry {
    id: usize,
    object: String,
    action: String,
}

impl FeasibilityTable {
    /// Category `n` is `categories[n]` as `(object, action)`.
    pub fn new(object_names: Vec<String>, action_names: Vec<String>, categories: Vec<(usize, usize)>) -> Result<Self> {
        let (no, na) = (object_names.len(), action_names.len());
        let mut ids = vec![None; no * na];
        for (n, &(o, a)) in categories.iter().enumerate() {
            if o >= no || a >= na {
                return Err(Error::Domain(format!("category {n} = ({o}, {a}) outside {no}x{na}")));
            }
            if ids[o * na + a].replace(n).is_some() {
                return Err(Error::Domain(format!("pair ({o}, {a}) listed twice")));
            }
        }
        for (kind, names) in [("object", &object_names), ("action", &action_names)] {
            let unique: HashSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::Domain(format!("duplicate {kind} name")));
            }
        }
        Ok(Self {
            object_names,
            action_names,
            ids,
            categories,
        })
    }

    /// Ids assigned in row-major order of a boolean matrix.
    pub fn from_matrix(object_names: Vec<String>, action_names: Vec<String>, matrix: &[Vec<bool>]) -> Result<Self> {
        if matrix.len() != object_names.len() || matrix.iter().any(|r| r.len() != action_names.len()) {
            return Err(Error::shape(
                "feasibility",
                &[matrix.len(), matrix.first().map_or(0, |r| r.len())],
                &[object_names.len(), action_names.len()],
            ));
        }
        let categories = matrix
            .iter()
            .enumerate()
            .flat_map(|(o, row)| row.iter().enumerate().filter(|(_, &f)| f).map(move |(a, _)| (o, a)))
            .collect();
        Self::new(object_names, action_names, categories)
    }

    pub fn num_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_names.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn object_names(&self) -> &[String] {
        &self.object_names
    }

    pub fn action_names(&self) -> &[String] {
        &self.action_names
    }

    pub fn is_feasible(&self, object: usize, action: usize) -> bool {
        self.category(object, action).is_some()
    }

    pub fn category(&self, object: usize, action: usize) -> Option<usize> {
        if object >= self.num_objects() || action >= self.num_actions() {
            return None;
        }
        self.ids[object * self.num_actions() + action]
    }

    /// `(object, action)` of every category, indexed by category id.
    pub fn categories(&self) -> &[(usize, usize)] {
        &self.categories
    }

    pub fn feasible_actions(&self, object: usize) -> Vec<bool> {
        (0..self.num_actions()).map(|a| self.is_feasible(object, a)).collect()
    }

    pub fn matrix(&self) -> Vec<Vec<bool>> {
        (0..self.num_objects()).map(|o| self.feasible_actions(o)).collect()
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            objects: self.object_names.clone(),
            actions: self.action_names.clone(),
            categories: self
                .categories
                .iter()
                .enumerate()
                .map(|(id, &(o, a))| CategoryEntry {
                    id,
                    object: self.object_names[o].clone(),
                    action: self.action_names[a].clone(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("plain data");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        let find = |names: &[String], n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| Error::Domain(format!("unknown name {n:?} in feasibility table")))
        };
        let mut categories = Vec::with_capacity(file.categories.len());
        for (k, c) in file.categories.iter().enumerate() {
            if c.id != k {
                return Err(Error::Domain(format!("category ids must be 0..N in order, found {} at {k}", c.id)));
            }
            categories.push((find(&file.objects, &c.object)?, find(&file.actions, &c.action)?));
        }
        Self::new(file.objects, file.actions, categories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Box and object labels a re-composed row inherits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoLabel<T> {
    pub human_box: [T; 4],
    pub object_box: [T; 4],
    pub object_class: usize,
}

/// A ground-truth instance together with the representations of the query
/// matched to it.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedSample<T> {
    pub ho: Vec<T>,
    pub int: Vec<T>,
    pub label: HoLabel<T>,
    pub actions: Vec<bool>,
    pub source_image: usize,
}

/// `(image, instance)` within a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub image: usize,
    pub instance: usize,
}

/// Which pair representation meets which interaction representation, row by
/// row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecompositionPlan {
    pub rows: Vec<(SampleRef, SampleRef)>,
}

impl RecompositionPlan {
    /// Every ordered image pair `(a, b)`, including `a = b`, in order; within
    /// a pair, row `m·N_b + k` joins pair instance `m` of `a` with
    /// interaction instance `k` of `b`. An instance meeting itself is skipped
    /// unless `include_self` is set.
    pub fn new(counts: &[usize], include_self: bool) -> Self {
        let mut rows = Vec::new();
        for (a, &na) in counts.iter().enumerate() {
            for (b, &nb) in counts.iter().enumerate() {
                for m in 0..na {
                    for k in 0..nb {
                        if a == b && m == k && !include_self {
                            continue;
                        }
                        rows.push((SampleRef { image: a, instance: m }, SampleRef { image: b, instance: k }));
                    }
                }
            }
        }
        Self { rows }
    }

    /// Closed-form row count of [`RecompositionPlan::new`].
    pub fn expected_len(counts: &[usize], include_self: bool) -> usize {
        let total: usize = counts.iter().sum();
        if include_self {
            total * total
        } else {
            total * total - total
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Row `m·N_b + k` is `rp_a[m] ⊕ ri_b[k]`. Either side empty gives an empty
/// result.
pub fn cross_concat<T: Real>(rp_a: &Tensor<T>, ri_b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, nb) = (rp_a.rows(), ri_b.rows());
    let (ca, cb) = (rp_a.cols(), ri_b.cols());
    if rp_a.shape().len() != 2 || ri_b.shape().len() != 2 {
        return Err(Error::shape("cross_concat", rp_a.shape(), ri_b.shape()));
    }
    let mut data = Vec::with_capacity(na * nb * (ca + cb));
    for m in 0..na {
        for k in 0..nb {
            data.extend_from_slice(rp_a.row(m));
            data.extend_from_slice(ri_b.row(k));
        }
    }
    Tensor::new(vec![na * nb, ca + cb], data)
}

/// Tape form of [`cross_concat`].
pub fn cross_concat_on_tape<T: Real>(tape: &mut Tape<T>, rp_a: Var, ri_b: Var) -> Result<Var> {
    let (na, nb) = (tape.shape(rp_a)[0], tape.shape(ri_b)[0]);
    let left: Vec<usize> = (0..na).flat_map(|m| std::iter::repeat_n(m, nb)).collect();
    let right: Vec<usize> = (0..na).flat_map(|_| 0..nb).collect();
    let l = tape.gather_rows(rp_a, &left)?;
    let r = tape.gather_rows(ri_b, &right)?;
    tape.concat(&[l, r], 1)
}

/// Row `(m, k)` keeps the actions of donor `k` that the object of pair `m`
/// can take. Rows that end up all-zero are kept.
pub fn recompose_labels(object_classes: &[usize], donor_actions: &[Vec<bool>], table: &FeasibilityTable) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(object_classes.len() * donor_actions.len());
    for &o in object_classes {
        for acts in donor_actions {
            out.push(acts.iter().enumerate().map(|(a, &on)| on && table.is_feasible(o, a)).collect());
        }
    }
    out
}

fn masked_row(actions: &[bool], object: usize, table: &FeasibilityTable) -> Vec<bool> {
    recompose_labels(&[object], std::slice::from_ref(&actions.to_vec()), table).remove(0)
}

fn bool_matrix<T: Real>(rows: &[Vec<bool>], width: usize) -> Tensor<T> {
    let data = rows.iter().flat_map(|r| r.iter().map(|&b| if b { T::one() } else { T::zero() })).collect();
    Tensor::new(vec![rows.len(), width], data).expect("uniform width")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecomposedBatch<T> {
    /// `[N_cp, 2·C_q]`.
    pub features: Tensor<T>,
    pub ho_labels: Vec<HoLabel<T>>,
    /// `[N_cp, N_a]` multi-hot.
    pub action_labels: Tensor<T>,
    /// `(pair source, interaction source)` per row.
    pub provenance: Vec<(SampleRef, SampleRef)>,
}

impl<T: Real> RecomposedBatch<T> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Re-composes the matched samples of every image in the batch.
pub fn build_recomposed_batch<T: Real>(
    samples_by_image: &[Vec<MatchedSample<T>>],
    table: &FeasibilityTable,
    include_self: bool,
) -> Result<RecomposedBatch<T>> {
    let width = samples_by_image
        .iter()
        .flatten()
        .map(|s| s.ho.len() + s.int.len())
        .next()
        .unwrap_or(0);
    let counts: Vec<usize> = samples_by_image.iter().map(Vec::len).collect();
    let plan = RecompositionPlan::new(&counts, include_self);
    let mut features = Vec::with_capacity(plan.len() * width);
    let mut ho_labels = Vec::with_capacity(plan.len());
    let mut actions = Vec::with_capacity(plan.len());
    for &(p, i) in &plan.rows {
        let ps = &samples_by_image[p.image][p.instance];
        let is = &samples_by_image[i.image][i.instance];
        if ps.ho.len() + is.int.len() != width {
            return Err(Error::shape("recompose", &[ps.ho.len(), is.int.len()], &[width]));
        }
        features.extend_from_slice(&ps.ho);
        features.extend_from_slice(&is.int);
        ho_labels.push(ps.label.clone());
        actions.push(masked_row(&is.actions, ps.label.object_class, table));
    }
    Ok(RecomposedBatch {
        features: Tensor::new(vec![plan.len(), width], features)?,
        ho_labels,
        action_labels: bool_matrix(&actions, table.num_actions()),
        provenance: plan.rows,
    })
}

/// One image's matched rows on a tape, all in ground-truth order.
#[derive(Clone, Debug)]
pub struct MatchedImage<T> {
    pub ho: Var,
    pub int: Var,
    /// Matched predictions of the pair side: boxes `[N_gt, 4]` and object
    /// logits `[N_gt, N_o + 1]`.
    pub human_pred: Var,
    pub object_pred: Var,
    pub object_logits: Var,
    pub labels: Vec<HoLabel<T>>,
    pub actions: Vec<Vec<bool>>,
}

/// Re-composed rows on a tape, ready for the action head.
#[derive(Clone, Debug)]
pub struct RecomposedVars<T> {
    pub features: Var,
    pub human_pred: Var,
    pub object_pred: Var,
    pub object_logits: Var,
    pub ho_labels: Vec<HoLabel<T>>,
    pub action_labels: Tensor<T>,
    pub plan: RecompositionPlan,
}

fn stack<T: Real>(tape: &mut Tape<T>, parts: Vec<Var>) -> Result<Var> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}

/// Builds the re-composed rows for `images`. `None` when the plan is empty.
pub fn recompose_on_tape<T: Real>(
    tape: &mut Tape<T>,
    images: &[MatchedImage<T>],
    table: &FeasibilityTable,
    include_self: bool,
) -> Result<Option<RecomposedVars<T>>> {
    let counts: Vec<usize> = images.iter().map(|m| m.labels.len()).collect();
    let plan = RecompositionPlan::new(&counts, include_self);
    if plan.is_empty() {
        return Ok(None);
    }
    let mut offsets = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &c in &counts {
        offsets.push(acc);
        acc += c;
    }
    let live: Vec<&MatchedImage<T>> = images.iter().filter(|m| !m.labels.is_empty()).collect();
    let ho = stack(tape, live.iter().map(|m| m.ho).collect())?;
    let int = stack(tape, live.iter().map(|m| m.int).collect())?;
    let hp = stack(tape, live.iter().map(|m| m.human_pred).collect())?;
    let op = stack(tape, live.iter().map(|m| m.object_pred).collect())?;
    let ol = stack(tape, live.iter().map(|m| m.object_logits).collect())?;

    let p_rows: Vec<usize> = plan.rows.iter().map(|(p, _)| offsets[p.image] + p.instance).collect();
    let i_rows: Vec<usize> = plan.rows.iter().map(|(_, i)| offsets[i.image] + i.instance).collect();
    let left = tape.gather_rows(ho, &p_rows)?;
    let right = tape.gather_rows(int, &i_rows)?;
    let features = tape.concat(&[left, right], 1)?;
    let human_pred = tape.gather_rows(hp, &p_rows)?;
    let object_pred = tape.gather_rows(op, &p_rows)?;
    let object_logits = tape.gather_rows(ol, &p_rows)?;

    let mut ho_labels = Vec::with_capacity(plan.len());
    let mut actions = Vec::with_capacity(plan.len());
    for &(p, i) in &plan.rows {
        let label = images[p.image].labels[p.instance].clone();
        actions.push(masked_row(&images[i.image].actions[i.instance], label.object_class, table));
        ho_labels.push(label);
    }
    Ok(Some(RecomposedVars {
        features,
        human_pred,
        object_pred,
        object_logits,
        ho_labels,
        action_labels: bool_matrix(&actions, table.num_actions()),
        plan,
    }))
}

/// The four loss terms of re-composed rows. Boxes and object class are
/// scored with the pair source's original matched predictions; only the
/// action pathway sees the new rows.
pub fn recomposed_losses<T: Real>(
    tape: &mut Tape<T>,
    model: &HoiModel<T>,
    batch: &RecomposedVars<T>,
) -> Result<LossVars> {
    let logits = model.action_logits(tape, batch.features)?;
    let human_target = boxes_tensor(batch.ho_labels.iter().map(|l| l.human_box));
    let object_target = boxes_tensor(batch.ho_labels.iter().map(|l| l.object_box));
    let (box_l1, giou) = box_losses(tape, batch.human_pred, batch.object_pred, &human_target, &object_target)?;
    let classes: Vec<usize> = batch.ho_labels.iter().map(|l| l.object_class).collect();
    let object = tape.softmax_cross_entropy(batch.object_logits, &classes)?;
    let action = action_loss(tape, logits, &batch.action_labels)?;
    Ok(LossVars {
        box_l1,
        giou,
        object,
        action,
    })
}
