//! Contrastive objectives.
//!
//! * anchor loss: the trainable network `f` must identify the frozen anchor's
//!   embedding of the same input among the anchor embeddings of the other
//!   samples;
//! * task loss: a CutMix blend `x̂` must be close to both of its sources
//!   `x_i` and `x_j`, weighted by the realized mixing coefficient;
//! * composite loss: anchor loss plus the largest of the `M` task losses of
//!   each sample, averaged over the batch.
//!
//! All embeddings are expected to be unit-normalized, so every logit lies in
//! `[-1/τ, 1/τ]`. Softmaxes are evaluated in log-space with max subtraction.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.07;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Unit-normalized embeddings of a batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    ids: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, ids: Vec<String>) -> Result<Self> {
        if vectors.nrows() != ids.len() {
            return Err(Error::Dimension(format!(
                "{} embeddings but {} ids",
                vectors.nrows(),
                ids.len()
            )));
        }
        check_unit_rows(vectors.view())?;
        Ok(Self { vectors, ids })
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<String>) {
        (self.vectors, self.ids)
    }
}

pub fn check_unit_rows(vectors: ArrayView2<f64>) -> Result<()> {
    for (i, row) in vectors.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::Parameter(format!(
                "embedding {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    Ok(())
}

/// Scales every row to unit Euclidean norm. Zero rows stay zero.
pub fn normalize_rows(vectors: &Array2<f64>) -> Array2<f64> {
    let mut out = vectors.clone();
    for mut row in out.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    InBatch,
}

/// Which in-batch samples act as negatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativePolicy {
    pub mode: NegativeMode,
    /// Drop the blend partner `j` from the negatives of `x̂_i` (it is a positive).
    pub exclude_partner: bool,
}

impl Default for NegativePolicy {
    fn default() -> Self {
        Self {
            mode: NegativeMode::InBatch,
            exclude_partner: true,
        }
    }
}

impl NegativePolicy {
    /// Negatives of sample `i` for the anchor term.
    pub fn anchor_negatives(&self, i: usize, batch: usize) -> Vec<usize> {
        (0..batch).filter(|&k| k != i).collect()
    }

    /// Negatives of the blend of `i` with `partner` for the task term.
    pub fn task_negatives(&self, i: usize, partner: usize, batch: usize) -> Vec<usize> {
        (0..batch)
            .filter(|&k| k != i && !(self.exclude_partner && k == partner))
            .collect()
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_lam(lam: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lam}")));
    }
    Ok(())
}

/// `(a · bank_k) / τ` for every row `k` of `bank`.
pub fn similarity_logits(a: ArrayView1<f64>, bank: ArrayView2<f64>, tau: f64) -> Result<Array1<f64>> {
    check_tau(tau)?;
    if bank.ncols() != a.len() {
        return Err(Error::Dimension(format!(
            "query has dimension {}, bank rows have {}",
            a.len(),
            bank.ncols()
        )));
    }
    Ok(bank.dot(&a) / tau)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(pos)` over `[pos, negs...]`.
pub fn softmax_cross_entropy(pos: f64, negs: &[f64]) -> f64 {
    let lse = log_sum_exp(std::iter::once(pos).chain(negs.iter().copied()));
    (lse - pos).max(0.0)
}

/// Cross-entropy over logits selected by `columns` from `row`, with the
/// positive at `columns[0]`. Adds `weight · ∂CE/∂row` into `grad_row`.
fn ce_accumulate(row: ArrayView1<f64>, columns: &[usize], weight: f64, grad_row: &mut [f64]) -> f64 {
    let max = columns.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = columns.iter().map(|&k| (row[k] - max).exp()).sum();
    let lse = max + sum.ln();
    if weight != 0.0 {
        for &k in columns {
            grad_row[k] += weight * (row[k] - lse).exp();
        }
        grad_row[columns[0]] -= weight;
    }
    (lse - row[columns[0]]).max(0.0)
}

/// Anchor-distillation loss for one sample: positive `f(x)·f_a(x)`, negatives
/// `f(x)·f_a(x⁻_k)`.
pub fn anchor_contrastive_loss(
    f_x: ArrayView1<f64>,
    fa_x: ArrayView1<f64>,
    fa_negs: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    if fa_negs.nrows() == 0 {
        return Err(Error::Capacity("anchor loss needs at least one negative".into()));
    }
    let pos = f_x.dot(&fa_x) / tau;
    let negs = similarity_logits(f_x, fa_negs, tau)?;
    Ok(softmax_cross_entropy(pos, negs.as_slice().expect("contiguous")))
}

/// Mixed-pair loss `λ·CE_i + (1−λ)·CE_j` for one blend `x̂` of `x_i` and `x_j`.
///
/// `CE_i` has positive logit `f(x_i)·f(x̂)/τ`, `CE_j` has `f(x_j)·f(x̂)/τ`, and
/// both share the negative logits `f(x̂)·f(x⁻_k)/τ`.
pub fn task_contrastive_loss(
    f_xhat: ArrayView1<f64>,
    f_xi: ArrayView1<f64>,
    f_xj: ArrayView1<f64>,
    f_negs: ArrayView2<f64>,
    lam: f64,
    tau: f64,
) -> Result<f64> {
    check_tau(tau)?;
    check_lam(lam)?;
    if f_negs.nrows() == 0 {
        return Err(Error::Capacity("task loss needs at least one negative".into()));
    }
    let negs = similarity_logits(f_xhat, f_negs, tau)?;
    let negs = negs.as_slice().expect("contiguous");
    let ce_i = softmax_cross_entropy(f_xi.dot(&f_xhat) / tau, negs);
    let ce_j = softmax_cross_entropy(f_xj.dot(&f_xhat) / tau, negs);
    Ok(lam * ce_i + (1.0 - lam) * ce_j)
}

/// Per-batch loss components.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Anchor loss per sample (zeros when the objective has no anchor term).
    pub l_cl: Vec<f64>,
    /// `N × M` task losses.
    pub l_task: Array2<f64>,
    /// Index of the selected (largest) task loss per sample.
    pub m_star: Vec<usize>,
    /// `mean_i (l_cl_i + l_task[i, m*_i])`.
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_l_cl(&self) -> f64 {
        mean(&self.l_cl)
    }

    pub fn selected_task(&self) -> Vec<f64> {
        self.m_star
            .iter()
            .enumerate()
            .map(|(i, &m)| self.l_task[[i, m]])
            .collect()
    }

    pub fn mean_l_task_selected(&self) -> f64 {
        mean(&self.selected_task())
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (k, v) in values.into_iter().enumerate() {
        if v > best_value || (k == 0 && v.is_nan()) {
            best = k;
            best_value = v;
        }
    }
    best
}

/// One blend of a sample, with its own negatives.
#[derive(Debug, Clone)]
pub struct BlendTerms<'a> {
    pub f_xhat: ArrayView1<'a, f64>,
    pub f_xj: ArrayView1<'a, f64>,
    pub f_negs: ArrayView2<'a, f64>,
    pub lam: f64,
}

/// Everything the composite loss needs for one sample.
#[derive(Debug, Clone)]
pub struct SampleTerms<'a> {
    pub f_xi: ArrayView1<'a, f64>,
    pub fa_xi: ArrayView1<'a, f64>,
    pub fa_negs: ArrayView2<'a, f64>,
    pub blends: Vec<BlendTerms<'a>>,
}

/// Composite loss from explicit per-sample terms.
pub fn fewmax_loss(samples: &[SampleTerms<'_>], tau: f64) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Capacity("composite loss needs a non-empty batch".into()));
    }
    let m = samples[0].blends.len();
    if m == 0 {
        return Err(Error::Parameter("every sample needs at least one blend".into()));
    }
    let mut l_cl = Vec::with_capacity(samples.len());
    let mut l_task = Array2::zeros((samples.len(), m));
    let mut m_star = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        if sample.blends.len() != m {
            return Err(Error::Dimension(format!(
                "sample {i} has {} blends, expected {m}",
                sample.blends.len()
            )));
        }
        l_cl.push(anchor_contrastive_loss(sample.f_xi, sample.fa_xi, sample.fa_negs, tau)?);
        for (k, blend) in sample.blends.iter().enumerate() {
            l_task[[i, k]] = task_contrastive_loss(
                blend.f_xhat,
                sample.f_xi,
                blend.f_xj,
                blend.f_negs,
                blend.lam,
                tau,
            )?;
        }
        m_star.push(argmax_first(l_task.row(i).iter().copied()));
    }
    let total = l_cl
        .iter()
        .zip(&m_star)
        .enumerate()
        .map(|(i, (cl, &k))| cl + l_task[[i, k]])
        .sum::<f64>()
        / samples.len() as f64;
    Ok(LossBreakdown {
        l_cl,
        l_task,
        m_star,
        total,
    })
}

/// Task-network embeddings of the `M` blend sets of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendedBatch {
    /// `M` arrays of `B × D`; row `i` of array `m` embeds `x̂_{i,m}`.
    pub embeddings: Vec<Array2<f64>>,
    /// `B × M` partner indices.
    pub partners: Array2<usize>,
    /// `B × M` realized coefficients.
    pub lams: Array2<f64>,
}

impl BlendedBatch {
    pub fn blend_count(&self) -> usize {
        self.embeddings.len()
    }
}

/// Which terms the batch objective contains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub tau: f64,
    /// Include the anchor-distillation term.
    pub anchor_term: bool,
    pub negatives: NegativePolicy,
}

impl Objective {
    pub fn new(tau: f64, anchor_term: bool) -> Self {
        Self {
            tau,
            anchor_term,
            negatives: NegativePolicy::default(),
        }
    }
}

/// Gradients of the batch total with respect to every embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrad {
    pub d_clean: Array2<f64>,
    pub d_anchor: Option<Array2<f64>>,
    /// One `B × D` array per blend set; rows of unselected blends are zero.
    pub d_blends: Vec<Array2<f64>>,
}

/// Batch objective without gradients.
pub fn batch_objective(
    objective: &Objective,
    clean: ArrayView2<f64>,
    anchor: Option<ArrayView2<f64>>,
    blends: &BlendedBatch,
) -> Result<LossBreakdown> {
    evaluate(objective, clean, anchor, blends, false).map(|(b, _)| b)
}

/// Batch objective and its gradient.
pub fn batch_objective_with_grad(
    objective: &Objective,
    clean: ArrayView2<f64>,
    anchor: Option<ArrayView2<f64>>,
    blends: &BlendedBatch,
) -> Result<(LossBreakdown, ObjectiveGrad)> {
    evaluate(objective, clean, anchor, blends, true)
        .map(|(b, g)| (b, g.expect("gradient requested")))
}

fn evaluate(
    objective: &Objective,
    clean: ArrayView2<f64>,
    anchor: Option<ArrayView2<f64>>,
    blends: &BlendedBatch,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<ObjectiveGrad>)> {
    let tau = objective.tau;
    check_tau(tau)?;
    let (b, d) = clean.dim();
    let m = blends.blend_count();
    if b < 2 {
        return Err(Error::Capacity(format!("batch of {b} has no in-batch negatives")));
    }
    if m == 0 {
        return Err(Error::Parameter("blend count M must be at least 1".into()));
    }
    if blends.partners.dim() != (b, m) || blends.lams.dim() != (b, m) {
        return Err(Error::Dimension("partner/lambda tables do not match the batch".into()));
    }
    if let Some(e) = blends.embeddings.iter().find(|e| e.dim() != (b, d)) {
        return Err(Error::Dimension(format!(
            "blend embeddings {:?} do not match clean {:?}",
            e.dim(),
            (b, d)
        )));
    }
    let anchor = match (objective.anchor_term, anchor) {
        (true, Some(a)) if a.dim() == (b, d) => Some(a),
        (true, Some(a)) => {
            return Err(Error::Dimension(format!(
                "anchor embeddings {:?} do not match clean {:?}",
                a.dim(),
                (b, d)
            )))
        }
        (true, None) => {
            return Err(Error::Parameter("objective has an anchor term but no anchor embeddings".into()))
        }
        (false, _) => None,
    };
    let inv_b = 1.0 / b as f64;

    // Anchor term.
    let mut l_cl = vec![0.0; b];
    let mut d_anchor_logits = want_grad.then(|| Array2::<f64>::zeros((b, b)));
    if let Some(a) = anchor {
        let logits = clean.dot(&a.t()) / tau;
        for i in 0..b {
            let mut columns = Vec::with_capacity(b);
            columns.push(i);
            columns.extend(objective.negatives.anchor_negatives(i, b));
            let mut scratch = vec![0.0; b];
            let weight = if want_grad { inv_b } else { 0.0 };
            l_cl[i] = ce_accumulate(logits.row(i), &columns, weight, &mut scratch);
            if let Some(g) = d_anchor_logits.as_mut() {
                g.row_mut(i).iter_mut().zip(&scratch).for_each(|(o, v)| *o += v);
            }
        }
    }

    // Task terms: logits[i, k] = f(x̂_{i,m}) · f(x_k) / τ.
    let mut l_task = Array2::zeros((b, m));
    let mut task_logits = Vec::with_capacity(m);
    let mut columns_i: Vec<Vec<Vec<usize>>> = Vec::with_capacity(m);
    let mut columns_j: Vec<Vec<Vec<usize>>> = Vec::with_capacity(m);
    for (k, emb) in blends.embeddings.iter().enumerate() {
        let logits = emb.dot(&clean.t()) / tau;
        let mut cols_i = Vec::with_capacity(b);
        let mut cols_j = Vec::with_capacity(b);
        for i in 0..b {
            let j = blends.partners[[i, k]];
            let lam = blends.lams[[i, k]];
            check_lam(lam)?;
            if j >= b || j == i {
                return Err(Error::Parameter(format!(
                    "blend partner {j} of sample {i} is invalid"
                )));
            }
            let negs = objective.negatives.task_negatives(i, j, b);
            if negs.is_empty() {
                return Err(Error::Capacity(format!(
                    "sample {i} has no task negatives in a batch of {b}"
                )));
            }
            let ci: Vec<usize> = std::iter::once(i).chain(negs.iter().copied()).collect();
            let cj: Vec<usize> = std::iter::once(j).chain(negs.iter().copied()).collect();
            let mut scratch = vec![0.0; b];
            let ce_i = ce_accumulate(logits.row(i), &ci, 0.0, &mut scratch);
            let ce_j = ce_accumulate(logits.row(i), &cj, 0.0, &mut scratch);
            l_task[[i, k]] = lam * ce_i + (1.0 - lam) * ce_j;
            cols_i.push(ci);
            cols_j.push(cj);
        }
        task_logits.push(logits);
        columns_i.push(cols_i);
        columns_j.push(cols_j);
    }

    let m_star: Vec<usize> = (0..b)
        .map(|i| argmax_first(l_task.row(i).iter().copied()))
        .collect();
    let total = (0..b).map(|i| l_cl[i] + l_task[[i, m_star[i]]]).sum::<f64>() * inv_b;
    let breakdown = LossBreakdown {
        l_cl,
        l_task,
        m_star,
        total,
    };
    if !want_grad {
        return Ok((breakdown, None));
    }

    let mut d_clean = Array2::<f64>::zeros((b, d));
    let mut d_anchor = None;
    if let (Some(a), Some(g)) = (anchor, d_anchor_logits) {
        d_clean += &(g.dot(&a) / tau);
        d_anchor = Some(g.t().dot(&clean) / tau);
    }
    let mut d_blends = Vec::with_capacity(m);
    for (k, emb) in blends.embeddings.iter().enumerate() {
        let mut g = Array2::<f64>::zeros((b, b));
        for i in 0..b {
            if breakdown.m_star[i] != k {
                continue;
            }
            let lam = blends.lams[[i, k]];
            let row = task_logits[k].row(i);
            let grad_row = g.row_mut(i).into_slice().expect("contiguous");
            ce_accumulate(row, &columns_i[k][i], lam * inv_b, grad_row);
            ce_accumulate(row, &columns_j[k][i], (1.0 - lam) * inv_b, grad_row);
        }
        d_clean += &(g.t().dot(emb) / tau);
        d_blends.push(g.dot(&clean) / tau);
    }
    Ok((
        breakdown,
        Some(ObjectiveGrad {
            d_clean,
            d_anchor,
            d_blends,
        }),
    ))
}

/// Row `i` of `arrays[pick[i]]` for every `i`.
pub fn gather_rows(arrays: &[Array2<f64>], pick: &[usize]) -> Array2<f64> {
    let d = arrays.first().map(|a| a.ncols()).unwrap_or(0);
    let mut out = Array2::zeros((pick.len(), d));
    for (i, &k) in pick.iter().enumerate() {
        out.row_mut(i).assign(&arrays[k].row(i));
    }
    out
}

/// Euclidean norm of every row.
pub fn row_norms(a: ArrayView2<f64>) -> Array1<f64> {
    a.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
