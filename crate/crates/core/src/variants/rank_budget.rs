//! Adaptive rank allocation: budget scheduling, sensitivity scoring and
//! masking (AdaLoRA), L0-gated masking (SaLoRA), incremental growth
//! (IncreLoRA), and one-shot allocators (GoRA, RaLoRA's effective rank, EVA).

use crate::adapter::{AdapterSpec, ParamId, ParamStore};
use crate::error::{AdapterError, LinalgError};
use crate::linalg::{gaussian, mm, svd, Mat};
use crate::rng::RngStream;
use crate::variants::{RankOneComponent, VariantState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// A diag(gates) B^T with A (m x r), B (n x r); masked gates contribute
/// exactly zero.
pub fn svd_product(a: &Mat, gates: &[f64], b: &Mat) -> Mat {
    let mut ag = a.clone();
    for j in 0..ag.cols {
        if gates[j] == 0.0 {
            for i in 0..ag.rows {
                *ag.at_mut(i, j) = 0.0;
            }
        } else {
            for i in 0..ag.rows {
                *ag.at_mut(i, j) *= gates[j];
            }
        }
    }
    mm(&ag, &b.transpose())
}

/// Chain rule of the SVD parameterization; `gate_grad_mask` multiplies the
/// per-rank gate derivative (1/0 for hard masks, HC derivative for SaLoRA).
pub(crate) fn svd_backward(
    a: &Mat,
    b: &Mat,
    gates: &[f64],
    gate_grad_mask: &[f64],
    gw: &Mat,
    s: f64,
) -> (Mat, Mat, Mat) {
    let r = gates.len();
    let gwb = mm(gw, b); // m x r
    let mut ga = gwb.clone();
    for j in 0..r {
        for i in 0..ga.rows {
            *ga.at_mut(i, j) *= s * gates[j];
        }
    }
    let gwt_a = mm(&gw.transpose(), a); // n x r
    let mut gb = gwt_a;
    for j in 0..r {
        for i in 0..gb.rows {
            *gb.at_mut(i, j) *= s * gates[j];
        }
    }
    let mut gd = Mat::zeros(1, r);
    for j in 0..r {
        let mut acc = 0.0;
        for i in 0..a.rows {
            acc += a.at(i, j) * gwb.at(i, j);
        }
        gd.data[j] = s * acc * gate_grad_mask[j];
    }
    (ga, gb, gd)
}

/// ||A^T A - I||_F^2 + ||B^T B - I||_F^2 for tall factors.
pub fn orth_residual(a: &Mat, b: &Mat) -> f64 {
    let ra = mm(&a.transpose(), a)
        .sub(&Mat::identity(a.cols))
        .frob_norm()
        .powi(2);
    let rb = mm(&b.transpose(), b)
        .sub(&Mat::identity(b.cols))
        .frob_norm()
        .powi(2);
    ra + rb
}

pub(crate) fn orth_residual_grads(a: &Mat, b: &Mat) -> (Mat, Mat) {
    let ga = mm(a, &mm(&a.transpose(), a).sub(&Mat::identity(a.cols))).scale(4.0);
    let gb = mm(b, &mm(&b.transpose(), b).sub(&Mat::identity(b.cols))).scale(4.0);
    (ga, gb)
}

/// Summed orthogonality regularizer over adapters, scaled by lambda.
pub fn adalora_reg_loss(factors: &[(&Mat, &Mat)], lambda: f64) -> f64 {
    lambda * factors.iter().map(|(a, b)| orth_residual(a, b)).sum::<f64>()
}

/// Cubic budget scheduler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub b0: usize,
    pub b_final: usize,
    pub t_i: u64,
    pub t_f: u64,
    pub total_steps: u64,
}

impl BudgetSchedule {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.t_i + self.t_f > self.total_steps {
            return Err(AdapterError::InvalidSpec(
                "budget schedule: t_i + t_f must not exceed total steps".into(),
            ));
        }
        if self.b_final > self.b0 {
            return Err(AdapterError::InvalidSpec(
                "budget schedule: b0 must be >= final budget".into(),
            ));
        }
        Ok(())
    }

    /// Anneal window of zero length: the schedule degenerates to a step
    /// function; reported so runs can flag it.
    pub fn is_degenerate(&self) -> bool {
        self.total_steps == self.t_i + self.t_f
    }

    /// Piecewise budget: b0 before t_i, cubic anneal to b_final, constant
    /// after T - t_f. Fractional anneal values round half-up.
    pub fn budget_at(&self, t: u64) -> usize {
        debug_assert!(t <= self.total_steps);
        if t < self.t_i {
            return self.b0;
        }
        if self.is_degenerate() || t >= self.total_steps - self.t_f {
            return self.b_final;
        }
        let window = (self.total_steps - self.t_i - self.t_f) as f64;
        let progress = (t - self.t_i) as f64 / window;
        let raw = self.b_final as f64
            + (self.b0 as f64 - self.b_final as f64) * (1.0 - progress).powi(3);
        (raw + 0.5).floor() as usize
    }
}

/// Exponentially smoothed sensitivity statistics, per tracked tensor entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityState {
    pub beta1: f64,
    pub beta2: f64,
    ibar: BTreeMap<usize, Mat>,
    ubar: BTreeMap<usize, Mat>,
}

impl SensitivityState {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            ibar: BTreeMap::new(),
            ubar: BTreeMap::new(),
        }
    }

    /// Fold one observation I(w) = |w . g| into the two EMA recursions.
    pub fn update(&mut self, id: ParamId, w: &Mat, g: &Mat) {
        let i_now = Mat::from_vec(
            w.rows,
            w.cols,
            w.data
                .iter()
                .zip(&g.data)
                .map(|(wi, gi)| (wi * gi).abs())
                .collect(),
        );
        let prev_i = self
            .ibar
            .entry(id.0)
            .or_insert_with(|| Mat::zeros(w.rows, w.cols))
            .clone();
        let prev_u = self
            .ubar
            .entry(id.0)
            .or_insert_with(|| Mat::zeros(w.rows, w.cols))
            .clone();
        let mut new_i = prev_i.clone();
        let mut new_u = prev_u;
        for idx in 0..i_now.numel() {
            new_i.data[idx] = self.beta1 * prev_i.data[idx] + (1.0 - self.beta1) * i_now.data[idx];
            new_u.data[idx] = self.beta2 * new_u.data[idx]
                + (1.0 - self.beta2) * (i_now.data[idx] - prev_i.data[idx]).abs();
        }
        self.ibar.insert(id.0, new_i);
        self.ubar.insert(id.0, new_u);
    }

    /// Smoothed score s(w) = Ibar * Ubar, entrywise.
    pub fn score(&self, id: ParamId) -> Option<Mat> {
        let i = self.ibar.get(&id.0)?;
        let u = self.ubar.get(&id.0)?;
        Some(Mat::from_vec(
            i.rows,
            i.cols,
            i.data.iter().zip(&u.data).map(|(a, b)| a * b).collect(),
        ))
    }
}

/// Triplet importance: S = s(d) + mean_j s(a_j) + mean_j s(b_j).
pub fn triplet_importance(a_col_scores: &[f64], b_col_scores: &[f64], d_score: f64) -> f64 {
    let ma = a_col_scores.iter().sum::<f64>() / a_col_scores.len().max(1) as f64;
    let mb = b_col_scores.iter().sum::<f64>() / b_col_scores.len().max(1) as f64;
    d_score + ma + mb
}

/// Globally keep the `budget` highest-scoring triplets active. Ties break by
/// (adapter index, rank index); everything else is masked. `scores[i][j]` is
/// adapter i's rank-j triplet score.
pub fn adalora_mask_step(
    masks: &mut [Vec<bool>],
    scores: &[Vec<f64>],
    budget: usize,
) -> Result<(), AdapterError> {
    let total: usize = scores.iter().map(|s| s.len()).sum();
    if budget > total {
        return Err(AdapterError::Invalid(format!(
            "budget {budget} exceeds total ranks {total}"
        )));
    }
    let mut items: Vec<(f64, usize, usize)> = Vec::with_capacity(total);
    for (ai, s) in scores.iter().enumerate() {
        for (ri, v) in s.iter().enumerate() {
            items.push((*v, ai, ri));
        }
    }
    items.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    for m in masks.iter_mut() {
        for v in m.iter_mut() {
            *v = false;
        }
    }
    for &(_, ai, ri) in items.iter().take(budget) {
        masks[ai][ri] = true;
    }
    Ok(())
}

/// IncreLoRA growth selection: indices of the top-h modules by averaged
/// sensitivity, capped by the remaining budget. Ties break by module index.
pub fn increlora_select(avg_scores: &[f64], h: usize, budget_left: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..avg_scores.len()).collect();
    order.sort_by(|&i, &j| {
        avg_scores[j]
            .partial_cmp(&avg_scores[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    order.into_iter().take(h.min(budget_left)).collect()
}

/// Append one rank-one component (a, b random; d = 1e-5) to an IncreLoRA
/// state.
pub fn increlora_append(
    state: &mut VariantState,
    spec: &AdapterSpec,
    store: &mut ParamStore,
    rng: &mut RngStream,
    born_at: u64,
) -> Result<(), AdapterError> {
    let comps = match state {
        VariantState::IncreLora { comps, .. } => comps,
        _ => {
            return Err(AdapterError::Unsupported {
                variant: state.kind_name().into(),
                what: "increlora growth".into(),
            })
        }
    };
    let idx = comps.len();
    let a = store.add(
        &format!("increlora.a{idx}"),
        gaussian(spec.in_features, 1, 1.0 / (spec.in_features as f64).sqrt(), rng),
        true,
    );
    let b = store.add(
        &format!("increlora.b{idx}"),
        gaussian(spec.out_features, 1, 1.0 / (spec.out_features as f64).sqrt(), rng),
        true,
    );
    let d = store.add(
        &format!("increlora.d{idx}"),
        Mat::from_vec(1, 1, vec![1e-5]),
        true,
    );
    comps.push(RankOneComponent { a, b, d, born_at });
    Ok(())
}

/// Per-component linear learning-rate warmup over `warmup_steps` steps from
/// the component's birth.
pub fn increlora_warmup_scale(born_at: u64, now: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return 1.0;
    }
    let age = now.saturating_sub(born_at);
    (age as f64 / warmup_steps as f64).min(1.0)
}

/// Hard-Concrete gate hyperparameters plus the SaLoRA loss weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HcParams {
    pub tau: f64,
    pub gamma: f64,
    pub zeta: f64,
    /// Orthogonality weight.
    pub lambda: f64,
    /// Lagrangian weight on the budget term.
    pub beta: f64,
    /// Target expected rank budget b.
    pub target_b: f64,
}

impl Default for HcParams {
    fn default() -> Self {
        Self {
            tau: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
            lambda: 0.1,
            beta: 0.1,
            target_b: 4.0,
        }
    }
}

impl HcParams {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if !(self.gamma < 0.0 && self.zeta > 1.0 && self.tau > 0.0) {
            return Err(AdapterError::InvalidSpec(
                "hard-concrete requires gamma < 0 < 1 < zeta and tau > 0".into(),
            ));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stretched-clamped Hard-Concrete gate for a positive d.
pub fn salora_gate(d: f64, u: f64, tau: f64, gamma: f64, zeta: f64) -> Result<f64, AdapterError> {
    if !(0.0 < u && u < 1.0) {
        return Err(AdapterError::Invalid("hard-concrete noise u must be in (0,1)".into()));
    }
    if !(gamma < 0.0 && zeta > 1.0) {
        return Err(AdapterError::Invalid("hard-concrete domain violation".into()));
    }
    Ok(gate_from_parts(d.ln(), u, tau, gamma, zeta))
}

pub(crate) fn salora_gate_from_logd(log_d: f64, u: f64, hc: &HcParams) -> f64 {
    gate_from_parts(log_d, u, hc.tau, hc.gamma, hc.zeta)
}

fn gate_from_parts(log_d: f64, u: f64, tau: f64, gamma: f64, zeta: f64) -> f64 {
    let z = ((u / (1.0 - u)).ln() + log_d) / tau;
    let stretched = sigmoid(z) * (zeta - gamma) + gamma;
    stretched.clamp(0.0, 1.0)
}

/// d gate / d log d, zero where the stretch saturates the clamp.
fn gate_grad_logd(log_d: f64, u: f64, hc: &HcParams) -> f64 {
    let z = ((u / (1.0 - u)).ln() + log_d) / hc.tau;
    let sg = sigmoid(z);
    let stretched = sg * (hc.zeta - hc.gamma) + hc.gamma;
    if stretched <= 0.0 || stretched >= 1.0 {
        0.0
    } else {
        sg * (1.0 - sg) * (hc.zeta - hc.gamma) / hc.tau
    }
}

/// Closed-form expected L0: sum_i sigma(log d_i - tau * log(-gamma/zeta)).
pub fn salora_l0(log_d: &Mat, hc: &HcParams) -> f64 {
    let shift = hc.tau * (-hc.gamma / hc.zeta).ln();
    log_d.data.iter().map(|ld| sigmoid(ld - shift)).sum()
}

/// Combined SaLoRA regularizer over adapters:
/// lambda * sum R_orth + beta * (mean R_L0 - b)^2.
pub fn salora_reg(adapters: &[(&Mat, &Mat, &Mat)], hc: &HcParams) -> f64 {
    let orth: f64 = adapters
        .iter()
        .map(|(a, b, _)| orth_residual(a, b))
        .sum();
    let mean_l0: f64 = adapters
        .iter()
        .map(|(_, _, ld)| salora_l0(ld, hc))
        .sum::<f64>()
        / adapters.len().max(1) as f64;
    hc.lambda * orth + hc.beta * (mean_l0 - hc.target_b).powi(2)
}

/// Gradient of the Lagrangian L0 term with respect to log d for a single
/// adapter (the mean over adapters is the adapter's own R_L0).
pub(crate) fn salora_l0_lagrangian_grad(log_d: &Mat, hc: &HcParams) -> Mat {
    let shift = hc.tau * (-hc.gamma / hc.zeta).ln();
    let r_l0 = salora_l0(log_d, hc);
    let outer = 2.0 * hc.beta * (r_l0 - hc.target_b);
    Mat::from_vec(
        log_d.rows,
        log_d.cols,
        log_d
            .data
            .iter()
            .map(|ld| {
                let sg = sigmoid(ld - shift);
                outer * sg * (1.0 - sg)
            })
            .collect(),
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn salora_backward(
    a: &Mat,
    b: &Mat,
    log_d: &Mat,
    gates: &[f64],
    u: Option<&[f64]>,
    hc: &HcParams,
    gw: &Mat,
    s: f64,
) -> (Mat, Mat, Mat) {
    let grad_mask: Vec<f64> = log_d
        .data
        .iter()
        .enumerate()
        .map(|(j, ld)| {
            let uj = u.map(|us| us[j]).unwrap_or(0.5);
            gate_grad_logd(*ld, uj, hc)
        })
        .collect();
    svd_backward(a, b, gates, &grad_mask, gw, s)
}

/// Ablation-score formula: IS(r_i) = S(M) - S(M \ r_i) + S(M_{r_i}).
pub fn alora_importance(s_full: f64, s_without: f64, s_only: f64) -> f64 {
    s_full - s_without + s_only
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoraAllocation {
    pub ranks: Vec<usize>,
    /// Set when all importances were zero and the uniform fallback applied.
    pub uniform_fallback: bool,
}

/// GoRA rank allocation from pre-training weight/gradient pairs. The printed
/// rule divides by sqrt(m_i + n_i); `budget_conserving` switches to the
/// variant that divides by (m_i + n_i), which keeps sum (m_i + n_i) r_i at
/// the reference budget.
pub fn gora_allocate(
    weights: &[Mat],
    grads: &[Mat],
    r_ref: usize,
    r_min: usize,
    r_max: usize,
    budget_conserving: bool,
) -> Result<GoraAllocation, AdapterError> {
    if weights.is_empty() || weights.len() != grads.len() {
        return Err(AdapterError::Invalid(
            "gora_allocate needs matching non-empty weight/grad lists".into(),
        ));
    }
    let importances: Vec<f64> = weights
        .iter()
        .zip(grads)
        .map(|(w, g)| {
            w.data
                .iter()
                .zip(&g.data)
                .map(|(wi, gi)| (wi * gi).abs())
                .sum::<f64>()
                / w.numel() as f64
        })
        .collect();
    let total_importance: f64 = importances.iter().sum();
    if total_importance == 0.0 {
        return Ok(GoraAllocation {
            ranks: vec![r_ref.clamp(r_min, r_max); weights.len()],
            uniform_fallback: true,
        });
    }
    let p_total: f64 = weights
        .iter()
        .map(|w| (w.rows + w.cols) as f64 * r_ref as f64)
        .sum();
    let ranks = weights
        .iter()
        .zip(&importances)
        .map(|(w, imp)| {
            let alpha = imp / total_importance;
            let dim = (w.rows + w.cols) as f64;
            let denom = if budget_conserving { dim } else { dim.sqrt() };
            let raw = (p_total * alpha / denom + 0.5).floor() as i64;
            (raw.max(r_min as i64) as usize).min(r_max)
        })
        .collect();
    Ok(GoraAllocation {
        ranks,
        uniform_fallback: false,
    })
}

/// Entropy-based effective rank: exp(-sum p_i ln p_i) of the normalized
/// singular value distribution.
pub fn erank(g: &Mat) -> Result<f64, LinalgError> {
    let s = svd(g)?;
    let total: f64 = s.singular_values.iter().sum();
    if total == 0.0 {
        return Err(LinalgError::EmptyInput("erank of zero matrix".into()));
    }
    let mut h = 0.0;
    for sv in &s.singular_values {
        let p = sv / total;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h.exp())
}

/// RaLoRA's documented heuristic (not a paper formula): smallest k dividing
/// both dims with k * r >= min(erank, r_max).
pub fn ralora_blocks(m: usize, n: usize, r: usize, erank_value: f64, r_max: usize) -> usize {
    let target = erank_value.min(r_max as f64);
    let mut k = 1;
    for cand in 1..=m.min(n) {
        if m % cand == 0 && n % cand == 0 {
            k = cand;
            if (cand * r) as f64 >= target {
                break;
            }
        }
    }
    k
}

/// EVA explained-variance allocation: xi_j^i = sigma_j^2 / ((M-1) ||sigma^i||_1),
/// budget assigned greedily to the globally largest ratios. Ties break by
/// (rank index, module index), which distributes fully tied scores
/// round-robin across modules.
pub fn eva_allocate(
    sigmas: &[Vec<f64>],
    m_samples: usize,
    budget: usize,
) -> Result<Vec<usize>, AdapterError> {
    if m_samples < 2 {
        return Err(AdapterError::Invalid(
            "eva_allocate requires M >= 2 samples".into(),
        ));
    }
    let total: usize = sigmas.iter().map(|s| s.len()).sum();
    if budget > total {
        return Err(AdapterError::Invalid(format!(
            "budget {budget} exceeds {total} singular directions"
        )));
    }
    let mut items: Vec<(f64, usize, usize)> = Vec::new();
    for (mi, s) in sigmas.iter().enumerate() {
        let l1: f64 = s.iter().sum();
        if l1 == 0.0 {
            continue;
        }
        for (j, sv) in s.iter().enumerate() {
            let xi = sv * sv / ((m_samples as f64 - 1.0) * l1);
            items.push((xi, j, mi));
        }
    }
    items.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .unwrap()
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    let mut counts = vec![0usize; sigmas.len()];
    for &(_, _, mi) in items.iter().take(budget) {
        counts[mi] += 1;
    }
    Ok(counts)
}

/// Builders ---------------------------------------------------------------

pub fn build_adalora(
    spec: &AdapterSpec,
    reg_lambda: f64,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add(
        "adalora.a",
        gaussian(m, r, 1.0 / (m as f64).sqrt(), rng),
        true,
    );
    let b = store.add(
        "adalora.b",
        gaussian(n, r, 1.0 / (n as f64).sqrt(), rng),
        true,
    );
    let d = store.add("adalora.d", Mat::zeros(1, r), true);
    VariantState::SvdMasked {
        a,
        b,
        d,
        mask: vec![true; r],
        reg_lambda,
    }
}

pub fn build_increlora(
    spec: &AdapterSpec,
    initial_components: usize,
    reg_lambda: f64,
    warmup_steps: u64,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> VariantState {
    let mut state = VariantState::IncreLora {
        comps: Vec::new(),
        reg_lambda,
        warmup_steps,
    };
    for _ in 0..initial_components {
        increlora_append(&mut state, spec, store, rng, 0).unwrap();
    }
    state
}

pub fn build_salora(
    spec: &AdapterSpec,
    hc: HcParams,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<VariantState, AdapterError> {
    hc.validate()?;
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add(
        "salora.a",
        gaussian(m, r, 1.0 / (m as f64).sqrt(), rng),
        true,
    );
    // B = 0 keeps the delta zero at init while the gates start near one.
    let b = store.add("salora.b", Mat::zeros(n, r), true);
    let log_d = store.add("salora.logd", Mat::ones(1, r).scale(2.3), true);
    Ok(VariantState::Salora { a, b, log_d, hc })
}
