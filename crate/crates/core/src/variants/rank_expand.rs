//! Rank expansion via linear-algebraic composition: merge-and-reinit phases,
//! block-diagonal stacking, Hadamard pairs, base-coupled Hadamard updates,
//! and Kronecker factorizations.

use crate::adapter::{AdapterLayer, AdapterSpec, ParamId, ParamStore};
use crate::error::{AdapterError, LinalgError};
use crate::linalg::{block_diag, hadamard, kaiming_uniform, kronecker, mm, Mat};
use crate::rng::RngStream;
use crate::variants::VariantState;
use serde::{Deserialize, Serialize};

/// Merge-and-reinit phase plan. Merges happen exactly at multiples of
/// `phase_length`; the learning rate re-warms from zero afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReloraSchedule {
    pub phase_length: u64,
    pub phases: u64,
    pub rewarmup_steps: u64,
}

impl ReloraSchedule {
    pub fn new(phase_length: u64, phases: u64) -> Self {
        Self {
            phase_length,
            phases,
            rewarmup_steps: 10,
        }
    }

    pub fn is_boundary(&self, t: u64) -> bool {
        t >= 1 && t % self.phase_length == 0 && t / self.phase_length <= self.phases
    }
}

/// What the trainer must do after a boundary step.
#[derive(Debug, Clone, PartialEq)]
pub enum ReloraAction {
    None,
    /// Delta merged into the base and factors reinitialized; reset the
    /// optimizer moments of these parameters and re-warm the learning rate.
    MergedAndReset { reset_params: Vec<ParamId> },
}

/// At a phase boundary: fold the current delta into the base, reinitialize
/// the factors (A kaiming, B zero), and tell the caller to zero the
/// corresponding optimizer moments. No-op elsewhere.
pub fn relora_step_hook(
    layer: &mut AdapterLayer,
    store: &mut ParamStore,
    schedule: &ReloraSchedule,
    t: u64,
    rng: &mut RngStream,
) -> Result<ReloraAction, AdapterError> {
    if !schedule.is_boundary(t) {
        return Ok(ReloraAction::None);
    }
    let delta = layer.delta_weight(store)?;
    layer.base.add_assign(&delta);
    let (a, b) = match layer.variant {
        VariantState::Vanilla { a, b } => (a, b),
        _ => {
            return Err(AdapterError::Unsupported {
                variant: layer.variant.kind_name().into(),
                what: "relora merge-and-reinit".into(),
            })
        }
    };
    let spec = &layer.spec;
    *store.value_mut(a) = kaiming_uniform(spec.in_features, spec.rank, spec.in_features, rng);
    *store.value_mut(b) = Mat::zeros(spec.rank, spec.out_features);
    Ok(ReloraAction::MergedAndReset {
        reset_params: vec![a, b],
    })
}

/// MELoRA block-diagonal delta: s * blockdiag(A_i) * blockdiag(B_i).
pub fn melora_delta(blocks_a: &[&Mat], blocks_b: &[&Mat], s: f64) -> Result<Mat, LinalgError> {
    let a: Vec<Mat> = blocks_a.iter().map(|m| (*m).clone()).collect();
    let b: Vec<Mat> = blocks_b.iter().map(|m| (*m).clone()).collect();
    let da = block_diag(&a)?;
    let db = block_diag(&b)?;
    Ok(mm(&da, &db).scale(s))
}

/// Per-block chain rule: only the diagonal blocks of GW touch (A_i, B_i).
pub(crate) fn melora_backward(
    store: &ParamStore,
    blocks: &[(ParamId, ParamId)],
    gw: &Mat,
    s: f64,
) -> Vec<(ParamId, Mat)> {
    let mut out = Vec::new();
    let (mut r0, mut c0) = (0usize, 0usize);
    for (aid, bid) in blocks {
        let a = store.value(*aid);
        let b = store.value(*bid);
        let (mb, nb) = (a.rows, b.cols);
        let gw_block = gw.slice(r0, r0 + mb, c0, c0 + nb);
        out.push((*aid, mm(&gw_block, &b.transpose()).scale(s)));
        out.push((*bid, mm(&a.transpose(), &gw_block).scale(s)));
        r0 += mb;
        c0 += nb;
    }
    out
}

/// LoHa delta: s * (A1 B1 . A2 B2), elementwise product of two low-rank pairs.
pub fn loha_delta(a1: &Mat, b1: &Mat, a2: &Mat, b2: &Mat, s: f64) -> Mat {
    let p1 = mm(a1, b1);
    let p2 = mm(a2, b2);
    hadamard(&p1, &p2).expect("loha shapes").scale(s)
}

pub(crate) fn loha_backward(
    a1: &Mat,
    b1: &Mat,
    a2: &Mat,
    b2: &Mat,
    gw: &Mat,
    s: f64,
) -> (Mat, Mat, Mat, Mat) {
    let p1 = mm(a1, b1);
    let p2 = mm(a2, b2);
    let g1 = hadamard(gw, &p2).unwrap().scale(s);
    let g2 = hadamard(gw, &p1).unwrap().scale(s);
    (
        mm(&g1, &b1.transpose()),
        mm(&a1.transpose(), &g1),
        mm(&g2, &b2.transpose()),
        mm(&a2.transpose(), &g2),
    )
}

/// HiRA delta: base . (s * A B), Hadamard with the frozen pretrained weight.
pub fn hira_delta(base: &Mat, a: &Mat, b: &Mat, s: f64) -> Mat {
    hadamard(base, &mm(a, b).scale(s)).expect("hira shapes")
}

/// LoKr admissible divisor: largest u <= min(k, sqrt(dim)) dividing dim.
pub fn lokr_dims(m: usize, n: usize, k: usize) -> (usize, usize) {
    (lokr_divisor(m, k), lokr_divisor(n, k))
}

fn lokr_divisor(dim: usize, k: usize) -> usize {
    let cap = (k as f64).min((dim as f64).sqrt()).floor() as usize;
    (1..=cap.max(1)).rev().find(|u| dim % u == 0).unwrap_or(1)
}

/// LoKr delta: s * (A B) (x) C.
pub fn lokr_delta(a: &Mat, b: &Mat, c: &Mat, s: f64) -> Mat {
    kronecker(&mm(a, b).scale(s), c)
}

pub(crate) fn lokr_backward(a: &Mat, b: &Mat, c: &Mat, gw: &Mat, s: f64) -> (Mat, Mat, Mat) {
    let k_fac = mm(a, b); // m_d x n_d
    let (mc, nc) = c.shape();
    let (md, nd) = k_fac.shape();
    let mut gk = Mat::zeros(md, nd);
    let mut gc = Mat::zeros(mc, nc);
    for i in 0..md {
        for j in 0..nd {
            let block = gw.slice(i * mc, (i + 1) * mc, j * nc, (j + 1) * nc);
            *gk.at_mut(i, j) = s * block.dot(c);
            gc.add_scaled_assign(&block, s * k_fac.at(i, j));
        }
    }
    (
        mm(&gk, &b.transpose()),
        mm(&a.transpose(), &gk),
        gc,
    )
}

/// Factor builders ------------------------------------------------------

pub fn build_melora(
    spec: &AdapterSpec,
    k: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<VariantState, AdapterError> {
    let (m, n) = (spec.in_features, spec.out_features);
    if k == 0 || m % k != 0 || n % k != 0 {
        return Err(AdapterError::InvalidSpec(format!(
            "melora: k = {k} must divide m = {m} and n = {n}"
        )));
    }
    let mut blocks = Vec::with_capacity(k);
    for i in 0..k {
        let a = kaiming_uniform(m / k, spec.rank, m / k, rng);
        let b = Mat::zeros(spec.rank, n / k);
        let aid = store.add(&format!("melora.a{i}"), a, true);
        let bid = store.add(&format!("melora.b{i}"), b, true);
        blocks.push((aid, bid));
    }
    Ok(VariantState::Melora { k, blocks })
}

pub fn build_loha(spec: &AdapterSpec, store: &mut ParamStore, rng: &mut RngStream) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    // B1 = 0 keeps the delta zero at init; the second pair must be nonzero
    // or no gradient reaches either pair.
    let a1 = store.add("loha.a1", kaiming_uniform(m, r, m, rng), true);
    let b1 = store.add("loha.b1", Mat::zeros(r, n), true);
    let a2 = store.add("loha.a2", kaiming_uniform(m, r, m, rng), true);
    let b2 = store.add("loha.b2", kaiming_uniform(r, n, r, rng), true);
    VariantState::Loha { a1, b1, a2, b2 }
}

pub fn build_hira(spec: &AdapterSpec, store: &mut ParamStore, rng: &mut RngStream) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("hira.a", kaiming_uniform(m, r, m, rng), true);
    let b = store.add("hira.b", Mat::zeros(r, n), true);
    VariantState::Hira { a, b }
}

pub fn build_lokr(
    spec: &AdapterSpec,
    k: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<VariantState, AdapterError> {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let (md, nd) = lokr_dims(m, n, k);
    // C = 0 keeps the delta zero at init; both A and B random so the C
    // gradient path is alive from the first step.
    let a = store.add("lokr.a", kaiming_uniform(md, r, md, rng), true);
    let b = store.add("lokr.b", kaiming_uniform(r, nd, r, rng), true);
    let c = store.add("lokr.c", Mat::zeros(m / md, n / nd), true);
    Ok(VariantState::Lokr { a, b, c })
}

/// Trainable parameter counts per the closed-form ledger.
pub fn melora_param_count(m: usize, n: usize, k: usize, r_prime: usize) -> usize {
    k * r_prime * (m / k + n / k)
}

pub fn loha_param_count(m: usize, n: usize, r: usize) -> usize {
    2 * r * (m + n)
}

pub fn lokr_param_count(m: usize, n: usize, k: usize, r: usize) -> usize {
    let (md, nd) = lokr_dims(m, n, k);
    r * (md + nd) + (m / md) * (n / nd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterLayer;
    use crate::autodiff::finite_diff_grad;
    use crate::linalg::{gaussian, numerical_rank, random_low_rank};
    use crate::variants::Trace;

    #[test]
    fn melora_block_shape_and_rank() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(1);
        let spec = AdapterSpec::new(16, 8, 2, 16.0);
        let v = build_melora(&spec, 2, &mut store, &mut rng).unwrap();
        // Randomize blocks for a full-rank check.
        for id in v.param_ids() {
            let shape = store.value(id).shape();
            *store.value_mut(id) = gaussian(shape.0, shape.1, 1.0, &mut rng);
        }
        let base = Mat::zeros(16, 8);
        let d = v.delta(&store, &base, 1.0).unwrap();
        assert_eq!(d.shape(), (16, 8));
        // Effective rank k * r' on random full-rank blocks.
        assert_eq!(numerical_rank(&d).unwrap(), 4);
        // Parameter ledger.
        assert_eq!(
            store.trainable_scalar_count(),
            melora_param_count(16, 8, 2, 2)
        );
    }

    #[test]
    fn melora_k1_degenerates_to_vanilla() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(2);
        let spec = AdapterSpec::new(8, 6, 2, 16.0);
        let v = build_melora(&spec, 1, &mut store, &mut rng).unwrap();
        if let VariantState::Melora { blocks, .. } = &v {
            let a = store.value(blocks[0].0).clone();
            let mut b = gaussian(2, 6, 1.0, &mut rng);
            std::mem::swap(store.value_mut(blocks[0].1), &mut b);
            let d = v.delta(&store, &Mat::zeros(8, 6), 2.0).unwrap();
            let vanilla = mm(&a, store.value(blocks[0].1)).scale(2.0);
            assert!(d.sub(&vanilla).max_abs() < 1e-15);
        } else {
            panic!("expected melora");
        }
    }

    #[test]
    fn melora_rejects_non_divisible() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(3);
        let spec = AdapterSpec::new(10, 8, 2, 16.0);
        assert!(build_melora(&spec, 3, &mut store, &mut rng).is_err());
    }

    #[test]
    fn melora_preset_rank_16() {
        // k = 2 blocks of rank 8 give an overall rank of 16.
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(4);
        let spec = AdapterSpec::new(64, 64, 8, 16.0);
        let v = build_melora(&spec, 2, &mut store, &mut rng).unwrap();
        for id in v.param_ids() {
            let shape = store.value(id).shape();
            *store.value_mut(id) = gaussian(shape.0, shape.1, 1.0, &mut rng);
        }
        let d = v.delta(&store, &Mat::zeros(64, 64), 1.0).unwrap();
        assert_eq!(numerical_rank(&d).unwrap(), 16);
    }

    #[test]
    fn loha_reductions_and_rank() {
        let mut rng = RngStream::new(5);
        let a1 = gaussian(8, 2, 1.0, &mut rng);
        let b1 = gaussian(2, 8, 1.0, &mut rng);
        // Second pair producing all-ones: delta reduces to s * A1 B1.
        let ones_a = Mat::ones(8, 1);
        let ones_b = Mat::ones(1, 8);
        let d = loha_delta(&a1, &b1, &ones_a, &ones_b, 2.0);
        assert!(d.sub(&mm(&a1, &b1).scale(2.0)).max_abs() < 1e-12);

        // Zero pair kills the delta.
        let z = loha_delta(&a1, &b1, &Mat::zeros(8, 2), &Mat::zeros(2, 8), 2.0);
        assert_eq!(z.max_abs(), 0.0);

        // Rank <= r^2 (r = 2 -> <= 4) and generically >= r.
        let a2 = gaussian(8, 2, 1.0, &mut rng);
        let b2 = gaussian(2, 8, 1.0, &mut rng);
        let h = loha_delta(&a1, &b1, &a2, &b2, 1.0);
        let rank = numerical_rank(&h).unwrap();
        assert!(rank <= 4 && rank >= 2, "rank {rank}");
    }

    #[test]
    fn loha_param_ledger_doubles_vanilla() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(6);
        let spec = AdapterSpec::new(12, 10, 3, 16.0);
        let _ = build_loha(&spec, &mut store, &mut rng);
        assert_eq!(store.trainable_scalar_count(), loha_param_count(12, 10, 3));
    }

    #[test]
    fn hira_cases() {
        let mut rng = RngStream::new(7);
        let a = gaussian(8, 2, 1.0, &mut rng);
        let b = gaussian(2, 8, 1.0, &mut rng);
        // Ones base reduces to the vanilla delta.
        let d = hira_delta(&Mat::ones(8, 8), &a, &b, 2.0);
        assert!(d.sub(&mm(&a, &b).scale(2.0)).max_abs() < 1e-12);
        // Zero B gives zero.
        let z = hira_delta(&Mat::ones(8, 8), &a, &Mat::zeros(2, 8), 2.0);
        assert_eq!(z.max_abs(), 0.0);
        // Rank bounded by rank(base) * r on a constructed low-rank base.
        let base = random_low_rank(8, 8, 2, &mut rng);
        let h = hira_delta(&base, &a, &b, 1.0);
        assert!(numerical_rank(&h).unwrap() <= 4);
    }

    #[test]
    fn lokr_dims_formula() {
        assert_eq!(lokr_dims(64, 64, 8), (8, 8));
        assert_eq!(lokr_dims(7, 7, 8), (1, 1));
        assert_eq!(lokr_dims(64, 64, 1), (1, 1));
        // Exhaustive divisor-search oracle.
        for (m, k) in [(12usize, 5usize), (36, 7), (100, 11), (13, 4)] {
            let cap = (k as f64).min((m as f64).sqrt()).floor() as usize;
            let oracle = (1..=cap.max(1)).filter(|u| m % u == 0).max().unwrap_or(1);
            assert_eq!(lokr_dims(m, m, k).0, oracle, "m={m} k={k}");
        }
    }

    #[test]
    fn lokr_delta_cases() {
        let mut rng = RngStream::new(8);
        let a = gaussian(4, 1, 1.0, &mut rng);
        let b = gaussian(1, 4, 1.0, &mut rng);
        // C = I_1 reduces to s * A B.
        let d = lokr_delta(&a, &b, &Mat::identity(1), 2.0);
        assert!(d.sub(&mm(&a, &b).scale(2.0)).max_abs() < 1e-12);
        // r = 1, full-rank 4x4 C: overall rank = rank(AB) * rank(C) = 4.
        let c = gaussian(4, 4, 1.0, &mut rng);
        let d = lokr_delta(&a, &b, &c, 1.0);
        assert_eq!(numerical_rank(&d).unwrap(), 4);
        // Zero C -> zero delta.
        assert_eq!(lokr_delta(&a, &b, &Mat::zeros(4, 4), 1.0).max_abs(), 0.0);
    }

    #[test]
    fn relora_accumulates_phase_deltas() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(9);
        let spec = AdapterSpec::new(6, 6, 2, 16.0);
        let base = gaussian(6, 6, 1.0, &mut rng);
        let v = crate::variants::build_vanilla(&spec, &mut store, &mut rng);
        let mut layer = AdapterLayer::new(spec, base.clone(), v).unwrap();
        let schedule = ReloraSchedule::new(5, 3);
        let mut manual = base.clone();
        let mut rng2 = RngStream::new(10);
        for t in 1..=15u64 {
            // Pretend training happened: jiggle the factors.
            if let VariantState::Vanilla { a, b } = layer.variant {
                store.value_mut(a).add_assign(&gaussian(6, 2, 0.1, &mut rng2));
                store.value_mut(b).add_assign(&gaussian(2, 6, 0.1, &mut rng2));
            }
            if schedule.is_boundary(t) {
                manual.add_assign(&layer.delta_weight(&store).unwrap());
            }
            let action = relora_step_hook(&mut layer, &mut store, &schedule, t, &mut rng).unwrap();
            if schedule.is_boundary(t) {
                assert!(matches!(action, ReloraAction::MergedAndReset { .. }));
            } else {
                assert_eq!(action, ReloraAction::None);
            }
        }
        assert!(layer.base.sub(&manual).max_abs() <= 1e-10);
    }

    #[test]
    fn relora_boundary_with_zero_b_keeps_base() {
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(11);
        let spec = AdapterSpec::new(6, 6, 2, 16.0);
        let base = gaussian(6, 6, 1.0, &mut rng);
        let v = crate::variants::build_vanilla(&spec, &mut store, &mut rng);
        let mut layer = AdapterLayer::new(spec, base.clone(), v).unwrap();
        let schedule = ReloraSchedule::new(4, 2);
        relora_step_hook(&mut layer, &mut store, &schedule, 4, &mut rng).unwrap();
        assert!(layer.base.sub(&base).max_abs() == 0.0);
    }

    #[test]
    fn relora_merge_preserves_forward() {
        // Pre-merge fused forward equals post-merge base forward.
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(12);
        let spec = AdapterSpec::new(6, 5, 2, 16.0);
        let base = gaussian(6, 5, 1.0, &mut rng);
        let v = crate::variants::build_vanilla(&spec, &mut store, &mut rng);
        let mut layer = AdapterLayer::new(spec, base, v).unwrap();
        if let VariantState::Vanilla { a, b } = layer.variant {
            *store.value_mut(a) = gaussian(6, 2, 1.0, &mut rng);
            *store.value_mut(b) = gaussian(2, 5, 1.0, &mut rng);
        }
        let x = gaussian(3, 6, 1.0, &mut rng);
        let (pre, _) = layer.forward(&store, &x, false, None).unwrap();
        let schedule = ReloraSchedule::new(1, 1);
        relora_step_hook(&mut layer, &mut store, &schedule, 1, &mut rng).unwrap();
        let (post, _) = layer.forward(&store, &x, false, None).unwrap();
        assert!(pre.sub(&post).max_abs() <= 1e-12);
    }

    /// Finite-difference check of every rank-expand backward.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(13);
        let x = gaussian(3, 8, 0.8, &mut rng);
        let target = gaussian(3, 8, 1.0, &mut rng);
        let base = gaussian(8, 8, 0.5, &mut rng);

        let builders: Vec<(&str, Box<dyn Fn(&AdapterSpec, &mut ParamStore, &mut RngStream) -> VariantState>)> = vec![
            ("melora", Box::new(|s, st, r| build_melora(s, 2, st, r).unwrap())),
            ("loha", Box::new(|s, st, r| build_loha(s, st, r))),
            ("hira", Box::new(|s, st, r| build_hira(s, st, r))),
            ("lokr", Box::new(|s, st, r| build_lokr(s, 4, st, r).unwrap())),
        ];
        for (name, build) in builders {
            let mut store = ParamStore::new();
            let spec = AdapterSpec::new(8, 8, 2, 16.0);
            let v = build(&spec, &mut store, &mut rng);
            // Randomize all tensors so no gradient path is structurally zero.
            for id in v.param_ids() {
                let shape = store.value(id).shape();
                *store.value_mut(id) = gaussian(shape.0, shape.1, 0.7, &mut rng);
            }
            let layer = AdapterLayer::new(spec, base.clone(), v).unwrap();
            let loss = |st: &ParamStore| -> f64 {
                let (out, _) = layer.forward(st, &x, false, None).unwrap();
                let d = out.sub(&target);
                0.5 * d.frob_norm().powi(2) / d.numel() as f64
            };
            store.zero_grads();
            let (out, trace) = layer.forward(&store, &x, false, None).unwrap();
            let grad_out = out.sub(&target).scale(1.0 / out.numel() as f64);
            layer.backward(&mut store, &x, &trace, &grad_out).unwrap();
            for id in layer.variant.param_ids() {
                let analytic = store.grad(id).clone();
                let mut probe_store = store.clone();
                let fd = finite_diff_grad(
                    |m| {
                        *probe_store.clone().value_mut(id) = m.clone();
                        let mut st = store.clone();
                        *st.value_mut(id) = m.clone();
                        loss(&st)
                    },
                    store.value(id),
                    1e-6,
                );
                let scale = analytic.max_abs().max(fd.max_abs()).max(1e-8);
                assert!(
                    analytic.sub(&fd).max_abs() / scale < 1e-5,
                    "{name}: param {id:?} grad mismatch"
                );
            }
            let _ = Trace::default();
        }
    }
}
