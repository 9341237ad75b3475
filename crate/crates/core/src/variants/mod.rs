//! Variant strategies behind the unified adapter interface.
//!
//! Each family module holds the math (deltas, hand-derived backward passes,
//! allocation rules); `VariantState` wires a family's tensors into the
//! parameter store and dispatches the layer calls.

pub mod init;
pub mod moe;
pub mod optim;
pub mod rank_budget;
pub mod rank_expand;
pub mod rank_share;

use crate::adapter::{AdapterSpec, ParamId, ParamStore};
use crate::error::AdapterError;
use crate::linalg::{kaiming_uniform, mm, Mat};
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

pub use moe::{HydraState, MoeRouter, MoeState};
pub use rank_budget::HcParams;

/// Per-call artifacts the backward pass needs (dropout mask, routing
/// decisions, stochastic gate draws) plus instrumentation counters.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    /// Input after the adapter-branch dropout mask, when dropout was applied.
    pub dropped_x: Option<Mat>,
    /// Routing weights per row (b x N), zero outside the active set.
    pub routing: Option<Mat>,
    /// Raw softmax gate probabilities per row (b x N).
    pub gate_probs: Option<Mat>,
    /// Number of (row, expert) applications; sparsity contract: == b * k.
    pub expert_applications: usize,
    /// Hard-Concrete noise draws used by a stochastic-gate forward.
    pub hc_u: Option<Vec<f64>>,
    /// Gate values actually applied (SaLoRA).
    pub gates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankOneComponent {
    pub a: ParamId,
    pub b: ParamId,
    pub d: ParamId,
    /// Step at which the component was added; drives its warmup multiplier.
    pub born_at: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariantState {
    Vanilla {
        a: ParamId,
        b: ParamId,
    },
    Melora {
        k: usize,
        blocks: Vec<(ParamId, ParamId)>,
    },
    Loha {
        a1: ParamId,
        b1: ParamId,
        a2: ParamId,
        b2: ParamId,
    },
    Hira {
        a: ParamId,
        b: ParamId,
    },
    Lokr {
        a: ParamId,
        b: ParamId,
        c: ParamId,
    },
    /// ShareLoRA / shared factors sliced to this layer's dims.
    ShareLora {
        a: ParamId,
        b: ParamId,
    },
    Vera {
        a_s: ParamId,
        b_s: ParamId,
        d: ParamId,
        bvec: ParamId,
    },
    Rasa {
        a_local: ParamId,
        a_shared: ParamId,
        b_local: ParamId,
        b_shared: ParamId,
        d: ParamId,
    },
    DenseLora {
        a_s: ParamId,
        mixer: ParamId,
        b_s: ParamId,
    },
    ProLora {
        a_local: ParamId,
        a_base: ParamId,
        b_local: ParamId,
        b_base: ParamId,
        chunks: usize,
        stride_a: usize,
        stride_b: usize,
    },
    RandLora {
        a_s: ParamId,
        b_bases: Vec<ParamId>,
        gammas: Vec<ParamId>,
        lambdas: Vec<ParamId>,
        swapped: bool,
    },
    /// AdaLoRA-style SVD parameterization A diag(mask . d) B^T with B (n x r).
    SvdMasked {
        a: ParamId,
        b: ParamId,
        d: ParamId,
        mask: Vec<bool>,
        reg_lambda: f64,
    },
    IncreLora {
        comps: Vec<RankOneComponent>,
        reg_lambda: f64,
        warmup_steps: u64,
    },
    Salora {
        a: ParamId,
        b: ParamId,
        log_d: ParamId,
        hc: HcParams,
    },
    Dora {
        a: ParamId,
        b: ParamId,
        magnitude: ParamId,
    },
    Delora {
        a: ParamId,
        b: ParamId,
        lambda: ParamId,
        base_spectral_norm: f64,
    },
    MosLora {
        a: ParamId,
        mixer: ParamId,
        b: ParamId,
    },
    Aurora {
        a: ParamId,
        b: ParamId,
        spline_w: ParamId,
        knots: Vec<f64>,
    },
    Loda {
        a: ParamId,
        b: ParamId,
        w1: ParamId,
        w2: ParamId,
    },
    /// SORSA / LoRA-SB shape: Delta = s * A diag(d) B with flags deciding
    /// which tensors train.
    SvdDiag {
        a: ParamId,
        d: ParamId,
        b: ParamId,
        reg_lambda: f64,
    },
    Moe(MoeState),
    Hydra(HydraState),
}

impl VariantState {
    pub fn kind_name(&self) -> &'static str {
        match self {
            VariantState::Vanilla { .. } => "vanilla",
            VariantState::Melora { .. } => "melora",
            VariantState::Loha { .. } => "loha",
            VariantState::Hira { .. } => "hira",
            VariantState::Lokr { .. } => "lokr",
            VariantState::ShareLora { .. } => "sharelora",
            VariantState::Vera { .. } => "vera",
            VariantState::Rasa { .. } => "rasa",
            VariantState::DenseLora { .. } => "denselora",
            VariantState::ProLora { .. } => "prolora",
            VariantState::RandLora { .. } => "randlora",
            VariantState::SvdMasked { .. } => "adalora",
            VariantState::IncreLora { .. } => "increlora",
            VariantState::Salora { .. } => "salora",
            VariantState::Dora { .. } => "dora",
            VariantState::Delora { .. } => "delora",
            VariantState::MosLora { .. } => "moslora",
            VariantState::Aurora { .. } => "aurora",
            VariantState::Loda { .. } => "loda",
            VariantState::SvdDiag { .. } => "svd_diag",
            VariantState::Moe(_) => "moe",
            VariantState::Hydra(_) => "hydralora",
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            VariantState::Vanilla { a, b }
            | VariantState::Hira { a, b }
            | VariantState::ShareLora { a, b } => vec![*a, *b],
            VariantState::Melora { blocks, .. } => {
                blocks.iter().flat_map(|(a, b)| vec![*a, *b]).collect()
            }
            VariantState::Loha { a1, b1, a2, b2 } => vec![*a1, *b1, *a2, *b2],
            VariantState::Lokr { a, b, c } => vec![*a, *b, *c],
            VariantState::Vera { a_s, b_s, d, bvec } => vec![*a_s, *b_s, *d, *bvec],
            VariantState::Rasa {
                a_local,
                a_shared,
                b_local,
                b_shared,
                d,
            } => vec![*a_local, *a_shared, *b_local, *b_shared, *d],
            VariantState::DenseLora { a_s, mixer, b_s } => vec![*a_s, *mixer, *b_s],
            VariantState::ProLora {
                a_local,
                a_base,
                b_local,
                b_base,
                ..
            } => vec![*a_local, *a_base, *b_local, *b_base],
            VariantState::RandLora {
                a_s,
                b_bases,
                gammas,
                lambdas,
                ..
            } => {
                let mut ids = vec![*a_s];
                ids.extend(b_bases.iter().copied());
                ids.extend(gammas.iter().copied());
                ids.extend(lambdas.iter().copied());
                ids
            }
            VariantState::SvdMasked { a, b, d, .. } => vec![*a, *b, *d],
            VariantState::IncreLora { comps, .. } => comps
                .iter()
                .flat_map(|c| vec![c.a, c.b, c.d])
                .collect(),
            VariantState::Salora { a, b, log_d, .. } => vec![*a, *b, *log_d],
            VariantState::Dora { a, b, magnitude } => vec![*a, *b, *magnitude],
            VariantState::Delora { a, b, lambda, .. } => vec![*a, *b, *lambda],
            VariantState::MosLora { a, mixer, b } => vec![*a, *mixer, *b],
            VariantState::Aurora { a, b, spline_w, .. } => vec![*a, *b, *spline_w],
            VariantState::Loda { a, b, w1, w2 } => vec![*a, *b, *w1, *w2],
            VariantState::SvdDiag { a, d, b, .. } => vec![*a, *d, *b],
            VariantState::Moe(m) => m.param_ids(),
            VariantState::Hydra(h) => h.param_ids(),
        }
    }

    /// Adapter-branch output s * (xd -> variant path), or None when the
    /// variant replaces the whole forward (weight-decomposed variants).
    #[allow(clippy::too_many_arguments)]
    pub fn adapter_out(
        &self,
        store: &ParamStore,
        base: &Mat,
        s: f64,
        xd: &Mat,
        train_mode: bool,
        step_seed: u64,
        trace: &mut Trace,
    ) -> Result<Option<Mat>, AdapterError> {
        match self {
            VariantState::Vanilla { a, b } | VariantState::ShareLora { a, b } => {
                let av = store.value(*a);
                let bv = store.value(*b);
                let (m, n) = (xd.cols, base.cols);
                let a_sl = slice_rows(av, m);
                let b_sl = slice_cols(bv, n);
                Ok(Some(mm(&mm(xd, &a_sl), &b_sl).scale(s)))
            }
            VariantState::Dora { .. } => Ok(None),
            VariantState::Aurora {
                a, b, spline_w, knots,
            } => Ok(Some(optim::aurora_forward(
                store.value(*a),
                store.value(*b),
                store.value(*spline_w),
                knots,
                xd,
                s,
            ))),
            VariantState::Loda { a, b, w1, w2 } => Ok(Some(optim::loda_forward(
                store.value(*a),
                store.value(*b),
                store.value(*w1),
                store.value(*w2),
                xd,
                s,
            ))),
            VariantState::Moe(m) => m.forward(store, xd, trace).map(Some),
            VariantState::Hydra(h) => h.forward(store, xd, s, trace).map(Some),
            VariantState::Salora { a, b, log_d, hc } => {
                let gates = if train_mode {
                    let mut rng = RngStream::new(step_seed ^ 0x5a10);
                    let u: Vec<f64> = (0..store.value(*log_d).numel())
                        .map(|_| rng.open01())
                        .collect();
                    let g: Vec<f64> = store
                        .value(*log_d)
                        .data
                        .iter()
                        .zip(&u)
                        .map(|(ld, ui)| rank_budget::salora_gate_from_logd(*ld, *ui, hc))
                        .collect();
                    trace.hc_u = Some(u);
                    g
                } else {
                    store
                        .value(*log_d)
                        .data
                        .iter()
                        .map(|ld| rank_budget::salora_gate_from_logd(*ld, 0.5, hc))
                        .collect()
                };
                trace.gates = Some(gates.clone());
                let delta = rank_budget::svd_product(
                    store.value(*a),
                    &gates,
                    store.value(*b),
                )
                .scale(s);
                Ok(Some(mm(xd, &delta)))
            }
            // Every other variant has a materializable delta; the fused
            // branch is x * (s * Delta) computed factored where it matters.
            _ => {
                let delta = self.delta(store, base, s)?;
                Ok(Some(mm(xd, &delta)))
            }
        }
    }

    /// Full forward replacement for weight-decomposed variants.
    pub fn full_forward(
        &self,
        store: &ParamStore,
        base: &Mat,
        s: f64,
        x: &Mat,
        _xd: &Mat,
    ) -> Result<Mat, AdapterError> {
        match self {
            VariantState::Dora { a, b, magnitude } => {
                let w = optim::dora_effective_weight(
                    base,
                    store.value(*a),
                    store.value(*b),
                    store.value(*magnitude),
                    s,
                )?;
                Ok(mm(x, &w))
            }
            other => Err(AdapterError::Unsupported {
                variant: other.kind_name().into(),
                what: "full_forward".into(),
            }),
        }
    }

    /// Materialized Delta W (before adding to the base), scaled.
    pub fn delta(&self, store: &ParamStore, base: &Mat, s: f64) -> Result<Mat, AdapterError> {
        match self {
            VariantState::Vanilla { a, b } | VariantState::ShareLora { a, b } => {
                let (m, n) = base.shape();
                let a_sl = slice_rows(store.value(*a), m);
                let b_sl = slice_cols(store.value(*b), n);
                Ok(mm(&a_sl, &b_sl).scale(s))
            }
            VariantState::Melora { blocks, .. } => {
                let av: Vec<&Mat> = blocks.iter().map(|(a, _)| store.value(*a)).collect();
                let bv: Vec<&Mat> = blocks.iter().map(|(_, b)| store.value(*b)).collect();
                rank_expand::melora_delta(&av, &bv, s).map_err(AdapterError::Linalg)
            }
            VariantState::Loha { a1, b1, a2, b2 } => Ok(rank_expand::loha_delta(
                store.value(*a1),
                store.value(*b1),
                store.value(*a2),
                store.value(*b2),
                s,
            )),
            VariantState::Hira { a, b } => Ok(rank_expand::hira_delta(
                base,
                store.value(*a),
                store.value(*b),
                s,
            )),
            VariantState::Lokr { a, b, c } => Ok(rank_expand::lokr_delta(
                store.value(*a),
                store.value(*b),
                store.value(*c),
                s,
            )),
            VariantState::Vera { a_s, b_s, d, bvec } => {
                let (m, n) = base.shape();
                Ok(rank_share::vera_delta(
                    store.value(*a_s),
                    store.value(*b_s),
                    store.value(*d),
                    store.value(*bvec),
                    m,
                    n,
                    s,
                ))
            }
            VariantState::Rasa {
                a_local,
                a_shared,
                b_local,
                b_shared,
                d,
            } => Ok(rank_share::rasa_delta(
                store.value(*a_local),
                store.value(*a_shared),
                store.value(*b_local),
                store.value(*b_shared),
                store.value(*d),
                s,
            )),
            VariantState::DenseLora { a_s, mixer, b_s } => Ok(mm(
                &mm(store.value(*a_s), store.value(*mixer)),
                store.value(*b_s),
            )
            .scale(s)),
            VariantState::ProLora {
                a_local,
                a_base,
                b_local,
                b_base,
                chunks,
                stride_a,
                stride_b,
            } => {
                let (a, b) = rank_share::prolora_assemble(
                    store.value(*a_local),
                    store.value(*a_base),
                    store.value(*b_local),
                    store.value(*b_base),
                    *chunks,
                    *stride_a,
                    *stride_b,
                )?;
                Ok(mm(&a, &b).scale(s))
            }
            VariantState::RandLora {
                a_s,
                b_bases,
                gammas,
                lambdas,
                swapped,
            } => {
                let (m, n) = base.shape();
                let bs: Vec<&Mat> = b_bases.iter().map(|id| store.value(*id)).collect();
                let gs: Vec<&Mat> = gammas.iter().map(|id| store.value(*id)).collect();
                let ls: Vec<&Mat> = lambdas.iter().map(|id| store.value(*id)).collect();
                Ok(rank_share::randlora_delta(
                    store.value(*a_s),
                    &bs,
                    &gs,
                    &ls,
                    m,
                    n,
                    *swapped,
                ))
            }
            VariantState::SvdMasked { a, b, d, mask, .. } => {
                let gates: Vec<f64> = store
                    .value(*d)
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(di, mi)| if *mi { *di } else { 0.0 })
                    .collect();
                Ok(rank_budget::svd_product(store.value(*a), &gates, store.value(*b)).scale(s))
            }
            VariantState::IncreLora { comps, .. } => {
                let (m, n) = base.shape();
                let mut out = Mat::zeros(m, n);
                for c in comps {
                    let a = store.value(c.a);
                    let b = store.value(c.b);
                    let d = store.value(c.d).data[0];
                    out.add_assign(&mm(a, &b.transpose()).scale(d));
                }
                Ok(out.scale(s))
            }
            VariantState::Salora { a, b, log_d, hc } => {
                // Deterministic expected gate (u = 1/2) for materialization.
                let gates: Vec<f64> = store
                    .value(*log_d)
                    .data
                    .iter()
                    .map(|ld| rank_budget::salora_gate_from_logd(*ld, 0.5, hc))
                    .collect();
                Ok(rank_budget::svd_product(store.value(*a), &gates, store.value(*b)).scale(s))
            }
            VariantState::Dora { a, b, magnitude } => {
                let w = optim::dora_effective_weight(
                    base,
                    store.value(*a),
                    store.value(*b),
                    store.value(*magnitude),
                    s,
                )?;
                Ok(w.sub(base))
            }
            VariantState::Delora {
                a,
                b,
                lambda,
                base_spectral_norm,
            } => Ok(optim::delora_delta(
                store.value(*a),
                store.value(*b),
                store.value(*lambda).data[0],
                *base_spectral_norm,
            )),
            VariantState::MosLora { a, mixer, b } => Ok(mm(
                &mm(store.value(*a), store.value(*mixer)),
                store.value(*b),
            )
            .scale(s)),
            VariantState::SvdDiag { a, d, b, .. } => {
                let dv = &store.value(*d).data;
                let mut ad = store.value(*a).clone();
                for j in 0..ad.cols {
                    for i in 0..ad.rows {
                        *ad.at_mut(i, j) *= dv[j];
                    }
                }
                Ok(mm(&ad, store.value(*b)).scale(s))
            }
            VariantState::Aurora { .. } | VariantState::Loda { .. } => {
                Err(AdapterError::NotMaterializable(self.kind_name().into()))
            }
            VariantState::Moe(_) | VariantState::Hydra(_) => {
                Err(AdapterError::NotMaterializable(self.kind_name().into()))
            }
        }
    }

    pub fn effective_weight(
        &self,
        store: &ParamStore,
        base: &Mat,
        s: f64,
    ) -> Result<Mat, AdapterError> {
        match self {
            VariantState::Dora { a, b, magnitude } => optim::dora_effective_weight(
                base,
                store.value(*a),
                store.value(*b),
                store.value(*magnitude),
                s,
            ),
            _ => Ok(base.add(&self.delta(store, base, s)?)),
        }
    }

    /// Accumulate parameter gradients given the loss gradient at the layer
    /// output. Each formula here is the hand-derived chain rule for the
    /// variant's delta; all of them are finite-difference checked in tests.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        store: &mut ParamStore,
        base: &Mat,
        s: f64,
        x: &Mat,
        xd: &Mat,
        grad_out: &Mat,
        trace: &Trace,
    ) -> Result<(), AdapterError> {
        // Gradient w.r.t. the materialized delta: GW = xd^T * grad_out.
        let gw = mm(&xd.transpose(), grad_out);
        match self {
            VariantState::Vanilla { a, b } | VariantState::ShareLora { a, b } => {
                let (m, n) = base.shape();
                let a_sl = slice_rows(store.value(*a), m);
                let b_sl = slice_cols(store.value(*b), n);
                let ga = mm(&gw, &b_sl.transpose()).scale(s);
                let gb = mm(&a_sl.transpose(), &gw).scale(s);
                accumulate_sliced_rows(store, *a, &ga);
                accumulate_sliced_cols(store, *b, &gb);
            }
            VariantState::Melora { blocks, .. } => {
                let grads = rank_expand::melora_backward(store, blocks, &gw, s);
                for (id, g) in grads {
                    store.accumulate_grad(id, &g);
                }
            }
            VariantState::Loha { a1, b1, a2, b2 } => {
                let grads = rank_expand::loha_backward(
                    store.value(*a1),
                    store.value(*b1),
                    store.value(*a2),
                    store.value(*b2),
                    &gw,
                    s,
                );
                store.accumulate_grad(*a1, &grads.0);
                store.accumulate_grad(*b1, &grads.1);
                store.accumulate_grad(*a2, &grads.2);
                store.accumulate_grad(*b2, &grads.3);
            }
            VariantState::Hira { a, b } => {
                let gm = crate::linalg::hadamard(&gw, base).unwrap();
                let ga = mm(&gm, &store.value(*b).transpose()).scale(s);
                let gb = mm(&store.value(*a).transpose(), &gm).scale(s);
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
            }
            VariantState::Lokr { a, b, c } => {
                let (ga, gb, gc) = rank_expand::lokr_backward(
                    store.value(*a),
                    store.value(*b),
                    store.value(*c),
                    &gw,
                    s,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*c, &gc);
            }
            VariantState::Vera { a_s, b_s, d, bvec } => {
                let (m, n) = base.shape();
                let (gd, gb) = rank_share::vera_backward(
                    store.value(*a_s),
                    store.value(*b_s),
                    store.value(*d),
                    store.value(*bvec),
                    m,
                    n,
                    &gw,
                    s,
                );
                store.accumulate_grad(*d, &gd);
                store.accumulate_grad(*bvec, &gb);
            }
            VariantState::Rasa {
                a_local,
                a_shared,
                b_local,
                b_shared,
                d,
            } => {
                let g = rank_share::rasa_backward(
                    store.value(*a_local),
                    store.value(*a_shared),
                    store.value(*b_local),
                    store.value(*b_shared),
                    store.value(*d),
                    &gw,
                    s,
                );
                store.accumulate_grad(*a_local, &g.0);
                store.accumulate_grad(*a_shared, &g.1);
                store.accumulate_grad(*b_local, &g.2);
                store.accumulate_grad(*b_shared, &g.3);
                store.accumulate_grad(*d, &g.4);
            }
            VariantState::DenseLora { a_s, mixer, b_s } => {
                let av = store.value(*a_s).clone();
                let cv = store.value(*mixer).clone();
                let bv = store.value(*b_s).clone();
                let gc = mm(&mm(&av.transpose(), &gw), &bv.transpose()).scale(s);
                store.accumulate_grad(*mixer, &gc);
                let ga = mm(&gw, &mm(&cv, &bv).transpose()).scale(s);
                let gb = mm(&mm(&av, &cv).transpose(), &gw).scale(s);
                store.accumulate_grad(*a_s, &ga);
                store.accumulate_grad(*b_s, &gb);
            }
            VariantState::ProLora {
                a_local,
                a_base,
                b_local,
                b_base,
                chunks,
                stride_a,
                stride_b,
            } => {
                let g = rank_share::prolora_backward(
                    store.value(*a_local),
                    store.value(*a_base),
                    store.value(*b_local),
                    store.value(*b_base),
                    *chunks,
                    *stride_a,
                    *stride_b,
                    &gw,
                    s,
                )?;
                store.accumulate_grad(*a_local, &g.0);
                store.accumulate_grad(*a_base, &g.1);
                store.accumulate_grad(*b_local, &g.2);
                store.accumulate_grad(*b_base, &g.3);
            }
            VariantState::RandLora {
                a_s,
                b_bases,
                gammas,
                lambdas,
                swapped,
            } => {
                let (m, n) = base.shape();
                let bs: Vec<Mat> = b_bases.iter().map(|id| store.value(*id).clone()).collect();
                let gs: Vec<Mat> = gammas.iter().map(|id| store.value(*id).clone()).collect();
                let ls: Vec<Mat> = lambdas.iter().map(|id| store.value(*id).clone()).collect();
                let a_v = store.value(*a_s).clone();
                let (g_gamma, g_lambda) =
                    rank_share::randlora_backward(&a_v, &bs, &gs, &ls, m, n, *swapped, &gw);
                for (id, g) in gammas.iter().zip(g_gamma) {
                    store.accumulate_grad(*id, &g);
                }
                for (id, g) in lambdas.iter().zip(g_lambda) {
                    store.accumulate_grad(*id, &g);
                }
            }
            VariantState::SvdMasked { a, b, d, mask, .. } => {
                let gates: Vec<f64> = store
                    .value(*d)
                    .data
                    .iter()
                    .zip(mask)
                    .map(|(di, mi)| if *mi { *di } else { 0.0 })
                    .collect();
                let gate_mask: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                let (ga, gb, gd) = rank_budget::svd_backward(
                    store.value(*a),
                    store.value(*b),
                    &gates,
                    &gate_mask,
                    &gw,
                    s,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*d, &gd);
            }
            VariantState::IncreLora { comps, .. } => {
                for comp in comps {
                    let av = store.value(comp.a).clone();
                    let bv = store.value(comp.b).clone();
                    let dv = store.value(comp.d).data[0];
                    // delta_i = s * d * a b^T with a (m x 1), b (n x 1).
                    let gwb = mm(&gw, &bv); // m x 1
                    let ga = gwb.scale(s * dv);
                    let gb = mm(&gw.transpose(), &av).scale(s * dv);
                    let gd = Mat::from_vec(1, 1, vec![s * av.dot(&gwb)]);
                    store.accumulate_grad(comp.a, &ga);
                    store.accumulate_grad(comp.b, &gb);
                    store.accumulate_grad(comp.d, &gd);
                }
            }
            VariantState::Salora { a, b, log_d, hc } => {
                let gates = trace
                    .gates
                    .clone()
                    .ok_or_else(|| AdapterError::Invalid("salora backward without trace".into()))?;
                let u = trace.hc_u.clone();
                let (ga, gb, gld) = rank_budget::salora_backward(
                    store.value(*a),
                    store.value(*b),
                    store.value(*log_d),
                    &gates,
                    u.as_deref(),
                    hc,
                    &gw,
                    s,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*log_d, &gld);
            }
            VariantState::Dora { a, b, magnitude } => {
                // The whole forward is x * W_eff, so use the raw input here.
                let ge = mm(&x.transpose(), grad_out);
                let (ga, gb, gm) = optim::dora_backward(
                    base,
                    store.value(*a),
                    store.value(*b),
                    store.value(*magnitude),
                    s,
                    &ge,
                )?;
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*magnitude, &gm);
            }
            VariantState::Delora {
                a,
                b,
                lambda,
                base_spectral_norm,
            } => {
                let (ga, gb, gl) = optim::delora_backward(
                    store.value(*a),
                    store.value(*b),
                    store.value(*lambda).data[0],
                    *base_spectral_norm,
                    &gw,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*lambda, &gl);
            }
            VariantState::MosLora { a, mixer, b } => {
                let av = store.value(*a).clone();
                let cv = store.value(*mixer).clone();
                let bv = store.value(*b).clone();
                let gc = mm(&mm(&av.transpose(), &gw), &bv.transpose()).scale(s);
                let ga = mm(&gw, &mm(&cv, &bv).transpose()).scale(s);
                let gb = mm(&mm(&av, &cv).transpose(), &gw).scale(s);
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*mixer, &gc);
                store.accumulate_grad(*b, &gb);
            }
            VariantState::Aurora {
                a, b, spline_w, knots,
            } => {
                let (ga, gb, gv) = optim::aurora_backward(
                    store.value(*a),
                    store.value(*b),
                    store.value(*spline_w),
                    knots,
                    xd,
                    grad_out,
                    s,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*spline_w, &gv);
            }
            VariantState::Loda { a, b, w1, w2 } => {
                let (ga, gb, g1, g2) = optim::loda_backward(
                    store.value(*a),
                    store.value(*b),
                    store.value(*w1),
                    store.value(*w2),
                    xd,
                    grad_out,
                    s,
                );
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
                store.accumulate_grad(*w1, &g1);
                store.accumulate_grad(*w2, &g2);
            }
            VariantState::SvdDiag { a, d, b, .. } => {
                let av = store.value(*a).clone();
                let dv = store.value(*d).clone();
                let bv = store.value(*b).clone();
                // Delta = s * A diag(d) B with A (m x r), B (r x n).
                let mut ad = av.clone();
                for j in 0..ad.cols {
                    for i in 0..ad.rows {
                        *ad.at_mut(i, j) *= dv.data[j];
                    }
                }
                let gb = mm(&ad.transpose(), &gw).scale(s);
                let gwbt = mm(&gw, &bv.transpose()); // m x r
                let mut ga = gwbt.clone();
                for j in 0..ga.cols {
                    for i in 0..ga.rows {
                        *ga.at_mut(i, j) *= s * dv.data[j];
                    }
                }
                let mut gd = Mat::zeros(1, dv.numel());
                for j in 0..dv.numel() {
                    let mut acc = 0.0;
                    for i in 0..av.rows {
                        acc += av.at(i, j) * gwbt.at(i, j);
                    }
                    gd.data[j] = s * acc;
                }
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*d, &gd);
                store.accumulate_grad(*b, &gb);
            }
            VariantState::Moe(m) => m.backward(store, xd, grad_out, trace)?,
            VariantState::Hydra(h) => h.backward(store, xd, grad_out, s, trace)?,
        }
        Ok(())
    }

    /// Auxiliary regularization loss attached to the variant (orthogonality
    /// and L0 terms), if any.
    pub fn reg_loss(&self, store: &ParamStore) -> f64 {
        match self {
            VariantState::SvdMasked { a, b, reg_lambda, .. } => {
                reg_lambda * rank_budget::orth_residual(store.value(*a), store.value(*b))
            }
            VariantState::IncreLora { comps, reg_lambda, .. } => {
                if comps.is_empty() {
                    return 0.0;
                }
                // Assemble factor matrices from rank-one components.
                let a = assemble_components(store, comps, true);
                let b = assemble_components(store, comps, false);
                reg_lambda * rank_budget::orth_residual(&a, &b)
            }
            VariantState::Salora { a, b, log_d, hc } => {
                let orth = hc.lambda * rank_budget::orth_residual(store.value(*a), store.value(*b));
                // Lagrangian budget term; with one adapter the mean over
                // adapters of R_L0 is R_L0 itself.
                let l0 = rank_budget::salora_l0(store.value(*log_d), hc);
                orth + hc.beta * (l0 - hc.target_b).powi(2)
            }
            VariantState::SvdDiag { a, b, reg_lambda, .. } => {
                if *reg_lambda == 0.0 {
                    return 0.0;
                }
                // SORSA: ||A^T A - I||_F^2 + ||B B^T - I||_F^2.
                let av = store.value(*a);
                let bv = store.value(*b);
                let ra = mm(&av.transpose(), av)
                    .sub(&Mat::identity(av.cols))
                    .frob_norm()
                    .powi(2);
                let rb = mm(bv, &bv.transpose())
                    .sub(&Mat::identity(bv.rows))
                    .frob_norm()
                    .powi(2);
                reg_lambda * (ra + rb)
            }
            _ => 0.0,
        }
    }

    /// Accumulate the gradients of `reg_loss` into the store.
    pub fn reg_backward(&self, store: &mut ParamStore) {
        match self {
            VariantState::SvdMasked { a, b, reg_lambda, .. } => {
                let (ga, gb) =
                    rank_budget::orth_residual_grads(store.value(*a), store.value(*b));
                store.accumulate_grad(*a, &ga.scale(*reg_lambda));
                store.accumulate_grad(*b, &gb.scale(*reg_lambda));
            }
            VariantState::Salora { a, b, log_d, hc } => {
                let (ga, gb) =
                    rank_budget::orth_residual_grads(store.value(*a), store.value(*b));
                store.accumulate_grad(*a, &ga.scale(hc.lambda));
                store.accumulate_grad(*b, &gb.scale(hc.lambda));
                let gld = rank_budget::salora_l0_lagrangian_grad(store.value(*log_d), hc);
                store.accumulate_grad(*log_d, &gld);
            }
            VariantState::SvdDiag { a, b, reg_lambda, .. } => {
                if *reg_lambda == 0.0 {
                    return;
                }
                let av = store.value(*a).clone();
                let bv = store.value(*b).clone();
                // d/dA ||A^T A - I||^2 = 4 A (A^T A - I); B side uses B B^T.
                let ga = mm(&av, &mm(&av.transpose(), &av).sub(&Mat::identity(av.cols)))
                    .scale(4.0 * reg_lambda);
                let gb = mm(&mm(&bv, &bv.transpose()).sub(&Mat::identity(bv.rows)), &bv)
                    .scale(4.0 * reg_lambda);
                store.accumulate_grad(*a, &ga);
                store.accumulate_grad(*b, &gb);
            }
            VariantState::IncreLora { comps, reg_lambda, .. } => {
                if comps.is_empty() {
                    return;
                }
                let a = assemble_components(store, comps, true);
                let b = assemble_components(store, comps, false);
                let (ga, gb) = rank_budget::orth_residual_grads(&a, &b);
                for (j, comp) in comps.iter().enumerate() {
                    let ga_j = ga.slice(0, ga.rows, j, j + 1).scale(*reg_lambda);
                    let gb_j = gb.slice(0, gb.rows, j, j + 1).scale(*reg_lambda);
                    store.accumulate_grad(comp.a, &ga_j);
                    store.accumulate_grad(comp.b, &gb_j);
                }
            }
            _ => {}
        }
    }
}

fn assemble_components(store: &ParamStore, comps: &[RankOneComponent], a_side: bool) -> Mat {
    let first = if a_side {
        store.value(comps[0].a)
    } else {
        store.value(comps[0].b)
    };
    let mut out = Mat::zeros(first.rows, comps.len());
    for (j, c) in comps.iter().enumerate() {
        let v = if a_side { store.value(c.a) } else { store.value(c.b) };
        for i in 0..v.rows {
            *out.at_mut(i, j) = v.at(i, 0);
        }
    }
    out
}

/// First `m` rows when the tensor is a shared bank larger than the layer.
fn slice_rows(t: &Mat, m: usize) -> Mat {
    if t.rows == m {
        t.clone()
    } else {
        t.slice(0, m, 0, t.cols)
    }
}

/// First `n` columns when the tensor is a shared bank larger than the layer.
fn slice_cols(t: &Mat, n: usize) -> Mat {
    if t.cols == n {
        t.clone()
    } else {
        t.slice(0, t.rows, 0, n)
    }
}

/// Accumulate a gradient into the top rows of a (possibly larger) tensor.
fn accumulate_sliced_rows(store: &mut ParamStore, id: ParamId, g: &Mat) {
    let full = store.value(id).shape();
    if full == g.shape() {
        store.accumulate_grad(id, g);
    } else {
        let mut padded = Mat::zeros(full.0, full.1);
        for i in 0..g.rows {
            for j in 0..g.cols {
                *padded.at_mut(i, j) = g.at(i, j);
            }
        }
        store.accumulate_grad(id, &padded);
    }
}

fn accumulate_sliced_cols(store: &mut ParamStore, id: ParamId, g: &Mat) {
    accumulate_sliced_rows(store, id, g);
}

/// Default LoRA factors: A ~ U(-1/sqrt(m), 1/sqrt(m)), B = 0.
pub fn build_vanilla(spec: &AdapterSpec, store: &mut ParamStore, rng: &mut RngStream) -> VariantState {
    let a = kaiming_uniform(spec.in_features, spec.rank, spec.in_features, rng);
    let b = Mat::zeros(spec.rank, spec.out_features);
    let a = store.add("lora.a", a, true);
    let b = store.add("lora.b", b, true);
    VariantState::Vanilla { a, b }
}
