//! The unified adapter abstraction: fused forward, delta-weight
//! materialization, merge/unmerge, scaling modes, and the closed-form
//! gradient identities every variant builds on.
//!
//! Convention used throughout: inputs are row batches x (b x m), the frozen
//! base maps m -> n, and the update acts as x -> x * Delta with A (m x r) and
//! B (r x n). Variants published with B as the left factor are transposed
//! into this convention at construction.

use crate::error::AdapterError;
use crate::linalg::{matmul, mm, Mat};
use crate::rng::RngStream;
use crate::variants::{Trace, VariantState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    /// s = alpha / r
    Standard,
    /// s = alpha / sqrt(r) (rank-stabilized)
    RankStabilized,
}

impl ScalingMode {
    pub fn scale(&self, alpha: f64, rank: usize) -> f64 {
        match self {
            ScalingMode::Standard => alpha / rank as f64,
            ScalingMode::RankStabilized => alpha / (rank as f64).sqrt(),
        }
    }
}

/// Immutable configuration of one adapted layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_scaling")]
    pub scaling_mode: ScalingMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_scaling() -> ScalingMode {
    ScalingMode::Standard
}

impl AdapterSpec {
    pub fn new(m: usize, n: usize, rank: usize, alpha: f64) -> Self {
        Self {
            in_features: m,
            out_features: n,
            rank,
            alpha,
            dropout: 0.0,
            scaling_mode: ScalingMode::Standard,
            seed: 0,
        }
    }

    /// The alpha = 2r preset recommended for large-rank runs.
    pub fn with_alpha_2r(mut self) -> Self {
        self.alpha = 2.0 * self.rank as f64;
        self
    }

    pub fn with_scaling(mut self, mode: ScalingMode) -> Self {
        self.scaling_mode = mode;
        self
    }

    pub fn scaling(&self) -> f64 {
        self.scaling_mode.scale(self.alpha, self.rank)
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::InvalidSpec("rank must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(AdapterError::InvalidSpec("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AdapterError::InvalidSpec(
                "dropout must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// The default rank bound r <= min(m, n); variants with their own bound
    /// (DenseLoRA, RandLoRA) skip this check.
    pub fn validate_rank_bound(&self) -> Result<(), AdapterError> {
        if self.rank > self.in_features.min(self.out_features) {
            return Err(AdapterError::InvalidSpec(format!(
                "rank {} exceeds min(m, n) = {}",
                self.rank,
                self.in_features.min(self.out_features)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    #[serde(skip, default = "empty_mat")]
    pub grad: Mat,
    pub trainable: bool,
    /// Per-parameter learning-rate multiplier (LoRA+ decoupling hook).
    pub lr_mult: f64,
}

fn empty_mat() -> Mat {
    Mat::zeros(0, 0)
}

/// Arena of all tensors of a model. Shared tensors live here exactly once,
/// so gradient contributions from all sharers accumulate into one slot and
/// the optimizer sees each trainable tensor exactly once.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Mat, trainable: bool) -> ParamId {
        let grad = Mat::zeros(value.rows, value.cols);
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable,
            lr_mult: 1.0,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].grad
    }

    pub fn set_grad(&mut self, id: ParamId, g: Mat) {
        self.entries[id.0].grad = g;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Mat) {
        let e = &mut self.entries[id.0];
        if e.grad.numel() == 0 {
            e.grad = Mat::zeros(e.value.rows, e.value.cols);
        }
        e.grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = Mat::zeros(e.value.rows, e.value.cols);
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_lr_mult(&mut self, id: ParamId, mult: f64) {
        self.entries[id.0].lr_mult = mult;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalar entries (the parameter ledger).
    pub fn trainable_scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Bytewise checksum of a tensor, for frozen-base invariance checks.
    pub fn checksum(&self, id: ParamId) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for x in &self.entries[id.0].value.data {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

/// Mutable per-layer adapter state around a frozen base weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub spec: AdapterSpec,
    /// Frozen base weight; may have been adjusted at init so the effective
    /// weight starts at the pristine value.
    pub base: Mat,
    pub base_adjusted: bool,
    pub merged: bool,
    merged_delta: Option<Mat>,
    pub step: u64,
    pub variant: VariantState,
}

impl AdapterLayer {
    pub fn new(spec: AdapterSpec, base: Mat, variant: VariantState) -> Result<Self, AdapterError> {
        spec.validate()?;
        if base.shape() != (spec.in_features, spec.out_features) {
            return Err(AdapterError::DimensionMismatch(format!(
                "base {}x{} vs spec {}x{}",
                base.rows, base.cols, spec.in_features, spec.out_features
            )));
        }
        Ok(Self {
            spec,
            base,
            base_adjusted: false,
            merged: false,
            merged_delta: None,
            step: 0,
            variant,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.spec.scaling()
    }

    /// Subtract s * Delta0 from the base so the effective weight at t = 0
    /// equals the pristine base (pretrained-weights manipulation).
    pub fn adjust_base(&mut self, store: &ParamStore) -> Result<(), AdapterError> {
        let delta = self.delta_weight(store)?;
        self.base = self.base.sub(&delta);
        self.base_adjusted = true;
        Ok(())
    }

    /// Base path only, exactly x * W.
    pub fn base_forward(&self, x: &Mat) -> Result<Mat, AdapterError> {
        matmul(x, &self.base).map_err(AdapterError::Linalg)
    }

    /// Fused forward: x * W + s * ((dropout(x) * A) * B), with the adapter
    /// branch taking the variant-specific shape.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Mat,
        train_mode: bool,
        rng: Option<&mut RngStream>,
    ) -> Result<(Mat, Trace), AdapterError> {
        if self.merged {
            return Err(AdapterError::ForwardWhileMerged);
        }
        if x.cols != self.spec.in_features {
            return Err(AdapterError::DimensionMismatch(format!(
                "input {}x{} vs in_features {}",
                x.rows, x.cols, self.spec.in_features
            )));
        }
        let mut trace = Trace::default();
        // Dropout applies only to the adapter branch, never the frozen path.
        let xd = if train_mode && self.spec.dropout > 0.0 {
            let mut local = RngStream::new(self.spec.seed ^ (self.step.wrapping_mul(0x9e37)));
            let r = rng.map(|r| &mut *r);
            let gen = r.unwrap_or(&mut local);
            let keep = 1.0 - self.spec.dropout;
            let mut mask = Mat::zeros(x.rows, x.cols);
            for v in mask.data.iter_mut() {
                *v = if gen.next_f64() < keep { 1.0 / keep } else { 0.0 };
            }
            let dropped = crate::linalg::hadamard(x, &mask).unwrap();
            trace.dropped_x = Some(dropped.clone());
            dropped
        } else {
            x.clone()
        };
        let s = self.scaling();
        let adapter_out = self.variant.adapter_out(
            store,
            &self.base,
            s,
            &xd,
            train_mode,
            self.spec.seed ^ self.step,
            &mut trace,
        )?;
        let out = match adapter_out {
            Some(a) => self.base_forward(x)?.add(&a),
            // Variant replaces the whole forward (DoRA-style decompositions).
            None => self.variant.full_forward(store, &self.base, s, x, &xd)?,
        };
        Ok((out, trace))
    }

    /// Variant-specific effective update Delta W, when materializable.
    pub fn delta_weight(&self, store: &ParamStore) -> Result<Mat, AdapterError> {
        self.variant.delta(store, &self.base, self.scaling())
    }

    /// Effective weight seen by the forward pass (for materializable variants).
    pub fn effective_weight(&self, store: &ParamStore) -> Result<Mat, AdapterError> {
        if self.merged {
            return Ok(self.base.clone());
        }
        self.variant
            .effective_weight(store, &self.base, self.scaling())
    }

    /// Accumulate parameter gradients for one batch. `grad_out` is the loss
    /// gradient with respect to this layer's output.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        x: &Mat,
        trace: &Trace,
        grad_out: &Mat,
    ) -> Result<(), AdapterError> {
        if grad_out.shape() != (x.rows, self.spec.out_features) {
            return Err(AdapterError::DimensionMismatch(format!(
                "grad_out {:?} vs ({}, {})",
                grad_out.shape(),
                x.rows,
                self.spec.out_features
            )));
        }
        let xd = trace.dropped_x.as_ref().unwrap_or(x);
        self.variant
            .backward(store, &self.base, self.scaling(), x, xd, grad_out, trace)
    }

    /// Gradient of the loss with respect to a dense weight at the layer's
    /// operating point: grad W = x^T grad_out.
    pub fn dense_weight_grad(x: &Mat, grad_out: &Mat) -> Mat {
        mm(&x.transpose(), grad_out)
    }

    pub fn merge(&mut self, store: &ParamStore) -> Result<(), AdapterError> {
        if self.merged {
            return Err(AdapterError::AlreadyMerged);
        }
        let delta = self.delta_weight(store)?;
        self.base.add_assign(&delta);
        self.merged_delta = Some(delta);
        self.merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self) -> Result<(), AdapterError> {
        if !self.merged {
            return Err(AdapterError::NotMerged);
        }
        let delta = self.merged_delta.take().unwrap();
        self.base = self.base.sub(&delta);
        self.merged = false;
        Ok(())
    }
}

/// Closed-form adapter gradients (the low-rank chain rule):
/// grad A = s * grad_W * B^T, grad B = s * A^T * grad_W.
pub fn lora_gradients(s: f64, a: &Mat, b: &Mat, grad_base: &Mat) -> (Mat, Mat) {
    let ga = mm(grad_base, &b.transpose()).scale(s);
    let gb = mm(&a.transpose(), grad_base).scale(s);
    (ga, gb)
}

/// Frozen-A accumulation: with A fixed at a0, B starting at zero, and plain
/// SGD over the given dense-gradient sequence, the product a0 * B_t equals
/// -eta * s * sum_i a0 a0^T grad_i exactly. Returns the product after
/// verifying the identity; momentum-bearing optimizers are rejected because
/// the closed form only holds for plain SGD.
pub fn frozen_a_accumulation(
    a0: &Mat,
    grads: &[Mat],
    eta: f64,
    s: f64,
    plain_sgd: bool,
) -> Result<Mat, AdapterError> {
    if !plain_sgd {
        return Err(AdapterError::Unsupported {
            variant: "frozen-A".into(),
            what: "momentum-bearing optimizer".into(),
        });
    }
    let r = a0.cols;
    let n = grads.first().map(|g| g.cols).unwrap_or(0);
    let mut b = Mat::zeros(r, n.max(1));
    if grads.is_empty() {
        return Ok(Mat::zeros(a0.rows, n.max(1)));
    }
    let mut b_cur = Mat::zeros(r, n);
    let mut compressed_sum = Mat::zeros(a0.rows, n);
    for g in grads {
        // One SGD step on B: grad B = s * A0^T * g.
        let gb = mm(&a0.transpose(), g).scale(s);
        b_cur.add_scaled_assign(&gb, -eta);
        compressed_sum.add_assign(&mm(a0, &mm(&a0.transpose(), g)));
    }
    b = b_cur;
    let product = mm(a0, &b);
    let closed_form = compressed_sum.scale(-eta * s);
    let err = product.sub(&closed_form).max_abs();
    debug_assert!(
        err <= 1e-12 * (1.0 + closed_form.max_abs()),
        "frozen-A closed form violated: {err}"
    );
    Ok(product)
}

/// Step-wise update and its first-order approximation, in product space:
/// exact = (A - eta gA)(B - eta gB) - A B with the unscaled factor gradients
/// gA = G B^T, gB = A^T G; approx = -eta * s * (A A^T G + G B^T B). The
/// discrepancy s * exact - approx is exactly the eta^2 cross term.
pub fn stepwise_update_approx(
    a: &Mat,
    b: &Mat,
    grad_base: &Mat,
    eta: f64,
    s: f64,
) -> (Mat, Mat) {
    let ga = mm(grad_base, &b.transpose());
    let gb = mm(&a.transpose(), grad_base);
    let a_next = a.sub(&ga.scale(eta));
    let b_next = b.sub(&gb.scale(eta));
    let exact = mm(&a_next, &b_next).sub(&mm(a, b));
    let approx = mm(a, &mm(&a.transpose(), grad_base))
        .add(&mm(grad_base, &mm(&b.transpose(), b)))
        .scale(-eta * s);
    (exact, approx)
}
