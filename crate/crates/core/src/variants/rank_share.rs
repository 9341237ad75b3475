//! Rank sharing: reuse factor tensors across adapters to buy rank inside a
//! parameter budget. Shared tensors live once in the ParamStore; every layer
//! slices what it needs, and gradients from all sharers accumulate into the
//! single slot.

use crate::adapter::{AdapterSpec, ParamId, ParamStore};
use crate::error::AdapterError;
use crate::linalg::{kaiming_uniform, mm, Mat};
use crate::rng::RngStream;
use crate::variants::VariantState;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    ShareA,
    ShareB,
    ShareBoth,
}

/// Bookkeeping для one sharing group: the shared tensors and the max dims
/// they were sized for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SharedBank {
    pub a: Option<ParamId>,
    pub b: Option<ParamId>,
    pub m_max: usize,
    pub n_max: usize,
    pub members: usize,
}

/// Build a ShareLoRA group over the given layer shapes. Returns the bank and
/// one variant state per member, in order.
pub fn build_sharelora_group(
    specs: &[AdapterSpec],
    mode: ShareMode,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<(SharedBank, Vec<VariantState>), AdapterError> {
    if specs.is_empty() {
        return Err(AdapterError::InvalidSpec("empty sharing group".into()));
    }
    let r = specs[0].rank;
    if specs.iter().any(|s| s.rank != r) {
        return Err(AdapterError::InvalidSpec(
            "sharing group members must agree on rank".into(),
        ));
    }
    let m_max = specs.iter().map(|s| s.in_features).max().unwrap();
    let n_max = specs.iter().map(|s| s.out_features).max().unwrap();
    let shared_a = match mode {
        ShareMode::ShareA | ShareMode::ShareBoth => Some(store.add(
            "share.a",
            kaiming_uniform(m_max, r, m_max, rng),
            true,
        )),
        ShareMode::ShareB => None,
    };
    let shared_b = match mode {
        ShareMode::ShareB | ShareMode::ShareBoth => {
            Some(store.add("share.b", Mat::zeros(r, n_max), true))
        }
        ShareMode::ShareA => None,
    };
    let mut states = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let a = match shared_a {
            Some(id) => id,
            None => store.add(
                &format!("share.local_a{i}"),
                kaiming_uniform(spec.in_features, r, spec.in_features, rng),
                true,
            ),
        };
        let b = match shared_b {
            Some(id) => id,
            // Local B = 0 keeps the delta zero at init.
            None => store.add(
                &format!("share.local_b{i}"),
                Mat::zeros(r, spec.out_features),
                true,
            ),
        };
        states.push(VariantState::ShareLora { a, b });
    }
    Ok((
        SharedBank {
            a: shared_a,
            b: shared_b,
            m_max,
            n_max,
            members: specs.len(),
        },
        states,
    ))
}

/// ShareLoRA delta for given layer dims: s * A[:m, :] * B[:, :n].
pub fn sharelora_delta(
    bank_a: &Mat,
    bank_b: &Mat,
    m: usize,
    n: usize,
    s: f64,
) -> Result<Mat, AdapterError> {
    if m > bank_a.rows || n > bank_b.cols {
        return Err(AdapterError::DimensionMismatch(format!(
            "slice {}x{} out of bank {}x{}",
            m, n, bank_a.rows, bank_b.cols
        )));
    }
    let a = bank_a.slice(0, m, 0, bank_a.cols);
    let b = bank_b.slice(0, bank_b.rows, 0, n);
    Ok(mm(&a, &b).scale(s))
}

/// VeRA delta: s * A_S[:m,:] diag(d) B_S[:,:n] diag(b).
pub fn vera_delta(a_s: &Mat, b_s: &Mat, d: &Mat, bvec: &Mat, m: usize, n: usize, s: f64) -> Mat {
    let a = a_s.slice(0, m, 0, a_s.cols);
    let b = b_s.slice(0, b_s.rows, 0, n);
    let mut ad = a;
    for j in 0..ad.cols {
        for i in 0..ad.rows {
            *ad.at_mut(i, j) *= d.data[j];
        }
    }
    let mut out = mm(&ad, &b);
    for j in 0..out.cols {
        for i in 0..out.rows {
            *out.at_mut(i, j) *= bvec.data[j];
        }
    }
    out.scale(s)
}

/// Gradients of the two trainable vectors (the bases stay frozen).
#[allow(clippy::too_many_arguments)]
pub(crate) fn vera_backward(
    a_s: &Mat,
    b_s: &Mat,
    d: &Mat,
    bvec: &Mat,
    m: usize,
    n: usize,
    gw: &Mat,
    s: f64,
) -> (Mat, Mat) {
    let a = a_s.slice(0, m, 0, a_s.cols);
    let b = b_s.slice(0, b_s.rows, 0, n);
    let r = a.cols;
    // grad d_j = s * [A^T GW diag(b) B^T]_{jj}
    let mut gw_b = gw.clone();
    for j in 0..gw_b.cols {
        for i in 0..gw_b.rows {
            *gw_b.at_mut(i, j) *= bvec.data[j];
        }
    }
    let t = mm(&mm(&a.transpose(), &gw_b), &b.transpose()); // r x r
    let mut gd = Mat::zeros(1, r);
    for j in 0..r {
        gd.data[j] = s * t.at(j, j);
    }
    // grad b_j = s * [P^T GW]_{jj}, P = A diag(d) B.
    let mut ad = a.clone();
    for j in 0..ad.cols {
        for i in 0..ad.rows {
            *ad.at_mut(i, j) *= d.data[j];
        }
    }
    let p = mm(&ad, &b);
    let q = mm(&p.transpose(), gw); // n x n
    let mut gb = Mat::zeros(1, n);
    for j in 0..n {
        gb.data[j] = s * q.at(j, j);
    }
    (gd, gb)
}

pub fn build_vera(
    specs: &[AdapterSpec],
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<(SharedBank, Vec<VariantState>), AdapterError> {
    if specs.is_empty() {
        return Err(AdapterError::InvalidSpec("empty sharing group".into()));
    }
    let r = specs[0].rank;
    let m_max = specs.iter().map(|s| s.in_features).max().unwrap();
    let n_max = specs.iter().map(|s| s.out_features).max().unwrap();
    // Frozen random bases, shared and sliced by every member.
    let a_s = store.add("vera.a_s", kaiming_uniform(m_max, r, m_max, rng), false);
    let b_s = store.add("vera.b_s", kaiming_uniform(r, n_max, r, rng), false);
    let mut states = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        // d = 0.1 keeps the b-gradient path alive; b = 0 zeroes the delta.
        let d = store.add(&format!("vera.d{i}"), Mat::ones(1, r).scale(0.1), true);
        let bvec = store.add(&format!("vera.b{i}"), Mat::zeros(1, spec.out_features), true);
        states.push(VariantState::Vera { a_s, b_s, d, bvec });
    }
    Ok((
        SharedBank {
            a: Some(a_s),
            b: Some(b_s),
            m_max,
            n_max,
            members: specs.len(),
        },
        states,
    ))
}

/// Tied-LoRA freeze combination over the VeRA-structured tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiedFreeze {
    pub freeze_a: bool,
    pub freeze_b: bool,
    pub freeze_d: bool,
    pub freeze_bvec: bool,
}

/// Set trainability flags on a VeRA-shaped state. Rejects the all-frozen
/// combination (nothing left for the optimizer).
pub fn tied_lora_configure(
    state: &VariantState,
    freeze: TiedFreeze,
    store: &mut ParamStore,
) -> Result<(), AdapterError> {
    let (a_s, b_s, d, bvec) = match state {
        VariantState::Vera { a_s, b_s, d, bvec } => (*a_s, *b_s, *d, *bvec),
        _ => {
            return Err(AdapterError::Unsupported {
                variant: state.kind_name().into(),
                what: "tied-lora freeze".into(),
            })
        }
    };
    if freeze.freeze_a && freeze.freeze_b && freeze.freeze_d && freeze.freeze_bvec {
        return Err(AdapterError::InvalidSpec(
            "tied-lora: all tensors frozen".into(),
        ));
    }
    store.set_trainable(a_s, !freeze.freeze_a);
    store.set_trainable(b_s, !freeze.freeze_b);
    store.set_trainable(d, !freeze.freeze_d);
    store.set_trainable(bvec, !freeze.freeze_bvec);
    Ok(())
}

/// RaSA delta, transposed into the row-batch convention:
/// Delta = s * [A_L | A_pool] diag(d) [B_L ; B_pool].
pub fn rasa_delta(
    a_local: &Mat,
    a_shared: &Mat,
    b_local: &Mat,
    b_shared: &Mat,
    d: &Mat,
    s: f64,
) -> Mat {
    let a_cat = a_local.hcat(a_shared);
    let b_cat = b_local.vcat(b_shared);
    let mut ad = a_cat;
    for j in 0..ad.cols {
        for i in 0..ad.rows {
            *ad.at_mut(i, j) *= d.data[j];
        }
    }
    mm(&ad, &b_cat).scale(s)
}

pub(crate) fn rasa_backward(
    a_local: &Mat,
    a_shared: &Mat,
    b_local: &Mat,
    b_shared: &Mat,
    d: &Mat,
    gw: &Mat,
    s: f64,
) -> (Mat, Mat, Mat, Mat, Mat) {
    let k_local = a_local.cols;
    let a_cat = a_local.hcat(a_shared);
    let b_cat = b_local.vcat(b_shared);
    let gwbt = mm(gw, &b_cat.transpose()); // m x r_tot
    let atgw = mm(&a_cat.transpose(), gw); // r_tot x n
    let r_tot = a_cat.cols;
    let mut ga = gwbt.clone();
    for j in 0..r_tot {
        for i in 0..ga.rows {
            *ga.at_mut(i, j) *= s * d.data[j];
        }
    }
    let mut gb = atgw.clone();
    for j in 0..gb.cols {
        for i in 0..r_tot {
            *gb.at_mut(i, j) *= s * d.data[i];
        }
    }
    let mut gd = Mat::zeros(1, r_tot);
    for j in 0..r_tot {
        let mut acc = 0.0;
        for i in 0..a_cat.rows {
            acc += a_cat.at(i, j) * gwbt.at(i, j);
        }
        gd.data[j] = s * acc;
    }
    (
        ga.slice(0, ga.rows, 0, k_local),
        ga.slice(0, ga.rows, k_local, r_tot),
        gb.slice(0, k_local, 0, gb.cols),
        gb.slice(k_local, r_tot, 0, gb.cols),
        gd,
    )
}

/// RaSA group: each of the L same-shape layers keeps r - k local ranks and
/// contributes k ranks to a pool of L * k shared ranks that every layer uses.
pub fn build_rasa_group(
    specs: &[AdapterSpec],
    k_shared: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Vec<VariantState>, AdapterError> {
    if specs.is_empty() {
        return Err(AdapterError::InvalidSpec("empty rasa group".into()));
    }
    let (m, n, r) = (
        specs[0].in_features,
        specs[0].out_features,
        specs[0].rank,
    );
    if k_shared >= r {
        return Err(AdapterError::InvalidSpec(format!(
            "rasa: shared rank k = {k_shared} must be < r = {r}"
        )));
    }
    if specs
        .iter()
        .any(|s| s.in_features != m || s.out_features != n || s.rank != r)
    {
        return Err(AdapterError::InvalidSpec(
            "rasa group members must share shapes".into(),
        ));
    }
    let l = specs.len();
    let pool = l * k_shared;
    let a_shared = store.add("rasa.a_pool", kaiming_uniform(m, pool, m, rng), true);
    let b_shared = store.add("rasa.b_pool", kaiming_uniform(pool, n, pool, rng), true);
    let mut states = Vec::new();
    for i in 0..l {
        let a_local = store.add(
            &format!("rasa.a_local{i}"),
            kaiming_uniform(m, r - k_shared, m, rng),
            true,
        );
        let b_local = store.add(
            &format!("rasa.b_local{i}"),
            kaiming_uniform(r - k_shared, n, r - k_shared, rng),
            true,
        );
        // D = 0 keeps the effective weight at the base at init.
        let d = store.add(
            &format!("rasa.d{i}"),
            Mat::zeros(1, (r - k_shared) + pool),
            true,
        );
        states.push(VariantState::Rasa {
            a_local,
            a_shared,
            b_local,
            b_shared,
            d,
        });
    }
    Ok(states)
}

/// DenseLoRA: shared pair refined by a module-local r x r matrix.
pub fn build_denselora_group(
    specs: &[AdapterSpec],
    train_shared: bool,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Vec<VariantState>, AdapterError> {
    if specs.is_empty() {
        return Err(AdapterError::InvalidSpec("empty denselora group".into()));
    }
    let (m, n, r) = (
        specs[0].in_features,
        specs[0].out_features,
        specs[0].rank,
    );
    let a_s = store.add("dense.a", kaiming_uniform(m, r, m, rng), train_shared);
    let b_s = store.add("dense.b", kaiming_uniform(r, n, r, rng), train_shared);
    let mut states = Vec::new();
    for i in 0..specs.len() {
        // C = 0: delta zero at init, gradient flows through the shared pair.
        let mixer = store.add(&format!("dense.c{i}"), Mat::zeros(r, r), true);
        states.push(VariantState::DenseLora { a_s, mixer, b_s });
    }
    Ok(states)
}

/// ProLoRA assembly: local chunk plus P-1 row-wise cyclic shifts of one
/// shared chunk, on both factors.
pub fn prolora_assemble(
    a_local: &Mat,
    a_base: &Mat,
    b_local: &Mat,
    b_base: &Mat,
    chunks: usize,
    stride_a: usize,
    stride_b: usize,
) -> Result<(Mat, Mat), AdapterError> {
    if chunks == 0 {
        return Err(AdapterError::InvalidSpec("prolora: zero chunks".into()));
    }
    if a_local.shape() != a_base.shape() || b_local.shape() != b_base.shape() {
        return Err(AdapterError::DimensionMismatch(
            "prolora chunk shapes differ".into(),
        ));
    }
    let mut a = a_local.clone();
    let mut b = b_local.clone();
    for i in 1..chunks {
        a = a.hcat(&a_base.roll_rows(i * stride_a));
        b = b.vcat(&b_base.roll_rows(i * stride_b));
    }
    Ok((a, b))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn prolora_backward(
    a_local: &Mat,
    a_base: &Mat,
    b_local: &Mat,
    b_base: &Mat,
    chunks: usize,
    stride_a: usize,
    stride_b: usize,
    gw: &Mat,
    s: f64,
) -> Result<(Mat, Mat, Mat, Mat), AdapterError> {
    let (a, b) = prolora_assemble(a_local, a_base, b_local, b_base, chunks, stride_a, stride_b)?;
    let ga_full = mm(gw, &b.transpose()).scale(s); // m x (chunks * rc)
    let gb_full = mm(&a.transpose(), gw).scale(s); // (chunks * rc) x n
    let rc = a_local.cols;
    let ga_local = ga_full.slice(0, ga_full.rows, 0, rc);
    let mut ga_base = Mat::zeros(a_base.rows, a_base.cols);
    for i in 1..chunks {
        let chunk = ga_full.slice(0, ga_full.rows, i * rc, (i + 1) * rc);
        // Inverse of a downward roll by k is a roll by rows - k.
        let shift = (i * stride_a) % a_base.rows;
        ga_base.add_assign(&chunk.roll_rows(a_base.rows - shift));
    }
    let rb = b_local.rows;
    let gb_local = gb_full.slice(0, rb, 0, gb_full.cols);
    let mut gb_base = Mat::zeros(b_base.rows, b_base.cols);
    for i in 1..chunks {
        let chunk = gb_full.slice(i * rb, (i + 1) * rb, 0, gb_full.cols);
        let shift = (i * stride_b) % b_base.rows;
        gb_base.add_assign(&chunk.roll_rows(b_base.rows - shift));
    }
    Ok((ga_local, ga_base, gb_local, gb_base))
}

pub fn build_prolora(
    spec: &AdapterSpec,
    chunks: usize,
    stride_a: usize,
    stride_b: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<VariantState, AdapterError> {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    if chunks == 0 || r % chunks != 0 {
        return Err(AdapterError::InvalidSpec(format!(
            "prolora: chunks = {chunks} must divide rank = {r}"
        )));
    }
    let rc = r / chunks;
    let a_local = store.add("prolora.a_local", kaiming_uniform(m, rc, m, rng), true);
    let a_base = store.add("prolora.a_base", kaiming_uniform(m, rc, m, rng), true);
    let b_local = store.add("prolora.b_local", Mat::zeros(rc, n), true);
    let b_base = store.add("prolora.b_base", Mat::zeros(rc, n), true);
    Ok(VariantState::ProLora {
        a_local,
        a_base,
        b_local,
        b_base,
        chunks,
        stride_a,
        stride_b,
    })
}

/// RandLoRA base count: ceil(min(d_s, U) / r).
pub fn randlora_num_bases(d_s: usize, u_cap: usize, r: usize) -> usize {
    d_s.min(u_cap).div_ceil(r)
}

/// RandLoRA delta: (2/sqrt(n_b)) * sum_i diag(gamma_i) P_i diag(lambda_i) Q_i
/// where (P_i, Q_i) are slices of the frozen bases, transposed when the
/// module's larger dim is not its output.
pub fn randlora_delta(
    a_s: &Mat,
    b_bases: &[&Mat],
    gammas: &[&Mat],
    lambdas: &[&Mat],
    m: usize,
    n: usize,
    swapped: bool,
) -> Mat {
    let n_b = b_bases.len();
    let c = 2.0 / (n_b as f64).sqrt();
    let mut out = Mat::zeros(m, n);
    for i in 0..n_b {
        let (p, q) = randlora_slices(a_s, b_bases[i], m, n, swapped);
        let term = randlora_term(&p, &q, gammas[i], lambdas[i]);
        out.add_assign(&term);
    }
    out.scale(c)
}

fn randlora_slices(a_s: &Mat, b_i: &Mat, m: usize, n: usize, swapped: bool) -> (Mat, Mat) {
    if !swapped {
        (
            a_s.slice(0, m, 0, a_s.cols),
            b_i.slice(0, b_i.rows, 0, n),
        )
    } else {
        let bt = b_i.transpose();
        let at = a_s.transpose();
        (bt.slice(0, m, 0, bt.cols), at.slice(0, at.rows, 0, n))
    }
}

fn randlora_term(p: &Mat, q: &Mat, gamma: &Mat, lambda: &Mat) -> Mat {
    let mut pg = p.clone();
    for i in 0..pg.rows {
        let g = gamma.data[i];
        for j in 0..pg.cols {
            *pg.at_mut(i, j) *= g;
        }
    }
    let mut pl = pg;
    for j in 0..pl.cols {
        let l = lambda.data[j];
        for i in 0..pl.rows {
            *pl.at_mut(i, j) *= l;
        }
    }
    mm(&pl, q)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn randlora_backward(
    a_s: &Mat,
    b_bases: &[Mat],
    gammas: &[Mat],
    lambdas: &[Mat],
    m: usize,
    n: usize,
    swapped: bool,
    gw: &Mat,
) -> (Vec<Mat>, Vec<Mat>) {
    let n_b = b_bases.len();
    let c = 2.0 / (n_b as f64).sqrt();
    let mut g_gamma = Vec::with_capacity(n_b);
    let mut g_lambda = Vec::with_capacity(n_b);
    for i in 0..n_b {
        let (p, q) = randlora_slices(a_s, &b_bases[i], m, n, swapped);
        // grad lambda_j = c * [ (diag(gamma) P)^T GW Q^T ]_{jj}
        let mut pg = p.clone();
        for row in 0..pg.rows {
            let g = gammas[i].data[row];
            for col in 0..pg.cols {
                *pg.at_mut(row, col) *= g;
            }
        }
        let t = mm(&mm(&pg.transpose(), gw), &q.transpose());
        let r = p.cols;
        let mut gl = Mat::zeros(1, r);
        for j in 0..r {
            gl.data[j] = c * t.at(j, j);
        }
        // grad gamma_j = c * [R GW^T]_{jj}, R = P diag(lambda) Q.
        let mut plam = p.clone();
        for col in 0..plam.cols {
            let l = lambdas[i].data[col];
            for row in 0..plam.rows {
                *plam.at_mut(row, col) *= l;
            }
        }
        let rmat = mm(&plam, &q);
        let u = mm(&rmat, &gw.transpose());
        let mut gg = Mat::zeros(1, m);
        for j in 0..m {
            gg.data[j] = c * u.at(j, j);
        }
        g_gamma.push(gg);
        g_lambda.push(gl);
    }
    (g_gamma, g_lambda)
}

/// Build a RandLoRA group. `u_cap` bounds the base dimension that enters the
/// base-count formula. d_s is the smaller dimension of the module with the
/// largest output dimension in the group.
pub fn build_randlora_group(
    specs: &[AdapterSpec],
    u_cap: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> Result<Vec<VariantState>, AdapterError> {
    if specs.is_empty() {
        return Err(AdapterError::InvalidSpec("empty randlora group".into()));
    }
    let r = specs[0].rank;
    let widest = specs
        .iter()
        .max_by_key(|s| s.out_features)
        .unwrap();
    let d_s = widest.in_features.min(widest.out_features);
    let n_b = randlora_num_bases(d_s, u_cap, r);
    let s_max = specs
        .iter()
        .map(|s| s.in_features.min(s.out_features))
        .max()
        .unwrap();
    let l_max = specs
        .iter()
        .map(|s| s.in_features.max(s.out_features))
        .max()
        .unwrap();
    let a_s = store.add("randlora.a", kaiming_uniform(s_max, r, s_max, rng), false);
    let b_bases: Vec<ParamId> = (0..n_b)
        .map(|i| {
            store.add(
                &format!("randlora.b{i}"),
                kaiming_uniform(r, l_max, r, rng),
                false,
            )
        })
        .collect();
    let mut states = Vec::new();
    for (li, spec) in specs.iter().enumerate() {
        let swapped = spec.in_features > spec.out_features;
        let gammas: Vec<ParamId> = (0..n_b)
            .map(|i| {
                store.add(
                    &format!("randlora.gamma{li}_{i}"),
                    Mat::ones(1, spec.in_features),
                    true,
                )
            })
            .collect();
        let lambdas: Vec<ParamId> = (0..n_b)
            .map(|i| {
                store.add(
                    &format!("randlora.lambda{li}_{i}"),
                    Mat::zeros(1, r),
                    true,
                )
            })
            .collect();
        states.push(VariantState::RandLora {
            a_s,
            b_bases: b_bases.clone(),
            gammas,
            lambdas,
            swapped,
        });
    }
    Ok(states)
}
