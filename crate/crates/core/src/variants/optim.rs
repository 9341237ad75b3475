//! Variants that reshape the optimization process: scaling rules, decoupled
//! learning rates, Riemannian preconditioning, weight decomposition, bounded
//! updates, full-update alignment (LoRA-Pro), gradient compression (FLoRA),
//! and nonlinear bottlenecks (Aurora, LoDA).

use crate::adapter::{AdapterSpec, ParamStore};
use crate::error::AdapterError;
use crate::linalg::{
    gaussian, inverse, kaiming_uniform, mm, solve_sylvester, svd, Mat,
};
use crate::rng::RngStream;
use crate::variants::VariantState;

/// Rank-stabilized scaling: alpha / sqrt(r).
pub fn rs_scale(alpha: f64, r: usize) -> f64 {
    alpha / (r as f64).sqrt()
}

/// LoRA+ learning-rate decoupling: (eta_A, eta_B) = (eta, ratio * eta).
pub fn lora_plus_lrs(eta_base: f64, ratio: f64) -> (f64, f64) {
    (eta_base, ratio * eta_base)
}

/// Empirical second moment of the scaled adapter output per rank, with
/// i.i.d. unit-variance Gaussian factors and unit-norm input rows. Under
/// standard scaling the moment decays like 1/r; rank-stabilized scaling
/// keeps it flat.
pub fn stability_probe(
    m: usize,
    ranks: &[usize],
    mode: crate::adapter::ScalingMode,
    alpha: f64,
    draws: usize,
    rng: &mut RngStream,
) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(ranks.len());
    for &r in ranks {
        let s = mode.scale(alpha, r);
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut x = gaussian(1, m, 1.0, rng);
            let norm = x.frob_norm();
            if norm > 0.0 {
                x = x.scale(1.0 / norm);
            }
            let a = gaussian(m, r, 1.0, rng);
            let b = gaussian(r, m, 1.0, rng);
            let y = mm(&mm(&x, &a), &b).scale(s);
            acc += y.frob_norm().powi(2);
        }
        out.push((r, acc / draws as f64));
    }
    out
}

/// Riemannian-preconditioned gradients with damping when a Gram factor is
/// near-singular.
#[derive(Debug, Clone)]
pub struct Preconditioned {
    pub grad_a: Mat,
    pub grad_b: Mat,
    pub damped: bool,
}

/// grad A* = grad A (B B^T)^{-1}, grad B* = (A^T A)^{-1} grad B; Gram
/// matrices below the conditioning threshold are damped with 1e-8 * I.
pub fn riemannian_precondition(
    grad_a: &Mat,
    grad_b: &Mat,
    a: &Mat,
    b: &Mat,
) -> Result<Preconditioned, AdapterError> {
    let bbt = mm(b, &b.transpose());
    let ata = mm(&a.transpose(), a);
    let mut damped = false;
    let bbt = damp_if_needed(bbt, &mut damped)?;
    let ata = damp_if_needed(ata, &mut damped)?;
    let ga = mm(grad_a, &inverse(&bbt)?);
    let gb = mm(&inverse(&ata)?, grad_b);
    Ok(Preconditioned {
        grad_a: ga,
        grad_b: gb,
        damped,
    })
}

fn damp_if_needed(g: Mat, damped: &mut bool) -> Result<Mat, AdapterError> {
    let s = svd(&g).map_err(AdapterError::Linalg)?;
    let s1 = s.singular_values[0];
    let smin = *s.singular_values.last().unwrap();
    if s1 == 0.0 || smin <= 1e-10 * s1 {
        *damped = true;
        let mut out = g;
        for i in 0..out.rows {
            *out.at_mut(i, i) += 1e-8;
        }
        Ok(out)
    } else {
        Ok(g)
    }
}

/// DoRA effective weight: magnitude-scaled column directions of
/// V = base + s * A B, one norm per output column over the input dimension.
pub fn dora_effective_weight(
    base: &Mat,
    a: &Mat,
    b: &Mat,
    magnitude: &Mat,
    s: f64,
) -> Result<Mat, AdapterError> {
    let v = base.add(&mm(a, b).scale(s));
    let mut out = v.clone();
    for j in 0..v.cols {
        let norm = v.col_norm(j);
        if norm == 0.0 {
            return Err(AdapterError::Invalid(format!(
                "dora: zero column {j} in decomposed weight"
            )));
        }
        let f = magnitude.data[j] / norm;
        for i in 0..v.rows {
            *out.at_mut(i, j) = v.at(i, j) * f;
        }
    }
    Ok(out)
}

/// Chain rule through the per-column normalization.
pub(crate) fn dora_backward(
    base: &Mat,
    a: &Mat,
    b: &Mat,
    magnitude: &Mat,
    s: f64,
    grad_eff: &Mat,
) -> Result<(Mat, Mat, Mat), AdapterError> {
    let v = base.add(&mm(a, b).scale(s));
    let (m, n) = v.shape();
    let mut gv = Mat::zeros(m, n);
    let mut gmag = Mat::zeros(1, n);
    for j in 0..n {
        let norm = v.col_norm(j);
        if norm == 0.0 {
            return Err(AdapterError::Invalid(format!("dora: zero column {j}")));
        }
        let mut dot_vg = 0.0;
        for i in 0..m {
            dot_vg += v.at(i, j) * grad_eff.at(i, j);
        }
        gmag.data[j] = dot_vg / norm;
        let f = magnitude.data[j] / norm;
        let corr = dot_vg / (norm * norm);
        for i in 0..m {
            *gv.at_mut(i, j) = f * (grad_eff.at(i, j) - v.at(i, j) * corr);
        }
    }
    let ga = mm(&gv, &b.transpose()).scale(s);
    let gb = mm(&a.transpose(), &gv).scale(s);
    Ok((ga, gb, gmag))
}

/// DeLoRA delta: (lambda ||W||_2 / r) * sum_i a_i b_i^T / (||a_i|| ||b_i||).
/// Norms are floored at 1e-12.
pub fn delora_delta(a: &Mat, b: &Mat, lambda: f64, base_norm: f64) -> Mat {
    let r = a.cols;
    let kappa = lambda * base_norm / r as f64;
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..r {
        let an = a.col_norm(i).max(1e-12);
        let brow = b.row(i);
        let bn = brow.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let f = kappa / (an * bn);
        for row in 0..a.rows {
            let av = a.at(row, i) * f;
            for col in 0..b.cols {
                out.data[row * b.cols + col] += av * brow[col];
            }
        }
    }
    out
}

pub(crate) fn delora_backward(
    a: &Mat,
    b: &Mat,
    lambda: f64,
    base_norm: f64,
    gw: &Mat,
) -> (Mat, Mat, Mat) {
    let r = a.cols;
    let kappa = lambda * base_norm / r as f64;
    let mut ga = Mat::zeros(a.rows, a.cols);
    let mut gb = Mat::zeros(b.rows, b.cols);
    let mut glam = 0.0;
    for i in 0..r {
        let ai = a.col(i);
        let bi = b.row(i).to_vec();
        let an = ai.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        let bn = bi.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        // c = GW b_i, cb = GW^T a_i, t = a_i^T GW b_i.
        let mut c = vec![0.0; a.rows];
        for row in 0..a.rows {
            let mut acc = 0.0;
            for col in 0..b.cols {
                acc += gw.at(row, col) * bi[col];
            }
            c[row] = acc;
        }
        let t: f64 = ai.iter().zip(&c).map(|(x, y)| x * y).sum();
        let f = kappa / (an * bn);
        for row in 0..a.rows {
            *ga.at_mut(row, i) = f * (c[row] - ai[row] * t / (an * an));
        }
        let mut cb = vec![0.0; b.cols];
        for col in 0..b.cols {
            let mut acc = 0.0;
            for row in 0..a.rows {
                acc += gw.at(row, col) * ai[row];
            }
            cb[col] = acc;
        }
        for col in 0..b.cols {
            *gb.at_mut(i, col) = f * (cb[col] - bi[col] * t / (bn * bn));
        }
        glam += t / (an * bn);
    }
    glam *= base_norm / r as f64;
    (ga, gb, Mat::from_vec(1, 1, vec![glam]))
}

/// LoRA-Pro closed-form aligned gradients. Inputs are the raw low-rank
/// gradients (with the rank-stabilized scaling already applied, as produced
/// by backprop); the dense-weight gradient factors are recovered from them.
pub fn lora_pro_gradients(
    a: &Mat,
    b: &Mat,
    grad_a: &Mat,
    grad_b: &Mat,
    alpha: f64,
    r: usize,
) -> Result<(Mat, Mat), AdapterError> {
    let s = rs_scale(alpha, r);
    let ata = mm(&a.transpose(), a);
    let bbt = mm(b, &b.transpose());
    check_full_rank(&ata, "A^T A")?;
    check_full_rank(&bbt, "B B^T")?;
    let ata_inv = inverse(&ata)?;
    let bbt_inv = inverse(&bbt)?;
    // grad_W B^T = grad_A / s, A^T grad_W = grad_B / s.
    let x = grad_a.scale(1.0 / s);
    let y = grad_b.scale(1.0 / s);
    // Sylvester: M (B B^T) + (A^T A) M = -(1/s^2) A^T grad_A (B B^T)^{-1}.
    let rhs = mm(&mm(&a.transpose(), grad_a), &bbt_inv).scale(-1.0 / (s * s));
    let m_t = solve_sylvester(&ata, &bbt, &rhs)?;
    let ga_star = mm(&x, &bbt_inv).scale(1.0 / s).add(&mm(a, &m_t));
    let proj = Mat::identity(b.cols).sub(&mm(&mm(&b.transpose(), &bbt_inv), b));
    let gb_star = mm(&mm(&ata_inv, &y), &proj)
        .scale(1.0 / s)
        .sub(&mm(b, &m_t));
    Ok((ga_star, gb_star))
}

fn check_full_rank(g: &Mat, label: &str) -> Result<(), AdapterError> {
    let s = svd(g).map_err(AdapterError::Linalg)?;
    let s1 = s.singular_values[0];
    let smin = *s.singular_values.last().unwrap();
    if s1 == 0.0 || smin <= 1e-10 * s1 {
        return Err(AdapterError::Invalid(format!(
            "lora-pro: {label} is rank deficient"
        )));
    }
    Ok(())
}

/// FLoRA gradient compressor: a frozen random down-projection keeps the
/// optimizer state at r x n while the weight stays m x n.
#[derive(Debug, Clone)]
pub struct FloraCompressor {
    pub proj: Mat,
}

#[derive(Debug, Clone)]
pub enum FloraInner {
    Sgd,
    AdamW {
        m: Mat,
        v: Mat,
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
    },
}

impl FloraCompressor {
    pub fn new(m: usize, r: usize, rng: &mut RngStream) -> Self {
        Self {
            proj: gaussian(m, r, 1.0 / (r as f64).sqrt(), rng),
        }
    }

    pub fn compress(&self, grad: &Mat) -> Mat {
        mm(&self.proj.transpose(), grad)
    }

    pub fn decompress(&self, update: &Mat) -> Mat {
        mm(&self.proj, update)
    }

    /// One wrapped optimizer step: compress the dense gradient, step the
    /// inner optimizer in the compressed space, decompress the update.
    /// Returns the additive weight update.
    pub fn step(&self, inner: &mut FloraInner, grad: &Mat, eta: f64) -> Mat {
        let gc = self.compress(grad);
        let uc = match inner {
            FloraInner::Sgd => gc.scale(-eta),
            FloraInner::AdamW {
                m,
                v,
                beta1,
                beta2,
                eps,
                t,
            } => {
                *t += 1;
                let tt = *t as i32;
                for i in 0..gc.numel() {
                    m.data[i] = *beta1 * m.data[i] + (1.0 - *beta1) * gc.data[i];
                    v.data[i] = *beta2 * v.data[i] + (1.0 - *beta2) * gc.data[i] * gc.data[i];
                }
                let bc1 = 1.0 - beta1.powi(tt);
                let bc2 = 1.0 - beta2.powi(tt);
                let mut u = Mat::zeros(gc.rows, gc.cols);
                for i in 0..gc.numel() {
                    let mhat = m.data[i] / bc1;
                    let vhat = v.data[i] / bc2;
                    u.data[i] = -eta * mhat / (vhat.sqrt() + *eps);
                }
                u
            }
        };
        self.decompress(&uc)
    }

    /// Optimizer-state scalars held in the compressed space.
    pub fn moment_numel(&self, inner: &FloraInner) -> usize {
        match inner {
            FloraInner::Sgd => 0,
            FloraInner::AdamW { m, v, .. } => m.numel() + v.numel(),
        }
    }
}

/// Aurora ANL -------------------------------------------------------------

/// Uniform knots on [-1, 1]: t_g = (2g - (G-1)) / (G-1).
pub fn spline_knots(g: usize) -> Vec<f64> {
    assert!(g >= 2);
    (0..g)
        .map(|i| (2.0 * i as f64 - (g - 1) as f64) / (g - 1) as f64)
        .collect()
}

fn cubic_bspline(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a <= 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

fn cubic_bspline_deriv(u: f64) -> f64 {
    let a = u.abs();
    let sign = if u >= 0.0 { 1.0 } else { -1.0 };
    if a <= 1.0 {
        sign * (-2.0 * a + 1.5 * a * a)
    } else if a <= 2.0 {
        sign * (-(2.0 - a).powi(2) / 2.0)
    } else {
        0.0
    }
}

/// Fixed scalar spline S(h) = sum_g t_g * B3((h - t_g)/dt), input clamped to
/// the knot range. Knot coefficients are the (antisymmetric) knot positions,
/// so S is odd and S(0) = 0. Returns (value, d/dh), the derivative being
/// zero outside the clamp.
pub fn spline_value_deriv(h: f64, knots: &[f64]) -> (f64, f64) {
    let lo = knots[0];
    let hi = *knots.last().unwrap();
    let dt = knots[1] - knots[0];
    let clamped = h.clamp(lo, hi);
    let inside = (lo..=hi).contains(&h);
    let mut v = 0.0;
    let mut d = 0.0;
    for &t in knots {
        let u = (clamped - t) / dt;
        v += t * cubic_bspline(u);
        d += t * cubic_bspline_deriv(u) / dt;
    }
    (v, if inside { d } else { 0.0 })
}

/// Elementwise ANL on the bottleneck: tanh(tanh(h)) + v_s[j] * S(h_j),
/// projected through B and scaled: out = s * f(xd A) B.
pub fn aurora_forward(a: &Mat, b: &Mat, v_s: &Mat, knots: &[f64], xd: &Mat, s: f64) -> Mat {
    let h = mm(xd, a);
    let mut f = Mat::zeros(h.rows, h.cols);
    for t in 0..h.rows {
        for j in 0..h.cols {
            let hv = h.at(t, j);
            let (sv, _) = spline_value_deriv(hv, knots);
            *f.at_mut(t, j) = hv.tanh().tanh() + v_s.data[j] * sv;
        }
    }
    mm(&f, b).scale(s)
}

pub(crate) fn aurora_backward(
    a: &Mat,
    b: &Mat,
    v_s: &Mat,
    knots: &[f64],
    xd: &Mat,
    grad_out: &Mat,
    s: f64,
) -> (Mat, Mat, Mat) {
    let h = mm(xd, a);
    let r = h.cols;
    let mut f = Mat::zeros(h.rows, r);
    let mut fp = Mat::zeros(h.rows, r);
    let mut sv_cache = Mat::zeros(h.rows, r);
    for t in 0..h.rows {
        for j in 0..r {
            let hv = h.at(t, j);
            let (sv, sd) = spline_value_deriv(hv, knots);
            let th = hv.tanh();
            *f.at_mut(t, j) = th.tanh() + v_s.data[j] * sv;
            *fp.at_mut(t, j) =
                (1.0 - th.tanh().powi(2)) * (1.0 - th * th) + v_s.data[j] * sd;
            *sv_cache.at_mut(t, j) = sv;
        }
    }
    let gf = mm(grad_out, &b.transpose()).scale(s);
    let gb = mm(&f.transpose(), grad_out).scale(s);
    let gh = crate::linalg::hadamard(&gf, &fp).unwrap();
    let ga = mm(&xd.transpose(), &gh);
    let mut gv = Mat::zeros(1, r);
    for j in 0..r {
        let mut acc = 0.0;
        for t in 0..h.rows {
            acc += gf.at(t, j) * sv_cache.at(t, j);
        }
        gv.data[j] = acc;
    }
    (ga, gb, gv)
}

/// LoDA ---------------------------------------------------------------------

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        crate::autodiff::LEAKY_SLOPE * x
    }
}

fn leaky_d(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        crate::autodiff::LEAKY_SLOPE
    }
}

fn map_mat(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat::from_vec(m.rows, m.cols, m.data.iter().map(|x| f(*x)).collect())
}

/// LoDA nonlinear stack on the bottleneck h = xd A:
/// out = s * (h + f2(f1(h))) B, with f1 = leaky . (rxr) . leaky . (rxr) . leaky
/// and f2 = leaky. The nonlinear branch re-projects through the same B, so
/// the update never materializes as a fixed weight matrix.
pub fn loda_forward(a: &Mat, b: &Mat, w1: &Mat, w2: &Mat, xd: &Mat, s: f64) -> Mat {
    let h = mm(xd, a);
    let u1 = map_mat(&h, leaky);
    let u2 = mm(&u1, w1);
    let u3 = map_mat(&u2, leaky);
    let u4 = mm(&u3, w2);
    let u5 = map_mat(&u4, leaky);
    let z = map_mat(&u5, leaky);
    mm(&h.add(&z), b).scale(s)
}

pub(crate) fn loda_backward(
    a: &Mat,
    b: &Mat,
    w1: &Mat,
    w2: &Mat,
    xd: &Mat,
    grad_out: &Mat,
    s: f64,
) -> (Mat, Mat, Mat, Mat) {
    let h = mm(xd, a);
    let u1 = map_mat(&h, leaky);
    let u2 = mm(&u1, w1);
    let u3 = map_mat(&u2, leaky);
    let u4 = mm(&u3, w2);
    let u5 = map_mat(&u4, leaky);
    let z = map_mat(&u5, leaky);

    let ghz = mm(grad_out, &b.transpose()).scale(s);
    let gb = mm(&h.add(&z).transpose(), grad_out).scale(s);
    let gu5 = crate::linalg::hadamard(&ghz, &map_mat(&u5, leaky_d)).unwrap();
    let gu4 = crate::linalg::hadamard(&gu5, &map_mat(&u4, leaky_d)).unwrap();
    let gw2 = mm(&u3.transpose(), &gu4);
    let gu3 = mm(&gu4, &w2.transpose());
    let gu2 = crate::linalg::hadamard(&gu3, &map_mat(&u2, leaky_d)).unwrap();
    let gw1 = mm(&u1.transpose(), &gu2);
    let gu1 = mm(&gu2, &w1.transpose());
    let gh_branch = crate::linalg::hadamard(&gu1, &map_mat(&h, leaky_d)).unwrap();
    let gh = ghz.add(&gh_branch);
    let ga = mm(&xd.transpose(), &gh);
    (ga, gb, gw1, gw2)
}

/// Builders ------------------------------------------------------------------

pub fn build_dora(
    spec: &AdapterSpec,
    base: &Mat,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("dora.a", kaiming_uniform(m, r, m, rng), true);
    let b = store.add("dora.b", Mat::zeros(r, n), true);
    // Magnitude starts at the per-column norm of the pretrained weight, so
    // the effective weight equals the base exactly.
    let mags: Vec<f64> = (0..n).map(|j| base.col_norm(j)).collect();
    let magnitude = store.add("dora.magnitude", Mat::from_vec(1, n, mags), true);
    VariantState::Dora { a, b, magnitude }
}

pub fn build_delora(
    spec: &AdapterSpec,
    base: &Mat,
    lambda0: f64,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("delora.a", kaiming_uniform(m, r, m, rng), true);
    let b = store.add("delora.b", kaiming_uniform(r, n, r, rng), true);
    let lambda = store.add("delora.lambda", Mat::from_vec(1, 1, vec![lambda0]), true);
    VariantState::Delora {
        a,
        b,
        lambda,
        base_spectral_norm: base.spectral_norm(),
    }
}

pub fn build_moslora(spec: &AdapterSpec, store: &mut ParamStore, rng: &mut RngStream) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("moslora.a", kaiming_uniform(m, r, m, rng), true);
    let mixer = store.add("moslora.mixer", kaiming_uniform(r, r, r, rng), true);
    let b = store.add("moslora.b", Mat::zeros(r, n), true);
    VariantState::MosLora { a, mixer, b }
}

pub fn build_aurora(
    spec: &AdapterSpec,
    knot_count: usize,
    store: &mut ParamStore,
    rng: &mut RngStream,
) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("aurora.a", kaiming_uniform(m, r, m, rng), true);
    let b = store.add("aurora.b", Mat::zeros(r, n), true);
    let spline_w = store.add("aurora.vs", Mat::zeros(1, r), true);
    VariantState::Aurora {
        a,
        b,
        spline_w,
        knots: spline_knots(knot_count),
    }
}

pub fn build_loda(spec: &AdapterSpec, store: &mut ParamStore, rng: &mut RngStream) -> VariantState {
    let (m, n, r) = (spec.in_features, spec.out_features, spec.rank);
    let a = store.add("loda.a", kaiming_uniform(m, r, m, rng), true);
    let b = store.add("loda.b", Mat::zeros(r, n), true);
    let w1 = store.add("loda.w1", Mat::zeros(r, r), true);
    let w2 = store.add("loda.w2", Mat::zeros(r, r), true);
    VariantState::Loda { a, b, w1, w2 }
}
