//! Minimal reverse-mode differentiation over dense matrices.
//!
//! Sufficient to train adapted linear models and to check closed-form gradient
//! identities against exact autodiff. Loss conventions are fixed here so the
//! oracles elsewhere are exact:
//! - `mse` is 0.5 * mean over all entries of the squared difference,
//! - `softmax_xent` is the mean over batch rows of -log softmax[target].

use crate::error::TapeError;
use crate::linalg::{matmul, Mat};
use std::collections::BTreeMap;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Leaf; value bound before forward.
    Input,
    /// Matrix product of two nodes.
    Linear(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a fixed matrix (dropout masks, frozen weights).
    HadamardConst(NodeId, Mat),
    Tanh(NodeId),
    LeakyRelu(NodeId),
    /// 0.5 * mean squared difference against a fixed target.
    Mse(NodeId, Mat),
    /// Mean cross entropy of row-wise softmax against fixed class indices.
    SoftmaxXent(NodeId, Vec<usize>),
    /// Sum of all entries, as a 1x1 scalar.
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Mat>,
    adjoint: Option<Mat>,
}

/// Computation tape; nodes are stored in construction order, which is already
/// topological because an op can only reference earlier nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    ran_forward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: None,
            adjoint: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    /// Declare an input leaf with a fixed shape.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input, rows, cols)
    }

    /// Declare an input and register it as a named trainable parameter.
    pub fn param(&mut self, name: &str, rows: usize, cols: usize) -> NodeId {
        let id = self.input(rows, cols);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Declare an input bound immediately to a constant value.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        let id = self.input(value.rows, value.cols);
        self.nodes[id.0].value = Some(value);
        id
    }

    pub fn linear(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("linear {ar}x{ac} * {br}x{bc}"),
            });
        }
        Ok(self.push(Op::Linear(a, b), ar, bc))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("add {:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, k), r, c)
    }

    pub fn hadamard_const(&mut self, a: NodeId, m: Mat) -> Result<NodeId, TapeError> {
        if self.shape(a) != (m.rows, m.cols) {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("hadamard_const {:?} vs {:?}", self.shape(a), m.shape()),
            });
        }
        let (r, c) = self.shape(a);
        Ok(self.push(Op::HadamardConst(a, m), r, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Tanh(a), r, c)
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::LeakyRelu(a), r, c)
    }

    pub fn mse(&mut self, pred: NodeId, target: Mat) -> Result<NodeId, TapeError> {
        if self.shape(pred) != (target.rows, target.cols) {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("mse {:?} vs {:?}", self.shape(pred), target.shape()),
            });
        }
        Ok(self.push(Op::Mse(pred, target), 1, 1))
    }

    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId, TapeError> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(TapeError::ShapeMismatch {
                node: self.nodes.len(),
                detail: format!("softmax_xent targets len {} vs batch {r}", targets.len()),
            });
        }
        Ok(self.push(Op::SoftmaxXent(logits, targets), 1, 1))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn set_value(&mut self, id: NodeId, value: Mat) -> Result<(), TapeError> {
        if self.shape(id) != value.shape() {
            return Err(TapeError::ShapeMismatch {
                node: id.0,
                detail: format!("bind {:?} vs declared {:?}", value.shape(), self.shape(id)),
            });
        }
        self.nodes[id.0].value = Some(value);
        Ok(())
    }

    pub fn set_param(&mut self, name: &str, value: Mat) -> Result<(), TapeError> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| TapeError::UnboundInput(name.to_string()))?;
        self.set_value(id, value)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn value(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].value.as_ref()
    }

    /// Run the forward pass; every node's value is cached. Returns the value
    /// of `output` as a scalar when it is 1x1.
    pub fn forward(&mut self, output: NodeId) -> Result<f64, TapeError> {
        for idx in 0..self.nodes.len() {
            let value = match &self.nodes[idx].op {
                Op::Input => {
                    if self.nodes[idx].value.is_none() {
                        return Err(TapeError::UnboundInput(format!("node {idx}")));
                    }
                    continue;
                }
                Op::Linear(a, b) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let vb = self.nodes[b.0].value.as_ref().unwrap();
                    matmul(va, vb).map_err(|e| TapeError::ShapeMismatch {
                        node: idx,
                        detail: e.to_string(),
                    })?
                }
                Op::Add(a, b) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let vb = self.nodes[b.0].value.as_ref().unwrap();
                    va.add(vb)
                }
                Op::Scale(a, k) => self.nodes[a.0].value.as_ref().unwrap().scale(*k),
                Op::HadamardConst(a, m) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    Mat::from_vec(
                        va.rows,
                        va.cols,
                        va.data.iter().zip(&m.data).map(|(x, y)| x * y).collect(),
                    )
                }
                Op::Tanh(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    Mat::from_vec(va.rows, va.cols, va.data.iter().map(|x| x.tanh()).collect())
                }
                Op::LeakyRelu(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    Mat::from_vec(
                        va.rows,
                        va.cols,
                        va.data
                            .iter()
                            .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
                            .collect(),
                    )
                }
                Op::Mse(a, target) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let n = va.numel() as f64;
                    let sum: f64 = va
                        .data
                        .iter()
                        .zip(&target.data)
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum();
                    Mat::from_vec(1, 1, vec![0.5 * sum / n])
                }
                Op::SoftmaxXent(a, targets) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let mut loss = 0.0;
                    for i in 0..va.rows {
                        let row = va.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                        loss += lse - row[targets[i]];
                    }
                    Mat::from_vec(1, 1, vec![loss / va.rows as f64])
                }
                Op::Sum(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    Mat::from_vec(1, 1, vec![va.data.iter().sum()])
                }
            };
            self.nodes[idx].value = Some(value);
        }
        self.ran_forward = true;
        let out = self.nodes[output.0].value.as_ref().unwrap();
        if out.shape() != (1, 1) {
            return Err(TapeError::NonScalarLoss(out.rows, out.cols));
        }
        Ok(out.data[0])
    }

    /// Reverse pass from `output` (seeded with adjoint 1). Each node is
    /// visited exactly once in reverse topological order.
    pub fn backward(&mut self, output: NodeId) -> Result<(), TapeError> {
        if !self.ran_forward {
            return Err(TapeError::BackwardBeforeForward);
        }
        for node in &mut self.nodes {
            node.adjoint = Some(Mat::zeros(node.rows, node.cols));
        }
        self.nodes[output.0].adjoint = Some(Mat::ones(1, 1));
        for idx in (0..self.nodes.len()).rev() {
            let adj = self.nodes[idx].adjoint.clone().unwrap();
            if adj.data.iter().all(|&x| x == 0.0) {
                continue;
            }
            match self.nodes[idx].op.clone() {
                Op::Input => {}
                Op::Linear(a, b) => {
                    let va = self.nodes[a.0].value.clone().unwrap();
                    let vb = self.nodes[b.0].value.clone().unwrap();
                    let da = matmul(&adj, &vb.transpose()).unwrap();
                    let db = matmul(&va.transpose(), &adj).unwrap();
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&da);
                    self.nodes[b.0].adjoint.as_mut().unwrap().add_assign(&db);
                }
                Op::Add(a, b) => {
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&adj);
                    self.nodes[b.0].adjoint.as_mut().unwrap().add_assign(&adj);
                }
                Op::Scale(a, k) => {
                    self.nodes[a.0]
                        .adjoint
                        .as_mut()
                        .unwrap()
                        .add_assign(&adj.scale(k));
                }
                Op::HadamardConst(a, m) => {
                    let d = Mat::from_vec(
                        adj.rows,
                        adj.cols,
                        adj.data.iter().zip(&m.data).map(|(x, y)| x * y).collect(),
                    );
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&d);
                }
                Op::Tanh(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let d = Mat::from_vec(
                        adj.rows,
                        adj.cols,
                        adj.data
                            .iter()
                            .zip(&va.data)
                            .map(|(g, x)| g * (1.0 - x.tanh().powi(2)))
                            .collect(),
                    );
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&d);
                }
                Op::LeakyRelu(a) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let d = Mat::from_vec(
                        adj.rows,
                        adj.cols,
                        adj.data
                            .iter()
                            .zip(&va.data)
                            .map(|(g, x)| g * if *x > 0.0 { 1.0 } else { LEAKY_SLOPE })
                            .collect(),
                    );
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&d);
                }
                Op::Mse(a, target) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let n = va.numel() as f64;
                    let g = adj.data[0];
                    let d = Mat::from_vec(
                        va.rows,
                        va.cols,
                        va.data
                            .iter()
                            .zip(&target.data)
                            .map(|(p, t)| g * (p - t) / n)
                            .collect(),
                    );
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&d);
                }
                Op::SoftmaxXent(a, targets) => {
                    let va = self.nodes[a.0].value.as_ref().unwrap();
                    let g = adj.data[0] / va.rows as f64;
                    let mut d = Mat::zeros(va.rows, va.cols);
                    for i in 0..va.rows {
                        let row = va.row(i);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        for j in 0..va.cols {
                            let p = (row[j] - m).exp() / denom;
                            *d.at_mut(i, j) =
                                g * (p - if targets[i] == j { 1.0 } else { 0.0 });
                        }
                    }
                    self.nodes[a.0].adjoint.as_mut().unwrap().add_assign(&d);
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    self.nodes[a.0]
                        .adjoint
                        .as_mut()
                        .unwrap()
                        .add_assign(&Mat::ones(r, c).scale(adj.data[0]));
                }
            }
        }
        Ok(())
    }

    pub fn adjoint(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].adjoint.as_ref()
    }

    /// Gradient of a named parameter after backward.
    pub fn grad(&self, name: &str) -> Option<&Mat> {
        self.params.get(name).and_then(|id| self.adjoint(*id))
    }
}

/// Relative error between analytic and numeric values.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-6)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compare backward gradients against central finite differences (step `h`)
/// for every registered parameter. `build` must construct the same graph on a
/// fresh tape each call and return the loss node; `values` supplies parameter
/// values by name.
pub fn grad_check<F>(build: F, values: &BTreeMap<String, Mat>, h: f64) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape) -> NodeId,
{
    let mut tape = Tape::new();
    let loss_node = build(&mut tape);
    for (name, v) in values {
        tape.set_param(name, v.clone())?;
    }
    tape.forward(loss_node)?;
    tape.backward(loss_node)?;
    let analytic: BTreeMap<String, Mat> = tape
        .param_names()
        .iter()
        .map(|n| (n.clone(), tape.grad(n).unwrap().clone()))
        .collect();

    let eval = |values: &BTreeMap<String, Mat>| -> Result<f64, TapeError> {
        let mut t = Tape::new();
        let out = build(&mut t);
        for (name, v) in values {
            t.set_param(name, v.clone())?;
        }
        t.forward(out)
    };

    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (name, grad) in &analytic {
        let mut worst_entry = 0.0f64;
        let base = values.get(name).unwrap();
        for idx in 0..base.numel() {
            let mut plus = values.clone();
            plus.get_mut(name).unwrap().data[idx] += h;
            let mut minus = values.clone();
            minus.get_mut(name).unwrap().data[idx] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let e = rel_err(grad.data[idx], numeric);
            worst_entry = worst_entry.max(e);
        }
        per_param.insert(name.clone(), worst_entry);
        if worst_entry > max_rel {
            max_rel = worst_entry;
            worst = Some(name.clone());
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param: worst,
        per_param,
    })
}

/// Central finite-difference gradient of an arbitrary scalar function of one
/// matrix; the independent oracle used to validate hand-written backward
/// passes throughout the variant modules.
pub fn finite_diff_grad<F: Fn(&Mat) -> f64>(f: F, at: &Mat, h: f64) -> Mat {
    let mut g = Mat::zeros(at.rows, at.cols);
    let mut x = at.clone();
    for idx in 0..at.numel() {
        let orig = x.data[idx];
        x.data[idx] = orig + h;
        let fp = f(&x);
        x.data[idx] = orig - h;
        let fm = f(&x);
        x.data[idx] = orig;
        g.data[idx] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian;
    use crate::rng::RngStream;

    #[test]
    fn mse_of_identical_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(2, 3);
        let target = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = tape.mse(x, target.clone()).unwrap();
        tape.set_value(x, target).unwrap();
        assert_eq!(tape.forward(loss).unwrap(), 0.0);
    }

    #[test]
    fn xent_uniform_logits_is_ln_k() {
        let mut tape = Tape::new();
        let x = tape.input(4, 7);
        let loss = tape.softmax_xent(x, vec![0, 3, 5, 6]).unwrap();
        tape.set_value(x, Mat::zeros(4, 7)).unwrap();
        let v = tape.forward(loss).unwrap();
        assert!((v - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn linear_mse_matches_closed_form() {
        let mut rng = RngStream::new(31);
        let xv = gaussian(4, 3, 1.0, &mut rng);
        let wv = gaussian(3, 2, 1.0, &mut rng);
        let yv = gaussian(4, 2, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.param("w", 3, 2);
        let pred = tape.linear(x, w).unwrap();
        let loss = tape.mse(pred, yv.clone()).unwrap();
        tape.set_param("w", wv.clone()).unwrap();
        let got = tape.forward(loss).unwrap();
        let diff = crate::linalg::mm(&xv, &wv).sub(&yv);
        let expect = 0.5 * diff.frob_norm().powi(2) / diff.numel() as f64;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_mse_gradient_analytic() {
        // d/dW of (1/(2*b*n)) * ||xW - y||_F^2 = x^T (xW - y) / (b*n)
        let mut rng = RngStream::new(32);
        let xv = gaussian(5, 4, 1.0, &mut rng);
        let wv = gaussian(4, 3, 1.0, &mut rng);
        let yv = gaussian(5, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let w = tape.param("w", 4, 3);
        let pred = tape.linear(x, w).unwrap();
        let loss = tape.mse(pred, yv.clone()).unwrap();
        tape.set_param("w", wv.clone()).unwrap();
        tape.forward(loss).unwrap();
        tape.backward(loss).unwrap();
        let resid = crate::linalg::mm(&xv, &wv).sub(&yv);
        let expect = crate::linalg::mm(&xv.transpose(), &resid).scale(1.0 / 15.0);
        assert!(tape.grad("w").unwrap().sub(&expect).max_abs() < 1e-12);
    }

    #[test]
    fn constant_branch_gradient_is_zero() {
        let mut rng = RngStream::new(33);
        let xv = gaussian(3, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let w = tape.param("w", 3, 3);
        let dead = tape.param("dead", 3, 3);
        let _unused = tape.scale(dead, 2.0);
        let loss = tape.mse(w, xv.clone()).unwrap();
        tape.set_param("w", xv.clone()).unwrap();
        tape.set_param("dead", xv).unwrap();
        tape.forward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad("dead").unwrap().max_abs(), 0.0);
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(1, 1);
        assert_eq!(
            tape.backward(x),
            Err(TapeError::BackwardBeforeForward)
        );
    }

    #[test]
    fn random_graphs_match_finite_differences() {
        // 20 random graphs mixing every op kind.
        for seed in 0..20u64 {
            let mut rng = RngStream::new(1000 + seed);
            let b = 2 + (seed % 3) as usize;
            let m = 3 + (seed % 2) as usize;
            let k = 2 + (seed % 3) as usize;
            let xv = gaussian(b, m, 1.0, &mut rng);
            let wv = gaussian(m, k, 0.7, &mut rng);
            let uv = gaussian(k, k, 0.5, &mut rng);
            let mask = gaussian(b, k, 1.0, &mut rng);
            let target = gaussian(b, k, 1.0, &mut rng);
            let classes: Vec<usize> = (0..b).map(|i| i % k).collect();
            let use_xent = seed % 2 == 0;
            let xv2 = xv.clone();
            let mask2 = mask.clone();
            let target2 = target.clone();
            let classes2 = classes.clone();
            let build = move |tape: &mut Tape| -> NodeId {
                let x = tape.constant(xv2.clone());
                let w = tape.param("w", m, k);
                let u = tape.param("u", k, k);
                let h = tape.linear(x, w).unwrap();
                let t = tape.tanh(h);
                let l = tape.leaky_relu(t);
                let g = tape.linear(l, u).unwrap();
                let sc = tape.scale(g, 1.5);
                let hm = tape.hadamard_const(sc, mask2.clone()).unwrap();
                let a = tape.add(hm, h).unwrap();
                if use_xent {
                    let xe = tape.softmax_xent(a, classes2.clone()).unwrap();
                    let s = tape.sum(a);
                    let s2 = tape.scale(s, 0.01);
                    tape.add(xe, s2).unwrap()
                } else {
                    tape.mse(a, target2.clone()).unwrap()
                }
            };
            let mut values = BTreeMap::new();
            values.insert("w".to_string(), wv);
            values.insert("u".to_string(), uv);
            let report = grad_check(build, &values, 1e-5).unwrap();
            assert!(
                report.max_rel_err <= 1e-6,
                "seed {seed}: max rel err {} at {:?}",
                report.max_rel_err,
                report.worst_param
            );
        }
    }

    #[test]
    fn grad_check_negative_control() {
        // A corrupted gradient entry must fail the same comparison.
        let mut rng = RngStream::new(55);
        let analytic = 1.0;
        let numeric = 1.0 + rng.uniform(0.5, 1.0);
        assert!(rel_err(analytic, numeric) > 1e-6);
    }

    #[test]
    fn grad_check_empty_params_vacuous_pass() {
        let build = |tape: &mut Tape| -> NodeId {
            let x = tape.constant(Mat::ones(2, 2));
            tape.sum(x)
        };
        let report = grad_check(build, &BTreeMap::new(), 1e-5).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert!(report.passed(1e-6));
    }

    #[test]
    fn sum_of_losses_linearity() {
        let mut rng = RngStream::new(34);
        let xv = gaussian(3, 4, 1.0, &mut rng);
        let wv = gaussian(4, 2, 1.0, &mut rng);
        let y1 = gaussian(3, 2, 1.0, &mut rng);
        let y2 = gaussian(3, 2, 1.0, &mut rng);

        let run = |targets: &[&Mat], wv: &Mat| -> Mat {
            let mut tape = Tape::new();
            let x = tape.constant(xv.clone());
            let w = tape.param("w", 4, 2);
            let pred = tape.linear(x, w).unwrap();
            let mut loss = None;
            for t in targets {
                let l = tape.mse(pred, (*t).clone()).unwrap();
                loss = Some(match loss {
                    None => l,
                    Some(prev) => tape.add(prev, l).unwrap(),
                });
            }
            let loss = loss.unwrap();
            tape.set_param("w", wv.clone()).unwrap();
            tape.forward(loss).unwrap();
            tape.backward(loss).unwrap();
            tape.grad("w").unwrap().clone()
        };

        let g1 = run(&[&y1], &wv);
        let g2 = run(&[&y2], &wv);
        let g12 = run(&[&y1, &y2], &wv);
        assert!(g12.sub(&g1.add(&g2)).max_abs() == 0.0);
    }
}
