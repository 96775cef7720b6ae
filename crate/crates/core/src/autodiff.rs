//! Reverse-mode differentiation over a recorded sequence of matrix ops.
//!
//! Every op stores what its adjoint needs; [`Tape::backward`] walks the
//! record in reverse. Values are computed eagerly, so a tape doubles as the
//! forward evaluator and nodes that never touch a parameter are skipped on
//! the way back.

use std::rc::Rc;

use crate::bank::{running_weights, CompressionPlan};
use crate::error::{ReefError, Result};
use crate::scorer::{scorer_backward, scorer_raw, ScorerCache, ScorerParams};
use crate::tensor::Matrix;
use crate::topk::{perturbed_topk_backward, perturbed_topk_forward, PerturbConfig, PerturbedCache};

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f32>),
    Gelu(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    Compress {
        inputs: Vec<Var>,
        plan: Rc<CompressionPlan>,
        j: usize,
    },
    MixSlots {
        y: Var,
        slots: Vec<Var>,
        k: usize,
    },
    AnchorMix {
        frame: Var,
        weights: Var,
        anchors: Rc<Vec<Vec<usize>>>,
    },
    PerturbedTopK(Var, Box<PerturbedCache>),
    Scorer(Var, ScorerVars, Box<ScorerCache>),
    CrossEntropy(Var, Vec<usize>, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Adjoints of every node reached from the loss.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(ReefError::Numeric("non-finite value in forward pass".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        self.params.push((name.into(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds the `1 x C` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let v = self.value(a).scale(s);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows();
        let ng = self.any_grad(&[a]);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    /// Per-row standardisation without a learned affine map.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            for v in row.iter_mut() {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
            inv_std.push(inv as f32);
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::LayerNorm(a, inv_std), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(gelu);
        let ng = self.any_grad(&[a]);
        self.push(v, Op::Gelu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(ReefError::shape(
                "slice_cols",
                format!("{start}+{len} beyond {} columns", x.cols()),
            ));
        }
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.any_grad(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| ReefError::Argument("concat of nothing".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(ReefError::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = self.any_grad(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats)?;
        let ng = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Column means, `1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_rows();
        let ng = self.any_grad(&[a]);
        self.push(v, Op::MeanRows(a), ng)
    }

    /// Tiles a `1 x C` row `n` times.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(ReefError::shape("repeat_rows", "input must be a single row"));
        }
        let mut data = Vec::with_capacity(n * x.cols());
        for _ in 0..n {
            data.extend_from_slice(x.data());
        }
        let v = Matrix::new(n, x.cols(), data)?;
        let ng = self.any_grad(&[a]);
        self.push(v, Op::RepeatRows(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_rows(idx)?;
        let ng = self.any_grad(&[a]);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Output slot `j` of a compression plan with fixed weights. Mixing
    /// plans go through [`Tape::mix_slots`].
    pub fn compress_slot(&mut self, inputs: &[Var], plan: Rc<CompressionPlan>, j: usize) -> Result<Var> {
        if matches!(*plan, CompressionPlan::Mix { .. }) {
            return Err(ReefError::Argument("mixing plans need a selector variable".into()));
        }
        let refs: Vec<&Matrix> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = plan.slot_value(&refs, j)?;
        let ng = self.any_grad(inputs);
        self.push(
            v,
            Op::Compress {
                inputs: inputs.to_vec(),
                plan,
                j,
            },
            ng,
        )
    }

    /// `Σ_g y[g, k] · slots[g]`.
    pub fn mix_slots(&mut self, y: Var, slots: &[Var], k: usize) -> Result<Var> {
        let weights = self.value(y).clone();
        if weights.rows() != slots.len() || k >= weights.cols() {
            return Err(ReefError::shape(
                "mix_slots",
                format!("selector {:?} for {} slots, column {k}", weights.shape(), slots.len()),
            ));
        }
        let refs: Vec<&Matrix> = slots.iter().map(|&v| self.value(v)).collect();
        let v = CompressionPlan::Mix { weights }.slot_value(&refs, k)?;
        let ng = self.any_grad(slots) || self.any_grad(&[y]);
        self.push(
            v,
            Op::MixSlots {
                y,
                slots: slots.to_vec(),
                k,
            },
            ng,
        )
    }

    /// `Σ_h w[h] · frame[anchor_h]` for an `H x 1` weight column.
    pub fn anchor_mix(&mut self, frame: Var, weights: Var, anchors: Rc<Vec<Vec<usize>>>) -> Result<Var> {
        let x = self.value(frame);
        let w = self.value(weights);
        let k = anchors.first().map_or(0, |a| a.len());
        if w.rows() != anchors.len() || w.cols() != 1 || k == 0 {
            return Err(ReefError::shape(
                "anchor_mix",
                format!("weights {:?} for {} anchors", w.shape(), anchors.len()),
            ));
        }
        let mut out = Matrix::zeros(k, x.cols());
        for (h, anchor) in anchors.iter().enumerate() {
            let wh = w.get(h, 0);
            if wh == 0.0 {
                continue;
            }
            for (r, &src) in anchor.iter().enumerate() {
                for (o, &v) in out.row_mut(r).iter_mut().zip(x.row(src)) {
                    *o += wh * v;
                }
            }
        }
        let ng = self.any_grad(&[frame, weights]);
        self.push(
            out,
            Op::AnchorMix {
                frame,
                weights,
                anchors,
            },
            ng,
        )
    }

    /// Smoothed Top-K of a `G x 1` score column, `G x K`.
    pub fn perturbed_topk(&mut self, scores: Var, k: usize, cfg: &PerturbConfig) -> Result<Var> {
        let s = self.value(scores);
        if s.cols() != 1 {
            return Err(ReefError::shape("perturbed_topk", "scores must be a column"));
        }
        let (y, cache) = perturbed_topk_forward(s.data(), k, cfg)?;
        let ng = self.any_grad(&[scores]);
        self.push(y.into_matrix(), Op::PerturbedTopK(scores, Box::new(cache)), ng)
    }

    /// Raw scorer output, `G x 1`.
    pub fn scorer(&mut self, tokens: Var, p: ScorerVars) -> Result<Var> {
        let params = self.scorer_params(p);
        let (raw, cache) = scorer_raw(self.value(tokens), &params)?;
        let g = raw.len();
        let ng = self.any_grad(&[tokens, p.w1, p.b1, p.w2, p.b2]);
        self.push(
            Matrix::new(g, 1, raw)?,
            Op::Scorer(tokens, p, Box::new(cache)),
            ng,
        )
    }

    pub fn scorer_params(&self, p: ScorerVars) -> ScorerParams {
        ScorerParams {
            w1: self.value(p.w1).clone(),
            b1: self.value(p.b1).clone(),
            w2: self.value(p.w2).clone(),
            b2: self.value(p.b2).clone(),
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() {
            return Err(ReefError::shape(
                "cross_entropy",
                format!("{} rows for {} targets", z.rows(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= z.cols()) {
            return Err(ReefError::Argument(format!(
                "token {bad} outside vocabulary of {}",
                z.cols()
            )));
        }
        let probs = z.softmax_rows();
        let mut nll = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            nll += lse - row[t] as f64;
        }
        let loss = Matrix::filled(1, 1, (nll / targets.len() as f64) as f32);
        let ng = self.any_grad(&[logits]);
        self.push(loss, Op::CrossEntropy(logits, targets.to_vec(), probs), ng)
    }

    /// Back-propagates from the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(ReefError::shape("backward", "loss must be 1 x 1"));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.node_backward(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient of every named parameter; unreached parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Matrix)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| {
                    let (r, c) = self.value(*v).shape();
                    Matrix::zeros(r, c)
                });
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_scaled(&g, 1.0),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Matrix>],
        v: Var,
        f: impl FnOnce(&mut Matrix),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let acc = grads[v.0].get_or_insert_with(|| {
            let (r, c) = self.value(v).shape();
            Matrix::zeros(r, c)
        });
        f(acc);
    }

    fn node_backward(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(val(*b))?)?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).matmul_tn(g)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                if wants(*a) {
                    self.accumulate(grads, *a, g.matmul(val(*b))?)?;
                }
                if wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(val(*a))?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if wants(*b) {
                    self.accumulate(grads, *b, column_sums(g))?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f32 = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in out.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (q - dot);
                    }
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.cols() as f32;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mean_g: f32 = g.row(r).iter().sum::<f32>() / n;
                    let mean_gy: f32 =
                        g.row(r).iter().zip(y.row(r)).map(|(&p, &q)| p * q).sum::<f32>() / n;
                    for ((o, &gy), &yy) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = inv_std[r] * (gy - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let mut out = g.clone();
                for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                    *o *= gelu_grad(xv);
                }
                self.accumulate(grads, *a, out)?;
            }
            Op::SliceCols(a, start) => {
                let len = g.cols();
                self.accumulate_with(grads, *a, |acc| {
                    for r in 0..g.rows() {
                        for (o, &v) in acc.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = val(p).cols();
                    self.accumulate_with(grads, p, |acc| {
                        for r in 0..g.rows() {
                            for (o, &v) in acc.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + w]) {
                                *o += v;
                            }
                        }
                    });
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if wants(p) {
                        self.accumulate(grads, p, g.slice_rows(r0, h)?)?;
                    }
                    r0 += h;
                }
            }
            Op::MeanRows(a) => {
                let rows = val(*a).rows();
                let row = g.scale(1.0 / rows as f32);
                self.accumulate_with(grads, *a, |acc| {
                    for r in 0..rows {
                        for (o, &v) in acc.row_mut(r).iter_mut().zip(row.data()) {
                            *o += v;
                        }
                    }
                });
            }
            Op::RepeatRows(a) => self.accumulate(grads, *a, column_sums(g))?,
            Op::GatherRows(a, idx) => {
                self.accumulate_with(grads, *a, |acc| {
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Compress { inputs, plan, j } => compress_backward(self, grads, inputs, plan, *j, g),
            Op::MixSlots { y, slots, k } => {
                let weights = val(*y);
                for (gi, &s) in slots.iter().enumerate() {
                    let w = weights.get(gi, *k);
                    if w != 0.0 {
                        self.accumulate_with(grads, s, |acc| {
                            acc.add_scaled(g, w).expect("same shape");
                        });
                    }
                }
                if wants(*y) {
                    self.accumulate_with(grads, *y, |acc| {
                        for (gi, &s) in slots.iter().enumerate() {
                            let d: f32 = g.data().iter().zip(val(s).data()).map(|(&p, &q)| p * q).sum();
                            acc.set(gi, *k, acc.get(gi, *k) + d);
                        }
                    });
                }
            }
            Op::AnchorMix {
                frame,
                weights,
                anchors,
            } => {
                let w = val(*weights);
                let x = val(*frame);
                self.accumulate_with(grads, *frame, |acc| {
                    for (h, anchor) in anchors.iter().enumerate() {
                        let wh = w.get(h, 0);
                        if wh == 0.0 {
                            continue;
                        }
                        for (r, &src) in anchor.iter().enumerate() {
                            for (o, &v) in acc.row_mut(src).iter_mut().zip(g.row(r)) {
                                *o += wh * v;
                            }
                        }
                    }
                });
                if wants(*weights) {
                    let mut gw = Matrix::zeros(anchors.len(), 1);
                    for (h, anchor) in anchors.iter().enumerate() {
                        let mut d = 0f32;
                        for (r, &src) in anchor.iter().enumerate() {
                            d += g.row(r).iter().zip(x.row(src)).map(|(&p, &q)| p * q).sum::<f32>();
                        }
                        gw.set(h, 0, d);
                    }
                    self.accumulate(grads, *weights, gw)?;
                }
            }
            Op::PerturbedTopK(scores, cache) => {
                let gs = perturbed_topk_backward(cache, g)?;
                let n = gs.len();
                self.accumulate(grads, *scores, Matrix::new(n, 1, gs)?)?;
            }
            Op::Scorer(tokens, p, cache) => {
                let params = self.scorer_params(*p);
                let sg = scorer_backward(cache, &params, g.data())?;
                self.accumulate(grads, *tokens, sg.input)?;
                self.accumulate(grads, p.w1, sg.w1)?;
                self.accumulate(grads, p.b1, sg.b1)?;
                self.accumulate(grads, p.w2, sg.w2)?;
                self.accumulate(grads, p.b2, sg.b2)?;
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let scale = g.get(0, 0) / targets.len() as f32;
                let mut out = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let v = out.get(r, t);
                    out.set(r, t, v - 1.0);
                }
                self.accumulate(grads, *logits, out.scale(scale))?;
            }
        }
        Ok(())
    }
}

fn compress_backward(
    tape: &Tape,
    grads: &mut [Option<Matrix>],
    inputs: &[Var],
    plan: &CompressionPlan,
    j: usize,
    g: &Matrix,
) {
    match plan {
        CompressionPlan::Merge { k } => {
            for (i, &ki) in k.iter().enumerate() {
                let row = g.row(i);
                let mut add = |src: usize, w: f32| {
                    tape.accumulate_with(grads, inputs[src], |acc| {
                        for (o, &v) in acc.row_mut(i).iter_mut().zip(row) {
                            *o += w * v;
                        }
                    });
                };
                if j < ki {
                    add(j, 1.0);
                } else if j == ki {
                    add(j, 0.5);
                    add(j + 1, 0.5);
                } else {
                    add(j + 1, 1.0);
                }
            }
        }
        CompressionPlan::Running { frames } => {
            let (wa, wb) = running_weights(*frames);
            for (src, w) in [(0, wa), (1, wb)] {
                tape.accumulate_with(grads, inputs[src], |acc| {
                    acc.add_scaled(g, w).expect("same shape");
                });
            }
        }
        CompressionPlan::Drop { index } => {
            let src = if j < *index { j } else { j + 1 };
            tape.accumulate_with(grads, inputs[src], |acc| {
                acc.add_scaled(g, 1.0).expect("same shape");
            });
        }
        CompressionPlan::Mix { .. } => unreachable!("rejected at record time"),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}
