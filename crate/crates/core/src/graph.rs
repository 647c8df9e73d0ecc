//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and the backward pass is a single reverse sweep.
//! Leaves created with [`Graph::constant`] never receive gradients, and no
//! gradient is propagated into subgraphs that only depend on constants.

use ndarray::{concatenate, s, Array2, Axis, Zip};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    Transpose(Var),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    InjectRows { base: Var, row: Var, mask: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, cols) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (1, cols), "add_row: shape mismatch");
        let value = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::AddRow(a, b), rg)
    }

    /// `a ⊙ b` where `b` is a single row broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, cols) = self.value(a).dim();
        assert_eq!(self.value(b).dim(), (1, cols), "mul_row: shape mismatch");
        let value = self.value(a) * self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(value, Op::MulRow(a, b), rg)
    }

    /// Adds a fixed matrix (e.g. an attention mask).
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = self.value(a) + c;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| {
            let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let cols = x.ncols() as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LayerNorm { input: a, inv_std }, rg)
    }

    /// Row-wise softmax, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceRows { input: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.any_grad(&[a]);
        self.push(value, Op::SliceCols { input: a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = self.any_grad(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Replaces every row `k` of `base` with `mask[k]` set by the single row
    /// `row`. Unmasked rows are copied, never recomputed.
    pub fn inject_rows(&mut self, base: Var, row: Var, mask: &[bool]) -> Var {
        let (rows, cols) = self.value(base).dim();
        assert_eq!(mask.len(), rows, "inject_rows: mask length");
        assert_eq!(self.value(row).dim(), (1, cols), "inject_rows: row shape");
        let mut value = self.value(base).clone();
        let replacement = self.value(row).row(0).to_owned();
        for (k, &on) in mask.iter().enumerate() {
            if on {
                value.row_mut(k).assign(&replacement);
            }
        }
        let rg = self.any_grad(&[base, row]);
        self.push(
            value,
            Op::InjectRows {
                base,
                row,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Backpropagates `seed` (same shape as `root`) and returns the gradient
    /// of every node that requires one.
    pub fn backward(&self, root: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(self.value(root).dim(), seed.dim(), "backward: seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Array2<f64>,
        g: &Array2<f64>,
        grads: &mut [Option<Array2<f64>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    let prod = g * self.value(*a);
                    self.accumulate(grads, *b, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Scale(a, factor) => self.accumulate(grads, *a, g * *factor),
            Op::Gelu(a) => {
                let mut d = self.value(*a).clone();
                Zip::from(&mut d).and(g).for_each(|x, &gv| {
                    let xv = *x;
                    let inner = SQRT_2_OVER_PI * (xv + GELU_COEF * xv * xv * xv);
                    let t = inner.tanh();
                    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * xv * xv);
                    *x = gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner);
                });
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = out.ncols() as f64;
                let mut d = Array2::zeros(out.dim());
                for (r, inv) in inv_std.iter().enumerate() {
                    let gr = g.row(r);
                    let xr = out.row(r);
                    let mean_g = gr.sum() / cols;
                    let mean_gx = gr.dot(&xr) / cols;
                    let mut dr = d.row_mut(r);
                    Zip::from(&mut dr)
                        .and(&gr)
                        .and(&xr)
                        .for_each(|dv, &gv, &xv| *dv = inv * (gv - mean_g - xv * mean_gx));
                }
                self.accumulate(grads, *input, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g * out;
                for (mut dr, sr) in d.rows_mut().into_iter().zip(out.rows()) {
                    let total = dr.sum();
                    Zip::from(&mut dr).and(&sr).for_each(|dv, &sv| *dv -= sv * total);
                }
                self.accumulate(grads, *a, d);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::SliceRows { input, start } => {
                if self.requires_grad(*input) {
                    let mut d = Array2::zeros(self.value(*input).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.accumulate(grads, *input, d);
                }
            }
            Op::SliceCols { input, start } => {
                if self.requires_grad(*input) {
                    let mut d = Array2::zeros(self.value(*input).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(grads, *input, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if self.requires_grad(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::InjectRows { base, row, mask } => {
                if self.requires_grad(*base) {
                    let mut d = g.clone();
                    for (k, &on) in mask.iter().enumerate() {
                        if on {
                            d.row_mut(k).fill(0.0);
                        }
                    }
                    self.accumulate(grads, *base, d);
                }
                if self.requires_grad(*row) {
                    let mut d = Array2::zeros((1, g.ncols()));
                    for (k, &on) in mask.iter().enumerate() {
                        if on {
                            let mut dr = d.row_mut(0);
                            dr += &g.row(k);
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
