//! Dense 2-D tensors with a reverse-mode differentiation tape.
//!
//! Every op appends one node to a [`Tape`]. Node indices are assigned in
//! creation order, which is already a topological order, so `backward`
//! walks the node list once from the root down. Leaf gradients accumulate
//! across `backward` calls until [`Tape::zero_grad`].

mod gradcheck;
pub mod kernels;

use std::borrow::Cow;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords};
pub use kernels::AttnPattern;

use crate::error::{Error, Result};
use kernels::MatView;

/// Owned tensor: a shape, a flat row-major buffer and an optional gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self::vector(vec![x])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TapePosition(usize);

impl TapePosition {
    pub fn index(self) -> usize {
        self.0
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add { a: usize, b: usize },
    AddRow { x: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: f64 },
    Gelu { a: usize },
    LayerNorm { x: usize, g: usize, b: usize },
    Softmax { a: usize },
    Gather { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    CrossEntropy { logits: usize, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    Sum { a: usize },
    ScaleShift { a: usize, scale: Vec<f64> },
    ScatterRows { base: usize, rows: Vec<usize>, src: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, pattern: AttnPattern, probs: Vec<f64> },
    Pick { a: usize, idx: Vec<(usize, usize)> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a computation. Leaves may borrow their storage for `'a`.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "`{op}` produced non-finite value {} at flat index {i}",
            data[i]
        )));
    }
    Ok(())
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

fn slot_mut(slot: &mut Option<Vec<f64>>, n: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; n])
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> TapePosition {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        TapePosition(self.nodes.len() - 1)
    }

    fn node(&self, v: TapePosition) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[TapePosition]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[TapePosition],
    ) -> Result<TapePosition> {
        check_finite(name, &data)?;
        let rg = self.rg(inputs);
        Ok(self.push(shape, Cow::Owned(data), op, rg))
    }

    /// Adds an owned tensor as a leaf; it is differentiable iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> TapePosition {
        let rg = t.requires_grad;
        let Tensor { shape, data, .. } = t;
        self.push(shape, Cow::Owned(data), Op::Leaf, rg)
    }

    /// Adds a leaf that borrows its storage.
    pub fn leaf_ref(&mut self, shape: &[usize], data: &'a [f64], requires_grad: bool) -> Result<TapePosition> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("leaf", format!("shape {shape:?} vs {} values", data.len())));
        }
        Ok(self.push(shape.to_vec(), Cow::Borrowed(data), Op::Leaf, requires_grad))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TapePosition> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: TapePosition) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: TapePosition) -> &[usize] {
        &self.node(v).shape
    }

    pub fn dims(&self, v: TapePosition) -> (usize, usize) {
        dims2(&self.node(v).shape)
    }

    pub fn requires_grad(&self, v: TapePosition) -> bool {
        self.node(v).requires_grad
    }

    /// Snapshot of a node as an owned tensor (gradient included for leaves).
    pub fn tensor(&self, v: TapePosition) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
            requires_grad: n.requires_grad,
            grad: self.leaf_grads[v.0].clone(),
        }
    }

    /// Accumulated gradient of a differentiable leaf, if any backward pass reached it.
    pub fn grad(&self, v: TapePosition) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: TapePosition) -> Option<Vec<f64>> {
        self.leaf_grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- ops ----------------------------------------------------------

    pub fn matmul(&mut self, a: TapePosition, b: TapePosition) -> Result<TapePosition> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: TapePosition, b: TapePosition, ta: bool, tb: bool) -> Result<TapePosition> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let av = MatView::new(self.value(a), ar, ac).maybe_t(ta);
        let bv = MatView::new(self.value(b), br, bc).maybe_t(tb);
        if av.cols != bv.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} · {}x{}", av.rows, av.cols, bv.rows, bv.cols),
            ));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![0.0; m * n];
        kernels::gemm(av, bv, &mut out, 0.0);
        self.finish("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: TapePosition, b: TapePosition) -> Result<TapePosition> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.finish("add", self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, &[a, b])
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: TapePosition, row: TapePosition) -> Result<TapePosition> {
        let (_, c) = self.dims(x);
        if self.value(row).len() != c {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + row {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c.max(1))
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        self.finish("add_row", self.shape(x).to_vec(), out, Op::AddRow { x: x.0, row: row.0 }, &[x, row])
    }

    pub fn mul(&mut self, a: TapePosition, b: TapePosition) -> Result<TapePosition> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.finish("mul", self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, &[a, b])
    }

    pub fn scale(&mut self, a: TapePosition, s: f64) -> Result<TapePosition> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * s).collect();
        self.finish("scale", self.shape(a).to_vec(), out, Op::Scale { a: a.0, s }, &[a])
    }

    pub fn gelu(&mut self, a: TapePosition) -> Result<TapePosition> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.finish("gelu", self.shape(a).to_vec(), out, Op::Gelu { a: a.0 }, &[a])
    }

    pub fn layer_norm(&mut self, x: TapePosition, g: TapePosition, b: TapePosition) -> Result<TapePosition> {
        let (_, c) = self.dims(x);
        if self.value(g).len() != c || self.value(b).len() != c {
            return Err(Error::dim(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(g), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; self.value(x).len()];
        kernels::layer_norm(self.value(x), c, self.value(g), self.value(b), &mut out);
        self.finish(
            "layer_norm",
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x: x.0, g: g.0, b: b.0 },
            &[x, g, b],
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: TapePosition) -> Result<TapePosition> {
        let (_, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        out.chunks_exact_mut(c.max(1)).for_each(kernels::softmax_in_place);
        self.finish("softmax", self.shape(a).to_vec(), out, Op::Softmax { a: a.0 }, &[a])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: TapePosition, ids: &[usize]) -> Result<TapePosition> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather", format!("id {bad} out of {r} table rows")));
        }
        let t = self.value(table);
        let out: Vec<f64> = ids.iter().flat_map(|&i| t[i * c..(i + 1) * c].iter().copied()).collect();
        self.finish(
            "gather",
            vec![ids.len(), c],
            out,
            Op::Gather { table: table.0, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Concatenates 2-D tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[TapePosition], axis: usize) -> Result<TapePosition> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::dim("concat", format!("{} parts on axis {axis}", parts.len())));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect();
        let (r0, c0) = dims[0];
        let (rows, cols) = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(Error::dim("concat", format!("column mismatch {dims:?}")));
            }
            (dims.iter().map(|d| d.0).sum(), c0)
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(Error::dim("concat", format!("row mismatch {dims:?}")));
            }
            (r0, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for r in 0..rows {
                for (&p, &(_, c)) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
                }
            }
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        };
        self.finish("concat", vec![rows, cols], out, op, parts)
    }

    /// `len` rows (`axis = 0`) or columns (`axis = 1`) starting at `start`.
    pub fn slice(&mut self, a: TapePosition, axis: usize, start: usize, len: usize) -> Result<TapePosition> {
        let (r, c) = self.dims(a);
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::dim(
                "slice",
                format!("{start}..{} on axis {axis} of {r}x{c}", start + len),
            ));
        }
        let v = self.value(a);
        let (shape, out) = if axis == 0 {
            (vec![len, c], v[start * c..(start + len) * c].to_vec())
        } else {
            let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
            (vec![r, len], out)
        };
        self.finish("slice", shape, out, Op::Slice { a: a.0, axis, start }, &[a])
    }

    /// Mean cross-entropy of the listed `(row, class)` targets under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: TapePosition, targets: &[(usize, usize)]) -> Result<TapePosition> {
        let (r, c) = self.dims(logits);
        if targets.is_empty() {
            return Err(Error::dim("cross_entropy", "no targets"));
        }
        if let Some(t) = targets.iter().find(|t| t.0 >= r || t.1 >= c) {
            return Err(Error::dim("cross_entropy", format!("target {t:?} outside {r}x{c}")));
        }
        let v = self.value(logits);
        let mut probs = Vec::with_capacity(targets.len() * c);
        let mut loss = 0.0;
        for &(row, cls) in targets {
            let mut p = v[row * c..(row + 1) * c].to_vec();
            loss -= kernels::log_softmax_at(&p, cls);
            kernels::softmax_in_place(&mut p);
            probs.extend_from_slice(&p);
        }
        loss /= targets.len() as f64;
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            probs,
        };
        self.finish("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    pub fn sum(&mut self, a: TapePosition) -> Result<TapePosition> {
        let s = self.value(a).iter().sum();
        self.finish("sum", vec![1], vec![s], Op::Sum { a: a.0 }, &[a])
    }

    /// Elementwise `a · scale + shift` with constant, full-shape `scale` and `shift`.
    pub fn scale_shift(&mut self, a: TapePosition, scale: Vec<f64>, shift: &[f64]) -> Result<TapePosition> {
        let n = self.value(a).len();
        if scale.len() != n || shift.len() != n {
            return Err(Error::dim(
                "scale_shift",
                format!("input {n}, scale {}, shift {}", scale.len(), shift.len()),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&scale)
            .zip(shift)
            .map(|((x, s), b)| x * s + b)
            .collect();
        self.finish("scale_shift", self.shape(a).to_vec(), out, Op::ScaleShift { a: a.0, scale }, &[a])
    }

    /// Copy of `base` with row `rows[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: TapePosition, rows: &[usize], src: TapePosition) -> Result<TapePosition> {
        let (r, c) = self.dims(base);
        let (sr, sc) = self.dims(src);
        if sc != c || sr != rows.len() || rows.iter().any(|&x| x >= r) {
            return Err(Error::dim(
                "scatter_rows",
                format!("base {r}x{c}, src {sr}x{sc}, rows {rows:?}"),
            ));
        }
        let mut out = self.value(base).to_vec();
        let s = self.value(src);
        for (i, &row) in rows.iter().enumerate() {
            out[row * c..(row + 1) * c].copy_from_slice(&s[i * c..(i + 1) * c]);
        }
        let op = Op::ScatterRows {
            base: base.0,
            rows: rows.to_vec(),
            src: src.0,
        };
        self.finish("scatter_rows", vec![r, c], out, op, &[base, src])
    }

    /// Multi-head attention of `q` over `k`/`v` under `pattern`.
    pub fn attention(
        &mut self,
        q: TapePosition,
        k: TapePosition,
        v: TapePosition,
        heads: usize,
        pattern: AttnPattern,
    ) -> Result<TapePosition> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if heads == 0
            || d % heads != 0
            || dk != d
            || self.dims(v) != (nk, d)
            || pattern.required_keys(nq) != nk
            || pattern.n_queries().is_some_and(|n| n != nq)
        {
            return Err(Error::dim(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, heads {heads}, pattern {pattern:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let (out, probs) = kernels::attention_forward(self.value(q), self.value(k), self.value(v), nq, d, heads, &pattern);
        let op = Op::Attention {
            q: q.0,
            k: k.0,
            v: v.0,
            heads,
            pattern,
            probs,
        };
        self.finish("attention", vec![nq, d], out, op, &[q, k, v])
    }

    /// Vector of the listed `(row, col)` entries.
    pub fn pick(&mut self, a: TapePosition, idx: &[(usize, usize)]) -> Result<TapePosition> {
        let (r, c) = self.dims(a);
        if let Some(bad) = idx.iter().find(|t| t.0 >= r || t.1 >= c) {
            return Err(Error::dim("pick", format!("{bad:?} outside {r}x{c}")));
        }
        let v = self.value(a);
        let out = idx.iter().map(|&(i, j)| v[i * c + j]).collect();
        self.finish("pick", vec![idx.len()], out, Op::Pick { a: a.0, idx: idx.to_vec() }, &[a])
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root; leaf gradients accumulate.
    pub fn backward(&mut self, root: TapePosition) -> Result<()> {
        if self.node(root).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.node(root).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let needs = |p: usize| nodes[p].requires_grad;
        match &node.op {
            Op::Leaf => {
                add_into(&mut self.leaf_grads[i], g);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (ar, ac) = dims2(&nodes[a].shape);
                let (br, bc) = dims2(&nodes[b].shape);
                let av = MatView::new(&nodes[a].value, ar, ac).maybe_t(ta);
                let bv = MatView::new(&nodes[b].value, br, bc).maybe_t(tb);
                let gv = MatView::new(g, av.rows, bv.cols);
                if needs(a) {
                    let buf = slot_mut(&mut grads[a], ar * ac);
                    if ta {
                        kernels::gemm(bv, gv.t(), buf, 1.0);
                    } else {
                        kernels::gemm(gv, bv.t(), buf, 1.0);
                    }
                }
                if needs(b) {
                    let buf = slot_mut(&mut grads[b], br * bc);
                    if tb {
                        kernels::gemm(gv.t(), av, buf, 1.0);
                    } else {
                        kernels::gemm(av.t(), gv, buf, 1.0);
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if needs(p) {
                        add_into(&mut grads[p], g);
                    }
                }
            }
            Op::AddRow { x, row } => {
                if needs(*x) {
                    add_into(&mut grads[*x], g);
                }
                if needs(*row) {
                    let c = nodes[*row].value.len();
                    let buf = slot_mut(&mut grads[*row], c);
                    for gr in g.chunks_exact(c.max(1)) {
                        buf.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let bv = &nodes[b].value;
                    let buf = slot_mut(&mut grads[a], g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] * bv[k];
                    }
                }
                if needs(b) {
                    let av = &nodes[a].value;
                    let buf = slot_mut(&mut grads[b], g.len());
                    for k in 0..g.len() {
                        buf[k] += g[k] * av[k];
                    }
                }
            }
            Op::Scale { a, s } => {
                let buf = slot_mut(&mut grads[*a], g.len());
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
            }
            Op::Gelu { a } => {
                let x = &nodes[*a].value;
                let buf = slot_mut(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * kernels::gelu_grad(x[k]);
                }
            }
            Op::LayerNorm { x, g: gamma, b } => {
                let (x, gamma, b) = (*x, *gamma, *b);
                let (_, c) = dims2(&nodes[x].shape);
                let mut dx = needs(x).then(|| vec![0.0; g.len()]);
                let mut dg = needs(gamma).then(|| vec![0.0; c]);
                let mut db = needs(b).then(|| vec![0.0; c]);
                kernels::layer_norm_backward(
                    &nodes[x].value,
                    c,
                    &nodes[gamma].value,
                    g,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (p, d) in [(x, dx), (gamma, dg), (b, db)] {
                    if let Some(d) = d {
                        add_into(&mut grads[p], &d);
                    }
                }
            }
            Op::Softmax { a } => {
                let (_, c) = dims2(&node.shape);
                let y = &node.value;
                let buf = slot_mut(&mut grads[*a], g.len());
                for ((yr, gr), br) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(buf.chunks_exact_mut(c)) {
                    let dotp: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        br[k] += yr[k] * (gr[k] - dotp);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (r, c) = dims2(&nodes[*table].shape);
                let buf = slot_mut(&mut grads[*table], r * c);
                for (k, &id) in ids.iter().enumerate() {
                    let dst = &mut buf[id * c..(id + 1) * c];
                    dst.iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = dims2(&nodes[p].shape);
                    if needs(p) {
                        let buf = slot_mut(&mut grads[p], pr * pc);
                        if *axis == 0 {
                            buf.iter_mut()
                                .zip(&g[offset * cols..(offset + pr) * cols])
                                .for_each(|(a, b)| *a += b);
                        } else {
                            for r in 0..rows {
                                let src = &g[r * cols + offset..r * cols + offset + pc];
                                buf[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { a, axis, start } => {
                let (r, c) = dims2(&nodes[*a].shape);
                let (_, oc) = dims2(&node.shape);
                let buf = slot_mut(&mut grads[*a], r * c);
                if *axis == 0 {
                    buf[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                } else {
                    for i in 0..r {
                        buf[i * c + start..i * c + start + oc]
                            .iter_mut()
                            .zip(&g[i * oc..(i + 1) * oc])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (r, c) = dims2(&nodes[*logits].shape);
                let w = g[0] / targets.len() as f64;
                let buf = slot_mut(&mut grads[*logits], r * c);
                for (k, &(row, cls)) in targets.iter().enumerate() {
                    let p = &probs[k * c..(k + 1) * c];
                    let dst = &mut buf[row * c..(row + 1) * c];
                    for j in 0..c {
                        dst[j] += w * (p[j] - if j == cls { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::Sum { a } => {
                let n = nodes[*a].value.len();
                let buf = slot_mut(&mut grads[*a], n);
                buf.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::ScaleShift { a, scale } => {
                let buf = slot_mut(&mut grads[*a], g.len());
                for k in 0..g.len() {
                    buf[k] += g[k] * scale[k];
                }
            }
            Op::ScatterRows { base, rows, src } => {
                let (_, c) = dims2(&node.shape);
                if needs(*base) {
                    let mut gb = g.to_vec();
                    for &row in rows {
                        gb[row * c..(row + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                    add_into(&mut grads[*base], &gb);
                }
                if needs(*src) {
                    let buf = slot_mut(&mut grads[*src], rows.len() * c);
                    for (k, &row) in rows.iter().enumerate() {
                        buf[k * c..(k + 1) * c]
                            .iter_mut()
                            .zip(&g[row * c..(row + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Attention { q, k, v, heads, pattern, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let (nq, d) = dims2(&nodes[q].shape);
                let nk = dims2(&nodes[k].shape).0;
                let mut dq = needs(q).then(|| vec![0.0; nq * d]);
                let mut dk = needs(k).then(|| vec![0.0; nk * d]);
                let mut dv = needs(v).then(|| vec![0.0; nk * d]);
                kernels::attention_backward(
                    &nodes[q].value,
                    &nodes[k].value,
                    &nodes[v].value,
                    probs,
                    g,
                    nq,
                    d,
                    *heads,
                    pattern,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                    dv.as_deref_mut(),
                );
                for (p, dd) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(dd) = dd {
                        add_into(&mut grads[p], &dd);
                    }
                }
            }
            Op::Pick { a, idx } => {
                let (r, c) = dims2(&nodes[*a].shape);
                let buf = slot_mut(&mut grads[*a], r * c);
                for (k, &(i, j)) in idx.iter().enumerate() {
                    buf[i * c + j] += g[k];
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let eye = t.leaf(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let a_data = vec![1.5, -2.0, 3.0, 0.25, 7.0, -1.0, 4.0, 4.5, 0.0];
        let a = t.leaf(Tensor::matrix(3, 3, a_data.clone()).unwrap());
        let y = t.matmul(eye, a).unwrap();
        assert_eq!(t.value(y), &a_data[..]);
    }

    #[test]
    fn uniform_softmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, -2.0]).with_grad());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn uniform_cross_entropy_grad() {
        let v = 5;
        for target in 0..v {
            let mut t = Tape::new();
            let logits = t.leaf(Tensor::matrix(1, v, vec![0.3; v]).unwrap().with_grad());
            let loss = t.cross_entropy(logits, &[(0, target)]).unwrap();
            t.backward(loss).unwrap();
            let expect: Vec<f64> = (0..v)
                .map(|i| 1.0 / v as f64 - if i == target { 1.0 } else { 0.0 })
                .collect();
            assert!(close(t.grad(logits).unwrap(), &expect, 1e-15));
        }
    }

    #[test]
    fn shared_subexpression_doubles_grad() {
        // f = g(x) + g(x) with g = sum(gelu(x))
        let data = vec![0.3, -1.2, 2.0];
        let mut single = Tape::new();
        let x1 = single.leaf(Tensor::vector(data.clone()).with_grad());
        let g1 = single.gelu(x1).unwrap();
        let s1 = single.sum(g1).unwrap();
        single.backward(s1).unwrap();

        let mut double = Tape::new();
        let x2 = double.leaf(Tensor::vector(data).with_grad());
        let g2 = double.gelu(x2).unwrap();
        let s2 = double.sum(g2).unwrap();
        let f = double.add(s2, s2).unwrap();
        double.backward(f).unwrap();
        let twice: Vec<f64> = single.grad(x1).unwrap().iter().map(|g| 2.0 * g).collect();
        assert_eq!(double.grad(x2).unwrap(), &twice[..]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = t.scale(x, 2.0).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1e308]));
        assert!(matches!(t.scale(x, 10.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_layer_norm_centres() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| ((i * 7919) % 13) as f64 * 0.37 - 2.0).collect();
        let x = t.leaf(Tensor::matrix(4, 6, data).unwrap());
        let s = t.softmax(x).unwrap();
        for row in t.value(s).chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let g = t.leaf(Tensor::vector(vec![1.0; 6]));
        let b = t.leaf(Tensor::vector(vec![0.0; 6]));
        let ln = t.layer_norm(x, g, b).unwrap();
        for row in t.value(ln).chunks(6) {
            assert!((row.iter().sum::<f64>() / 6.0).abs() <= 1e-9);
        }
    }
}
