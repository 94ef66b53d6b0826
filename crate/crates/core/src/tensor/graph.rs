use std::borrow::Cow;
use std::collections::BTreeMap;

use super::kernels::{self, matmul, matmul_grad_a, matmul_grad_b};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Read-only view of one operand handed to a [`CustomOp`].
#[derive(Debug, Clone, Copy)]
pub struct OpInput<'g, T> {
    pub shape: &'g [usize],
    pub values: &'g [T],
}

/// A fused operation with a hand-written backward pass.
///
/// `forward` returns `(shape, values, saved)`; `saved` is handed back to
/// `backward` unchanged. Both must be pure functions of their arguments so the
/// graph can be replayed.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[OpInput<'_, T>]) -> Result<(Vec<usize>, Vec<T>, Vec<T>)>;

    /// Returns one gradient contribution per input; entries whose
    /// `needs_grad` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[OpInput<'_, T>],
        output: &[T],
        saved: &[T],
        grad_out: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<'a, T: Real> {
    Leaf { name: Option<String> },
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { input: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    GatherRows { input: Var, index: Vec<usize> },
    Softmax { input: Var, mask: Option<Vec<bool>> },
    Dropout { input: Var, mask: Vec<T> },
    WeightedSum { inputs: Vec<Var>, weights: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T> + 'a> },
}

impl<T: Real> Op<'_, T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::ScaleBy(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _) | Op::Sigmoid(x) | Op::Tanh(x) | Op::Sum(x) | Op::Reshape(x) => vec![*x],
            Op::SliceCols { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Softmax { input, .. }
            | Op::Dropout { input, .. } => vec![*input],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::WeightedSum { inputs, weights } => {
                let mut v = inputs.clone();
                v.push(*weights);
                v
            }
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<'a, T: Real> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    saved: Vec<T>,
    op: Op<'a, T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients<T> {
    map: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Vec<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => {
                    for (a, &b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Global L2 norm over every entry, accumulated in double precision.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// A forward computation recorded in topological order.
///
/// Leaves may borrow their values (parameters) for the graph lifetime `'a`.
#[derive(Default)]
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mat_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push_leaf(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [T]>,
        name: Option<String>,
        requires_grad: bool,
    ) -> Result<Var> {
        let expected = numel(&shape);
        if expected != value.len() {
            return Err(TensorError::ValueCount {
                shape,
                expected,
                actual: value.len(),
            });
        }
        self.nodes.push(Node {
            shape,
            value,
            saved: Vec::new(),
            op: Op::Leaf { name },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        self.push_leaf(shape, Cow::Owned(values), None, false)
    }

    /// An unnamed leaf that receives gradients (read back via [`Graph::grad`]).
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        self.push_leaf(shape, Cow::Owned(values), None, true)
    }

    /// A named leaf borrowing a parameter tensor; gradients are reported under
    /// `name` when the tensor is trainable.
    pub fn param(&mut self, name: impl Into<String>, tensor: &'a Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_leaf(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.values()),
            Some(name.into()),
            requires_grad,
        )
        .expect("tensor invariant guarantees matching length")
    }

    fn push(&mut self, op: Op<'a, T>) -> Result<Var> {
        let (shape, value, saved) = self.eval(&op)?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            saved,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(())
    }

    fn eval(&self, op: &Op<'a, T>) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
        let val = |v: &Var| -> &[T] { &self.nodes[v.0].value };
        let shp = |v: &Var| -> &[usize] { &self.nodes[v.0].shape };
        let map = |x: &Var, f: &dyn Fn(T) -> T| -> (Vec<usize>, Vec<T>, Vec<T>) {
            (shp(x).to_vec(), val(x).iter().map(|&v| f(v)).collect(), Vec::new())
        };
        Ok(match op {
            Op::Leaf { .. } => {
                return Err(TensorError::Invalid {
                    op: "eval",
                    msg: "leaves have no forward rule".into(),
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(a), shp(b));
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    return Err(TensorError::ShapeMismatch {
                        op: "matmul",
                        left: sa.to_vec(),
                        right: sb.to_vec(),
                    });
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                (vec![m, n], matmul(val(a), val(b), m, k, n), Vec::new())
            }
            Op::Add(a, b) => {
                self.same_shape("add", *a, *b)?;
                let v = val(a).iter().zip(val(b)).map(|(&x, &y)| x + y).collect();
                (shp(a).to_vec(), v, Vec::new())
            }
            Op::Mul(a, b) => {
                self.same_shape("mul", *a, *b)?;
                let v = val(a).iter().zip(val(b)).map(|(&x, &y)| x * y).collect();
                (shp(a).to_vec(), v, Vec::new())
            }
            Op::AddBias(x, b) => {
                let (m, n) = mat_dims(shp(x));
                if numel(shp(b)) != n || shp(x).len() != 2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "add_bias",
                        left: shp(x).to_vec(),
                        right: shp(b).to_vec(),
                    });
                }
                let mut v = val(x).to_vec();
                for row in v.chunks_exact_mut(n.max(1)).take(m) {
                    for (r, &bv) in row.iter_mut().zip(val(b)) {
                        *r += bv;
                    }
                }
                (shp(x).to_vec(), v, Vec::new())
            }
            Op::Scale(x, c) => {
                let c = *c;
                map(x, &move |v| v * c)
            }
            Op::ScaleBy(x, s) => {
                if numel(shp(s)) != 1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "scale_by",
                        left: shp(x).to_vec(),
                        right: shp(s).to_vec(),
                    });
                }
                let c = val(s)[0];
                map(x, &move |v| v * c)
            }
            Op::Sigmoid(x) => map(x, &kernels::sigmoid),
            Op::Tanh(x) => map(x, &|v: T| v.tanh()),
            Op::Sum(x) => (vec![1], vec![val(x).iter().copied().sum()], Vec::new()),
            Op::Reshape(_) => unreachable!("reshape is evaluated in Graph::reshape"),
            Op::ConcatCols(xs) => {
                let first = xs.first().ok_or_else(|| TensorError::Invalid {
                    op: "concat_cols",
                    msg: "no inputs".into(),
                })?;
                let m = mat_dims(shp(first)).0;
                let mut widths = Vec::with_capacity(xs.len());
                for x in xs {
                    let (mx, nx) = mat_dims(shp(x));
                    if mx != m || shp(x).len() != 2 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat_cols",
                            left: shp(first).to_vec(),
                            right: shp(x).to_vec(),
                        });
                    }
                    widths.push(nx);
                }
                let total: usize = widths.iter().sum();
                let mut v = Vec::with_capacity(m * total);
                for i in 0..m {
                    for (x, &w) in xs.iter().zip(&widths) {
                        v.extend_from_slice(&val(x)[i * w..(i + 1) * w]);
                    }
                }
                (vec![m, total], v, Vec::new())
            }
            Op::SliceCols { input, start, len } => {
                let (m, n) = mat_dims(shp(input));
                if start + len > n || shp(input).len() != 2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "slice_cols",
                        left: shp(input).to_vec(),
                        right: vec![*start, *len],
                    });
                }
                let x = val(input);
                let mut v = Vec::with_capacity(m * len);
                for i in 0..m {
                    v.extend_from_slice(&x[i * n + start..i * n + start + len]);
                }
                (vec![m, *len], v, Vec::new())
            }
            Op::ConcatRows(xs) => {
                let first = xs.first().ok_or_else(|| TensorError::Invalid {
                    op: "concat_rows",
                    msg: "no inputs".into(),
                })?;
                let n = mat_dims(shp(first)).1;
                let mut rows = 0;
                let mut v = Vec::new();
                for x in xs {
                    let (mx, nx) = mat_dims(shp(x));
                    if nx != n || shp(x).len() != 2 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat_rows",
                            left: shp(first).to_vec(),
                            right: shp(x).to_vec(),
                        });
                    }
                    rows += mx;
                    v.extend_from_slice(val(x));
                }
                (vec![rows, n], v, Vec::new())
            }
            Op::GatherRows { input, index } => {
                let (m, n) = mat_dims(shp(input));
                if shp(input).len() != 2 {
                    return Err(TensorError::ShapeMismatch {
                        op: "gather_rows",
                        left: shp(input).to_vec(),
                        right: vec![index.len()],
                    });
                }
                let x = val(input);
                let mut v = Vec::with_capacity(index.len() * n);
                for &r in index {
                    if r >= m {
                        return Err(TensorError::Invalid {
                            op: "gather_rows",
                            msg: format!("row {r} out of range for {m} rows"),
                        });
                    }
                    v.extend_from_slice(&x[r * n..(r + 1) * n]);
                }
                (vec![index.len(), n], v, Vec::new())
            }
            Op::Softmax { input, mask } => {
                let x = val(input);
                let v = softmax_values(x, mask.as_deref())?;
                (shp(input).to_vec(), v, Vec::new())
            }
            Op::Dropout { input, mask } => {
                if mask.len() != val(input).len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "dropout",
                        left: shp(input).to_vec(),
                        right: vec![mask.len()],
                    });
                }
                let v = val(input).iter().zip(mask).map(|(&x, &m)| x * m).collect();
                (shp(input).to_vec(), v, Vec::new())
            }
            Op::WeightedSum { inputs, weights } => {
                let w = val(weights);
                if inputs.is_empty() || w.len() != inputs.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "weighted_sum",
                        left: vec![inputs.len()],
                        right: shp(weights).to_vec(),
                    });
                }
                let mut v = vec![T::zero(); val(&inputs[0]).len()];
                for (x, &wl) in inputs.iter().zip(w) {
                    if shp(x) != shp(&inputs[0]) {
                        return Err(TensorError::ShapeMismatch {
                            op: "weighted_sum",
                            left: shp(&inputs[0]).to_vec(),
                            right: shp(x).to_vec(),
                        });
                    }
                    kernels::axpy(wl, val(x), &mut v);
                }
                (shp(&inputs[0]).to_vec(), v, Vec::new())
            }
            Op::Custom { inputs, op } => {
                let views: Vec<OpInput<'_, T>> = inputs
                    .iter()
                    .map(|v| OpInput {
                        shape: shp(v),
                        values: val(v),
                    })
                    .collect();
                op.forward(&views)?
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.push(Op::Scale(x, factor))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.push(Op::ScaleBy(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let from = &self.nodes[x.0].shape;
        if numel(from) != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: from.clone(),
                right: shape,
            });
        }
        let value = self.nodes[x.0].value.to_vec();
        let requires_grad = self.nodes[x.0].requires_grad;
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            saved: Vec::new(),
            op: Op::Reshape(x),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { input: x, start, len })
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn split_cols(&mut self, x: Var, widths: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    /// Row `r` of the output is row `index[r]` of `x`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { input: x, index })
    }

    /// Softmax over a vector; masked-out (`false`) positions output exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        if let Some(m) = &mask {
            if m.len() != self.nodes[x.0].value.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax",
                    left: self.nodes[x.0].shape.clone(),
                    right: vec![m.len()],
                });
            }
        }
        self.push(Op::Softmax { input: x, mask })
    }

    /// Multiplies by a precomputed keep mask (already scaled by `1 / (1 - p)`).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        self.push(Op::Dropout { input: x, mask })
    }

    /// Inverted dropout with rate `p`, drawing the mask from `rng`.
    pub fn dropout<R: rand::Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = T::cast(1.0 / (1.0 - p));
        let mask = (0..self.nodes[x.0].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.dropout_mask(x, mask)
    }

    /// `Σ_l weights[l] · inputs[l]` over same-shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        self.push(Op::WeightedSum {
            inputs: inputs.to_vec(),
            weights,
        })
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T> + 'a>) -> Result<Var> {
        self.push(Op::Custom {
            inputs: inputs.to_vec(),
            op,
        })
    }

    /// Reverse-mode pass from a scalar `loss`. Returns gradients of every
    /// named trainable leaf; per-node gradients stay available via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = &self.nodes[loss.0].shape;
        if numel(loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf { name: Some(name) }, Some(g), true) = (&node.op, g, node.requires_grad) {
                match out.map.get_mut(name) {
                    Some(acc) => kernels::axpy(T::one(), g, acc),
                    None => {
                        out.map.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<'a, T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| -> &[T] { &nodes[v.0].value };
        let shp = |v: &Var| -> &[usize] { &nodes[v.0].shape };
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if nodes[v.0].requires_grad {
                let n = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                f(buf);
            }
        };
        let y: &[T] = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (k, n) = (shp(a)[1], shp(b)[1]);
                acc(*a, &mut |ga| matmul_grad_a(g, val(b), ga, k, n));
                acc(*b, &mut |gb| matmul_grad_b(val(a), g, gb, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(T::one(), g, ga));
                acc(*b, &mut |gb| kernels::axpy(T::one(), g, gb));
            }
            Op::Mul(a, b) => {
                acc(*a, &mut |ga| {
                    for ((gv, &gi), &bv) in ga.iter_mut().zip(g).zip(val(b)) {
                        *gv += gi * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((gv, &gi), &av) in gb.iter_mut().zip(g).zip(val(a)) {
                        *gv += gi * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| kernels::axpy(T::one(), g, gx));
                let n = numel(shp(b));
                acc(*b, &mut |gb| {
                    for row in g.chunks_exact(n.max(1)) {
                        kernels::axpy(T::one(), row, gb);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |gx| kernels::axpy(*c, g, gx)),
            Op::ScaleBy(x, s) => {
                let c = val(s)[0];
                acc(*x, &mut |gx| kernels::axpy(c, g, gx));
                acc(*s, &mut |gs| gs[0] += kernels::dot(g, val(x)));
            }
            Op::Sigmoid(x) => acc(*x, &mut |gx| {
                for ((gv, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *gv += gi * yi * (T::one() - yi);
                }
            }),
            Op::Tanh(x) => acc(*x, &mut |gx| {
                for ((gv, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                    *gv += gi * (T::one() - yi * yi);
                }
            }),
            Op::Sum(x) => acc(*x, &mut |gx| {
                for gv in gx.iter_mut() {
                    *gv += g[0];
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |gx| kernels::axpy(T::one(), g, gx)),
            Op::ConcatCols(xs) => {
                let m = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for x in xs {
                    let w = shp(x)[1];
                    acc(*x, &mut |gx| {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + w];
                            kernels::axpy(T::one(), src, &mut gx[i * w..(i + 1) * w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { input, start, len } => {
                let n = shp(input)[1];
                acc(*input, &mut |gx| {
                    for (i, row) in g.chunks_exact((*len).max(1)).enumerate() {
                        kernels::axpy(T::one(), row, &mut gx[i * n + start..i * n + start + len]);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = numel(shp(x));
                    acc(*x, &mut |gx| kernels::axpy(T::one(), &g[offset..offset + n], gx));
                    offset += n;
                }
            }
            Op::GatherRows { input, index } => {
                let n = shp(input)[1];
                acc(*input, &mut |gx| {
                    for (row, &r) in g.chunks_exact(n.max(1)).zip(index) {
                        kernels::axpy(T::one(), row, &mut gx[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Softmax { input, mask } => acc(*input, &mut |gx| {
                let inner = kernels::dot(g, y);
                for (i, gv) in gx.iter_mut().enumerate() {
                    if mask.as_ref().is_none_or(|m| m[i]) {
                        *gv += y[i] * (g[i] - inner);
                    }
                }
            }),
            Op::Dropout { input, mask } => acc(*input, &mut |gx| {
                for ((gv, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *gv += gi * m;
                }
            }),
            Op::WeightedSum { inputs, weights } => {
                let w = val(weights).to_vec();
                for (x, &wl) in inputs.iter().zip(&w) {
                    acc(*x, &mut |gx| kernels::axpy(wl, g, gx));
                }
                acc(*weights, &mut |gw| {
                    for (gl, x) in gw.iter_mut().zip(inputs) {
                        *gl += kernels::dot(g, val(x));
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let views: Vec<OpInput<'_, T>> = inputs
                    .iter()
                    .map(|v| OpInput {
                        shape: shp(v),
                        values: val(v),
                    })
                    .collect();
                let needs: Vec<bool> = inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
                let contribs = op.backward(&views, y, &node.saved, g, &needs);
                for (x, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        acc(*x, &mut |gx| kernels::axpy(T::one(), &c, gx));
                    }
                }
            }
        }
    }

    /// Re-evaluates every recorded operation on its recorded inputs and
    /// reports whether each output is reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        for node in &self.nodes {
            match &node.op {
                Op::Leaf { .. } => continue,
                Op::Reshape(x) => {
                    if !bit_equal(&node.value, &self.nodes[x.0].value) {
                        return Ok(false);
                    }
                }
                op => {
                    let (shape, value, saved) = self.eval(op)?;
                    if shape != node.shape || !bit_equal(&value, &node.value) || !bit_equal(&saved, &node.saved) {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    /// True when every node's inputs were recorded before it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.op.inputs().iter().all(|v| v.0 < i))
    }
}

fn bit_equal<T: Real>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
}

/// Masked, max-subtracted softmax over a flat slice.
pub(crate) fn softmax_values<T: Real>(x: &[T], mask: Option<&[bool]>) -> Result<Vec<T>> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| keep(i))
        .map(|i| x[i])
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(TensorError::AllMasked)?;
    let mut out: Vec<T> = (0..x.len())
        .map(|i| if keep(i) { (x[i] - max).exp() } else { T::zero() })
        .collect();
    let total: T = out.iter().copied().sum();
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(out)
}
