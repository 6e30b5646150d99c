//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node owning its output buffer and returns a
//! [`Var`] handle. [`Tape::backward`] replays the tape in reverse from a
//! scalar root, accumulating gradients additively into per-node slots.
//! Nodes that cannot reach a parameter carry no backward rule and are
//! skipped, so gradients never leak into subgraphs that do not require them.
//!
//! Layers with bespoke derivatives (convolutions, sub-batch normalization,
//! embedding bags, losses) register themselves through [`Tape::custom`] with
//! a [`BackwardRule`] implementation.

use crate::error::{Error, Result};
use crate::kernels::{add_assign, axpy, dot, relu_s, sigmoid_s, tanh_s};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Borrowed view of a node's value buffer and shape, as seen by backward
/// rules.
#[derive(Clone, Copy)]
pub struct TapeView<'a, T> {
    pub values: &'a [T],
    pub shape: &'a [usize],
}

/// Reverse rule for one tape node: given the gradient flowing into the
/// node's output, add each input's contribution into `input_grads` (zeroed
/// buffers, one per input, in input order).
pub trait BackwardRule<T: Scalar> {
    fn backward(
        &self,
        grad_out: &[T],
        output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    );
}

struct Node<T: Scalar> {
    values: Vec<T>,
    shape: Vec<usize>,
    parents: Vec<Var>,
    rule: Option<Box<dyn BackwardRule<T>>>,
    requires_grad: bool,
}

/// Linear autodiff tape. One training step = one tape.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf. The tensor's
    /// `requires_grad` flag decides whether gradients flow to it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t.values().to_vec(), t.shape().to_vec(), t.requires_grad())
    }

    /// A leaf that never receives gradients (inputs, masks, constants).
    pub fn constant(&mut self, values: Vec<T>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "constant: shape {:?} wants {} elements, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(self.push_leaf(values, shape.to_vec(), false))
    }

    fn push_leaf(&mut self, values: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { values, shape, parents: Vec::new(), rule: None, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation node. The rule is dropped (and backward skipped)
    /// when no input requires gradients.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        values: Vec<T>,
        shape: Vec<usize>,
        rule: Box<dyn BackwardRule<T>>,
    ) -> Var {
        let requires = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            values,
            shape,
            parents: inputs.to_vec(),
            rule: if requires { Some(rule) } else { None },
            requires_grad: requires,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn values(&self, v: Var) -> &[T] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Snapshot of a node as a tensor, gradient included.
    pub fn extract(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::from_vec(&node.shape, node.values.clone())
            .expect("tape node shape is consistent by construction")
            .with_requires_grad(node.requires_grad);
        t.set_grad(self.grads[v.0].clone());
        t
    }

    /// Clears all gradient slots. Needed between repeated backward passes
    /// over the same tape (e.g. saliency probes per output position),
    /// because backward accumulates additively.
    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively into
    /// every node that requires them and is reachable from the root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.numel(root) != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Contract(
                "backward root does not depend on any gradient-requiring leaf".into(),
            ));
        }
        // Work in a pass-local adjoint buffer so each call contributes
        // exactly one unit of root gradient no matter what the persistent
        // slots already hold.
        let mut adjoint: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        adjoint[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            if self.nodes[id].requires_grad {
                match &mut self.grads[id] {
                    Some(slot) => add_assign(slot, &g),
                    slot => *slot = Some(g.clone()),
                }
            }
            if self.nodes[id].rule.is_none() {
                continue;
            }
            let parents = self.nodes[id].parents.clone();
            let mut parent_grads: Vec<Vec<T>> = parents
                .iter()
                .map(|p| vec![T::zero(); self.nodes[p.0].values.len()])
                .collect();
            {
                let node = &self.nodes[id];
                let inputs: Vec<TapeView<'_, T>> = parents
                    .iter()
                    .map(|p| {
                        let n = &self.nodes[p.0];
                        TapeView { values: &n.values, shape: &n.shape }
                    })
                    .collect();
                let output = TapeView { values: &node.values, shape: &node.shape };
                node.rule.as_ref().unwrap().backward(&g, output, &inputs, &mut parent_grads);
            }
            for (p, pg) in parents.iter().zip(parent_grads) {
                if self.nodes[p.0].requires_grad {
                    match &mut adjoint[p.0] {
                        Some(slot) => add_assign(slot, &pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(())
    }

    // ---- built-in operations ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    /// Elementwise binary op. `b` may have the same shape as `a` or a
    /// trailing-suffix shape of it (e.g. per-channel bias against
    /// `[batch, width, channels]`), in which case it is tiled over the
    /// leading dimensions.
    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if !ashape.ends_with(bshape) {
            return Err(Error::Shape(format!(
                "binary op: {:?} does not accept operand of shape {:?}",
                ashape, bshape
            )));
        }
        let bn = self.numel(b);
        if bn == 0 {
            return Err(Error::Shape("binary op: empty right operand".into()));
        }
        let bv = &self.nodes[b.0].values;
        let av = &self.nodes[a.0].values;
        let mut out = av.clone();
        match kind {
            BinKind::Add => {
                for chunk in out.chunks_mut(bn) {
                    for (o, &x) in chunk.iter_mut().zip(bv) {
                        *o = *o + x;
                    }
                }
            }
            BinKind::Sub => {
                for chunk in out.chunks_mut(bn) {
                    for (o, &x) in chunk.iter_mut().zip(bv) {
                        *o = *o - x;
                    }
                }
            }
            BinKind::Mul => {
                for chunk in out.chunks_mut(bn) {
                    for (o, &x) in chunk.iter_mut().zip(bv) {
                        *o = *o * x;
                    }
                }
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.custom(&[a, b], out, shape, Box::new(BinRule { kind })))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Tanh)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let out: Vec<T> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| match kind {
                UnaryKind::Relu => relu_s(x),
                UnaryKind::Sigmoid => sigmoid_s(x),
                UnaryKind::Tanh => tanh_s(x),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.custom(&[a], out, shape, Box::new(UnaryRule { kind }))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out: Vec<T> = self.nodes[a.0].values.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.custom(&[a], out, shape, Box::new(ScaleRule { c }))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(Error::Shape(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                ashape, bshape
            )));
        }
        let (m, k, n) = (ashape[0], ashape[1], bshape[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(row, av[i * k + p], &bv[p * n..(p + 1) * n]);
            }
        }
        Ok(self.custom(&[a, b], out, vec![m, n], Box::new(MatmulRule { m, k, n })))
    }

    pub fn reduce_sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Sum)
    }

    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Mean)
    }

    pub fn reduce_max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, ReduceKind::Max)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceKind::Sum).expect("full reduction cannot fail")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, ReduceKind::Mean).expect("full reduction cannot fail")
    }

    fn reduce(&mut self, a: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&ax| ax >= rank) {
            return Err(Error::Contract(format!(
                "reduce: invalid axes {:?} for rank {}",
                axes, rank
            )));
        }
        if sorted.is_empty() && rank > 0 {
            return Err(Error::Contract("reduce: empty axis list".into()));
        }
        let reduced: Vec<bool> = (0..rank).map(|d| sorted.binary_search(&d).is_ok()).collect();
        let out_shape: Vec<usize> = (0..rank).filter(|&d| !reduced[d]).map(|d| in_shape[d]).collect();
        let out_n: usize = out_shape.iter().product();
        let n_red: usize = sorted.iter().map(|&d| in_shape[d]).product();
        if n_red == 0 {
            return Err(Error::Shape("reduce over an empty axis".into()));
        }
        // Map each flat input index to its flat output index.
        let mut out_strides = vec![0usize; rank];
        {
            let mut s = 1;
            for d in (0..rank).rev() {
                if !reduced[d] {
                    out_strides[d] = s;
                    s *= in_shape[d];
                }
            }
        }
        let av = &self.nodes[a.0].values;
        let total = av.len();
        let mut out = match kind {
            ReduceKind::Max => vec![T::neg_infinity(); out_n],
            _ => vec![T::zero(); out_n],
        };
        let mut argmax = vec![0usize; if matches!(kind, ReduceKind::Max) { out_n } else { 0 }];
        let mut coords = vec![0usize; rank];
        for flat in 0..total {
            let mut oi = 0;
            for d in 0..rank {
                if !reduced[d] {
                    oi += coords[d] * out_strides[d];
                }
            }
            let x = av[flat];
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => out[oi] = out[oi] + x,
                ReduceKind::Max => {
                    // Strict comparison keeps the first maximal element.
                    if x > out[oi] {
                        out[oi] = x;
                        argmax[oi] = flat;
                    }
                }
            }
            for d in (0..rank).rev() {
                coords[d] += 1;
                if coords[d] < in_shape[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
        if matches!(kind, ReduceKind::Mean) {
            let inv = T::one() / T::from(n_red).unwrap();
            for o in &mut out {
                *o = *o * inv;
            }
        }
        let rule = ReduceRule { kind, in_shape, reduced, out_strides, n_red, argmax };
        Ok(self.custom(&[a], out, out_shape, Box::new(rule)))
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

struct BinRule {
    kind: BinKind,
}

impl<T: Scalar> BackwardRule<T> for BinRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let bn = inputs[1].values.len();
        let (da, db) = {
            let (l, r) = input_grads.split_at_mut(1);
            (&mut l[0], &mut r[0])
        };
        match self.kind {
            BinKind::Add => {
                add_assign(da, grad_out);
                for chunk in grad_out.chunks(bn) {
                    add_assign(db, chunk);
                }
            }
            BinKind::Sub => {
                add_assign(da, grad_out);
                for chunk in grad_out.chunks(bn) {
                    for (d, &g) in db.iter_mut().zip(chunk) {
                        *d -= g;
                    }
                }
            }
            BinKind::Mul => {
                let av = inputs[0].values;
                let bv = inputs[1].values;
                for (ci, chunk) in grad_out.chunks(bn).enumerate() {
                    let abase = ci * bn;
                    for (j, &g) in chunk.iter().enumerate() {
                        da[abase + j] += g * bv[j];
                        db[j] += g * av[abase + j];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
}

struct UnaryRule {
    kind: UnaryKind,
}

impl<T: Scalar> BackwardRule<T> for UnaryRule {
    fn backward(
        &self,
        grad_out: &[T],
        output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let da = &mut input_grads[0];
        match self.kind {
            // Grad at exactly zero is zero: the input must be strictly
            // positive to pass gradient.
            UnaryKind::Relu => {
                for (i, &g) in grad_out.iter().enumerate() {
                    if inputs[0].values[i] > T::zero() {
                        da[i] += g;
                    }
                }
            }
            UnaryKind::Sigmoid => {
                for (i, &g) in grad_out.iter().enumerate() {
                    let y = output.values[i];
                    da[i] += g * y * (T::one() - y);
                }
            }
            UnaryKind::Tanh => {
                for (i, &g) in grad_out.iter().enumerate() {
                    let y = output.values[i];
                    da[i] += g * (T::one() - y * y);
                }
            }
        }
    }
}

struct ScaleRule<T> {
    c: T,
}

impl<T: Scalar> BackwardRule<T> for ScaleRule<T> {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        _inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        axpy(&mut input_grads[0], self.c, grad_out);
    }
}

struct MatmulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> BackwardRule<T> for MatmulRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        let av = inputs[0].values;
        let bv = inputs[1].values;
        let (da, db) = {
            let (l, r) = input_grads.split_at_mut(1);
            (&mut l[0], &mut r[0])
        };
        // dA[i][p] = sum_j G[i][j] * B[p][j]
        for i in 0..m {
            let g_row = &grad_out[i * n..(i + 1) * n];
            for p in 0..k {
                da[i * k + p] += dot(g_row, &bv[p * n..(p + 1) * n]);
            }
        }
        // dB[p][:] += A[i][p] * G[i][:]
        for i in 0..m {
            let g_row = &grad_out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(&mut db[p * n..(p + 1) * n], av[i * k + p], g_row);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum ReduceKind {
    Sum,
    Mean,
    Max,
}

struct ReduceRule {
    kind: ReduceKind,
    in_shape: Vec<usize>,
    reduced: Vec<bool>,
    out_strides: Vec<usize>,
    n_red: usize,
    argmax: Vec<usize>,
}

impl<T: Scalar> BackwardRule<T> for ReduceRule {
    fn backward(
        &self,
        grad_out: &[T],
        _output: TapeView<'_, T>,
        inputs: &[TapeView<'_, T>],
        input_grads: &mut [Vec<T>],
    ) {
        let da = &mut input_grads[0];
        match self.kind {
            ReduceKind::Max => {
                for (oi, &src) in self.argmax.iter().enumerate() {
                    da[src] += grad_out[oi];
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                let rank = self.in_shape.len();
                let scale = match self.kind {
                    ReduceKind::Mean => T::one() / T::from(self.n_red).unwrap(),
                    _ => T::one(),
                };
                let mut coords = vec![0usize; rank];
                for flat in 0..inputs[0].values.len() {
                    let mut oi = 0;
                    for d in 0..rank {
                        if !self.reduced[d] {
                            oi += coords[d] * self.out_strides[d];
                        }
                    }
                    da[flat] += grad_out[oi] * scale;
                    for d in (0..rank).rev() {
                        coords[d] += 1;
                        if coords[d] < self.in_shape[d] {
                            break;
                        }
                        coords[d] = 0;
                    }
                }
            }
        }
    }
}
