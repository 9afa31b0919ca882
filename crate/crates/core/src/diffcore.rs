//! Reverse-mode differentiation over a small, fixed set of vector primitives.
//!
//! Every node on a [`Tape`] holds a vector of `f64` (scalars are length-1
//! vectors). Parameters live in a flat [`ParamStore`] with named slices; a
//! [`Tape`] reads parameter values at record time and [`Tape::backward`]
//! returns a gradient aligned with the store's flat layout.
//!
//! ```
//! use cib::diffcore::{ParamStore, Tape};
//!
//! let store = ParamStore::new(vec![("w".into(), vec![2], vec![3.0, -1.0])]).unwrap();
//! let mut tape = Tape::new(&store);
//! let w = tape.param(&store, "w").unwrap();
//! let sq = tape.square(w);
//! let out = tape.sum(sq);
//! let grad = tape.backward(out, 1.0).unwrap();
//! assert_eq!(grad, vec![6.0, -2.0]);
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceInfo {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

/// Flat parameter vector with an immutable named layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    layout: Vec<SliceInfo>,
}

impl ParamStore {
    /// Builds a store from `(name, shape, values)` blocks laid out in order.
    pub fn new(blocks: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self> {
        let mut values = Vec::new();
        let mut layout: Vec<SliceInfo> = Vec::with_capacity(blocks.len());
        for (name, shape, block) in blocks {
            let len: usize = shape.iter().product();
            if len != block.len() {
                return Err(Error::dims(
                    format!("parameter block `{name}`"),
                    len,
                    block.len(),
                ));
            }
            if layout.iter().any(|s| s.name == name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter block `{name}`"
                )));
            }
            if let Some(bad) = block.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter block `{name}` contains {bad}"
                )));
            }
            layout.push(SliceInfo {
                name,
                offset: values.len(),
                len,
                shape,
            });
            values.extend(block);
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &[SliceInfo] {
        &self.layout
    }

    pub fn slice(&self, name: &str) -> Result<&SliceInfo> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownSlice(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.layout.iter().any(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let s = self.slice(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    /// Replaces all values, keeping the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::dims(
                "parameter vector",
                self.values.len(),
                values.len(),
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter {} ({}) = {}",
                k,
                self.name_of(k).unwrap_or("?"),
                values[k]
            )));
        }
        self.values = values;
        Ok(())
    }

    pub fn set(&mut self, name: &str, block: &[f64]) -> Result<()> {
        let s = self.slice(name)?.clone();
        if block.len() != s.len {
            return Err(Error::dims(
                format!("parameter block `{name}`"),
                s.len,
                block.len(),
            ));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter block `{name}`")));
        }
        self.values[s.offset..s.offset + s.len].copy_from_slice(block);
        Ok(())
    }

    /// Copy of the store with coordinate `k` replaced.
    pub fn with_value(&self, k: usize, value: f64) -> Result<Self> {
        let mut values = self.values.clone();
        values[k] = value;
        let mut out = self.clone();
        out.set_values(values)?;
        Ok(out)
    }

    /// Name of the slice containing flat coordinate `k`.
    pub fn name_of(&self, k: usize) -> Option<&str> {
        self.layout
            .iter()
            .find(|s| k >= s.offset && k < s.offset + s.len)
            .map(|s| s.name.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the input `x` and cached output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x_i)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const(Vec<f64>),
    Param {
        offset: usize,
        len: usize,
    },
    /// `w` is row-major `rows × cols`.
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
        cols: usize,
    },
    Activation(NodeId, Activation),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sum(NodeId),
    LogSumExp(NodeId),
    Gather(NodeId, usize),
    Broadcast(NodeId, usize),
    Concat(Vec<NodeId>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Recorded computation. Nodes only reference earlier nodes.
#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
}

fn compute(op: &Op, nodes: &[Node], params: &[f64]) -> Vec<f64> {
    let v = |id: &NodeId| nodes[id.0].value.as_slice();
    match op {
        Op::Const(c) => c.clone(),
        Op::Param { offset, len } => params[*offset..*offset + *len].to_vec(),
        Op::Affine {
            x,
            w,
            b,
            rows,
            cols,
        } => {
            let (x, w, b) = (v(x), v(w), v(b));
            (0..*rows)
                .map(|r| {
                    let row = &w[r * cols..(r + 1) * cols];
                    row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b[r]
                })
                .collect()
        }
        Op::Activation(a, kind) => v(a).iter().map(|&x| kind.apply(x)).collect(),
        Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
        Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
        Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
        Op::Scale(a, c) => v(a).iter().map(|x| x * c).collect(),
        Op::Shift(a, c) => v(a).iter().map(|x| x + c).collect(),
        Op::Exp(a) => v(a).iter().map(|x| x.exp()).collect(),
        Op::Ln(a) => v(a).iter().map(|x| x.ln()).collect(),
        Op::Square(a) => v(a).iter().map(|x| x * x).collect(),
        Op::Sum(a) => vec![v(a).iter().sum()],
        Op::LogSumExp(a) => vec![log_sum_exp(v(a))],
        Op::Gather(a, i) => vec![v(a)[*i]],
        Op::Broadcast(a, n) => vec![v(a)[0]; *n],
        Op::Concat(parts) => parts.iter().flat_map(|p| v(p).iter().copied()).collect(),
    }
}

impl Tape {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            param_len: store.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    fn push(&mut self, op: Op, params: &[f64]) -> NodeId {
        let value = compute(&op, &self.nodes, params);
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push_pure(&mut self, op: Op) -> NodeId {
        self.push(op, &[])
    }

    fn same_len(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.dim(a),
            self.dim(b),
            "{what}: operand lengths differ ({} vs {})",
            self.dim(a),
            self.dim(b)
        );
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push_pure(Op::Const(value))
    }

    pub fn scalar_const(&mut self, value: f64) -> NodeId {
        self.constant(vec![value])
    }

    /// Leaf reading the named slice of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let s = store.slice(name)?;
        self.param_range(store, s.offset, s.len)
    }

    /// Leaf reading `len` coordinates of `store` starting at `offset`.
    pub fn param_range(&mut self, store: &ParamStore, offset: usize, len: usize) -> Result<NodeId> {
        if store.len() != self.param_len {
            return Err(Error::dims(
                "tape parameter store",
                self.param_len,
                store.len(),
            ));
        }
        if offset + len > store.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter range {offset}..{} outside store of length {}",
                offset + len,
                store.len()
            )));
        }
        Ok(self.push(Op::Param { offset, len }, store.values()))
    }

    /// `W x + b` with `W` and `b` read from the named slices of `store`.
    pub fn affine(
        &mut self,
        store: &ParamStore,
        x: NodeId,
        w_name: &str,
        b_name: &str,
    ) -> Result<NodeId> {
        let ws = store.slice(w_name)?;
        let bs = store.slice(b_name)?;
        let (rows, cols) = match ws.shape.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "layer `{w_name}`: weight must be a matrix, shape {:?}",
                    ws.shape
                )))
            }
        };
        if self.dim(x) != cols {
            return Err(Error::dims(
                format!("layer `{w_name}` input"),
                cols,
                self.dim(x),
            ));
        }
        if bs.len != rows {
            return Err(Error::dims(
                format!("layer `{w_name}` bias `{b_name}`"),
                rows,
                bs.len,
            ));
        }
        let (w_off, w_len, b_off, b_len) = (ws.offset, ws.len, bs.offset, bs.len);
        let w = self.param_range(store, w_off, w_len)?;
        let b = self.param_range(store, b_off, b_len)?;
        Ok(self.push_pure(Op::Affine {
            x,
            w,
            b,
            rows,
            cols,
        }))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        self.push_pure(Op::Activation(x, kind))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_len(a, b, "add");
        self.push_pure(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_len(a, b, "sub");
        self.push_pure(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_len(a, b, "mul");
        self.push_pure(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_pure(Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_pure(Op::Shift(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push_pure(Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push_pure(Op::Ln(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push_pure(Op::Square(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push_pure(Op::Sum(a))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        self.push_pure(Op::LogSumExp(a))
    }

    pub fn gather(&mut self, a: NodeId, index: usize) -> NodeId {
        assert!(index < self.dim(a), "gather index {index} out of range");
        self.push_pure(Op::Gather(a, index))
    }

    /// Repeats a scalar node `len` times.
    pub fn broadcast(&mut self, a: NodeId, len: usize) -> NodeId {
        assert_eq!(self.dim(a), 1, "broadcast expects a scalar");
        self.push_pure(Op::Broadcast(a, len))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push_pure(Op::Concat(parts.to_vec()))
    }

    /// Sum of scalar nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> NodeId {
        let joined = self.concat(terms);
        self.sum(joined)
    }

    /// Gradient of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: NodeId, seed: f64) -> Result<Vec<f64>> {
        let n = self.dim(output);
        if n != 1 {
            return Err(Error::NonScalarOutput(n));
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        let mut grad = vec![0.0; self.param_len];
        adj[output.0][0] = seed;

        for i in (0..=output.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            let val = |id: &NodeId| self.nodes[id.0].value.as_slice();
            match &node.op {
                Op::Const(_) => {}
                Op::Param { offset, .. } => {
                    for (k, gk) in g.iter().enumerate() {
                        grad[offset + k] += gk;
                    }
                }
                Op::Affine {
                    x,
                    w,
                    b,
                    rows,
                    cols,
                } => {
                    let (xv, wv) = (val(x).to_vec(), val(w).to_vec());
                    for r in 0..*rows {
                        adj[b.0][r] += g[r];
                        for c in 0..*cols {
                            adj[w.0][r * cols + c] += g[r] * xv[c];
                            adj[x.0][c] += g[r] * wv[r * cols + c];
                        }
                    }
                }
                Op::Activation(a, kind) => {
                    let xv = val(a).to_vec();
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] * kind.derivative(xv[k], node.value[k]);
                    }
                }
                Op::Add(a, b) => {
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k];
                        adj[b.0][k] += g[k];
                    }
                }
                Op::Sub(a, b) => {
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k];
                        adj[b.0][k] -= g[k];
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(a).to_vec(), val(b).to_vec());
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] * bv[k];
                        adj[b.0][k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, c) => {
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] * c;
                    }
                }
                Op::Shift(a, _) => {
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k];
                    }
                }
                Op::Exp(a) => {
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] * node.value[k];
                    }
                }
                Op::Ln(a) => {
                    let av = val(a).to_vec();
                    for k in 0..g.len() {
                        adj[a.0][k] += g[k] / av[k];
                    }
                }
                Op::Square(a) => {
                    let av = val(a).to_vec();
                    for k in 0..g.len() {
                        adj[a.0][k] += 2.0 * g[k] * av[k];
                    }
                }
                Op::Sum(a) => {
                    for slot in adj[a.0].iter_mut() {
                        *slot += g[0];
                    }
                }
                Op::LogSumExp(a) => {
                    let lse = node.value[0];
                    let av = val(a).to_vec();
                    for k in 0..av.len() {
                        adj[a.0][k] += g[0] * (av[k] - lse).exp();
                    }
                }
                Op::Gather(a, idx) => adj[a.0][*idx] += g[0],
                Op::Broadcast(a, _) => adj[a.0][0] += g.iter().sum::<f64>(),
                Op::Concat(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let len = adj[p.0].len();
                        for k in 0..len {
                            adj[p.0][k] += g[at + k];
                        }
                        at += len;
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Recomputes every node from the recorded ops against `store`.
    pub fn replay(&self, store: &ParamStore) -> Result<Vec<Vec<f64>>> {
        if store.len() != self.param_len {
            return Err(Error::dims(
                "tape parameter store",
                self.param_len,
                store.len(),
            ));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = compute(&node.op, &nodes, store.values());
            nodes.push(Node {
                op: node.op.clone(),
                value,
            });
        }
        Ok(nodes.into_iter().map(|n| n.value).collect())
    }

    /// Cached forward values of every node.
    pub fn values(&self) -> Vec<Vec<f64>> {
        self.nodes.iter().map(|n| n.value.clone()).collect()
    }
}

/// Evaluates a tape-building loss and returns `(value, gradient)`.
pub fn value_and_grad<F>(loss: &F, params: &ParamStore) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape, params)?;
    let value = tape.scalar(out);
    let grad = tape.backward(out, 1.0)?;
    Ok((value, grad))
}

fn loss_value<F>(loss: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new(params);
    let out = loss(&mut tape, params)?;
    let n = tape.dim(out);
    if n != 1 {
        return Err(Error::NonScalarOutput(n));
    }
    Ok(tape.scalar(out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub worst_slice: Option<String>,
    pub coordinates: usize,
    pub eps: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares [`Tape::backward`] against central differences coordinate by
/// coordinate. Errors are relative to `max(1, |numeric|)`.
pub fn grad_check<F>(loss: F, params: &ParamStore, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must be positive, got {eps}"
        )));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check tol must be positive, got {tol}"
        )));
    }
    let (value, grad) = value_and_grad(&loss, params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at unperturbed parameters is {value}"
        )));
    }

    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for k in 0..params.len() {
        let v = params.values()[k];
        let plus = loss_value(&loss, &params.with_value(k, v + eps)?)?;
        let minus = loss_value(&loss, &params.with_value(k, v - eps)?)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss under perturbation of coordinate {k}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (grad[k] - numeric).abs() / numeric.abs().max(1.0);
        if worst.is_none() || rel > max_rel_error {
            max_rel_error = rel;
            worst = Some(k);
        }
    }
    Ok(GradCheckReport {
        loss: value,
        max_rel_error,
        worst_coordinate: worst,
        worst_slice: worst.and_then(|k| params.name_of(k).map(str::to_string)),
        coordinates: params.len(),
        eps,
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(blocks: &[(&str, &[usize], &[f64])]) -> ParamStore {
        ParamStore::new(
            blocks
                .iter()
                .map(|(n, s, v)| (n.to_string(), s.to_vec(), v.to_vec()))
                .collect(),
        )
        .unwrap()
    }

    fn central_diff<F: Fn(&ParamStore) -> f64>(f: F, p: &ParamStore, eps: f64) -> Vec<f64> {
        (0..p.len())
            .map(|k| {
                let v = p.values()[k];
                (f(&p.with_value(k, v + eps).unwrap()) - f(&p.with_value(k, v - eps).unwrap()))
                    / (2.0 * eps)
            })
            .collect()
    }

    #[test]
    fn layout_is_contiguous_and_validated() {
        let p = store(&[("a", &[2, 3], &[0.0; 6]), ("b", &[3], &[1.0, 2.0, 3.0])]);
        assert_eq!(p.slice("b").unwrap().offset, 6);
        assert_eq!(p.len(), 9);
        assert_eq!(p.name_of(7), Some("b"));
        assert!(ParamStore::new(vec![("a".into(), vec![2], vec![1.0])]).is_err());
        assert!(ParamStore::new(vec![("a".into(), vec![1], vec![f64::NAN])]).is_err());
        let mut q = p.clone();
        assert!(q.set_values(vec![f64::INFINITY; 9]).is_err());
    }

    #[test]
    fn affine_identity_and_constant() {
        let p = store(&[
            ("w", &[2, 2], &[1.0, 0.0, 0.0, 1.0]),
            ("b", &[2], &[0.0, 0.0]),
        ]);
        let mut t = Tape::new(&p);
        let x = t.constant(vec![3.0, 4.0]);
        let y = t.affine(&p, x, "w", "b").unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);

        let p = store(&[("w", &[2, 2], &[0.0; 4]), ("b", &[2], &[1.0, 2.0])]);
        let mut t = Tape::new(&p);
        let x = t.constant(vec![-7.0, 11.0]);
        let y = t.affine(&p, x, "w", "b").unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn affine_dimension_error_names_layer() {
        let p = store(&[("enc.w0", &[2, 3], &[0.0; 6]), ("enc.b0", &[2], &[0.0; 2])]);
        let mut t = Tape::new(&p);
        let x = t.constant(vec![1.0, 2.0]);
        let err = t.affine(&p, x, "enc.w0", "enc.b0").unwrap_err();
        assert!(err.to_string().contains("enc.w0"), "{err}");
    }

    #[test]
    fn affine_weight_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = vec![0.7, -1.3];
        let p = store(&[("w", &[3, 2], &w), ("b", &[3], &b)]);
        let loss = |t: &mut Tape, s: &ParamStore| {
            let xn = t.constant(x.clone());
            let y = t.affine(s, xn, "w", "b")?;
            Ok(t.sum(y))
        };
        let (_, g) = value_and_grad(&loss, &p).unwrap();
        let fd = central_diff(|s| loss_value(&loss, s).unwrap(), &p, 1e-5);
        for (a, n) in g.iter().zip(&fd) {
            assert!((a - n).abs() / n.abs().max(1e-12) < 1e-6, "{a} vs {n}");
        }
        // d/dW_rc sum(Wx+b) = x_c
        assert_eq!(&g[..6], &[0.7, -1.3, 0.7, -1.3, 0.7, -1.3]);
    }

    #[test]
    fn activation_values() {
        let p = ParamStore::new(vec![]).unwrap();
        let mut t = Tape::new(&p);
        let x = t.constant(vec![0.0]);
        let sp = t.activation(x, Activation::Softplus);
        assert!((t.scalar(sp) - std::f64::consts::LN_2).abs() < 1e-15);
        let x = t.constant(vec![-1.0, 2.0]);
        let r = t.activation(x, Activation::Relu);
        assert_eq!(t.value(r), &[0.0, 2.0]);
        assert_eq!(
            Activation::Softplus.derivative(0.0, std::f64::consts::LN_2),
            0.5
        );
        assert!(softplus(800.0).is_finite() && (softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn softplus_slope_through_backward() {
        let p = store(&[("x", &[1], &[0.0])]);
        let mut t = Tape::new(&p);
        let x = t.param(&p, "x").unwrap();
        let y = t.activation(x, Activation::Softplus);
        assert_eq!(t.backward(y, 1.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn constant_output_has_zero_gradient_and_param_is_unit() {
        let p = store(&[("t", &[4], &[1.0, 2.0, 3.0, 4.0])]);
        let mut t = Tape::new(&p);
        let c = t.scalar_const(5.0);
        assert_eq!(t.backward(c, 1.0).unwrap(), vec![0.0; 4]);

        let mut t = Tape::new(&p);
        let th = t.param(&p, "t").unwrap();
        let k = t.gather(th, 2);
        assert_eq!(t.backward(k, 1.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_vector_output() {
        let p = store(&[("t", &[2], &[1.0, 2.0])]);
        let mut t = Tape::new(&p);
        let th = t.param(&p, "t").unwrap();
        assert!(matches!(
            t.backward(th, 1.0),
            Err(Error::NonScalarOutput(2))
        ));
    }

    fn two_layer(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut u = |n: usize| {
            (0..n)
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect::<Vec<f64>>()
        };
        let blocks = vec![
            ("w0".to_string(), vec![3, 2], u(6)),
            ("b0".to_string(), vec![3], u(3)),
            ("w1".to_string(), vec![2, 3], u(6)),
            ("b1".to_string(), vec![2], u(2)),
        ];
        ParamStore::new(blocks).unwrap()
    }

    fn two_layer_loss(t: &mut Tape, s: &ParamStore) -> Result<NodeId> {
        let x = t.constant(vec![0.4, -1.1]);
        let h = t.affine(s, x, "w0", "b0")?;
        let h = t.activation(h, Activation::Softplus);
        let o = t.affine(s, h, "w1", "b1")?;
        let lse = t.log_sum_exp(o);
        let sq = t.square(o);
        let sq = t.sum(sq);
        let sq = t.scale(sq, 0.1);
        Ok(t.add(lse, sq))
    }

    #[test]
    fn two_layer_softplus_network_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let p = two_layer(&mut rng);
            let (_, g) = value_and_grad(&two_layer_loss, &p).unwrap();
            let fd = central_diff(|s| loss_value(&two_layer_loss, s).unwrap(), &p, 1e-5);
            for (a, n) in g.iter().zip(&fd) {
                assert!((a - n).abs() / n.abs().max(1.0) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let p = store(&[("t", &[3], &[0.5, -1.5, 2.0])]);
        let quad = |t: &mut Tape, s: &ParamStore| {
            let th = t.param(s, "t")?;
            let sq = t.square(th);
            let sum = t.sum(sq);
            Ok(t.scale(sum, 0.5))
        };
        let r = grad_check(quad, &p, 1e-5, 1e-9).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn grad_check_rejects_zero_eps_and_nonfinite_loss() {
        let p = store(&[("t", &[1], &[0.0])]);
        let id = |t: &mut Tape, s: &ParamStore| t.param(s, "t");
        assert!(matches!(
            grad_check(id, &p, 0.0, 1e-5),
            Err(Error::InvalidArgument(_))
        ));
        let bad = |t: &mut Tape, s: &ParamStore| {
            let th = t.param(s, "t")?;
            Ok(t.ln(th))
        };
        assert!(matches!(
            grad_check(bad, &p, 1e-5, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = two_layer(&mut rng);
        let mut t = Tape::new(&p);
        let out = two_layer_loss(&mut t, &p).unwrap();
        assert_eq!(t.replay(&p).unwrap(), t.values());
        assert_eq!(t.backward(out, 1.0).unwrap(), t.backward(out, 1.0).unwrap());
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, 0.0]), 0.0);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }
}
