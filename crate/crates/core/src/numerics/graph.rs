//! Per-step computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamSet`], evaluates ops eagerly as they are
//! added, and [`Graph::backward`] walks the nodes in reverse creation
//! order (which is a valid topological order) to produce one gradient per
//! parameter.

use std::collections::HashMap;

use super::kernels::{self, ConvSpec, ConvTSpec, GruCache, StftSpec};
use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Input,
    Param(usize),
    Affine { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv1d { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    ConvT { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvTSpec },
    Gru { xp: NodeId, u: NodeId, bhn: NodeId, cache: GruCache<T> },
    LayerNorm { x: NodeId, g: NodeId, b: NodeId },
    Softmax(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Embed { table: NodeId, ids: Vec<usize> },
    Concat(Vec<NodeId>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    RepeatRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    L1 { a: NodeId, b: NodeId },
    MseConst { a: NodeId, target: T },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor<T> },
    StftMag { x: NodeId, spec: StftSpec, re: Tensor<T>, im: Tensor<T> },
}

struct Node<T: Real> {
    op: Op<T>,
    value: Tensor<T>,
}

pub struct Graph<'p, T: Real = f32> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient outside the graph.
    pub fn input(&mut self, t: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, t, "input")
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if let Some(&id) = self.param_nodes.get(&idx) {
            return Ok(id);
        }
        let id = self.push(Op::Param(idx), self.params.tensor(idx).clone(), "param")?;
        self.param_nodes.insert(idx, id);
        Ok(id)
    }

    fn v(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let y = kernels::affine(self.v(x), self.v(w), b.map(|b| self.v(b)))?;
        self.push(Op::Affine { x, w, b }, y, "affine")
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let y = kernels::conv1d(self.v(x), self.v(w), b.map(|b| self.v(b)), &spec)?;
        self.push(Op::Conv1d { x, w, b, spec }, y, "conv1d")
    }

    pub fn conv_transpose1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvTSpec) -> Result<NodeId> {
        let y = kernels::conv_transpose1d(self.v(x), self.v(w), b.map(|b| self.v(b)), &spec)?;
        self.push(Op::ConvT { x, w, b, spec }, y, "conv_transpose1d")
    }

    /// GRU over the precomputed input projection `xp: [T x 3H]`.
    pub fn gru(&mut self, xp: NodeId, u: NodeId, bhn: NodeId) -> Result<NodeId> {
        let (hs, cache) = kernels::gru(self.v(xp), self.v(u), self.v(bhn))?;
        self.push(Op::Gru { xp, u, bhn, cache }, hs, "gru")
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> Result<NodeId> {
        let y = kernels::layer_norm(self.v(x), self.v(g), self.v(b))?;
        self.push(Op::LayerNorm { x, g, b }, y, "layer_norm")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let y = kernels::softmax(self.v(x))?;
        self.push(Op::Softmax(x), y, "softmax")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x), y, "relu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), y, "tanh")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(x), y, "sigmoid")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| v.exp());
        self.push(Op::Exp(x), y, "exp")
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| v.ln());
        self.push(Op::Log(x), y, "log")
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.v(x).map(|v| v.sqrt());
        self.push(Op::Sqrt(x), y, "sqrt")
    }

    /// Gathers rows `ids` of an embedding table.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.v(table);
        if ids.iter().any(|&i| i >= t.rows()) {
            return Err(shape_err("embed", format!("id out of range for {} rows", t.rows())));
        }
        let rows: Vec<&[T]> = ids.iter().map(|&i| t.row(i)).collect();
        let y = Tensor::from_rows(&rows)?;
        self.push(Op::Embed { table, ids: ids.to_vec() }, y, "embed")
    }

    /// Concatenates 2-D tensors along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.v(parts[0]).rows();
        if parts.iter().any(|&p| self.v(p).rows() != n) {
            return Err(shape_err("concat", "row counts differ"));
        }
        let width: usize = parts.iter().map(|&p| self.v(p).cols()).sum();
        let mut out = Vec::with_capacity(n * width);
        for r in 0..n {
            for &p in parts {
                out.extend_from_slice(self.v(p).row(r));
            }
        }
        let y = Tensor::new(vec![n, width], out)?;
        self.push(Op::Concat(parts.to_vec()), y, "concat")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.v(a).shape() != self.v(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.v(a).shape(), self.v(b).shape())));
        }
        Ok(())
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.v(a), self.v(b));
        let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), d).unwrap()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let y = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), y, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let y = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), y, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let y = self.zip(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), y, "mul")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let c = T::lit(c);
        let y = self.v(a).map(|v| v * c);
        self.push(Op::Scale(a, c), y, "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let c = T::lit(c);
        let y = self.v(a).map(|v| v + c);
        self.push(Op::AddScalar(a), y, "add_scalar")
    }

    /// Broadcasts a single row `[1 x d]` (or `[d]`) to `[n x d]`.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let row = self.v(a).data().to_vec();
        let d = row.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&row);
        }
        let y = Tensor::new(vec![n, d], out)?;
        self.push(Op::RepeatRows(a), y, "repeat_rows")
    }

    /// Row sums, `[n x d] -> [n x 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.v(a);
        let out: Vec<T> = (0..t.rows()).map(|r| T::lit(t.row(r).iter().map(|v| v.f64()).sum())).collect();
        let y = Tensor::new(vec![t.rows(), 1], out)?;
        self.push(Op::SumCols(a), y, "sum_cols")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let y = Tensor::scalar(T::lit(self.v(a).sum_f64()));
        self.push(Op::SumAll(a), y, "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.v(a);
        let y = Tensor::scalar(T::lit(t.sum_f64() / t.len().max(1) as f64));
        self.push(Op::MeanAll(a), y, "mean_all")
    }

    /// Mean absolute difference. The subgradient at a zero residual is 0.
    pub fn l1(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("l1", a, b)?;
        let (ta, tb) = (self.v(a), self.v(b));
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x.f64() - y.f64()).abs()).sum();
        let y = Tensor::scalar(T::lit(s / ta.len().max(1) as f64));
        self.push(Op::L1 { a, b }, y, "l1")
    }

    /// Mean squared distance to a constant label (least-squares GAN terms).
    pub fn mse_const(&mut self, a: NodeId, target: f64) -> Result<NodeId> {
        let t = self.v(a);
        let s: f64 = t.data().iter().map(|x| (x.f64() - target).powi(2)).sum();
        let y = Tensor::scalar(T::lit(s / t.len().max(1) as f64));
        self.push(Op::MseConst { a, target: T::lit(target) }, y, "mse_const")
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::cross_entropy(self.v(logits), labels)?;
        self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(T::lit(loss)),
            "cross_entropy",
        )
    }

    /// STFT magnitude of a mono signal held as `[n x 1]` or `[n]`.
    pub fn stft_mag(&mut self, x: NodeId, spec: StftSpec) -> Result<NodeId> {
        let (mag, re, im) = kernels::stft_mag(self.v(x).data(), &spec)?;
        self.push(Op::StftMag { x, spec, re, im }, mag, "stft_mag")
    }

    /// Reverse pass from a scalar loss. Returns one gradient per parameter
    /// of the bound [`ParamSet`], zero for parameters not in the graph.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Tensor<T>>> {
        if self.v(loss).len() != 1 {
            return Err(shape_err("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.v(loss).shape(), T::one()));
        let mut out: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    g.ensure_finite("gradient")?;
                    out[*p] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let r = kernels::affine_backward(self.v(*x), self.v(*w), &g);
                    acc(&mut grads, *x, r.dx);
                    acc(&mut grads, *w, r.dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, r.db);
                    }
                }
                Op::Conv1d { x, w, b, spec } => {
                    let r = kernels::conv1d_backward(self.v(*x), self.v(*w), &g, spec);
                    acc(&mut grads, *x, r.dx);
                    acc(&mut grads, *w, r.dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, r.db);
                    }
                }
                Op::ConvT { x, w, b, spec } => {
                    let r = kernels::conv_transpose1d_backward(self.v(*x), self.v(*w), &g, spec);
                    acc(&mut grads, *x, r.dx);
                    acc(&mut grads, *w, r.dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, r.db);
                    }
                }
                Op::Gru { xp, u, bhn, cache } => {
                    let r = kernels::gru_backward(&node.value, cache, self.v(*u), &g);
                    acc(&mut grads, *xp, r.dxp);
                    acc(&mut grads, *u, r.du);
                    let dbhn = r.dbhn.reshape(self.v(*bhn).shape().to_vec())?;
                    acc(&mut grads, *bhn, dbhn);
                }
                Op::LayerNorm { x, g: gain, b } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(self.v(*x), self.v(*gain), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg.reshape(self.v(*gain).shape().to_vec())?);
                    acc(&mut grads, *b, db.reshape(self.v(*b).shape().to_vec())?);
                }
                Op::Softmax(x) => {
                    acc(&mut grads, *x, kernels::softmax_backward(&node.value, &g));
                }
                Op::Relu(x) => {
                    let dx = zip_map(self.v(*x), &g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&node.value, &g, |y, gv| gv * (T::one() - y * y));
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&node.value, &g, |y, gv| gv * y * (T::one() - y));
                    acc(&mut grads, *x, dx);
                }
                Op::Exp(x) => {
                    let dx = zip_map(&node.value, &g, |y, gv| gv * y);
                    acc(&mut grads, *x, dx);
                }
                Op::Log(x) => {
                    let dx = zip_map(self.v(*x), &g, |v, gv| gv / v);
                    acc(&mut grads, *x, dx);
                }
                Op::Sqrt(x) => {
                    let dx = zip_map(&node.value, &g, |y, gv| gv / (y + y));
                    acc(&mut grads, *x, dx);
                }
                Op::Embed { table, ids } => {
                    let t = self.v(*table);
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += *v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.v(p).cols();
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        acc(&mut grads, p, Tensor::new(vec![g.rows(), w], d)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, zip_map(self.v(*b), &g, |v, gv| v * gv));
                    acc(&mut grads, *b, zip_map(self.v(*a), &g, |v, gv| v * gv));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, g.map(|v| v * c));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::RepeatRows(a) => {
                    let shape = self.v(*a).shape().to_vec();
                    let d = g.cols();
                    let mut s = vec![0f64; d];
                    for r in 0..g.rows() {
                        for (acc_v, v) in s.iter_mut().zip(g.row(r)) {
                            *acc_v += v.f64();
                        }
                    }
                    acc(&mut grads, *a, Tensor::new(shape, s.into_iter().map(T::lit).collect())?);
                }
                Op::SumCols(a) => {
                    let t = self.v(*a);
                    let mut d = Vec::with_capacity(t.len());
                    for r in 0..t.rows() {
                        d.extend(std::iter::repeat_n(g.data()[r], t.cols()));
                    }
                    acc(&mut grads, *a, Tensor::new(t.shape().to_vec(), d)?);
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    acc(&mut grads, *a, Tensor::filled(self.v(*a).shape(), gv));
                }
                Op::MeanAll(a) => {
                    let t = self.v(*a);
                    let gv = g.data()[0] / T::lit(t.len().max(1) as f64);
                    acc(&mut grads, *a, Tensor::filled(t.shape(), gv));
                }
                Op::L1 { a, b } => {
                    let (ta, tb) = (self.v(*a), self.v(*b));
                    let scale = g.data()[0] / T::lit(ta.len().max(1) as f64);
                    let d: Vec<T> = ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .map(|(&x, &y)| {
                            let r = x - y;
                            if r > T::zero() {
                                scale
                            } else if r < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let da = Tensor::new(ta.shape().to_vec(), d)?;
                    acc(&mut grads, *b, da.map(|v| -v));
                    acc(&mut grads, *a, da);
                }
                Op::MseConst { a, target } => {
                    let t = self.v(*a);
                    let k = g.data()[0] * T::lit(2.0 / t.len().max(1) as f64);
                    let tg = *target;
                    acc(&mut grads, *a, t.map(|v| k * (v - tg)));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let k = g.data()[0] / T::lit(n as f64);
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.row_mut(r)[l] -= T::one();
                    }
                    acc(&mut grads, *logits, d.map(|v| v * k));
                }
                Op::StftMag { x, spec, re, im } => {
                    let xt = self.v(*x);
                    let dx = kernels::stft_mag_backward(xt.len(), &node.value, re, im, &g, spec);
                    acc(&mut grads, *x, Tensor::new(xt.shape().to_vec(), dx)?);
                }
            }
        }

        if out.iter().all(|g| g.is_none()) {
            return Err(Error::InvalidArgument("loss is disconnected from every parameter".into()));
        }
        Ok(out
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.params.tensor(i).shape())))
            .collect())
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let d = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap()).unwrap();
        let w = g.param("w").unwrap();
        let y = g.affine(x, w, None).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        // dL/dW[i][o] = x[i] * 1
        assert_eq!(grads[0].data(), &[1.0, 1.0, -2.0, -2.0, 3.0, 3.0]);
    }

    #[test]
    fn l1_subgradient_at_zero_residual_is_zero() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("a", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut g = Graph::new(&ps);
        let a = g.param("a").unwrap();
        let b = g.input(Tensor::new(vec![3], vec![1.0, 0.0, 5.0]).unwrap()).unwrap();
        let loss = g.l1(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn disconnected_loss_is_an_error() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("unused", Tensor::zeros(&[2]));
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let loss = g.sum_all(x).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut ps = ParamSet::<f64>::new();
        ps.add("w", Tensor::zeros(&[2]));
        let mut g = Graph::new(&ps);
        let w = g.param("w").unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn log_of_zero_is_rejected_as_non_finite() {
        let ps = ParamSet::<f64>::new();
        let mut g = Graph::new(&ps);
        let x = g.input(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
    }
}
