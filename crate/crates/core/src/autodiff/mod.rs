//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a static, topologically ordered list of primitive
//! applications over named inputs. [`Graph::forward`] binds tensors to the
//! inputs and produces a [`Tape`] holding every intermediate activation;
//! [`Tape::backward`] then walks the nodes in exact reverse order.
//!
//! Model parameters are ordinary named inputs, so the same machinery yields
//! gradients with respect to pixels (for attacks) and weights (for training).

mod check;
mod kernels;

pub use check::{finite_difference_check, FiniteDifferenceReport};
pub use kernels::softmax_channels;

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub type NodeId = usize;

/// Named tensors bound to a graph's inputs.
pub type Bindings<'a> = BTreeMap<&'a str, &'a Tensor>;

/// The fixed set of differentiable primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveKind {
    /// Inputs `(x [Ci,H,W], weight [Co,Ci,K,K], bias [Co])`; zero padding `K/2`.
    Conv2d { stride: usize },
    Relu,
    Softplus,
    /// Nearest-neighbour 2x spatial upsampling of a `[C,H,W]` tensor.
    Upsample2x,
    Add,
    Scale(f64),
    /// Inputs `(a, b, mask)`; output `sum(mask * (a - b)^2)`.
    MaskedSumOfSquares,
    /// Inputs `(logits [K,H,W], labels [H,W])`; output per-pixel cross-entropy `[H,W]`.
    SoftmaxCrossEntropy,
    ReduceMean,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Input(String),
    Op(PrimitiveKind),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

/// A topologically ordered computation.
///
/// Every builder method appends one node whose inputs already exist, so the
/// node sequence is a valid evaluation order by construction.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        assert!(inputs.iter().all(|&i| i < id), "graph inputs must precede node");
        self.nodes.push(Node { kind, inputs });
        id
    }

    fn op(&mut self, kind: PrimitiveKind, inputs: Vec<NodeId>) -> NodeId {
        self.push(NodeKind::Op(kind), inputs)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(NodeKind::Input(name.to_owned()), Vec::new())
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize) -> NodeId {
        self.op(PrimitiveKind::Conv2d { stride }, vec![x, weight, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.op(PrimitiveKind::Relu, vec![x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.op(PrimitiveKind::Softplus, vec![x])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        self.op(PrimitiveKind::Upsample2x, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(PrimitiveKind::Add, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.op(PrimitiveKind::Scale(factor), vec![x])
    }

    pub fn masked_sum_of_squares(&mut self, a: NodeId, b: NodeId, mask: NodeId) -> NodeId {
        self.op(PrimitiveKind::MaskedSumOfSquares, vec![a, b, mask])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: NodeId) -> NodeId {
        self.op(PrimitiveKind::SoftmaxCrossEntropy, vec![logits, labels])
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        self.op(PrimitiveKind::ReduceMean, vec![x])
    }

    /// Id of the input node called `name`, if any.
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| matches!(&n.kind, NodeKind::Input(s) if s == name))
    }

    /// Evaluates every node, retaining all activations for a backward pass.
    pub fn forward<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Tape<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.kind {
                NodeKind::Input(name) => {
                    let t = *bindings
                        .get(name.as_str())
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                    if !t.is_finite() {
                        return Err(Error::NonFinite(format!("input `{name}`")));
                    }
                    Cow::Borrowed(t)
                }
                NodeKind::Op(kind) => {
                    let args: Vec<&Tensor> = node.inputs.iter().map(|&i| values[i].as_ref()).collect();
                    let out = eval_op(id, kind, &args)?;
                    if !out.is_finite() {
                        return Err(Error::NonFinite(format!("output of node {id}")));
                    }
                    Cow::Owned(out)
                }
            };
            values.push(value);
        }
        Ok(Tape {
            graph: self,
            values,
        })
    }
}

fn shape_err(node: NodeId, detail: String) -> Error {
    Error::Shape { node, detail }
}

fn same_shape(node: NodeId, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            node,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn eval_op(id: NodeId, kind: &PrimitiveKind, args: &[&Tensor]) -> Result<Tensor> {
    use PrimitiveKind::*;
    Ok(match kind {
        Conv2d { stride } => {
            let (x, w, b) = (args[0], args[1], args[2]);
            let g = ConvGeom::new(x.shape(), w.shape(), *stride).ok_or_else(|| {
                shape_err(id, format!("conv of {:?} by {:?}", x.shape(), w.shape()))
            })?;
            if b.shape() != [g.c_out] {
                return Err(shape_err(id, format!("bias {:?} for {} channels", b.shape(), g.c_out)));
            }
            kernels::conv2d_forward(x, w, b, &g)
        }
        Relu => args[0].map(|v| v.max(0.0)),
        Softplus => args[0].map(kernels::softplus),
        Upsample2x => {
            if args[0].rank() != 3 {
                return Err(shape_err(id, format!("upsample of {:?}", args[0].shape())));
            }
            kernels::upsample2x_forward(args[0])
        }
        Add => {
            same_shape(id, args[0], args[1])?;
            args[0].zip_map(args[1], |a, b| a + b)?
        }
        Scale(f) => args[0].map(|v| v * f),
        MaskedSumOfSquares => {
            let (a, b, m) = (args[0], args[1], args[2]);
            same_shape(id, a, b)?;
            same_shape(id, a, m)?;
            let mut acc = 0.0;
            for ((&av, &bv), &mv) in a.data().iter().zip(b.data()).zip(m.data()) {
                let d = av - bv;
                acc += mv * d * d;
            }
            Tensor::scalar(acc)
        }
        SoftmaxCrossEntropy => {
            let (logits, labels) = (args[0], args[1]);
            if logits.rank() != 3 || labels.shape() != &logits.shape()[1..] {
                return Err(shape_err(
                    id,
                    format!("logits {:?} with labels {:?}", logits.shape(), labels.shape()),
                ));
            }
            let k = logits.shape()[0];
            if labels
                .data()
                .iter()
                .any(|&l| l < 0.0 || l.fract() != 0.0 || l as usize >= k)
            {
                return Err(shape_err(id, format!("labels outside 0..{k}")));
            }
            kernels::softmax_xent_forward(logits, labels)
        }
        ReduceMean => Tensor::scalar(args[0].sum() / args[0].len() as f64),
    })
}

/// Activations of one forward evaluation of a [`Graph`].
pub struct Tape<'a> {
    graph: &'a Graph,
    values: Vec<Cow<'a, Tensor>>,
}

impl<'a> Tape<'a> {
    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    /// Value of the last node appended to the graph.
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("empty graph")
    }

    /// Sign pattern of every ReLU pre-activation, used to detect kinks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.graph.nodes {
            if node.kind == NodeKind::Op(PrimitiveKind::Relu) {
                pattern.extend(self.values[node.inputs[0]].data().iter().map(|&v| v > 0.0));
            }
        }
        pattern
    }

    /// Reverse pass from the scalar `loss`, computing gradients only for the
    /// named inputs in `wrt` and the nodes between them and the loss.
    pub fn backward(&self, loss: NodeId, wrt: &[&str]) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0, wrt)
    }

    /// As [`Tape::backward`], with `d loss` seeded to `seed` instead of 1.
    pub fn backward_seeded(&self, loss: NodeId, seed: f64, wrt: &[&str]) -> Result<Gradients> {
        let nodes = &self.graph.nodes;
        if self.values[loss].len() != 1 {
            return Err(Error::NotScalar(loss));
        }
        let mut needed = vec![false; nodes.len()];
        for (id, node) in nodes.iter().enumerate().take(loss + 1) {
            needed[id] = match &node.kind {
                NodeKind::Input(name) => wrt.contains(&name.as_str()),
                NodeKind::Op(_) => node.inputs.iter().any(|&i| needed[i]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss] = Some(Tensor::full(self.values[loss].shape(), seed));
        for id in (0..=loss).rev() {
            let NodeKind::Op(kind) = &nodes[id].kind else {
                continue;
            };
            if !needed[id] {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs = &nodes[id].inputs;
            let want: Vec<bool> = inputs.iter().map(|&i| needed[i]).collect();
            let local = self.op_backward(kind, inputs, &upstream, &want);
            for (&input, g) in inputs.iter().zip(local) {
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(upstream);
        }

        let mut by_name = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let NodeKind::Input(name) = &node.kind {
                if wrt.contains(&name.as_str()) {
                    let g = grads[id]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(self.values[id].shape()));
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of `{name}`")));
                    }
                    by_name.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients { by_name })
    }

    /// `d loss / d input` for a single named input.
    pub fn input_gradient(&self, loss: NodeId, wrt: &str) -> Result<Tensor> {
        if self.graph.input_id(wrt).is_none() {
            return Err(Error::UnboundInput(wrt.to_owned()));
        }
        let mut g = self.backward(loss, &[wrt])?;
        Ok(g.by_name.remove(wrt).expect("requested gradient"))
    }

    fn op_backward(
        &self,
        kind: &PrimitiveKind,
        inputs: &[NodeId],
        up: &Tensor,
        want: &[bool],
    ) -> Vec<Option<Tensor>> {
        use PrimitiveKind::*;
        let arg = |i: usize| self.values[inputs[i]].as_ref();
        match kind {
            Conv2d { stride } => {
                let g = ConvGeom::new(arg(0).shape(), arg(1).shape(), *stride).expect("checked in forward");
                kernels::conv2d_backward(arg(0), arg(1), up, &g, [want[0], want[1], want[2]]).into()
            }
            Relu => vec![Some(
                arg(0)
                    .zip_map(up, |x, u| if x > 0.0 { u } else { 0.0 })
                    .expect("same shape"),
            )],
            Softplus => vec![Some(
                arg(0)
                    .zip_map(up, |x, u| u * kernels::sigmoid(x))
                    .expect("same shape"),
            )],
            Upsample2x => vec![Some(kernels::upsample2x_backward(up, arg(0).shape()))],
            Add => vec![want[0].then(|| up.clone()), want[1].then(|| up.clone())],
            Scale(f) => vec![Some(up.map(|u| u * f))],
            MaskedSumOfSquares => {
                let u = up.data()[0];
                let (a, b, m) = (arg(0), arg(1), arg(2));
                let da = Tensor::from_fn(a.shape(), |i| {
                    2.0 * u * m.data()[i] * (a.data()[i] - b.data()[i])
                });
                let db = want[1].then(|| da.map(|v| -v));
                vec![want[0].then_some(da), db, None]
            }
            SoftmaxCrossEntropy => vec![
                want[0].then(|| kernels::softmax_xent_backward(arg(0), arg(1), up)),
                None,
            ],
            ReduceMean => {
                let n = arg(0).len() as f64;
                vec![Some(Tensor::full(arg(0).shape(), up.data()[0] / n))]
            }
        }
    }
}

/// Gradients of a scalar with respect to named inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        self.by_name.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.relu(x);
        let xv = t(&[3], &[-1.0, 0.0, 2.0]);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        assert_eq!(tape.output().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let loss = g.reduce_mean(r);
        let xv = t(&[3], &[-1.0, 0.0, 2.0]);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        let grad = tape.input_gradient(loss, "x").unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn conv_of_zero_image_with_zero_bias_is_zero() {
        let mut g = Graph::new();
        let (x, w, b) = (g.input("x"), g.input("w"), g.input("b"));
        g.conv2d(x, w, b, 1);
        let xv = Tensor::zeros(&[3, 4, 4]);
        let wv = Tensor::from_fn(&[2, 3, 3, 3], |i| i as f64 * 0.37 - 5.0);
        let bv = Tensor::zeros(&[2]);
        let tape = g
            .forward(&Bindings::from([("x", &xv), ("w", &wv), ("b", &bv)]))
            .unwrap();
        assert_eq!(tape.output().shape(), &[2, 4, 4]);
        assert!(tape.output().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softplus_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.softplus(x);
        let xv = Tensor::scalar(0.0);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        assert!((tape.output().data()[0] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let loss = g.reduce_mean(x);
        let xv = t(&[4], &[3.0, -1.0, 7.0, 0.5]);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        assert_eq!(tape.input_gradient(loss, "x").unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn masked_squares_gradient() {
        let mut g = Graph::new();
        let (x, y, m) = (g.input("x"), g.input("y"), g.input("m"));
        let loss = g.masked_sum_of_squares(x, y, m);
        let xv = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let yv = t(&[2, 2], &[0.5, 2.5, -1.0, 4.0]);
        let mv = Tensor::full(&[2, 2], 1.0);
        let tape = g
            .forward(&Bindings::from([("x", &xv), ("y", &yv), ("m", &mv)]))
            .unwrap();
        let grad = tape.input_gradient(loss, "x").unwrap();
        let expected: Vec<f64> = xv.data().iter().zip(yv.data()).map(|(a, b)| 2.0 * (a - b)).collect();
        assert_eq!(grad.data(), expected.as_slice());
    }

    #[test]
    fn rejects_shape_mismatch_with_node_id() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let s = g.add(a, b);
        let (av, bv) = (Tensor::zeros(&[2]), Tensor::zeros(&[3]));
        match g.forward(&Bindings::from([("a", &av), ("b", &bv)])) {
            Err(Error::Shape { node, .. }) => assert_eq!(node, s),
            other => panic!("expected shape error, got {:?}", other.err()),
        }
    }

    #[test]
    fn rejects_non_finite_and_unbound_input() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.relu(x);
        let bad = t(&[2], &[1.0, f64::NAN]);
        assert!(matches!(
            g.forward(&Bindings::from([("x", &bad)])),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(g.forward(&Bindings::new()), Err(Error::UnboundInput(_))));
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.input("x");
        let r = g.relu(x);
        let xv = t(&[2], &[1.0, 2.0]);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        assert!(matches!(tape.input_gradient(r, "x"), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = mean(x + x) → 2/n per element
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.add(x, x);
        let loss = g.reduce_mean(s);
        let xv = t(&[2], &[1.0, 2.0]);
        let tape = g.forward(&Bindings::from([("x", &xv)])).unwrap();
        assert_eq!(tape.input_gradient(loss, "x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn upsample_and_cross_entropy_shapes() {
        let mut g = Graph::new();
        let x = g.input("x");
        let labels = g.input("labels");
        let up = g.upsample2x(x);
        let ce = g.softmax_cross_entropy(up, labels);
        let loss = g.reduce_mean(ce);
        let xv = Tensor::from_fn(&[3, 2, 2], |i| i as f64 * 0.1);
        let lv = Tensor::from_fn(&[4, 4], |i| (i % 3) as f64);
        let tape = g.forward(&Bindings::from([("x", &xv), ("labels", &lv)])).unwrap();
        assert_eq!(tape.value(up).shape(), &[3, 4, 4]);
        assert_eq!(tape.value(ce).shape(), &[4, 4]);
        let grad = tape.input_gradient(loss, "x").unwrap();
        assert_eq!(grad.shape(), &[3, 2, 2]);

        let bad = Tensor::full(&[4, 4], 3.0);
        assert!(g.forward(&Bindings::from([("x", &xv), ("labels", &bad)])).is_err());
    }
}
