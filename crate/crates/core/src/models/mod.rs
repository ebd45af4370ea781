//! Toy encoder-decoder networks for depth regression and segmentation.
//!
//! Layout shared by all networks (input `[3, H, W]`, `H` and `W` multiples
//! of 4):
//!
//! ```text
//! x / 255
//! enc1  conv3x3 stride 2 -> relu                 [c1, H/2, W/2]
//! enc2  conv3x3 stride 2 -> relu                 [c2, H/4, W/4]
//! mid   conv3x3 -> relu                          (arch-B only)
//! dec1  upsample2x -> conv3x3 -> relu, + enc1    [c1, H/2, W/2]
//! dec2  upsample2x -> conv3x3 -> relu            [c3, H, W]
//! head  conv3x3 -> softplus (depth) | logits (segmentation)
//! ```

mod checkpoint;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use train::{mean_rmse, pixel_accuracy, train_depth, train_seg, HeldOutMetric, TrainConfig, TrainReport};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_difference_check, softmax_channels, Bindings, FiniteDifferenceReport, Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Named network parameters, kept in name order.
pub type Params = BTreeMap<String, Tensor>;

pub const INPUT: &str = "x";

/// Fixed gain in front of the depth softplus; lets a small head span the
/// metre range without large weights.
pub const HEAD_GAIN: f64 = 10.0;
const TARGET: &str = "target";
const MASK: &str = "mask";
const LABELS: &str = "labels";

/// Depth network architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "arch-A")]
    A,
    #[serde(rename = "arch-B")]
    B,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::A => "arch-A",
            Arch::B => "arch-B",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arch-A" | "A" | "a" => Ok(Arch::A),
            "arch-B" | "B" | "b" => Ok(Arch::B),
            _ => Err(Error::config(format!("unknown architecture `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Widths {
    c1: usize,
    c2: usize,
    c3: usize,
    mid: bool,
}

impl Arch {
    fn widths(self) -> Widths {
        match self {
            Arch::A => Widths {
                c1: 8,
                c2: 16,
                c3: 8,
                mid: false,
            },
            Arch::B => Widths {
                c1: 6,
                c2: 12,
                c3: 8,
                mid: true,
            },
        }
    }
}

const SEG_WIDTHS: Widths = Widths {
    c1: 8,
    c2: 16,
    c3: 8,
    mid: false,
};

fn conv_params(params: &mut Params, rng: &mut impl Rng, name: &str, c_in: usize, c_out: usize, k: usize, zero: bool) {
    // He-uniform initialisation.
    let bound = (6.0 / (c_in * k * k) as f64).sqrt();
    let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
        if zero {
            0.0
        } else {
            rng.gen_range(-bound..bound)
        }
    });
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

fn init_params(widths: Widths, out_channels: usize, seed: u64, stream: &str) -> Params {
    let mut rng = rng::stream(seed, stream);
    let mut p = Params::new();
    let Widths { c1, c2, c3, mid } = widths;
    conv_params(&mut p, &mut rng, "enc1", 3, c1, 3, false);
    conv_params(&mut p, &mut rng, "enc2", c1, c2, 3, false);
    if mid {
        conv_params(&mut p, &mut rng, "mid", c2, c2, 3, false);
    }
    conv_params(&mut p, &mut rng, "dec1", c2, c1, 3, false);
    conv_params(&mut p, &mut rng, "dec2", c1, c3, 3, false);
    conv_params(&mut p, &mut rng, "head", c3, out_channels, 3, true);
    p
}

fn conv(g: &mut Graph, x: NodeId, name: &str, stride: usize) -> NodeId {
    let w = g.input(&format!("{name}.w"));
    let b = g.input(&format!("{name}.b"));
    g.conv2d(x, w, b, stride)
}

/// Appends the shared encoder-decoder to `g`; returns the head output node.
fn build_body(g: &mut Graph, x: NodeId, mid: bool) -> NodeId {
    let scaled = g.scale(x, 1.0 / 255.0);
    let e1 = conv(g, scaled, "enc1", 2);
    let e1 = g.relu(e1);
    let e2 = conv(g, e1, "enc2", 2);
    let mut z = g.relu(e2);
    if mid {
        let m = conv(g, z, "mid", 1);
        z = g.relu(m);
    }
    let u1 = g.upsample2x(z);
    let d1 = conv(g, u1, "dec1", 1);
    let d1 = g.relu(d1);
    let d1 = g.add(d1, e1);
    let u2 = g.upsample2x(d1);
    let d2 = conv(g, u2, "dec2", 1);
    let d2 = g.relu(d2);
    conv(g, d2, "head", 1)
}

fn check_image(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::Shape {
            node: 0,
            detail: format!("expected [3, H, W] with H, W multiples of 4, got {s:?}"),
        });
    }
    Ok(())
}

fn bindings<'a>(params: &'a Params, extra: &[(&'a str, &'a Tensor)]) -> Bindings<'a> {
    let mut b: Bindings<'a> = params.iter().map(|(k, v)| (k.as_str(), v)).collect();
    b.extend(extra.iter().copied());
    b
}

/// Scalar loss with its gradient with respect to the input image.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Tensor,
}

/// A depth regressor usable by the attacks.
pub trait DepthModel: Sync {
    /// `[1, H, W]` depth in metres for a `[3, H, W]` image in `[0, 255]`.
    fn predict(&self, x: &Tensor) -> Result<Tensor>;

    /// Mean squared error over `mask` between the prediction and `target`
    /// (both `[H, W]`), with its gradient with respect to `x`.
    fn masked_mse(&self, x: &Tensor, target: &Tensor, mask: &Tensor) -> Result<LossGrad>;
}

/// A per-pixel classifier usable by the universal attack.
pub trait SegModel: Sync {
    fn classes(&self) -> usize;

    /// `[K, H, W]` class probabilities.
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;

    /// Mean per-pixel softmax cross-entropy against `labels` (`[H, W]`), with
    /// its gradient with respect to `x`.
    fn cross_entropy(&self, x: &Tensor, labels: &Tensor) -> Result<LossGrad>;
}

/// Depth regressor with a softplus head.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet {
    pub arch: Arch,
    pub params: Params,
}

impl DepthNet {
    /// Freshly initialised network. The head starts at zero, so every output
    /// pixel is `softplus(0) = ln 2` before training.
    pub fn new(arch: Arch, seed: u64) -> Self {
        DepthNet {
            arch,
            params: init_params(arch.widths(), 1, seed, &format!("init/depth/{arch}")),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn graph(&self) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let x = g.input(INPUT);
        let head = build_body(&mut g, x, self.arch.widths().mid);
        let head = g.scale(head, HEAD_GAIN);
        let depth = g.softplus(head);
        (g, depth)
    }

    /// Graph computing `masked_sum_of_squares(pred, target, mask) * scale`.
    pub(crate) fn loss_graph(&self, scale: f64) -> (Graph, NodeId, NodeId) {
        let (mut g, depth) = self.graph();
        let target = g.input(TARGET);
        let mask = g.input(MASK);
        let ssq = g.masked_sum_of_squares(depth, target, mask);
        let loss = g.scale(ssq, scale);
        (g, depth, loss)
    }

    /// Loss and parameter gradients for one training example.
    pub(crate) fn param_gradients(
        &self,
        x: &Tensor,
        target: &Tensor,
        mask: &Tensor,
    ) -> Result<(f64, crate::autodiff::Gradients)> {
        check_image(x)?;
        let count = mask.sum();
        if count == 0.0 {
            return Err(Error::EmptyMask);
        }
        let (g, _, loss) = self.loss_graph(1.0 / count);
        let target = target.clone().reshape(&[1, x.shape()[1], x.shape()[2]])?;
        let mask = mask.clone().reshape(target.shape())?;
        let tape = g.forward(&bindings(
            &self.params,
            &[(INPUT, x), (TARGET, &target), (MASK, &mask)],
        ))?;
        let names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        let grads = tape.backward(loss, &names)?;
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Checks the analytic input gradient of the masked MSE against central
    /// differences at `coordinates` of `x`, skipping ReLU kinks.
    pub fn input_gradient_check(
        &self,
        x: &Tensor,
        target: &Tensor,
        mask: &Tensor,
        coordinates: &[usize],
        h: f64,
    ) -> Result<FiniteDifferenceReport> {
        check_image(x)?;
        let count = mask.sum();
        if count == 0.0 {
            return Err(Error::EmptyMask);
        }
        let (g, _, loss) = self.loss_graph(1.0 / count);
        let shape = [1, x.shape()[1], x.shape()[2]];
        let target = target.clone().reshape(&shape)?;
        let mask = mask.clone().reshape(&shape)?;
        let b = bindings(&self.params, &[(INPUT, x), (TARGET, &target), (MASK, &mask)]);
        finite_difference_check(&g, &b, loss, INPUT, coordinates, h, true)
    }
}

impl DepthModel for DepthNet {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x)?;
        let (g, _) = self.graph();
        let tape = g.forward(&bindings(&self.params, &[(INPUT, x)]))?;
        Ok(tape.output().clone())
    }

    fn masked_mse(&self, x: &Tensor, target: &Tensor, mask: &Tensor) -> Result<LossGrad> {
        check_image(x)?;
        let count = mask.sum();
        if count == 0.0 {
            return Err(Error::EmptyMask);
        }
        let (g, _, loss) = self.loss_graph(1.0 / count);
        let shape = [1, x.shape()[1], x.shape()[2]];
        let target = target.clone().reshape(&shape)?;
        let mask = mask.clone().reshape(&shape)?;
        let tape = g.forward(&bindings(
            &self.params,
            &[(INPUT, x), (TARGET, &target), (MASK, &mask)],
        ))?;
        Ok(LossGrad {
            loss: tape.value(loss).data()[0],
            grad: tape.input_gradient(loss, INPUT)?,
        })
    }
}

/// Semantic segmentation network producing per-pixel class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    pub classes: usize,
    pub params: Params,
}

impl SegNet {
    pub fn new(classes: usize, seed: u64) -> Self {
        SegNet {
            classes,
            params: init_params(SEG_WIDTHS, classes, seed, "init/seg"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub(crate) fn loss_graph(&self) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let x = g.input(INPUT);
        let logits = build_body(&mut g, x, false);
        let labels = g.input(LABELS);
        let ce = g.softmax_cross_entropy(logits, labels);
        let loss = g.reduce_mean(ce);
        (g, logits, loss)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        check_image(x)?;
        let mut g = Graph::new();
        let input = g.input(INPUT);
        build_body(&mut g, input, false);
        let tape = g.forward(&bindings(&self.params, &[(INPUT, x)]))?;
        Ok(tape.output().clone())
    }

    /// Per-pixel arg-max class.
    pub fn predict_labels(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.logits(x)?;
        let (k, plane) = (p.shape()[0], p.len() / p.shape()[0]);
        Tensor::new(
            p.shape()[1..].to_vec(),
            (0..plane)
                .map(|i| {
                    (0..k)
                        .fold((0, f64::NEG_INFINITY), |best, c| {
                            let v = p.data()[c * plane + i];
                            if v > best.1 {
                                (c, v)
                            } else {
                                best
                            }
                        })
                        .0 as f64
                })
                .collect(),
        )
    }

    pub(crate) fn param_gradients(
        &self,
        x: &Tensor,
        labels: &Tensor,
    ) -> Result<(f64, crate::autodiff::Gradients)> {
        check_image(x)?;
        let (g, _, loss) = self.loss_graph();
        let tape = g.forward(&bindings(&self.params, &[(INPUT, x), (LABELS, labels)]))?;
        let names: Vec<&str> = self.params.keys().map(String::as_str).collect();
        let grads = tape.backward(loss, &names)?;
        Ok((tape.value(loss).data()[0], grads))
    }

    /// Finite-difference check of the cross-entropy input gradient.
    pub fn input_gradient_check(
        &self,
        x: &Tensor,
        labels: &Tensor,
        coordinates: &[usize],
        h: f64,
    ) -> Result<FiniteDifferenceReport> {
        check_image(x)?;
        let (g, _, loss) = self.loss_graph();
        let b = bindings(&self.params, &[(INPUT, x), (LABELS, labels)]);
        finite_difference_check(&g, &b, loss, INPUT, coordinates, h, true)
    }
}

impl SegModel for SegNet {
    fn classes(&self) -> usize {
        self.classes
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_channels(&self.logits(x)?))
    }

    fn cross_entropy(&self, x: &Tensor, labels: &Tensor) -> Result<LossGrad> {
        check_image(x)?;
        let (g, _, loss) = self.loss_graph();
        let tape = g.forward(&bindings(&self.params, &[(INPUT, x), (LABELS, labels)]))?;
        Ok(LossGrad {
            loss: tape.value(loss).data()[0],
            grad: tape.input_gradient(loss, INPUT)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut r = rng::stream(seed, "test-image");
        Tensor::from_fn(&[3, h, w], |_| r.gen_range(0.0..255.0))
    }

    #[test]
    fn untrained_depth_is_ln2() {
        let net = DepthNet::new(Arch::A, 1);
        let d = net.predict(&image(0, 16, 16)).unwrap();
        assert_eq!(d.shape(), &[1, 16, 16]);
        for &v in d.data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn architectures_differ_in_size() {
        let a = DepthNet::new(Arch::A, 0);
        let b = DepthNet::new(Arch::B, 0);
        assert_ne!(a.param_count(), b.param_count());
        assert!(b.params.contains_key("mid.w"));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = DepthNet::new(Arch::B, 3);
        // give the head non-zero weights so outputs vary
        let mut r = rng::stream(3, "head");
        for v in net.params.get_mut("head.w").unwrap().data_mut() {
            *v = r.gen_range(-0.5..0.5);
        }
        let x = image(5, 16, 16);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.min() > 0.0);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let net = DepthNet::new(Arch::A, 1);
        assert!(net.predict(&Tensor::zeros(&[1, 16, 16])).is_err());
        assert!(net.predict(&Tensor::zeros(&[3, 18, 16])).is_err());
        let seg = SegNet::new(4, 1);
        assert!(seg.probabilities(&Tensor::zeros(&[3, 16])).is_err());
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let seg = SegNet::new(4, 1);
        let p = seg.probabilities(&image(1, 8, 8)).unwrap();
        assert_eq!(p.shape(), &[4, 8, 8]);
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn seg_probabilities_normalised() {
        let mut seg = SegNet::new(4, 2);
        let mut r = rng::stream(2, "head");
        for v in seg.params.get_mut("head.w").unwrap().data_mut() {
            *v = r.gen_range(-2.0..2.0);
        }
        let p = seg.probabilities(&image(2, 8, 8)).unwrap();
        for px in 0..64 {
            let s: f64 = (0..4).map(|c| p.data()[c * 64 + px]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn arch_names_round_trip() {
        for a in [Arch::A, Arch::B] {
            assert_eq!(a.to_string().parse::<Arch>().unwrap(), a);
        }
        assert!("arch-C".parse::<Arch>().is_err());
    }
}
