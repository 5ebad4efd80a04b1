//! Operation tape for reverse-mode differentiation.
//!
//! Every op validates shapes, computes its value eagerly, and appends a node
//! recording its inputs. `backward` walks the nodes in reverse, accumulating
//! (summing) gradients into every node that requires them, so a tensor feeding
//! several consumers receives the sum of their contributions. Gradients stay
//! on the tape and can be read back for any node, not just leaves.

use super::conv::{self, Scratch};
use super::{Elem, Result, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Elementwise nonlinearity. The leaky-ReLU slope applies on the negative
/// side and must lie in (0, 1).
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    BroadcastMul {
        map: Var,
        feat: Var,
    },
    Affine {
        input: Var,
        scale: f64,
        shift: f64,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    SliceChannels {
        input: Var,
        start: usize,
        len: usize,
    },
    Abs {
        input: Var,
    },
    SumAll {
        input: Var,
    },
    MeanAll {
        input: Var,
    },
}

struct Node<E> {
    value: Tensor<E>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph. One tape per training context; a tape is
/// confined to a single thread and never mutates the tensors handed to it.
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    scratch: Scratch<E>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            scratch: Scratch::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Only leaves with `requires_grad` set (and
    /// nodes computed from them) receive gradients.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Drop all accumulated gradients, keeping values and structure.
    pub fn clear_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor<E>, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.is_all_finite(),
            "non-finite value produced by {:?}",
            op
        );
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// Zero-padded 2-D convolution of `input` (n,ci,h,w) with `weight`
    /// (co,ci,kh,kw) and `bias` (1,co,1,1).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        let bs = self.shape(bias);
        if stride < 1 {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                detail: format!("stride must be >= 1, got {stride}"),
            });
        }
        if xs.c != ws.c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "input has {} channels but weight expects {} (weight shape {})",
                    xs.c, ws.c, ws
                ),
            });
        }
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "bias shape {} does not match ({},{},{},{}) for {} output channels",
                    bs, 1, ws.n, 1, 1, ws.n
                ),
            });
        }
        let oh = conv::out_dim(xs.h, ws.h, stride, padding);
        let ow = conv::out_dim(xs.w, ws.w, stride, padding);
        let (oh, ow) = match (oh, ow) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "kernel {}x{} does not fit input {}x{} with padding {}",
                        ws.h, ws.w, xs.h, xs.w, padding
                    ),
                })
            }
        };
        let out = conv::forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
            oh,
            ow,
            &mut self.scratch,
        );
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if let Activation::LeakyRelu(alpha) = kind {
            if !(0.0 < alpha && alpha < 1.0) {
                return Err(TensorError::InvalidArg {
                    op: "activation",
                    detail: format!("leaky_relu slope must be in (0,1), got {alpha}"),
                });
            }
        }
        let out = self.nodes[input.0].value.map(|x| apply_act(kind, x));
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, rg, Op::Activation { input, kind }))
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(alpha))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh).expect("tanh")
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid).expect("sigmoid")
    }

    pub fn softplus(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Softplus).expect("softplus")
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                detail: format!("operands differ: {sa} vs {sb}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// Multiply a single-channel map (n,1,h,w) across every channel of
    /// `feat` (n,c,h,w).
    pub fn broadcast_mul(&mut self, map: Var, feat: Var) -> Result<Var> {
        let (ms, fs) = (self.shape(map), self.shape(feat));
        if ms.c != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_mul",
                detail: format!("map must have 1 channel, got {}", ms.c),
            });
        }
        if !ms.same_spatial(fs) {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_mul",
                detail: format!("map {ms} does not match features {fs}"),
            });
        }
        let map_t = &self.nodes[map.0].value;
        let feat_t = &self.nodes[feat.0].value;
        let mut out = Tensor::zeros(fs);
        let hw = fs.h * fs.w;
        for n in 0..fs.n {
            let m_plane = &map_t.data()[n * hw..(n + 1) * hw];
            for c in 0..fs.c {
                let off = (n * fs.c + c) * hw;
                let src = &feat_t.data()[off..off + hw];
                let dst = &mut out.data_mut()[off..off + hw];
                for i in 0..hw {
                    dst[i] = m_plane[i] * src[i];
                }
            }
        }
        let rg = self.any_requires(&[map, feat]);
        Ok(self.push(out, rg, Op::BroadcastMul { map, feat }))
    }

    /// scale * x + shift, elementwise.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (E::from_f64(scale), E::from_f64(shift));
        let out = self.nodes[input.0].value.map(|x| s * x + t);
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, rg, Op::Affine { input, scale, shift })
    }

    /// Concatenate along the channel axis, order preserved.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_channels",
                detail: "needs at least one input".into(),
            });
        }
        let first = self.shape(inputs[0]);
        let mut c_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if !s.same_spatial(first) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("input {s} does not match leading input {first}"),
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        let hw = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let c = t.shape().c;
                let src = &t.data()[n * c * hw..(n + 1) * c * hw];
                let dst_start = (n * c_total + c_off) * hw;
                out.data_mut()[dst_start..dst_start + c * hw].copy_from_slice(src);
                c_off += c;
            }
        }
        let rg = self.any_requires(inputs);
        Ok(self.push(
            out,
            rg,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Take channels [start, start+len) of `input`.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input);
        if len == 0 || start + len > s.c {
            return Err(TensorError::InvalidArg {
                op: "slice_channels",
                detail: format!("channels [{start}, {}) out of range for {s}", start + len),
            });
        }
        let t = &self.nodes[input.0].value;
        let hw = s.h * s.w;
        let mut out = Tensor::zeros(Shape::new(s.n, len, s.h, s.w));
        for n in 0..s.n {
            let src = &t.data()[(n * s.c + start) * hw..(n * s.c + start + len) * hw];
            out.data_mut()[n * len * hw..(n + 1) * len * hw].copy_from_slice(src);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, rg, Op::SliceChannels { input, start, len }))
    }

    /// Elementwise absolute value; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, input: Var) -> Var {
        let out = self.nodes[input.0].value.map(|x| x.abs());
        let rg = self.nodes[input.0].requires_grad;
        self.push(out, rg, Op::Abs { input })
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum_all(&mut self, input: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.nodes[input.0].value.data() {
            acc = acc + v;
        }
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(acc), rg, Op::SumAll { input })
    }

    /// Mean of all elements, as a (1,1,1,1) tensor.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let numel = self.nodes[input.0].value.numel();
        let mut acc = E::zero();
        for &v in self.nodes[input.0].value.data() {
            acc = acc + v;
        }
        let mean = acc / E::from_f64(numel as f64);
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(mean), rg, Op::MeanAll { input })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulate d(loss)/d(node) into every node that requires gradients.
    /// `loss` must be scalar-shaped. Calling twice without `clear_grads`
    /// sums the two passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: "tape is empty".into(),
            });
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(TensorError::NonScalarLoss { got: ls });
        }
        self.accum(loss, &Tensor::scalar(E::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else {
                continue;
            };
            self.back_op(i, &g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contribution: &Tensor<E>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (dst, &src) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *dst = *dst + src;
                }
            }
            slot => *slot = Some(contribution.clone()),
        }
    }

    fn accum_if_needed(&mut self, v: Var, contribution: Tensor<E>) {
        if self.nodes[v.0].requires_grad {
            self.accum(v, &contribution);
        }
    }

    fn back_op(&mut self, idx: usize, g: &Tensor<E>) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need_i = self.nodes[input.0].requires_grad;
                let need_w = self.nodes[weight.0].requires_grad;
                let need_b = self.nodes[bias.0].requires_grad;
                let (gi, gw, gb) = conv::backward(
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    stride,
                    padding,
                    g,
                    need_i,
                    need_w,
                    need_b,
                    &mut self.scratch,
                );
                if let Some(gi) = gi {
                    self.accum(input, &gi);
                }
                if let Some(gw) = gw {
                    self.accum(weight, &gw);
                }
                if let Some(gb) = gb {
                    self.accum(bias, &gb);
                }
            }
            Op::Activation { input, kind } => {
                let x = &self.nodes[input.0].value;
                let y = &self.nodes[idx].value;
                let gi = match kind {
                    Activation::LeakyRelu(alpha) => {
                        let a = E::from_f64(alpha);
                        zip_map3(g, x, |gv, xv| {
                            if xv >= E::zero() {
                                gv
                            } else {
                                gv * a
                            }
                        })
                    }
                    // d tanh = 1 - y^2, d sigmoid = y (1 - y): both from the output.
                    Activation::Tanh => zip_map3(g, y, |gv, yv| gv * (E::one() - yv * yv)),
                    Activation::Sigmoid => zip_map3(g, y, |gv, yv| gv * yv * (E::one() - yv)),
                    Activation::Softplus => {
                        zip_map3(g, x, |gv, xv| gv * apply_act(Activation::Sigmoid, xv))
                    }
                };
                self.accum(input, &gi);
            }
            Op::Add { a, b } => {
                self.accum_if_needed(a, g.clone());
                self.accum_if_needed(b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accum_if_needed(a, g.clone());
                self.accum_if_needed(b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let ga = zip_map(g, &self.nodes[b.0].value, |gv, bv| gv * bv);
                    self.accum(a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    let gb = zip_map(g, &self.nodes[a.0].value, |gv, av| gv * av);
                    self.accum(b, &gb);
                }
            }
            Op::BroadcastMul { map, feat } => {
                let fs = self.nodes[feat.0].value.shape();
                let hw = fs.h * fs.w;
                if self.nodes[map.0].requires_grad {
                    // The map's gradient sums the per-channel products.
                    let feat_t = &self.nodes[feat.0].value;
                    let mut gm = Tensor::zeros(Shape::new(fs.n, 1, fs.h, fs.w));
                    for n in 0..fs.n {
                        let dst = &mut gm.data_mut()[n * hw..(n + 1) * hw];
                        for c in 0..fs.c {
                            let off = (n * fs.c + c) * hw;
                            let gp = &g.data()[off..off + hw];
                            let fp = &feat_t.data()[off..off + hw];
                            for i in 0..hw {
                                dst[i] = dst[i] + gp[i] * fp[i];
                            }
                        }
                    }
                    self.accum(map, &gm);
                }
                if self.nodes[feat.0].requires_grad {
                    let map_t = &self.nodes[map.0].value;
                    let mut gf = Tensor::zeros(fs);
                    for n in 0..fs.n {
                        let mp = &map_t.data()[n * hw..(n + 1) * hw];
                        for c in 0..fs.c {
                            let off = (n * fs.c + c) * hw;
                            let gp = &g.data()[off..off + hw];
                            let dst = &mut gf.data_mut()[off..off + hw];
                            for i in 0..hw {
                                dst[i] = gp[i] * mp[i];
                            }
                        }
                    }
                    self.accum(feat, &gf);
                }
            }
            Op::Affine { input, scale, .. } => {
                let s = E::from_f64(scale);
                self.accum_if_needed(input, g.map(|v| v * s));
            }
            Op::ConcatChannels { inputs } => {
                let out_shape = self.nodes[idx].value.shape();
                let hw = out_shape.h * out_shape.w;
                let mut c_off = 0;
                for v in inputs {
                    let s = self.nodes[v.0].value.shape();
                    if self.nodes[v.0].requires_grad {
                        let mut gi = Tensor::zeros(s);
                        for n in 0..s.n {
                            let src = &g.data()
                                [(n * out_shape.c + c_off) * hw..(n * out_shape.c + c_off + s.c) * hw];
                            gi.data_mut()[n * s.c * hw..(n + 1) * s.c * hw].copy_from_slice(src);
                        }
                        self.accum(v, &gi);
                    }
                    c_off += s.c;
                }
            }
            Op::SliceChannels { input, start, len } => {
                let s = self.nodes[input.0].value.shape();
                let hw = s.h * s.w;
                let mut gi = Tensor::zeros(s);
                for n in 0..s.n {
                    let dst =
                        &mut gi.data_mut()[(n * s.c + start) * hw..(n * s.c + start + len) * hw];
                    dst.copy_from_slice(&g.data()[n * len * hw..(n + 1) * len * hw]);
                }
                self.accum(input, &gi);
            }
            Op::Abs { input } => {
                let x = &self.nodes[input.0].value;
                let gi = zip_map3(g, x, |gv, xv| {
                    if xv > E::zero() {
                        gv
                    } else if xv < E::zero() {
                        -gv
                    } else {
                        E::zero()
                    }
                });
                self.accum(input, &gi);
            }
            Op::SumAll { input } => {
                let gv = g.scalar_value();
                let s = self.nodes[input.0].value.shape();
                self.accum_if_needed(input, Tensor::full(s, gv));
            }
            Op::MeanAll { input } => {
                let s = self.nodes[input.0].value.shape();
                let gv = g.scalar_value() / E::from_f64(s.numel() as f64);
                self.accum_if_needed(input, Tensor::full(s, gv));
            }
        }
    }
}

fn apply_act<E: Elem>(kind: Activation, x: E) -> E {
    match kind {
        Activation::LeakyRelu(alpha) => {
            if x >= E::zero() {
                x
            } else {
                E::from_f64(alpha) * x
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => {
            // Evaluate through exp of a non-positive argument on both branches.
            if x >= E::zero() {
                E::one() / (E::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (E::one() + e)
            }
        }
        Activation::Softplus => {
            // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|), stable for large |x|.
            let m = x.max(E::zero());
            m + (E::one() + (-x.abs()).exp()).ln_1p_like()
        }
    }
}

/// ln(1 + (v - 1)) for v = 1 + e^-|x|; spelled out so `Elem` stays small.
trait Ln1pLike {
    fn ln_1p_like(self) -> Self;
}

impl<E: Elem> Ln1pLike for E {
    fn ln_1p_like(self) -> Self {
        self.ln()
    }
}

fn zip_map<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let mut out = Tensor::zeros(a.shape());
    for ((dst, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
        *dst = f(x, y);
    }
    out
}

// Same as zip_map, named separately to keep backward rules readable.
fn zip_map3<E: Elem>(g: &Tensor<E>, v: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    zip_map(g, v, f)
}
