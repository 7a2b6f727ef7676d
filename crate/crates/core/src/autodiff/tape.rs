use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Slope of the negative half of every leaky ReLU in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Added to the variance inside the square root of instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-8;
/// Added to the channel norm before dividing in channel-unit normalization.
pub const UNIT_NORM_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    BlockMatMul,
    Conv2d { stride: usize, pad: usize },
    AddBias,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Square,
    LeakyRelu { slope: f64 },
    Tanh,
    Upsample2x,
    InstanceNorm,
    ChannelAffine,
    ChannelUnitNorm,
    Mean,
    Sum,
    SpatialMean,
    Reshape(Vec<usize>),
    Gather(Arc<[usize]>),
    Slice { start: usize, shape: Vec<usize> },
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::BlockMatMul
            | OpKind::Conv2d { .. }
            | OpKind::AddBias
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul => 2,
            OpKind::ChannelAffine => 3,
            _ => 1,
        }
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    BlockMatMul { x: usize, w: usize, blocks: usize, kin: usize, kout: usize },
    Conv { x: usize, w: usize, geom: ConvGeom, out_ch: usize, cols: Option<Vec<S>> },
    AddBias { x: usize, b: usize, inner: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: S },
    AddScalar { x: usize },
    Square { x: usize },
    LeakyRelu { x: usize, slope: S },
    Tanh { x: usize },
    Upsample { x: usize, c: usize, h: usize, w: usize },
    InstanceNorm { x: usize, c: usize, n: usize, inv_std: Vec<S> },
    ChannelAffine { x: usize, scale: usize, shift: usize, c: usize, n: usize },
    ChannelUnitNorm { x: usize, c: usize, n: usize, norms: Vec<S> },
    Mean { x: usize },
    Sum { x: usize },
    SpatialMean { x: usize, c: usize, n: usize },
    Reshape { x: usize },
    Gather { x: usize, index: Arc<[usize]> },
    Slice { x: usize, start: usize },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-owner; independent tapes may run on different threads.
pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded operation.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        value.check_finite("leaf")?;
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Signs of every leaky-ReLU input recorded so far, in tape order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                out.extend(self.nodes[x].value.data().iter().map(|v| *v > S::zero()));
            }
        }
        out
    }

    fn push_node(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        value.check_finite(name)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        Ok(self.push_node(value, op, needs_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Splits a feature map into `(channels, spatial)` extents.
    fn channels_of(&self, name: &str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(Error::Shape(format!("{name}: needs C×… input, got {s:?}")));
        }
        Ok((s[0], s[1..].iter().product()))
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::Unsupported(format!(
                "{kind:?} takes {} inputs, got {}",
                kind.arity(),
                inputs.len()
            )));
        }
        let i = inputs;
        match kind {
            OpKind::MatMul => self.matmul(i[0], i[1]),
            OpKind::BlockMatMul => self.block_matmul(i[0], i[1]),
            OpKind::Conv2d { stride, pad } => self.conv2d(i[0], i[1], *stride, *pad),
            OpKind::AddBias => self.add_bias(i[0], i[1]),
            OpKind::Add => self.add(i[0], i[1]),
            OpKind::Sub => self.sub(i[0], i[1]),
            OpKind::Mul => self.mul(i[0], i[1]),
            OpKind::Scale(c) => self.scale(i[0], *c),
            OpKind::AddScalar(c) => self.add_scalar(i[0], *c),
            OpKind::Square => self.square(i[0]),
            OpKind::LeakyRelu { slope } => {
                if *slope != LEAKY_SLOPE {
                    return Err(Error::Unsupported(format!("leaky_relu slope {slope}")));
                }
                self.leaky_relu(i[0])
            }
            OpKind::Tanh => self.tanh(i[0]),
            OpKind::Upsample2x => self.upsample2x(i[0]),
            OpKind::InstanceNorm => self.instance_norm(i[0]),
            OpKind::ChannelAffine => self.channel_affine(i[0], i[1], i[2]),
            OpKind::ChannelUnitNorm => self.channel_unit_norm(i[0]),
            OpKind::Mean => self.mean(i[0]),
            OpKind::Sum => self.sum(i[0]),
            OpKind::SpatialMean => self.spatial_mean(i[0]),
            OpKind::Reshape(shape) => self.reshape(i[0], shape.clone()),
            OpKind::Gather(index) => self.gather(i[0], index.clone()),
            OpKind::Slice { start, shape } => self.slice(i[0], *start, shape.clone()),
        }
    }

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        kernels::matmul(m, k, n, self.data(a), self.data(b), &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0])
    }

    /// Block-diagonal product: `x` holds `B` contiguous input blocks of
    /// length `I`; `w` is `B×O×I`. Output is `B×O`, block `b` depending
    /// only on input block `b`.
    pub fn block_matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 || self.value(x).len() != sw[0] * sw[2] {
            return Err(Error::Shape(format!(
                "block_matmul: input {:?} vs weights {sw:?}",
                self.shape(x)
            )));
        }
        let (blocks, kout, kin) = (sw[0], sw[1], sw[2]);
        let mut out = vec![S::zero(); blocks * kout];
        let (xd, wd) = (self.data(x), self.data(w));
        for b in 0..blocks {
            kernels::matmul(
                kout,
                kin,
                1,
                &wd[b * kout * kin..(b + 1) * kout * kin],
                &xd[b * kin..(b + 1) * kin],
                &mut out[b * kout..(b + 1) * kout],
            );
        }
        self.push(
            "block_matmul",
            vec![blocks, kout],
            out,
            Op::BlockMatMul { x: x.0, w: w.0, blocks, kin, kout },
            &[x.0, w.0],
        )
    }

    /// 2-D convolution of a `C×H×W` map with `O×C×k×k` weights (k ∈ {1, 3}).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(Error::Shape(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        let kernel = sw[2];
        let supported = matches!((kernel, stride, pad), (3, 1, 1) | (3, 2, 1) | (1, 1, 0));
        if !supported {
            return Err(Error::Unsupported(format!(
                "conv2d kernel {kernel} stride {stride} pad {pad}"
            )));
        }
        let geom = ConvGeom { channels: sx[0], height: sx[1], width: sx[2], kernel, stride, pad };
        if sx[1] + 2 * pad < kernel || sx[2] + 2 * pad < kernel {
            return Err(Error::Shape(format!("conv2d: input {sx:?} smaller than kernel")));
        }
        let out_ch = sw[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![S::zero(); out_ch * cols_n];
        let cols = if geom.is_pointwise() {
            kernels::matmul(out_ch, rows, cols_n, self.data(w), self.data(x), &mut out);
            None
        } else {
            let cols = kernels::im2col(&geom, self.data(x));
            kernels::matmul(out_ch, rows, cols_n, self.data(w), &cols, &mut out);
            // Columns are only needed again for the weight gradient.
            self.nodes[w.0].needs_grad.then_some(cols)
        };
        self.push(
            "conv2d",
            vec![out_ch, geom.out_height(), geom.out_width()],
            out,
            Op::Conv { x: x.0, w: w.0, geom, out_ch, cols },
            &[x.0, w.0],
        )
    }

    /// Adds `b[i]` to every element of leading slice `i` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if self.value(b).len() != sx[0] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} vs input {sx:?}",
                self.shape(b)
            )));
        }
        let inner = self.value(x).len() / sx[0];
        let bd = self.data(b);
        let out = self
            .data(x)
            .chunks(inner)
            .zip(bd)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        self.push("add_bias", sx, out, Op::AddBias { x: x.0, b: b.0, inner }, &[x.0, b.0])
    }

    fn zip_op(&mut self, name: &str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, op, &[a.0, b.0])
    }

    fn map_op(&mut self, name: &str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, shape, out, op, &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::from_f64(c);
        self.map_op("scale", x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::from_f64(c);
        self.map_op("add_scalar", x, |v| v + c, Op::AddScalar { x: x.0 })
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_op("square", x, |v| v * v, Op::Square { x: x.0 })
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        let slope = S::from_f64(LEAKY_SLOPE);
        self.map_op(
            "leaky_relu",
            x,
            |v| if v > S::zero() { v } else { v * slope },
            Op::LeakyRelu { x: x.0, slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map_op("tanh", x, |v| v.tanh(), Op::Tanh { x: x.0 })
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample2x: needs C×H×W, got {s:?}")));
        }
        let out = kernels::upsample2x(s[0], s[1], s[2], self.data(x));
        self.push(
            "upsample2x",
            vec![s[0], 2 * s[1], 2 * s[2]],
            out,
            Op::Upsample { x: x.0, c: s[0], h: s[1], w: s[2] },
            &[x.0],
        )
    }

    /// Per-channel `(x − μ) / sqrt(σ² + 1e−8)` over the spatial extent.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.channels_of("instance_norm", x)?;
        let (y, inv_std) = kernels::instance_norm(c, n, self.data(x), S::from_f64(INSTANCE_NORM_EPS));
        let shape = self.shape(x).to_vec();
        self.push("instance_norm", shape, y, Op::InstanceNorm { x: x.0, c, n, inv_std }, &[x.0])
    }

    /// `scale[c] · x[c, …] + shift[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (c, n) = self.channels_of("channel_affine", x)?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(Error::Shape(format!(
                "channel_affine: {c} channels, scale {:?}, shift {:?}",
                self.shape(scale),
                self.shape(shift)
            )));
        }
        let (xd, sd, bd) = (self.data(x), self.data(scale), self.data(shift));
        let mut out = vec![S::zero(); c * n];
        for ch in 0..c {
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(&xd[ch * n..(ch + 1) * n]) {
                *o = sd[ch] * v + bd[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "channel_affine",
            shape,
            out,
            Op::ChannelAffine { x: x.0, scale: scale.0, shift: shift.0, c, n },
            &[x.0, scale.0, shift.0],
        )
    }

    /// Divides each spatial vector by its channel L2 norm + 1e−8.
    pub fn channel_unit_norm(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.channels_of("channel_unit_norm", x)?;
        let (y, norms) = kernels::channel_unit_norm(c, n, self.data(x), S::from_f64(UNIT_NORM_EPS));
        let shape = self.shape(x).to_vec();
        self.push("channel_unit_norm", shape, y, Op::ChannelUnitNorm { x: x.0, c, n, norms }, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = S::from_f64(self.value(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<S>() / n;
        self.push("mean", vec![1], vec![s], Op::Mean { x: x.0 }, &[x.0])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().copied().sum::<S>();
        self.push("sum", vec![1], vec![s], Op::Sum { x: x.0 }, &[x.0])
    }

    /// Mean over every axis but the first: `C×… → C`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.channels_of("spatial_mean", x)?;
        let inv = S::one() / S::from_f64(n as f64);
        let out = self.data(x).chunks(n).map(|r| r.iter().copied().sum::<S>() * inv).collect();
        self.push("spatial_mean", vec![c], out, Op::SpatialMean { x: x.0, c, n }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!("reshape: {:?} into {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape, data, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// `out[i] = x[index[i]]`, flattened.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let xd = self.data(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::Shape(format!("gather: index {bad} out of {}", xd.len())));
        }
        let out = index.iter().map(|&i| xd[i]).collect();
        self.push("gather", vec![index.len()], out, Op::Gather { x: x.0, index }, &[x.0])
    }

    /// Contiguous flat slice starting at `start`, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        let xd = self.data(x);
        if start + len > xd.len() {
            return Err(Error::Shape(format!(
                "slice: [{start}, {}) of {}",
                start + len,
                xd.len()
            )));
        }
        let out = xd[start..start + len].to_vec();
        self.push("slice", shape, out, Op::Slice { x: x.0, start }, &[x.0])
    }

    /// Reverse pass from a scalar. The recording is left intact, so the
    /// same forward can be differentiated again.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown variable {}", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(
                    Tensor::new(self.nodes[i].value.shape().to_vec(), g)
                        .expect("gradient shape matches value"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, dy: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].needs_grad;
        let val = |i: usize| nodes[i].value.data();
        fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], i: usize, len: usize) -> &mut Vec<S> {
            grads[i].get_or_insert_with(|| vec![S::zero(); len])
        }
        macro_rules! acc_each {
            ($i:expr, $f:expr) => {{
                let i = $i;
                if wants(i) {
                    let g = slot(grads, i, dy.len());
                    let f = $f;
                    for (k, (o, &d)) in g.iter_mut().zip(dy).enumerate() {
                        *o += f(k, d);
                    }
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let g = slot(grads, a, m * k);
                    kernels::matmul_a_bt_acc(m, n, k, dy, val(b), g);
                }
                if wants(b) {
                    let g = slot(grads, b, k * n);
                    kernels::matmul_at_b_acc(k, m, n, val(a), dy, g);
                }
            }
            &Op::BlockMatMul { x, w, blocks, kin, kout } => {
                if wants(x) {
                    let wd = val(w);
                    let g = slot(grads, x, blocks * kin);
                    for bl in 0..blocks {
                        kernels::matmul_at_b_acc(
                            kin,
                            kout,
                            1,
                            &wd[bl * kout * kin..(bl + 1) * kout * kin],
                            &dy[bl * kout..(bl + 1) * kout],
                            &mut g[bl * kin..(bl + 1) * kin],
                        );
                    }
                }
                if wants(w) {
                    let xd = val(x);
                    let g = slot(grads, w, blocks * kout * kin);
                    for bl in 0..blocks {
                        kernels::matmul_a_bt_acc(
                            kout,
                            1,
                            kin,
                            &dy[bl * kout..(bl + 1) * kout],
                            &xd[bl * kin..(bl + 1) * kin],
                            &mut g[bl * kout * kin..(bl + 1) * kout * kin],
                        );
                    }
                }
            }
            Op::Conv { x, w, geom, out_ch, cols } => {
                let (x, w, out_ch) = (*x, *w, *out_ch);
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                if wants(w) {
                    let colv: &[S] = match cols {
                        Some(c) => c,
                        None => val(x),
                    };
                    let g = slot(grads, w, out_ch * rows);
                    kernels::matmul_a_bt_acc(out_ch, p, rows, dy, colv, g);
                }
                if wants(x) {
                    let xlen = nodes[x].value.len();
                    if geom.is_pointwise() {
                        let g = slot(grads, x, xlen);
                        kernels::matmul_at_b_acc(rows, out_ch, p, val(w), dy, g);
                    } else {
                        let mut dcols = vec![S::zero(); rows * p];
                        kernels::matmul_at_b_acc(rows, out_ch, p, val(w), dy, &mut dcols);
                        let g = slot(grads, x, xlen);
                        kernels::col2im_acc(geom, &dcols, g);
                    }
                }
            }
            &Op::AddBias { x, b, inner } => {
                acc_each!(x, |_, d| d);
                if wants(b) {
                    let nb = nodes[b].value.len();
                    let g = slot(grads, b, nb);
                    for (o, row) in g.iter_mut().zip(dy.chunks(inner)) {
                        *o += row.iter().copied().sum::<S>();
                    }
                }
            }
            &Op::Add { a, b } => {
                acc_each!(a, |_, d| d);
                acc_each!(b, |_, d| d);
            }
            &Op::Sub { a, b } => {
                acc_each!(a, |_, d| d);
                acc_each!(b, |_, d: S| -d);
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                acc_each!(a, |k: usize, d: S| d * bv[k]);
                acc_each!(b, |k: usize, d: S| d * av[k]);
            }
            &Op::Scale { x, c } => acc_each!(x, |_, d: S| d * c),
            &Op::AddScalar { x } => acc_each!(x, |_, d| d),
            &Op::Square { x } => {
                let xv = val(x);
                let two = S::from_f64(2.0);
                acc_each!(x, |k: usize, d: S| two * xv[k] * d);
            }
            &Op::LeakyRelu { x, slope } => {
                let xv = val(x);
                acc_each!(x, |k: usize, d: S| if xv[k] > S::zero() { d } else { d * slope });
            }
            &Op::Tanh { x } => {
                let yv = node.value.data();
                acc_each!(x, |k: usize, d: S| d * (S::one() - yv[k] * yv[k]));
            }
            &Op::Upsample { x, c, h, w } => {
                if wants(x) {
                    let g = slot(grads, x, c * h * w);
                    kernels::upsample2x_backward(c, h, w, dy, g);
                }
            }
            Op::InstanceNorm { x, c, n, inv_std } => {
                if wants(*x) {
                    let g = slot(grads, *x, c * n);
                    kernels::instance_norm_backward(*c, *n, node.value.data(), inv_std, dy, g);
                }
            }
            &Op::ChannelAffine { x, scale, shift, c, n } => {
                let sv = val(scale);
                acc_each!(x, |k: usize, d: S| d * sv[k / n]);
                if wants(scale) {
                    let xv = val(x);
                    let g = slot(grads, scale, c);
                    for ch in 0..c {
                        g[ch] += dy[ch * n..(ch + 1) * n]
                            .iter()
                            .zip(&xv[ch * n..(ch + 1) * n])
                            .map(|(&d, &v)| d * v)
                            .sum::<S>();
                    }
                }
                if wants(shift) {
                    let g = slot(grads, shift, c);
                    for ch in 0..c {
                        g[ch] += dy[ch * n..(ch + 1) * n].iter().copied().sum::<S>();
                    }
                }
            }
            Op::ChannelUnitNorm { x, c, n, norms } => {
                if wants(*x) {
                    let xv = val(*x);
                    let g = slot(grads, *x, c * n);
                    kernels::channel_unit_norm_backward(
                        *c,
                        *n,
                        xv,
                        norms,
                        S::from_f64(UNIT_NORM_EPS),
                        dy,
                        g,
                    );
                }
            }
            &Op::Mean { x } => {
                if wants(x) {
                    let len = nodes[x].value.len();
                    let d = dy[0] / S::from_f64(len as f64);
                    for o in slot(grads, x, len).iter_mut() {
                        *o += d;
                    }
                }
            }
            &Op::Sum { x } => {
                if wants(x) {
                    let len = nodes[x].value.len();
                    for o in slot(grads, x, len).iter_mut() {
                        *o += dy[0];
                    }
                }
            }
            &Op::SpatialMean { x, c, n } => {
                if wants(x) {
                    let inv = S::one() / S::from_f64(n as f64);
                    let g = slot(grads, x, c * n);
                    for (row, &d) in g.chunks_mut(n).zip(dy) {
                        for o in row.iter_mut() {
                            *o += d * inv;
                        }
                    }
                }
            }
            &Op::Reshape { x } => acc_each!(x, |_, d| d),
            Op::Gather { x, index } => {
                if wants(*x) {
                    let len = nodes[*x].value.len();
                    let g = slot(grads, *x, len);
                    for (&i, &d) in index.iter().zip(dy) {
                        g[i] += d;
                    }
                }
            }
            &Op::Slice { x, start } => {
                if wants(x) {
                    let len = nodes[x].value.len();
                    let g = slot(grads, x, len);
                    for (o, &d) in g[start..start + dy.len()].iter_mut().zip(dy) {
                        *o += d;
                    }
                }
            }
        }
    }
}
