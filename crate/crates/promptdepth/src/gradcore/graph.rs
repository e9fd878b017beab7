//! Tape-based reverse-mode differentiation over dense f32 tensors.
//!
//! Forward values are computed eagerly as ops are recorded, so the tape is a
//! topologically ordered Wengert list by construction. Backward walks it once
//! in reverse. One graph has one owner; independent graphs may run on
//! independent threads.

use super::fft;
use super::kernels as kn;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Sigmoid,
    Relu,
    LeakyRelu { alpha: f32 },
    Square,
    Exp,
    Sqrt,
    Recip,
    Affine { a: f32, b: f32 },
    Clamp { lo: Vec<f32>, hi: Vec<f32> },
    Add,
    Sub,
    Mul,
    BiasChannel,
    ChannelAffine { a: Vec<f32>, b: Vec<f32> },
    Conv2d { stride: usize, padding: usize },
    ConcatChannels,
    SliceChannels { from: usize, to: usize },
    Up2,
    Down2,
    Shift2d { dy: isize, dx: isize },
    Reshape,
    Ifft2,
    Reduce { kind: ReduceKind, mask: Option<Vec<bool>> },
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("need rank >= 2, got {shape:?}")));
    }
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes: usize = shape[..shape.len() - 2].iter().product();
    Ok((planes, h, w))
}

fn channel_dim(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        _ => Err(Error::shape(format!("need rank 3 or 4, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a shape-[1] node. Panics on a non-scalar node.
    pub fn scalar(&self, id: NodeId) -> f32 {
        assert_eq!(self.nodes[id.0].value.len(), 1, "node is not a scalar");
        self.nodes[id.0].value[0]
    }

    /// Gradient buffer of a node after `backward`; None where none was tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ----- leaves -----------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Constant, vec![], t.shape.clone(), t.data.clone(), false)
    }

    pub fn constant_slice(&mut self, shape: &[usize], data: &[f32]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "constant shape {shape:?} vs data length {}",
                data.len()
            )));
        }
        Ok(self.push(Op::Constant, vec![], shape.to_vec(), data.to_vec(), false))
    }

    pub fn scalar_const(&mut self, v: f32) -> NodeId {
        self.push(Op::Constant, vec![], vec![1], vec![v], false)
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f32>,
        requires_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records an op after validating that its forward value is finite.
    fn record(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<f32>,
    ) -> Result<NodeId> {
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "{op:?} produced {} at element {i}",
                value[i]
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(op, inputs, shape, value, requires_grad))
    }

    // ----- elementwise unary --------------------------------------------------

    fn unary(&mut self, op: Op, x: NodeId, f: impl Fn(f32) -> f32) -> Result<NodeId> {
        let value: Vec<f32> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.record(op, vec![x.0], shape, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sigmoid, x, kn::sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f32) -> Result<NodeId> {
        self.unary(Op::LeakyRelu { alpha }, x, |v| if v > 0.0 { v } else { alpha * v })
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Square, x, |v| v * v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Exp, x, f32::exp)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Sqrt, x, f32::sqrt)
    }

    pub fn recip(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Op::Recip, x, f32::recip)
    }

    pub fn affine(&mut self, x: NodeId, a: f32, b: f32) -> Result<NodeId> {
        self.unary(Op::Affine { a, b }, x, |v| a * v + b)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        self.affine(x, c, 0.0)
    }

    pub fn offset(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        self.affine(x, 1.0, c)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> Result<NodeId> {
        self.clamp_channels(x, &[lo], &[hi])
    }

    /// Clamp with per-channel bounds when `lo`/`hi` have length C, scalar when 1.
    pub fn clamp_channels(&mut self, x: NodeId, lo: &[f32], hi: &[f32]) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let per_channel = lo.len() > 1 || hi.len() > 1;
        let (c, plane) = if per_channel {
            let cd = channel_dim(&shape)?;
            let c = shape[cd];
            if (lo.len() != 1 && lo.len() != c) || (hi.len() != 1 && hi.len() != c) {
                return Err(Error::shape(format!(
                    "clamp bounds length {}/{} vs {c} channels",
                    lo.len(),
                    hi.len()
                )));
            }
            (c, shape[cd + 1..].iter().product::<usize>())
        } else {
            (1, self.nodes[x.0].value.len())
        };
        let xs = &self.nodes[x.0].value;
        let mut value = vec![0.0f32; xs.len()];
        let batch = xs.len() / (c * plane);
        for b in 0..batch {
            for ch in 0..c {
                let l = lo[ch % lo.len()];
                let hb = hi[ch % hi.len()];
                let base = (b * c + ch) * plane;
                for i in 0..plane {
                    value[base + i] = xs[base + i].clamp(l, hb);
                }
            }
        }
        self.record(
            Op::Clamp {
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
            vec![x.0],
            shape,
            value,
        )
    }

    // ----- elementwise binary ---------------------------------------------------

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f32, f32) -> f32) -> Result<NodeId> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (value, shape) = if la == lb {
            if self.nodes[a.0].shape != self.nodes[b.0].shape {
                return Err(Error::shape(format!(
                    "{op:?}: {:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                )));
            }
            (
                va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>(),
                self.nodes[a.0].shape.clone(),
            )
        } else if la == 1 {
            (
                vb.iter().map(|&y| f(va[0], y)).collect(),
                self.nodes[b.0].shape.clone(),
            )
        } else if lb == 1 {
            (
                va.iter().map(|&x| f(x, vb[0])).collect(),
                self.nodes[a.0].shape.clone(),
            )
        } else {
            return Err(Error::shape(format!(
                "{op:?}: incompatible lengths {la} vs {lb} (only scalar broadcast)"
            )));
        };
        self.record(op, vec![a.0, b.0], shape, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    // ----- channel ops -------------------------------------------------------------

    /// x + b[c] with a learnable rank-1 bias node of length C.
    pub fn bias_channel(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let cd = channel_dim(&shape)?;
        let c = shape[cd];
        if self.nodes[b.0].value.len() != c {
            return Err(Error::shape(format!(
                "bias length {} vs {c} channels",
                self.nodes[b.0].value.len()
            )));
        }
        let plane: usize = shape[cd + 1..].iter().product();
        let xs = &self.nodes[x.0].value;
        let bs = &self.nodes[b.0].value;
        let mut value = vec![0.0f32; xs.len()];
        let batch = xs.len() / (c * plane);
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let bv = bs[ch];
                for i in 0..plane {
                    value[base + i] = xs[base + i] + bv;
                }
            }
        }
        self.record(Op::BiasChannel, vec![x.0, b.0], shape, value)
    }

    /// a[c]*x + b[c] with constant per-channel coefficients (input normalization).
    pub fn channel_affine(&mut self, x: NodeId, a: &[f32], b: &[f32]) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape.clone();
        let cd = channel_dim(&shape)?;
        let c = shape[cd];
        if a.len() != c || b.len() != c {
            return Err(Error::shape(format!(
                "channel affine coeff lengths {}/{} vs {c} channels",
                a.len(),
                b.len()
            )));
        }
        let plane: usize = shape[cd + 1..].iter().product();
        let xs = &self.nodes[x.0].value;
        let mut value = vec![0.0f32; xs.len()];
        let batch = xs.len() / (c * plane);
        for bi in 0..batch {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for i in 0..plane {
                    value[base + i] = a[ch] * xs[base + i] + b[ch];
                }
            }
        }
        self.record(
            Op::ChannelAffine {
                a: a.to_vec(),
                b: b.to_vec(),
            },
            vec![x.0],
            shape,
            value,
        )
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let cd = channel_dim(&sa)?;
        if sa.len() != sb.len() || sa[..cd] != sb[..cd] || sa[cd + 1..] != sb[cd + 1..] {
            return Err(Error::shape(format!("concat: {sa:?} vs {sb:?}")));
        }
        let ca = sa[cd];
        let cb = sb[cd];
        let plane: usize = sa[cd + 1..].iter().product();
        let batch: usize = sa[..cd].iter().product();
        let mut shape = sa.clone();
        shape[cd] = ca + cb;
        let mut value = vec![0.0f32; batch * (ca + cb) * plane];
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        for bi in 0..batch {
            let out_base = bi * (ca + cb) * plane;
            value[out_base..out_base + ca * plane]
                .copy_from_slice(&va[bi * ca * plane..(bi + 1) * ca * plane]);
            value[out_base + ca * plane..out_base + (ca + cb) * plane]
                .copy_from_slice(&vb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        self.record(Op::ConcatChannels, vec![a.0, b.0], shape, value)
    }

    pub fn slice_channels(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let cd = channel_dim(&sx)?;
        let c = sx[cd];
        if from >= to || to > c {
            return Err(Error::shape(format!("slice {from}..{to} of {c} channels")));
        }
        let plane: usize = sx[cd + 1..].iter().product();
        let batch: usize = sx[..cd].iter().product();
        let mut shape = sx.clone();
        shape[cd] = to - from;
        let vx = &self.nodes[x.0].value;
        let mut value = vec![0.0f32; batch * (to - from) * plane];
        for bi in 0..batch {
            let src = (bi * c + from) * plane;
            let dst = bi * (to - from) * plane;
            value[dst..dst + (to - from) * plane].copy_from_slice(&vx[src..src + (to - from) * plane]);
        }
        self.record(Op::SliceChannels { from, to }, vec![x.0], shape, value)
    }

    // ----- convolution and resampling ------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let sw = self.nodes[w.0].shape.clone();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants [N,C,H,W] and [Co,Ci,k,k], got {sx:?} and {sw:?}"
            )));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cink, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if cin != cink {
            return Err(Error::shape(format!(
                "channel mismatch: input has {cin}, kernel expects {cink}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be >= 1".to_string()));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kh {
            return Err(Error::shape(format!(
                "degenerate conv output for {h}x{wd} with k={kh} pad={padding}"
            )));
        }
        let ho = kn::conv_out_dim(h, kh, stride, padding);
        let wo = kn::conv_out_dim(wd, kh, stride, padding);
        if ho < 1 || wo < 1 {
            return Err(Error::shape("degenerate conv output size".to_string()));
        }
        let mut value = vec![0.0f32; n * cout * ho * wo];
        kn::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &mut value,
            n,
            cin,
            h,
            wd,
            cout,
            kh,
            stride,
            padding,
        );
        self.record(
            Op::Conv2d { stride, padding },
            vec![x.0, w.0],
            vec![n, cout, ho, wo],
            value,
        )
    }

    pub fn up2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let (planes, h, w) = spatial(&sx)?;
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 2] = h * 2;
        shape[r - 1] = w * 2;
        let mut value = vec![0.0f32; planes * h * w * 4];
        kn::up2_forward(&self.nodes[x.0].value, planes, h, w, &mut value);
        self.record(Op::Up2, vec![x.0], shape, value)
    }

    pub fn down2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let (planes, h, w) = spatial(&sx)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("down2 needs even dims, got {h}x{w}")));
        }
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        let mut value = vec![0.0f32; planes * h * w / 4];
        kn::down2_forward(&self.nodes[x.0].value, planes, h, w, &mut value);
        self.record(Op::Down2, vec![x.0], shape, value)
    }

    /// out[y][x] = in[y+dy][x+dx], zero outside; exact adjoint in backward.
    pub fn shift2d(&mut self, x: NodeId, dy: isize, dx: isize) -> Result<NodeId> {
        let sx = self.nodes[x.0].shape.clone();
        let (planes, h, w) = spatial(&sx)?;
        let mut value = vec![0.0f32; planes * h * w];
        kn::shift2d(&self.nodes[x.0].value, planes, h, w, dy, dx, &mut value);
        self.record(Op::Shift2d { dy, dx }, vec![x.0], sx, value)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::shape(format!(
                "reshape to {shape:?} ({n}) from {} elements",
                self.nodes[x.0].value.len()
            )));
        }
        let value = self.nodes[x.0].value.clone();
        self.record(Op::Reshape, vec![x.0], shape.to_vec(), value)
    }

    // ----- spectral ---------------------------------------------------------------------

    /// Real part of the per-channel inverse 2D DFT (1/(H*W) on the inverse).
    pub fn ifft2(&mut self, re: NodeId, im: NodeId) -> Result<NodeId> {
        let sr = self.nodes[re.0].shape.clone();
        let si = self.nodes[im.0].shape.clone();
        if sr != si || sr.len() != 3 {
            return Err(Error::shape(format!(
                "ifft2 wants matching [C,H,W] pairs, got {sr:?} and {si:?}"
            )));
        }
        let (c, h, w) = (sr[0], sr[1], sr[2]);
        let mut value = vec![0.0f32; c * h * w];
        for ch in 0..c {
            let lo = ch * h * w;
            let hi = lo + h * w;
            let (out_re, _) = fft::ifft2_complex(
                &self.nodes[re.0].value[lo..hi],
                &self.nodes[im.0].value[lo..hi],
                h,
                w,
            )?;
            value[lo..hi].copy_from_slice(&out_re);
        }
        self.record(Op::Ifft2, vec![re.0, im.0], sr, value)
    }

    // ----- reductions ----------------------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let xs = &self.nodes[x.0].value;
        if let Some(m) = mask {
            if m.len() != xs.len() {
                return Err(Error::shape(format!(
                    "mask length {} vs {} elements",
                    m.len(),
                    xs.len()
                )));
            }
        }
        let mut count = 0usize;
        let mut sum = 0.0f64;
        let mut best = f32::NAN;
        let mut best_set = false;
        for (i, &v) in xs.iter().enumerate() {
            if let Some(m) = mask {
                if !m[i] {
                    continue;
                }
            }
            count += 1;
            sum += v as f64;
            if !best_set {
                best = v;
                best_set = true;
            } else {
                match kind {
                    ReduceKind::Min if v < best => best = v,
                    ReduceKind::Max if v > best => best = v,
                    _ => {}
                }
            }
        }
        if count == 0 {
            return Err(Error::EmptySelection("reduction over empty mask".to_string()));
        }
        let out = match kind {
            ReduceKind::Sum => sum as f32,
            ReduceKind::Mean => (sum / count as f64) as f32,
            ReduceKind::Min | ReduceKind::Max => best,
        };
        self.record(
            Op::Reduce {
                kind,
                mask: mask.map(|m| m.to_vec()),
            },
            vec![x.0],
            vec![1],
            vec![out],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn min(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(ReduceKind::Min, x, None)
    }

    pub fn max(&mut self, x: NodeId) -> Result<NodeId> {
        self.reduce(ReduceKind::Max, x, None)
    }

    pub fn sum_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.reduce(ReduceKind::Sum, x, Some(mask))
    }

    pub fn mean_masked(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.reduce(ReduceKind::Mean, x, Some(mask))
    }

    // ----- backward ---------------------------------------------------------------------------

    /// Reverse pass from a scalar output. Every `requires_grad` node ends up
    /// with a populated gradient buffer (zeros if disconnected from `out`).
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::shape("backward starts from a scalar node".to_string()));
        }
        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0f32; node.value.len()]);
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.nodes[out.0].grad.as_mut().unwrap()[0] = 1.0;
        for i in (0..=out.0).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            let g = node.grad.as_ref().unwrap();
            backward_one(node, g, before)?;
        }
        Ok(())
    }
}

/// Temporarily removes the gradient buffer of `before[idx]`, if tracked.
fn take_grad(before: &mut [Node], idx: usize) -> Option<Vec<f32>> {
    before[idx].grad.take()
}

fn put_grad(before: &mut [Node], idx: usize, g: Option<Vec<f32>>) {
    if let Some(g) = g {
        before[idx].grad = Some(g);
    }
}

fn backward_one(node: &Node, g: &[f32], before: &mut [Node]) -> Result<()> {
    let in0 = node.inputs[0];
    match &node.op {
        Op::Leaf | Op::Constant => {}

        Op::Sigmoid => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &s), &gv) in gi.iter_mut().zip(node.value.iter()).zip(g.iter()) {
                    *d += gv * s * (1.0 - s);
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Relu => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &x), &gv) in gi.iter_mut().zip(before[in0].value.iter()).zip(g.iter()) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::LeakyRelu { alpha } => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &x), &gv) in gi.iter_mut().zip(before[in0].value.iter()).zip(g.iter()) {
                    *d += if x > 0.0 { gv } else { alpha * gv };
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Square => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &x), &gv) in gi.iter_mut().zip(before[in0].value.iter()).zip(g.iter()) {
                    *d += 2.0 * x * gv;
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Exp => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &y), &gv) in gi.iter_mut().zip(node.value.iter()).zip(g.iter()) {
                    *d += y * gv;
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Sqrt => {
            if let Some(mut gi) = take_grad(before, in0) {
                // Floor keeps the gradient finite at exactly zero.
                for ((d, &y), &gv) in gi.iter_mut().zip(node.value.iter()).zip(g.iter()) {
                    *d += gv * 0.5 / y.max(1e-12);
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Recip => {
            if let Some(mut gi) = take_grad(before, in0) {
                for ((d, &y), &gv) in gi.iter_mut().zip(node.value.iter()).zip(g.iter()) {
                    *d -= gv * y * y;
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Affine { a, .. } => {
            if let Some(mut gi) = take_grad(before, in0) {
                for (d, &gv) in gi.iter_mut().zip(g.iter()) {
                    *d += a * gv;
                }
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Clamp { lo, hi } => {
            if let Some(mut gi) = take_grad(before, in0) {
                let c = lo.len().max(hi.len());
                let plane = if c > 1 {
                    let cd = channel_dim(&node.shape)?;
                    node.shape[cd + 1..].iter().product::<usize>()
                } else {
                    g.len()
                };
                for (i, ((d, &x), &gv)) in gi
                    .iter_mut()
                    .zip(before[in0].value.iter())
                    .zip(g.iter())
                    .enumerate()
                {
                    let ch = (i / plane) % c;
                    let l = lo[ch % lo.len()];
                    let hb = hi[ch % hi.len()];
                    if x > l && x < hb {
                        *d += gv;
                    }
                }
                put_grad(before, in0, Some(gi));
            }
        }

        Op::Add | Op::Sub | Op::Mul => {
            let in1 = node.inputs[1];
            let la = before[in0].value.len();
            let lb = before[in1].value.len();
            let is_mul = matches!(node.op, Op::Mul);
            let sign_b = if matches!(node.op, Op::Sub) { -1.0f32 } else { 1.0 };
            if let Some(mut ga) = take_grad(before, in0) {
                if la >= lb {
                    // a full (or equal); b may be scalar
                    for (i, (d, &gv)) in ga.iter_mut().zip(g.iter()).enumerate() {
                        let contrib = if is_mul {
                            gv * before[in1].value[if lb == 1 { 0 } else { i }]
                        } else {
                            gv
                        };
                        *d += contrib;
                    }
                } else {
                    // a scalar
                    let mut acc = 0.0f32;
                    for (i, &gv) in g.iter().enumerate() {
                        acc += if is_mul { gv * before[in1].value[i] } else { gv };
                    }
                    ga[0] += acc;
                }
                put_grad(before, in0, Some(ga));
            }
            if let Some(mut gb) = take_grad(before, in1) {
                if lb >= la {
                    for (i, (d, &gv)) in gb.iter_mut().zip(g.iter()).enumerate() {
                        let contrib = if is_mul {
                            gv * before[in0].value[if la == 1 { 0 } else { i }]
                        } else {
                            gv * sign_b
                        };
                        *d += contrib;
                    }
                } else {
                    // b scalar
                    let mut acc = 0.0f32;
                    for (i, &gv) in g.iter().enumerate() {
                        acc += if is_mul { gv * before[in0].value[i] } else { gv * sign_b };
                    }
                    gb[0] += acc;
                }
                put_grad(before, in1, Some(gb));
            }
        }

        Op::BiasChannel => {
            let in1 = node.inputs[1];
            let cd = channel_dim(&node.shape)?;
            let c = node.shape[cd];
            let plane: usize = node.shape[cd + 1..].iter().product();
            if let Some(mut gx) = take_grad(before, in0) {
                for (d, &gv) in gx.iter_mut().zip(g.iter()) {
                    *d += gv;
                }
                put_grad(before, in0, Some(gx));
            }
            if let Some(mut gb) = take_grad(before, in1) {
                let batch = g.len() / (c * plane);
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        let mut acc = 0.0f32;
                        for i in 0..plane {
                            acc += g[base + i];
                        }
                        gb[ch] += acc;
                    }
                }
                put_grad(before, in1, Some(gb));
            }
        }
        Op::ChannelAffine { a, .. } => {
            if let Some(mut gx) = take_grad(before, in0) {
                let c = a.len();
                let cd = channel_dim(&node.shape)?;
                let plane: usize = node.shape[cd + 1..].iter().product();
                let batch = g.len() / (c * plane);
                for bi in 0..batch {
                    for ch in 0..c {
                        let base = (bi * c + ch) * plane;
                        for i in 0..plane {
                            gx[base + i] += a[ch] * g[base + i];
                        }
                    }
                }
                put_grad(before, in0, Some(gx));
            }
        }

        Op::Conv2d { stride, padding } => {
            let in1 = node.inputs[1];
            let (n, cin, h, w) = {
                let s = &before[in0].shape;
                (s[0], s[1], s[2], s[3])
            };
            let (cout, k) = {
                let s = &before[in1].shape;
                (s[0], s[2])
            };
            if let Some(mut gi) = take_grad(before, in0) {
                kn::conv2d_backward_input(
                    g,
                    &before[in1].value,
                    &mut gi,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                    *stride,
                    *padding,
                );
                put_grad(before, in0, Some(gi));
            }
            if let Some(mut gw) = take_grad(before, in1) {
                kn::conv2d_backward_kernel(
                    g,
                    &before[in0].value,
                    &mut gw,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    k,
                    *stride,
                    *padding,
                );
                put_grad(before, in1, Some(gw));
            }
        }

        Op::ConcatChannels => {
            let in1 = node.inputs[1];
            let cd = channel_dim(&node.shape)?;
            let plane: usize = node.shape[cd + 1..].iter().product();
            let batch: usize = node.shape[..cd].iter().product();
            let ca = before[in0].shape[cd];
            let cb = before[in1].shape[cd];
            if let Some(mut ga) = take_grad(before, in0) {
                for bi in 0..batch {
                    let src = bi * (ca + cb) * plane;
                    let dst = bi * ca * plane;
                    for i in 0..ca * plane {
                        ga[dst + i] += g[src + i];
                    }
                }
                put_grad(before, in0, Some(ga));
            }
            if let Some(mut gb) = take_grad(before, in1) {
                for bi in 0..batch {
                    let src = bi * (ca + cb) * plane + ca * plane;
                    let dst = bi * cb * plane;
                    for i in 0..cb * plane {
                        gb[dst + i] += g[src + i];
                    }
                }
                put_grad(before, in1, Some(gb));
            }
        }
        Op::SliceChannels { from, to } => {
            if let Some(mut gx) = take_grad(before, in0) {
                let cd = channel_dim(&node.shape)?;
                let plane: usize = node.shape[cd + 1..].iter().product();
                let batch: usize = node.shape[..cd].iter().product();
                let c_in = before[in0].shape[cd];
                let span = to - from;
                for bi in 0..batch {
                    let src = bi * span * plane;
                    let dst = (bi * c_in + from) * plane;
                    for i in 0..span * plane {
                        gx[dst + i] += g[src + i];
                    }
                }
                put_grad(before, in0, Some(gx));
            }
        }

        Op::Up2 => {
            if let Some(mut gi) = take_grad(before, in0) {
                let (planes, h, w) = spatial(&before[in0].shape)?;
                kn::up2_backward(g, planes, h, w, &mut gi);
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Down2 => {
            if let Some(mut gi) = take_grad(before, in0) {
                let (planes, h, w) = spatial(&before[in0].shape)?;
                kn::down2_backward(g, planes, h, w, &mut gi);
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Shift2d { dy, dx } => {
            if let Some(mut gi) = take_grad(before, in0) {
                let (planes, h, w) = spatial(&node.shape)?;
                kn::shift2d_adjoint(g, planes, h, w, *dy, *dx, &mut gi);
                put_grad(before, in0, Some(gi));
            }
        }
        Op::Reshape => {
            if let Some(mut gi) = take_grad(before, in0) {
                for (d, &gv) in gi.iter_mut().zip(g.iter()) {
                    *d += gv;
                }
                put_grad(before, in0, Some(gi));
            }
        }

        Op::Ifft2 => {
            let in1 = node.inputs[1];
            let (c, h, w) = (node.shape[0], node.shape[1], node.shape[2]);
            let scale = 1.0 / (h * w) as f32;
            let need_re = before[in0].grad.is_some();
            let need_im = before[in1].grad.is_some();
            if need_re || need_im {
                for ch in 0..c {
                    let lo = ch * h * w;
                    let (gr, gi_part) = fft::fft2_real(&g[lo..lo + h * w], h, w)?;
                    if need_re {
                        let gre = before[in0].grad.as_mut().unwrap();
                        for i in 0..h * w {
                            gre[lo + i] += gr[i] * scale;
                        }
                    }
                    if need_im {
                        let gim = before[in1].grad.as_mut().unwrap();
                        for i in 0..h * w {
                            gim[lo + i] += gi_part[i] * scale;
                        }
                    }
                }
            }
        }

        Op::Reduce { kind, mask } => {
            if let Some(mut gi) = take_grad(before, in0) {
                let gv = g[0];
                let xs = &before[in0].value;
                let selected = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                match kind {
                    ReduceKind::Sum => {
                        for (i, d) in gi.iter_mut().enumerate() {
                            if selected(i) {
                                *d += gv;
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let count = match mask {
                            Some(m) => m.iter().filter(|&&b| b).count(),
                            None => xs.len(),
                        };
                        let share = gv / count as f32;
                        for (i, d) in gi.iter_mut().enumerate() {
                            if selected(i) {
                                *d += share;
                            }
                        }
                    }
                    ReduceKind::Min | ReduceKind::Max => {
                        // First attaining element in row-major order gets it all.
                        let target = node.value[0];
                        for (i, &v) in xs.iter().enumerate() {
                            if selected(i) && v == target {
                                gi[i] += gv;
                                break;
                            }
                        }
                    }
                }
                put_grad(before, in0, Some(gi));
            }
        }
    }
    Ok(())
}
