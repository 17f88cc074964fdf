use super::kernels::{self, ConvGeom};
use super::{dim_err, Scalar, Tensor, TensorError};
use crate::par::Exec;

/// Floor under the square root of the Pearson denominator.
pub const PEARSON_EPS: f64 = 1e-8;
/// Floor on the variance when standardizing a series.
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves extents (`k - 1` split low-first).
    Same,
    /// No padding; output extent is `n - k + 1`.
    Valid,
}

/// Result of [`Graph::neg_pearson_loss`].
#[derive(Debug, Clone, Copy)]
pub struct PearsonLoss {
    pub loss: Var,
    /// Set when either series has zero variance; the loss is then 0.
    pub degenerate: bool,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Conv { input: Var, kernel: Var, geom: ConvGeom },
    AddBias { input: Var, bias: Var, channels: usize },
    Relu { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: S },
    Concat { a: Var, b: Var },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var, channels: usize, ext: [usize; 3], factor: [usize; 3] },
    Gather { input: Var, index: Vec<usize> },
    Reshape { input: Var },
    Mse { pred: Var, target: Var },
    NegPearson { x: Var, y: Var },
    FrameDot { volume: Var, map: Var, frames: usize },
    Standardize { input: Var },
}

#[derive(Debug)]
struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// A recording of tensor operations, differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    exec: Exec,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a spatial tensor shape into `(channels, [D, H, W])`.
fn spatial(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3]), TensorError> {
    match *shape {
        [c, l] => Ok((c, [1, 1, l])),
        [c, d, h, w] => Ok((c, [d, h, w])),
        _ => Err(dim_err(
            op,
            0,
            format!("expected [C, L] or [C, D, H, W], got {:?}", shape),
        )),
    }
}

fn spatial_shape(rank: usize, channels: usize, ext: [usize; 3]) -> Vec<usize> {
    if rank == 2 {
        vec![channels, ext[2]]
    } else {
        vec![channels, ext[0], ext[1], ext[2]]
    }
}

/// The axes of `[D, H, W]` a rank-`rank` tensor really has.
fn active_axes(rank: usize) -> std::ops::Range<usize> {
    if rank == 2 {
        2..3
    } else {
        0..3
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv(
        &mut self,
        op: &'static str,
        input: Var,
        kernel: Var,
        padding: Padding,
        rank: usize,
    ) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        if ishape.len() != rank {
            return Err(dim_err(op, 0, format!("input rank {} (shape {:?})", ishape.len(), ishape)));
        }
        if kshape.len() != rank + 1 {
            return Err(dim_err(op, 0, format!("kernel rank {} (shape {:?})", kshape.len(), kshape)));
        }
        if kshape[1] != ishape[0] {
            return Err(dim_err(
                op,
                0,
                format!("kernel expects {} input channels, input has {}", kshape[1], ishape[0]),
            ));
        }
        let (c_in, in_ext) = spatial(op, &ishape)?;
        let k = if rank == 2 {
            [1, 1, kshape[2]]
        } else {
            [kshape[2], kshape[3], kshape[4]]
        };
        let mut pad_lo = [0; 3];
        let mut out_ext = [1; 3];
        for a in active_axes(rank) {
            let (lo, hi) = match padding {
                Padding::Same => ((k[a] - 1) / 2, k[a] - 1 - (k[a] - 1) / 2),
                Padding::Valid => (0, 0),
            };
            let padded = in_ext[a] + lo + hi;
            if k[a] > padded {
                let axis = a + 1 - (3 - (rank - 1));
                return Err(dim_err(
                    op,
                    axis,
                    format!("kernel extent {} exceeds padded input extent {}", k[a], padded),
                ));
            }
            pad_lo[a] = lo;
            out_ext[a] = padded - k[a] + 1;
        }
        let geom = ConvGeom {
            c_in,
            c_out: kshape[0],
            in_ext,
            k,
            pad_lo,
            out_ext,
        };
        let data = kernels::conv_forward(
            self.exec,
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
        );
        let shape = spatial_shape(rank, geom.c_out, out_ext);
        Ok(self.push(shape, data, Op::Conv { input, kernel, geom }, &[input, kernel]))
    }

    /// 3D cross-correlation: `[C_in, D, H, W] * [C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var, TensorError> {
        self.conv("conv3d", input, kernel, padding, 4)
    }

    /// 1D cross-correlation: `[C_in, L] * [C_out, C_in, k]`.
    pub fn conv1d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var, TensorError> {
        self.conv("conv1d", input, kernel, padding, 2)
    }

    /// Adds `bias[c]` to every cell of channel `c`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        let channels = shape[0];
        if self.shape(bias).iter().product::<usize>() != channels {
            return Err(dim_err(
                "add_bias",
                0,
                format!("bias has {} entries for {} channels", self.value(bias).len(), channels),
            ));
        }
        let per = self.value(input).len() / channels;
        let b = self.value(bias).data();
        let data = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i / per])
            .collect();
        Ok(self.push(shape, data, Op::AddBias { input, bias, channels }, &[input, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self
            .value(input)
            .data()
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        self.push(shape, data, Op::Relu { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa.iter().zip(sb).position(|(x, y)| x != y).unwrap_or(0);
            return Err(dim_err("add", axis, format!("{:?} vs {:?}", sa, sb)));
        }
        let shape = sa.to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(shape, data, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: S) -> Var {
        let shape = self.shape(input).to_vec();
        let data = self.value(input).data().iter().map(|&x| x * factor).collect();
        self.push(shape, data, Op::Scale { input, factor }, &[input])
    }

    /// Concatenates along the leading (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(dim_err("concat_channels", 0, format!("rank {:?} vs {:?}", sa, sb)));
        }
        if let Some(axis) = (1..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(dim_err(
                "concat_channels",
                axis,
                format!("{} vs {}", sa[axis], sb[axis]),
            ));
        }
        let mut shape = sa.to_vec();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        Ok(self.push(shape, data, Op::Concat { a, b }, &[a, b]))
    }

    /// Max pooling with the same `window` on every spatial axis.
    ///
    /// Axes not divisible by `window` are replicate-padded on the trailing
    /// face, so the output extent is `ceil(n / window)`.
    pub fn maxpool(&mut self, input: Var, window: usize) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        let (c, ext) = spatial("maxpool", &shape)?;
        let mut win = [1; 3];
        for a in active_axes(shape.len()) {
            if window > ext[a] {
                let axis = a + shape.len() - 3;
                return Err(dim_err(
                    "maxpool",
                    axis,
                    format!("window {} larger than extent {}", window, ext[a]),
                ));
            }
            win[a] = window;
        }
        let (data, argmax) =
            kernels::maxpool_forward(self.exec, c, ext, win, self.value(input).data());
        let out = spatial_shape(shape.len(), c, kernels::pooled_extent(ext, win));
        Ok(self.push(out, data, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Nearest-neighbour upsampling by `factor` on every spatial axis.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        let (c, ext) = spatial("upsample", &shape)?;
        let mut f = [1; 3];
        for a in active_axes(shape.len()) {
            f[a] = factor;
        }
        let data = kernels::upsample_forward(c, ext, f, self.value(input).data());
        let out = spatial_shape(shape.len(), c, [ext[0] * f[0], ext[1] * f[1], ext[2] * f[2]]);
        Ok(self.push(out, data, Op::Upsample { input, channels: c, ext, factor: f }, &[input]))
    }

    fn resize_spatial(
        &mut self,
        op: &'static str,
        input: Var,
        target: &[usize],
        grow: bool,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(input).to_vec();
        let (c, ext) = spatial(op, &shape)?;
        if target.len() != shape.len() - 1 {
            return Err(dim_err(op, 0, format!("target {:?} for shape {:?}", target, shape)));
        }
        let mut out_ext = ext;
        for (i, a) in active_axes(shape.len()).enumerate() {
            let ok = if grow { target[i] >= ext[a] } else { target[i] <= ext[a] && target[i] > 0 };
            if !ok {
                return Err(dim_err(
                    op,
                    i + 1,
                    format!("cannot take extent {} to {}", ext[a], target[i]),
                ));
            }
            out_ext[a] = target[i];
        }
        let index = kernels::clamp_index_map(c, ext, out_ext);
        let src = self.value(input).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = spatial_shape(shape.len(), c, out_ext);
        Ok(self.push(out, data, Op::Gather { input, index }, &[input]))
    }

    /// Replicates the trailing face of every spatial axis up to `target`.
    pub fn pad_replicate(&mut self, input: Var, target: &[usize]) -> Result<Var, TensorError> {
        self.resize_spatial("pad_replicate", input, target, true)
    }

    /// Keeps the leading `target` block of the spatial axes.
    pub fn crop(&mut self, input: Var, target: &[usize]) -> Result<Var, TensorError> {
        self.resize_spatial("crop", input, target, false)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshaped(shape)?;
        let data = value.into_data();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { input }, &[input]))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            let axis = sp.iter().zip(st).position(|(x, y)| x != y).unwrap_or(0);
            return Err(dim_err("mse_loss", axis, format!("{:?} vs {:?}", sp, st)));
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = S::of(p.len() as f64);
        let sum: S = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok(self.push(Vec::new(), vec![sum / n], Op::Mse { pred, target }, &[pred, target]))
    }

    /// Negative Pearson correlation of two equal-length series:
    ///
    /// `-(N Σxy - Σx Σy) / sqrt(max((N Σx² - (Σx)²)(N Σy² - (Σy)²), eps))`
    ///
    /// evaluated in centred form. The floor only engages for (near-)constant
    /// inputs, so non-degenerate values are exact. Both inputs are flattened.
    pub fn neg_pearson_loss(&mut self, x: Var, y: Var) -> Result<PearsonLoss, TensorError> {
        let (nx, ny) = (self.value(x).len(), self.value(y).len());
        if nx != ny {
            return Err(dim_err("neg_pearson_loss", 0, format!("lengths {} vs {}", nx, ny)));
        }
        if nx < 2 {
            return Err(dim_err("neg_pearson_loss", 0, "need at least 2 samples"));
        }
        let m = pearson_moments(self.value(x).data(), self.value(y).data());
        let loss = -m.r;
        let var = self.push(Vec::new(), vec![loss], Op::NegPearson { x, y }, &[x, y]);
        Ok(PearsonLoss {
            loss: var,
            degenerate: m.degenerate,
        })
    }

    /// `out[t] = <volume[t], map>`: the valid convolution of a map whose
    /// extent equals the frame extent, evaluated once per frame.
    pub fn frame_dot(&mut self, volume: Var, map: Var) -> Result<Var, TensorError> {
        let vs = self.shape(volume).to_vec();
        let ms = self.shape(map).to_vec();
        if vs.len() < 2 {
            return Err(dim_err("frame_dot", 0, format!("volume shape {:?}", vs)));
        }
        let frame = &vs[1..];
        let mshape: &[usize] = if ms.len() == frame.len() + 1 && ms[0] == 1 {
            &ms[1..]
        } else {
            &ms
        };
        if mshape.len() != frame.len() {
            return Err(dim_err(
                "frame_dot",
                0,
                format!("map shape {:?} vs frame shape {:?}", ms, frame),
            ));
        }
        if let Some(i) = (0..frame.len()).find(|&i| mshape[i] != frame[i]) {
            return Err(dim_err(
                "frame_dot",
                i + 1,
                format!("map extent {} vs frame extent {}", mshape[i], frame[i]),
            ));
        }
        let frames = vs[0];
        let voxels: usize = frame.iter().product();
        let v = self.value(volume).data();
        let m = self.value(map).data();
        let data = self.exec.map(frames, |t| {
            v[t * voxels..(t + 1) * voxels]
                .iter()
                .zip(m)
                .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
        });
        Ok(self.push(
            vec![frames],
            data,
            Op::FrameDot { volume, map, frames },
            &[volume, map],
        ))
    }

    /// Zero-mean, unit-variance rescaling of a flattened series
    /// (population variance, floored at `eps`).
    pub fn standardize(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let x = self.value(input).data();
        let (mean, sigma) = mean_sigma(x);
        let data = x.iter().map(|&v| (v - mean) / sigma).collect();
        self.push(shape, data, Op::Standardize { input }, &[input])
    }

    /// Clears every stored gradient.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node
    /// that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.zero_grads();
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &upstream);
            self.nodes[i].grad = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, i: usize, up: &[S]) {
        let exec = self.exec;
        // Each arm reads what it needs from the node list, then accumulates.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv { input, kernel, geom } => {
                if self.wants(input) {
                    let g = kernels::conv_backward_input(
                        exec,
                        &geom,
                        up,
                        self.value(kernel).data(),
                    );
                    self.accumulate(input, g);
                }
                if self.wants(kernel) {
                    let g = kernels::conv_backward_kernel(
                        exec,
                        &geom,
                        up,
                        self.value(input).data(),
                    );
                    self.accumulate(kernel, g);
                }
            }
            &Op::AddBias { input, bias, channels } => {
                if self.wants(bias) {
                    let per = up.len() / channels;
                    let g = up.chunks(per).map(|c| c.iter().copied().sum()).collect();
                    self.accumulate(bias, g);
                }
                self.accumulate(input, up.to_vec());
            }
            &Op::Relu { input } => {
                let g = self
                    .value(input)
                    .data()
                    .iter()
                    .zip(up)
                    .map(|(&x, &u)| if x > S::zero() { u } else { S::zero() })
                    .collect();
                self.accumulate(input, g);
            }
            &Op::Add { a, b } => {
                self.accumulate(a, up.to_vec());
                self.accumulate(b, up.to_vec());
            }
            &Op::Scale { input, factor } => {
                self.accumulate(input, up.iter().map(|&u| u * factor).collect());
            }
            &Op::Concat { a, b } => {
                let na = self.value(a).len();
                self.accumulate(a, up[..na].to_vec());
                self.accumulate(b, up[na..].to_vec());
            }
            Op::MaxPool { input, argmax } => {
                let input = *input;
                let mut g = vec![S::zero(); self.value(input).len()];
                for (&src, &u) in argmax.iter().zip(up) {
                    g[src] = g[src] + u;
                }
                self.accumulate(input, g);
            }
            &Op::Upsample { input, channels, ext, factor } => {
                let g = kernels::upsample_backward(channels, ext, factor, up);
                self.accumulate(input, g);
            }
            Op::Gather { input, index } => {
                let input = *input;
                let mut g = vec![S::zero(); self.value(input).len()];
                for (&src, &u) in index.iter().zip(up) {
                    g[src] = g[src] + u;
                }
                self.accumulate(input, g);
            }
            &Op::Reshape { input } => self.accumulate(input, up.to_vec()),
            &Op::Mse { pred, target } => {
                let u = up[0];
                let p = self.value(pred).data();
                let t = self.value(target).data();
                let two_over_n = S::of(2.0 / p.len() as f64);
                let gp: Vec<S> = p
                    .iter()
                    .zip(t)
                    .map(|(&a, &b)| two_over_n * (a - b) * u)
                    .collect();
                if self.wants(target) {
                    self.accumulate(target, gp.iter().map(|&g| -g).collect());
                }
                self.accumulate(pred, gp);
            }
            &Op::NegPearson { x, y } => {
                let u = up[0];
                let (gx, gy) = pearson_grads(self.value(x).data(), self.value(y).data());
                if self.wants(x) {
                    self.accumulate(x, gx.into_iter().map(|g| -g * u).collect());
                }
                if self.wants(y) {
                    self.accumulate(y, gy.into_iter().map(|g| -g * u).collect());
                }
            }
            &Op::FrameDot { volume, map, frames } => {
                let voxels = self.value(map).len();
                if self.wants(map) {
                    let v = self.value(volume).data();
                    let mut g = vec![S::zero(); voxels];
                    for t in 0..frames {
                        let row = &v[t * voxels..(t + 1) * voxels];
                        for (acc, &x) in g.iter_mut().zip(row) {
                            *acc = *acc + up[t] * x;
                        }
                    }
                    self.accumulate(map, g);
                }
                if self.wants(volume) {
                    let m = self.value(map).data();
                    let mut g = Vec::with_capacity(frames * voxels);
                    for &u in up.iter().take(frames) {
                        g.extend(m.iter().map(|&x| u * x));
                    }
                    self.accumulate(volume, g);
                }
            }
            &Op::Standardize { input } => {
                let x = self.value(input).data();
                let (mean, sigma) = mean_sigma(x);
                let n = S::of(x.len() as f64);
                let z: Vec<S> = x.iter().map(|&v| (v - mean) / sigma).collect();
                let mean_up = up.iter().copied().sum::<S>() / n;
                let mean_uz = up.iter().zip(&z).map(|(&a, &b)| a * b).sum::<S>() / n;
                let g = up
                    .iter()
                    .zip(&z)
                    .map(|(&u, &zi)| (u - mean_up - zi * mean_uz) / sigma)
                    .collect();
                self.accumulate(input, g);
            }
        }
    }
}

fn mean_sigma<S: Scalar>(x: &[S]) -> (S, S) {
    let n = S::of(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, (var.max(S::of(STANDARDIZE_EPS))).sqrt())
}

struct PearsonMoments<S> {
    r: S,
    degenerate: bool,
}

fn centred<S: Scalar>(x: &[S]) -> Vec<S> {
    let n = S::of(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    x.iter().map(|&v| v - mean).collect()
}

fn pearson_moments<S: Scalar>(x: &[S], y: &[S]) -> PearsonMoments<S> {
    let n = S::of(x.len() as f64);
    let (cx, cy) = (centred(x), centred(y));
    let sxy: S = cx.iter().zip(&cy).map(|(&a, &b)| a * b).sum();
    let sxx: S = cx.iter().map(|&a| a * a).sum();
    let syy: S = cy.iter().map(|&b| b * b).sum();
    let num = n * sxy;
    let den = (n * sxx * n * syy).max(S::of(PEARSON_EPS)).sqrt();
    PearsonMoments {
        r: num / den,
        degenerate: sxx <= S::zero() || syy <= S::zero(),
    }
}

/// Gradients of `r` (not `-r`) with respect to `x` and `y`.
fn pearson_grads<S: Scalar>(x: &[S], y: &[S]) -> (Vec<S>, Vec<S>) {
    let n = S::of(x.len() as f64);
    let (cx, cy) = (centred(x), centred(y));
    let sxy: S = cx.iter().zip(&cy).map(|(&a, &b)| a * b).sum();
    let sxx: S = cx.iter().map(|&a| a * a).sum();
    let syy: S = cy.iter().map(|&b| b * b).sum();
    let num = n * sxy;
    let p = n * sxx * n * syy;
    let floored = p < S::of(PEARSON_EPS);
    let s = p.max(S::of(PEARSON_EPS)).sqrt();
    let s3 = s * s * s;
    let two = S::of(2.0);
    // below the floor the denominator is constant
    let k = if floored { S::zero() } else { num / (two * s3) };
    // dnum/dx_i = N (y_i - ȳ); dP/dx_i = 2 N² Syy (x_i - x̄)
    let gx = cx
        .iter()
        .zip(&cy)
        .map(|(&a, &b)| n * b / s - k * (two * n * n * syy * a))
        .collect();
    let gy = cx
        .iter()
        .zip(&cy)
        .map(|(&a, &b)| n * a / s - k * (two * n * n * sxx * b))
        .collect();
    (gx, gy)
}
