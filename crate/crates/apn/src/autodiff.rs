//! Reverse-mode differentiation over a fixed operation set.
//!
//! The network graph here is small and known ahead of time, so instead of a
//! general autodiff engine the [`Tape`] records a closed set of operations
//! (convolution, ReLU, the pooling ops, the bilinear compatibility products
//! and the four loss terms) and replays them in reverse. Every operation's
//! backward rule is checked against central finite differences in the test
//! suite; [`finite_diff_grad`] is that oracle.
//!
//! Nondifferentiable points (ReLU kinks, argmax ties) get a deterministic
//! subgradient: zero at the kink, smallest flat index at a tie. The tape
//! tracks how close a forward pass came to one of those points in
//! [`Smoothness`], which the gradient-check harness uses to skip coordinates
//! where a finite-difference comparison is meaningless.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a recorded node. Nodes are stored in topological order: an
/// operation's inputs always precede it on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu {
        input: NodeId,
    },
    ChwToHwc {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    /// Row vector times matrix: `[c] x [c,k] -> [k]`.
    VecMat {
        vector: NodeId,
        matrix: NodeId,
    },
    /// Matrix times column vector: `[n,k] x [k] -> [n]`.
    MatVec {
        matrix: NodeId,
        vector: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        softmax: Vec<f64>,
    },
    SimilarityMaps {
        fmap: NodeId,
        protos: NodeId,
    },
    MaxPoolMaps {
        maps: NodeId,
        peak_flat: Vec<usize>,
    },
    SquaredError {
        pred: NodeId,
        target: Tensor,
    },
    GroupLasso {
        protos: NodeId,
        groups: Vec<Vec<usize>>,
        eps: f64,
    },
    Compactness {
        maps: NodeId,
        peak_flat: Vec<usize>,
        clamp: bool,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// How close a forward pass came to a nondifferentiable point.
///
/// `relu_gap` is the smallest |x| seen at any ReLU input; `argmax_gap` is the
/// smallest (max - runner_up) over all recorded argmax scans. A gradient
/// check is only trustworthy when both clear the tolerance used to exclude
/// kink-adjacent coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Smoothness {
    pub relu_gap: f64,
    pub argmax_gap: f64,
}

impl Smoothness {
    fn new() -> Self {
        Smoothness {
            relu_gap: f64::INFINITY,
            argmax_gap: f64::INFINITY,
        }
    }

    pub fn min_gap(&self) -> f64 {
        self.relu_gap.min(self.argmax_gap)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
///
/// Nodes not reachable from the loss have no gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

/// Records a forward computation and replays it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    smoothness: Smoothness,
}

impl Default for Smoothness {
    fn default() -> Self {
        Smoothness::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            smoothness: Smoothness::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn smoothness(&self) -> Smoothness {
        self.smoothness
    }

    /// Record an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// 2-d cross-correlation with zero padding.
    ///
    /// `input` is `[c_in, h, w]`, `kernels` is `[c_out, c_in, k, k]`, `bias`
    /// is `[c_out]`; the output is `[c_out, h', w']` with
    /// `h' = (h + 2 pad - k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::contract("conv2d stride must be positive"));
        }
        let (ish, ksh, bsh) = (
            self.nodes[input].value.shape().to_vec(),
            self.nodes[kernels].value.shape().to_vec(),
            self.nodes[bias].value.shape().to_vec(),
        );
        if ish.len() != 3 || ksh.len() != 4 || bsh.len() != 1 {
            return Err(Error::dim(format!(
                "conv2d expects input [c,h,w], kernels [o,c,k,k], bias [o]; got {ish:?}, {ksh:?}, {bsh:?}"
            )));
        }
        let (c_in, h, w) = (ish[0], ish[1], ish[2]);
        let (c_out, kc, kh, kw) = (ksh[0], ksh[1], ksh[2], ksh[3]);
        if kc != c_in {
            return Err(Error::dim(format!(
                "conv2d kernels expect {kc} input channels, input has {c_in}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("conv2d kernels must be square, got {kh}x{kw}")));
        }
        if bsh[0] != c_out {
            return Err(Error::dim(format!(
                "conv2d bias has {} entries for {c_out} output channels",
                bsh[0]
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::contract(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let value = conv2d_forward(
            &self.nodes[input].value,
            &self.nodes[kernels].value,
            &self.nodes[bias].value,
            stride,
            pad,
        );
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Elementwise `max(x, 0)`. The subgradient at 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let mut out = x.clone();
        for v in out.data_mut() {
            let gap = v.abs();
            if gap < self.smoothness.relu_gap {
                self.smoothness.relu_gap = gap;
            }
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { input })
    }

    /// Reorder a `[c, h, w]` tensor to `[h, w, c]` so that the channel fiber
    /// at each spatial location is contiguous.
    pub fn chw_to_hwc(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if x.rank() != 3 {
            return Err(Error::dim(format!(
                "chw_to_hwc needs a rank-3 tensor, got {:?}",
                x.shape()
            )));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[h, w, c]);
        {
            let src = x.data();
            let dst = out.data_mut();
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        dst[(y * w + xx) * c + ch] = src[(ch * h + y) * w + xx];
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChwToHwc { input }))
    }

    /// Mean over the spatial grid of a `[h, w, c]` feature map, yielding `[c]`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = &self.nodes[input].value;
        if x.rank() != 3 {
            return Err(Error::dim(format!(
                "global_avg_pool needs a [h,w,c] map, got {:?}",
                x.shape()
            )));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut out = Tensor::zeros(&[c]);
        {
            let src = x.data();
            let dst = out.data_mut();
            for cell in 0..h * w {
                let fiber = &src[cell * c..(cell + 1) * c];
                for (acc, &v) in dst.iter_mut().zip(fiber) {
                    *acc += v;
                }
            }
            let norm = 1.0 / (h * w) as f64;
            for acc in dst.iter_mut() {
                *acc *= norm;
            }
        }
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    /// `out[k] = sum_c v[c] * m[c,k]`.
    pub fn vec_mat(&mut self, vector: NodeId, matrix: NodeId) -> Result<NodeId> {
        let (v, m) = (&self.nodes[vector].value, &self.nodes[matrix].value);
        if v.rank() != 1 || m.rank() != 2 || v.shape()[0] != m.shape()[0] {
            return Err(Error::dim(format!(
                "vec_mat shape mismatch: {:?} x {:?}",
                v.shape(),
                m.shape()
            )));
        }
        let (c, k) = (m.shape()[0], m.shape()[1]);
        let mut out = Tensor::zeros(&[k]);
        {
            let dst = out.data_mut();
            for ci in 0..c {
                let vi = v.data()[ci];
                let row = &m.data()[ci * k..(ci + 1) * k];
                for (o, &mv) in dst.iter_mut().zip(row) {
                    *o += vi * mv;
                }
            }
        }
        Ok(self.push(out, Op::VecMat { vector, matrix }))
    }

    /// `out[i] = sum_k m[i,k] * v[k]`.
    pub fn mat_vec(&mut self, matrix: NodeId, vector: NodeId) -> Result<NodeId> {
        let (m, v) = (&self.nodes[matrix].value, &self.nodes[vector].value);
        if m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0] {
            return Err(Error::dim(format!(
                "mat_vec shape mismatch: {:?} x {:?}",
                m.shape(),
                v.shape()
            )));
        }
        let (n, k) = (m.shape()[0], m.shape()[1]);
        let mut out = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &m.data()[i * k..(i + 1) * k];
            out.data_mut()[i] = dot(row, v.data());
        }
        Ok(self.push(out, Op::MatVec { matrix, vector }))
    }

    /// `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let l = &self.nodes[logits].value;
        if l.rank() != 1 || l.is_empty() {
            return Err(Error::contract(format!(
                "softmax_cross_entropy needs a nonempty logit vector, got {:?}",
                l.shape()
            )));
        }
        let n = l.len();
        if label >= n {
            return Err(Error::contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let max = l.data().iter().cloned().fold(f64::MIN, f64::max);
        let mut softmax = Vec::with_capacity(n);
        let mut z = 0.0;
        for &x in l.data() {
            let e = (x - max).exp();
            softmax.push(e);
            z += e;
        }
        for p in &mut softmax {
            *p /= z;
        }
        let loss = z.ln() - (l.data()[label] - max);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            },
        ))
    }

    /// Per-attribute similarity maps: `maps[k,i,j] = <protos[k,:], fmap[i,j,:]>`.
    pub fn similarity_maps(&mut self, fmap: NodeId, protos: NodeId) -> Result<NodeId> {
        let (f, p) = (&self.nodes[fmap].value, &self.nodes[protos].value);
        if f.rank() != 3 || p.rank() != 2 || f.shape()[2] != p.shape()[1] {
            return Err(Error::dim(format!(
                "similarity_maps needs fmap [h,w,c] and prototypes [k,c] with matching c; got {:?} and {:?}",
                f.shape(),
                p.shape()
            )));
        }
        let value = similarity_maps_raw(f, p);
        Ok(self.push(value, Op::SimilarityMaps { fmap, protos }))
    }

    /// Per-map spatial maximum: `out[k] = max_{i,j} maps[k,i,j]`.
    ///
    /// The backward pass routes each map's gradient solely to its peak cell;
    /// ties break at the smallest flat index.
    pub fn max_pool_maps(&mut self, maps: NodeId) -> Result<NodeId> {
        let m = &self.nodes[maps].value;
        if m.rank() != 3 {
            return Err(Error::dim(format!(
                "max_pool_maps needs [k,h,w] maps, got {:?}",
                m.shape()
            )));
        }
        let (k, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let mut out = Tensor::zeros(&[k]);
        let mut peak_flat = Vec::with_capacity(k);
        for ki in 0..k {
            let map = &m.data()[ki * h * w..(ki + 1) * h * w];
            let (peak, max, gap) = argmax_with_gap(map);
            out.data_mut()[ki] = max;
            peak_flat.push(peak);
            if gap < self.smoothness.argmax_gap {
                self.smoothness.argmax_gap = gap;
            }
        }
        Ok(self.push(out, Op::MaxPoolMaps { maps, peak_flat }))
    }

    /// Sum of squared differences against a constant target.
    pub fn squared_error(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = &self.nodes[pred].value;
        if p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "squared_error shapes differ: {:?} vs {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SquaredError {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Group-lasso penalty over prototype channels:
    /// `sum_c sum_l sqrt(sum_{k in S_l} protos[k,c]^2 + eps)`.
    ///
    /// `groups` must partition the prototype indices `0..k`.
    pub fn group_lasso(&mut self, protos: NodeId, groups: &[Vec<usize>], eps: f64) -> Result<NodeId> {
        let p = &self.nodes[protos].value;
        if p.rank() != 2 {
            return Err(Error::dim(format!(
                "group_lasso needs [k,c] prototypes, got {:?}",
                p.shape()
            )));
        }
        let k = p.shape()[0];
        validate_partition(groups, k)?;
        let value = group_lasso_raw(p, groups, eps);
        Ok(self.push(
            Tensor::scalar(value),
            Op::GroupLasso {
                protos,
                groups: groups.to_vec(),
                eps,
            },
        ))
    }

    /// Distance-to-peak penalty over similarity maps.
    ///
    /// With `clamp` set (the default configuration), negative similarities
    /// are cut to zero before weighting so dispersed negative mass is not
    /// rewarded; with `clamp` unset the raw map values are used. The peak
    /// coordinates are integers and carry no gradient.
    pub fn compactness(&mut self, maps: NodeId, clamp: bool) -> Result<NodeId> {
        let m = &self.nodes[maps].value;
        if m.rank() != 3 {
            return Err(Error::dim(format!(
                "compactness needs [k,h,w] maps, got {:?}",
                m.shape()
            )));
        }
        let (total, peak_flat, argmax_gap, relu_gap) = compactness_raw(m, clamp);
        if argmax_gap < self.smoothness.argmax_gap {
            self.smoothness.argmax_gap = argmax_gap;
        }
        if relu_gap < self.smoothness.relu_gap {
            self.smoothness.relu_gap = relu_gap;
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Compactness {
                maps,
                peak_flat,
                clamp,
            },
        ))
    }

    /// Linear combination of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::contract("weighted_sum of no terms"));
        }
        let mut total = 0.0;
        for &(id, coeff) in terms {
            let v = &self.nodes[id].value;
            if !v.is_scalar() {
                return Err(Error::contract(format!(
                    "weighted_sum term {id} is not scalar (shape {:?})",
                    v.shape()
                )));
            }
            total += coeff * v.item();
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Deterministic for a fixed graph:
    /// two calls on the same tape produce bit-identical gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::contract(format!("backward from unknown node {loss}")));
        }
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, node {loss} has shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            self.accumulate_inputs(id, &out_grad, &mut grads);
            grads[id] = Some(out_grad);
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, id: NodeId, og: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                pad,
            } => {
                let gi = ensure(grads, *input, self.nodes[*input].value.shape());
                let gk = Tensor::zeros(self.nodes[*kernels].value.shape());
                let gb = Tensor::zeros(self.nodes[*bias].value.shape());
                // take the three accumulators out to satisfy the borrow checker
                let mut gk = replace_or(grads, *kernels, gk);
                let mut gb = replace_or(grads, *bias, gb);
                let mut gi = gi;
                conv2d_backward(
                    &self.nodes[*input].value,
                    &self.nodes[*kernels].value,
                    og,
                    *stride,
                    *pad,
                    &mut gi,
                    &mut gk,
                    &mut gb,
                );
                grads[*input] = Some(gi);
                grads[*kernels] = Some(gk);
                grads[*bias] = Some(gb);
            }
            Op::Relu { input } => {
                let x = &self.nodes[*input].value;
                let mut gi = ensure(grads, *input, x.shape());
                for ((g, &xv), &ogv) in gi.data_mut().iter_mut().zip(x.data()).zip(og.data()) {
                    if xv > 0.0 {
                        *g += ogv;
                    }
                }
                grads[*input] = Some(gi);
            }
            Op::ChwToHwc { input } => {
                let x = &self.nodes[*input].value;
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut gi = ensure(grads, *input, x.shape());
                {
                    let dst = gi.data_mut();
                    let src = og.data();
                    for ch in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dst[(ch * h + y) * w + xx] += src[(y * w + xx) * c + ch];
                            }
                        }
                    }
                }
                grads[*input] = Some(gi);
            }
            Op::GlobalAvgPool { input } => {
                let x = &self.nodes[*input].value;
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let norm = 1.0 / (h * w) as f64;
                let mut gi = ensure(grads, *input, x.shape());
                {
                    let dst = gi.data_mut();
                    for cell in 0..h * w {
                        for ch in 0..c {
                            dst[cell * c + ch] += og.data()[ch] * norm;
                        }
                    }
                }
                grads[*input] = Some(gi);
            }
            Op::VecMat { vector, matrix } => {
                let (v, m) = (&self.nodes[*vector].value, &self.nodes[*matrix].value);
                let (c, k) = (m.shape()[0], m.shape()[1]);
                let mut gv = ensure(grads, *vector, v.shape());
                let mut gm = ensure(grads, *matrix, m.shape());
                for ci in 0..c {
                    let row = &m.data()[ci * k..(ci + 1) * k];
                    gv.data_mut()[ci] += dot(row, og.data());
                    let grow = &mut gm.data_mut()[ci * k..(ci + 1) * k];
                    let vi = v.data()[ci];
                    for (g, &o) in grow.iter_mut().zip(og.data()) {
                        *g += vi * o;
                    }
                }
                grads[*vector] = Some(gv);
                grads[*matrix] = Some(gm);
            }
            Op::MatVec { matrix, vector } => {
                let (m, v) = (&self.nodes[*matrix].value, &self.nodes[*vector].value);
                let (n, k) = (m.shape()[0], m.shape()[1]);
                let mut gm = ensure(grads, *matrix, m.shape());
                let mut gv = ensure(grads, *vector, v.shape());
                for i in 0..n {
                    let o = og.data()[i];
                    let row = &m.data()[i * k..(i + 1) * k];
                    let grow = &mut gm.data_mut()[i * k..(i + 1) * k];
                    for ((g, &mv), (&vv, gvk)) in grow
                        .iter_mut()
                        .zip(row)
                        .zip(v.data().iter().zip(gv.data_mut()))
                    {
                        *g += o * vv;
                        *gvk += o * mv;
                    }
                }
                grads[*matrix] = Some(gm);
                grads[*vector] = Some(gv);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let o = og.item();
                let mut gl = ensure(grads, *logits, self.nodes[*logits].value.shape());
                for (i, (g, &p)) in gl.data_mut().iter_mut().zip(softmax).enumerate() {
                    let indicator = if i == *label { 1.0 } else { 0.0 };
                    *g += o * (p - indicator);
                }
                grads[*logits] = Some(gl);
            }
            Op::SimilarityMaps { fmap, protos } => {
                let (f, p) = (&self.nodes[*fmap].value, &self.nodes[*protos].value);
                let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
                let k = p.shape()[0];
                let mut gf = ensure(grads, *fmap, f.shape());
                let mut gp = ensure(grads, *protos, p.shape());
                for ki in 0..k {
                    let proto = &p.data()[ki * c..(ki + 1) * c];
                    let gproto = &mut gp.data_mut()[ki * c..(ki + 1) * c];
                    for cell in 0..h * w {
                        let o = og.data()[ki * h * w + cell];
                        if o == 0.0 {
                            continue;
                        }
                        let fiber = &f.data()[cell * c..(cell + 1) * c];
                        for (g, &fv) in gproto.iter_mut().zip(fiber) {
                            *g += o * fv;
                        }
                        let gfiber = &mut gf.data_mut()[cell * c..(cell + 1) * c];
                        for (g, &pv) in gfiber.iter_mut().zip(proto) {
                            *g += o * pv;
                        }
                    }
                }
                grads[*fmap] = Some(gf);
                grads[*protos] = Some(gp);
            }
            Op::MaxPoolMaps { maps, peak_flat } => {
                let m = &self.nodes[*maps].value;
                let plane = m.shape()[1] * m.shape()[2];
                let mut gm = ensure(grads, *maps, m.shape());
                for (ki, &peak) in peak_flat.iter().enumerate() {
                    gm.data_mut()[ki * plane + peak] += og.data()[ki];
                }
                grads[*maps] = Some(gm);
            }
            Op::SquaredError { pred, target } => {
                let o = og.item();
                let p = &self.nodes[*pred].value;
                let mut gp = ensure(grads, *pred, p.shape());
                for ((g, &pv), &tv) in gp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                    *g += o * 2.0 * (pv - tv);
                }
                grads[*pred] = Some(gp);
            }
            Op::GroupLasso { protos, groups, eps } => {
                let o = og.item();
                let p = &self.nodes[*protos].value;
                let c = p.shape()[1];
                let mut gp = ensure(grads, *protos, p.shape());
                for group in groups {
                    for ci in 0..c {
                        let mut sq = *eps;
                        for &ki in group {
                            let v = p.data()[ki * c + ci];
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        for &ki in group {
                            gp.data_mut()[ki * c + ci] += o * p.data()[ki * c + ci] / norm;
                        }
                    }
                }
                grads[*protos] = Some(gp);
            }
            Op::Compactness {
                maps,
                peak_flat,
                clamp,
            } => {
                let o = og.item();
                let m = &self.nodes[*maps].value;
                let (k, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
                let mut gm = ensure(grads, *maps, m.shape());
                for ki in 0..k {
                    let peak = peak_flat[ki];
                    let (pi, pj) = (peak / w, peak % w);
                    for i in 0..h {
                        for j in 0..w {
                            let idx = ki * h * w + i * w + j;
                            if *clamp && m.data()[idx] <= 0.0 {
                                continue;
                            }
                            let di = i as f64 - pi as f64;
                            let dj = j as f64 - pj as f64;
                            gm.data_mut()[idx] += o * (di * di + dj * dj);
                        }
                    }
                }
                grads[*maps] = Some(gm);
            }
            Op::WeightedSum { terms } => {
                let o = og.item();
                for &(id, coeff) in terms {
                    let mut g = ensure(grads, id, self.nodes[id].value.shape());
                    g.data_mut()[0] += o * coeff;
                    grads[id] = Some(g);
                }
            }
        }
    }
}

fn ensure(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> Tensor {
    grads[id].take().unwrap_or_else(|| Tensor::zeros(shape))
}

fn replace_or(grads: &mut [Option<Tensor>], id: NodeId, fallback: Tensor) -> Tensor {
    grads[id].take().unwrap_or(fallback)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Argmax of a flat slice with the row-major tie rule plus the gap to the
/// runner-up (infinity for single-cell maps).
pub(crate) fn argmax_with_gap(xs: &[f64]) -> (usize, f64, f64) {
    debug_assert!(!xs.is_empty());
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    let max = xs[best];
    let mut runner = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if i != best && v > runner {
            runner = v;
        }
    }
    let gap = if runner.is_finite() { max - runner } else { f64::INFINITY };
    (best, max, gap)
}

pub(crate) fn validate_partition(groups: &[Vec<usize>], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for group in groups {
        if group.is_empty() {
            return Err(Error::contract("attribute group is empty"));
        }
        for &idx in group {
            if idx >= k {
                return Err(Error::contract(format!(
                    "attribute index {idx} out of range for {k} attributes"
                )));
            }
            if seen[idx] {
                return Err(Error::contract(format!(
                    "attribute index {idx} appears in more than one group"
                )));
            }
            seen[idx] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::contract(format!(
            "attribute index {missing} not covered by any group"
        )));
    }
    Ok(())
}

/// Shared kernel for similarity and class-activation maps; both code paths
/// call this exact function, which is what makes them bit-identical.
pub fn similarity_maps_raw(fmap: &Tensor, protos: &Tensor) -> Tensor {
    let (h, w, c) = (fmap.shape()[0], fmap.shape()[1], fmap.shape()[2]);
    let k = protos.shape()[0];
    debug_assert_eq!(protos.shape()[1], c);
    let mut out = Tensor::zeros(&[k, h, w]);
    {
        let dst = out.data_mut();
        for ki in 0..k {
            let proto = &protos.data()[ki * c..(ki + 1) * c];
            let plane = &mut dst[ki * h * w..(ki + 1) * h * w];
            for (cell, slot) in plane.iter_mut().enumerate() {
                let fiber = &fmap.data()[cell * c..(cell + 1) * c];
                *slot = dot(proto, fiber);
            }
        }
    }
    out
}

/// Shared kernel for the compactness penalty. Returns the loss, per-map flat
/// peak indices, the smallest argmax gap and (when clamping) the smallest
/// distance of a map value to the clamp kink.
pub(crate) fn compactness_raw(maps: &Tensor, clamp: bool) -> (f64, Vec<usize>, f64, f64) {
    let (k, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let mut total = 0.0;
    let mut peak_flat = Vec::with_capacity(k);
    let mut argmax_gap = f64::INFINITY;
    let mut relu_gap = f64::INFINITY;
    for ki in 0..k {
        let map = &maps.data()[ki * h * w..(ki + 1) * h * w];
        let (peak, _, gap) = argmax_with_gap(map);
        if gap < argmax_gap {
            argmax_gap = gap;
        }
        peak_flat.push(peak);
        let (pi, pj) = (peak / w, peak % w);
        for i in 0..h {
            for j in 0..w {
                let v = map[i * w + j];
                let weight = if clamp {
                    if v.abs() < relu_gap {
                        relu_gap = v.abs();
                    }
                    v.max(0.0)
                } else {
                    v
                };
                let di = i as f64 - pi as f64;
                let dj = j as f64 - pj as f64;
                total += weight * (di * di + dj * dj);
            }
        }
    }
    (total, peak_flat, argmax_gap, relu_gap)
}

pub(crate) fn group_lasso_raw(protos: &Tensor, groups: &[Vec<usize>], eps: f64) -> f64 {
    let c = protos.shape()[1];
    let mut total = 0.0;
    for group in groups {
        for ci in 0..c {
            let mut sq = eps;
            for &ki in group {
                let v = protos.data()[ki * c + ci];
                sq += v * v;
            }
            total += sq.sqrt();
        }
    }
    total
}

fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, _, k, _) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[c_out, h_out, w_out]);
    let src = input.data();
    let ker = kernels.data();
    let dst = out.data_mut();
    for oc in 0..c_out {
        let b = bias.data()[oc];
        for oy in 0..h_out {
            // valid kernel-row range for this output row
            let y_base = (oy * stride) as isize - pad as isize;
            let ky_lo = (-y_base).max(0) as usize;
            let ky_hi = ((h as isize - y_base).min(k as isize)).max(0) as usize;
            for ox in 0..w_out {
                let x_base = (ox * stride) as isize - pad as isize;
                let kx_lo = (-x_base).max(0) as usize;
                let kx_hi = ((w as isize - x_base).min(k as isize)).max(0) as usize;
                let mut acc = b;
                for ic in 0..c_in {
                    let in_plane = &src[ic * h * w..(ic + 1) * h * w];
                    let ker_plane = &ker[(oc * c_in + ic) * k * k..(oc * c_in + ic + 1) * k * k];
                    for ky in ky_lo..ky_hi {
                        let iy = (y_base + ky as isize) as usize;
                        let in_row = &in_plane[iy * w..(iy + 1) * w];
                        let ker_row = &ker_plane[ky * k..ky * k + k];
                        for kx in kx_lo..kx_hi {
                            let ix = (x_base + kx as isize) as usize;
                            acc += in_row[ix] * ker_row[kx];
                        }
                    }
                }
                dst[(oc * h_out + oy) * w_out + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    out_grad: &Tensor,
    stride: usize,
    pad: usize,
    g_input: &mut Tensor,
    g_kernels: &mut Tensor,
    g_bias: &mut Tensor,
) {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, _, k, _) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    let (h_out, w_out) = (out_grad.shape()[1], out_grad.shape()[2]);
    let src = input.data();
    let ker = kernels.data();
    let og = out_grad.data();
    let gi = g_input.data_mut();
    let gk = g_kernels.data_mut();
    let gb = g_bias.data_mut();
    for oc in 0..c_out {
        for oy in 0..h_out {
            let y_base = (oy * stride) as isize - pad as isize;
            let ky_lo = (-y_base).max(0) as usize;
            let ky_hi = ((h as isize - y_base).min(k as isize)).max(0) as usize;
            for ox in 0..w_out {
                let o = og[(oc * h_out + oy) * w_out + ox];
                gb[oc] += o;
                if o == 0.0 {
                    continue;
                }
                let x_base = (ox * stride) as isize - pad as isize;
                let kx_lo = (-x_base).max(0) as usize;
                let kx_hi = ((w as isize - x_base).min(k as isize)).max(0) as usize;
                for ic in 0..c_in {
                    let in_plane = &src[ic * h * w..(ic + 1) * h * w];
                    let plane_off = (oc * c_in + ic) * k * k;
                    for ky in ky_lo..ky_hi {
                        let iy = (y_base + ky as isize) as usize;
                        for kx in kx_lo..kx_hi {
                            let ix = (x_base + kx as isize) as usize;
                            gk[plane_off + ky * k + kx] += o * in_plane[iy * w + ix];
                            gi[(ic * h + iy) * w + ix] += o * ker[plane_off + ky * k + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient oracle:
/// `(L(x + h e_i) - L(x - h e_i)) / 2h` per coordinate.
///
/// `loss` must be pure and deterministic; `h` must be positive.
pub fn finite_diff_grad<F: FnMut(&Tensor) -> f64>(mut loss: F, params: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite_diff_grad needs h > 0");
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(params.shape());
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.data_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic and a reference gradient,
/// using `max(1, |a|, |b|)` as the scale so tiny entries compare absolutely.
pub fn max_relative_error(analytic: &Tensor, reference: &Tensor) -> f64 {
    debug_assert_eq!(analytic.shape(), reference.shape());
    let mut worst: f64 = 0.0;
    for (&a, &b) in analytic.data().iter().zip(reference.data()) {
        let scale = 1.0_f64.max(a.abs()).max(b.abs());
        worst = worst.max((a - b).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform_symmetric(1.0);
        }
        t
    }

    /// Check the tape gradient of a single-parameter graph against the
    /// finite-difference oracle.
    fn check_grad<F>(build: F, param: &Tensor, tol: f64)
    where
        F: Fn(&mut Tape, NodeId) -> NodeId,
    {
        let mut tape = Tape::new();
        let p = tape.leaf(param.clone());
        let loss = build(&mut tape, p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(p).expect("parameter got no gradient");

        let numeric = finite_diff_grad(
            |theta| {
                let mut t = Tape::new();
                let p = t.leaf(theta.clone());
                let l = build(&mut t, p);
                t.value(l).item()
            },
            param,
            1e-6,
        );
        let err = max_relative_error(analytic, &numeric);
        assert!(err < tol, "gradient mismatch: max rel err {err:e} >= {tol:e}");
    }

    #[test]
    fn conv_scalar_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap());
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv_cross_correlation_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let k = tape.leaf(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap());
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_zero_kernels_give_constant_bias_map() {
        let mut rng = SplitMix64::new(3);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2, 5, 4], &mut rng));
        let k = tape.leaf(Tensor::zeros(&[3, 2, 3, 3]));
        let b = tape.leaf(Tensor::from_vec(&[3], vec![5.0, 5.0, 5.0]).unwrap());
        let y = tape.conv2d(x, k, b, 1, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4, 4]));
        let k = tape.leaf(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        match tape.conv2d(x, k, b, 1, 1) {
            Err(Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv_output_geometry() {
        // stride/pad arithmetic: 64 -> 32 with k=3, s=2, p=1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 64, 64]));
        let k = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 32, 32]);
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], -0.5));
        let y = tape.relu(x);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        // subgradient: relu'(-1) = 0, relu'(2) = 1; probe through a chain
        // whose gradient at x is 2*relu(x)*relu'(x)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 1, 1], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        let m = tape.max_pool_maps(y).unwrap();
        let s = tape.squared_error(m, &Tensor::zeros(&[2])).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 4.0]);
    }

    #[test]
    fn gap_of_constant_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 5, 2], 7.0));
        let g = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| (v - 7.0).abs() < 1e-15));
    }

    #[test]
    fn gap_hand_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g).data(), &[2.5]);
    }

    #[test]
    fn gap_is_linear() {
        let mut rng = SplitMix64::new(11);
        let x = random_tensor(&[3, 4, 2], &mut rng);
        let y = random_tensor(&[3, 4, 2], &mut rng);
        let (a, b) = (0.7, -1.3);
        let pool = |t: &Tensor| {
            let mut tape = Tape::new();
            let n = tape.leaf(t.clone());
            let g = tape.global_avg_pool(n).unwrap();
            tape.value(g).clone()
        };
        let mut combo = Tensor::zeros(x.shape());
        for ((c, &xv), &yv) in combo.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
            *c = a * xv + b * yv;
        }
        let lhs = pool(&combo);
        let (px, py) = (pool(&x), pool(&y));
        for ((&l, &gx), &gy) in lhs.data().iter().zip(px.data()).zip(py.data()) {
            assert!((l - (a * gx + b * gy)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_uniform_and_saturated() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(&[3], vec![0.5, 0.5, 0.5]).unwrap());
        let loss = tape.softmax_cross_entropy(l, 1).unwrap();
        assert!((tape.value(loss).item() - 3.0_f64.ln()).abs() < 1e-12);

        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(&[2], vec![100.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(l, 0).unwrap();
        assert!(tape.value(loss).item() < 1e-40);
        assert!(tape.value(loss).item() >= 0.0);
    }

    #[test]
    fn softmax_ce_shift_invariant() {
        let base = vec![0.3, -1.2, 2.0, 0.0];
        let eval = |shift: f64| {
            let mut tape = Tape::new();
            let l = tape
                .leaf(Tensor::from_vec(&[4], base.iter().map(|x| x + shift).collect()).unwrap());
            let loss = tape.softmax_cross_entropy(l, 2).unwrap();
            tape.value(loss).item()
        };
        assert!((eval(0.0) - eval(123.456)).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_bad_label_and_empty() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap());
        assert!(tape.softmax_cross_entropy(l, 2).is_err());
        let e = tape.leaf(Tensor::from_vec(&[0], vec![]).unwrap());
        assert!(tape.softmax_cross_entropy(e, 0).is_err());
    }

    #[test]
    fn similarity_maps_hand_example() {
        // 2x2 grid, C=2 fibers; prototype [1,0]
        let fmap = Tensor::from_vec(
            &[2, 2, 2],
            vec![
                1.0, 0.0, // (0,0)
                0.0, 1.0, // (0,1)
                2.0, 0.0, // (1,0)
                0.0, 0.0, // (1,1)
            ],
        )
        .unwrap();
        let protos = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let f = tape.leaf(fmap);
        let p = tape.leaf(protos);
        let maps = tape.similarity_maps(f, p).unwrap();
        assert_eq!(tape.value(maps).data(), &[1.0, 0.0, 2.0, 0.0]);
        let pooled = tape.max_pool_maps(maps).unwrap();
        assert_eq!(tape.value(pooled).data(), &[2.0]);
        // peak at flat index 2 = (1,0)
        match &tape.nodes[pooled].op {
            Op::MaxPoolMaps { peak_flat, .. } => assert_eq!(peak_flat, &vec![2]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn max_pool_negated_map() {
        let m = Tensor::from_vec(&[1, 2, 2], vec![-1.0, 0.0, -2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(m);
        let pooled = tape.max_pool_maps(n).unwrap();
        assert_eq!(tape.value(pooled).data(), &[0.0]);
        match &tape.nodes[pooled].op {
            Op::MaxPoolMaps { peak_flat, .. } => assert_eq!(peak_flat, &vec![1]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn group_lasso_closed_forms() {
        // C=1, one group of two attributes with entries (3,4) -> 5
        let p = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(p.clone());
        let l = tape.group_lasso(n, &[vec![0, 1]], 1e-12).unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-5);

        // singleton groups -> |3| + |4| = 7
        let mut tape = Tape::new();
        let n = tape.leaf(p);
        let l = tape.group_lasso(n, &[vec![0], vec![1]], 1e-12).unwrap();
        assert!((tape.value(l).item() - 7.0).abs() < 1e-5);

        // zero matrix -> sqrt(eps) * C * L, tiny
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::zeros(&[4, 3]));
        let l = tape
            .group_lasso(n, &[vec![0, 1], vec![2, 3]], 1e-12)
            .unwrap();
        assert!(tape.value(l).item() < 1e-5);
    }

    #[test]
    fn group_lasso_rejects_non_partition() {
        let mut tape = Tape::new();
        let n = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(tape.group_lasso(n, &[vec![0, 1]], 1e-12).is_err()); // misses 2
        assert!(tape.group_lasso(n, &[vec![0, 1], vec![1, 2]], 1e-12).is_err()); // overlap
        assert!(tape.group_lasso(n, &[vec![0, 1], vec![2, 3]], 1e-12).is_err()); // out of range
    }

    #[test]
    fn compactness_values() {
        // one-hot map: all mass at the peak -> 0
        let m = Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.0, 0.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(m);
        let l = tape.compactness(n, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        // [[1,1],[0,0]]: peak (0,0) by tie-break, cell (0,1) contributes 1
        let m = Tensor::from_vec(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(m);
        let l = tape.compactness(n, true).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);

        // all-nonpositive map clamps to zero mass
        let m = Tensor::from_vec(&[1, 2, 2], vec![-1.0, -0.5, -2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(m);
        let l = tape.compactness(n, true).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn compactness_raw_keeps_negative_mass() {
        let m = Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(m);
        let l = tape.compactness(n, false).unwrap();
        // peak (0,0); contributions: -1*1 + 0 + 0 = -1
        assert_eq!(tape.value(l).item(), -1.0);
    }

    #[test]
    fn compactness_translation_invariant() {
        // translating the positive mass and peak together leaves loss unchanged
        let eval = |offset: usize| {
            let mut m = Tensor::zeros(&[1, 4, 6]);
            // an L-shaped blob anchored at (0, offset)
            m.data_mut()[offset] = 2.0;
            m.data_mut()[offset + 1] = 1.0;
            m.data_mut()[6 + offset] = 0.5;
            let mut tape = Tape::new();
            let n = tape.leaf(m);
            let l = tape.compactness(n, true).unwrap();
            tape.value(l).item()
        };
        assert_eq!(eval(0), eval(3));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.relu(x);
        match tape.backward(y) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn backward_sum_and_quadratic() {
        // loss = 0.5 * ||p||^2 via squared_error(p, 0) * 0.5 -> gradient p
        let p = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let n = tape.leaf(p.clone());
        let sq = tape.squared_error(n, &Tensor::zeros(&[4])).unwrap();
        let half = tape.weighted_sum(&[(sq, 0.5)]).unwrap();
        let grads = tape.backward(half).unwrap();
        assert_eq!(grads.get(n).unwrap().data(), p.data());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = SplitMix64::new(21);
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2, 6, 6], &mut rng));
        let k = tape.leaf(random_tensor(&[3, 2, 3, 3], &mut rng));
        let b = tape.leaf(random_tensor(&[3], &mut rng));
        let c = tape.conv2d(x, k, b, 2, 1).unwrap();
        let r = tape.relu(c);
        let hwc = tape.chw_to_hwc(r).unwrap();
        let maps = {
            let p = tape.leaf(random_tensor(&[4, 3], &mut rng));
            tape.similarity_maps(hwc, p).unwrap()
        };
        let pooled = tape.max_pool_maps(maps).unwrap();
        let target = random_tensor(&[4], &mut rng);
        let loss = tape.squared_error(pooled, &target).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for id in 0..tape.len() {
            match (g1.get(id), g2.get(id)) {
                (None, None) => {}
                (Some(a), Some(b)) => assert_eq!(a.data(), b.data()),
                _ => panic!("gradient presence differs at node {id}"),
            }
        }
    }

    #[test]
    fn finite_diff_on_quadratic_and_constant() {
        let theta = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &theta, 1e-6);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let g = finite_diff_grad(|_| 42.0, &theta, 1e-6);
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn group_lasso_gradient_matches_closed_form_and_fd() {
        let mut rng = SplitMix64::new(5);
        let p = random_tensor(&[4, 6], &mut rng);
        let groups = vec![vec![0, 2], vec![1, 3]];
        let eps = 1e-12;

        let mut tape = Tape::new();
        let n = tape.leaf(p.clone());
        let l = tape.group_lasso(n, &groups, eps).unwrap();
        let grads = tape.backward(l).unwrap();
        let analytic = grads.get(n).unwrap();

        // closed form: P[k,c] / ||P^{S_l}_c||
        let c = 6;
        for group in &groups {
            for ci in 0..c {
                let norm: f64 = group
                    .iter()
                    .map(|&k| p.data()[k * c + ci].powi(2))
                    .sum::<f64>()
                    .sqrt();
                for &k in group {
                    let expect = p.data()[k * c + ci] / norm;
                    let got = analytic.data()[k * c + ci];
                    assert!(
                        (got - expect).abs() / norm.max(1.0) < 1e-9,
                        "closed form mismatch at ({k},{ci})"
                    );
                }
            }
        }

        let numeric = finite_diff_grad(
            |theta| {
                let mut t = Tape::new();
                let n = t.leaf(theta.clone());
                let l = t.group_lasso(n, &groups, eps).unwrap();
                t.value(l).item()
            },
            &p,
            1e-6,
        );
        assert!(max_relative_error(analytic, &numeric) < 1e-6);
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(77);
        let tol = 1e-5;

        // conv2d w.r.t. input, kernels and bias, via a scalar pipeline
        let input = random_tensor(&[2, 5, 5], &mut rng);
        let kernels = random_tensor(&[3, 2, 3, 3], &mut rng);
        let bias = random_tensor(&[3], &mut rng);
        let target = random_tensor(&[3], &mut rng);

        let scalar_loss = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let mut t = Tape::new();
            let xn = t.leaf(x.clone());
            let kn = t.leaf(k.clone());
            let bn = t.leaf(b.clone());
            let c = t.conv2d(xn, kn, bn, 2, 1).unwrap();
            let hwc = t.chw_to_hwc(c).unwrap();
            let g = t.global_avg_pool(hwc).unwrap();
            let l = t.squared_error(g, &target).unwrap();
            t.value(l).item()
        };

        let mut tape = Tape::new();
        let xn = tape.leaf(input.clone());
        let kn = tape.leaf(kernels.clone());
        let bn = tape.leaf(bias.clone());
        let c = tape.conv2d(xn, kn, bn, 2, 1).unwrap();
        let hwc = tape.chw_to_hwc(c).unwrap();
        let g = tape.global_avg_pool(hwc).unwrap();
        let l = tape.squared_error(g, &target).unwrap();
        let grads = tape.backward(l).unwrap();

        for (node, tensor, name) in [(xn, &input, "input"), (kn, &kernels, "kernels"), (bn, &bias, "bias")] {
            let numeric = finite_diff_grad(
                |theta| match name {
                    "input" => scalar_loss(theta, &kernels, &bias),
                    "kernels" => scalar_loss(&input, theta, &bias),
                    _ => scalar_loss(&input, &kernels, theta),
                },
                tensor,
                1e-6,
            );
            let err = max_relative_error(grads.get(node).unwrap(), &numeric);
            assert!(err < tol, "conv2d {name} gradient err {err:e}");
        }

        // vec_mat and mat_vec chained into softmax CE
        let v = random_tensor(&[3], &mut rng);
        let m = random_tensor(&[3, 4], &mut rng);
        let phi = random_tensor(&[5, 4], &mut rng);
        check_grad(
            |t, p| {
                let m = t.leaf(m.clone());
                let phi = t.leaf(phi.clone());
                let proj = t.vec_mat(p, m).unwrap();
                let logits = t.mat_vec(phi, proj).unwrap();
                t.softmax_cross_entropy(logits, 3).unwrap()
            },
            &v,
            tol,
        );
        check_grad(
            |t, p| {
                let v = t.leaf(v.clone());
                let phi = t.leaf(phi.clone());
                let proj = t.vec_mat(v, p).unwrap();
                let logits = t.mat_vec(phi, proj).unwrap();
                t.softmax_cross_entropy(logits, 0).unwrap()
            },
            &m,
            tol,
        );

        // similarity maps + max pool + squared error w.r.t. prototypes
        let fmap = random_tensor(&[4, 4, 3], &mut rng);
        let protos = random_tensor(&[6, 3], &mut rng);
        let att_target = random_tensor(&[6], &mut rng);
        check_grad(
            |t, p| {
                let f = t.leaf(fmap.clone());
                let maps = t.similarity_maps(f, p).unwrap();
                let a = t.max_pool_maps(maps).unwrap();
                t.squared_error(a, &att_target).unwrap()
            },
            &protos,
            tol,
        );

        // compactness w.r.t. the feature map feeding the similarity maps
        check_grad(
            |t, p| {
                let protos = t.leaf(protos.clone());
                let maps = t.similarity_maps(p, protos).unwrap();
                t.compactness(maps, true).unwrap()
            },
            &fmap,
            tol,
        );

        // relu in the middle of a chain
        let x = random_tensor(&[3, 4, 4], &mut rng);
        check_grad(
            |t, p| {
                let r = t.relu(p);
                let hwc = t.chw_to_hwc(r).unwrap();
                let g = t.global_avg_pool(hwc).unwrap();
                t.squared_error(g, &Tensor::full(&[3], 0.25)).unwrap()
            },
            &x,
            tol,
        );
    }

    #[test]
    fn smoothness_tracks_kinks_and_ties() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![-5.0, 1e-7, 2.0]).unwrap());
        tape.relu(x);
        assert!(tape.smoothness().relu_gap <= 1e-7);

        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::from_vec(&[1, 1, 2], vec![1.0, 1.0 - 1e-9]).unwrap());
        tape.max_pool_maps(m).unwrap();
        assert!(tape.smoothness().argmax_gap <= 1e-9 + 1e-15);
    }
}
