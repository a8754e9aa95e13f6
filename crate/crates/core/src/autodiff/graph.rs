//! Tape of recorded operations and the reverse sweep over it.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and backward simply walks it in reverse.

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};
use crate::sampler::{bilinear_taps, check_roi, roi_bin_center, BBox, BorderPolicy};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    CrossEntropy {
        x: Var,
        probs: Vec<T>,
        target: Vec<u8>,
        /// Per-sample weight, already divided by the pixel count.
        weights: Vec<f64>,
    },
    WeightedL1 {
        x: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    RoiAlign {
        x: Var,
        /// Four `(spatial index, weight)` taps per output cell, per sample.
        taps: Vec<[(usize, T); 4]>,
        bins: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a forward computation for a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} does not fit input {len} with padding {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let l = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * l..((c * k + ky) * k + kx + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let l = ho * wo;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * l..((c * k + ky) * k + kx + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation weights for doubling a length-`len` axis
/// with pixel-center alignment.
fn upsample_taps(len: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * len)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let i0 = src.floor();
            let f = src - i0;
            let clamp = |i: f64| (i.max(0.0) as usize).min(len - 1);
            [(clamp(i0), 1.0 - f), (clamp(i0 + 1.0), f)]
        })
        .collect()
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `t` as an input; gradients are tracked when
    /// `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims4(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::ShapeMismatch(format!("{what} expects NCHW input, got {s:?}"))),
        }
    }

    /// Cross-correlation with zero padding. `w` is `[out, in, k, k]`, `b` is
    /// `[out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.dims4(x, "conv2d")?;
        let [co, wci, kh, kw] = match *self.shape(w) {
            [a, b, c, d] => [a, b, c, d],
            ref s => return Err(Error::ShapeMismatch(format!("conv2d weight must be 4-D, got {s:?}"))),
        };
        if wci != ci {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight expects {wci} input channels, input has {ci}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::ShapeMismatch(format!("conv2d kernel {kh}x{kw} must be square and odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::ShapeMismatch(format!(
                    "conv2d bias {:?} for {co} output channels",
                    self.shape(b)
                )));
            }
        }
        let k = kh;
        let ho = conv_out(h, k, stride, pad)?;
        let wo = conv_out(wd, k, stride, pad)?;
        let (kk, l) = (ci * k * k, ho * wo);
        let direct = k == 1 && stride == 1 && pad == 0;

        let mut out = vec![T::zero(); n * co * l];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * l] };
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            for s in 0..n {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let cols_ref: &[T] = if direct {
                    xs
                } else {
                    im2col(xs, ci, h, wd, k, stride, pad, ho, wo, &mut cols);
                    &cols
                };
                let os = &mut out[s * co * l..(s + 1) * co * l];
                T::gemm(co, kk, l, wv, (kk, 1), cols_ref, (l, 1), T::zero(), os, (l, 1));
                if let Some(b) = b {
                    let bv = &self.nodes[b.0].value;
                    for (c, row) in os.chunks_exact_mut(l).enumerate() {
                        row.iter_mut().for_each(|v| *v += bv[c]);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, co, ho, wo], out, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, value, rg, Op::Sigmoid(x))
    }

    /// `y = x·wᵀ + b` with `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(Error::ShapeMismatch(format!("fully_connected input must be [N, F], got {s:?}"))),
        };
        let o = match *self.shape(w) {
            [o, wf] if wf == f => o,
            ref s => return Err(Error::ShapeMismatch(format!("fully_connected weight {s:?} for {f} features"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch(format!("fully_connected bias {:?}", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, f, o, self.value(x), (f, 1), self.value(w), (1, f), T::zero(), &mut out, (o, 1));
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v += bb);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![n, o], out, rg, Op::Linear { x, w, b }))
    }

    /// `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "global_avg_pool")?;
        let plane = h * w;
        let value = self
            .value(x)
            .chunks_exact(plane)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], value, rg, Op::GlobalAvgPool(x)))
    }

    /// Bilinear ×2 upsampling; input and output pixel-center grids share
    /// the same outer extent.
    pub fn upsample_bilinear_x2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "upsample_bilinear_x2")?;
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane_in, plane_out) in xv.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for (oy, row_taps) in ty.iter().enumerate() {
                for (ox, col_taps) in tx.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(iy, wy) in row_taps {
                        for &(ix, wx) in col_taps {
                            acc += wy * wx * plane_in[iy * w + ix].as_f64();
                        }
                    }
                    plane_out[oy * ow + ox] = T::from_f64(acc);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::Upsample2x(x)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(x).iter().map(|&v| v * f).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Scale(x, f))
    }

    /// Per-pixel softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "softmax_channels")?;
        if c < 2 {
            return Err(Error::ShapeMismatch("softmax needs at least two channels".into()));
        }
        let value = softmax_nchw(self.value(x), n, c, h * w);
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, h, w], value, rg, Op::Softmax(x)))
    }

    /// Mean over pixels of `−log softmax(x)[target]`, averaged over samples.
    pub fn cross_entropy_loss(&mut self, x: Var, target: &[u8]) -> Result<Var> {
        let n = self.dims4(x, "cross_entropy_loss")?[0];
        self.weighted_cross_entropy(x, target, &vec![1.0 / n as f64; n])
    }

    /// `Σₙ weightₙ · mean_pixels(−log softmax(xₙ)[targetₙ])`.
    ///
    /// `target` holds one class index per pixel in `N × H × W` order.
    pub fn weighted_cross_entropy(&mut self, x: Var, target: &[u8], sample_weights: &[f64]) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "cross_entropy_loss")?;
        let plane = h * w;
        if target.len() != n * plane {
            return Err(Error::ShapeMismatch(format!(
                "{} targets for {n}x{h}x{w} scores",
                target.len()
            )));
        }
        if sample_weights.len() != n {
            return Err(Error::ShapeMismatch(format!("{} weights for {n} samples", sample_weights.len())));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                classes: c,
            });
        }
        let probs = softmax_nchw(self.value(x), n, c, plane);
        let xv = self.value(x);
        let mut loss = 0.0f64;
        for s in 0..n {
            if sample_weights[s] == 0.0 {
                continue;
            }
            let base = s * c * plane;
            let mut acc = 0.0f64;
            for p in 0..plane {
                // log-sum-exp in f64 keeps the loss finite for saturated logits.
                let logits = (0..c).map(|k| xv[base + k * plane + p].as_f64());
                let m = logits.clone().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.map(|v| (v - m).exp()).sum::<f64>().ln();
                let t = target[s * plane + p] as usize;
                acc += lse - xv[base + t * plane + p].as_f64();
            }
            loss += sample_weights[s] * acc / plane as f64;
        }
        let weights = sample_weights.iter().map(|w| w / plane as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(loss)],
            rg,
            Op::CrossEntropy {
                x,
                probs,
                target: target.to_vec(),
                weights,
            },
        ))
    }

    /// Mean absolute difference to a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let n = self.value(pred).len();
        self.weighted_l1(pred, target, &vec![T::from_f64(1.0 / n as f64); n])
    }

    /// `Σ weightᵢ · |predᵢ − targetᵢ|` with subgradient zero at ties.
    pub fn weighted_l1(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "l1 loss over {n} values with {} targets and {} weights",
                target.len(),
                weights.len()
            )));
        }
        let loss: f64 = self
            .value(pred)
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &t), &w)| w.as_f64() * (p - t).abs().as_f64())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![T::from_f64(loss)],
            rg,
            Op::WeightedL1 {
                x: pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `out[k] = x[index[k]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if index.iter().any(|&i| i >= len) || shape.iter().product::<usize>() != index.len() {
            return Err(Error::ShapeMismatch(format!("gather of {} indices into {shape:?}", index.len())));
        }
        let xv = self.value(x);
        let value = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Gather { x, index }))
    }

    /// Reorders `[N, 4k]` box coordinates so that every box satisfies
    /// `x0 ≤ x1` and `y0 ≤ y1`.
    pub fn order_boxes(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] % 4 != 0 {
            return Err(Error::ShapeMismatch(format!("box tensor must be [N, 4k], got {shape:?}")));
        }
        let xv = self.value(x);
        let mut index = Vec::with_capacity(xv.len());
        for base in (0..xv.len()).step_by(4) {
            let (ax, ay, bx, by) = (base, base + 1, base + 2, base + 3);
            let (x0, x1) = if xv[ax] <= xv[bx] { (ax, bx) } else { (bx, ax) };
            let (y0, y1) = if xv[ay] <= xv[by] { (ay, by) } else { (by, ay) };
            index.extend_from_slice(&[x0, y0, x1, y1]);
        }
        self.gather(x, index, &shape)
    }

    /// RoI align of one box per sample from an NCHW feature map; the boxes
    /// are constants, gradients flow to the features only.
    pub fn roi_align(&mut self, x: Var, boxes: &[BBox], bins: usize) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "roi_align")?;
        if boxes.len() != n {
            return Err(Error::ShapeMismatch(format!("{} boxes for a batch of {n}", boxes.len())));
        }
        if bins == 0 {
            return Err(Error::ShapeMismatch("RoI align needs at least one bin".into()));
        }
        let mut taps = Vec::with_capacity(n * bins * bins);
        for b in boxes {
            check_roi(b, h, w)?;
            for i in 0..bins {
                for j in 0..bins {
                    let p = roi_bin_center(b, h, w, bins, i, j);
                    taps.push(
                        bilinear_taps(h, w, p.x, p.y, BorderPolicy::ReplicateEdge).map(|(idx, wt)| (idx, T::from_f64(wt))),
                    );
                }
            }
        }
        let cells = bins * bins;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c * cells];
        for s in 0..n {
            for ch in 0..c {
                let plane = &xv[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let dst = &mut out[(s * c + ch) * cells..(s * c + ch + 1) * cells];
                for (cell, o) in dst.iter_mut().enumerate() {
                    *o = taps[s * cells + cell].iter().fold(T::zero(), |acc, &(idx, wt)| acc + wt * plane[idx]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c, bins, bins], out, rg, Op::RoiAlign { x, taps, bins }))
    }

    /// Reverse sweep from the scalar `loss`. A graph supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let (parents, rest) = self.nodes.split_at_mut(idx);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else { continue };
            backprop(parents, node, grad);
        }
        Ok(())
    }
}

fn softmax_nchw<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![0.0f64; c];
    for s in 0..n {
        let base = s * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = x[base + k * plane + p].as_f64();
                m = m.max(*b);
            }
            let mut sum = 0.0;
            for b in buf.iter_mut() {
                *b = (*b - m).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[base + k * plane + p] = T::from_f64(b / sum);
            }
        }
    }
    out
}

fn accumulate<T: Element>(node: &mut Node<T>, contribution: impl FnOnce(&mut [T])) {
    if !node.requires_grad {
        return;
    }
    let len = node.value.len();
    let g = node.grad.get_or_insert_with(|| vec![T::zero(); len]);
    contribution(g);
}

fn backprop<T: Element>(parents: &mut [Node<T>], node: &Node<T>, grad: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Relu(x) => accumulate(&mut parents[x.0], |g| {
            for ((gi, &y), &d) in g.iter_mut().zip(&node.value).zip(grad) {
                if y > T::zero() {
                    *gi += d;
                }
            }
        }),
        Op::Sigmoid(x) => accumulate(&mut parents[x.0], |g| {
            for ((gi, &y), &d) in g.iter_mut().zip(&node.value).zip(grad) {
                *gi += d * y * (T::one() - y);
            }
        }),
        Op::Add(a, b) => {
            for v in [a, b] {
                accumulate(&mut parents[v.0], |g| g.iter_mut().zip(grad).for_each(|(gi, &d)| *gi += d));
            }
        }
        Op::Mul(a, b) => {
            let av = parents[a.0].value.clone();
            let bv = parents[b.0].value.clone();
            accumulate(&mut parents[a.0], |g| {
                for ((gi, &o), &d) in g.iter_mut().zip(&bv).zip(grad) {
                    *gi += d * o;
                }
            });
            accumulate(&mut parents[b.0], |g| {
                for ((gi, &o), &d) in g.iter_mut().zip(&av).zip(grad) {
                    *gi += d * o;
                }
            });
        }
        Op::Scale(x, f) => accumulate(&mut parents[x.0], |g| {
            g.iter_mut().zip(grad).for_each(|(gi, &d)| *gi += d * *f);
        }),
        Op::GlobalAvgPool(x) => {
            let plane = parents[x.0].shape[2] * parents[x.0].shape[3];
            let inv = T::from_f64(1.0 / plane as f64);
            accumulate(&mut parents[x.0], |g| {
                for (chunk, &d) in g.chunks_exact_mut(plane).zip(grad) {
                    chunk.iter_mut().for_each(|gi| *gi += d * inv);
                }
            });
        }
        Op::Upsample2x(x) => {
            let (h, w) = (parents[x.0].shape[2], parents[x.0].shape[3]);
            let ty = upsample_taps(h);
            let tx = upsample_taps(w);
            let ow = 2 * w;
            accumulate(&mut parents[x.0], |g| {
                for (gp, dp) in g.chunks_exact_mut(h * w).zip(grad.chunks_exact(4 * h * w)) {
                    for (oy, rt) in ty.iter().enumerate() {
                        for (ox, ct) in tx.iter().enumerate() {
                            let d = dp[oy * ow + ox];
                            for &(iy, wy) in rt {
                                for &(ix, wx) in ct {
                                    gp[iy * w + ix] += T::from_f64(wy * wx) * d;
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let [n, c, h, w] = [node.shape[0], node.shape[1], node.shape[2], node.shape[3]];
            let plane = h * w;
            let p = &node.value;
            accumulate(&mut parents[x.0], |g| {
                for s in 0..n {
                    let base = s * c * plane;
                    for px in 0..plane {
                        let dot: f64 = (0..c)
                            .map(|k| (p[base + k * plane + px] * grad[base + k * plane + px]).as_f64())
                            .sum();
                        for k in 0..c {
                            let i = base + k * plane + px;
                            g[i] += p[i] * (grad[i] - T::from_f64(dot));
                        }
                    }
                }
            });
        }
        Op::CrossEntropy {
            x,
            probs,
            target,
            weights,
        } => {
            let shape = parents[x.0].shape.clone();
            let (c, plane) = (shape[1], shape[2] * shape[3]);
            let d = grad[0];
            accumulate(&mut parents[x.0], |g| {
                for (s, &ws) in weights.iter().enumerate() {
                    if ws == 0.0 {
                        continue;
                    }
                    let scale = d * T::from_f64(ws);
                    let base = s * c * plane;
                    for p in 0..plane {
                        let t = target[s * plane + p] as usize;
                        for k in 0..c {
                            let i = base + k * plane + p;
                            let onehot = if k == t { T::one() } else { T::zero() };
                            g[i] += scale * (probs[i] - onehot);
                        }
                    }
                }
            });
        }
        Op::WeightedL1 { x, target, weights } => {
            let xv = parents[x.0].value.clone();
            let d = grad[0];
            accumulate(&mut parents[x.0], |g| {
                for (((gi, &p), &t), &w) in g.iter_mut().zip(&xv).zip(target).zip(weights) {
                    if p > t {
                        *gi += d * w;
                    } else if p < t {
                        *gi -= d * w;
                    }
                }
            });
        }
        Op::Gather { x, index } => accumulate(&mut parents[x.0], |g| {
            for (&i, &d) in index.iter().zip(grad) {
                g[i] += d;
            }
        }),
        Op::RoiAlign { x, taps, bins } => {
            let shape = parents[x.0].shape.clone();
            let (c, plane) = (shape[1], shape[2] * shape[3]);
            let cells = bins * bins;
            accumulate(&mut parents[x.0], |g| {
                for (s, sample_taps) in taps.chunks_exact(cells).enumerate() {
                    for ch in 0..c {
                        let gp = &mut g[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        let dp = &grad[(s * c + ch) * cells..(s * c + ch + 1) * cells];
                        for (cell_taps, &d) in sample_taps.iter().zip(dp) {
                            for &(idx, wt) in cell_taps {
                                gp[idx] += wt * d;
                            }
                        }
                    }
                }
            });
        }
        Op::Linear { x, w, b } => {
            let (n, f) = (parents[x.0].shape[0], parents[x.0].shape[1]);
            let o = node.shape[1];
            if parents[x.0].requires_grad {
                let wv = parents[w.0].value.clone();
                accumulate(&mut parents[x.0], |g| {
                    T::gemm(n, o, f, grad, (o, 1), &wv, (f, 1), T::one(), g, (f, 1));
                });
            }
            if parents[w.0].requires_grad {
                let xv = parents[x.0].value.clone();
                accumulate(&mut parents[w.0], |g| {
                    T::gemm(o, n, f, grad, (1, o), &xv, (f, 1), T::one(), g, (f, 1));
                });
            }
            if let Some(b) = b {
                accumulate(&mut parents[b.0], |g| {
                    for row in grad.chunks_exact(o) {
                        g.iter_mut().zip(row).for_each(|(gi, &d)| *gi += d);
                    }
                });
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let [n, ci, h, wd] = [
                parents[x.0].shape[0],
                parents[x.0].shape[1],
                parents[x.0].shape[2],
                parents[x.0].shape[3],
            ];
            let [co, _, k, _] = [
                parents[w.0].shape[0],
                parents[w.0].shape[1],
                parents[w.0].shape[2],
                parents[w.0].shape[3],
            ];
            let (ho, wo) = (node.shape[2], node.shape[3]);
            let (kk, l) = (ci * k * k, ho * wo);
            let direct = k == 1 && *stride == 1 && *pad == 0;
            let need_x = parents[x.0].requires_grad;
            let need_w = parents[w.0].requires_grad;

            if let Some(b) = b {
                accumulate(&mut parents[b.0], |g| {
                    for sample in grad.chunks_exact(co * l) {
                        for (gi, row) in g.iter_mut().zip(sample.chunks_exact(l)) {
                            *gi += T::from_f64(row.iter().map(|v| v.as_f64()).sum());
                        }
                    }
                });
            }
            if !(need_x || need_w) {
                return;
            }
            let xv = &parents[x.0].value;
            let wv = &parents[w.0].value;
            let mut cols = vec![T::zero(); kk * l];
            let mut dcols = vec![T::zero(); kk * l];
            let mut dw = vec![T::zero(); co * kk];
            let mut dx = if need_x { vec![T::zero(); xv.len()] } else { Vec::new() };
            for s in 0..n {
                let xs = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                let gs = &grad[s * co * l..(s + 1) * co * l];
                if need_w {
                    let cols_ref: &[T] = if direct {
                        xs
                    } else {
                        im2col(xs, ci, h, wd, k, *stride, *pad, ho, wo, &mut cols);
                        &cols
                    };
                    T::gemm(co, l, kk, gs, (l, 1), cols_ref, (1, l), T::one(), &mut dw, (kk, 1));
                }
                if need_x {
                    let dxs = &mut dx[s * ci * h * wd..(s + 1) * ci * h * wd];
                    if direct {
                        T::gemm(kk, co, l, wv, (1, kk), gs, (l, 1), T::one(), dxs, (l, 1));
                    } else {
                        T::gemm(kk, co, l, wv, (1, kk), gs, (l, 1), T::zero(), &mut dcols, (l, 1));
                        col2im(&dcols, ci, h, wd, k, *stride, *pad, ho, wo, dxs);
                    }
                }
            }
            if need_w {
                accumulate(&mut parents[w.0], |g| g.iter_mut().zip(&dw).for_each(|(gi, &d)| *gi += d));
            }
            if need_x {
                accumulate(&mut parents[x.0], |g| g.iter_mut().zip(&dx).for_each(|(gi, &d)| *gi += d));
            }
        }
    }
}
