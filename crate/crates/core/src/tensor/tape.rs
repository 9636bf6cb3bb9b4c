use super::kernels::{self, ConvGeometry};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    /// Leaf, or a result nothing upstream of it needs gradients for.
    Source,
    MatMul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geometry: ConvGeometry,
        batch: usize,
        /// Unfolded patches per image, kept only when the kernels need gradients.
        cols: Option<Vec<T>>,
    },
    Pad2d {
        x: Var,
        pad: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        /// `(softmax − onehot) / batch`, the gradient of the mean loss.
        dlogits: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Wengert list of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so operands always precede their
/// results and a single reverse sweep visits every node once.
#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

/// Spatial split of a rank-3 `[c,h,w]` or rank-4 `[n,c,h,w]` shape.
fn image_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a [c,h,w] or [n,c,h,w] tensor, got shape {shape:?}"
        ))),
    }
}

fn image_shape(batched: bool, n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![n, c, h, w]
    } else {
        vec![c, h, w]
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.clear_grad();
        self.push(tensor, Op::Source)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Consumes the tape and returns one recorded value.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn record(
        &mut self,
        shape: &[usize],
        data: Vec<T>,
        inputs: &[Var],
        op: impl FnOnce() -> Op<T>,
    ) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        let tracked = inputs.iter().any(|&v| self.needs_grad(v));
        value.set_requires_grad(tracked);
        let op = if tracked { op() } else { Op::Source };
        Ok(self.push(value, op))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "variable {} is not on this tape",
                v.0
            )))
        }
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension(format!(
                    "matmul needs [m,k] x [k,n], got {sa:?} x {sb:?}"
                )))
            }
        };
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.record(&[m, n], out, &[a, b], || Op::MatMul { a, b })
    }

    /// Adds a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(bias)?;
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        let (m, n) = match (sx, sb) {
            ([m, n], [n2]) if n == n2 => (*m, *n),
            _ => {
                return Err(Error::Dimension(format!(
                    "add_bias needs [m,n] + [n], got {sx:?} + {sb:?}"
                )))
            }
        };
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        self.record(&[m, n], out, &[x, bias], || Op::AddBias { x, bias })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what} needs equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        self.record(&shape, out, &[a, b], || Op::Add { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        self.record(&shape, out, &[a, b], || Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.value(x).shape().to_vec();
        let out = self.value(x).data().iter().map(|&v| v * factor).collect();
        self.record(&shape, out, &[x], || Op::Scale { x, factor })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let total: T = self.value(x).data().iter().copied().sum();
        self.record(&[1], vec![total], &[x], || Op::Sum { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let shape = self.value(x).shape().to_vec();
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        self.record(&shape, out, &[x], || Op::Relu { x })
    }

    /// Valid, stride-1 cross-correlation plus per-channel bias.
    ///
    /// `input` is `[c_in,h,w]` or a batch `[n,c_in,h,w]`; `kernels` is
    /// `[c_out,c_in,kh,kw]` and `bias` is `[c_out]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, bias: Var) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(kernels)?;
        self.check_var(bias)?;
        let in_shape = self.value(input).shape().to_vec();
        let (n, c_in, h, w) = image_dims(&in_shape, "conv2d")?;
        let k_shape = self.value(kernels).shape().to_vec();
        let (c_out, kh, kw) = match k_shape[..] {
            [co, ci, kh, kw] if ci == c_in => (co, kh, kw),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d kernels must be [c_out,{c_in},kh,kw] for input {in_shape:?}, got {k_shape:?}"
                )))
            }
        };
        if self.value(bias).shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias must be [{c_out}], got {:?}",
                self.value(bias).shape()
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} is larger than input {h}x{w}"
            )));
        }
        let geometry = ConvGeometry { c_in, h, w, kh, kw };
        let (patch, pixels) = (geometry.patch_len(), geometry.out_pixels());
        let keep_cols = self.needs_grad(kernels);

        let mut out = vec![T::zero(); n * c_out * pixels];
        let mut all_cols = if keep_cols {
            vec![T::zero(); n * patch * pixels]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); patch * pixels];
        {
            let x = self.value(input).data();
            let k = self.value(kernels).data();
            let b = self.value(bias).data();
            for img in 0..n {
                let cols = if keep_cols {
                    &mut all_cols[img * patch * pixels..(img + 1) * patch * pixels]
                } else {
                    &mut scratch[..]
                };
                kernels::im2col(
                    &x[img * c_in * h * w..(img + 1) * c_in * h * w],
                    geometry,
                    cols,
                );
                let dst = &mut out[img * c_out * pixels..(img + 1) * c_out * pixels];
                for (o, plane) in dst.chunks_exact_mut(pixels).enumerate() {
                    plane.fill(b[o]);
                }
                kernels::gemm_nn(k, cols, dst, c_out, patch, pixels);
            }
        }
        let shape = image_shape(
            in_shape.len() == 4,
            n,
            c_out,
            geometry.out_h(),
            geometry.out_w(),
        );
        self.record(&shape, out, &[input, kernels, bias], || Op::Conv2d {
            input,
            kernels,
            bias,
            geometry,
            batch: n,
            cols: keep_cols.then_some(all_cols),
        })
    }

    /// Zero padding of `pad` pixels on every spatial border.
    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        self.check_var(x)?;
        let in_shape = self.value(x).shape().to_vec();
        let (n, c, h, w) = image_dims(&in_shape, "pad2d")?;
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::zero(); n * c * ph * pw];
        let src = self.value(x).data();
        for plane in 0..n * c {
            for y in 0..h {
                let s = &src[(plane * h + y) * w..(plane * h + y + 1) * w];
                let d0 = (plane * ph + y + pad) * pw + pad;
                out[d0..d0 + w].copy_from_slice(s);
            }
        }
        let shape = image_shape(in_shape.len() == 4, n, c, ph, pw);
        self.record(&shape, out, &[x], || Op::Pad2d { x, pad })
    }

    /// Non-overlapping 2×2 max pooling; ties resolve to the first element in
    /// row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let in_shape = self.value(x).shape().to_vec();
        let (n, c, h, w) = image_dims(&in_shape, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!(
                "maxpool2 needs even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let top = base + 2 * oy * w + 2 * ox;
                    let mut best = top;
                    for idx in [top + 1, top + w, top + w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = image_shape(in_shape.len() == 4, n, c, oh, ow);
        self.record(&shape, out, &[x], || Op::MaxPool2 { x, argmax })
    }

    /// Column-wise concatenation of `[m, k_i]` matrices in argument order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Dimension("concat needs at least one part".into()))?;
        for &p in parts {
            self.check_var(p)?;
        }
        let m = match self.value(first).shape() {
            [m, _] => *m,
            s => {
                return Err(Error::Dimension(format!(
                    "concat parts must be rank 2, got {s:?}"
                )))
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).shape() {
                [mi, k] if *mi == m => widths.push(*k),
                s => {
                    return Err(Error::Dimension(format!(
                        "concat parts must share leading extent {m}, got {s:?}"
                    )))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &k) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * k..(i + 1) * k]);
            }
        }
        self.record(&[m, total], out, parts, || Op::Concat {
            parts: parts.to_vec(),
        })
    }

    /// Columns `start..end` of a `[m,n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_var(x)?;
        let (m, n) = match self.value(x).shape() {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::Dimension(format!(
                    "slice_cols needs a rank-2 tensor, got {s:?}"
                )))
            }
        };
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} is invalid for width {n}"
            )));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        self.record(&[m, end - start], out, &[x], || Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(x)?;
        let value = self.value(x).clone().reshape(shape)?;
        self.record(shape, value.into_data(), &[x], || Op::Reshape { x })
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    pub fn softmax_cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let (batch, classes) = match self.value(logits).shape() {
            [b, c] => (*b, *c),
            s => {
                return Err(Error::Dimension(format!(
                    "logits must be [batch, C], got {s:?}"
                )))
            }
        };
        if targets.len() != batch {
            return Err(Error::Dimension(format!(
                "{} targets supplied for a batch of {batch}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index(format!(
                "target {bad} is outside [0, {classes})"
            )));
        }
        let z = self.value(logits).data();
        let mut total = 0.0f64;
        let mut dlogits = vec![T::zero(); batch * classes];
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * classes..(i + 1) * classes];
            let max = row
                .iter()
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
            let exps: Vec<f64> = row.iter().map(|&v| (v.as_f64() - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            total += max + denom.ln() - row[t].as_f64();
            for (j, e) in exps.iter().enumerate() {
                let onehot = if j == t { 1.0 } else { 0.0 };
                dlogits[i * classes + j] = T::from_f64((e / denom - onehot) / batch as f64);
            }
        }
        let loss = T::from_f64(total / batch as f64);
        self.record(&[1], vec![loss], &[logits], || Op::SoftmaxCrossEntropy {
            logits,
            dlogits,
        })
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that
    /// requires a gradient, leaves included, holds `dloss/dnode`; leaves the
    /// loss does not depend on get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(Some(g))?;
        }
        for node in &mut self.nodes {
            if node.value.requires_grad() && node.value.grad().is_none() {
                let zeros = vec![T::zero(); node.value.numel()];
                node.value.set_grad(Some(zeros))?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();

        match &nodes[idx].op {
            Op::Source => {}
            Op::MatMul { a, b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if let Some(da) = tracked(nodes, grads, *a) {
                    kernels::gemm_nt(g, val(*b), da, m, n, k);
                }
                if let Some(db) = tracked(nodes, grads, *b) {
                    kernels::gemm_tn(val(*a), g, db, k, m, n);
                }
            }
            Op::AddBias { x, bias } => {
                let n = shape(*bias)[0];
                if let Some(dx) = tracked(nodes, grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = tracked(nodes, grads, *bias) {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = tracked(nodes, grads, v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Mul { a, b } => {
                if let Some(da) = tracked(nodes, grads, *a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = tracked(nodes, grads, *b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *factor;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(val(*x)) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels: kern,
                bias,
                geometry,
                batch,
                cols,
            } => {
                let gm = *geometry;
                let c_out = shape(*kern)[0];
                let (patch, pixels) = (gm.patch_len(), gm.out_pixels());
                let in_len = gm.c_in * gm.h * gm.w;
                if let Some(db) = tracked(nodes, grads, *bias) {
                    for (i, plane) in g.chunks_exact(pixels).enumerate() {
                        db[i % c_out] += plane.iter().copied().sum::<T>();
                    }
                }
                if let (Some(dk), Some(cols)) = (tracked(nodes, grads, *kern), cols.as_ref()) {
                    for img in 0..*batch {
                        let gi = &g[img * c_out * pixels..(img + 1) * c_out * pixels];
                        let ci = &cols[img * patch * pixels..(img + 1) * patch * pixels];
                        kernels::gemm_nt(gi, ci, dk, c_out, pixels, patch);
                    }
                }
                if let Some(dx) = tracked(nodes, grads, *input) {
                    let k = val(*kern);
                    let mut dcols = vec![T::zero(); patch * pixels];
                    for img in 0..*batch {
                        dcols.fill(T::zero());
                        let gi = &g[img * c_out * pixels..(img + 1) * c_out * pixels];
                        kernels::gemm_tn(k, gi, &mut dcols, patch, c_out, pixels);
                        kernels::col2im_add(&dcols, gm, &mut dx[img * in_len..(img + 1) * in_len]);
                    }
                }
            }
            Op::Pad2d { x, pad } => {
                let (n, c, h, w) = image_dims(shape(*x), "pad2d").expect("validated in forward");
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for plane in 0..n * c {
                        for y in 0..h {
                            let s0 = (plane * ph + y + pad) * pw + pad;
                            let d0 = (plane * h + y) * w;
                            add_into(&mut dx[d0..d0 + w], &g[s0..s0 + w]);
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Concat { parts } => {
                let total = nodes[idx].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let k = shape(p)[1];
                    if let Some(dp) = tracked(nodes, grads, p) {
                        for (drow, grow) in dp.chunks_exact_mut(k).zip(g.chunks_exact(total)) {
                            add_into(drow, &grow[offset..offset + k]);
                        }
                    }
                    offset += k;
                }
            }
            Op::SliceCols { x, start } => {
                let n = shape(*x)[1];
                let k = nodes[idx].value.shape()[1];
                if let Some(dx) = tracked(nodes, grads, *x) {
                    for (drow, grow) in dx.chunks_exact_mut(n).zip(g.chunks_exact(k)) {
                        add_into(&mut drow[*start..*start + k], grow);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dx) = tracked(nodes, grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::SoftmaxCrossEntropy { logits, dlogits } => {
                if let Some(dz) = tracked(nodes, grads, *logits) {
                    for (d, &dl) in dz.iter_mut().zip(dlogits) {
                        *d += g[0] * dl;
                    }
                }
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient buffer for `v` if it is tracked, allocating zeros on first use.
fn tracked<'g, T: Element>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'g mut [T]> {
    if !nodes[v.0].value.requires_grad() {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::zero(); len])
            .as_mut_slice(),
    )
}
