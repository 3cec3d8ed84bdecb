use super::kernels::{self, ConvGeom, DepthwiseGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value owned by a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool, alpha: f64 },
    Softmax(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize, len: usize },
    Reshape(Var),
    Mean { input: Var, axes: Vec<usize> },
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, b: Var, geom: DepthwiseGeom },
    AvgPool { x: Var, dims: [usize; 4], window: [usize; 3] },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    ClipMix { x: Var, w: Var, clips: usize },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    IouLoss { pred: Var, targets: Vec<[f64; 2]>, rows: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "batched_matmul",
            Op::Softmax(..) => "softmax_rows",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(..) => "reshape",
            Op::Mean { .. } => "mean",
            Op::Sum(..) => "sum",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Conv { .. } => "conv",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::AvgPool { .. } => "avg_pool",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::ClipMix { .. } => "clip_mix",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::IouLoss { .. } => "iou_loss",
        }
    }
}

#[derive(Debug)]
struct Entry {
    value: Tensor,
    op: Option<Op>,
}

/// Records one forward pass. Values live in an arena indexed by [`Var`];
/// an operation is recorded (and counted) only when one of its inputs
/// requires a gradient, so a graph built purely from frozen tensors leaves
/// `node_count() == 0`.
#[derive(Debug, Default)]
pub struct Tape {
    entries: Vec<Entry>,
    node_count: usize,
    params: Vec<(String, Var)>,
    fault: Option<&'static str>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    entries: &[Entry],
    v: Var,
) -> Option<&'a mut [f64]> {
    let e = &entries[v.0];
    if !e.value.requires_grad() {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; e.value.numel()])
            .as_mut_slice(),
    )
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded differentiable operations.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].value.requires_grad()
    }

    /// Inserts a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let t = Tensor {
            grad: None,
            ..t
        };
        self.entries.push(Entry { value: t, op: None });
        Var(self.entries.len() - 1)
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Inserts a named parameter. Learnable parameters are remembered so
    /// their gradients can be routed back after [`Tape::backward`].
    pub fn param(&mut self, path: impl Into<String>, t: &Tensor) -> Var {
        let v = self.leaf(t.detached().with_requires_grad(t.requires_grad()));
        if t.requires_grad() {
            self.params.push((path.into(), v));
        }
        v
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(p, v)| (p.as_str(), *v))
    }

    /// Test hook: corrupts the backward rule of the named operation so that
    /// gradient checks can be shown to catch it.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        let tracked = inputs.iter().any(|&v| self.requires_grad(v));
        let value = Tensor::new(shape, data)?.with_requires_grad(tracked);
        let op = if tracked {
            self.node_count += 1;
            Some(op)
        } else {
            None
        };
        self.entries.push(Entry { value, op });
        Ok(Var(self.entries.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), data, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), data, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Scale(a, c))
    }

    /// Multiplies every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "scale_by",
                format!("scale must have one element, got {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|x| c * x).collect();
        self.push(self.shape(a).to_vec(), data, &[a, s], Op::ScaleBy(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| kernels::sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| kernels::softplus(x)).collect();
        self.push(self.shape(a).to_vec(), data, &[a], Op::Softplus(a))
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}: inner dims differ", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    /// Batched product over the leading axis: `alpha · a[i] · b[i]` or,
    /// with `trans_b`, `alpha · a[i] · b[i]ᵀ`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, m, k], &[bb, r1, r2]) = (&sa[..], &sb[..]) else {
            return Err(Error::dim("batched_matmul", format!("{sa:?} x {sb:?}: need rank 3")));
        };
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if ba != bb || k != kb {
            return Err(Error::dim(
                "batched_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let mut out = vec![0.0; ba * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                kernels::matmul_nt_acc(ai, bi, oi, m, k, n);
            } else {
                kernels::matmul_acc(ai, bi, oi, m, k, n);
            }
            if alpha != 1.0 {
                oi.iter_mut().for_each(|v| *v *= alpha);
            }
        }
        self.push(vec![ba, m, n], out, &[a, b], Op::Bmm { a, b, trans_b, alpha })
    }

    /// `x · w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix("linear", x)?;
        let (k2, n) = self.matrix("linear", w)?;
        if k != k2 {
            return Err(Error::dim(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::dim(
                    "linear",
                    format!("bias {:?} vs width {n}", self.shape(b)),
                ));
            }
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
            inputs.push(b);
        }
        self.push(vec![m, n], out, &inputs, Op::Linear { x, w, b })
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("rank >= 1");
        let out = kernels::softmax_rows(self.value(x).data(), cols);
        self.push(self.shape(x).to_vec(), out, &[x], Op::Softmax(x))
    }

    // ---- structural ---------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        let out_shape = kernels::concat_shape(&shapes, axis)?;
        let datas: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v).data()).collect();
        let data = kernels::concat(&datas, &shapes, axis);
        self.push(
            out_shape,
            data,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        kernels::check_narrow(&shape, axis, start, len)?;
        let data = kernels::narrow(self.value(input).data(), &shape, axis, start, len);
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(out_shape, data, &[input], Op::Narrow { input, axis, start, len })
    }

    /// Splits `input` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, input: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(input).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::dim(
                "split",
                format!("sizes {sizes:?} do not tile axis {axis} of {:?}", self.shape(input)),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(input, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.push(shape.to_vec(), data, &[x], Op::Reshape(x))
    }

    /// `[m × h·d] → [h × m × d]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (m, c) = self.matrix("split_heads", x)?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::dim(
                "split_heads",
                format!("width {c} not divisible by {heads} heads"),
            ));
        }
        let d = c / heads;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * c];
        for h in 0..heads {
            for i in 0..m {
                out[(h * m + i) * d..(h * m + i + 1) * d]
                    .copy_from_slice(&src[i * c + h * d..i * c + (h + 1) * d]);
            }
        }
        self.push(vec![heads, m, d], out, &[x], Op::SplitHeads { x, heads })
    }

    /// `[h × m × d] → [m × h·d]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let [heads, m, d] = *self.shape(x) else {
            return Err(Error::dim("merge_heads", format!("need rank 3, got {:?}", self.shape(x))));
        };
        let c = heads * d;
        let src = self.value(x).data();
        let mut out = vec![0.0; m * c];
        for h in 0..heads {
            for i in 0..m {
                out[i * c + h * d..i * c + (h + 1) * d]
                    .copy_from_slice(&src[(h * m + i) * d..(h * m + i + 1) * d]);
            }
        }
        self.push(vec![m, c], out, &[x], Op::MergeHeads { x, heads })
    }

    // ---- reductions ---------------------------------------------------

    /// Mean over `axes`; the reduced axes are removed from the shape.
    pub fn mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axes.is_empty() || axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::dim("mean", format!("axes {axes:?} for {shape:?}")));
        }
        let (out_shape, map) = kernels::reduction_map(&shape, axes);
        let count = axes.iter().map(|&a| shape[a]).product::<usize>() as f64;
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(self.value(input).data()) {
            out[o] += v;
        }
        out.iter_mut().for_each(|v| *v /= count);
        self.push(
            out_shape,
            out,
            &[input],
            Op::Mean {
                input,
                axes: axes.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(vec![1], vec![s], &[input], Op::Sum(input))
    }

    // ---- normalization and convolution ---------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (out, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            cols,
        );
        self.push(
            self.shape(x).to_vec(),
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, out_shape: Vec<usize>) -> Result<Var> {
        if self.shape(b) != [geom.cout] {
            return Err(Error::dim(
                "conv",
                format!("bias {:?} vs {} output channels", self.shape(b), geom.cout),
            ));
        }
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        self.push(out_shape, out, &[x, w, b], Op::Conv { x, w, b, geom })
    }

    fn odd_kernel(op: &'static str, k: &[usize]) -> Result<()> {
        if k.iter().any(|&v| v % 2 == 0) {
            return Err(Error::dim(op, format!("kernel {k:?} must have odd extents")));
        }
        Ok(())
    }

    /// Same-padded temporal convolution: `x: [L × Cin]`, `w: [k × Cin × Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[l, cin], &[k, wcin, cout]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim("conv1d", format!("input {xs:?}, weight {ws:?}")));
        };
        if cin != wcin {
            return Err(Error::dim("conv1d", format!("input {xs:?}, weight {ws:?}")));
        }
        Self::odd_kernel("conv1d", &[k])?;
        let geom = ConvGeom {
            dims: [l, 1, 1],
            kernel: [k, 1, 1],
            cin,
            cout,
        };
        self.conv(x, w, b, geom, vec![l, cout])
    }

    /// Same-padded spatial convolution applied independently to each of the
    /// `n` leading slices: `x: [n × H × W × Cin]`, `w: [kh × kw × Cin × Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, h, wd, cin], &[kh, kw, wcin, cout]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim("conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if cin != wcin {
            return Err(Error::dim("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        Self::odd_kernel("conv2d", &[kh, kw])?;
        let geom = ConvGeom {
            dims: [n, h, wd],
            kernel: [1, kh, kw],
            cin,
            cout,
        };
        self.conv(x, w, b, geom, vec![n, h, wd, cout])
    }

    /// Same-padded spatio-temporal convolution: `x: [T × H × W × Cin]`,
    /// `w: [kt × kh × kw × Cin × Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[t, h, wd, cin], &[kt, kh, kw, wcin, cout]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim("conv3d", format!("input {xs:?}, weight {ws:?}")));
        };
        if cin != wcin {
            return Err(Error::dim("conv3d", format!("input {xs:?}, weight {ws:?}")));
        }
        Self::odd_kernel("conv3d", &[kt, kh, kw])?;
        let geom = ConvGeom {
            dims: [t, h, wd],
            kernel: [kt, kh, kw],
            cin,
            cout,
        };
        self.conv(x, w, b, geom, vec![t, h, wd, cout])
    }

    /// Per-channel same-padded convolution: `x: [n × H × W × C]`, `w: [kh × kw × C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (&[n, h, wd, c], &[kh, kw, wc]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim("depthwise_conv2d", format!("input {xs:?}, weight {ws:?}")));
        };
        if c != wc || self.shape(b) != [c] {
            return Err(Error::dim(
                "depthwise_conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        Self::odd_kernel("depthwise_conv2d", &[kh, kw])?;
        let geom = DepthwiseGeom { n, h, w: wd, c, kh, kw };
        let out = kernels::depthwise_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        self.push(xs, out, &[x, w, b], Op::Depthwise { x, w, b, geom })
    }

    /// Non-overlapping average pooling of `[T × H × W × C]`.
    pub fn avg_pool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [t, h, w, c] = xs[..] else {
            return Err(Error::dim("avg_pool", format!("need rank 4, got {xs:?}")));
        };
        let dims = [t, h, w, c];
        if window.contains(&0) || t % window[0] != 0 || h % window[1] != 0 || w % window[2] != 0 {
            return Err(Error::dim("avg_pool", format!("window {window:?} does not tile {xs:?}")));
        }
        let out = kernels::avg_pool(self.value(x).data(), dims, window);
        let shape = vec![t / window[0], h / window[1], w / window[2], c];
        self.push(shape, out, &[x], Op::AvgPool { x, dims, window })
    }

    /// Mixes timesteps within each of `clips` equal blocks:
    /// `x: [clips·a × C]`, `w: [b × a]` → `[clips·b × C]`.
    pub fn clip_mix(&mut self, x: Var, w: Var, clips: usize) -> Result<Var> {
        let (rows, c) = self.matrix("clip_mix", x)?;
        let (b, a) = self.matrix("clip_mix", w)?;
        if clips == 0 || rows != clips * a {
            return Err(Error::dim(
                "clip_mix",
                format!("input {:?} is not {clips} clips of {a} steps", self.shape(x)),
            ));
        }
        let mut out = vec![0.0; clips * b * c];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        for t in 0..clips {
            kernels::matmul_acc(
                wd,
                &xd[t * a * c..(t + 1) * a * c],
                &mut out[t * b * c..(t + 1) * b * c],
                b,
                a,
                c,
            );
        }
        self.push(vec![clips * b, c], out, &[x, w], Op::ClipMix { x, w, clips })
    }

    // ---- losses -------------------------------------------------------

    /// Summed binary cross-entropy of `logits` against same-shape `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.value(logits).numel() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} targets for logits {:?}", targets.len(), self.shape(logits)),
            ));
        }
        let s = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| kernels::bce_with_logit(x, y))
            .sum();
        self.push(
            vec![1],
            vec![s],
            &[logits],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Summed `1 − IoU` between predicted (start, end) distances in `pred`
    /// rows `rows` and the matching `targets`.
    pub fn iou_loss(&mut self, pred: Var, rows: &[usize], targets: &[[f64; 2]]) -> Result<Var> {
        let (n, two) = self.matrix("iou_loss", pred)?;
        if two != 2 || rows.len() != targets.len() || rows.iter().any(|&r| r >= n) {
            return Err(Error::dim(
                "iou_loss",
                format!("pred {:?}, {} rows, {} targets", self.shape(pred), rows.len(), targets.len()),
            ));
        }
        let pd = self.value(pred).data();
        let s = rows
            .iter()
            .zip(targets)
            .map(|(&r, &t)| kernels::iou_loss_pair([pd[2 * r], pd[2 * r + 1]], t).0)
            .sum();
        self.push(
            vec![1],
            vec![s],
            &[pred],
            Op::IouLoss {
                pred,
                targets: targets.to_vec(),
                rows: rows.to_vec(),
            },
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Only values that require a
    /// gradient receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(op) = &self.entries[id].op else {
                continue;
            };
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if self.fault == Some(op.name()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            self.backward_op(op, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, op: &Op, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let e = &self.entries;
        let val = |v: Var| e[v.0].value.data();
        let out = e[id].value.data();
        match op {
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = grad_buf(grads, e, v) {
                        axpy(ga, 1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = grad_buf(grads, e, *a) {
                    for ((d, gv), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d += gv * bv;
                    }
                }
                if let Some(gb) = grad_buf(grads, e, *b) {
                    for ((d, gv), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = grad_buf(grads, e, *a) {
                    axpy(ga, *c, g);
                }
            }
            Op::ScaleBy(a, s) => {
                let c = val(*s)[0];
                if let Some(ga) = grad_buf(grads, e, *a) {
                    axpy(ga, c, g);
                }
                if let Some(gs) = grad_buf(grads, e, *s) {
                    gs[0] += kernels::dot(g, val(*a));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (e[a.0].value.shape()[0], e[a.0].value.shape()[1]);
                let n = e[b.0].value.shape()[1];
                if let Some(ga) = grad_buf(grads, e, *a) {
                    kernels::matmul_nt_acc(g, val(*b), ga, m, n, k);
                }
                if let Some(gb) = grad_buf(grads, e, *b) {
                    kernels::matmul_tn_acc(val(*a), g, gb, k, m, n);
                }
            }
            Op::Bmm { a, b, trans_b, alpha } => {
                let sa = e[a.0].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = e[id].value.shape()[2];
                let (ad, bd) = (val(*a), val(*b));
                let gs: Vec<f64> = g.iter().map(|v| v * alpha).collect();
                if let Some(ga) = grad_buf(grads, e, *a) {
                    for i in 0..batch {
                        let gi = &gs[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // a·bᵀ with b: [n × k]
                            kernels::matmul_acc(gi, bi, gai, m, n, k);
                        } else {
                            kernels::matmul_nt_acc(gi, bi, gai, m, n, k);
                        }
                    }
                }
                if let Some(gb) = grad_buf(grads, e, *b) {
                    for i in 0..batch {
                        let gi = &gs[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            kernels::matmul_tn_acc(gi, ai, gbi, n, m, k);
                        } else {
                            kernels::matmul_tn_acc(ai, gi, gbi, k, m, n);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let cols = *e[id].value.shape().last().unwrap();
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for ((grow, yrow), dst) in g
                        .chunks_exact(cols)
                        .zip(out.chunks_exact(cols))
                        .zip(gx.chunks_exact_mut(cols))
                    {
                        let inner = kernels::dot(grow, yrow);
                        for ((d, gv), yv) in dst.iter_mut().zip(grow).zip(yrow) {
                            *d += yv * (gv - inner);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = e[id].value.shape();
                let mut start = 0;
                for &v in inputs {
                    let len = e[v.0].value.shape()[*axis];
                    if let Some(gv) = grad_buf(grads, e, v) {
                        let part = kernels::narrow(g, out_shape, *axis, start, len);
                        axpy(gv, 1.0, &part);
                    }
                    start += len;
                }
            }
            Op::Narrow { input, axis, start, len } => {
                let shape = e[input.0].value.shape();
                if let Some(gx) = grad_buf(grads, e, *input) {
                    kernels::narrow_backward(gx, g, shape, *axis, *start, *len);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    axpy(gx, 1.0, g);
                }
            }
            Op::Mean { input, axes } => {
                let shape = e[input.0].value.shape();
                let count = axes.iter().map(|&a| shape[a]).product::<usize>() as f64;
                let (_, map) = kernels::reduction_map(shape, axes);
                if let Some(gx) = grad_buf(grads, e, *input) {
                    for (d, &o) in gx.iter_mut().zip(&map) {
                        *d += g[o] / count;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (e[x.0].value.shape()[0], e[x.0].value.shape()[1]);
                let n = e[w.0].value.shape()[1];
                if let Some(gx) = grad_buf(grads, e, *x) {
                    kernels::matmul_nt_acc(g, val(*w), gx, m, n, k);
                }
                if let Some(gw) = grad_buf(grads, e, *w) {
                    kernels::matmul_tn_acc(val(*x), g, gw, k, m, n);
                }
                if let Some(b) = b {
                    if let Some(gb) = grad_buf(grads, e, *b) {
                        for row in g.chunks_exact(n) {
                            axpy(gb, 1.0, row);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = val(*gamma).len();
                let gam = val(*gamma);
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for c in 0..cols {
                            let gh = grow[c] * gam[c];
                            mean_gh += gh;
                            mean_ghh += gh * hrow[c];
                        }
                        mean_gh /= cols as f64;
                        mean_ghh /= cols as f64;
                        for c in 0..cols {
                            let gh = grow[c] * gam[c];
                            gx[r * cols + c] += rs * (gh - mean_gh - hrow[c] * mean_ghh);
                        }
                    }
                }
                if let Some(gg) = grad_buf(grads, e, *gamma) {
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for ((d, gv), hv) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * hv;
                        }
                    }
                }
                if let Some(gb) = grad_buf(grads, e, *beta) {
                    for grow in g.chunks_exact(cols) {
                        axpy(gb, 1.0, grow);
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for ((d, gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *d += gv * kernels::gelu_grad(xv);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for ((d, gv), yv) in gx.iter_mut().zip(g).zip(out) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Softplus(x) => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for ((d, gv), &xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *d += gv * kernels::sigmoid(xv);
                    }
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gx) = grad_buf(grads, e, *x) {
                    kernels::conv_backward(geom, xd, wd, g, Some(gx), None, None);
                }
                if let Some(gw) = grad_buf(grads, e, *w) {
                    kernels::conv_backward(geom, xd, wd, g, None, Some(gw), None);
                }
                if let Some(gb) = grad_buf(grads, e, *b) {
                    kernels::conv_backward(geom, xd, wd, g, None, None, Some(gb));
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gx) = grad_buf(grads, e, *x) {
                    kernels::depthwise_backward(geom, xd, wd, g, Some(gx), None, None);
                }
                if let Some(gw) = grad_buf(grads, e, *w) {
                    kernels::depthwise_backward(geom, xd, wd, g, None, Some(gw), None);
                }
                if let Some(gb) = grad_buf(grads, e, *b) {
                    kernels::depthwise_backward(geom, xd, wd, g, None, None, Some(gb));
                }
            }
            Op::AvgPool { x, dims, window } => {
                if let Some(gx) = grad_buf(grads, e, *x) {
                    kernels::avg_pool_backward(gx, g, *dims, *window);
                }
            }
            Op::SplitHeads { x, heads } => {
                let (m, c) = (e[x.0].value.shape()[0], e[x.0].value.shape()[1]);
                let d = c / heads;
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for h in 0..*heads {
                        for i in 0..m {
                            axpy(
                                &mut gx[i * c + h * d..i * c + (h + 1) * d],
                                1.0,
                                &g[(h * m + i) * d..(h * m + i + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = e[x.0].value.shape();
                let (m, d) = (s[1], s[2]);
                let c = heads * d;
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for h in 0..*heads {
                        for i in 0..m {
                            axpy(
                                &mut gx[(h * m + i) * d..(h * m + i + 1) * d],
                                1.0,
                                &g[i * c + h * d..i * c + (h + 1) * d],
                            );
                        }
                    }
                }
            }
            Op::ClipMix { x, w, clips } => {
                let c = e[x.0].value.shape()[1];
                let (b, a) = (e[w.0].value.shape()[0], e[w.0].value.shape()[1]);
                let (xd, wd) = (val(*x), val(*w));
                if let Some(gx) = grad_buf(grads, e, *x) {
                    for t in 0..*clips {
                        kernels::matmul_tn_acc(
                            wd,
                            &g[t * b * c..(t + 1) * b * c],
                            &mut gx[t * a * c..(t + 1) * a * c],
                            a,
                            b,
                            c,
                        );
                    }
                }
                if let Some(gw) = grad_buf(grads, e, *w) {
                    for t in 0..*clips {
                        kernels::matmul_nt_acc(
                            &g[t * b * c..(t + 1) * b * c],
                            &xd[t * a * c..(t + 1) * a * c],
                            gw,
                            b,
                            c,
                            a,
                        );
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if let Some(gx) = grad_buf(grads, e, *logits) {
                    for ((d, &xv), &y) in gx.iter_mut().zip(val(*logits)).zip(targets) {
                        *d += g[0] * (kernels::sigmoid(xv) - y);
                    }
                }
            }
            Op::IouLoss { pred, targets, rows } => {
                let pd = val(*pred);
                if let Some(gp) = grad_buf(grads, e, *pred) {
                    for (&r, &t) in rows.iter().zip(targets) {
                        let (_, dl) = kernels::iou_loss_pair([pd[2 * r], pd[2 * r + 1]], t);
                        gp[2 * r] += g[0] * dl[0];
                        gp[2 * r + 1] += g[0] * dl[1];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(tape: &mut Tape, shape: &[usize], data: &[f64], rg: bool) -> Var {
        tape.leaf(
            Tensor::new(shape.to_vec(), data.to_vec())
                .unwrap()
                .with_requires_grad(rg),
        )
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = mat(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let m = mat(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let y = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = mat(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 0.0], false);
        let q = mat(&mut tape, &[2, 2], &[5.0, 6.0, 7.0, 8.0], false);
        let y = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 6.0, 0.0, 0.0]);
        assert_eq!(tape.node_count(), 0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = mat(&mut tape, &[2, 3], &[0.0; 6], false);
        let b = mat(&mut tape, &[2, 2], &[0.0; 4], false);
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = mat(&mut tape, &[2, 2], &[0.0, 0.0, 0.0, 3f64.ln()], false);
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 0.25).abs() < 1e-15 && (d[3] - 0.75).abs() < 1e-15);

        let x = mat(&mut tape, &[1, 4], &[-1e9, 0.0, -1e9, -1e9], false);
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[1] - 1.0).abs() < 1e-6 && d[0] < 1e-6);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let w = mat(&mut tape, &[3], &[1.0, 2.0, 3.0], true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_loss_gives_zero_gradient() {
        let mut tape = Tape::new();
        let w = mat(&mut tape, &[3], &[1.0, 2.0, 3.0], true);
        let z = tape.scale(w, 0.0).unwrap();
        let c = mat(&mut tape, &[3], &[4.0, 5.0, 6.0], false);
        let s = tape.add(z, c).unwrap();
        let loss = tape.sum(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = mat(&mut tape, &[2], &[1.0, 2.0], true);
        let y = tape.scale(w, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_graph_records_nothing() {
        let mut tape = Tape::new();
        let a = mat(&mut tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let b = tape.matmul(a, a).unwrap();
        let c = tape.gelu(b).unwrap();
        let _ = tape.softmax_rows(c).unwrap();
        assert_eq!(tape.node_count(), 0);
        let w = mat(&mut tape, &[2, 2], &[1.0, 0.0, 0.0, 1.0], true);
        let _ = tape.matmul(a, w).unwrap();
        assert_eq!(tape.node_count(), 1);
    }

    #[test]
    fn param_registry_tracks_only_learnables() {
        let mut tape = Tape::new();
        let frozen = Tensor::zeros(vec![2]);
        let learn = Tensor::param(vec![2], vec![1.0, 1.0]).unwrap();
        tape.param("a", &frozen);
        tape.param("b", &learn);
        let names: Vec<&str> = tape.params().map(|(p, _)| p).collect();
        assert_eq!(names, ["b"]);
    }
}
