// Raw slice kernels shared by the tape and the gradient checks. Every
// function here is pure: it reads its inputs and writes (or accumulates into)
// an explicitly passed output buffer.

use crate::error::{Error, Result};

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// (outer, axis, inner) extents around `axis`.
fn split_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| Error::dim("concat", "no inputs"))?;
    if axis >= first.len() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for {first:?}"),
        ));
    }
    let mut out = first.to_vec();
    out[axis] = 0;
    for s in shapes {
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first.iter())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!("{s:?} incompatible with {first:?} along axis {axis}"),
            ));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

pub(crate) fn concat(datas: &[&[f64]], shapes: &[&[usize]], axis: usize) -> Vec<f64> {
    let total: usize = datas.iter().map(|d| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    let (outer, _, inner) = split_extents(shapes[0], axis);
    for o in 0..outer {
        for (d, s) in datas.iter().zip(shapes) {
            let chunk = s[axis] * inner;
            out.extend_from_slice(&d[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub(crate) fn check_narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<()> {
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::dim(
            "narrow",
            format!("cannot take [{start}, {}) along axis {axis} of {shape:?}", start + len),
        ));
    }
    Ok(())
}

pub(crate) fn narrow(data: &[f64], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (outer, extent, inner) = split_extents(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

/// Adds a narrowed gradient back into the full-size buffer.
pub(crate) fn narrow_backward(
    grad_full: &mut [f64],
    grad_part: &[f64],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) {
    let (outer, extent, inner) = split_extents(shape, axis);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        let src = &grad_part[o * len * inner..(o + 1) * len * inner];
        for (g, s) in grad_full[base..base + len * inner].iter_mut().zip(src) {
            *g += s;
        }
    }
}

/// c[m×n] += a[m×k] · b[k×n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy on a logit, stable for large |x|.
pub(crate) fn bce_with_logit(x: f64, target: f64) -> f64 {
    x.max(0.0) - x * target + (-x.abs()).exp().ln_1p()
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalizes rows of width `cols`; returns (output, xhat, rstd per row).
pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Geometry of a stride-1, same-padded convolution over up to three spatial
/// axes. Inputs are `[d, h, w, cin]` with unused axes set to extent 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub cin: usize,
    pub cout: usize,
}

impl ConvGeom {
    pub fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    #[cfg(test)]
    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (output position, tap, source position) triple with an
    /// in-bounds source.
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = self.dims;
        let [kd, kh, kw] = self.kernel;
        let (pd, ph, pw) = (kd / 2, kh / 2, kw / 2);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let pos = (z * h + y) * w + x;
                    for a in 0..kd {
                        let sz = z + a;
                        if sz < pd || sz - pd >= d {
                            continue;
                        }
                        for b in 0..kh {
                            let sy = y + b;
                            if sy < ph || sy - ph >= h {
                                continue;
                            }
                            for c in 0..kw {
                                let sx = x + c;
                                if sx < pw || sx - pw >= w {
                                    continue;
                                }
                                let src = ((sz - pd) * h + (sy - ph)) * w + (sx - pw);
                                let tap = (a * kh + b) * kw + c;
                                f(pos, tap, src);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.positions() * cout];
    for orow in out.chunks_exact_mut(cout) {
        orow.copy_from_slice(b);
    }
    g.for_each_pair(|pos, tap, src| {
        let xrow = &x[src * cin..(src + 1) * cin];
        let orow = &mut out[pos * cout..(pos + 1) * cout];
        let wtap = &w[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &xv) in xrow.iter().enumerate() {
            let wrow = &wtap[ci * cout..(ci + 1) * cout];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    });
    out
}

/// Accumulates input, weight and bias gradients of [`conv_forward`].
pub(crate) fn conv_backward(
    geom: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (cin, cout) = (geom.cin, geom.cout);
    if let Some(gb) = gb {
        for grow in gout.chunks_exact(cout) {
            for (b, g) in gb.iter_mut().zip(grow) {
                *b += g;
            }
        }
    }
    if let Some(gx) = gx {
        geom.for_each_pair(|pos, tap, src| {
            let grow = &gout[pos * cout..(pos + 1) * cout];
            let wtap = &w[tap * cin * cout..(tap + 1) * cin * cout];
            let gxrow = &mut gx[src * cin..(src + 1) * cin];
            for (ci, gv) in gxrow.iter_mut().enumerate() {
                *gv += dot(grow, &wtap[ci * cout..(ci + 1) * cout]);
            }
        });
    }
    if let Some(gw) = gw {
        geom.for_each_pair(|pos, tap, src| {
            let grow = &gout[pos * cout..(pos + 1) * cout];
            let xrow = &x[src * cin..(src + 1) * cin];
            let gwtap = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
            for (ci, &xv) in xrow.iter().enumerate() {
                for (gwv, &gv) in gwtap[ci * cout..(ci + 1) * cout].iter_mut().zip(grow) {
                    *gwv += xv * gv;
                }
            }
        });
    }
}

/// Per-channel (depthwise) same-padded 2-D convolution over `[n, h, w, c]`
/// with kernel `[kh, kw, c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DepthwiseGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl DepthwiseGeom {
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        for n in 0..self.n {
            for y in 0..self.h {
                for x in 0..self.w {
                    let pos = (n * self.h + y) * self.w + x;
                    for a in 0..self.kh {
                        let sy = y + a;
                        if sy < ph || sy - ph >= self.h {
                            continue;
                        }
                        for b in 0..self.kw {
                            let sx = x + b;
                            if sx < pw || sx - pw >= self.w {
                                continue;
                            }
                            let src = (n * self.h + sy - ph) * self.w + sx - pw;
                            f(pos, a * self.kw + b, src);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_forward(g: &DepthwiseGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let c = g.c;
    let mut out = vec![0.0; g.n * g.h * g.w * c];
    for orow in out.chunks_exact_mut(c) {
        orow.copy_from_slice(b);
    }
    g.for_each_pair(|pos, tap, src| {
        let xrow = &x[src * c..(src + 1) * c];
        let wrow = &w[tap * c..(tap + 1) * c];
        for ((o, &xv), &wv) in out[pos * c..(pos + 1) * c].iter_mut().zip(xrow).zip(wrow) {
            *o += xv * wv;
        }
    });
    out
}

pub(crate) fn depthwise_backward(
    g: &DepthwiseGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let c = g.c;
    if let Some(gb) = gb {
        for grow in gout.chunks_exact(c) {
            for (b, gv) in gb.iter_mut().zip(grow) {
                *b += gv;
            }
        }
    }
    g.for_each_pair(|pos, tap, src| {
        let grow = &gout[pos * c..(pos + 1) * c];
        if let Some(gx) = gx.as_deref_mut() {
            let wrow = &w[tap * c..(tap + 1) * c];
            for ((o, &gv), &wv) in gx[src * c..(src + 1) * c].iter_mut().zip(grow).zip(wrow) {
                *o += gv * wv;
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xrow = &x[src * c..(src + 1) * c];
            for ((o, &gv), &xv) in gw[tap * c..(tap + 1) * c].iter_mut().zip(grow).zip(xrow) {
                *o += gv * xv;
            }
        }
    });
}

/// Non-overlapping average pooling of `[d, h, w, c]` by `window`.
pub(crate) fn avg_pool(x: &[f64], dims: [usize; 4], window: [usize; 3]) -> Vec<f64> {
    let [d, h, w, c] = dims;
    let [od, oh, ow] = [d / window[0], h / window[1], w / window[2]];
    let scale = 1.0 / window.iter().product::<usize>() as f64;
    let mut out = vec![0.0; od * oh * ow * c];
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let src = ((z * h + y) * w + xx) * c;
                let dst = (((z / window[0]) * oh + y / window[1]) * ow + xx / window[2]) * c;
                for ch in 0..c {
                    out[dst + ch] += x[src + ch];
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v *= scale;
    }
    out
}

pub(crate) fn avg_pool_backward(gx: &mut [f64], gout: &[f64], dims: [usize; 4], window: [usize; 3]) {
    let [d, h, w, c] = dims;
    let [oh, ow] = [h / window[1], w / window[2]];
    let scale = 1.0 / window.iter().product::<usize>() as f64;
    for z in 0..d {
        for y in 0..h {
            for xx in 0..w {
                let src = ((z * h + y) * w + xx) * c;
                let dst = (((z / window[0]) * oh + y / window[1]) * ow + xx / window[2]) * c;
                for ch in 0..c {
                    gx[src + ch] += gout[dst + ch] * scale;
                }
            }
        }
    }
}

/// Maps every flat input index to its flat output index after removing `axes`.
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    // output stride per input axis, zero on reduced axes
    let mut step = vec![0; shape.len()];
    let mut k = 0;
    for (axis, st) in step.iter_mut().enumerate() {
        if !axes.contains(&axis) {
            *st = out_strides[k];
            k += 1;
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0; shape.len()];
    let mut o = 0;
    for _ in 0..numel {
        map.push(o);
        for axis in (0..shape.len()).rev() {
            idx[axis] += 1;
            o += step[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            o -= step[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (out_shape, map)
}

/// 1-D IoU loss `1 − IoU` for one (start, end) distance pair.
/// Returns the loss and its partials with respect to the predicted distances.
pub(crate) fn iou_loss_pair(pred: [f64; 2], target: [f64; 2]) -> (f64, [f64; 2]) {
    let inter = pred[0].min(target[0]) + pred[1].min(target[1]);
    let union = pred[0] + pred[1] + target[0] + target[1] - inter;
    let iou = inter / union;
    let mut grad = [0.0; 2];
    for k in 0..2 {
        let di = if pred[k] < target[k] { 1.0 } else { 0.0 };
        let du = 1.0 - di;
        grad[k] = -(di * union - inter * du) / (union * union);
    }
    (1.0 - iou, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_map_drops_axes() {
        let (shape, map) = reduction_map(&[2, 3, 4], &[1]);
        assert_eq!(shape, vec![2, 4]);
        // element (1, 2, 3) -> (1, 3)
        assert_eq!(map[12 + 2 * 4 + 3], 4 + 3);
        let (shape, _) = reduction_map(&[2, 3], &[0, 1]);
        assert_eq!(shape, vec![1]);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let g = ConvGeom {
            dims: [2, 3, 3],
            kernel: [3, 3, 3],
            cin: 2,
            cout: 2,
        };
        let x: Vec<f64> = (0..g.positions() * 2).map(|i| i as f64 * 0.1).collect();
        let mut w = vec![0.0; g.taps() * 4];
        let centre = 13;
        w[centre * 4] = 1.0;
        w[centre * 4 + 3] = 1.0;
        let y = conv_forward(&g, &x, &w, &[0.0, 0.0]);
        assert_eq!(x, y);
    }

    #[test]
    fn iou_loss_at_target_is_zero() {
        let (l, _) = iou_loss_pair([2.0, 3.0], [2.0, 3.0]);
        assert_eq!(l, 0.0);
        let (l, _) = iou_loss_pair([1.0, 1.0], [2.0, 2.0]);
        assert!((l - 0.5).abs() < 1e-15);
    }
}
