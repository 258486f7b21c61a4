use super::graph::{BackwardContext, BackwardRule, Graph, NodeId};
use super::{nchw, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("left {:?} vs right {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

struct AddRule;

impl BackwardRule for AddRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        for i in 0..2 {
            if let Some(d) = ctx.grad_input(i) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}

struct MulRule;

impl BackwardRule for MulRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        if let Some(da) = ctx.grad_input(0) {
            for ((d, g), b) in da.iter_mut().zip(g).zip(b) {
                *d += g * b;
            }
        }
        if let Some(db) = ctx.grad_input(1) {
            for ((d, g), a) in db.iter_mut().zip(g).zip(a) {
                *d += g * a;
            }
        }
    }
}

struct ScalarAffineRule {
    alpha: f64,
}

impl BackwardRule for ScalarAffineRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        let alpha = self.alpha;
        if let Some(d) = ctx.grad_input(0) {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += alpha * g);
        }
    }
}

struct BiasRule {
    channels: usize,
    inner: usize,
}

impl BackwardRule for BiasRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        if let Some(dx) = ctx.grad_input(0) {
            dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
        }
        if let Some(db) = ctx.grad_input(1) {
            for (i, gv) in g.iter().enumerate() {
                db[(i / self.inner) % self.channels] += gv;
            }
        }
    }
}

struct MatMulRule {
    m: usize,
    k: usize,
    n: usize,
}

impl BackwardRule for MatMulRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let g = ctx.grad_output();
        let (a, b) = (ctx.input(0).data(), ctx.input(1).data());
        if let Some(da) = ctx.grad_input(0) {
            // dA = G · Bᵀ
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * b[p * n + j];
                    }
                    da[i * k + p] += acc;
                }
            }
        }
        if let Some(db) = ctx.grad_input(1) {
            // dB = Aᵀ · G
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let row = &mut db[p * n..(p + 1) * n];
                    for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *d += av * gv;
                    }
                }
            }
        }
    }
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    /// Output columns `ow` whose input column `ow*stride + kx - pad` is in range.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(self.stride)
        };
        let mut hi = self.ow;
        while hi > lo && (hi - 1) * self.stride + kx < self.pad {
            hi -= 1;
        }
        while hi > lo && (hi - 1) * self.stride + kx - self.pad >= self.w {
            hi -= 1;
        }
        (lo, hi)
    }

    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = oy * self.stride + ky;
        (y >= self.pad && y - self.pad < self.h).then(|| y - self.pad)
    }
}

struct Conv2dRule {
    geo: ConvGeometry,
}

impl BackwardRule for Conv2dRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let geo = self.geo;
        let g = ctx.grad_output();
        let (x, k) = (ctx.input(0).data(), ctx.input(1).data());
        let in_plane = geo.h * geo.w;
        let out_plane = geo.oh * geo.ow;
        let ksize = geo.kh * geo.kw;
        let col_ranges: Vec<_> = (0..geo.kw).map(|kx| geo.col_range(kx)).collect();
        if let Some(dx) = ctx.grad_input(0) {
            for n in 0..geo.n {
                for o in 0..geo.o {
                    let gout = &g[(n * geo.o + o) * out_plane..][..out_plane];
                    for c in 0..geo.c {
                        let dxp = &mut dx[(n * geo.c + c) * in_plane..][..in_plane];
                        let kern = &k[(o * geo.c + c) * ksize..][..ksize];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let kv = kern[ky * geo.kw + kx];
                                let (lo, hi) = col_ranges[kx];
                                for oy in 0..geo.oh {
                                    let Some(iy) = geo.input_row(oy, ky) else { continue };
                                    for ox in lo..hi {
                                        let ix = ox * geo.stride + kx - geo.pad;
                                        dxp[iy * geo.w + ix] += kv * gout[oy * geo.ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(dk) = ctx.grad_input(1) {
            for n in 0..geo.n {
                for o in 0..geo.o {
                    let gout = &g[(n * geo.o + o) * out_plane..][..out_plane];
                    for c in 0..geo.c {
                        let xp = &x[(n * geo.c + c) * in_plane..][..in_plane];
                        let dkern = &mut dk[(o * geo.c + c) * ksize..][..ksize];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let (lo, hi) = col_ranges[kx];
                                let mut acc = 0.0;
                                for oy in 0..geo.oh {
                                    let Some(iy) = geo.input_row(oy, ky) else { continue };
                                    for ox in lo..hi {
                                        let ix = ox * geo.stride + kx - geo.pad;
                                        acc += xp[iy * geo.w + ix] * gout[oy * geo.ow + ox];
                                    }
                                }
                                dkern[ky * geo.kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct PassThroughRule;

impl BackwardRule for PassThroughRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        if let Some(d) = ctx.grad_input(0) {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
        }
    }
}

struct BroadcastScalarRule {
    scale: f64,
}

impl BackwardRule for BroadcastScalarRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output()[0] * self.scale;
        if let Some(d) = ctx.grad_input(0) {
            d.iter_mut().for_each(|d| *d += g);
        }
    }
}

struct AvgPoolRule {
    plane: usize,
}

impl BackwardRule for AvgPoolRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output();
        let plane = self.plane;
        let inv = 1.0 / plane as f64;
        if let Some(d) = ctx.grad_input(0) {
            for (i, d) in d.iter_mut().enumerate() {
                *d += g[i / plane] * inv;
            }
        }
    }
}

/// Mean cross-entropy of softmax(logits); caches the probabilities.
struct CrossEntropyRule {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl BackwardRule for CrossEntropyRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let g = ctx.grad_output()[0];
        let scale = g / self.labels.len() as f64;
        if let Some(d) = ctx.grad_input(0) {
            for (row, &label) in self.labels.iter().enumerate() {
                for j in 0..self.classes {
                    let p = self.probs[row * self.classes + j];
                    let y = if j == label { 1.0 } else { 0.0 };
                    d[row * self.classes + j] += scale * (p - y);
                }
            }
        }
    }
}

/// Mean of `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`.
struct KdRule {
    student_probs: Vec<f64>,
    teacher_probs: Vec<f64>,
    rows: usize,
    temperature: f64,
}

impl BackwardRule for KdRule {
    fn backward(&self, ctx: &mut BackwardContext<'_>) {
        let scale = ctx.grad_output()[0] * self.temperature / self.rows as f64;
        if let Some(d) = ctx.grad_input(0) {
            for ((d, q), p) in d.iter_mut().zip(&self.student_probs).zip(&self.teacher_probs) {
                *d += scale * (q - p);
            }
        }
    }
}

/// Row-wise softmax of `logits / temperature` with the max-shift trick.
pub(crate) fn softmax_rows(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (src, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / temperature).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

/// Row-wise `log softmax(z / T)`, finite wherever the logits are.
pub(crate) fn log_softmax_rows(logits: &[f64], classes: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for src in logits.chunks(classes) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = src.iter().map(|&s| ((s - max) / temperature).exp()).sum::<f64>().ln();
        out.extend(src.iter().map(|&s| (s - max) / temperature - lse));
    }
    out
}

fn logits_shape(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [rows, classes] if rows > 0 && classes > 0 => Ok((rows, classes)),
        _ => Err(Error::shape(op, format!("expected [rows, classes], got {:?}", t.shape()))),
    }
}

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, vec![a, b], AddRule))
    }

    /// Componentwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape("elementwise-mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.record(out, vec![a, b], MulRule))
    }

    /// `alpha * x + beta` with constant scalars.
    pub fn scalar_affine(&mut self, x: NodeId, alpha: f64, beta: f64) -> NodeId {
        let out = self.value(x).map(|v| alpha * v + beta);
        self.record(out, vec![x], ScalarAffineRule { alpha })
    }

    /// Adds `bias[c]` along axis 1 of an `[N, C, ...]` tensor.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let shape = vx.shape();
        if shape.len() < 2 || vb.shape() != [shape[1]] {
            return Err(Error::shape(
                "bias-add",
                format!("input {:?} with bias {:?}", shape, vb.shape()),
            ));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = vb.data();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / inner) % channels])
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.record(out, vec![x, bias], BiasRule { channels, inner }))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let (ad, bd) = (va.data(), vb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new([m, n], out)?;
        Ok(self.record(out, vec![a, b], MatMulRule { m, k, n }))
    }

    /// `[N, C, H, W] ⊛ [O, C, KH, KW] → [N, O, OH, OW]` (cross-correlation).
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, cfg: Conv2dConfig) -> Result<NodeId> {
        let (vx, vk) = (self.value(x), self.value(kernel));
        let (n, c, h, w, o, kh, kw) = match (vx.shape(), vk.shape()) {
            (&[n, c, h, w], &[o, c2, kh, kw]) if c == c2 => (n, c, h, w, o, kh, kw),
            (sx, sk) => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {sx:?} incompatible with kernel {sk:?}"),
                ))
            }
        };
        if cfg.stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * cfg.padding < kh || w + 2 * cfg.padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            ));
        }
        let oh = (h + 2 * cfg.padding - kh) / cfg.stride + 1;
        let ow = (w + 2 * cfg.padding - kw) / cfg.stride + 1;
        let geo = ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            oh,
            ow,
            stride: cfg.stride,
            pad: cfg.padding,
        };
        let (xd, kd) = (vx.data(), vk.data());
        let in_plane = h * w;
        let out_plane = oh * ow;
        let ksize = kh * kw;
        let col_ranges: Vec<_> = (0..kw).map(|kx| geo.col_range(kx)).collect();
        let mut out = vec![0.0; n * o * out_plane];
        for ni in 0..n {
            for oi in 0..o {
                let dst = &mut out[(ni * o + oi) * out_plane..][..out_plane];
                for ci in 0..c {
                    let src = &xd[(ni * c + ci) * in_plane..][..in_plane];
                    let kern = &kd[(oi * c + ci) * ksize..][..ksize];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kv = kern[ky * kw + kx];
                            let (lo, hi) = col_ranges[kx];
                            for oy in 0..oh {
                                let Some(iy) = geo.input_row(oy, ky) else { continue };
                                let srow = &src[iy * w..(iy + 1) * w];
                                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                                for ox in lo..hi {
                                    drow[ox] += kv * srow[ox * cfg.stride + kx - cfg.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new([n, o, oh, ow], out)?;
        Ok(self.record(out, vec![x, kernel], Conv2dRule { geo }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.record(out, vec![x], PassThroughRule))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = v.numel().max(1) as f64;
        let out = Tensor::scalar(v.data().iter().sum::<f64>() / n);
        self.record(out, vec![x], BroadcastScalarRule { scale: 1.0 / n })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.record(out, vec![x], BroadcastScalarRule { scale: 1.0 })
    }

    /// `[N, C, H, W] → [N, C]` spatial average; 2-D inputs pass through.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let [n, c, h, w] = nchw(v.shape()).ok_or_else(|| {
            Error::shape("global-avg-pool", format!("expected [N,C,H,W], got {:?}", v.shape()))
        })?;
        let plane = h * w;
        let data = v
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let out = Tensor::new([n, c], data)?;
        Ok(self.record(out, vec![x], AvgPoolRule { plane }))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (rows, classes) = logits_shape("cross-entropy", v)?;
        if labels.len() != rows {
            return Err(Error::shape(
                "cross-entropy",
                format!("{rows} logit rows but {} labels", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(
                "cross-entropy",
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        let probs = softmax_rows(v.data(), classes, 1.0);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(row, &l)| {
                let logit_row = &v.data()[row * classes..(row + 1) * classes];
                let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logit_row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                lse - logit_row[l]
            })
            .sum::<f64>()
            / rows as f64;
        let rule = CrossEntropyRule {
            probs,
            labels: labels.to_vec(),
            classes,
        };
        Ok(self.record(Tensor::scalar(loss), vec![logits], rule))
    }

    /// Distillation divergence `T² · KL(softmax(teacher/T) ‖ softmax(student/T))`,
    /// averaged over rows. The teacher is a constant.
    pub fn kd_divergence(
        &mut self,
        student: NodeId,
        teacher: &Tensor,
        temperature: f64,
    ) -> Result<NodeId> {
        if !(temperature > 0.0) {
            return Err(Error::config(format!(
                "distillation temperature must be positive, got {temperature}"
            )));
        }
        let v = self.value(student);
        let (rows, classes) = logits_shape("kd-loss", v)?;
        same_shape("kd-loss", v, teacher)?;
        let q = softmax_rows(v.data(), classes, temperature);
        let p = softmax_rows(teacher.data(), classes, temperature);
        let log_q = log_softmax_rows(v.data(), classes, temperature);
        let log_p = log_softmax_rows(teacher.data(), classes, temperature);
        let kl: f64 = p
            .iter()
            .zip(log_p.iter().zip(&log_q))
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, (lp, lq))| pi * (lp - lq))
            .sum();
        let value = temperature * temperature * kl / rows as f64;
        let rule = KdRule {
            student_probs: q,
            teacher_probs: p,
            rows,
            temperature,
        };
        Ok(self.record(Tensor::scalar(value), vec![student], rule))
    }
}
