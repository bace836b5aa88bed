//! Minimal reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] is a write-once list of nodes in topological order; every op
//! appends a node holding its output value. [`Tape::backward`] walks the
//! list in reverse and accumulates gradients for every node, which callers
//! read back through the [`Var`] handles.
//!
//! Layout conventions: feature maps are `(C, H, W)`, dense activations are
//! flat `(n,)`, losses are 0-dim scalars. Convolutions run as im2col +
//! matrix multiply; the im2col buffers are recomputed during the backward
//! pass rather than cached, trading a little compute for a much smaller
//! peak footprint.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayView3, ArrayView4, Axis, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, f64),
    AddScaled(usize, usize, f64),
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    ConcatChannels(usize, usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Reshape(usize),
    Warp {
        image: usize,
        field: usize,
    },
    MeanSquaredDiff(usize, usize),
    SmoothnessPenalty(usize),
    NccLoss {
        a: usize,
        b: usize,
        window: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if any path connected it to the root.
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when disconnected.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-dim node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(value, Op::Add(a.0, b.0))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| v * s);
        self.push(value, Op::Scale(x.0, s))
    }

    /// `a + s * b`, elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, s: f64) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value.mapv(|v| v * s);
        self.push(value, Op::AddScaled(a.0, b.0, s))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.nodes[x.0].value.mapv(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x: x.0, slope })
    }

    /// 2D convolution: `x (C_in, H, W)`, `w (C_out, C_in, k, k)`, `b (C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        let value = conv2d_forward(&xv, &wv, bv.as_slice().unwrap(), stride, pad);
        self.push(value, Op::Conv2d { x: x.0, w: w.0, b: b.0, stride, pad })
    }

    /// Transposed 2D convolution: `x (C_in, H, W)`, `w (C_in, C_out, k, k)`,
    /// `b (C_out)`. Output is `(H-1)*stride - 2*pad + k + out_pad` per axis.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        let value = convt2d_forward(&xv, &wv, bv.as_slice().unwrap(), stride, pad, out_pad);
        self.push(
            value,
            Op::ConvTranspose2d { x: x.0, w: w.0, b: b.0, stride, pad, out_pad },
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (c, h, w) = xv.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let xs = xv.to_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, h / 2, w / 2]));
        let os = out.as_slice_mut().unwrap();
        let (ho, wo) = (h / 2, w / 2);
        for ci in 0..c {
            for r in 0..ho {
                let top = &xs[ci * h * w + 2 * r * w..][..w];
                let bot = &xs[ci * h * w + (2 * r + 1) * w..][..w];
                let dst = &mut os[ci * ho * wo + r * wo..][..wo];
                for (col, d) in dst.iter_mut().enumerate() {
                    *d = (top[2 * col] + top[2 * col + 1] + bot[2 * col] + bot[2 * col + 1])
                        * 0.25;
                }
            }
        }
        self.push(out, Op::AvgPool2(x.0))
    }

    /// 2x nearest-neighbor upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as3(&self.nodes[x.0].value);
        let (c, h, w) = xv.dim();
        let xs = xv.to_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        let os = out.as_slice_mut().unwrap();
        let (ho, wo) = (2 * h, 2 * w);
        for ci in 0..c {
            for r in 0..ho {
                let src = &xs[ci * h * w + (r / 2) * w..][..w];
                let dst = &mut os[ci * ho * wo + r * wo..][..wo];
                for (col, d) in dst.iter_mut().enumerate() {
                    *d = src[col / 2];
                }
            }
        }
        self.push(out, Op::UpsampleNearest2(x.0))
    }

    /// Channel-wise concatenation of two `(C, H, W)` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as3(&self.nodes[a.0].value);
        let bv = as3(&self.nodes[b.0].value);
        let (ca, h, w) = av.dim();
        let (cb, hb, wb) = bv.dim();
        assert_eq!((h, w), (hb, wb), "concat spatial dims must match");
        let mut out = ArrayD::zeros(IxDyn(&[ca + cb, h, w]));
        let os = out.as_slice_mut().unwrap();
        os[..ca * h * w].copy_from_slice(av.to_slice().unwrap());
        os[ca * h * w..].copy_from_slice(bv.to_slice().unwrap());
        self.push(out, Op::ConcatChannels(a.0, b.0))
    }

    /// Fully connected layer: `x (n)`, `w (m, n)`, `b (m)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = as2(&self.nodes[w.0].value);
        let bv = &self.nodes[b.0].value;
        let x1 = Array1::from_iter(xv.iter().copied());
        let mut y = wv.dot(&x1);
        y += &Array1::from_iter(bv.iter().copied());
        self.push(y.into_dyn(), Op::Dense { x: x.0, w: w.0, b: b.0 })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(value, Op::Reshape(x.0))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        self.reshape(x, &[n])
    }

    /// Backward warp: `image (H, W)`, `field (2, H, W)` in (row, col) order;
    /// output `(H, W)` samples the image at `x + field(x)` with bilinear
    /// interpolation and border clamping.
    pub fn warp(&mut self, image: Var, field: Var) -> Var {
        let img = as2(&self.nodes[image.0].value);
        let f = as3(&self.nodes[field.0].value);
        let (h, w) = img.dim();
        assert_eq!(f.dim(), (2, h, w), "warp field/image shape mismatch");
        let fs = f.to_slice().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[h, w]));
        let os = out.as_slice_mut().unwrap();
        for r in 0..h {
            for c in 0..w {
                let pr = r as f64 + fs[r * w + c];
                let pc = c as f64 + fs[h * w + r * w + c];
                os[r * w + c] = sample_bilinear(&img, pr, pc);
            }
        }
        self.push(out, Op::Warp { image: image.0, field: field.0 })
    }

    /// Mean over all elements of the squared difference (scalar output).
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape());
        let n = av.len() as f64;
        let mse = av
            .iter()
            .zip(bv.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(scalar_value(mse), Op::MeanSquaredDiff(a.0, b.0))
    }

    /// Mean over pixels of the squared Frobenius norm of the forward
    /// finite-difference Jacobian of a `(2, H, W)` field.
    pub fn smoothness(&mut self, field: Var) -> Var {
        let f = as3(&self.nodes[field.0].value);
        let (_, h, w) = f.dim();
        let mut total = 0.0;
        for comp in 0..2 {
            for r in 0..h {
                for c in 0..w {
                    if r + 1 < h {
                        let d = f[[comp, r + 1, c]] - f[[comp, r, c]];
                        total += d * d;
                    }
                    if c + 1 < w {
                        let d = f[[comp, r, c + 1]] - f[[comp, r, c]];
                        total += d * d;
                    }
                }
            }
        }
        let value = total / (h * w) as f64;
        self.push(scalar_value(value), Op::SmoothnessPenalty(field.0))
    }

    /// Local windowed normalized cross-correlation loss between two `(H, W)`
    /// images: `1 - mean(cc)` where `cc` is the squared windowed correlation
    /// with epsilon-stabilized variances.
    pub fn ncc_loss(&mut self, a: Var, b: Var, window: usize) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.dim(), bv.dim());
        assert!(window % 2 == 1 && window >= 3, "window must be odd and >= 3");
        let (loss, _) = ncc_forward(&av, &bv, window);
        self.push(scalar_value(loss), Op::NccLoss { a: a.0, b: b.0, window })
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.mapv(|v| v * s));
                }
                Op::AddScaled(a, b, s) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|v| v * s));
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    dx.zip_mut_with(xv, |gv, &v| {
                        if v < 0.0 {
                            *gv *= slope;
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let xv = as3(&self.nodes[*x].value);
                    let wv = as4(&self.nodes[*w].value);
                    let gv = as3(&g);
                    let (dx, dw, db) = conv2d_backward(&xv, &wv, &gv, *stride, *pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::ConvTranspose2d { x, w, b, stride, pad, out_pad } => {
                    let xv = as3(&self.nodes[*x].value);
                    let wv = as4(&self.nodes[*w].value);
                    let gv = as3(&g);
                    let (dx, dw, db) = convt2d_backward(&xv, &wv, &gv, *stride, *pad, *out_pad);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::AvgPool2(x) => {
                    let gv = as3(&g);
                    let (c, ho, wo) = gv.dim();
                    let gs = gv.to_slice().unwrap();
                    let (h, w) = (ho * 2, wo * 2);
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    let ds = dx.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for r in 0..ho {
                            let src = &gs[ci * ho * wo + r * wo..][..wo];
                            let top_base = ci * h * w + 2 * r * w;
                            let bot_base = ci * h * w + (2 * r + 1) * w;
                            for (col, gval) in src.iter().enumerate() {
                                let v = gval * 0.25;
                                ds[top_base + 2 * col] = v;
                                ds[top_base + 2 * col + 1] = v;
                                ds[bot_base + 2 * col] = v;
                                ds[bot_base + 2 * col + 1] = v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::UpsampleNearest2(x) => {
                    let gv = as3(&g);
                    let (c, ho, wo) = gv.dim();
                    let gs = gv.to_slice().unwrap();
                    let (h, w) = (ho / 2, wo / 2);
                    let mut dx = ArrayD::zeros(IxDyn(&[c, h, w]));
                    let ds = dx.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for r in 0..ho {
                            let src = &gs[ci * ho * wo + r * wo..][..wo];
                            let dst = &mut ds[ci * h * w + (r / 2) * w..][..w];
                            for (col, gval) in src.iter().enumerate() {
                                dst[col / 2] += gval;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatChannels(a, b) => {
                    let gv = as3(&g);
                    let ca = self.nodes[*a].value.shape()[0];
                    let (ctot, h, w) = gv.dim();
                    let gs = gv.to_slice().unwrap();
                    let mut da = ArrayD::zeros(IxDyn(&[ca, h, w]));
                    let mut db = ArrayD::zeros(IxDyn(&[ctot - ca, h, w]));
                    da.as_slice_mut().unwrap().copy_from_slice(&gs[..ca * h * w]);
                    db.as_slice_mut().unwrap().copy_from_slice(&gs[ca * h * w..]);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Dense { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = as2(&self.nodes[*w].value);
                    let g1 = Array1::from_iter(g.iter().copied());
                    let x1 = Array1::from_iter(xv.iter().copied());
                    let dx = wv.t().dot(&g1);
                    let (m, n) = wv.dim();
                    let mut dw = Array2::zeros((m, n));
                    for i in 0..m {
                        for j in 0..n {
                            dw[[i, j]] = g1[i] * x1[j];
                        }
                    }
                    accumulate(&mut grads, *x, dx.into_dyn());
                    accumulate(&mut grads, *w, dw.into_dyn());
                    accumulate(&mut grads, *b, g);
                }
                Op::Reshape(x) => {
                    let shape = self.nodes[*x].value.raw_dim();
                    accumulate(
                        &mut grads,
                        *x,
                        g.into_shape_with_order(shape).expect("reshape backward"),
                    );
                }
                Op::Warp { image, field } => {
                    let img = as2(&self.nodes[*image].value);
                    let f = as3(&self.nodes[*field].value);
                    let gv = as2(&g);
                    let (dimg, df) = warp_backward(&img, &f, &gv);
                    accumulate(&mut grads, *image, dimg);
                    accumulate(&mut grads, *field, df);
                }
                Op::MeanSquaredDiff(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let scale = 2.0 * g.iter().next().unwrap() / av.len() as f64;
                    let diff = av - bv;
                    accumulate(&mut grads, *a, diff.mapv(|v| v * scale));
                    accumulate(&mut grads, *b, diff.mapv(|v| -v * scale));
                }
                Op::SmoothnessPenalty(x) => {
                    let f = as3(&self.nodes[*x].value);
                    let (_, h, w) = f.dim();
                    let scale = 2.0 * g.iter().next().unwrap() / (h * w) as f64;
                    let mut df = ArrayD::zeros(IxDyn(&[2, h, w]));
                    for comp in 0..2 {
                        for r in 0..h {
                            for c in 0..w {
                                if r + 1 < h {
                                    let d = (f[[comp, r + 1, c]] - f[[comp, r, c]]) * scale;
                                    df[[comp, r + 1, c]] += d;
                                    df[[comp, r, c]] -= d;
                                }
                                if c + 1 < w {
                                    let d = (f[[comp, r, c + 1]] - f[[comp, r, c]]) * scale;
                                    df[[comp, r, c + 1]] += d;
                                    df[[comp, r, c]] -= d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, df);
                }
                Op::NccLoss { a, b, window } => {
                    let av = as2(&self.nodes[*a].value);
                    let bv = as2(&self.nodes[*b].value);
                    let gs = *g.iter().next().unwrap();
                    let (da, db) = ncc_backward(&av, &bv, *window, gs);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
        }
        Gradients { grads }
    }
}

fn scalar_value(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], idx: usize, delta: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn as2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected 2-dim value")
}

fn as3(v: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    v.view().into_dimensionality().expect("expected 3-dim value")
}

fn as4(v: &ArrayD<f64>) -> ArrayView4<'_, f64> {
    v.view().into_dimensionality().expect("expected 4-dim value")
}

/// Valid output-position range `[lo, hi)` such that
/// `pos * stride + koff - pad` stays inside `[0, extent)`.
fn valid_positions(extent: usize, n_pos: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > koff {
        (pad - koff).div_ceil(stride)
    } else {
        0
    };
    // largest pos with pos*stride + koff - pad <= extent-1
    let hi = if extent + pad > koff {
        ((extent + pad - koff - 1) / stride + 1).min(n_pos)
    } else {
        0
    };
    (lo.min(n_pos), hi)
}

/// Gathers sliding windows into a `(C*k*k, nh*nw)` matrix. Position `(oi, oj)`
/// reads input pixel `(oi*stride + ki - pad, oj*stride + kj - pad)`; out of
/// range reads are zero. Inner loops run over raw slices.
fn im2col(
    x: &ArrayView3<'_, f64>,
    k: usize,
    stride: usize,
    pad: usize,
    nh: usize,
    nw: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let xs = x.to_slice().expect("im2col input must be contiguous");
    let mut cols = Array2::zeros((c * k * k, nh * nw));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            let (oi_lo, oi_hi) = valid_positions(h, nh, ki, stride, pad);
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * (nh * nw);
                let (oj_lo, oj_hi) = valid_positions(w, nw, kj, stride, pad);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in oi_lo..oi_hi {
                    let ii = oi * stride + ki - pad;
                    let x_row = &xs[ci * h * w + ii * w..ci * h * w + ii * w + w];
                    let dst = &mut cs[row_base + oi * nw + oj_lo..row_base + oi * nw + oj_hi];
                    let jj0 = oj_lo * stride + kj - pad;
                    if stride == 1 {
                        dst.copy_from_slice(&x_row[jj0..jj0 + (oj_hi - oj_lo)]);
                    } else {
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = x_row[jj0 + t * stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a `(C*k*k, nh*nw)` matrix into a
/// `(C, h, w)` array.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    nh: usize,
    nw: usize,
) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    let os = out.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        for ki in 0..k {
            let (oi_lo, oi_hi) = valid_positions(h, nh, ki, stride, pad);
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * (nh * nw);
                let (oj_lo, oj_hi) = valid_positions(w, nw, kj, stride, pad);
                if oj_lo >= oj_hi {
                    continue;
                }
                for oi in oi_lo..oi_hi {
                    let ii = oi * stride + ki - pad;
                    let dst_base = ci * h * w + ii * w;
                    let src = &cs[row_base + oi * nw + oj_lo..row_base + oi * nw + oj_hi];
                    let jj0 = oj_lo * stride + kj - pad;
                    if stride == 1 {
                        let dst = &mut os[dst_base + jj0..dst_base + jj0 + src.len()];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for (t, s) in src.iter().enumerate() {
                            os[dst_base + jj0 + t * stride] += *s;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn conv2d_forward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (c_in, h, wid) = x.dim();
    let (c_out, c_in2, k, k2) = w.dim();
    assert_eq!(c_in, c_in2, "conv channel mismatch");
    assert_eq!(k, k2);
    let nh = conv_out_size(h, k, stride, pad);
    let nw = conv_out_size(wid, k, stride, pad);
    let cols = im2col(x, k, stride, pad, nh, nw);
    let w_mat = w
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("conv weight reshape");
    let mut y = w_mat.dot(&cols);
    for (mut row, bias) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
        row += *bias;
    }
    y.into_shape_with_order(IxDyn(&[c_out, nh, nw]))
        .expect("conv output reshape")
}

fn conv2d_backward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    g: &ArrayView3<'_, f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (c_in, h, wid) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let (_, nh, nw) = g.dim();
    let cols = im2col(x, k, stride, pad, nh, nw);
    let g_mat = g
        .into_shape_with_order((c_out, nh * nw))
        .expect("conv grad reshape");
    let w_mat = w
        .into_shape_with_order((c_out, c_in * k * k))
        .expect("conv weight reshape");

    let dw = g_mat
        .dot(&cols.t())
        .into_shape_with_order(IxDyn(&[c_out, c_in, k, k]))
        .expect("dw reshape");
    let db = g_mat.sum_axis(Axis(1)).into_dyn();
    let dcols = w_mat.t().dot(&g_mat);
    let dx = col2im(&dcols, c_in, h, wid, k, stride, pad, nh, nw);
    (dx, dw, db)
}

fn convt2d_forward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> ArrayD<f64> {
    let (c_in, h, wid) = x.dim();
    let (c_in2, c_out, k, _) = w.dim();
    assert_eq!(c_in, c_in2, "conv_transpose channel mismatch");
    let ho = (h - 1) * stride + k + out_pad - 2 * pad;
    let wo = (wid - 1) * stride + k + out_pad - 2 * pad;
    let x_mat = x
        .into_shape_with_order((c_in, h * wid))
        .expect("convt input reshape");
    let w_mat = w
        .into_shape_with_order((c_in, c_out * k * k))
        .expect("convt weight reshape");
    let cols = w_mat.t().dot(&x_mat);
    let mut y = col2im(&cols, c_out, ho, wo, k, stride, pad, h, wid);
    let mut y3 = y.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
    for (mut plane, bias) in y3.axis_iter_mut(Axis(0)).zip(b.iter()) {
        plane += *bias;
    }
    y
}

fn convt2d_backward(
    x: &ArrayView3<'_, f64>,
    w: &ArrayView4<'_, f64>,
    g: &ArrayView3<'_, f64>,
    stride: usize,
    pad: usize,
    _out_pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
    let (c_in, h, wid) = x.dim();
    let (_, c_out, k, _) = w.dim();
    let x_mat = x
        .into_shape_with_order((c_in, h * wid))
        .expect("convt input reshape");
    let w_mat = w
        .into_shape_with_order((c_in, c_out * k * k))
        .expect("convt weight reshape");

    // dcols gathers from the output gradient at the scattered positions
    let dcols = im2col(g, k, stride, pad, h, wid);
    let dx = w_mat
        .dot(&dcols)
        .into_shape_with_order(IxDyn(&[c_in, h, wid]))
        .expect("dx reshape");
    let dw = x_mat
        .dot(&dcols.t())
        .into_shape_with_order(IxDyn(&[c_in, c_out, k, k]))
        .expect("dw reshape");
    let mut db = ArrayD::zeros(IxDyn(&[c_out]));
    for co in 0..c_out {
        let mut s = 0.0;
        for r in 0..g.dim().1 {
            for c in 0..g.dim().2 {
                s += g[[co, r, c]];
            }
        }
        db[[co]] = s;
    }
    (dx, dw, db)
}

/// Bilinear sample with border clamping (same convention as
/// `field::bilinear_sample`).
#[inline]
fn sample_bilinear(img: &ArrayView2<'_, f64>, row: f64, col: f64) -> f64 {
    let (h, w) = img.dim();
    let is = img.to_slice().expect("contiguous image");
    let r = row.clamp(0.0, (h - 1) as f64);
    let c = col.clamp(0.0, (w - 1) as f64);
    let r0 = (r.floor() as usize).min(h - 2);
    let c0 = (c.floor() as usize).min(w - 2);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let base = r0 * w + c0;
    is[base] * (1.0 - fr) * (1.0 - fc)
        + is[base + 1] * (1.0 - fr) * fc
        + is[base + w] * fr * (1.0 - fc)
        + is[base + w + 1] * fr * fc
}

fn warp_backward(
    img: &ArrayView2<'_, f64>,
    field: &ArrayView3<'_, f64>,
    g: &ArrayView2<'_, f64>,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let (h, w) = img.dim();
    let hf = (h - 1) as f64;
    let wf = (w - 1) as f64;
    let is = img.to_slice().unwrap();
    let fs = field.to_slice().unwrap();
    let gs = g.to_slice().unwrap();
    let mut dimg = ArrayD::zeros(IxDyn(&[h, w]));
    let mut df = ArrayD::zeros(IxDyn(&[2, h, w]));
    let dis = dimg.as_slice_mut().unwrap();
    let dfs = df.as_slice_mut().unwrap();
    for r in 0..h {
        for c in 0..w {
            let gv = gs[r * w + c];
            if gv == 0.0 {
                continue;
            }
            let pr = r as f64 + fs[r * w + c];
            let pc = c as f64 + fs[h * w + r * w + c];
            let rcl = pr.clamp(0.0, hf);
            let ccl = pc.clamp(0.0, wf);
            let r0 = (rcl.floor() as usize).min(h - 2);
            let c0 = (ccl.floor() as usize).min(w - 2);
            let fr = rcl - r0 as f64;
            let fc = ccl - c0 as f64;
            let base = r0 * w + c0;
            let (v00, v01, v10, v11) = (is[base], is[base + 1], is[base + w], is[base + w + 1]);

            dimg_scatter(dis, base, w, gv, fr, fc);

            // clamped coordinates have zero derivative w.r.t. the field
            if pr > 0.0 && pr < hf {
                let ddr = (1.0 - fc) * (v10 - v00) + fc * (v11 - v01);
                dfs[r * w + c] = gv * ddr;
            }
            if pc > 0.0 && pc < wf {
                let ddc = (1.0 - fr) * (v01 - v00) + fr * (v11 - v10);
                dfs[h * w + r * w + c] = gv * ddc;
            }
        }
    }
    (dimg, df)
}

#[inline]
fn dimg_scatter(dis: &mut [f64], base: usize, w: usize, gv: f64, fr: f64, fc: f64) {
    dis[base] += gv * (1.0 - fr) * (1.0 - fc);
    dis[base + 1] += gv * (1.0 - fr) * fc;
    dis[base + w] += gv * fr * (1.0 - fc);
    dis[base + w + 1] += gv * fr * fc;
}

/// Summed-area table based box sums over clipped windows of half-width
/// `radius`, plus the per-pixel window pixel count.
fn box_sums(x: &ArrayView2<'_, f64>, radius: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    // sat[r][c] = sum of x[0..r][0..c]
    let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
    for r in 0..h {
        let mut rowsum = 0.0;
        for c in 0..w {
            rowsum += x[[r, c]];
            sat[[r + 1, c + 1]] = sat[[r, c + 1]] + rowsum;
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        let r0 = r.saturating_sub(radius);
        let c0 = c.saturating_sub(radius);
        let r1 = (r + radius + 1).min(h);
        let c1 = (c + radius + 1).min(w);
        sat[[r1, c1]] - sat[[r0, c1]] - sat[[r1, c0]] + sat[[r0, c0]]
    })
}

fn window_counts(h: usize, w: usize, radius: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(r, c)| {
        let rows = (r + radius + 1).min(h) - r.saturating_sub(radius);
        let cols = (c + radius + 1).min(w) - c.saturating_sub(radius);
        (rows * cols) as f64
    })
}

const NCC_EPS: f64 = 1e-5;

struct NccTerms {
    cross: Array2<f64>,
    va: Array2<f64>,
    vb: Array2<f64>,
    mean_a: Array2<f64>,
    mean_b: Array2<f64>,
}

fn ncc_terms(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, window: usize) -> NccTerms {
    let radius = window / 2;
    let (h, w) = a.dim();
    let n = window_counts(h, w, radius);
    let sa = box_sums(a, radius);
    let sb = box_sums(b, radius);
    let saa = box_sums(&a.mapv(|v| v * v).view(), radius);
    let sbb = box_sums(&b.mapv(|v| v * v).view(), radius);
    let ab = Array2::from_shape_fn((h, w), |(r, c)| a[[r, c]] * b[[r, c]]);
    let sab = box_sums(&ab.view(), radius);

    let mut cross = Array2::zeros((h, w));
    let mut va = Array2::zeros((h, w));
    let mut vb = Array2::zeros((h, w));
    let mut mean_a = Array2::zeros((h, w));
    let mut mean_b = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let count = n[[r, c]];
            mean_a[[r, c]] = sa[[r, c]] / count;
            mean_b[[r, c]] = sb[[r, c]] / count;
            cross[[r, c]] = sab[[r, c]] - sa[[r, c]] * sb[[r, c]] / count;
            va[[r, c]] = saa[[r, c]] - sa[[r, c]] * sa[[r, c]] / count + NCC_EPS;
            vb[[r, c]] = sbb[[r, c]] - sb[[r, c]] * sb[[r, c]] / count + NCC_EPS;
        }
    }
    NccTerms { cross, va, vb, mean_a, mean_b }
}

fn ncc_forward(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, window: usize) -> (f64, NccTerms) {
    let terms = ncc_terms(a, b, window);
    let (h, w) = a.dim();
    let mut acc = 0.0;
    for r in 0..h {
        for c in 0..w {
            let cross = terms.cross[[r, c]];
            acc += cross * cross / (terms.va[[r, c]] * terms.vb[[r, c]]);
        }
    }
    (1.0 - acc / (h * w) as f64, terms)
}

fn ncc_backward(
    a: &ArrayView2<'_, f64>,
    b: &ArrayView2<'_, f64>,
    window: usize,
    g: f64,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let radius = window / 2;
    let (h, w) = a.dim();
    let terms = ncc_terms(a, b, window);
    let n_px = (h * w) as f64;

    // d cc_p / d a_q = alpha_p * (b_q - mean_b_p) - gamma_p * (a_q - mean_a_p)
    // d cc_p / d b_q = alpha_p * (a_q - mean_a_p) - delta_p * (b_q - mean_b_p)
    let mut alpha = Array2::zeros((h, w));
    let mut gamma = Array2::zeros((h, w));
    let mut delta = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let cross = terms.cross[[r, c]];
            let va = terms.va[[r, c]];
            let vb = terms.vb[[r, c]];
            alpha[[r, c]] = 2.0 * cross / (va * vb);
            gamma[[r, c]] = 2.0 * cross * cross / (va * va * vb);
            delta[[r, c]] = 2.0 * cross * cross / (va * vb * vb);
        }
    }
    let alpha_mb = &alpha * &terms.mean_b;
    let alpha_ma = &alpha * &terms.mean_a;
    let gamma_ma = &gamma * &terms.mean_a;
    let delta_mb = &delta * &terms.mean_b;

    let s_alpha = box_sums(&alpha.view(), radius);
    let s_alpha_mb = box_sums(&alpha_mb.view(), radius);
    let s_alpha_ma = box_sums(&alpha_ma.view(), radius);
    let s_gamma = box_sums(&gamma.view(), radius);
    let s_gamma_ma = box_sums(&gamma_ma.view(), radius);
    let s_delta = box_sums(&delta.view(), radius);
    let s_delta_mb = box_sums(&delta_mb.view(), radius);

    let scale = -g / n_px;
    let mut da = ArrayD::zeros(IxDyn(&[h, w]));
    let mut db = ArrayD::zeros(IxDyn(&[h, w]));
    for r in 0..h {
        for c in 0..w {
            let aq = a[[r, c]];
            let bq = b[[r, c]];
            da[[r, c]] = scale
                * (bq * s_alpha[[r, c]] - s_alpha_mb[[r, c]] - aq * s_gamma[[r, c]]
                    + s_gamma_ma[[r, c]]);
            db[[r, c]] = scale
                * (aq * s_alpha[[r, c]] - s_alpha_ma[[r, c]] - bq * s_delta[[r, c]]
                    + s_delta_mb[[r, c]]);
        }
    }
    (da, db)
}

/// Non-tape entry points shared with the `objectives` module.
pub(crate) fn ncc_loss_value(a: &ArrayView2<'_, f64>, b: &ArrayView2<'_, f64>, window: usize) -> f64 {
    ncc_forward(a, b, window).0
}
