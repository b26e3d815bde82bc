//! Minimal CPU neural-network building blocks with explicit backward passes:
//! im2col convolution, linear layers, nearest upsampling, RoI align, and SGD
//! with momentum. Tensors are `[C, H, W]` f32 arrays; weights are stored as
//! GEMM-ready matrices.

use crate::util::derive_seed_str;
use ndarray::{Array1, Array2, Array3, Array4};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Matrix-shaped parameter with gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct MatParam {
    pub v: Array2<f32>,
    pub g: Array2<f32>,
    pub m: Array2<f32>,
}

impl MatParam {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatParam {
            v: Array2::zeros((rows, cols)),
            g: Array2::zeros((rows, cols)),
            m: Array2::zeros((rows, cols)),
        }
    }

    /// Gaussian init with the given std, seeded from (seed, name).
    pub fn init_normal(mut self, std: f64, seed: u64, name: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_str(seed, name));
        let dist = Normal::new(0.0, std).unwrap();
        for v in self.v.iter_mut() {
            *v = dist.sample(&mut rng) as f32;
        }
        self
    }
}

/// Vector-shaped parameter (biases).
#[derive(Debug, Clone)]
pub struct VecParam {
    pub v: Array1<f32>,
    pub g: Array1<f32>,
    pub m: Array1<f32>,
}

impl VecParam {
    pub fn zeros(n: usize) -> Self {
        VecParam { v: Array1::zeros(n), g: Array1::zeros(n), m: Array1::zeros(n) }
    }
}

/// Borrowed view of one named parameter for optimizers/checkpointing.
pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub v: &'a mut [f32],
    pub g: &'a mut [f32],
    pub m: &'a mut [f32],
}

/// Anything owning parameters exposes them through a visitor.
pub trait HasParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_>));
}

impl MatParam {
    pub fn param_ref(&mut self, name: &str) -> ParamRef<'_> {
        ParamRef {
            name: name.to_owned(),
            shape: self.v.shape().to_vec(),
            v: self.v.as_slice_mut().unwrap(),
            g: self.g.as_slice_mut().unwrap(),
            m: self.m.as_slice_mut().unwrap(),
        }
    }
}

impl VecParam {
    pub fn param_ref(&mut self, name: &str) -> ParamRef<'_> {
        ParamRef {
            name: name.to_owned(),
            shape: self.v.shape().to_vec(),
            v: self.v.as_slice_mut().unwrap(),
            g: self.g.as_slice_mut().unwrap(),
            m: self.m.as_slice_mut().unwrap(),
        }
    }
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// 2D convolution backed by im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub w: MatParam, // [cout, cin*k*k]
    pub b: VecParam,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let fan_in = (cin * k * k) as f64;
        let w = MatParam::zeros(cout, cin * k * k).init_normal((2.0 / fan_in).sqrt(), seed, name);
        Conv2d { name: name.to_owned(), cin, cout, k, stride, pad, w, b: VecParam::zeros(cout) }
    }

    /// Override init std (small-head initialization).
    pub fn with_init_std(mut self, std: f64, seed: u64) -> Self {
        let name = self.name.clone();
        self.w = MatParam::zeros(self.cout, self.cin * self.k * self.k).init_normal(std, seed, &name);
        self
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out_dim(h, self.k, self.stride, self.pad), conv_out_dim(w, self.k, self.stride, self.pad))
    }

    /// Returns the output and the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_dims(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let y_mat = self.w.v.dot(&cols); // [cout, oh*ow]
        let mut y = y_mat.into_shape_with_order((self.cout, oh, ow)).unwrap();
        for (c, mut plane) in y.outer_iter_mut().enumerate() {
            let bias = self.b.v[c];
            plane.mapv_inplace(|v| v + bias);
        }
        (y, cols)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cols: &Array2<f32>, input_dims: (usize, usize, usize), dy: &Array3<f32>) -> Array3<f32> {
        let (cout, oh, ow) = dy.dim();
        debug_assert_eq!(cout, self.cout);
        let dy_mat = dy.view().into_shape_with_order((cout, oh * ow)).unwrap();
        self.w.g += &dy_mat.dot(&cols.t());
        for (c, row) in dy_mat.outer_iter().enumerate() {
            self.b.g[c] += row.sum();
        }
        let dcols = self.w.v.t().dot(&dy_mat); // [cin*k*k, oh*ow]
        col2im(&dcols, input_dims, self.k, self.stride, self.pad)
    }
}

impl HasParams for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        let (wname, bname) = (format!("{}.w", self.name), format!("{}.b", self.name));
        f(self.w.param_ref(&wname));
        f(self.b.param_ref(&bname));
    }
}

/// Unfold `[C,H,W]` into `[C*k*k, OH*OW]` patch columns.
pub fn im2col(x: &Array3<f32>, k: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<f32>::zeros((c * k * k, oh * ow));
    let xs = x.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let x_plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let out_row = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
pub fn col2im(cols: &Array2<f32>, dims: (usize, usize, usize), k: usize, stride: usize, pad: usize) -> Array3<f32> {
    let (c, h, w) = dims;
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut x = Array3::<f32>::zeros((c, h, w));
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    for ci in 0..c {
        let x_plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col_row = &cs[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &col_row[oy * ow..(oy + 1) * ow];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Fully connected layer; rows of the input are independent samples.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: MatParam, // [out, in]
    pub b: VecParam,
}

impl Linear {
    pub fn new(name: &str, input: usize, output: usize, seed: u64) -> Self {
        let w = MatParam::zeros(output, input).init_normal((2.0 / input as f64).sqrt(), seed, name);
        Linear { name: name.to_owned(), w, b: VecParam::zeros(output) }
    }

    pub fn with_init_std(mut self, std: f64, seed: u64) -> Self {
        let (out, input) = self.w.v.dim();
        let name = self.name.clone();
        self.w = MatParam::zeros(out, input).init_normal(std, seed, &name);
        self
    }

    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut y = x.dot(&self.w.v.t());
        y += &self.b.v;
        y
    }

    pub fn backward(&mut self, x: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
        self.w.g += &dy.t().dot(x);
        for row in dy.outer_iter() {
            self.b.g += &row;
        }
        dy.dot(&self.w.v)
    }
}

impl HasParams for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamRef<'_>)) {
        let (wname, bname) = (format!("{}.w", self.name), format!("{}.b", self.name));
        f(self.w.param_ref(&wname));
        f(self.b.param_ref(&bname));
    }
}

pub fn relu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu_backward(y: &Array3<f32>, dy: &mut Array3<f32>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn relu2_inplace(x: &mut Array2<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn relu2_backward(y: &Array2<f32>, dy: &mut Array2<f32>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Nearest-neighbor upsampling to an explicit target size.
pub fn upsample_nearest(x: &Array3<f32>, target: (usize, usize)) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (th, tw) = target;
    let mut y = Array3::<f32>::zeros((c, th, tw));
    for ci in 0..c {
        for oy in 0..th {
            let sy = oy * h / th;
            for ox in 0..tw {
                y[[ci, oy, ox]] = x[[ci, sy, ox * w / tw]];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward(dy: &Array3<f32>, source: (usize, usize)) -> Array3<f32> {
    let (c, th, tw) = dy.dim();
    let (h, w) = source;
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for oy in 0..th {
            let sy = oy * h / th;
            for ox in 0..tw {
                dx[[ci, sy, ox * w / tw]] += dy[[ci, oy, ox]];
            }
        }
    }
    dx
}

/// One bilinear sample with its four taps; mirrors the standard RoIAlign
/// border handling so forward and backward agree exactly.
#[inline]
fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> Option<([usize; 4], [usize; 4], [f64; 4])> {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return None;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let mut y_low = y.floor() as usize;
    let mut x_low = x.floor() as usize;
    let (y_high, yy);
    if y_low >= h - 1 {
        y_low = h - 1;
        y_high = h - 1;
        yy = y_low as f64;
    } else {
        y_high = y_low + 1;
        yy = y;
    }
    let (x_high, xx);
    if x_low >= w - 1 {
        x_low = w - 1;
        x_high = w - 1;
        xx = x_low as f64;
    } else {
        x_high = x_low + 1;
        xx = x;
    }
    let ly = yy - y_low as f64;
    let lx = xx - x_low as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    Some((
        [y_low, y_low, y_high, y_high],
        [x_low, x_high, x_low, x_high],
        [hy * hx, hy * lx, ly * hx, ly * lx],
    ))
}

/// RoI Align: pool each box (image coordinates) from a feature map at the
/// given stride into `out x out` bins, averaging `samples^2` bilinear taps
/// per bin.
pub fn roi_align(
    feat: &Array3<f32>,
    boxes: &[crate::geometry::BoundingBox],
    stride: f64,
    out: usize,
    samples: usize,
) -> Array4<f32> {
    let (c, h, w) = feat.dim();
    let mut y = Array4::<f32>::zeros((boxes.len(), c, out, out));
    let inv = 1.0 / (samples * samples) as f64;
    for (ri, b) in boxes.iter().enumerate() {
        // feature-space box, cell centers at (i + 0.5) * stride
        let fx1 = b.x1 / stride - 0.5;
        let fy1 = b.y1 / stride - 0.5;
        let bw = (b.x2 - b.x1) / stride / out as f64;
        let bh = (b.y2 - b.y1) / stride / out as f64;
        for by in 0..out {
            for bx in 0..out {
                let mut taps: Vec<([usize; 4], [usize; 4], [f64; 4])> = Vec::with_capacity(samples * samples);
                for sy in 0..samples {
                    let py = fy1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bh;
                    for sx in 0..samples {
                        let px = fx1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bw;
                        if let Some(t) = bilinear_taps(h, w, py, px) {
                            taps.push(t);
                        }
                    }
                }
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for (ys, xs, ws) in &taps {
                        for i in 0..4 {
                            acc += ws[i] * feat[[ci, ys[i], xs[i]]] as f64;
                        }
                    }
                    y[[ri, ci, by, bx]] = (acc * inv) as f32;
                }
            }
        }
    }
    y
}

/// Scatter RoI Align gradients back into the feature map gradient.
pub fn roi_align_backward(
    dfeat: &mut Array3<f32>,
    boxes: &[crate::geometry::BoundingBox],
    stride: f64,
    samples: usize,
    dy: &Array4<f32>,
) {
    let (c, h, w) = dfeat.dim();
    let (r, dc, out, _) = dy.dim();
    debug_assert_eq!(r, boxes.len());
    debug_assert_eq!(dc, c);
    let inv = 1.0 / (samples * samples) as f64;
    for (ri, b) in boxes.iter().enumerate() {
        let fx1 = b.x1 / stride - 0.5;
        let fy1 = b.y1 / stride - 0.5;
        let bw = (b.x2 - b.x1) / stride / out as f64;
        let bh = (b.y2 - b.y1) / stride / out as f64;
        for by in 0..out {
            for bx in 0..out {
                let mut taps: Vec<([usize; 4], [usize; 4], [f64; 4])> = Vec::with_capacity(samples * samples);
                for sy in 0..samples {
                    let py = fy1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bh;
                    for sx in 0..samples {
                        let px = fx1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bw;
                        if let Some(t) = bilinear_taps(h, w, py, px) {
                            taps.push(t);
                        }
                    }
                }
                for ci in 0..c {
                    let g = dy[[ri, ci, by, bx]] as f64 * inv;
                    for (ys, xs, ws) in &taps {
                        for i in 0..4 {
                            dfeat[[ci, ys[i], xs[i]]] += (g * ws[i]) as f32;
                        }
                    }
                }
            }
        }
    }
}

/// SGD with momentum and optional global gradient-norm clipping.
///
/// Clipping rescales raw gradients before the momentum update; momentum
/// follows v = mu*v + g, p -= lr*v.
pub struct Sgd {
    pub momentum: f32,
    pub clip_norm: Option<f32>,
}

impl Sgd {
    pub fn step(&self, model: &mut dyn HasParams, lr: f32) {
        let mut norm_sq = 0.0f64;
        if self.clip_norm.is_some() {
            model.visit_params(&mut |p: ParamRef<'_>| {
                norm_sq += p.g.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
            });
        }
        let scale = match self.clip_norm {
            Some(c) if norm_sq.sqrt() > c as f64 => (c as f64 / norm_sq.sqrt()) as f32,
            _ => 1.0,
        };
        let mu = self.momentum;
        model.visit_params(&mut |p: ParamRef<'_>| {
            for i in 0..p.v.len() {
                p.m[i] = mu * p.m[i] + p.g[i] * scale;
                p.v[i] -= lr * p.m[i];
            }
        });
    }

    pub fn zero_grad(model: &mut dyn HasParams) {
        model.visit_params(&mut |p: ParamRef<'_>| p.g.fill(0.0));
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(model: &mut dyn HasParams) -> f64 {
        let mut norm_sq = 0.0f64;
        model.visit_params(&mut |p: ParamRef<'_>| {
            norm_sq += p.g.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
        });
        norm_sq.sqrt()
    }
}
