use super::gemm;
use super::{Grads, ParamId, ParamStore, Tensor3};

/// 2-D convolution with symmetric zero padding. Supports dense (`groups == 1`)
/// and depthwise (`groups == in == out`) kernels; weight shape is
/// `[out, in / groups, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let rows = self.in_channels * k * k;
        let n = oh * ow;
        let mut cols = vec![0.0f32; rows * n];
        for c in 0..self.in_channels {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..][..x.width];
                        let dst = &mut row[oy * ow..][..ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let n = oh * ow;
        let mut dx = Tensor3::zeros(self.in_channels, h, w);
        for c in 0..self.in_channels {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut y = if self.is_depthwise() {
            self.depthwise_forward(p.get(self.weight), x, oh, ow)
        } else {
            let mut y = Tensor3::zeros(self.out_channels, oh, ow);
            let kk = self.in_channels * self.kernel * self.kernel;
            let w = p.get(self.weight);
            if self.is_pointwise() {
                gemm(self.out_channels, kk, oh * ow, w, false, &x.data, false, &mut y.data, 0.0);
            } else {
                let cols = self.im2col(x, oh, ow);
                gemm(self.out_channels, kk, oh * ow, w, false, &cols, false, &mut y.data, 0.0);
            }
            y
        };
        if let Some(b) = self.bias {
            for (c, &bv) in p.get(b).iter().enumerate() {
                y.plane_mut(c).iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    fn depthwise_forward(&self, w: &[f32], x: &Tensor3, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let mut y = Tensor3::zeros(self.out_channels, oh, ow);
        for c in 0..self.out_channels {
            let src = x.plane(c);
            let kern = &w[c * k * k..(c + 1) * k * k];
            let dst = y.plane_mut(c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && ix < x.width as isize {
                                acc += kern[ky * k + kx] * src[iy as usize * x.width + ix as usize];
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        p: &ParamStore,
        x: &Tensor3,
        dy: &Tensor3,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Tensor3> {
        let (oh, ow) = (dy.height, dy.width);
        if let Some(b) = self.bias {
            let db = grads.get_mut(b);
            for (c, g) in db.iter_mut().enumerate() {
                *g += dy.plane(c).iter().sum::<f32>();
            }
        }
        if self.is_depthwise() {
            return self.depthwise_backward(p.get(self.weight), x, dy, grads, need_dx);
        }
        let kk = self.in_channels * self.kernel * self.kernel;
        let n = oh * ow;
        let w = p.get(self.weight);
        if self.is_pointwise() {
            gemm(self.out_channels, n, kk, &dy.data, false, &x.data, true, grads.get_mut(self.weight), 1.0);
            if !need_dx {
                return None;
            }
            let mut dx = Tensor3::zeros(self.in_channels, x.height, x.width);
            gemm(kk, self.out_channels, n, w, true, &dy.data, false, &mut dx.data, 0.0);
            return Some(dx);
        }
        let cols = self.im2col(x, oh, ow);
        gemm(self.out_channels, n, kk, &dy.data, false, &cols, true, grads.get_mut(self.weight), 1.0);
        if !need_dx {
            return None;
        }
        let mut dcols = cols;
        gemm(kk, self.out_channels, n, w, true, &dy.data, false, &mut dcols, 0.0);
        Some(self.col2im(&dcols, x.height, x.width, oh, ow))
    }

    fn depthwise_backward(
        &self,
        w: &[f32],
        x: &Tensor3,
        dy: &Tensor3,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Tensor3> {
        let k = self.kernel;
        let (oh, ow) = (dy.height, dy.width);
        let mut dx = need_dx.then(|| Tensor3::zeros(x.channels, x.height, x.width));
        let dw = grads.get_mut(self.weight);
        for c in 0..self.out_channels {
            let src = x.plane(c);
            let g = dy.plane(c);
            let kern = &w[c * k * k..(c + 1) * k * k];
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[oy * ow + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            let idx = iy as usize * x.width + ix as usize;
                            dw[c * k * k + ky * k + kx] += gv * src[idx];
                            if let Some(dx) = dx.as_mut() {
                                dx.plane_mut(c)[idx] += gv * kern[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer on a single vector, weight shape `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn forward(&self, p: &ParamStore, x: &[f32]) -> Vec<f32> {
        assert_eq!(x.len(), self.in_dim, "linear input dim");
        let w = p.get(self.weight);
        let mut y = p.get(self.bias).to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &[f32], dy: &[f32], grads: &mut Grads) -> Vec<f32> {
        for (g, d) in grads.get_mut(self.bias).iter_mut().zip(dy) {
            *g += d;
        }
        let dw = grads.get_mut(self.weight);
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
        let w = p.get(self.weight);
        let mut dx = vec![0.0; self.in_dim];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            for (g, wv) in dx.iter_mut().zip(row) {
                *g += d * wv;
            }
        }
        dx
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn append_coords(x: &Tensor3) -> Tensor3 {
    let (h, w) = (x.height, x.width);
    let mut data = Vec::with_capacity(x.data.len() + 2 * h * w);
    data.extend_from_slice(&x.data);
    for _ in 0..h {
        data.extend((0..w).map(|j| 2.0 * (j as f32 + 0.5) / w as f32 - 1.0));
    }
    for i in 0..h {
        let v = 2.0 * (i as f32 + 0.5) / h as f32 - 1.0;
        data.extend(std::iter::repeat(v).take(w));
    }
    Tensor3::from_vec(x.channels + 2, h, w, data).expect("coordinate channels")
}

/// Channel attention: `x * sigmoid(expand(silu(reduce(mean(x)))))`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    fn gates(&self, p: &ParamStore, x: &Tensor3) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let pooled = x.spatial_mean();
        let hidden = self.reduce.forward(p, &pooled);
        let act: Vec<f32> = hidden.iter().map(|&h| silu(h)).collect();
        let gate: Vec<f32> = self.expand.forward(p, &act).into_iter().map(sigmoid).collect();
        (pooled, hidden, gate)
    }

    fn forward(&self, p: &ParamStore, x: &Tensor3) -> Tensor3 {
        let (_, _, gate) = self.gates(p, x);
        let mut y = x.clone();
        for (c, &g) in gate.iter().enumerate() {
            y.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        y
    }

    fn backward(&self, p: &ParamStore, x: &Tensor3, dy: &Tensor3, grads: &mut Grads) -> Tensor3 {
        let (pooled, hidden, gate) = self.gates(p, x);
        let act: Vec<f32> = hidden.iter().map(|&h| silu(h)).collect();
        let mut dx = dy.clone();
        let mut d_gate_pre = vec![0.0; gate.len()];
        for (c, &g) in gate.iter().enumerate() {
            let dg: f32 = dy.plane(c).iter().zip(x.plane(c)).map(|(a, b)| a * b).sum();
            d_gate_pre[c] = dg * g * (1.0 - g);
            dx.plane_mut(c).iter_mut().for_each(|v| *v *= g);
        }
        let d_act = self.expand.backward(p, &act, &d_gate_pre, grads);
        let d_hidden: Vec<f32> = d_act.iter().zip(&hidden).map(|(d, &h)| d * silu_grad(h)).collect();
        let d_pooled = self.reduce.backward(p, &pooled, &d_hidden, grads);
        let n = x.plane_len() as f32;
        for (c, d) in d_pooled.iter().enumerate() {
            let add = d / n;
            dx.plane_mut(c).iter_mut().for_each(|v| *v += add);
        }
        dx
    }
}

/// `body(x) + x` when shapes allow, otherwise just `body(x)`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub body: Sequential,
    pub skip: bool,
}

#[derive(Clone, Debug)]
pub enum Op {
    Conv(Conv2d),
    /// Per-channel `x * scale + shift` (batch norm with frozen statistics).
    Affine { scale: ParamId, shift: ParamId },
    Relu,
    Silu,
    /// Appends two channels holding the x and y pixel-centre coordinates,
    /// scaled to `[-1, 1]`.
    CoordChannels,
    SqueezeExcite(SqueezeExcite),
    Residual(ResidualBlock),
}

/// Input of one op, plus nested caches for composite ops.
#[derive(Clone, Debug)]
pub struct OpCache {
    input: Tensor3,
    inner: Vec<OpCache>,
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub ops: Vec<Op>,
}

impl Sequential {
    pub fn new(ops: Vec<Op>) -> Self {
        Self { ops }
    }

    pub fn forward(&self, p: &ParamStore, x: &Tensor3) -> Tensor3 {
        self.run(p, x.clone(), None)
    }

    pub fn forward_cached(&self, p: &ParamStore, x: &Tensor3) -> (Tensor3, Vec<OpCache>) {
        let mut caches = Vec::with_capacity(self.ops.len());
        let y = self.run(p, x.clone(), Some(&mut caches));
        (y, caches)
    }

    fn run(&self, p: &ParamStore, mut x: Tensor3, mut caches: Option<&mut Vec<OpCache>>) -> Tensor3 {
        for op in &self.ops {
            let mut inner = Vec::new();
            let y = match op {
                Op::Conv(conv) => conv.forward(p, &x),
                Op::Affine { scale, shift } => {
                    let mut y = x.clone();
                    let (s, b) = (p.get(*scale), p.get(*shift));
                    for c in 0..y.channels {
                        let (sc, sh) = (s[c], b[c]);
                        y.plane_mut(c).iter_mut().for_each(|v| *v = *v * sc + sh);
                    }
                    y
                }
                Op::Relu => {
                    let mut y = x.clone();
                    y.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    y
                }
                Op::Silu => {
                    let mut y = x.clone();
                    y.data.iter_mut().for_each(|v| *v = silu(*v));
                    y
                }
                Op::CoordChannels => append_coords(&x),
                Op::SqueezeExcite(se) => se.forward(p, &x),
                Op::Residual(block) => {
                    let mut y = if caches.is_some() {
                        block.body.run(p, x.clone(), Some(&mut inner))
                    } else {
                        block.body.run(p, x.clone(), None)
                    };
                    if block.skip {
                        y.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += b);
                    }
                    y
                }
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(OpCache { input: x, inner });
            }
            x = y;
        }
        x
    }

    /// Back-propagates `dy` through the cached forward pass. Returns the input
    /// gradient only when `need_dx` is set.
    pub fn backward(
        &self,
        p: &ParamStore,
        caches: &[OpCache],
        dy: Tensor3,
        grads: &mut Grads,
        need_dx: bool,
    ) -> Option<Tensor3> {
        assert_eq!(caches.len(), self.ops.len(), "cache does not match op list");
        let mut dy = dy;
        for (i, (op, cache)) in self.ops.iter().zip(caches).enumerate().rev() {
            let want_dx = need_dx || i > 0;
            let x = &cache.input;
            let dx = match op {
                Op::Conv(conv) => conv.backward(p, x, &dy, grads, want_dx),
                Op::Affine { scale, shift } => {
                    let s = p.get(*scale).to_vec();
                    {
                        let ds = grads.get_mut(*scale);
                        for c in 0..x.channels {
                            ds[c] += dy.plane(c).iter().zip(x.plane(c)).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                    {
                        let db = grads.get_mut(*shift);
                        for (c, g) in db.iter_mut().enumerate() {
                            *g += dy.plane(c).iter().sum::<f32>();
                        }
                    }
                    for (c, &sc) in s.iter().enumerate() {
                        dy.plane_mut(c).iter_mut().for_each(|v| *v *= sc);
                    }
                    Some(dy)
                }
                Op::Relu => {
                    dy.data
                        .iter_mut()
                        .zip(&x.data)
                        .for_each(|(g, &v)| if v <= 0.0 { *g = 0.0 });
                    Some(dy)
                }
                Op::Silu => {
                    dy.data.iter_mut().zip(&x.data).for_each(|(g, &v)| *g *= silu_grad(v));
                    Some(dy)
                }
                Op::CoordChannels => {
                    let n = x.data.len();
                    dy.data.truncate(n);
                    dy.channels = x.channels;
                    Some(dy)
                }
                Op::SqueezeExcite(se) => Some(se.backward(p, x, &dy, grads)),
                Op::Residual(block) => {
                    let body_dx = block.body.backward(p, &cache.inner, dy.clone(), grads, true);
                    let mut dx = body_dx.expect("residual body input gradient");
                    if block.skip {
                        dx.data.iter_mut().zip(&dy.data).for_each(|(a, b)| *a += b);
                    }
                    Some(dx)
                }
            };
            if i == 0 {
                return if need_dx { dx } else { None };
            }
            dy = dx.expect("intermediate gradient");
        }
        Some(dy)
    }
}
