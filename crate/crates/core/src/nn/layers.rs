use rand::Rng;

use super::{matmul, Module, Param, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

/// 2-D convolution over a single `[C, H, W]` feature map, lowered to GEMM via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<F> {
    input: Tensor<F>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::kaiming(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn im2col(&self, x: &Tensor<F>, ho: usize, wo: usize) -> Vec<F> {
        let (c, h, w) = x.chw();
        let k = self.kernel;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        let plane = ho * wo;
        let mut col = vec![F::zero(); c * k * k * plane];
        for ci in 0..c {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[F], c: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<F> {
        let k = self.kernel;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        let plane = ho * wo;
        let mut dx = Tensor::zeros(&[c, h, w]);
        for ci in 0..c {
            let dst = &mut dx.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[oy * wo..(oy + 1) * wo];
                        for (ox, &g) in src_row.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, ConvCache<F>) {
        let (c, h, w) = x.chw();
        assert_eq!(c, self.in_channels, "conv {}: channel mismatch", self.weight.name);
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let kdim = c * self.kernel * self.kernel;
        let mut y = Tensor::zeros(&[self.out_channels, ho, wo]);
        for (o, chunk) in y.data.chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        if self.is_pointwise() {
            matmul(self.out_channels, kdim, plane, &self.weight.value, false, &x.data, false, F::one(), &mut y.data);
        } else {
            let col = self.im2col(x, ho, wo);
            matmul(self.out_channels, kdim, plane, &self.weight.value, false, &col, false, F::one(), &mut y.data);
        }
        (y, ConvCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (c, h, w) = cache.input.chw();
        let (_, ho, wo) = dy.chw();
        let plane = ho * wo;
        let kdim = c * self.kernel * self.kernel;
        for (o, chunk) in dy.data.chunks(plane).enumerate() {
            let s: F = chunk.iter().copied().sum();
            self.bias.grad[o] += s;
        }
        if self.is_pointwise() {
            matmul(self.out_channels, plane, kdim, &dy.data, false, &cache.input.data, true, F::one(), &mut self.weight.grad);
            let mut dx = Tensor::zeros(&[c, h, w]);
            matmul(kdim, self.out_channels, plane, &self.weight.value, true, &dy.data, false, F::zero(), &mut dx.data);
            return dx;
        }
        let col = self.im2col(&cache.input, ho, wo);
        matmul(self.out_channels, plane, kdim, &dy.data, false, &col, true, F::one(), &mut self.weight.grad);
        let mut dcol = col;
        matmul(kdim, self.out_channels, plane, &self.weight.value, true, &dy.data, false, F::zero(), &mut dcol);
        self.col2im(&dcol, c, h, w, ho, wo)
    }
}

impl<F: Scalar> Module<F> for Conv2d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Shared normalisation kernel: normalise `groups` contiguous blocks of `x`.
fn normalize_blocks<F: Scalar>(x: &[F], block: usize) -> (Vec<F>, Vec<F>) {
    let mut xhat = vec![F::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / block);
    for (src, dst) in x.chunks(block).zip(xhat.chunks_mut(block)) {
        let n = F::of(block as f64);
        let mean = src.iter().copied().sum::<F>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let is = F::one() / (var + F::of(NORM_EPS)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Given `dxhat` per block, returns `dx` for the normalisation above.
fn normalize_blocks_backward<F: Scalar>(xhat: &[F], dxhat: &[F], inv_std: &[F], block: usize) -> Vec<F> {
    let mut dx = vec![F::zero(); xhat.len()];
    let n = F::of(block as f64);
    for (((xh, dxh), out), &is) in xhat
        .chunks(block)
        .zip(dxhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .zip(inv_std)
    {
        let sum_d: F = dxh.iter().copied().sum();
        let sum_dx: F = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        for ((o, &d), &h) in out.iter_mut().zip(dxh).zip(xh) {
            *o = is * (d - sum_d / n - h * sum_dx / n);
        }
    }
    dx
}

/// Group normalisation over `[C, H, W]` with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub groups: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
    hw: usize,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], F::one()),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            groups,
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, GroupNormCache<F>) {
        let (c, h, w) = x.chw();
        assert_eq!(c, self.channels, "groupnorm {}: channel mismatch", self.gamma.name);
        let hw = h * w;
        let block = (c / self.groups) * hw;
        let (xhat, inv_std) = normalize_blocks(&x.data, block);
        let mut y = Tensor::zeros(&x.shape);
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for (o, &v) in y.data[ch * hw..(ch + 1) * hw].iter_mut().zip(&xhat[ch * hw..(ch + 1) * hw]) {
                *o = g * v + b;
            }
        }
        (y, GroupNormCache { xhat, inv_std, hw })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let hw = cache.hw;
        let mut dxhat = vec![F::zero(); dy.len()];
        for ch in 0..self.channels {
            let g = self.gamma.value[ch];
            let range = ch * hw..(ch + 1) * hw;
            let mut dg = F::zero();
            let mut db = F::zero();
            for ((d, &gy), &xh) in dxhat[range.clone()].iter_mut().zip(&dy.data[range.clone()]).zip(&cache.xhat[range]) {
                dg += gy * xh;
                db += gy;
                *d = gy * g;
            }
            self.gamma.grad[ch] += dg;
            self.beta.grad[ch] += db;
        }
        let block = (self.channels / self.groups) * hw;
        Tensor::from_vec(&dy.shape, normalize_blocks_backward(&cache.xhat, &dxhat, &cache.inv_std, block))
    }
}

impl<F: Scalar> Module<F> for GroupNorm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Layer normalisation over the last axis of an `[N, D]` matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), &[dim], F::one()),
            beta: Param::zeros(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, LayerNormCache<F>) {
        let (_, d) = x.rc();
        assert_eq!(d, self.dim);
        let (xhat, inv_std) = normalize_blocks(&x.data, d);
        let mut y = Tensor::zeros(&x.shape);
        for (row_y, row_h) in y.data.chunks_mut(d).zip(xhat.chunks(d)) {
            for j in 0..d {
                row_y[j] = self.gamma.value[j] * row_h[j] + self.beta.value[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let d = self.dim;
        let mut dxhat = vec![F::zero(); dy.len()];
        for ((row_d, row_g), row_h) in dxhat.chunks_mut(d).zip(dy.data.chunks(d)).zip(cache.xhat.chunks(d)) {
            for j in 0..d {
                self.gamma.grad[j] += row_g[j] * row_h[j];
                self.beta.grad[j] += row_g[j];
                row_d[j] = row_g[j] * self.gamma.value[j];
            }
        }
        Tensor::from_vec(&dy.shape, normalize_blocks_backward(&cache.xhat, &dxhat, &cache.inv_std, d))
    }
}

impl<F: Scalar> Module<F> for LayerNorm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.gamma, &self.beta]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Affine map `y = x·W + b` on `[N, in]` rows; `W` is stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone)]
pub struct LinearCache<F> {
    input: Tensor<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::trunc_normal(format!("{name}.weight"), &[in_dim, out_dim], 0.02, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, LinearCache<F>) {
        let (n, d) = x.rc();
        assert_eq!(d, self.in_dim, "linear {}: input width mismatch", self.weight.name);
        let mut y = Tensor::zeros(&[n, self.out_dim]);
        for row in y.data.chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(n, d, self.out_dim, &x.data, false, &self.weight.value, false, F::one(), &mut y.data);
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (n, d) = cache.input.rc();
        for row in dy.data.chunks(self.out_dim) {
            for (g, &v) in self.bias.grad.iter_mut().zip(row) {
                *g += v;
            }
        }
        matmul(d, n, self.out_dim, &cache.input.data, true, &dy.data, false, F::one(), &mut self.weight.grad);
        let mut dx = Tensor::zeros(&[n, d]);
        matmul(n, self.out_dim, d, &dy.data, false, &self.weight.value, true, F::zero(), &mut dx.data);
        dx
    }
}

impl<F: Scalar> Module<F> for Linear<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Multi-head scaled dot-product self-attention with fused QKV projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    qkv_cache: LinearCache<F>,
    proj_cache: LinearCache<F>,
    qkv: Tensor<F>,
    /// Row-softmaxed attention, one `[N, N]` block per head.
    attn: Vec<Vec<F>>,
}

impl<F: Scalar> MultiHeadAttention<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(&format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(&format!("{name}.proj"), dim, dim, rng),
            heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Copies the `[N, dh]` slab of column block `which` (0 = Q, 1 = K, 2 = V) for head `h`.
    fn slab(&self, qkv: &Tensor<F>, which: usize, h: usize) -> Vec<F> {
        let (n, width) = qkv.rc();
        let dh = self.head_dim();
        let off = which * self.dim + h * dh;
        let mut out = Vec::with_capacity(n * dh);
        for r in 0..n {
            out.extend_from_slice(&qkv.data[r * width + off..r * width + off + dh]);
        }
        out
    }

    pub fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, AttentionCache<F>) {
        let (n, _) = x.rc();
        let dh = self.head_dim();
        let scale = F::one() / F::of(dh as f64).sqrt();
        let (qkv, qkv_cache) = self.qkv.forward(x);
        let mut merged = Tensor::zeros(&[n, self.dim]);
        let mut attn = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = self.slab(&qkv, 0, h);
            let k = self.slab(&qkv, 1, h);
            let v = self.slab(&qkv, 2, h);
            let mut s = vec![F::zero(); n * n];
            matmul(n, dh, n, &q, false, &k, true, F::zero(), &mut s);
            for row in s.chunks_mut(n) {
                let mut mx = F::neg_infinity();
                for v in row.iter_mut() {
                    *v *= scale;
                    mx = mx.max(*v);
                }
                let mut z = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            let mut o = vec![F::zero(); n * dh];
            matmul(n, n, dh, &s, false, &v, false, F::zero(), &mut o);
            for r in 0..n {
                merged.data[r * self.dim + h * dh..r * self.dim + (h + 1) * dh].copy_from_slice(&o[r * dh..(r + 1) * dh]);
            }
            attn.push(s);
        }
        let (y, proj_cache) = self.proj.forward(&merged);
        (y, AttentionCache { qkv_cache, proj_cache, qkv, attn })
    }

    pub fn backward(&mut self, cache: &AttentionCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let (n, _) = dy.rc();
        let dh = self.head_dim();
        let scale = F::one() / F::of(dh as f64).sqrt();
        let dmerged = self.proj.backward(&cache.proj_cache, dy);
        let mut dqkv = Tensor::zeros(&[n, 3 * self.dim]);
        for h in 0..self.heads {
            let q = self.slab(&cache.qkv, 0, h);
            let k = self.slab(&cache.qkv, 1, h);
            let v = self.slab(&cache.qkv, 2, h);
            let a = &cache.attn[h];
            let mut doh = Vec::with_capacity(n * dh);
            for r in 0..n {
                doh.extend_from_slice(&dmerged.data[r * self.dim + h * dh..r * self.dim + (h + 1) * dh]);
            }
            let mut da = vec![F::zero(); n * n];
            matmul(n, dh, n, &doh, false, &v, true, F::zero(), &mut da);
            let mut dv = vec![F::zero(); n * dh];
            matmul(n, n, dh, a, true, &doh, false, F::zero(), &mut dv);
            // softmax backward, folded with the 1/sqrt(dh) scale
            for (drow, arow) in da.chunks_mut(n).zip(a.chunks(n)) {
                let dot: F = drow.iter().zip(arow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            let mut dq = vec![F::zero(); n * dh];
            matmul(n, n, dh, &da, false, &k, false, F::zero(), &mut dq);
            let mut dk = vec![F::zero(); n * dh];
            matmul(n, n, dh, &da, true, &q, false, F::zero(), &mut dk);
            let width = 3 * self.dim;
            for r in 0..n {
                for (which, src) in [(0, &dq), (1, &dk), (2, &dv)] {
                    let off = r * width + which * self.dim + h * dh;
                    dqkv.data[off..off + dh].copy_from_slice(&src[r * dh..(r + 1) * dh]);
                }
            }
        }
        self.qkv.backward(&cache.qkv_cache, &dqkv)
    }
}

impl<F: Scalar> Module<F> for MultiHeadAttention<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.qkv.params();
        v.extend(self.proj.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.qkv.params_mut();
        v.extend(self.proj.params_mut());
        v
    }
}

/// 2× bilinear upsampling with half-pixel centres (`align_corners = false`).
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

/// Per output index: the two source taps and their weights.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let t = pos - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

impl Upsample2x {
    pub fn forward<F: Scalar>(&self, x: &Tensor<F>) -> Tensor<F> {
        let (c, h, w) = x.chw();
        let (ho, wo) = (2 * h, 2 * w);
        let ty = bilinear_taps(h, ho);
        let tx = bilinear_taps(w, wo);
        let mut y = Tensor::zeros(&[c, ho, wo]);
        for ch in 0..c {
            let src = &x.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut y.data[ch * ho * wo..(ch + 1) * ho * wo];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (F::of(wy0), F::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (F::of(wx0), F::of(wx1));
                    dst[oy * wo + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        y
    }

    pub fn backward<F: Scalar>(&self, dy: &Tensor<F>) -> Tensor<F> {
        let (c, ho, wo) = dy.chw();
        let (h, w) = (ho / 2, wo / 2);
        let ty = bilinear_taps(h, ho);
        let tx = bilinear_taps(w, wo);
        let mut dx = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let src = &dy.data[ch * ho * wo..(ch + 1) * ho * wo];
            let dst = &mut dx.data[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let (wy0, wy1) = (F::of(wy0), F::of(wy1));
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let (wx0, wx1) = (F::of(wx0), F::of(wx1));
                    let g = src[oy * wo + ox];
                    dst[y0 * w + x0] += g * wy0 * wx0;
                    dst[y0 * w + x1] += g * wy0 * wx1;
                    dst[y1 * w + x0] += g * wy1 * wx0;
                    dst[y1 * w + x1] += g * wy1 * wx1;
                }
            }
        }
        dx
    }
}

/// Channel concatenation of two `[C, H, W]` maps with equal spatial size.
#[derive(Debug, Clone, Copy, Default)]
pub struct Concat;

impl Concat {
    pub fn forward<F: Scalar>(&self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (ca, h, w) = a.chw();
        let (cb, hb, wb) = b.chw();
        assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor::from_vec(&[ca + cb, h, w], data)
    }

    pub fn backward<F: Scalar>(&self, dy: &Tensor<F>, ca: usize) -> (Tensor<F>, Tensor<F>) {
        let (c, h, w) = dy.chw();
        let split = ca * h * w;
        (
            Tensor::from_vec(&[ca, h, w], dy.data[..split].to_vec()),
            Tensor::from_vec(&[c - ca, h, w], dy.data[split..].to_vec()),
        )
    }
}

pub fn relu_inplace<F: Scalar>(x: &mut Tensor<F>) {
    for v in x.data.iter_mut() {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Masks `dy` by the post-activation output `y` of a ReLU.
pub fn relu_backward<F: Scalar>(y: &Tensor<F>, dy: &mut Tensor<F>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= F::zero() {
            *g = F::zero();
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let c = F::of(GELU_C);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect(),
    }
}

pub fn gelu_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let c = F::of(GELU_C);
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &g)| {
                let t = (c * (v + a * v * v * v)).tanh();
                let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
                g * (half * (F::one() + t) + half * v * dt)
            })
            .collect(),
    }
}

#[inline]
pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grads};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], rng: &mut StdRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Fixed random projection turning any output into a scalar loss.
    fn probe(len: usize) -> Vec<f64> {
        (0..len).map(|i| ((i as f64) * 0.7919).sin()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_output_sizes() {
        let mut rng = StdRng::seed_from_u64(0);
        let c = Conv2d::<f32>::new("c", 1, 4, 3, 2, 1, &mut rng);
        assert_eq!(c.output_hw(224, 224), (112, 112));
        let c = Conv2d::<f32>::new("c", 1, 4, 3, 1, 1, &mut rng);
        assert_eq!(c.output_hw(17, 9), (17, 9));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 1, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor(&[2, 5, 6], &mut rng);
        let (y, _) = conv.forward(&x);
        let (ho, wo) = conv.output_hw(5, 6);
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = conv.bias.value[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0 && iy < 5 && ix >= 0 && ix < 6 {
                                    acc += conv.weight.value[((o * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data[(ci * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((y.data[(o * ho + oy) * wo + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = StdRng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let mut conv = Conv2d::<f64>::new("c", 2, 3, k, s, p, &mut rng);
            let x = rand_tensor(&[2, 6, 6], &mut rng);
            let (y, cache) = conv.forward(&x);
            let w = probe(y.len());
            let dx = conv.backward(&cache, &Tensor::from_vec(&y.shape, w.clone()));
            check_input_grad(&x, &dx, |xx| dot(&conv.forward(xx).0.data, &w), 1e-6);
            check_param_grads(&mut conv, |m| dot(&m.forward(&x).0.data, &w), 1e-6);
        }
    }

    #[test]
    fn groupnorm_gradients() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut gn = GroupNorm::<f64>::new("g", 2, 4);
        gn.gamma.value = vec![1.5, 0.5, -1.0, 2.0];
        gn.beta.value = vec![0.1, 0.2, 0.3, 0.4];
        let x = rand_tensor(&[4, 3, 3], &mut rng);
        let (y, cache) = gn.forward(&x);
        let w = probe(y.len());
        let dx = gn.backward(&cache, &Tensor::from_vec(&y.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&gn.forward(xx).0.data, &w), 1e-6);
        check_param_grads(&mut gn, |m| dot(&m.forward(&x).0.data, &w), 1e-6);
    }

    #[test]
    fn layernorm_and_linear_gradients() {
        let mut rng = StdRng::seed_from_u64(4);
        let mut ln = LayerNorm::<f64>::new("ln", 5);
        ln.gamma.value = vec![1.0, 2.0, 0.5, -1.0, 1.5];
        let x = rand_tensor(&[3, 5], &mut rng);
        let (y, cache) = ln.forward(&x);
        let w = probe(y.len());
        let dx = ln.backward(&cache, &Tensor::from_vec(&y.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&ln.forward(xx).0.data, &w), 1e-6);
        check_param_grads(&mut ln, |m| dot(&m.forward(&x).0.data, &w), 1e-6);

        let mut lin = Linear::<f64>::new("fc", 5, 4, &mut rng);
        let (y, cache) = lin.forward(&x);
        let w = probe(y.len());
        let dx = lin.backward(&cache, &Tensor::from_vec(&y.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&lin.forward(xx).0.data, &w), 1e-6);
        check_param_grads(&mut lin, |m| dot(&m.forward(&x).0.data, &w), 1e-6);
    }

    #[test]
    fn attention_gradients() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut att = MultiHeadAttention::<f64>::new("att", 8, 2, &mut rng);
        // larger weights so the softmax is far from uniform
        for p in att.params_mut() {
            p.value.iter_mut().for_each(|v| *v *= 20.0);
        }
        let x = rand_tensor(&[5, 8], &mut rng);
        let (y, cache) = att.forward(&x);
        let w = probe(y.len());
        let dx = att.backward(&cache, &Tensor::from_vec(&y.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&att.forward(xx).0.data, &w), 1e-6);
        check_param_grads(&mut att, |m| dot(&m.forward(&x).0.data, &w), 1e-6);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = StdRng::seed_from_u64(6);
        let att = MultiHeadAttention::<f64>::new("att", 8, 4, &mut rng);
        let x = rand_tensor(&[6, 8], &mut rng);
        let (_, cache) = att.forward(&x);
        for a in &cache.attn {
            for row in a.chunks(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_and_activations_gradients() {
        let mut rng = StdRng::seed_from_u64(7);
        let up = Upsample2x;
        let x = rand_tensor(&[2, 3, 4], &mut rng);
        let y = up.forward(&x);
        assert_eq!(y.shape, vec![2, 6, 8]);
        let w = probe(y.len());
        let dx = up.backward(&Tensor::from_vec(&y.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&up.forward(xx).data, &w), 1e-8);

        let x = rand_tensor(&[4, 3], &mut rng);
        let w = probe(x.len());
        let dx = gelu_backward(&x, &Tensor::from_vec(&x.shape, w.clone()));
        check_input_grad(&x, &dx, |xx| dot(&gelu(xx).data, &w), 1e-7);
    }

    #[test]
    fn upsample_constant_field_stays_constant() {
        let x = Tensor::from_vec(&[1, 3, 3], vec![2.5f64; 9]);
        let y = Upsample2x.forward(&x);
        assert!(y.data.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!((sigmoid(0.0f32) - 0.5).abs() < 1e-7);
    }
}
