//! The MicroSegNet network: conv stem with skips, patch embedding, pre-LN
//! transformer encoder, cascaded upsampling decoder and four sigmoid heads.
//!
//! Layout per sample: feature maps are `[C, H, W]`, token sequences `[N, D]`.
//! Every stage exposes a `forward` used for inference and a caching variant
//! used by training; [`MicroSegNet::backward`] consumes the cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, StemMode, STEM_STRIDE};
use crate::domain::{clamp_prob, Image2D, MultiScalePrediction, ProbabilityMap};
use crate::error::{Error, Result};
use crate::nn::layers::{
    gelu, gelu_backward, relu_backward, relu_inplace, sigmoid, AttentionCache, ConvCache, GroupNormCache,
    LayerNormCache, LinearCache,
};
use crate::nn::{matmul, Concat, Conv2d, GroupNorm, LayerNorm, Linear, Module, MultiHeadAttention, Param, Scalar, Tensor, Upsample2x};

/// Largest of 8, 4, 2, 1 dividing `channels`.
fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// 3×3 conv → GroupNorm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<F> {
    pub conv: Conv2d<F>,
    pub norm: GroupNorm<F>,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<F> {
    conv: ConvCache<F>,
    norm: GroupNormCache<F>,
    out: Tensor<F>,
}

impl<F: Scalar> ConvBlock<F> {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), cin, cout, 3, stride, 1, rng),
            norm: GroupNorm::new(&format!("{name}.gn"), norm_groups(cout), cout),
        }
    }

    fn forward(&self, x: &Tensor<F>) -> (Tensor<F>, ConvBlockCache<F>) {
        let (a, conv) = self.conv.forward(x);
        let (mut y, norm) = self.norm.forward(&a);
        relu_inplace(&mut y);
        (y.clone(), ConvBlockCache { conv, norm, out: y })
    }

    fn backward(&mut self, cache: &ConvBlockCache<F>, mut dy: Tensor<F>) -> Tensor<F> {
        relu_backward(&cache.out, &mut dy);
        let d = self.norm.backward(&cache.norm, &dy);
        self.conv.backward(&cache.conv, &d)
    }
}

impl<F: Scalar> Module<F> for ConvBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.conv.params();
        v.extend(self.norm.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v
    }
}

/// Three stages, each a stride-2 block followed by a stride-1 block.
#[derive(Debug, Clone)]
pub struct ConvStem<F> {
    pub stages: Vec<[ConvBlock<F>; 2]>,
}

/// Skip maps at 1/2, 1/4 and 1/8 of the input side; the last doubles as the
/// deep feature map that gets tokenised in hybrid mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StemOutput<F> {
    pub skips: [Tensor<F>; 3],
}

impl<F: Scalar> StemOutput<F> {
    pub fn deep(&self) -> &Tensor<F> {
        &self.skips[2]
    }
}

#[derive(Debug, Clone)]
pub struct StemCache<F> {
    blocks: Vec<[ConvBlockCache<F>; 2]>,
}

impl<F: Scalar> ConvStem<F> {
    fn new(widths: [usize; 3], rng: &mut ChaCha8Rng) -> Self {
        let mut cin = 1;
        let mut stages = Vec::with_capacity(3);
        for (i, &c) in widths.iter().enumerate() {
            stages.push([
                ConvBlock::new(&format!("stem.{i}.down"), cin, c, 2, rng),
                ConvBlock::new(&format!("stem.{i}.conv"), c, c, 1, rng),
            ]);
            cin = c;
        }
        Self { stages }
    }

    fn forward(&self, x: &Tensor<F>) -> (StemOutput<F>, StemCache<F>) {
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(3);
        let mut blocks = Vec::with_capacity(3);
        for [down, conv] in &self.stages {
            let (a, ca) = down.forward(&h);
            let (b, cb) = conv.forward(&a);
            blocks.push([ca, cb]);
            skips.push(b.clone());
            h = b;
        }
        let skips: [Tensor<F>; 3] = skips.try_into().expect("three stages");
        (StemOutput { skips }, StemCache { blocks })
    }

    /// `d_skips[i]` is the total gradient arriving at stage `i`'s output.
    fn backward(&mut self, cache: &StemCache<F>, d_skips: [Tensor<F>; 3]) {
        let mut carry: Option<Tensor<F>> = None;
        for (i, d) in d_skips.into_iter().enumerate().rev() {
            let mut g = d;
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let [down, conv] = &mut self.stages[i];
            let [ca, cb] = &cache.blocks[i];
            let g = conv.backward(cb, g);
            let g = down.backward(ca, g);
            if i > 0 {
                carry = Some(g);
            }
        }
    }
}

impl<F: Scalar> Module<F> for ConvStem<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.stages.iter().flat_map(|s| s.iter().flat_map(|b| b.params())).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.iter_mut().flat_map(|b| b.params_mut()))
            .collect()
    }
}

/// `N × D` tokens laid out on a `grid.0 × grid.1` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<F> {
    pub tokens: Tensor<F>,
    pub grid: (usize, usize),
}

/// `z₀ = [x¹E; …; xᴺE] + E_pos` over non-overlapping `patch × patch` patches.
#[derive(Debug, Clone)]
pub struct PatchEmbed<F> {
    /// `E`, shape `[C·patch², D]`.
    pub proj: Param<F>,
    /// `E_pos`, shape `[N, D]`.
    pub pos: Param<F>,
    pub patch: usize,
    pub in_channels: usize,
    pub grid: usize,
}

#[derive(Debug, Clone)]
pub struct PatchEmbedCache<F> {
    patches: Vec<F>,
    in_shape: Vec<usize>,
}

impl<F: Scalar> PatchEmbed<F> {
    fn new(in_channels: usize, patch: usize, grid: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            proj: Param::trunc_normal("embed.proj", &[in_channels * patch * patch, dim], 0.02, rng),
            pos: Param::trunc_normal("embed.pos", &[grid * grid, dim], 0.02, rng),
            patch,
            in_channels,
            grid,
        }
    }

    fn dim(&self) -> usize {
        self.proj.shape[1]
    }

    fn patch_dim(&self) -> usize {
        self.proj.shape[0]
    }

    /// Flattens each patch in `(channel, row, col)` order.
    fn patchify(&self, x: &Tensor<F>) -> Vec<F> {
        let (c, h, w) = x.chw();
        let p = self.patch;
        let (gh, gw) = (h / p, w / p);
        let mut out = Vec::with_capacity(gh * gw * c * p * p);
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ch * h * w + (gy * p + dy) * w + gx * p;
                        out.extend_from_slice(&x.data[row..row + p]);
                    }
                }
            }
        }
        out
    }

    fn forward(&self, x: &Tensor<F>) -> Result<(TokenSequence<F>, PatchEmbedCache<F>)> {
        let (c, h, w) = x.chw();
        let p = self.patch;
        if c != self.in_channels {
            return Err(Error::shape("patch_embed channels", self.in_channels, c));
        }
        if h % p != 0 || w % p != 0 {
            return Err(Error::InvalidParam(format!("feature map {h}x{w} not divisible by patch {p}")));
        }
        let (gh, gw) = (h / p, w / p);
        if (gh, gw) != (self.grid, self.grid) {
            return Err(Error::shape("patch_embed token grid", (self.grid, self.grid), (gh, gw)));
        }
        let n = gh * gw;
        let d = self.dim();
        let patches = self.patchify(x);
        let mut tokens = Tensor::from_vec(&[n, d], self.pos.value.clone());
        matmul(n, self.patch_dim(), d, &patches, false, &self.proj.value, false, F::one(), &mut tokens.data);
        Ok((
            TokenSequence { tokens, grid: (gh, gw) },
            PatchEmbedCache {
                patches,
                in_shape: x.shape.clone(),
            },
        ))
    }

    fn backward(&mut self, cache: &PatchEmbedCache<F>, dz: &Tensor<F>) -> Tensor<F> {
        let (n, d) = dz.rc();
        let k = self.patch_dim();
        for (g, &v) in self.pos.grad.iter_mut().zip(&dz.data) {
            *g += v;
        }
        matmul(k, n, d, &cache.patches, true, &dz.data, false, F::one(), &mut self.proj.grad);
        let mut dp = vec![F::zero(); n * k];
        matmul(n, d, k, &dz.data, false, &self.proj.value, true, F::zero(), &mut dp);
        // scatter back, mirroring patchify
        let mut dx = Tensor::zeros(&cache.in_shape);
        let (c, h, w) = dx.chw();
        let p = self.patch;
        let gw = w / p;
        let mut src = dp.chunks(p);
        for t in 0..n {
            let (gy, gx) = (t / gw, t % gw);
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (gy * p + dy) * w + gx * p;
                    dx.data[row..row + p].copy_from_slice(src.next().expect("patch rows"));
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Module<F> for PatchEmbed<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.proj, &self.pos]
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.proj, &mut self.pos]
    }
}

/// `z′ = MHSA(LN(z)) + z;  z = FFN(LN(z′)) + z′` with a GELU MLP.
#[derive(Debug, Clone)]
pub struct EncoderBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct EncoderBlockCache<F> {
    ln1: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    fc1: LinearCache<F>,
    pre_gelu: Tensor<F>,
    fc2: LinearCache<F>,
}

impl<F: Scalar> EncoderBlock<F> {
    fn new(layer: usize, dim: usize, heads: usize, mlp: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = format!("encoder.{layer}");
        Self {
            ln1: LayerNorm::new(&format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(&format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), dim),
            fc1: Linear::new(&format!("{name}.fc1"), dim, mlp, rng),
            fc2: Linear::new(&format!("{name}.fc2"), mlp, dim, rng),
        }
    }

    fn forward(&self, z: &Tensor<F>) -> (Tensor<F>, EncoderBlockCache<F>) {
        let (a, ln1) = self.ln1.forward(z);
        let (m, attn) = self.attn.forward(&a);
        let mut z1 = z.clone();
        z1.add_assign(&m);
        let (b, ln2) = self.ln2.forward(&z1);
        let (pre_gelu, fc1) = self.fc1.forward(&b);
        let g = gelu(&pre_gelu);
        let (o, fc2) = self.fc2.forward(&g);
        z1.add_assign(&o);
        (
            z1,
            EncoderBlockCache {
                ln1,
                attn,
                ln2,
                fc1,
                pre_gelu,
                fc2,
            },
        )
    }

    fn backward(&mut self, cache: &EncoderBlockCache<F>, dz: Tensor<F>) -> Tensor<F> {
        let dg = self.fc2.backward(&cache.fc2, &dz);
        let dh = gelu_backward(&cache.pre_gelu, &dg);
        let db = self.fc1.backward(&cache.fc1, &dh);
        let mut dz1 = dz;
        dz1.add_assign(&self.ln2.backward(&cache.ln2, &db));
        let da = self.attn.backward(&cache.attn, &dz1);
        let mut dz0 = dz1;
        dz0.add_assign(&self.ln1.backward(&cache.ln1, &da));
        dz0
    }
}

impl<F: Scalar> Module<F> for EncoderBlock<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.ln1.params_mut();
        v.extend(self.attn.params_mut());
        v.extend(self.ln2.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }
}

/// Pre-sigmoid head outputs, finest first: `[P1, P2, P3, P4]`.
///
/// P2..P4 are `None` when deep supervision is off.
pub type Logits<F> = [Option<Tensor<F>>; 4];

/// conv_more at 1/16, then four (upsample → concat skip → conv) blocks.
#[derive(Debug, Clone)]
pub struct Decoder<F> {
    pub conv_more: ConvBlock<F>,
    /// Outputs at 1/8, 1/4, 1/2 and full resolution.
    pub blocks: Vec<ConvBlock<F>>,
    /// 1×1 heads for `[P1, P2, P3, P4]`.
    pub heads: Vec<Conv2d<F>>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<F> {
    conv_more: ConvBlockCache<F>,
    blocks: Vec<ConvBlockCache<F>>,
    heads: [Option<ConvCache<F>>; 4],
    /// Channels of the upsampled half of each concat (blocks 0..3).
    up_channels: [usize; 3],
    grid: (usize, usize),
    dim: usize,
}

impl<F: Scalar> Decoder<F> {
    fn new(dim: usize, stem: [usize; 3], widths: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let conv_more = ConvBlock::new("decoder.conv_more", dim, widths[0], 1, rng);
        let skip_ch = [stem[2], stem[1], stem[0], 0];
        let blocks = (0..4)
            .map(|i| ConvBlock::new(&format!("decoder.block{i}"), widths[i] + skip_ch[i], widths[i + 1], 1, rng))
            .collect();
        // head k reads the block at 1/2^k, i.e. block 3 - k
        let heads = (0..4)
            .map(|k| Conv2d::new(&format!("head.p{}", k + 1), widths[4 - k], 1, 1, 1, 0, rng))
            .collect();
        Self {
            conv_more,
            blocks,
            heads,
        }
    }

    fn forward(
        &self,
        tokens: &TokenSequence<F>,
        skips: &[Tensor<F>; 3],
        deep_supervision: bool,
    ) -> Result<(Logits<F>, DecoderCache<F>)> {
        let (n, d) = tokens.tokens.rc();
        let (gh, gw) = tokens.grid;
        if gh * gw != n {
            return Err(Error::shape("decoder token grid", n, gh * gw));
        }
        for (i, s) in skips.iter().enumerate() {
            let factor = 1 << (3 - i);
            let (_, sh, sw) = s.chw();
            if (sh, sw) != (gh * factor, gw * factor) {
                return Err(Error::shape(
                    format!("skip at 1/{}", 2 << i),
                    (gh * factor, gw * factor),
                    (sh, sw),
                ));
            }
        }
        // [N, D] -> [D, gh, gw]
        let mut grid = Tensor::zeros(&[d, gh, gw]);
        for t in 0..n {
            for c in 0..d {
                grid.data[c * n + t] = tokens.tokens.data[t * d + c];
            }
        }
        let (mut x, cm) = self.conv_more.forward(&grid);
        let mut block_caches = Vec::with_capacity(4);
        let mut head_caches: [Option<ConvCache<F>>; 4] = [None, None, None, None];
        let mut logits: Logits<F> = [None, None, None, None];
        let mut up_channels = [0; 3];
        for (i, block) in self.blocks.iter().enumerate() {
            let up = Upsample2x.forward(&x);
            let input = if i < 3 {
                let skip = &skips[2 - i];
                if block.conv.in_channels != up.chw().0 + skip.chw().0 {
                    return Err(Error::shape(
                        format!("decoder block {i} input channels"),
                        block.conv.in_channels,
                        up.chw().0 + skip.chw().0,
                    ));
                }
                up_channels[i] = up.chw().0;
                Concat.forward(&up, skip)
            } else {
                up
            };
            let (y, c) = block.forward(&input);
            block_caches.push(c);
            let k = 3 - i;
            if k == 0 || deep_supervision {
                let (z, hc) = self.heads[k].forward(&y);
                logits[k] = Some(z);
                head_caches[k] = Some(hc);
            }
            x = y;
        }
        Ok((
            logits,
            DecoderCache {
                conv_more: cm,
                blocks: block_caches,
                heads: head_caches,
                up_channels,
                grid: (gh, gw),
                dim: d,
            },
        ))
    }

    /// Returns gradients for the tokens and for the three skips (1/2, 1/4, 1/8).
    fn backward(&mut self, cache: &DecoderCache<F>, dlogits: &Logits<F>) -> (Tensor<F>, [Tensor<F>; 3]) {
        let mut d_skips: [Option<Tensor<F>>; 3] = [None, None, None];
        let mut dx: Option<Tensor<F>> = None;
        for i in (0..4).rev() {
            let k = 3 - i;
            let out_ch = self.blocks[i].conv.out_channels;
            let (oh, ow) = {
                let f = 1 << (i + 1);
                (cache.grid.0 * f, cache.grid.1 * f)
            };
            let mut dy = dx.take().unwrap_or_else(|| Tensor::zeros(&[out_ch, oh, ow]));
            if let (Some(g), Some(hc)) = (&dlogits[k], &cache.heads[k]) {
                dy.add_assign(&self.heads[k].backward(hc, g));
            }
            let dinput = self.blocks[i].backward(&cache.blocks[i], dy);
            let dup = if i < 3 {
                let (du, ds) = Concat.backward(&dinput, cache.up_channels[i]);
                d_skips[2 - i] = Some(ds);
                du
            } else {
                dinput
            };
            dx = Some(Upsample2x.backward(&dup));
        }
        let dgrid = self
            .conv_more
            .backward(&cache.conv_more, dx.expect("four decoder blocks"));
        let (gh, gw) = cache.grid;
        let n = gh * gw;
        let d = cache.dim;
        let mut dtok = Tensor::zeros(&[n, d]);
        for t in 0..n {
            for c in 0..d {
                dtok.data[t * d + c] = dgrid.data[c * n + t];
            }
        }
        let d_skips = d_skips.map(|s| s.expect("skip gradient"));
        (dtok, d_skips)
    }
}

impl<F: Scalar> Module<F> for Decoder<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.conv_more.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        for h in &self.heads {
            v.extend(h.params());
        }
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.conv_more.params_mut();
        for b in self.blocks.iter_mut() {
            v.extend(b.params_mut());
        }
        for h in self.heads.iter_mut() {
            v.extend(h.params_mut());
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MicroSegNet<F> {
    pub config: ModelConfig,
    pub stem: ConvStem<F>,
    pub embed: PatchEmbed<F>,
    pub encoder: Vec<EncoderBlock<F>>,
    pub decoder: Decoder<F>,
}

/// Everything [`MicroSegNet::backward`] needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<F> {
    stem: StemCache<F>,
    embed: PatchEmbedCache<F>,
    encoder: Vec<EncoderBlockCache<F>>,
    decoder: DecoderCache<F>,
}

impl<F: Scalar> MicroSegNet<F> {
    /// Builds a freshly initialised network; all randomness comes from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_w = config.stem_widths();
        let stem = ConvStem::new(stem_w, &mut rng);
        let embed = match config.stem {
            StemMode::Hybrid => PatchEmbed::new(
                stem_w[2],
                config.patch_size / STEM_STRIDE,
                config.grid_side(),
                config.embed_dim,
                &mut rng,
            ),
            StemMode::Pure => PatchEmbed::new(1, config.patch_size, config.grid_side(), config.embed_dim, &mut rng),
        };
        let encoder = (0..config.num_layers)
            .map(|l| EncoderBlock::new(l, config.embed_dim, config.num_heads, config.mlp_dim(), &mut rng))
            .collect();
        let decoder = Decoder::new(config.embed_dim, stem_w, config.decoder_widths(), &mut rng);
        Ok(Self {
            config: config.clone(),
            stem,
            embed,
            encoder,
            decoder,
        })
    }

    /// `[1, H, W]` network input from an image.
    pub fn input_tensor(image: &Image2D) -> Tensor<F> {
        let (h, w) = image.shape();
        Tensor::from_vec(&[1, h, w], image.pixels.iter().map(|&v| F::of(f64::from(v))).collect())
    }

    fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let (c, h, w) = x.chw();
        if c != 1 {
            return Err(Error::shape("network input channels", 1, c));
        }
        let m = self.config.patch_size;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidParam(format!("input {h}x{w} not divisible by {m}")));
        }
        Ok(())
    }

    /// Skips at 1/2, 1/4, 1/8 (the last is also the deep feature map).
    pub fn conv_stem(&self, x: &Tensor<F>) -> Result<StemOutput<F>> {
        self.check_input(x)?;
        Ok(self.stem.forward(x).0)
    }

    /// Tokenises the deep features (hybrid) or the raw image (pure).
    pub fn patch_embed(&self, features: &Tensor<F>) -> Result<TokenSequence<F>> {
        Ok(self.embed.forward(features)?.0)
    }

    pub fn transformer_encoder(&self, z0: &TokenSequence<F>) -> Result<TokenSequence<F>> {
        Ok(self.encode_cached(z0)?.0)
    }

    fn encode_cached(&self, z0: &TokenSequence<F>) -> Result<(TokenSequence<F>, Vec<EncoderBlockCache<F>>)> {
        let (n, d) = z0.tokens.rc();
        if (n, d) != (self.config.num_tokens(), self.config.embed_dim) {
            return Err(Error::shape(
                "encoder tokens",
                (self.config.num_tokens(), self.config.embed_dim),
                (n, d),
            ));
        }
        let mut z = z0.tokens.clone();
        let mut caches = Vec::with_capacity(self.encoder.len());
        for block in &self.encoder {
            let (out, c) = block.forward(&z);
            caches.push(c);
            z = out;
        }
        Ok((TokenSequence { tokens: z, grid: z0.grid }, caches))
    }

    pub fn decode(&self, tokens: &TokenSequence<F>, skips: &[Tensor<F>; 3], deep_supervision: bool) -> Result<Logits<F>> {
        Ok(self.decoder.forward(tokens, skips, deep_supervision)?.0)
    }

    /// Full forward pass keeping everything needed for [`MicroSegNet::backward`].
    pub fn forward_train(&self, x: &Tensor<F>, deep_supervision: bool) -> Result<(Logits<F>, ForwardCache<F>)> {
        self.check_input(x)?;
        let (stem_out, stem) = self.stem.forward(x);
        let source = match self.config.stem {
            StemMode::Hybrid => stem_out.deep(),
            StemMode::Pure => x,
        };
        let (z0, embed) = self.embed.forward(source)?;
        let (z, encoder) = self.encode_cached(&z0)?;
        let (logits, decoder) = self.decoder.forward(&z, &stem_out.skips, deep_supervision)?;
        Ok((
            logits,
            ForwardCache {
                stem,
                embed,
                encoder,
                decoder,
            },
        ))
    }

    pub fn forward_logits(&self, x: &Tensor<F>, deep_supervision: bool) -> Result<Logits<F>> {
        Ok(self.forward_train(x, deep_supervision)?.0)
    }

    /// Sigmoid probabilities, clamped into `(0, 1)`.
    pub fn forward(&self, image: &Image2D, deep_supervision: bool) -> Result<MultiScalePrediction> {
        let logits = self.forward_logits(&Self::input_tensor(image), deep_supervision)?;
        Ok(to_prediction(&logits))
    }

    pub fn forward_batch(&self, images: &[Image2D], deep_supervision: bool) -> Result<Vec<MultiScalePrediction>> {
        images.iter().map(|im| self.forward(im, deep_supervision)).collect()
    }

    /// Accumulates parameter gradients for `∂L/∂logits`; missing scales contribute nothing.
    pub fn backward(&mut self, cache: &ForwardCache<F>, dlogits: &Logits<F>) {
        let (dtok, mut d_skips) = self.decoder.backward(&cache.decoder, dlogits);
        let mut dz = dtok;
        for (block, c) in self.encoder.iter_mut().zip(&cache.encoder).rev() {
            dz = block.backward(c, dz);
        }
        let dsource = self.embed.backward(&cache.embed, &dz);
        if self.config.stem == StemMode::Hybrid {
            d_skips[2].add_assign(&dsource);
        }
        self.stem.backward(&cache.stem, d_skips);
    }

    /// Zeroes the attention and MLP output projections, turning every encoder
    /// block into the identity.
    pub fn zero_encoder_output_projections(&mut self) {
        for b in self.encoder.iter_mut() {
            for p in [
                &mut b.attn.proj.weight,
                &mut b.attn.proj.bias,
                &mut b.fc2.weight,
                &mut b.fc2.bias,
            ] {
                p.value.iter_mut().for_each(|v| *v = F::zero());
            }
        }
    }

    /// Converts parameters to another precision (used for gradient checks).
    pub fn cast<G: Scalar>(&self) -> MicroSegNet<G> {
        let mut out = MicroSegNet::<G>::new(&self.config, 0).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.iter().map(|v| G::of(v.f64())).collect();
        }
        out
    }
}

impl<F: Scalar> Module<F> for MicroSegNet<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.stem.params();
        v.extend(self.embed.params());
        for b in &self.encoder {
            v.extend(b.params());
        }
        v.extend(self.decoder.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.stem.params_mut();
        v.extend(self.embed.params_mut());
        for b in self.encoder.iter_mut() {
            v.extend(b.params_mut());
        }
        v.extend(self.decoder.params_mut());
        v
    }
}

/// Sigmoid of a `[1, H, W]` logit map, computed in `f64` and clamped.
pub fn probability_map<F: Scalar>(logits: &Tensor<F>) -> ProbabilityMap {
    let (_, h, w) = logits.chw();
    ProbabilityMap {
        height: h,
        width: w,
        probs: logits.data.iter().map(|&z| clamp_prob(sigmoid(z.f64()))).collect(),
    }
}

pub fn to_prediction<F: Scalar>(logits: &Logits<F>) -> MultiScalePrediction {
    let [p1, p2, p3, p4] = logits;
    MultiScalePrediction {
        p1: probability_map(p1.as_ref().expect("P1 is always produced")),
        p2: p2.as_ref().map(probability_map),
        p3: p3.as_ref().map(probability_map),
        p4: p4.as_ref().map(probability_map),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use rand::Rng;

    fn micro(stem: StemMode) -> ModelConfig {
        ModelConfig {
            preset_name: "micro".into(),
            input_size: 32,
            patch_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            stem_channels: 2,
            mlp_ratio: 2.0,
            stem,
        }
    }

    fn random_input<F: Scalar>(n: usize, seed: u64) -> Tensor<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[1, n, n], (0..n * n).map(|_| F::of(rng.random::<f64>())).collect())
    }

    #[test]
    fn stem_and_decoder_shapes() {
        let cfg = ModelConfig {
            input_size: 64,
            ..ModelConfig::tiny()
        };
        let m = MicroSegNet::<f32>::new(&cfg, 1).unwrap();
        let out = m.conv_stem(&random_input(64, 0)).unwrap();
        let sides: Vec<usize> = out.skips.iter().map(|s| s.chw().1).collect();
        assert_eq!(sides, vec![32, 16, 8]);
        // the stem is size agnostic; only tokenisation is tied to the config
        let big = m.conv_stem(&random_input(128, 0)).unwrap();
        assert_eq!(big.skips[0].chw().1, 64);
        assert!(m.patch_embed(big.deep()).is_err());
        assert!(m.conv_stem(&random_input(40, 0)).is_err());
    }

    #[test]
    fn deep_supervision_gate() {
        let m = MicroSegNet::<f32>::new(&micro(StemMode::Hybrid), 3).unwrap();
        let l = m.forward_logits(&random_input(32, 1), false).unwrap();
        assert!(l[0].is_some() && l[1..].iter().all(Option::is_none));
        let l = m.forward_logits(&random_input(32, 1), true).unwrap();
        let sides: Vec<usize> = l.iter().map(|t| t.as_ref().unwrap().chw().1).collect();
        assert_eq!(sides, vec![32, 16, 8, 4]);
    }

    #[test]
    fn patch_embed_without_positions_is_a_projection() {
        let mut m = MicroSegNet::<f64>::new(&micro(StemMode::Pure), 5).unwrap();
        m.embed.pos.value.iter_mut().for_each(|v| *v = 0.0);
        let x = random_input::<f64>(32, 2);
        let z = m.patch_embed(&x).unwrap();
        assert_eq!(z.grid, (2, 2));
        // token 3 is the bottom-right 16x16 patch
        let d = 8;
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..16 {
                for c in 0..16 {
                    acc += x.data[(16 + r) * 32 + 16 + c] * m.embed.proj.value[(r * 16 + c) * d + j];
                }
            }
            assert!((z.tokens.data[3 * d + j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for stem in [StemMode::Hybrid, StemMode::Pure] {
            let mut m = MicroSegNet::<f64>::new(&micro(stem), 9).unwrap();
            let x = random_input::<f64>(32, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let probes: Vec<Vec<f64>> = [32usize, 16, 8, 4]
                .iter()
                .map(|&s| (0..s * s).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let objective = |net: &MicroSegNet<f64>| -> f64 {
                let l = net.forward_logits(&x, true).unwrap();
                l.iter()
                    .zip(&probes)
                    .map(|(t, p)| t.as_ref().unwrap().data.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                    .sum()
            };
            let (_, cache) = m.forward_train(&x, true).unwrap();
            let dl: Logits<f64> = std::array::from_fn(|k| {
                let s = 32 >> k;
                Some(Tensor::from_vec(&[1, s, s], probes[k].clone()))
            });
            m.zero_grad();
            m.backward(&cache, &dl);
            check_param_grads(&mut m, objective, 1e-4);
        }
    }
}
