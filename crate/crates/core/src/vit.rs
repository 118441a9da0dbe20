//! Vision transformer backbone (timm layout) with LoRA on the attention
//! projections.
//!
//! Layout per block: `x += ls1 ∘ attn(norm1(x))`, `x += ls2 ∘ mlp(norm2(x))`.
//! Query/key/value are held as separate projections; fused `qkv` weights are
//! split row-wise on load. Token order is `[cls, registers…, patches…]`.
//!
//! Backpropagation is hand-written and only goes as deep as the earliest
//! adapted block: base weights never receive gradients, so the frozen layers
//! only have to pass input gradients through.

use ndarray::{s, concatenate, Array1, Array2, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraCache, LoraGrads, LoraLayerState, Target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `fc2(gelu(fc1(x)))`, exact erf GELU.
    Gelu,
    /// Packed SwiGLU: `fc1` yields `[x1 | x2]`, output `fc2(silu(x1) ∘ x2)`.
    SwiGlu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Cls,
    /// CLS token concatenated with the mean of the patch tokens.
    ClsPlusMeanPatch,
}

impl FeatureMode {
    pub fn feature_dim(self, embed_dim: usize) -> usize {
        match self {
            FeatureMode::Cls => embed_dim,
            FeatureMode::ClsPlusMeanPatch => 2 * embed_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// Width of `fc1`'s output (twice the gated width for SwiGLU).
    pub mlp_hidden: usize,
    pub mlp: MlpKind,
    pub layer_scale: bool,
    pub reg_tokens: usize,
    /// Whether the position embedding also covers the cls/register tokens.
    pub pos_embed_prefix: bool,
    pub ln_eps: f32,
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn num_prefix(&self) -> usize {
        1 + self.reg_tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.num_prefix() + self.num_patches()
    }

    pub fn pos_len(&self) -> usize {
        if self.pos_embed_prefix {
            self.num_tokens()
        } else {
            self.num_patches()
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.embed_dim == 0 || self.depth == 0 || self.num_heads == 0 {
            return bad("embed_dim, depth and num_heads must be positive");
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad("embed_dim must be divisible by num_heads");
        }
        if self.mlp == MlpKind::SwiGlu && self.mlp_hidden % 2 != 0 {
            return bad("SwiGLU hidden width must be even");
        }
        Ok(())
    }
}

/// Frozen linear layer; `w` is `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f32>,
    pub b: Option<Array1<f32>>,
}

impl Dense {
    fn forward(&self, x: ArrayView2<f32>) -> Array2<f32> {
        lora::linear(x, self.w.view(), self.b.as_ref().map(|b| b.view()))
    }

    fn backward_input(&self, dy: ArrayView2<f32>) -> Array2<f32> {
        dy.dot(&self.w)
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, |b| b.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub eps: f32,
}

struct NormCache {
    xhat: Array2<f32>,
    rstd: Array1<f32>,
}

impl LayerNorm {
    fn ones(d: usize, eps: f32) -> Self {
        Self {
            gamma: Array1::ones(d),
            beta: Array1::zeros(d),
            eps,
        }
    }

    fn forward(&self, x: ArrayView2<f32>) -> (Array2<f32>, NormCache) {
        let d = x.ncols() as f32;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.outer_iter_mut().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f32>() / d;
            *r = 1.0 / (var + self.eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, rstd })
    }

    fn backward(&self, dy: ArrayView2<f32>, cache: &NormCache) -> Array2<f32> {
        let d = dy.ncols() as f32;
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.dim());
        for (((mut out, g), xh), &r) in dx
            .outer_iter_mut()
            .zip(dxhat.outer_iter())
            .zip(cache.xhat.outer_iter())
            .zip(&cache.rstd)
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            for ((o, &gi), &xi) in out.iter_mut().zip(&g).zip(&xh) {
                *o = r * (gi - mean_g - xi * mean_gx);
            }
        }
        dx
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub proj: Dense,
    pub ls1: Option<Array1<f32>>,
    pub norm2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
    pub ls2: Option<Array1<f32>>,
}

impl Block {
    pub fn projection(&self, t: Target) -> &Dense {
        match t {
            Target::Query => &self.q,
            Target::Key => &self.k,
            Target::Value => &self.v,
        }
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params()
            + self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
            + self.proj.num_params()
            + self.ls1.as_ref().map_or(0, |g| g.len())
            + self.norm2.num_params()
            + self.fc1.num_params()
            + self.fc2.num_params()
            + self.ls2.as_ref().map_or(0, |g| g.len())
    }
}

/// LoRA adapters of one block, by target projection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockAdapters {
    pub q: Option<LoraLayerState<f32>>,
    pub k: Option<LoraLayerState<f32>>,
    pub v: Option<LoraLayerState<f32>>,
}

impl BlockAdapters {
    pub fn get(&self, t: Target) -> Option<&LoraLayerState<f32>> {
        match t {
            Target::Query => self.q.as_ref(),
            Target::Key => self.k.as_ref(),
            Target::Value => self.v.as_ref(),
        }
    }

    pub fn get_mut(&mut self, t: Target) -> Option<&mut LoraLayerState<f32>> {
        match t {
            Target::Query => self.q.as_mut(),
            Target::Key => self.k.as_mut(),
            Target::Value => self.v.as_mut(),
        }
    }

    pub fn set(&mut self, t: Target, s: Option<LoraLayerState<f32>>) {
        match t {
            Target::Query => self.q = s,
            Target::Key => self.k = s,
            Target::Value => self.v = s,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_none() && self.k.is_none() && self.v.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockAdapterGrads {
    pub q: Option<LoraGrads<f32>>,
    pub k: Option<LoraGrads<f32>>,
    pub v: Option<LoraGrads<f32>>,
}

impl BlockAdapterGrads {
    pub fn get(&self, t: Target) -> Option<&LoraGrads<f32>> {
        match t {
            Target::Query => self.q.as_ref(),
            Target::Key => self.k.as_ref(),
            Target::Value => self.v.as_ref(),
        }
    }

    fn set(&mut self, t: Target, g: Option<LoraGrads<f32>>) {
        match t {
            Target::Query => self.q = g,
            Target::Key => self.k = g,
            Target::Value => self.v = g,
        }
    }
}

/// Dropout randomness for adapter inputs; `None` means eval mode.
pub type TrainRng<'a> = Option<&'a mut dyn rand::RngCore>;

#[derive(Clone, Debug, PartialEq)]
pub struct VitBackbone {
    pub cfg: VitConfig,
    /// `embed_dim × (in_chans·patch²)`, columns ordered channel-major like a
    /// flattened conv kernel.
    pub patch_embed: Dense,
    pub cls_token: Array1<f32>,
    pub reg_tokens: Array2<f32>,
    pub pos_embed: Array2<f32>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

enum Projection {
    Plain,
    Adapted(LoraCache<f32>),
}

struct BlockCache {
    norm1: NormCache,
    h1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    proj_in: [Projection; 3],
    /// softmax attention weights, one `T × T` matrix per head
    attn: Vec<Array2<f32>>,
    /// pre-layer-scale outputs (needed only for shapes here)
    norm2: NormCache,
    fc1_out: Array2<f32>,
}

/// Everything a backward pass needs from one sample's forward pass.
pub struct ForwardCache {
    blocks: Vec<Option<BlockCache>>,
    final_norm: NormCache,
    feature: Array1<f32>,
}

impl ForwardCache {
    pub fn feature(&self) -> &Array1<f32> {
        &self.feature
    }
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() * 0.398_942_3;
    cdf + x * pdf
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_rows(m: &mut Array2<f32>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl VitBackbone {
    /// Seeded random weights: LeCun-normal linears, unit norms, small
    /// token/position embeddings.
    pub fn random<R: Rng + ?Sized>(cfg: VitConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let mut dense = |out: usize, inp: usize| Dense {
            w: {
                let n = Normal::new(0.0f32, (1.0 / inp as f32).sqrt()).unwrap();
                Array2::from_shape_simple_fn((out, inp), || n.sample(rng))
            },
            b: Some(Array1::zeros(out)),
        };
        let patch_embed = dense(d, cfg.patch_dim());
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let gated = match cfg.mlp {
                MlpKind::Gelu => cfg.mlp_hidden,
                MlpKind::SwiGlu => cfg.mlp_hidden / 2,
            };
            blocks.push(Block {
                norm1: LayerNorm::ones(d, cfg.ln_eps),
                q: dense(d, d),
                k: dense(d, d),
                v: dense(d, d),
                proj: dense(d, d),
                ls1: cfg.layer_scale.then(|| Array1::from_elem(d, 0.1)),
                norm2: LayerNorm::ones(d, cfg.ln_eps),
                fc1: dense(cfg.mlp_hidden, d),
                fc2: dense(d, gated),
                ls2: cfg.layer_scale.then(|| Array1::from_elem(d, 0.1)),
            });
        }
        let small = Normal::new(0.0f32, 0.02).unwrap();
        let cls_token = Array1::from_shape_simple_fn(d, || small.sample(rng));
        let reg_tokens = Array2::from_shape_simple_fn((cfg.reg_tokens, d), || small.sample(rng));
        let pos_embed = Array2::from_shape_simple_fn((cfg.pos_len(), d), || small.sample(rng));
        let norm = LayerNorm::ones(d, cfg.ln_eps);
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            reg_tokens,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn num_params(&self) -> usize {
        self.patch_embed.num_params()
            + self.cls_token.len()
            + self.reg_tokens.len()
            + self.pos_embed.len()
            + self.blocks.iter().map(Block::num_params).sum::<usize>()
            + self.norm.num_params()
    }

    /// Checks internal shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let c = &self.cfg;
        let d = c.embed_dim;
        let expect = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::Weights(format!("{what}: shape {got:?}, expected {want:?}")))
            }
        };
        expect("patch_embed", self.patch_embed.w.dim(), (d, c.patch_dim()))?;
        expect("cls_token", (1, self.cls_token.len()), (1, d))?;
        expect("reg_token", self.reg_tokens.dim(), (c.reg_tokens, d))?;
        expect("pos_embed", self.pos_embed.dim(), (c.pos_len(), d))?;
        if self.blocks.len() != c.depth {
            return Err(Error::Weights(format!("{} blocks, expected {}", self.blocks.len(), c.depth)));
        }
        let gated = match c.mlp {
            MlpKind::Gelu => c.mlp_hidden,
            MlpKind::SwiGlu => c.mlp_hidden / 2,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, layer) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("proj", &b.proj)] {
                expect(&format!("blocks.{i}.{name}"), layer.w.dim(), (d, d))?;
            }
            expect(&format!("blocks.{i}.fc1"), b.fc1.w.dim(), (c.mlp_hidden, d))?;
            expect(&format!("blocks.{i}.fc2"), b.fc2.w.dim(), (d, gated))?;
        }
        Ok(())
    }

    /// Splits a `C × H × W` image into rows of flattened patches.
    fn patchify(&self, img: ArrayView3<f32>) -> Result<Array2<f32>> {
        let c = &self.cfg;
        let (ch, h, w) = img.dim();
        if (ch, h, w) != (c.in_chans, c.image_size, c.image_size) {
            return Err(Error::Shape(format!(
                "input is {ch}×{h}×{w}, backbone expects {}×{}×{}",
                c.in_chans, c.image_size, c.image_size
            )));
        }
        let p = c.patch_size;
        let g = c.grid();
        let mut out = Array2::zeros((g * g, c.patch_dim()));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(gy * g + gx);
                let mut j = 0;
                for cc in 0..ch {
                    for py in 0..p {
                        for px in 0..p {
                            row[j] = img[[cc, gy * p + py, gx * p + px]];
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed(&self, img: ArrayView3<f32>) -> Result<Array2<f32>> {
        let mut patches = self.patch_embed.forward(self.patchify(img)?.view());
        let c = &self.cfg;
        if !c.pos_embed_prefix {
            patches += &self.pos_embed;
        }
        let cls = self.cls_token.view().insert_axis(Axis(0));
        let mut tokens = concatenate(Axis(0), &[cls, self.reg_tokens.view(), patches.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        if c.pos_embed_prefix {
            tokens += &self.pos_embed;
        }
        Ok(tokens)
    }

    fn block_forward(
        &self,
        index: usize,
        x: &mut Array2<f32>,
        adapters: &BlockAdapters,
        rng: &mut TrainRng<'_>,
        record: bool,
    ) -> Result<Option<BlockCache>> {
        let blk = &self.blocks[index];
        let c = &self.cfg;
        let (h1, norm1) = blk.norm1.forward(x.view());

        let mut outs: Vec<Array2<f32>> = Vec::with_capacity(3);
        let mut proj_in: Vec<Projection> = Vec::with_capacity(3);
        for t in Target::ALL {
            let dense = blk.projection(t);
            match adapters.get(t) {
                Some(state) => {
                    let bias = dense.b.as_ref().map(|b| b.view());
                    let (y, cache) = match rng {
                        Some(r) => lora::adapted_forward_cached(h1.view(), dense.w.view(), bias, state, true, &mut **r)?,
                        None => lora::adapted_forward_cached(
                            h1.view(),
                            dense.w.view(),
                            bias,
                            state,
                            false,
                            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
                        )?,
                    };
                    outs.push(y);
                    proj_in.push(Projection::Adapted(cache));
                }
                None => {
                    outs.push(dense.forward(h1.view()));
                    proj_in.push(Projection::Plain);
                }
            }
        }
        let v = outs.pop().unwrap();
        let k = outs.pop().unwrap();
        let q = outs.pop().unwrap();

        let dh = c.head_dim();
        let scale = (dh as f32).powf(-0.5);
        let mut context = Array2::zeros(q.dim());
        let mut attn = Vec::with_capacity(if record { c.num_heads } else { 0 });
        for h in 0..c.num_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores *= scale;
            softmax_rows(&mut scores);
            context.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            if record {
                attn.push(scores);
            }
        }
        let mut a = blk.proj.forward(context.view());
        if let Some(g) = &blk.ls1 {
            a *= g;
        }
        *x += &a;

        let (h2, norm2) = blk.norm2.forward(x.view());
        let f = blk.fc1.forward(h2.view());
        let act = match c.mlp {
            MlpKind::Gelu => f.mapv(gelu),
            MlpKind::SwiGlu => {
                let half = f.ncols() / 2;
                let x1 = f.slice(s![.., ..half]);
                let x2 = f.slice(s![.., half..]);
                ndarray::Zip::from(&x1).and(&x2).map_collect(|&a, &b| a * sigmoid(a) * b)
            }
        };
        let mut m = blk.fc2.forward(act.view());
        if let Some(g) = &blk.ls2 {
            m *= g;
        }
        *x += &m;

        if !record {
            return Ok(None);
        }
        let [pq, pk, pv]: [Projection; 3] = proj_in.try_into().ok().unwrap();
        Ok(Some(BlockCache {
            norm1,
            h1,
            q,
            k,
            v,
            proj_in: [pq, pk, pv],
            attn,
            norm2,
            fc1_out: f,
        }))
    }

    /// Returns `dx` at the block input and the adapter gradients.
    fn block_backward(
        &self,
        index: usize,
        dx_out: Array2<f32>,
        adapters: &BlockAdapters,
        cache: &BlockCache,
    ) -> (Array2<f32>, BlockAdapterGrads) {
        let blk = &self.blocks[index];
        let c = &self.cfg;
        let mut dx = dx_out;

        // MLP branch
        let mut dm = dx.clone();
        if let Some(g) = &blk.ls2 {
            dm *= g;
        }
        let dact = blk.fc2.backward_input(dm.view());
        let df = match c.mlp {
            MlpKind::Gelu => {
                ndarray::Zip::from(&dact).and(&cache.fc1_out).map_collect(|&g, &z| g * gelu_grad(z))
            }
            MlpKind::SwiGlu => {
                let half = cache.fc1_out.ncols() / 2;
                let x1 = cache.fc1_out.slice(s![.., ..half]);
                let x2 = cache.fc1_out.slice(s![.., half..]);
                let mut df = Array2::zeros(cache.fc1_out.dim());
                ndarray::Zip::from(df.slice_mut(s![.., ..half]))
                    .and(&dact)
                    .and(&x1)
                    .and(&x2)
                    .for_each(|o, &g, &a, &b| {
                        let sg = sigmoid(a);
                        *o = g * b * sg * (1.0 + a * (1.0 - sg));
                    });
                ndarray::Zip::from(df.slice_mut(s![.., half..]))
                    .and(&dact)
                    .and(&x1)
                    .for_each(|o, &g, &a| *o = g * a * sigmoid(a));
                df
            }
        };
        let dh2 = blk.fc1.backward_input(df.view());
        dx += &blk.norm2.backward(dh2.view(), &cache.norm2);

        // attention branch
        let mut da = dx.clone();
        if let Some(g) = &blk.ls1 {
            da *= g;
        }
        let dcontext = blk.proj.backward_input(da.view());
        let dh = c.head_dim();
        let scale = (dh as f32).powf(-0.5);
        let mut dq = Array2::zeros(cache.q.dim());
        let mut dk = Array2::zeros(cache.k.dim());
        let mut dv = Array2::zeros(cache.v.dim());
        for (h, p) in cache.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dout = dcontext.slice(cols);
            let dp = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dout));
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.outer_iter_mut().zip(p.outer_iter()) {
                let dot = ds_row.dot(&p_row);
                ndarray::Zip::from(&mut ds_row).and(&p_row).for_each(|d, &pv| *d = pv * (*d - dot));
            }
            ds *= scale;
            dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
        }

        let mut grads = BlockAdapterGrads::default();
        let mut dh1 = Array2::<f32>::zeros(cache.h1.dim());
        for (t, dy) in Target::ALL.into_iter().zip([dq, dk, dv]) {
            let dense = blk.projection(t);
            match (&cache.proj_in[t as usize], adapters.get(t)) {
                (Projection::Adapted(lc), Some(state)) => {
                    let (dxi, g) = lora::adapted_backward(dy.view(), dense.w.view(), state, lc);
                    dh1 += &dxi;
                    grads.set(t, Some(g));
                }
                _ => dh1 += &dense.backward_input(dy.view()),
            }
        }
        dx += &blk.norm1.backward(dh1.view(), &cache.norm1);
        (dx, grads)
    }

    fn pool(&self, normed: &Array2<f32>, mode: FeatureMode) -> Array1<f32> {
        let cls = normed.row(0).to_owned();
        match mode {
            FeatureMode::Cls => cls,
            FeatureMode::ClsPlusMeanPatch => {
                let patches = normed.slice(s![self.cfg.num_prefix().., ..]);
                let mean = patches.mean_axis(Axis(0)).expect("at least one patch");
                concatenate(Axis(0), &[cls.view(), mean.view()]).expect("same rank")
            }
        }
    }

    /// Pooled feature vector of one `C × H × W` image. With `rng` set, adapter
    /// dropout is active; with `record`, a cache for [`Self::backward`] is
    /// returned.
    pub fn forward_features(
        &self,
        img: ArrayView3<f32>,
        adapters: &[BlockAdapters],
        mode: FeatureMode,
        mut rng: TrainRng<'_>,
        record: bool,
    ) -> Result<(Array1<f32>, Option<ForwardCache>)> {
        if adapters.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "{} adapter slots for {} blocks",
                adapters.len(),
                self.blocks.len()
            )));
        }
        let mut x = self.embed(img)?;
        let first = first_adapted(adapters);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, ad) in adapters.iter().enumerate() {
            let keep = record && first.is_some_and(|f| i >= f);
            caches.push(self.block_forward(i, &mut x, ad, &mut rng, keep)?);
        }
        let (normed, final_norm) = self.norm.forward(x.view());
        let feature = self.pool(&normed, mode);
        let cache = record.then(|| ForwardCache {
            blocks: caches,
            final_norm,
            feature: feature.clone(),
        });
        Ok((feature, cache))
    }

    /// Backpropagates `d_feature` down to the earliest adapted block and
    /// returns per-block adapter gradients.
    pub fn backward(
        &self,
        d_feature: &Array1<f32>,
        adapters: &[BlockAdapters],
        mode: FeatureMode,
        cache: &ForwardCache,
    ) -> Vec<BlockAdapterGrads> {
        let d = self.cfg.embed_dim;
        let t = self.cfg.num_tokens();
        let mut dnormed = Array2::zeros((t, d));
        dnormed.row_mut(0).assign(&d_feature.slice(s![..d]));
        if mode == FeatureMode::ClsPlusMeanPatch {
            let share = d_feature.slice(s![d..]).mapv(|g| g / self.cfg.num_patches() as f32);
            for mut row in dnormed.slice_mut(s![self.cfg.num_prefix().., ..]).outer_iter_mut() {
                row.assign(&share);
            }
        }
        let mut dx = self.norm.backward(dnormed.view(), &cache.final_norm);
        let mut grads = vec![BlockAdapterGrads::default(); self.blocks.len()];
        let Some(first) = first_adapted(adapters) else {
            return grads;
        };
        for i in (first..self.blocks.len()).rev() {
            let bc = cache.blocks[i].as_ref().expect("block cache recorded");
            let (next, g) = self.block_backward(i, dx, &adapters[i], bc);
            grads[i] = g;
            dx = next;
        }
        grads
    }
}

fn first_adapted(adapters: &[BlockAdapters]) -> Option<usize> {
    adapters.iter().position(|a| !a.is_empty())
}
