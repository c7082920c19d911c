//! Mirror mask decoder.
//!
//! Learned output tokens (object, IoU, mask tokens and the mirror token) are prepended to the
//! sparse prompt embeddings and decoded against the frequency-enhanced memory with a two-way
//! transformer. The mirror token's output embedding is turned into a per-channel weight vector
//! and dotted with context-contrast features to produce the mask logits.

use candle_core::{Tensor, D};

use crate::error::{shape_err, Result};
use crate::nn::{
    from_tokens, grid_encoding, resize_bilinear, shift2d, sinusoidal_encoding, softmax, to_tokens,
    Attention, Conv2d, Init, LayerNorm, Linear,
};
use crate::prompt::PointPromptSet;

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[B, 2 + N_mask + 1 + N_sparse, D]`.
    pub tokens: Tensor,
    pub mirror_index: usize,
    pub num_sparse: usize,
}

#[derive(Clone, Debug)]
pub struct ContrastFeature {
    /// `[B, C, H, W]`.
    pub values: Tensor,
}

#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `[B, 1, H, W]` at the requested output size.
    pub logits: Tensor,
    /// `h_mirror`, `[B, D]`.
    pub mirror_embedding: Tensor,
    /// `w_mirror`, `[B, C]`.
    pub weight: Tensor,
    /// Cascade-fused contrast feature `[B, C, H', W']`.
    pub context: Tensor,
}

/// Zero-padded `k×k` neighbourhoods of `x − y`, stacked as `[B, k², C, H, W]` in row-major
/// window order.
pub fn unfold_difference(x: &Tensor, y: &Tensor, k: usize) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return shape_err(format!("contrast inputs differ: {:?} vs {:?}", x.dims(), y.dims()));
    }
    if k % 2 == 0 {
        return shape_err(format!("window must be odd, got {k}"));
    }
    x.dims4()?;
    let diff = (x - y)?;
    let r = (k / 2) as isize;
    let mut taps = Vec::with_capacity(k * k);
    for dy in -r..=r {
        for dx in -r..=r {
            taps.push(shift2d(&diff, dy, dx)?);
        }
    }
    Ok(Tensor::stack(&taps, 1)?)
}

/// Local contrast: attention with a learned query over the `k²` difference vectors at each
/// position, followed by a bias-free value projection.
#[derive(Clone, Debug)]
pub struct ContextContrast {
    query: Tensor,
    value: Conv2d,
    window: usize,
}

impl ContextContrast {
    pub fn new(init: &mut Init, name: &str, channels: usize, window: usize) -> Result<Self> {
        let mut init = init.pp(name);
        let bound = 1.0 / (channels as f64).sqrt();
        Ok(Self {
            query: init.uniform("query", channels, bound)?,
            value: Conv2d::new(&mut init, "value", channels, channels, 1, 1, false)?,
            window,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Weights over the window `[B, k², 1, H, W]`.
    pub fn window_weights(&self, unfolded: &Tensor) -> Result<Tensor> {
        let c = unfolded.dim(2)?;
        let q = self.query.reshape((1, 1, c, 1, 1))?;
        let scores = (unfolded.broadcast_mul(&q)?.sum_keepdim(2)? / (c as f64).sqrt())?;
        softmax(&scores, D::Minus(4))
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor) -> Result<ContrastFeature> {
        let unfolded = unfold_difference(x, y, self.window)?;
        let w = self.window_weights(&unfolded)?;
        let mixed = unfolded.broadcast_mul(&w)?.sum(1)?;
        Ok(ContrastFeature {
            values: self.value.forward(&mixed)?,
        })
    }
}

#[derive(Clone, Debug)]
struct TwoWayLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    norm3: LayerNorm,
    cross_image_to_token: Attention,
    norm4: LayerNorm,
}

impl TwoWayLayer {
    fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(init, "self_attn", dim, heads)?,
            norm1: LayerNorm::new(init, "norm1", dim)?,
            cross_token_to_image: Attention::new(init, "t2i", dim, heads)?,
            norm2: LayerNorm::new(init, "norm2", dim)?,
            mlp1: Linear::new(init, "mlp1", dim, 2 * dim, true)?,
            mlp2: Linear::new(init, "mlp2", 2 * dim, dim, true)?,
            norm3: LayerNorm::new(init, "norm3", dim)?,
            cross_image_to_token: Attention::new(init, "i2t", dim, heads)?,
            norm4: LayerNorm::new(init, "norm4", dim)?,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        self_attention: bool,
    ) -> Result<(Tensor, Tensor)> {
        let mut q = queries.clone();
        if self_attention {
            let qp = (&q + query_pe)?;
            q = self.norm1.forward(&(&q + self.self_attn.forward(&qp, &qp, &q)?)?)?;
        }
        let kp = keys.broadcast_add(key_pe)?;
        let attn = self.cross_token_to_image.forward(&(&q + query_pe)?, &kp, keys)?;
        q = self.norm2.forward(&(&q + attn)?)?;
        let mlp = self.mlp2.forward(&self.mlp1.forward(&q)?.relu()?)?;
        q = self.norm3.forward(&(&q + mlp)?)?;
        let attn = self.cross_image_to_token.forward(&kp, &(&q + query_pe)?, &q)?;
        let k = self.norm4.forward(&(keys + attn)?)?;
        Ok((q, k))
    }
}

#[derive(Clone, Debug)]
pub struct MirrorDecoder {
    dim: usize,
    num_mask_tokens: usize,
    output_tokens: Tensor,
    foreground: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_norm: LayerNorm,
    contrast_low: ContextContrast,
    contrast_high: ContextContrast,
    y_low: Conv2d,
    y_high: Conv2d,
    cascade_proj: Conv2d,
    cascade_conv: Conv2d,
    mirror_mlp: [Linear; 3],
    self_attention: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderDims {
    pub c_low: usize,
    pub c_high: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_mask_tokens: usize,
    pub rounds: usize,
    pub window: usize,
}

impl MirrorDecoder {
    pub fn new(init: &mut Init, dims: DecoderDims) -> Result<Self> {
        let DecoderDims {
            c_low,
            c_high,
            dim,
            heads,
            num_mask_tokens,
            rounds,
            window,
        } = dims;
        if dim % 4 != 0 || dim % heads != 0 {
            return Err(crate::Error::Config(format!(
                "decoder width {dim} must be divisible by 4 and by {heads} heads"
            )));
        }
        let layers = (0..rounds)
            .map(|i| TwoWayLayer::new(&mut init.pp(&format!("layer{i}")), dim, heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            num_mask_tokens,
            output_tokens: init.uniform("output_tokens", (num_mask_tokens + 3, dim), 1.0)?,
            foreground: init.uniform("foreground", dim, 1.0)?,
            layers,
            final_attn: Attention::new(init, "final_attn", dim, heads)?,
            final_norm: LayerNorm::new(init, "final_norm", dim)?,
            contrast_low: ContextContrast::new(init, "contrast_low", c_low, window)?,
            contrast_high: ContextContrast::new(init, "contrast_high", c_high, window)?,
            y_low: Conv2d::new(init, "y_low", dim, c_low, 1, 1, true)?,
            y_high: Conv2d::new(init, "y_high", dim, c_high, 1, 1, true)?,
            cascade_proj: Conv2d::new(init, "cascade_proj", c_high, c_low, 1, 1, true)?,
            cascade_conv: Conv2d::new(init, "cascade_conv", c_low, c_low, 3, 1, true)?,
            mirror_mlp: [
                Linear::new(init, "mirror_mlp0", dim, dim, true)?,
                Linear::new(init, "mirror_mlp1", dim, dim, true)?,
                Linear::new(init, "mirror_mlp2", dim, c_low, true)?,
            ],
            self_attention: true,
        })
    }

    /// Replaces the token self-attention of every round with the identity.
    #[doc(hidden)]
    pub fn without_self_attention(mut self) -> Self {
        self.self_attention = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mirror_index(&self) -> usize {
        2 + self.num_mask_tokens
    }

    /// Sinusoidal encoding of each point plus the learned foreground embedding, `[B, N, D]`.
    pub fn embed_prompts(&self, prompts: &[PointPromptSet]) -> Result<Tensor> {
        let Some(first) = prompts.first() else {
            return shape_err("no prompt sets given");
        };
        let n = first.len();
        if prompts.iter().any(|p| p.len() != n) {
            return shape_err("prompt sets in a batch must have equal length");
        }
        let dev = self.foreground.device();
        let coords: Vec<(f64, f64)> = prompts.iter().flat_map(|p| p.coords.iter().copied()).collect();
        let pe = Tensor::from_vec(sinusoidal_encoding(&coords, self.dim), (prompts.len(), n, self.dim), dev)?
            .to_dtype(self.foreground.dtype())?;
        Ok(pe.broadcast_add(&self.foreground)?)
    }

    pub fn assemble_tokens(&self, sparse: &Tensor) -> Result<TokenSequence> {
        let (b, n, d) = sparse.dims3()?;
        if d != self.dim {
            return shape_err(format!("sparse embeddings have width {d}, decoder expects {}", self.dim));
        }
        let learned = self.output_tokens.unsqueeze(0)?.broadcast_as((b, self.num_mask_tokens + 3, d))?;
        // stored as [obj, iou, mask.., mirror]
        let tokens = if n == 0 {
            learned.contiguous()?
        } else {
            Tensor::cat(&[&learned, sparse], 1)?
        };
        Ok(TokenSequence {
            tokens,
            mirror_index: self.mirror_index(),
            num_sparse: n,
        })
    }

    /// Two-way decoding against `f_src` `[B, D, H, W]`. Returns all output tokens and `h_mirror`.
    pub fn decode_tokens(&self, seq: &TokenSequence, f_src: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, d, h, w) = f_src.dims4()?;
        let (bt, _, dt) = seq.tokens.dims3()?;
        if d != self.dim || dt != self.dim || b != bt {
            return shape_err(format!(
                "decoder width/batch mismatch: tokens {:?}, source {:?}",
                seq.tokens.dims(),
                f_src.dims()
            ));
        }
        let key_pe = grid_encoding(h, w, d, f_src.dtype(), f_src.device())?;
        let query_pe = seq.tokens.clone();
        let mut queries = seq.tokens.clone();
        let mut keys = to_tokens(f_src)?;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, &query_pe, &key_pe, self.self_attention)?;
        }
        let kp = keys.broadcast_add(&key_pe)?;
        let attn = self.final_attn.forward(&(&queries + &query_pe)?, &kp, &keys)?;
        let out = self.final_norm.forward(&(queries + attn)?)?;
        let h_mirror = out.narrow(1, seq.mirror_index, 1)?.squeeze(1)?;
        Ok((out, h_mirror))
    }

    pub fn contrast_low(&self) -> &ContextContrast {
        &self.contrast_low
    }

    pub fn contrast_high(&self) -> &ContextContrast {
        &self.contrast_high
    }

    /// Context contrast at both levels. `f_hat` is the enhanced memory on the high grid.
    pub fn contrast_features(
        &self,
        fused_low: &Tensor,
        fused_high: &Tensor,
        freq_map: &Tensor,
        f_hat: &Tensor,
    ) -> Result<(ContrastFeature, ContrastFeature)> {
        let (_, _, hl, wl) = fused_low.dims4()?;
        let x_low = fused_low.broadcast_mul(freq_map)?;
        let y_low = resize_bilinear(&self.y_low.forward(f_hat)?, hl, wl)?;
        let low = self.contrast_low.forward(&x_low, &y_low)?;
        let high = self.contrast_high.forward(fused_high, &self.y_high.forward(f_hat)?)?;
        Ok((low, high))
    }

    pub fn cascade(&self, low: &ContrastFeature, high: &ContrastFeature) -> Result<Tensor> {
        let (_, _, h, w) = low.values.dims4()?;
        let up = resize_bilinear(&self.cascade_proj.forward(&high.values)?, h, w)?;
        self.cascade_conv.forward(&(&low.values + up)?)
    }

    pub fn mirror_weight(&self, h_mirror: &Tensor) -> Result<Tensor> {
        let x = self.mirror_mlp[0].forward(h_mirror)?.relu()?;
        let x = self.mirror_mlp[1].forward(&x)?.relu()?;
        self.mirror_mlp[2].forward(&x)
    }

    pub fn predict_mirror_mask(
        &self,
        h_mirror: &Tensor,
        ctx_low: &ContrastFeature,
        ctx_high: &ContrastFeature,
        out_h: usize,
        out_w: usize,
    ) -> Result<MaskPrediction> {
        let context = self.cascade(ctx_low, ctx_high)?;
        let weight = self.mirror_weight(h_mirror)?;
        let logits = resize_bilinear(&mask_logits(&weight, &context)?, out_h, out_w)?;
        Ok(MaskPrediction {
            logits,
            mirror_embedding: h_mirror.clone(),
            weight,
            context,
        })
    }

    /// Full decoder. `memory` is the enhanced memory `[B, N₂, D]` on the `fused_high` grid.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        prompts: &[PointPromptSet],
        memory: &Tensor,
        fused_low: &Tensor,
        fused_high: &Tensor,
        freq_map: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<MaskPrediction> {
        let (_, _, hh, wh) = fused_high.dims4()?;
        let f_hat = from_tokens(memory, hh, wh)?;
        let seq = self.assemble_tokens(&self.embed_prompts(prompts)?)?;
        let (_, h_mirror) = self.decode_tokens(&seq, &f_hat)?;
        let (low, high) = self.contrast_features(fused_low, fused_high, freq_map, &f_hat)?;
        self.predict_mirror_mask(&h_mirror, &low, &high, out_h, out_w)
    }
}

/// `logits[b, 0, h, w] = Σ_c weight[b, c] · context[b, c, h, w]`.
pub fn mask_logits(weight: &Tensor, context: &Tensor) -> Result<Tensor> {
    let (b, c, _, _) = context.dims4()?;
    if weight.dims() != [b, c] {
        return shape_err(format!("mirror weight {:?} does not match context {:?}", weight.dims(), context.dims()));
    }
    Ok(context.broadcast_mul(&weight.reshape((b, c, 1, 1))?)?.sum_keepdim(1)?)
}
