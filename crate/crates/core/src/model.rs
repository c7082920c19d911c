//! The assembled segmentation network.

use candle_core::{DType, Tensor};

use crate::backbone::{Backbone, Stream, STRIDE};
use crate::config::RunConfig;
use crate::data::VideoClip;
use crate::decoder::{DecoderDims, MirrorDecoder};
use crate::error::{shape_err, Result};
use crate::fdaf::Fdaf;
use crate::nn::{resize_bilinear, ParamStore};
use crate::prompt::{select_points_batch, PointPromptSet, PromptGenerator, ResponseMap};
use crate::warping::{DepthWarping, WarpOutputs};

/// Everything produced for one frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    /// `[B, 1, H, W]` at the input size.
    pub logits: Tensor,
    /// Intermediate prediction logits `[B, 1, H/4, W/4]`.
    pub inter_logits: Tensor,
    pub freq_map: Tensor,
    /// Response map upsampled to the input size; prompts are picked on this grid.
    pub response: ResponseMap,
    pub prompts: Vec<PointPromptSet>,
}

pub struct MirrorSegModel {
    store: ParamStore,
    cfg: RunConfig,
    backbone: Backbone,
    warping: Option<DepthWarping>,
    prompt: PromptGenerator,
    fdaf: Fdaf,
    decoder: MirrorDecoder,
}

impl MirrorSegModel {
    /// Builds the network; parameters are drawn from `cfg.seed`.
    pub fn new(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, cfg.seed);
        let mut root = store.root();
        let backbone = Backbone::new(&mut root.pp("backbone"), cfg.c_low, cfg.c_high)?;
        let warping = if cfg.ablate_depth_warping {
            None
        } else {
            Some(DepthWarping::new(
                &mut root.pp("warping"),
                cfg.c_low,
                cfg.c_high,
                cfg.radius_low,
                cfg.radius_high,
            )?)
        };
        let prompt = PromptGenerator::new(&mut root.pp("prompt"), cfg.c_low, cfg.c_high)?;
        let fdaf = Fdaf::new(&mut root.pp("fdaf"), cfg.c_low, cfg.c_high, cfg.memory_dim, cfg.heads)?;
        let decoder = MirrorDecoder::new(
            &mut root.pp("decoder"),
            DecoderDims {
                c_low: cfg.c_low,
                c_high: cfg.c_high,
                dim: cfg.decoder_dim,
                heads: cfg.heads,
                num_mask_tokens: cfg.num_mask_tokens,
                rounds: cfg.rounds,
                window: cfg.contrast_window,
            },
        )?;
        Ok(Self {
            store,
            cfg: cfg.clone(),
            backbone,
            warping,
            prompt,
            fdaf,
            decoder,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn warping(&self) -> Option<&DepthWarping> {
        self.warping.as_ref()
    }

    pub fn prompt_generator(&self) -> &PromptGenerator {
        &self.prompt
    }

    pub fn fdaf(&self) -> &Fdaf {
        &self.fdaf
    }

    pub fn decoder(&self) -> &MirrorDecoder {
        &self.decoder
    }

    fn warp(&self, level: usize, f_img: &Tensor, f_depth: &Tensor) -> Result<WarpOutputs> {
        match &self.warping {
            Some(w) => {
                let lvl = if level == 0 { &w.low } else { &w.high };
                lvl.forward(f_img, f_depth)
            }
            None => Ok(WarpOutputs {
                refined_depth: f_depth.clone(),
                fused: f_img.clone(),
                refined_img: f_img.clone(),
            }),
        }
    }

    /// Runs one frame: `rgb` `[B, 3, H, W]`, `depth` `[B, 1, H, W]`.
    pub fn forward_frame(&self, rgb: &Tensor, depth: &Tensor) -> Result<FrameOutput> {
        let (b, _, h, w) = rgb.dims4()?;
        let (bd, cd, hd, wd) = depth.dims4()?;
        if (bd, cd, hd, wd) != (b, 1, h, w) {
            return shape_err(format!("depth {:?} does not match rgb {:?}", depth.dims(), rgb.dims()));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return shape_err(format!("input {h}x{w} is not divisible by {STRIDE}"));
        }
        let fi = self.backbone.extract_features(rgb, Stream::Rgb)?;
        let fd = self.backbone.extract_features(depth, Stream::Depth)?;
        let low = self.warp(0, &fi.low, &fd.low)?;
        let high = self.warp(1, &fi.high, &fd.high)?;

        let response = self.prompt.generate_response_map(&low.refined_depth, &high.refined_depth)?;
        let response = ResponseMap {
            values: resize_bilinear(&response.values.detach(), h, w)?,
        };
        let prompts = select_points_batch(&response, self.cfg.num_prompts, self.cfg.min_distance)?;

        let inter = self.fdaf.intermediate_prediction(&low.fused)?;
        let memory = if self.cfg.ablate_fdaf {
            self.fdaf.memory_tokens(&high.fused)?
        } else {
            let spec = crate::fdaf::channel_fft(&crate::nn::to_tokens(&low.fused)?)?;
            let mem = self.fdaf.memory_tokens(&high.fused)?;
            self.fdaf.frequency_cross_attention(&mem, &spec)?
        };
        let pred = self
            .decoder
            .forward(&prompts, &memory.values, &low.fused, &high.fused, &inter.freq_map, h, w)?;
        Ok(FrameOutput {
            logits: pred.logits,
            inter_logits: inter.map,
            freq_map: inter.freq_map,
            response,
            prompts,
        })
    }

    /// Tensors `(rgb, depth, gt)` of one clip frame, batch of one.
    pub fn frame_tensors(&self, clip: &VideoClip, i: usize) -> Result<(Tensor, Tensor, Tensor)> {
        let dt = self.dtype();
        Ok((
            clip.rgb[i].to_tensor(dt)?,
            clip.depth[i].to_tensor(dt)?,
            clip.gt[i].to_tensor(dt)?,
        ))
    }

    /// Forward pass over the three frames of a prepared clip.
    pub fn forward_clip(&self, clip: &VideoClip) -> Result<Vec<FrameOutput>> {
        (0..3)
            .map(|i| {
                let (rgb, depth, _) = self.frame_tensors(clip, i)?;
                self.forward_frame(&rgb, &depth)
            })
            .collect()
    }
}
