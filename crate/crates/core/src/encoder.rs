//! Pruned residual feature extractor.
//!
//! ```text
//! input [S, 2, H, W]   intensity + frame flow, reflect-padded to a multiple of 8
//! stem    7x7/2, 2 -> 32, IN, ReLU          H/2
//! block1  residual 32 -> 32                 H/2 --1x1--> fine features   (k = 2)
//! block2  residual 32 -> 64, stride 2       H/4
//! block3  residual 64 -> 64, stride 2       H/8 --1x1--> coarse features (k = 8)
//! ```
//!
//! Both strides come out of one backbone with one set of weights.

use rand::Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, ParamStore, ResBlock2d};
use crate::sequence::ImageSequence;

pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;
pub const FEATURE_DIM: usize = 64;
/// Input side lengths are padded up to a multiple of this.
pub const PAD_MULTIPLE: usize = 8;
const STEM_WIDTH: usize = 32;

/// Per-frame feature maps `[S, d, H/k, W/k]` at stride `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub features: Tensor,
    pub stride: usize,
}

impl FeatureVolume {
    pub fn frames(&self) -> usize {
        self.features.dim(0)
    }

    pub fn channels(&self) -> usize {
        self.features.dim(1)
    }

    pub fn height(&self) -> usize {
        self.features.dim(2)
    }

    pub fn width(&self) -> usize {
        self.features.dim(3)
    }

    /// `[d, h, w]` map of frame `s`.
    pub fn frame(&self, s: usize) -> Tensor {
        self.features.index0(s)
    }
}

/// Which outputs a forward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outputs {
    Fine,
    Coarse,
    Both,
}

pub struct EncoderOutputs {
    pub fine: Option<Var>,
    pub coarse: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    dim: usize,
    stem: Conv2d,
    block1: ResBlock2d,
    fine_proj: Conv2d,
    block2: ResBlock2d,
    block3: ResBlock2d,
    coarse_proj: Conv2d,
}

impl Encoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            stem: Conv2d::new("encoder.stem", 2, STEM_WIDTH, 7, 2),
            block1: ResBlock2d::new("encoder.block1", STEM_WIDTH, STEM_WIDTH, 1),
            fine_proj: Conv2d::new("encoder.fine_proj", STEM_WIDTH, dim, 1, 1),
            block2: ResBlock2d::new("encoder.block2", STEM_WIDTH, 64, 2),
            block3: ResBlock2d::new("encoder.block3", 64, 64, 2),
            coarse_proj: Conv2d::new("encoder.coarse_proj", 64, dim, 1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        self.block1.init(store, rng);
        self.fine_proj.init(store, rng);
        self.block2.init(store, rng);
        self.block3.init(store, rng);
        self.coarse_proj.init(store, rng);
    }

    /// Runs the backbone on a `[S, 2, H, W]` input.
    pub fn forward(&self, g: &mut Graph, p: &Bound, input: Var, outputs: Outputs) -> Result<EncoderOutputs> {
        let s = g.shape(input).to_vec();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::shape(format!("encoder input must be [S, 2, H, W], got {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let pad_h = (PAD_MULTIPLE - h % PAD_MULTIPLE) % PAD_MULTIPLE;
        let pad_w = (PAD_MULTIPLE - w % PAD_MULTIPLE) % PAD_MULTIPLE;
        if h < PAD_MULTIPLE || w < PAD_MULTIPLE || pad_h >= h || pad_w >= w {
            return Err(Error::invalid(format!(
                "{h}x{w} input cannot be padded to a multiple of {PAD_MULTIPLE}"
            )));
        }
        let x = if pad_h + pad_w > 0 {
            g.pad_reflect(input, pad_h, pad_w)
        } else {
            input
        };
        let x = self.stem.forward(g, p, x);
        let x = g.instance_norm(x);
        let x = g.relu(x);
        let x1 = self.block1.forward(g, p, x);
        let fine = matches!(outputs, Outputs::Fine | Outputs::Both).then(|| {
            let f = self.fine_proj.forward(g, p, x1);
            g.crop(f, h.div_ceil(FINE_STRIDE), w.div_ceil(FINE_STRIDE))
        });
        let coarse = matches!(outputs, Outputs::Coarse | Outputs::Both).then(|| {
            let x2 = self.block2.forward(g, p, x1);
            let x3 = self.block3.forward(g, p, x2);
            let c = self.coarse_proj.forward(g, p, x3);
            g.crop(c, h.div_ceil(COARSE_STRIDE), w.div_ceil(COARSE_STRIDE))
        });
        Ok(EncoderOutputs { fine, coarse })
    }

    /// Feature maps at stride `k` ∈ {2, 8}, computed `chunk` frames at a time
    /// without keeping a tape.
    pub fn encode(
        &self,
        params: &ParamStore,
        seq: &ImageSequence,
        flow: &Tensor,
        stride: usize,
    ) -> Result<FeatureVolume> {
        let outputs = match stride {
            FINE_STRIDE => Outputs::Fine,
            COARSE_STRIDE => Outputs::Coarse,
            k => return Err(Error::invalid(format!("unsupported stride {k}; expected 2 or 8"))),
        };
        let (fine, coarse) = self.encode_frames(params, seq, flow, outputs, 4)?;
        Ok(match stride {
            FINE_STRIDE => fine.expect("fine requested"),
            _ => coarse.expect("coarse requested"),
        })
    }

    /// Inference pass over frame chunks; returns the requested volumes.
    pub fn encode_frames(
        &self,
        params: &ParamStore,
        seq: &ImageSequence,
        flow: &Tensor,
        outputs: Outputs,
        chunk: usize,
    ) -> Result<(Option<FeatureVolume>, Option<FeatureVolume>)> {
        let (s, h, w) = (seq.frame_count(), seq.height(), seq.width());
        if flow.shape() != [s, h, w] {
            return Err(Error::shape(format!(
                "flow {:?} does not match sequence [{s}, {h}, {w}]",
                flow.shape()
            )));
        }
        let input = encoder_input(seq, flow);
        let plane = 2 * h * w;
        let mut fine_parts = Vec::new();
        let mut coarse_parts = Vec::new();
        for start in (0..s).step_by(chunk.max(1)) {
            let len = chunk.max(1).min(s - start);
            let mut g = Graph::new();
            let p = params.bind_prefix(&mut g, "encoder.");
            let x = g.constant(Tensor::new(
                &[len, 2, h, w],
                input.data()[start * plane..(start + len) * plane].to_vec(),
            ));
            let out = self.forward(&mut g, &p, x, outputs)?;
            if let Some(f) = out.fine {
                fine_parts.push(g.value(f).clone());
            }
            if let Some(c) = out.coarse {
                coarse_parts.push(g.value(c).clone());
            }
        }
        let join = |parts: Vec<Tensor>, stride| {
            (!parts.is_empty()).then(|| FeatureVolume {
                features: concat_frames(parts),
                stride,
            })
        };
        Ok((join(fine_parts, FINE_STRIDE), join(coarse_parts, COARSE_STRIDE)))
    }
}

fn concat_frames(parts: Vec<Tensor>) -> Tensor {
    if parts.len() == 1 {
        return parts.into_iter().next().expect("one part");
    }
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::new(&shape, data)
}

/// Interleaves intensity and frame flow into a `[S, 2, H, W]` tensor.
pub fn encoder_input(seq: &ImageSequence, flow: &Tensor) -> Tensor {
    let (s, h, w) = (seq.frame_count(), seq.height(), seq.width());
    let n = h * w;
    let mut data = Vec::with_capacity(2 * s * n);
    for t in 0..s {
        data.extend_from_slice(seq.frame(t));
        data.extend_from_slice(&flow.data()[t * n..(t + 1) * n]);
    }
    Tensor::new(&[s, 2, h, w], data)
}
