//! Co-attention: self-attentive question attention and MFB-fused image
//! attention, each with multiple glimpses.
//!
//! Both sides share the same head shape: one hidden ReLU layer followed
//! by a logit layer producing g glimpse maps, softmax-normalized over
//! positions. Padded question positions get an additive -1e30 logit
//! offset so the softmax stays exactly normalized over real tokens.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fusion::MfbBlock;
use crate::layers::Linear;
use crate::params::{Params, PassCtx};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MASK_OFFSET: f64 = -1e30;

/// Attention scoring stack: hidden ReLU layer then g logit maps.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub in_dim: usize,
    pub hidden: usize,
    pub glimpses: usize,
    hidden_layer: Linear,
    logit_layer: Linear,
}

impl AttentionHead {
    pub fn new(in_dim: usize, hidden: usize, glimpses: usize) -> Result<Self> {
        if glimpses == 0 || hidden == 0 || in_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "attention head dims must be positive: in={in_dim} hidden={hidden} g={glimpses}"
            )));
        }
        Ok(AttentionHead {
            in_dim,
            hidden,
            glimpses,
            hidden_layer: Linear::new(in_dim, hidden),
            logit_layer: Linear::new(hidden, glimpses),
        })
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        self.hidden_layer
            .register(&format!("{prefix}.hidden"), params, rng);
        self.logit_layer
            .register(&format!("{prefix}.logits"), params, rng);
    }

    /// Per-position glimpse logits: [P×in] → [P×g].
    fn logits<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        feats: &Var<F>,
    ) -> Result<Var<F>> {
        let h = self
            .hidden_layer
            .forward(ctx, &format!("{prefix}.hidden"), feats)?
            .relu();
        self.logit_layer.forward(ctx, &format!("{prefix}.logits"), &h)
    }

    pub fn param_count(&self) -> usize {
        self.hidden_layer.param_count() + self.logit_layer.param_count()
    }
}

/// Attended features plus the attention map that produced them.
pub struct GlimpseOutput<F: Scalar> {
    /// Concatenation of the g weighted sums, [1×(g·feature_dim)].
    pub attended: Var<F>,
    /// Softmax weights, [g×positions]; rows sum to 1.
    pub weights: Var<F>,
}

fn attend<F: Scalar>(
    head: &AttentionHead,
    ctx: &mut PassCtx<F>,
    prefix: &str,
    scored: &Var<F>,
    features: &Var<F>,
    pad_mask: Option<&[bool]>,
) -> Result<GlimpseOutput<F>> {
    let positions = scored.shape()[0];
    let feature_dim = features.shape()[1];
    let g = head.glimpses;

    let mut logits = head.logits(ctx, prefix, scored)?.transpose()?; // [g×P]
    if let Some(mask) = pad_mask {
        let mut offsets = Tensor::zeros(&[g, positions]);
        for (t, &padded) in mask.iter().enumerate() {
            if padded {
                for row in 0..g {
                    offsets.data_mut()[row * positions + t] = F::c(MASK_OFFSET);
                }
            }
        }
        logits = logits.add(&ctx.graph.constant(offsets))?;
    }
    let weights = logits.softmax(); // [g×P]
    let attended = weights.matmul(features)?.reshape(&[1, g * feature_dim])?;
    Ok(GlimpseOutput { attended, weights })
}

/// Self-attentive question attention: logits are a function of the
/// question states alone. Pad positions are masked out.
pub fn question_self_attention<F: Scalar>(
    head: &AttentionHead,
    ctx: &mut PassCtx<F>,
    prefix: &str,
    states: &Var<F>,
    pad_mask: &[bool],
) -> Result<GlimpseOutput<F>> {
    if pad_mask.iter().all(|&m| m) {
        return Err(Error::AllMasked);
    }
    attend(head, ctx, prefix, states, states, Some(pad_mask))
}

/// Image attention: each grid feature is MFB-fused with the attentive
/// question vector, the fused vectors are scored by the head, and the
/// raw grid features are weighted-summed per glimpse. One shared
/// MfbBlock serves every position (the 1x1-convolution weight tying).
pub fn image_attention<F: Scalar>(
    head: &AttentionHead,
    fuse: &MfbBlock,
    ctx: &mut PassCtx<F>,
    prefix: &str,
    grids: &Var<F>,
    q_att: &Var<F>,
) -> Result<GlimpseOutput<F>> {
    let shape = grids.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::EmptyGrid);
    }
    // replicate the question vector over grid positions; the fusion
    // block then runs per-row
    let ones = ctx.graph.constant(Tensor::ones(&[shape[0], 1]));
    let q_rep = ones.matmul(q_att)?;
    let fused = fuse.forward(ctx, &format!("{prefix}.fuse"), grids, &q_rep)?;
    attend(head, ctx, &format!("{prefix}.head"), &fused, grids, None)
}
