//! Factorized bilinear fusion: MFB expand/squeeze blocks, the
//! high-order MFH cascade, and the rank-1 MLB baseline.
//!
//! An MFB block projects both modalities to k·o, multiplies elementwise
//! (with dropout after the product), sum-pools over windows of k, then
//! applies power and ℓ2 normalization. MFH chains p such blocks by
//! multiplying each block's expanded output into the previous one and
//! concatenating the squeezed outputs.

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::layers::{dropout, Linear};
use crate::params::{Params, PassCtx};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfbConfig {
    /// x-side input width.
    pub m: usize,
    /// y-side input width.
    pub n: usize,
    /// factor count (latent dimensionality of each W_i).
    pub k: usize,
    /// output width.
    pub o: usize,
    pub dropout_p: f64,
    #[serde(default = "default_true")]
    pub power_norm: bool,
    #[serde(default = "default_true")]
    pub l2_norm: bool,
}

impl MfbConfig {
    pub fn new(m: usize, n: usize, k: usize, o: usize, dropout_p: f64) -> Self {
        MfbConfig {
            m,
            n,
            k,
            o,
            dropout_p,
            power_norm: true,
            l2_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 || self.o == 0 {
            return Err(Error::InvalidConfig(format!(
                "MFB dims must be positive: m={} n={} k={} o={}",
                self.m, self.n, self.k, self.o
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout ratio {} outside [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfhConfig {
    /// cascade order p; p=1 degenerates to plain MFB.
    pub order: usize,
    pub mfb: MfbConfig,
}

impl MfhConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidConfig("MFH order must be >= 1".into()));
        }
        self.mfb.validate()
    }

    /// Output width o·p.
    pub fn out_dim(&self) -> usize {
        self.mfb.o * self.order
    }
}

/// One MFB block: two k·o-wide projections plus the dropout ratio.
#[derive(Debug, Clone)]
pub struct MfbBlock {
    pub cfg: MfbConfig,
    proj_x: Linear,
    proj_y: Linear,
}

impl MfbBlock {
    pub fn new(cfg: MfbConfig) -> Result<Self> {
        cfg.validate()?;
        let ko = cfg.k * cfg.o;
        Ok(MfbBlock {
            proj_x: Linear::new(cfg.m, ko),
            proj_y: Linear::new(cfg.n, ko),
            cfg,
        })
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        self.proj_x.register(&format!("{prefix}.proj_x"), params, rng);
        self.proj_y.register(&format!("{prefix}.proj_y"), params, rng);
    }

    /// Expand stage: Dropout(Ũᵀx ∘ Ṽᵀy), [b×k·o].
    pub fn expand<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x: &Var<F>,
        y: &Var<F>,
    ) -> Result<Var<F>> {
        let px = self.proj_x.forward(ctx, &format!("{prefix}.proj_x"), x)?;
        let py = self.proj_y.forward(ctx, &format!("{prefix}.proj_y"), y)?;
        dropout(ctx, &px.hadamard(&py)?, self.cfg.dropout_p)
    }

    /// Sum-pooled expand output with no normalization, [b×o]; the
    /// quantity the explicit bilinear oracle predicts.
    pub fn raw<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x: &Var<F>,
        y: &Var<F>,
    ) -> Result<Var<F>> {
        self.expand(ctx, prefix, x, y)?.sum_pool(self.cfg.k)
    }

    /// Full MFB: squeeze(expand(x, y)).
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x: &Var<F>,
        y: &Var<F>,
    ) -> Result<Var<F>> {
        let exp = self.expand(ctx, prefix, x, y)?;
        mfb_squeeze(&exp, self.cfg.k, self.cfg.power_norm, self.cfg.l2_norm)
    }

    pub fn param_count(&self) -> usize {
        self.proj_x.param_count() + self.proj_y.param_count()
    }
}

/// Squeeze stage: sum-pool windows of k, then power and ℓ2
/// normalization (each optional for ablations).
pub fn mfb_squeeze<F: Scalar>(
    z_exp: &Var<F>,
    k: usize,
    power_norm: bool,
    l2_norm: bool,
) -> Result<Var<F>> {
    let mut z = z_exp.sum_pool(k)?;
    if power_norm {
        z = z.power_norm();
    }
    if l2_norm {
        z = z.l2_normalize();
    }
    Ok(z)
}

/// MFH cascade over `blocks`, returning the concatenation
/// [z¹, …, zᵖ] of width o·p.
pub fn mfh_forward<F: Scalar>(
    blocks: &[MfbBlock],
    ctx: &mut PassCtx<F>,
    prefix: &str,
    x: &Var<F>,
    y: &Var<F>,
) -> Result<Var<F>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::InvalidConfig("MFH needs at least one block".into()))?;
    let (k, o) = (first.cfg.k, first.cfg.o);
    for b in blocks {
        if b.cfg.k != k || b.cfg.o != o {
            return Err(Error::InvalidConfig(format!(
                "heterogeneous MFH block dims: ({},{}) vs ({},{})",
                b.cfg.k, b.cfg.o, k, o
            )));
        }
    }
    let batch = x.shape()[0];
    let mut z_exp = ctx.graph.constant(Tensor::ones(&[batch, k * o]));
    let mut outs = Vec::with_capacity(blocks.len());
    for (i, block) in blocks.iter().enumerate() {
        let e = block.expand(ctx, &format!("{prefix}.block{i}"), x, y)?;
        z_exp = z_exp.hadamard(&e)?;
        outs.push(mfb_squeeze(
            &z_exp,
            k,
            block.cfg.power_norm,
            block.cfg.l2_norm,
        )?);
    }
    concat(&ctx.graph, &outs, 1)
}

/// Builds the p blocks of an MFH cascade (independent weights per
/// block) under `<prefix>.block<i>`.
pub fn build_mfh_blocks<F: Scalar>(
    cfg: &MfhConfig,
    prefix: &str,
    params: &mut Params<F>,
    rng: &mut Rng,
) -> Result<Vec<MfbBlock>> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(cfg.order);
    for i in 0..cfg.order {
        let block = MfbBlock::new(cfg.mfb.clone())?;
        block.register(&format!("{prefix}.block{i}"), params, rng);
        blocks.push(block);
    }
    Ok(blocks)
}

/// Rank-1 bilinear baseline: tanh((Uᵀx) ∘ (Vᵀy)).
#[derive(Debug, Clone)]
pub struct MlbBlock {
    proj_x: Linear,
    proj_y: Linear,
}

impl MlbBlock {
    pub fn new(m: usize, n: usize, o: usize) -> Result<Self> {
        if m == 0 || n == 0 || o == 0 {
            return Err(Error::InvalidConfig(format!(
                "MLB dims must be positive: m={m} n={n} o={o}"
            )));
        }
        Ok(MlbBlock {
            proj_x: Linear::new(m, o),
            proj_y: Linear::new(n, o),
        })
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        self.proj_x.register(&format!("{prefix}.proj_x"), params, rng);
        self.proj_y.register(&format!("{prefix}.proj_y"), params, rng);
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x: &Var<F>,
        y: &Var<F>,
    ) -> Result<Var<F>> {
        let px = self.proj_x.forward(ctx, &format!("{prefix}.proj_x"), x)?;
        let py = self.proj_y.forward(ctx, &format!("{prefix}.proj_y"), y)?;
        Ok(px.hadamard(&py)?.tanh())
    }

    pub fn param_count(&self) -> usize {
        self.proj_x.param_count() + self.proj_y.param_count()
    }
}

/// Fusion-only parameter subtotal: p·(m·k·o + n·k·o), plus the two k·o
/// bias vectors per block when `biases` is set.
pub fn count_fusion_params(cfg: &MfhConfig, biases: bool) -> usize {
    let ko = cfg.mfb.k * cfg.mfb.o;
    let per_block = (cfg.mfb.m + cfg.mfb.n) * ko + if biases { 2 * ko } else { 0 };
    cfg.order * per_block
}
