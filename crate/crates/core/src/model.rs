//! The two network assemblies — the plain fusion baseline and the
//! co-attention network — plus whole-model parameter accounting and the
//! binary checkpoint container.
//!
//! Checkpoint layout: magic, u32 version, config JSON, per-tensor
//! (name, shape, little-endian f64 payload) records, and a SHA-256
//! trailer over everything before it. Round-trips are bit-exact.

use crate::answer::AnswerVocab;
use crate::attention::{image_attention, question_self_attention, AttentionHead};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fusion::{build_mfh_blocks, mfh_forward, MfbBlock, MfhConfig, MlbBlock};
use crate::layers::{encode_question, Embedding, Linear, LstmCell};
use crate::params::{Params, PassCtx};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const CKPT_MAGIC: &[u8; 8] = b"MFBCKPT\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Baseline,
    Coattention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Mfb,
    Mfh,
    Mlb,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub fusion_kind: FusionKind,
    /// Question token strings; index 0 must be the pad token.
    pub question_vocab: Vec<String>,
    /// Answer class strings, index = class id.
    pub answer_vocab: Vec<String>,
    pub embedding_dim: usize,
    pub lstm_hidden: usize,
    /// d_img: width of one grid feature vector.
    pub image_dim: usize,
    /// G: grid positions per image.
    pub grid_count: usize,
    pub max_question_len: usize,
    /// Final fusion; MFB and MLB use order = 1.
    pub fusion: MfhConfig,
    pub q_glimpses: usize,
    pub i_glimpses: usize,
    /// Hidden width of both attention heads.
    pub att_hidden: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Image-side width entering the final fusion.
    pub fn fusion_m(&self) -> usize {
        match self.architecture {
            Architecture::Baseline => self.image_dim,
            Architecture::Coattention => self.i_glimpses * self.image_dim,
        }
    }

    /// Question-side width entering the final fusion.
    pub fn fusion_n(&self) -> usize {
        match self.architecture {
            Architecture::Baseline => self.lstm_hidden,
            Architecture::Coattention => self.q_glimpses * self.lstm_hidden,
        }
    }

    /// Width of the fused feature fed to the classifier.
    pub fn fused_dim(&self) -> usize {
        match self.fusion_kind {
            FusionKind::Mlb => self.fusion.mfb.o,
            _ => self.fusion.out_dim(),
        }
    }

    pub fn num_answers(&self) -> usize {
        self.answer_vocab.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.question_vocab.is_empty() {
            return Err(Error::InvalidConfig("question vocabulary is empty".into()));
        }
        if self.answer_vocab.is_empty() {
            return Err(Error::InvalidConfig("answer vocabulary is empty".into()));
        }
        if self.embedding_dim == 0
            || self.lstm_hidden == 0
            || self.image_dim == 0
            || self.grid_count == 0
            || self.max_question_len == 0
        {
            return Err(Error::InvalidConfig("model dims must be positive".into()));
        }
        self.fusion.validate()?;
        match self.fusion_kind {
            FusionKind::Mfb | FusionKind::Mlb => {
                if self.fusion.order != 1 {
                    return Err(Error::InvalidConfig(format!(
                        "{:?} fusion requires order 1, got {}",
                        self.fusion_kind, self.fusion.order
                    )));
                }
            }
            FusionKind::Mfh => {}
        }
        if self.fusion.mfb.m != self.fusion_m() || self.fusion.mfb.n != self.fusion_n() {
            return Err(Error::InvalidConfig(format!(
                "fusion input dims ({}, {}) do not match architecture widths ({}, {})",
                self.fusion.mfb.m,
                self.fusion.mfb.n,
                self.fusion_m(),
                self.fusion_n()
            )));
        }
        if self.architecture == Architecture::Coattention
            && (self.q_glimpses == 0 || self.i_glimpses == 0 || self.att_hidden == 0)
        {
            return Err(Error::InvalidConfig(
                "co-attention needs positive glimpse counts and att_hidden".into(),
            ));
        }
        Ok(())
    }
}

enum FusionModule {
    /// MFB (one block) or MFH (order blocks).
    Bilinear(Vec<MfbBlock>),
    Mlb(MlbBlock),
}

struct Coattention {
    q_head: AttentionHead,
    i_head: AttentionHead,
    i_fuse: MfbBlock,
}

/// Layer descriptors for one config; the weights themselves live in a
/// [`Params`] map produced by [`VqaModel::init_params`].
pub struct VqaModel {
    pub cfg: ModelConfig,
    embedding: Embedding,
    lstm: LstmCell,
    coatt: Option<Coattention>,
    fusion: FusionModule,
    classifier: Linear,
}

impl VqaModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let embedding = Embedding::new(cfg.question_vocab.len(), cfg.embedding_dim);
        let lstm = LstmCell::new(cfg.embedding_dim, cfg.lstm_hidden);
        let coatt = match cfg.architecture {
            Architecture::Baseline => None,
            Architecture::Coattention => {
                let q_head = AttentionHead::new(cfg.lstm_hidden, cfg.att_hidden, cfg.q_glimpses)?;
                // each grid row is fused with the attentive question
                // vector before scoring
                let mut fuse_cfg = cfg.fusion.mfb.clone();
                fuse_cfg.m = cfg.image_dim;
                fuse_cfg.n = cfg.q_glimpses * cfg.lstm_hidden;
                let i_fuse = MfbBlock::new(fuse_cfg)?;
                let i_head = AttentionHead::new(cfg.fusion.mfb.o, cfg.att_hidden, cfg.i_glimpses)?;
                Some(Coattention {
                    q_head,
                    i_head,
                    i_fuse,
                })
            }
        };
        let fusion = match cfg.fusion_kind {
            FusionKind::Mlb => FusionModule::Mlb(MlbBlock::new(
                cfg.fusion.mfb.m,
                cfg.fusion.mfb.n,
                cfg.fusion.mfb.o,
            )?),
            _ => FusionModule::Bilinear(Vec::new()), // blocks built at init
        };
        let classifier = Linear::new(cfg.fused_dim(), cfg.answer_vocab.len());
        Ok(VqaModel {
            embedding,
            lstm,
            coatt,
            fusion,
            classifier,
            cfg,
        })
    }

    /// Fresh parameter map for this config, seeded from `cfg.seed`. The
    /// key set is a pure function of the config.
    pub fn init_params<F: Scalar>(&mut self) -> Params<F> {
        let mut rng = Rng::new(self.cfg.seed).derive(0x6d6f64656c);
        let mut params = Params::new();
        self.embedding.register("embed", &mut params, &mut rng);
        self.lstm.register("lstm", &mut params, &mut rng);
        if let Some(coatt) = &self.coatt {
            coatt.q_head.register("qatt", &mut params, &mut rng);
            coatt.i_fuse.register("iatt.fuse", &mut params, &mut rng);
            coatt.i_head.register("iatt.head", &mut params, &mut rng);
        }
        match &mut self.fusion {
            FusionModule::Bilinear(blocks) => {
                *blocks = build_mfh_blocks(&self.cfg.fusion, "fusion", &mut params, &mut rng)
                    .expect("config validated");
            }
            FusionModule::Mlb(mlb) => mlb.register("fusion", &mut params, &mut rng),
        }
        self.classifier.register("classifier", &mut params, &mut rng);
        params
    }

    fn check_grid<F: Scalar>(&self, grid: &Tensor<F>) -> Result<()> {
        if grid.shape() != [self.cfg.grid_count, self.cfg.image_dim] {
            return Err(Error::Mismatch(format!(
                "grid shape {:?} does not match config [{}, {}]",
                grid.shape(),
                self.cfg.grid_count,
                self.cfg.image_dim
            )));
        }
        Ok(())
    }

    fn fuse<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        img: &Var<F>,
        q: &Var<F>,
    ) -> Result<Var<F>> {
        match &self.fusion {
            FusionModule::Bilinear(blocks) => mfh_forward(blocks, ctx, "fusion", img, q),
            FusionModule::Mlb(mlb) => mlb.forward(ctx, "fusion", img, q),
        }
    }

    /// Logits [1×N] for one sample; dispatches on the configured
    /// architecture.
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        grid: &Tensor<F>,
        tokens: &[usize],
    ) -> Result<Var<F>> {
        self.check_grid(grid)?;
        let question = encode_question(
            ctx,
            &self.embedding,
            "embed",
            &self.lstm,
            "lstm",
            tokens,
            self.cfg.max_question_len,
            0,
        )?;
        let fused = match &self.coatt {
            None => {
                // global image feature: mean over grid rows, then
                // ℓ2-normalized as pool5 features would be
                let g = self.cfg.grid_count;
                let pool = ctx
                    .graph
                    .constant(Tensor::full(&[1, g], F::c(1.0 / g as f64)));
                let grids = ctx.graph.constant(grid.clone());
                let img = pool.matmul(&grids)?.l2_normalize();
                self.fuse(ctx, &img, &question.last)?
            }
            Some(coatt) => {
                let q_att = question_self_attention(
                    &coatt.q_head,
                    ctx,
                    "qatt",
                    &question.states,
                    &question.pad_mask,
                )?;
                let grids = ctx.graph.constant(grid.clone());
                let i_att = image_attention(
                    &coatt.i_head,
                    &coatt.i_fuse,
                    ctx,
                    "iatt",
                    &grids,
                    &q_att.attended,
                )?;
                self.fuse(ctx, &i_att.attended, &q_att.attended)?
            }
        };
        self.classifier.forward(ctx, "classifier", &fused)
    }

    /// `forward` restricted to the baseline architecture.
    pub fn forward_baseline<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        grid: &Tensor<F>,
        tokens: &[usize],
    ) -> Result<Var<F>> {
        if self.cfg.architecture != Architecture::Baseline {
            return Err(Error::Mismatch("model is not a baseline network".into()));
        }
        self.forward(ctx, grid, tokens)
    }

    /// `forward` restricted to the co-attention architecture.
    pub fn forward_coattention<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        grid: &Tensor<F>,
        tokens: &[usize],
    ) -> Result<Var<F>> {
        if self.cfg.architecture != Architecture::Coattention {
            return Err(Error::Mismatch("model is not a co-attention network".into()));
        }
        self.forward(ctx, grid, tokens)
    }

    pub fn answer_vocab(&self) -> AnswerVocab {
        AnswerVocab::from_answers(self.cfg.answer_vocab.clone())
    }

    /// Question token string → id, via the config's closed vocabulary.
    pub fn tokenize(&self, words: &[String]) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&str, usize> = self
            .cfg
            .question_vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        words
            .iter()
            .map(|w| {
                index.get(w.as_str()).copied().ok_or_else(|| {
                    Error::Mismatch(format!("question token {w:?} not in model vocabulary"))
                })
            })
            .collect()
    }
}

/// Per-tensor element counts plus the total.
pub fn count_model_params<F: Scalar>(params: &Params<F>) -> (Vec<(String, usize)>, usize) {
    let table: Vec<(String, usize)> = params
        .iter()
        .map(|(name, t)| (name.clone(), t.numel()))
        .collect();
    let total = table.iter().map(|(_, n)| n).sum();
    (table, total)
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &Params<f64>) -> Result<()> {
    let config_json = serde_json::to_vec(cfg)
        .map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    write_u64(&mut buf, config_json.len() as u64);
    buf.extend_from_slice(&config_json);
    write_u64(&mut buf, params.len() as u64);
    for (name, tensor) in params.iter() {
        write_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        write_u64(&mut buf, tensor.shape().len() as u64);
        for &d in tensor.shape() {
            write_u64(&mut buf, d as u64);
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

struct CkptReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CkptReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// a u64 that must also fit the remaining buffer, as a size guard
    fn len_field(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("implausible length field {v}")));
        }
        Ok(v as usize)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if buf.len() < 32 {
        return Err(Error::Checkpoint("file shorter than its checksum".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = CkptReader { buf: body, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CKPT_VERSION})"
        )));
    }
    let json_len = r.len_field()?;
    let cfg: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Checkpoint(format!("parsing config: {e}")))?;
    let count = r.u64()?;
    let mut params: Params<f64> = Params::new();
    for _ in 0..count {
        let name_len = r.len_field()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name not UTF-8: {e}")))?
            .to_string();
        let ndim = r.len_field()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        params.insert(
            name,
            Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    // the key set must be exactly what the stored config produces
    let mut model = VqaModel::new(cfg.clone())?;
    let fresh = model.init_params::<f64>();
    let expected: Vec<&String> = fresh.names().collect();
    let got: Vec<&String> = params.names().collect();
    if expected != got {
        return Err(Error::Checkpoint(
            "stored parameter names do not match the stored config".into(),
        ));
    }
    for (name, t) in params.iter() {
        if !t.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite values in {name}")));
        }
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::MfbConfig;
    use crate::gradcheck::{check_param_fn, weighted_sum, REL_TOL};
    use crate::params::Mode;

    fn token_vocab() -> Vec<String> {
        ["<pad>", "what", "color", "is", "the", "circle", "square"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn answer_vocab() -> Vec<String> {
        ["red", "green", "blue", "yes", "no"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn tiny_cfg(architecture: Architecture, fusion_kind: FusionKind, order: usize) -> ModelConfig {
        let (q_glimpses, i_glimpses) = (2, 2);
        let (h, d_img) = (4, 6);
        let (m, n) = match architecture {
            Architecture::Baseline => (d_img, h),
            Architecture::Coattention => (i_glimpses * d_img, q_glimpses * h),
        };
        ModelConfig {
            architecture,
            fusion_kind,
            question_vocab: token_vocab(),
            answer_vocab: answer_vocab(),
            embedding_dim: 3,
            lstm_hidden: h,
            image_dim: d_img,
            grid_count: 4,
            max_question_len: 5,
            fusion: MfhConfig {
                order,
                mfb: MfbConfig::new(m, n, 2, 3, 0.0),
            },
            q_glimpses,
            i_glimpses,
            att_hidden: 3,
            seed: 17,
        }
    }

    fn grid(cfg: &ModelConfig, seed: u64) -> crate::Tensor {
        let mut rng = Rng::new(seed);
        Tensor::uniform(&[cfg.grid_count, cfg.image_dim], -1.0, 1.0, &mut rng)
    }

    fn run(
        model: &VqaModel,
        params: &Params<f64>,
        grid: &crate::Tensor,
        tokens: &[usize],
    ) -> crate::Tensor {
        let mut ctx = PassCtx::new(params, Mode::Infer, Rng::new(0));
        model.forward(&mut ctx, grid, tokens).unwrap().value()
    }

    #[test]
    fn logit_width_is_answer_count_for_all_variants() {
        for arch in [Architecture::Baseline, Architecture::Coattention] {
            for (kind, order) in [(FusionKind::Mfb, 1), (FusionKind::Mfh, 2), (FusionKind::Mlb, 1)]
            {
                let cfg = tiny_cfg(arch, kind, order);
                let mut model = VqaModel::new(cfg).unwrap();
                let params = model.init_params::<f64>();
                let g = grid(&model.cfg, 1);
                let logits = run(&model, &params, &g, &[1, 2, 3]);
                assert_eq!(logits.shape(), &[1, 5], "{arch:?}/{kind:?}");
            }
        }
    }

    #[test]
    fn baseline_zero_image_zero_biases_gives_classifier_bias() {
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg).unwrap();
        let mut params = model.init_params::<f64>();
        // zero the fusion projection biases so the fused feature
        // annihilates with the zero image
        for name in ["fusion.block0.proj_x.bias", "fusion.block0.proj_y.bias"] {
            let t = params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let mut bias = crate::Tensor::zeros(&[5]);
        for (i, v) in bias.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 0.5;
        }
        *params.get_mut("classifier.bias").unwrap() = bias.clone();
        let zero_grid = crate::Tensor::zeros(&[model.cfg.grid_count, model.cfg.image_dim]);
        let logits = run(&model, &params, &zero_grid, &[1, 2]);
        assert_eq!(logits.data(), bias.data());
    }

    #[test]
    fn baseline_full_gradient_check() {
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let g = grid(&model.cfg, 3);
        let tokens = [1usize, 4, 5];
        let worst = check_param_fn(
            &|c| {
                let logits = model.forward(c, &g, &tokens)?;
                weighted_sum(&c.graph, &logits, 11)
            },
            &params,
            Mode::Infer,
            0,
        )
        .unwrap();
        assert!(worst <= REL_TOL, "worst rel err {worst}");
    }

    #[test]
    fn coattention_full_gradient_check() {
        for (kind, order) in [(FusionKind::Mfb, 1), (FusionKind::Mfh, 2)] {
            let cfg = tiny_cfg(Architecture::Coattention, kind, order);
            let mut model = VqaModel::new(cfg).unwrap();
            let params = model.init_params::<f64>();
            let g = grid(&model.cfg, 5);
            let tokens = [2usize, 3, 6];
            let worst = check_param_fn(
                &|c| {
                    let logits = model.forward(c, &g, &tokens)?;
                    weighted_sum(&c.graph, &logits, 13)
                },
                &params,
                Mode::Infer,
                0,
            )
            .unwrap();
            assert!(worst <= REL_TOL, "{kind:?} worst rel err {worst}");
        }
    }

    #[test]
    fn coattention_single_position_degenerate_case() {
        let mut cfg = tiny_cfg(Architecture::Coattention, FusionKind::Mfb, 1);
        cfg.grid_count = 1;
        cfg.max_question_len = 1;
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let g = grid(&model.cfg, 7);
        let logits = run(&model, &params, &g, &[1]);
        assert_eq!(logits.shape(), &[1, 5]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn baseline_logits_invariant_to_grid_permutation() {
        // the baseline mean-pools the grid, so row order cannot matter
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let g = grid(&model.cfg, 9);
        let rows: Vec<Vec<f64>> = (0..model.cfg.grid_count)
            .map(|i| g.data()[i * model.cfg.image_dim..(i + 1) * model.cfg.image_dim].to_vec())
            .collect();
        let mut perm: Vec<Vec<f64>> = rows.clone();
        perm.rotate_left(2);
        perm.swap(0, 1);
        let g_perm = Tensor::from_rows(&perm).unwrap();
        let a = run(&model, &params, &g, &[1, 2, 3]);
        let b = run(&model, &params, &g_perm, &[1, 2, 3]);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(Architecture::Coattention, FusionKind::Mfh, 2);
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let g = grid(&model.cfg, 21);
        let a = run(&model, &params, &g, &[1, 2, 3, 4]);
        let b = run(&model, &params, &g, &[1, 2, 3, 4]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn grid_shape_mismatch_is_an_error() {
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let bad = crate::Tensor::zeros(&[3, 6]);
        let mut ctx = PassCtx::new(&params, Mode::Infer, Rng::new(0));
        assert!(matches!(
            model.forward(&mut ctx, &bad, &[1]),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn param_count_total_matches_sum_of_shapes() {
        let cfg = tiny_cfg(Architecture::Coattention, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg).unwrap();
        let params = model.init_params::<f64>();
        let (table, total) = count_model_params(&params);
        assert_eq!(total, params.total_elements());
        assert_eq!(table.len(), params.len());
        assert!(table.iter().any(|(n, _)| n == "fusion.block0.proj_x.weight"));
    }

    #[test]
    fn mfh_order_two_doubles_fusion_subtotal() {
        let fusion_total = |order: usize| {
            let kind = if order == 1 {
                FusionKind::Mfb
            } else {
                FusionKind::Mfh
            };
            let cfg = tiny_cfg(Architecture::Baseline, kind, order);
            let mut model = VqaModel::new(cfg).unwrap();
            let params = model.init_params::<f64>();
            count_model_params(&params)
                .0
                .iter()
                .filter(|(n, _)| n.starts_with("fusion."))
                .map(|(_, c)| c)
                .sum::<usize>()
        };
        assert_eq!(fusion_total(2), 2 * fusion_total(1));
    }

    #[test]
    fn doubling_o_changes_fusion_subtotal_by_formula() {
        let fusion_total = |o: usize| {
            let mut cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
            cfg.fusion.mfb.o = o;
            let mut model = VqaModel::new(cfg).unwrap();
            let params = model.init_params::<f64>();
            count_model_params(&params)
                .0
                .iter()
                .filter(|(n, _)| n.starts_with("fusion."))
                .map(|(_, c)| c)
                .sum::<usize>()
        };
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let (m, n, k) = (cfg.fusion.mfb.m, cfg.fusion.mfb.n, cfg.fusion.mfb.k);
        // weights (m+n)·k·o plus the two k·o bias vectors
        let predicted = |o: usize| (m + n + 2) * k * o;
        assert_eq!(fusion_total(6) - fusion_total(3), predicted(6) - predicted(3));
    }

    #[test]
    fn key_set_is_config_determined() {
        let cfg = tiny_cfg(Architecture::Coattention, FusionKind::Mfh, 2);
        let mut m1 = VqaModel::new(cfg.clone()).unwrap();
        let mut cfg2 = cfg;
        cfg2.seed = 99;
        let mut m2 = VqaModel::new(cfg2).unwrap();
        let k1: Vec<String> = m1.init_params::<f64>().names().cloned().collect();
        let k2: Vec<String> = m2.init_params::<f64>().names().cloned().collect();
        assert_eq!(k1, k2);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(Architecture::Coattention, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg.clone()).unwrap();
        let params = model.init_params::<f64>();
        save_checkpoint(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        let mut model2 = VqaModel::new(cfg2).unwrap();
        model2.init_params::<f64>(); // populate fusion blocks
        let g = grid(&model.cfg, 31);
        let a = run(&model, &params, &g, &[1, 5, 6]);
        let b = run(&model2, &params2, &g, &[1, 5, 6]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let mut model = VqaModel::new(cfg.clone()).unwrap();
        save_checkpoint(&path, &cfg, &model.init_params::<f64>()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        std::fs::write(&path, b"junk").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        // fusion m that disagrees with the architecture width
        let mut cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        cfg.fusion.mfb.m += 1;
        assert!(VqaModel::new(cfg).is_err());
        // MFB with a cascade order
        let mut cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        cfg.fusion.order = 2;
        assert!(VqaModel::new(cfg).is_err());
    }

    #[test]
    fn tokenize_round_trip_and_oov() {
        let cfg = tiny_cfg(Architecture::Baseline, FusionKind::Mfb, 1);
        let model = VqaModel::new(cfg).unwrap();
        let words: Vec<String> = ["what", "color"].iter().map(|s| s.to_string()).collect();
        assert_eq!(model.tokenize(&words).unwrap(), vec![1, 2]);
        let bad = vec!["zebra".to_string()];
        assert!(model.tokenize(&bad).is_err());
    }
}
