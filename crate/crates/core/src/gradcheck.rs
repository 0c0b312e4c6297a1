//! Central finite-difference verification of backward rules.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking. Checks compare
//! elementwise with a relative tolerance of 1e-4, falling back to an
//! absolute tolerance of 1e-7 where the true gradient is below 1e-4.

use crate::error::Result;
use crate::params::{Mode, Params, PassCtx};
use crate::rng::Rng;
use crate::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Normalized error: ≤ REL_TOL means pass, for both branches of the
/// tolerance rule.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if numeric.abs() < REL_TOL && analytic.abs() < REL_TOL {
        diff / ABS_TOL * REL_TOL
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// A differentiable scalar-valued function of a list of tensors,
/// expressed as a graph builder so one definition serves both the
/// analytic and the numeric side.
pub type ScalarFn<'a> = &'a dyn Fn(&Graph, &[Var]) -> Result<Var>;

fn eval(f: ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    Ok(f(&g, &vars)?.value().scalar_value())
}

/// Worst normalized gradient error of `f` at `inputs`, over every
/// element of every input.
pub fn check_scalar_fn(f: ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&g, &vars)?;
    g.backward(&root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad()).collect();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= FD_STEP;
            let numeric = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * FD_STEP);
            worst = worst.max(grad_error(analytic[i].data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Uniform sample in [-2, 2] excluding a radius-`excl` neighborhood of
/// the listed non-smooth points.
pub fn sample_smooth(shape: &[usize], rng: &mut Rng, non_smooth: &[f64], excl: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| loop {
            let x = rng.uniform(-2.0, 2.0);
            if non_smooth.iter().all(|&p| (x - p).abs() > excl) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

/// A forward pass expressed against a parameter map; the same builder
/// serves the analytic side (one backward) and the numeric side
/// (re-evaluation at perturbed parameters, identical rng seed).
pub type ParamFn<'a> = &'a dyn Fn(&mut PassCtx<f64>) -> Result<Var>;

/// Worst normalized gradient error over every element of every
/// parameter that `build` binds.
pub fn check_param_fn(
    build: ParamFn,
    params: &Params<f64>,
    mode: Mode,
    seed: u64,
) -> Result<f64> {
    let mut ctx = PassCtx::new(params, mode, Rng::new(seed));
    let root = build(&mut ctx)?;
    ctx.graph.backward(&root)?;
    let grads = ctx.param_grads();

    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut ctx = PassCtx::new(p, mode, Rng::new(seed));
        Ok(build(&mut ctx)?.value().scalar_value())
    };

    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for e in 0..grad.numel() {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[e] += FD_STEP;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(grad_error(grad.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// Result of checking one operation over many random points.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub worst: f64,
    pub points: usize,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst <= REL_TOL
    }
}

/// Runs `f` at `points` random input draws and keeps the worst error.
pub fn check_op(
    name: &str,
    points: usize,
    mut draw: impl FnMut(&mut Rng) -> Vec<Tensor>,
    f: ScalarFn,
    rng: &mut Rng,
) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let inputs = draw(rng);
        worst = worst.max(check_scalar_fn(f, &inputs)?);
    }
    Ok(OpCheck {
        name: name.to_string(),
        worst,
        points,
    })
}

/// A fixed random weighting turns any tensor output into a scalar loss
/// without the uniform-gradient blind spot of a plain sum.
pub fn weighted_sum(g: &Graph, out: &Var, seed: u64) -> Result<Var> {
    let shape = out.shape();
    let mut wrng = Rng::new(seed ^ 0x57ED_0001);
    let w = g.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut wrng));
    Ok(out.hadamard(&w)?.sum_all())
}

/// Like [`check_param_fn`], but a draw that straddles a non-smooth
/// point (a ReLU kink, the power-norm origin) returns `None` so the
/// caller can redraw instead of reporting a false failure. Detection:
/// when an element fails at step h, re-estimate at h/10 — the two
/// numeric estimates agree for a genuine backward bug and diverge
/// across a kink.
pub fn check_param_fn_robust(
    build: ParamFn,
    params: &Params<f64>,
    mode: Mode,
    seed: u64,
) -> Result<Option<f64>> {
    let mut ctx = PassCtx::new(params, mode, Rng::new(seed));
    let root = build(&mut ctx)?;
    ctx.graph.backward(&root)?;
    let grads = ctx.param_grads();

    let eval = |p: &Params<f64>| -> Result<f64> {
        let mut ctx = PassCtx::new(p, mode, Rng::new(seed));
        Ok(build(&mut ctx)?.value().scalar_value())
    };
    let numeric_at = |name: &str, e: usize, h: f64| -> Result<f64> {
        let mut plus = params.clone();
        plus.get_mut(name)?.data_mut()[e] += h;
        let mut minus = params.clone();
        minus.get_mut(name)?.data_mut()[e] -= h;
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
    };

    let mut worst = 0.0f64;
    for (name, grad) in &grads {
        for e in 0..grad.numel() {
            let numeric = numeric_at(name, e, FD_STEP)?;
            let err = grad_error(grad.data()[e], numeric);
            if err > REL_TOL {
                let refined = numeric_at(name, e, FD_STEP / 10.0)?;
                let spread =
                    (numeric - refined).abs() / numeric.abs().max(refined.abs()).max(1.0);
                if spread > 0.01 {
                    return Ok(None);
                }
            }
            worst = worst.max(err);
        }
    }
    Ok(Some(worst))
}

pub use scopes::{run_scope, Scope};

mod scopes {
    use super::*;
    use crate::attention::{image_attention, question_self_attention, AttentionHead};
    use crate::autodiff::concat;
    use crate::fusion::{build_mfh_blocks, mfh_forward, MfbBlock, MfbConfig, MfhConfig, MlbBlock};
    use crate::layers::LstmCell;
    use crate::model::{Architecture, FusionKind, ModelConfig, VqaModel};

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Scope {
        Primitive,
        Fusion,
        Attention,
        Model,
    }

    fn t(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::uniform(shape, -2.0, 2.0, rng)
    }

    /// check_op wrapper with the weighted-sum reduction baked in.
    fn op(
        checks: &mut Vec<OpCheck>,
        rng: &mut Rng,
        name: &str,
        points: usize,
        draw: impl FnMut(&mut Rng) -> Vec<Tensor>,
        f: impl Fn(&Graph, &[Var]) -> Result<Var>,
    ) -> Result<()> {
        checks.push(check_op(name, points, draw, &f, rng)?);
        Ok(())
    }

    fn primitive_scope(seed: u64) -> Result<Vec<OpCheck>> {
        let rng = &mut Rng::new(seed).derive(0x707269);
        let c = &mut Vec::new();
        let n = 100;
        op(c, rng, "add", n, |r| vec![t(&[3, 4], r), t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].add(&v[1])?, 1)
        })?;
        op(c, rng, "sub", n, |r| vec![t(&[3, 4], r), t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].sub(&v[1])?, 2)
        })?;
        op(c, rng, "hadamard", n, |r| vec![t(&[3, 4], r), t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].hadamard(&v[1])?, 3)
        })?;
        op(c, rng, "matmul", n, |r| vec![t(&[3, 4], r), t(&[4, 2], r)], |g, v| {
            weighted_sum(g, &v[0].matmul(&v[1])?, 4)
        })?;
        op(c, rng, "scale", n, |r| vec![t(&[5], r)], |g, v| {
            weighted_sum(g, &v[0].scale(-1.7), 5)
        })?;
        op(c, rng, "transpose", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].transpose()?, 6)
        })?;
        op(c, rng, "reshape", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].reshape(&[2, 6])?, 7)
        })?;
        op(c, rng, "concat", n, |r| vec![t(&[2, 3], r), t(&[2, 3], r)], |g, v| {
            weighted_sum(g, &concat(g, &[v[0].clone(), v[1].clone()], 1)?, 8)
        })?;
        op(c, rng, "row", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].row(1)?, 9)
        })?;
        op(c, rng, "slice_cols", n, |r| vec![t(&[3, 5], r)], |g, v| {
            weighted_sum(g, &v[0].slice_cols(1, 4)?, 10)
        })?;
        op(c, rng, "gather_rows", n, |r| vec![t(&[4, 3], r)], |g, v| {
            weighted_sum(g, &v[0].gather_rows(&[0, 2, 1, 2])?, 11)
        })?;
        op(
            c,
            rng,
            "add_row_vector",
            n,
            |r| vec![t(&[3, 4], r), t(&[4], r)],
            |g, v| weighted_sum(g, &v[0].add_row_vector(&v[1])?, 12),
        )?;
        op(c, rng, "sum_all", n, |r| vec![t(&[3, 4], r)], |_, v| Ok(v[0].sum_all()))?;
        op(c, rng, "sum_rows", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].sum_rows()?, 13)
        })?;
        op(c, rng, "sum_cols", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].sum_cols()?, 14)
        })?;
        op(c, rng, "sum_pool", n, |r| vec![t(&[2, 6], r)], |g, v| {
            weighted_sum(g, &v[0].sum_pool(3)?, 15)
        })?;
        op(
            c,
            rng,
            "relu",
            n,
            |r| vec![sample_smooth(&[3, 4], r, &[0.0], 1e-3)],
            |g, v| weighted_sum(g, &v[0].relu(), 16),
        )?;
        op(c, rng, "tanh", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].tanh(), 17)
        })?;
        op(c, rng, "sigmoid", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].sigmoid(), 18)
        })?;
        op(c, rng, "exp", n, |r| vec![t(&[3, 4], r)], |g, v| {
            weighted_sum(g, &v[0].exp(), 19)
        })?;
        op(
            c,
            rng,
            "log",
            n,
            |r| vec![Tensor::uniform(&[3, 4], 0.1, 3.0, r)],
            |g, v| weighted_sum(g, &v[0].log(), 20),
        )?;
        op(c, rng, "softmax", n, |r| vec![t(&[6], r)], |g, v| {
            weighted_sum(g, &v[0].softmax(), 21)
        })?;
        op(
            c,
            rng,
            "power_norm",
            n,
            |r| vec![sample_smooth(&[2, 5], r, &[0.0], 1e-2)],
            |g, v| weighted_sum(g, &v[0].power_norm(), 22),
        )?;
        op(c, rng, "l2_normalize", n, |r| vec![t(&[2, 5], r)], |g, v| {
            weighted_sum(g, &v[0].l2_normalize(), 23)
        })?;
        Ok(std::mem::take(c))
    }

    /// Runs `points` successful robust param checks, redrawing past
    /// non-smooth draws, and keeps the worst error seen.
    fn param_op(
        name: &str,
        points: usize,
        seed: u64,
        setup: impl Fn(u64) -> Result<(Params<f64>, Box<dyn Fn(&mut PassCtx<f64>) -> Result<Var>>)>,
    ) -> Result<OpCheck> {
        let mut worst = 0.0f64;
        let mut done = 0usize;
        let mut draw = 0u64;
        while done < points {
            if draw > 10 * points as u64 + 10 {
                return Err(crate::Error::Mismatch(format!(
                    "gradcheck {name}: too many non-smooth draws"
                )));
            }
            let point_seed = seed.wrapping_add(draw).wrapping_mul(0x9E3779B97F4A7C15);
            let (params, build) = setup(point_seed)?;
            if let Some(w) = check_param_fn_robust(&*build, &params, Mode::Infer, point_seed)? {
                worst = worst.max(w);
                done += 1;
            }
            draw += 1;
        }
        Ok(OpCheck {
            name: name.to_string(),
            worst,
            points,
        })
    }

    fn fusion_scope(seed: u64) -> Result<Vec<OpCheck>> {
        let mut checks = Vec::new();
        let mk_block = |cfg: MfbConfig, point_seed: u64| -> (MfbBlock, Params<f64>, Tensor, Tensor) {
            let mut rng = Rng::new(point_seed);
            let (m, n) = (cfg.m, cfg.n);
            let block = MfbBlock::new(cfg).expect("valid config");
            let mut params = Params::new();
            block.register("mfb", &mut params, &mut rng);
            (block, params, t(&[1, m], &mut rng), t(&[1, n], &mut rng))
        };
        checks.push(param_op("mfb_raw", 20, seed, |s| {
            let mut cfg = MfbConfig::new(3, 4, 2, 3, 0.0);
            cfg.power_norm = false;
            cfg.l2_norm = false;
            let (block, params, x, y) = mk_block(cfg, s);
            Ok((
                params,
                Box::new(move |c| {
                    let xv = c.graph.constant(x.clone());
                    let yv = c.graph.constant(y.clone());
                    let out = block.raw(c, "mfb", &xv, &yv)?;
                    weighted_sum(&c.graph, &out, 31)
                }),
            ))
        })?);
        checks.push(param_op("mfb", 10, seed ^ 1, |s| {
            let (block, params, x, y) = mk_block(MfbConfig::new(3, 4, 2, 3, 0.0), s);
            Ok((
                params,
                Box::new(move |c| {
                    let xv = c.graph.constant(x.clone());
                    let yv = c.graph.constant(y.clone());
                    let out = block.forward(c, "mfb", &xv, &yv)?;
                    weighted_sum(&c.graph, &out, 32)
                }),
            ))
        })?);
        checks.push(param_op("mfh_p2", 10, seed ^ 2, |s| {
            let cfg = MfhConfig {
                order: 2,
                mfb: MfbConfig::new(3, 4, 2, 3, 0.0),
            };
            let mut rng = Rng::new(s);
            let mut params = Params::new();
            let blocks = build_mfh_blocks(&cfg, "mfh", &mut params, &mut rng)?;
            let x = t(&[1, 3], &mut rng);
            let y = t(&[1, 4], &mut rng);
            Ok((
                params,
                Box::new(move |c| {
                    let xv = c.graph.constant(x.clone());
                    let yv = c.graph.constant(y.clone());
                    let out = mfh_forward(&blocks, c, "mfh", &xv, &yv)?;
                    weighted_sum(&c.graph, &out, 33)
                }),
            ))
        })?);
        checks.push(param_op("mlb", 20, seed ^ 3, |s| {
            let mut rng = Rng::new(s);
            let block = MlbBlock::new(3, 4, 5)?;
            let mut params = Params::new();
            block.register("mlb", &mut params, &mut rng);
            let x = t(&[1, 3], &mut rng);
            let y = t(&[1, 4], &mut rng);
            Ok((
                params,
                Box::new(move |c| {
                    let xv = c.graph.constant(x.clone());
                    let yv = c.graph.constant(y.clone());
                    let out = block.forward(c, "mlb", &xv, &yv)?;
                    weighted_sum(&c.graph, &out, 34)
                }),
            ))
        })?);
        Ok(checks)
    }

    fn attention_scope(seed: u64) -> Result<Vec<OpCheck>> {
        let mut checks = Vec::new();
        checks.push(param_op("question_self_attention", 10, seed, |s| {
            let mut rng = Rng::new(s);
            let head = AttentionHead::new(4, 3, 2)?;
            let mut params = Params::new();
            head.register("qatt", &mut params, &mut rng);
            let states = t(&[5, 4], &mut rng);
            let pad_mask = vec![false, false, false, true, true];
            Ok((
                params,
                Box::new(move |c| {
                    let sv = c.graph.constant(states.clone());
                    let out = question_self_attention(&head, c, "qatt", &sv, &pad_mask)?;
                    weighted_sum(&c.graph, &out.attended, 41)
                }),
            ))
        })?);
        checks.push(param_op("image_attention", 5, seed ^ 1, |s| {
            let mut rng = Rng::new(s);
            let fuse = MfbBlock::new(MfbConfig::new(6, 4, 2, 3, 0.0))?;
            let head = AttentionHead::new(3, 3, 2)?;
            let mut params = Params::new();
            fuse.register("iatt.fuse", &mut params, &mut rng);
            head.register("iatt.head", &mut params, &mut rng);
            let grids = t(&[4, 6], &mut rng);
            let q_att = t(&[1, 4], &mut rng);
            Ok((
                params,
                Box::new(move |c| {
                    let gv = c.graph.constant(grids.clone());
                    let qv = c.graph.constant(q_att.clone());
                    let out = image_attention(&head, &fuse, c, "iatt", &gv, &qv)?;
                    weighted_sum(&c.graph, &out.attended, 42)
                }),
            ))
        })?);
        Ok(checks)
    }

    fn tiny_model_cfg(architecture: Architecture) -> ModelConfig {
        let (h, d_img, q_g, i_g) = (4, 6, 2, 2);
        let (m, n) = match architecture {
            Architecture::Baseline => (d_img, h),
            Architecture::Coattention => (i_g * d_img, q_g * h),
        };
        ModelConfig {
            architecture,
            fusion_kind: FusionKind::Mfb,
            question_vocab: (0..7).map(|i| format!("w{i}")).collect(),
            answer_vocab: (0..5).map(|i| format!("a{i}")).collect(),
            embedding_dim: 3,
            lstm_hidden: h,
            image_dim: d_img,
            grid_count: 4,
            max_question_len: 5,
            fusion: MfhConfig {
                order: 1,
                mfb: MfbConfig::new(m, n, 2, 3, 0.0),
            },
            q_glimpses: q_g,
            i_glimpses: i_g,
            att_hidden: 3,
            seed: 0,
        }
    }

    fn model_scope(seed: u64) -> Result<Vec<OpCheck>> {
        let mut checks = Vec::new();
        checks.push(param_op("lstm_cell", 10, seed, |s| {
            let mut rng = Rng::new(s);
            let cell = LstmCell::new(3, 4);
            let mut params = Params::new();
            cell.register("lstm", &mut params, &mut rng);
            let xs: Vec<Tensor> = (0..3).map(|_| t(&[1, 3], &mut rng)).collect();
            Ok((
                params,
                Box::new(move |c| {
                    let mut h = c.graph.constant(Tensor::zeros(&[1, 4]));
                    let mut cc = c.graph.constant(Tensor::zeros(&[1, 4]));
                    for x in &xs {
                        let xv = c.graph.constant(x.clone());
                        let (hn, cn) = cell.step(c, "lstm", &xv, &h, &cc)?;
                        h = hn;
                        cc = cn;
                    }
                    weighted_sum(&c.graph, &h, 51)
                }),
            ))
        })?);

        // KLD through softmax, FD over the logits; the target
        // distribution is a constant of each point
        checks.push(param_op("kld_loss", 20, seed ^ 1, |s| {
            let mut rng = Rng::new(s);
            let mut y = Tensor::uniform(&[5], 0.05, 1.0, &mut rng);
            let total: f64 = y.data().iter().sum();
            for v in y.data_mut() {
                *v /= total;
            }
            let mut params = Params::new();
            params.insert("logits", t(&[5], &mut rng));
            Ok((
                params,
                Box::new(move |c| {
                    let z = c.bind("logits")?.softmax();
                    crate::answer::kld_loss(&c.graph, &y, &z)
                }),
            ))
        })?);

        for (name, arch) in [
            ("forward_baseline", Architecture::Baseline),
            ("forward_coattention", Architecture::Coattention),
        ] {
            checks.push(param_op(name, 3, seed ^ 2, move |s| {
                let mut cfg = tiny_model_cfg(arch);
                cfg.seed = s;
                let mut model = VqaModel::new(cfg)?;
                let params = model.init_params::<f64>();
                let mut rng = Rng::new(s ^ 0xABCD);
                let grid = t(&[model.cfg.grid_count, model.cfg.image_dim], &mut rng);
                let tokens = vec![1usize, 3, 5];
                Ok((
                    params,
                    Box::new(move |c| {
                        let logits = model.forward(c, &grid, &tokens)?;
                        weighted_sum(&c.graph, &logits, 52)
                    }),
                ))
            })?);
        }
        Ok(checks)
    }

    /// The finite-difference suite for one scope; each op in the scope
    /// appears exactly once in the report.
    pub fn run_scope(scope: Scope, seed: u64) -> Result<Vec<OpCheck>> {
        match scope {
            Scope::Primitive => primitive_scope(seed),
            Scope::Fusion => fusion_scope(seed),
            Scope::Attention => attention_scope(seed),
            Scope::Model => model_scope(seed),
        }
    }
}
