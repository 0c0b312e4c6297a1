//! Trainable layers: linear projection, embedding, LSTM cell, dropout,
//! question encoding.
//!
//! A layer struct carries dimensions only; its tensors live in a
//! [`Params`] map under `<prefix>.<field>` names and are bound into the
//! graph through the [`PassCtx`].

use crate::autodiff::{concat, Var};
use crate::error::{Error, Result};
use crate::params::{Mode, Params, PassCtx};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Xavier-uniform in ±sqrt(6/(fan_in+fan_out)).
pub fn xavier<F: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn without_bias(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            bias: false,
        }
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        params.insert(
            format!("{prefix}.weight"),
            xavier(&[self.in_dim, self.out_dim], self.in_dim, self.out_dim, rng),
        );
        if self.bias {
            params.insert(format!("{prefix}.bias"), Tensor::zeros(&[self.out_dim]));
        }
    }

    /// x·W (+ bias broadcast over rows); x is [batch×in].
    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x: &Var<F>,
    ) -> Result<Var<F>> {
        let w = ctx.bind(&format!("{prefix}.weight"))?;
        let y = x.matmul(&w)?;
        if self.bias {
            let b = ctx.bind(&format!("{prefix}.bias"))?;
            y.add_row_vector(&b)
        } else {
            Ok(y)
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias { self.out_dim } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(vocab: usize, dim: usize) -> Self {
        Embedding { vocab, dim }
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        params.insert(
            format!("{prefix}.table"),
            xavier(&[self.vocab, self.dim], self.vocab, self.dim, rng),
        );
    }

    pub fn forward<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        token_ids: &[usize],
    ) -> Result<Var<F>> {
        for &id in token_ids {
            if id >= self.vocab {
                return Err(Error::TokenOutOfVocab {
                    id,
                    vocab: self.vocab,
                });
            }
        }
        let table = ctx.bind(&format!("{prefix}.table"))?;
        table.gather_rows(token_ids)
    }
}

/// LSTM cell with gate order (input, forget, cell-candidate, output)
/// packed along the 4h axis.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(in_dim: usize, hidden: usize) -> Self {
        LstmCell { in_dim, hidden }
    }

    pub fn register<F: Scalar>(&self, prefix: &str, params: &mut Params<F>, rng: &mut Rng) {
        let h = self.hidden;
        params.insert(
            format!("{prefix}.w_ih"),
            xavier(&[self.in_dim, 4 * h], self.in_dim, 4 * h, rng),
        );
        params.insert(
            format!("{prefix}.w_hh"),
            xavier(&[h, 4 * h], h, 4 * h, rng),
        );
        // forget-gate bias starts at 1 so early training does not flush
        // the cell state
        let mut bias = Tensor::zeros(&[4 * h]);
        for j in h..2 * h {
            bias.data_mut()[j] = F::one();
        }
        params.insert(format!("{prefix}.bias"), bias);
    }

    /// One recurrence step; all of x_t, h_prev, c_prev are [1×dim].
    pub fn step<F: Scalar>(
        &self,
        ctx: &mut PassCtx<F>,
        prefix: &str,
        x_t: &Var<F>,
        h_prev: &Var<F>,
        c_prev: &Var<F>,
    ) -> Result<(Var<F>, Var<F>)> {
        let h = self.hidden;
        let w_ih = ctx.bind(&format!("{prefix}.w_ih"))?;
        let w_hh = ctx.bind(&format!("{prefix}.w_hh"))?;
        let bias = ctx.bind(&format!("{prefix}.bias"))?;
        let gates = x_t
            .matmul(&w_ih)?
            .add(&h_prev.matmul(&w_hh)?)?
            .add_row_vector(&bias)?;
        let i = gates.slice_cols(0, h)?.sigmoid();
        let f = gates.slice_cols(h, 2 * h)?.sigmoid();
        let g = gates.slice_cols(2 * h, 3 * h)?.tanh();
        let o = gates.slice_cols(3 * h, 4 * h)?.sigmoid();
        let c = f.hadamard(c_prev)?.add(&i.hadamard(&g)?)?;
        let h_out = o.hadamard(&c.tanh())?;
        Ok((h_out, c))
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.in_dim + self.hidden + 1)
    }
}

/// Inverted dropout: zero with probability p, scale survivors by
/// 1/(1-p). Inference mode is exactly the identity.
pub fn dropout<F: Scalar>(ctx: &mut PassCtx<F>, x: &Var<F>, p: f64) -> Result<Var<F>> {
    assert!((0.0..1.0).contains(&p), "dropout ratio {p} outside [0,1)");
    if p == 0.0 || ctx.mode == Mode::Infer {
        return Ok(x.clone());
    }
    let shape = x.shape();
    let keep = F::c(1.0 / (1.0 - p));
    let numel: usize = shape.iter().product();
    let mask_data: Vec<F> = (0..numel)
        .map(|_| {
            if ctx.rng.next_f64() < p {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    let mask = ctx.graph.constant(Tensor::new(shape, mask_data)?);
    x.hadamard(&mask)
}

pub struct QuestionEncoding<F: Scalar> {
    /// Per-timestep hidden states, [T×h]; pad rows carry the state
    /// computed with the pad embedding and are masked downstream.
    pub states: Var<F>,
    /// Hidden state at the last non-pad position, [1×h].
    pub last: Var<F>,
    /// true at padded positions.
    pub pad_mask: Vec<bool>,
}

/// Embeds and runs the token sequence through the LSTM, padding to
/// `max_len` with `pad_id`.
pub fn encode_question<F: Scalar>(
    ctx: &mut PassCtx<F>,
    embedding: &Embedding,
    embedding_prefix: &str,
    cell: &LstmCell,
    cell_prefix: &str,
    tokens: &[usize],
    max_len: usize,
    pad_id: usize,
) -> Result<QuestionEncoding<F>> {
    if tokens.is_empty() {
        return Err(Error::EmptyTokens);
    }
    if tokens.len() > max_len {
        return Err(Error::QuestionTooLong {
            len: tokens.len(),
            max: max_len,
        });
    }
    let mut padded = tokens.to_vec();
    padded.resize(max_len, pad_id);
    let embedded = embedding.forward(ctx, embedding_prefix, &padded)?;

    let h = cell.hidden;
    let mut h_t = ctx.graph.constant(Tensor::zeros(&[1, h]));
    let mut c_t = ctx.graph.constant(Tensor::zeros(&[1, h]));
    let mut states = Vec::with_capacity(max_len);
    let mut last = None;
    for t in 0..max_len {
        let x_t = embedded.row(t)?;
        let (h_next, c_next) = cell.step(ctx, cell_prefix, &x_t, &h_t, &c_t)?;
        h_t = h_next;
        c_t = c_next;
        states.push(h_t.clone());
        if t + 1 == tokens.len() {
            last = Some(h_t.clone());
        }
    }
    let states = concat(&ctx.graph, &states, 0)?;
    let pad_mask = (0..max_len).map(|t| t >= tokens.len()).collect();
    Ok(QuestionEncoding {
        states,
        last: last.expect("tokens nonempty"),
        pad_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_fn, REL_TOL};
    use crate::{Graph, Tensor};

    fn ctx<'a>(params: &'a Params<f64>, mode: Mode, seed: u64) -> PassCtx<'a, f64> {
        PassCtx::new(params, mode, Rng::new(seed))
    }

    #[test]
    fn linear_identity_and_arithmetic() {
        let layer = Linear::new(2, 2);
        let mut params: Params<f64> = Params::new();
        params.insert(
            "lin.weight",
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        params.insert("lin.bias", Tensor::zeros(&[2]));
        let mut c = ctx(&params, Mode::Infer, 0);
        let x = c.graph.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let y = layer.forward(&mut c, "lin", &x).unwrap();
        assert_eq!(y.value().data(), &[3.0, 4.0]);

        let layer1 = Linear::new(2, 1);
        let mut p2: Params<f64> = Params::new();
        p2.insert("l.weight", Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
        p2.insert("l.bias", Tensor::from_vec(vec![1.0]));
        let mut c2 = ctx(&p2, Mode::Infer, 0);
        let x2 = c2.graph.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let y2 = layer1.forward(&mut c2, "l", &x2).unwrap();
        assert_eq!(y2.value().data(), &[6.0]);
    }

    #[test]
    fn linear_gradient_check() {
        let layer = Linear::new(3, 2);
        let mut rng = Rng::new(11);
        let mut params: Params<f64> = Params::new();
        layer.register("lin", &mut params, &mut rng);
        let x = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let worst = check_param_fn(
            &|c| {
                let xv = c.graph.constant(x.clone());
                Ok(layer.forward(c, "lin", &xv)?.sum_all())
            },
            &params,
            Mode::Infer,
            0,
        )
        .unwrap();
        assert!(worst <= REL_TOL, "worst rel err {worst}");
    }

    #[test]
    fn lstm_zero_weights_fixed_point() {
        let cell = LstmCell::new(3, 2);
        let mut params: Params<f64> = Params::new();
        params.insert("lstm.w_ih", Tensor::zeros(&[3, 8]));
        params.insert("lstm.w_hh", Tensor::zeros(&[2, 8]));
        params.insert("lstm.bias", Tensor::zeros(&[8]));
        let mut c = ctx(&params, Mode::Infer, 0);
        let x = c.graph.constant(Tensor::from_rows(&[vec![0.7, -1.0, 2.0]]).unwrap());
        let h0 = c.graph.constant(Tensor::zeros(&[1, 2]));
        let c0 = c.graph.constant(Tensor::zeros(&[1, 2]));
        let (h, cc) = cell.step(&mut c, "lstm", &x, &h0, &c0).unwrap();
        // all gates sit at sigma(0)=0.5, candidate tanh(0)=0, so both
        // states stay exactly zero
        assert_eq!(cc.value().data(), &[0.0, 0.0]);
        assert_eq!(h.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_saturated_forget_preserves_cell() {
        let cell = LstmCell::new(2, 3);
        let mut params: Params<f64> = Params::new();
        params.insert("lstm.w_ih", Tensor::zeros(&[2, 12]));
        params.insert("lstm.w_hh", Tensor::zeros(&[3, 12]));
        // forget bias +30 (gate -> 1), input bias -30 (gate -> 0)
        let mut bias = Tensor::zeros(&[12]);
        for j in 0..3 {
            bias.data_mut()[j] = -30.0;
            bias.data_mut()[3 + j] = 30.0;
        }
        params.insert("lstm.bias", bias);
        let mut c = ctx(&params, Mode::Infer, 0);
        let x = c.graph.constant(Tensor::from_rows(&[vec![0.3, -0.9]]).unwrap());
        let h0 = c.graph.constant(Tensor::zeros(&[1, 3]));
        let c_prev = Tensor::from_rows(&[vec![0.8, -0.5, 1.0]]).unwrap();
        let c0 = c.graph.constant(c_prev.clone());
        let (_, c_next) = cell.step(&mut c, "lstm", &x, &h0, &c0).unwrap();
        assert!(c_next.value().max_abs_diff(&c_prev) < 1e-6);
    }

    #[test]
    fn lstm_three_step_gradient_check() {
        let cell = LstmCell::new(2, 3);
        let mut rng = Rng::new(5);
        let mut params: Params<f64> = Params::new();
        cell.register("lstm", &mut params, &mut rng);
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[1, 2], -1.0, 1.0, &mut rng))
            .collect();
        let worst = check_param_fn(
            &|c| {
                let mut h = c.graph.constant(Tensor::zeros(&[1, 3]));
                let mut cc = c.graph.constant(Tensor::zeros(&[1, 3]));
                for x in &xs {
                    let xv = c.graph.constant(x.clone());
                    let (hn, cn) = cell.step(c, "lstm", &xv, &h, &cc)?;
                    h = hn;
                    cc = cn;
                }
                Ok(h.sum_all())
            },
            &params,
            Mode::Infer,
            0,
        )
        .unwrap();
        assert!(worst <= REL_TOL, "worst rel err {worst}");
    }

    #[test]
    fn dropout_identities() {
        let params: Params<f64> = Params::new();
        let mut c = ctx(&params, Mode::Train, 1);
        let x = c.graph.constant(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
        assert_eq!(dropout(&mut c, &x, 0.0).unwrap().value(), x.value());

        let mut c2 = ctx(&params, Mode::Infer, 1);
        let x2 = c2.graph.constant(Tensor::from_vec(vec![0.5, 0.25]));
        assert_eq!(dropout(&mut c2, &x2, 0.5).unwrap().value(), x2.value());
    }

    #[test]
    fn dropout_preserves_mean() {
        let params: Params<f64> = Params::new();
        let mut c = ctx(&params, Mode::Train, 99);
        let x = c.graph.constant(Tensor::ones(&[100_000]));
        let y = dropout(&mut c, &x, 0.5).unwrap().value();
        let mean = y.sum() / 100_000.0;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
    }

    #[test]
    fn softmax_gradient_check() {
        let mut rng = Rng::new(13);
        let x = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);
        let worst = crate::gradcheck::check_scalar_fn(
            &|g: &Graph, vars: &[crate::Var]| {
                crate::gradcheck::weighted_sum(g, &vars[0].softmax(), 7)
            },
            &[x],
        )
        .unwrap();
        assert!(worst <= REL_TOL, "worst rel err {worst}");
    }

    fn toy_encoder() -> (Embedding, LstmCell, Params<f64>) {
        let embedding = Embedding::new(6, 4);
        let cell = LstmCell::new(4, 3);
        let mut rng = Rng::new(21);
        let mut params: Params<f64> = Params::new();
        embedding.register("embed", &mut params, &mut rng);
        cell.register("lstm", &mut params, &mut rng);
        (embedding, cell, params)
    }

    #[test]
    fn encode_question_rejects_empty_and_oov() {
        let (embedding, cell, params) = toy_encoder();
        let mut c = ctx(&params, Mode::Infer, 0);
        let err = encode_question(&mut c, &embedding, "embed", &cell, "lstm", &[], 4, 0);
        assert!(matches!(err, Err(Error::EmptyTokens)));
        let err = encode_question(&mut c, &embedding, "embed", &cell, "lstm", &[9], 4, 0);
        assert!(matches!(err, Err(Error::TokenOutOfVocab { id: 9, vocab: 6 })));
    }

    #[test]
    fn encode_question_length_one() {
        let (embedding, cell, params) = toy_encoder();
        let mut c = ctx(&params, Mode::Infer, 0);
        let enc = encode_question(&mut c, &embedding, "embed", &cell, "lstm", &[2], 1, 0).unwrap();
        assert_eq!(enc.states.value().data(), enc.last.value().data());
        assert_eq!(enc.pad_mask, vec![false]);
    }

    #[test]
    fn encode_question_last_state_ignores_trailing_padding() {
        let (embedding, cell, params) = toy_encoder();
        let tokens = [3usize, 1, 4];
        let mut c1 = ctx(&params, Mode::Infer, 0);
        let short = encode_question(&mut c1, &embedding, "embed", &cell, "lstm", &tokens, 3, 0)
            .unwrap();
        let mut c2 = ctx(&params, Mode::Infer, 0);
        let long = encode_question(&mut c2, &embedding, "embed", &cell, "lstm", &tokens, 7, 0)
            .unwrap();
        assert_eq!(short.last.value(), long.last.value());
        assert_eq!(long.pad_mask, vec![false, false, false, true, true, true, true]);
    }

    #[test]
    fn encode_question_deterministic() {
        let (embedding, cell, params) = toy_encoder();
        let run = || {
            let mut c = ctx(&params, Mode::Infer, 7);
            encode_question(&mut c, &embedding, "embed", &cell, "lstm", &[1, 2, 3], 5, 0)
                .unwrap()
                .states
                .value()
        };
        assert_eq!(run(), run());
    }
}
