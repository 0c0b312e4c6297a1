//! Differentiable operations on [`Var`].
//!
//! Each op computes its forward value eagerly and registers a backward
//! rule that maps the output gradient to per-parent gradients. Rules
//! capture clones of whatever forward values they need, so backward
//! never has to re-read the graph.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<F: Scalar> Var<F> {
    pub(crate) fn unary(&self, f: impl Fn(F) -> F, df: impl Fn(F, F) -> F + 'static) -> Var<F> {
        let x = self.value();
        let y = x.map(f);
        let xin = x.clone();
        let yout = y.clone();
        self.graph().push(
            y,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(xin.shape());
                for ((d, &gi), (&xi, &yi)) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(xin.data().iter().zip(yout.data()))
                {
                    *d = gi * df(xi, yi);
                }
                vec![dx]
            })),
        )
    }

    pub fn add(&self, other: &Var<F>) -> Result<Var<F>> {
        let y = self.value().add(&other.value())?;
        Ok(self.graph().push(
            y,
            vec![self.id(), other.id()],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&self, other: &Var<F>) -> Result<Var<F>> {
        let y = self.value().sub(&other.value())?;
        Ok(self.graph().push(
            y,
            vec![self.id(), other.id()],
            Some(Box::new(move |g| vec![g.clone(), g.scale(-F::one())])),
        ))
    }

    /// Elementwise product; backward is dA = dC∘B, dB = dC∘A.
    pub fn hadamard(&self, other: &Var<F>) -> Result<Var<F>> {
        let a = self.value();
        let b = other.value();
        let y = a.hadamard(&b)?;
        Ok(self.graph().push(
            y,
            vec![self.id(), other.id()],
            Some(Box::new(move |g| {
                vec![g.hadamard(&b).unwrap(), g.hadamard(&a).unwrap()]
            })),
        ))
    }

    /// Matrix product; backward is dA = dC·Bᵀ, dB = Aᵀ·dC.
    pub fn matmul(&self, other: &Var<F>) -> Result<Var<F>> {
        let a = self.value();
        let b = other.value();
        let y = a.matmul(&b)?;
        Ok(self.graph().push(
            y,
            vec![self.id(), other.id()],
            Some(Box::new(move |g| {
                let da = g.matmul(&b.transpose().unwrap()).unwrap();
                let db = a.transpose().unwrap().matmul(g).unwrap();
                vec![da, db]
            })),
        ))
    }

    pub fn scale(&self, c: f64) -> Var<F> {
        let s = F::c(c);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Var<F> {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var<F> {
        self.unary(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn tanh(&self) -> Var<F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<F> {
        self.unary(
            |x| F::one() / (F::one() + (-x).exp()),
            |_, y| y * (F::one() - y),
        )
    }

    pub fn exp(&self) -> Var<F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn log(&self) -> Var<F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    /// Signed square root, sign(x)·|x|^0.5. The derivative at 0 is
    /// clamped to 0 (the true derivative is unbounded there).
    pub fn power_norm(&self) -> Var<F> {
        let half = F::c(0.5);
        self.unary(
            |x| x.signum() * x.abs().sqrt(),
            move |x, y| {
                if x == F::zero() {
                    F::zero()
                } else {
                    half / y.abs()
                }
            },
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&self) -> Var<F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.graph().push(
            y,
            vec![self.id()],
            Some(Box::new(move |g| {
                vec![Tensor::full(&shape, g.scalar_value())]
            })),
        )
    }

    /// Column sums of a 2-D tensor: [r×c] → [c].
    pub fn sum_rows(&self) -> Result<Var<F>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "sum_rows needs rank 2, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x.at2(i, j);
            }
        }
        Ok(self.graph().push(
            Tensor::from_vec(out),
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = g.data()[j];
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Row sums of a 2-D tensor: [r×c] → [r].
    pub fn sum_cols(&self) -> Result<Var<F>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "sum_cols needs rank 2, got {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        let out: Vec<F> = (0..r)
            .map(|i| (0..c).map(|j| x.at2(i, j)).sum())
            .collect();
        Ok(self.graph().push(
            Tensor::from_vec(out),
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = g.data()[i];
                    }
                }
                vec![dx]
            })),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<F>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.graph().push(
            y,
            vec![self.id()],
            Some(Box::new(move |g| vec![g.reshape(&old).unwrap()])),
        ))
    }

    pub fn transpose(&self) -> Result<Var<F>> {
        let y = self.value().transpose()?;
        Ok(self.graph().push(
            y,
            vec![self.id()],
            Some(Box::new(move |g| vec![g.transpose().unwrap()])),
        ))
    }

    /// Non-overlapping window-k sum pooling along the last axis.
    pub fn sum_pool(&self, k: usize) -> Result<Var<F>> {
        let x = self.value();
        let d = *x.shape().last().expect("nonempty shape");
        if k == 0 || d % k != 0 {
            return Err(Error::NotDivisible { len: d, k });
        }
        let rows = x.numel() / d;
        let dout = d / k;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = dout;
        let mut out = vec![F::zero(); rows * dout];
        for r in 0..rows {
            for j in 0..dout {
                let base = r * d + j * k;
                out[r * dout + j] = (0..k).map(|t| x.data()[base + t]).sum();
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.graph().push(
            Tensor::new(out_shape, out)?,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&in_shape);
                for r in 0..rows {
                    for j in 0..dout {
                        let gv = g.data()[r * dout + j];
                        for t in 0..k {
                            dx.data_mut()[r * d + j * k + t] = gv;
                        }
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// ℓ2 normalization per last-axis slice, with an epsilon floor so
    /// the zero vector maps to the zero vector.
    pub fn l2_normalize(&self) -> Var<F> {
        let eps = F::c(1e-12);
        let x = self.value();
        let d = *x.shape().last().expect("nonempty shape");
        let rows = x.numel() / d;
        let mut out = x.clone();
        let mut norms = vec![F::zero(); rows];
        for r in 0..rows {
            let slice = &x.data()[r * d..(r + 1) * d];
            let n = slice.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            norms[r] = n;
            for v in &mut out.data_mut()[r * d..(r + 1) * d] {
                *v = *v / n;
            }
        }
        let y = out.clone();
        self.graph().push(
            out,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let n = norms[r];
                    for ((o, &gi), &yi) in dx.data_mut()[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .zip(yr)
                    {
                        *o = (gi - yi * dot) / n;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Max-subtracted softmax per last-axis slice.
    pub fn softmax(&self) -> Var<F> {
        let x = self.value();
        let d = *x.shape().last().expect("nonempty shape");
        let rows = x.numel() / d;
        let mut out = x.clone();
        for r in 0..rows {
            let slice = &mut out.data_mut()[r * d..(r + 1) * d];
            let m = slice.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for v in slice.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in slice.iter_mut() {
                *v = *v / z;
            }
        }
        let y = out.clone();
        self.graph().push(
            out,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in dx.data_mut()[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(gr)
                        .zip(yr)
                    {
                        *o = yi * (gi - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Columns [lo, hi) of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Var<F>> {
        let x = self.value();
        if x.shape().len() != 2 || hi > x.cols() || lo >= hi {
            return Err(Error::InvalidShape(format!(
                "slice_cols {lo}..{hi} on shape {:?}",
                x.shape()
            )));
        }
        let (r, c, w) = (x.rows(), x.cols(), hi - lo);
        let mut out = vec![F::zero(); r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&x.data()[i * c + lo..i * c + hi]);
        }
        Ok(self.graph().push(
            Tensor::new(vec![r, w], out)?,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    dx.data_mut()[i * c + lo..i * c + hi].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![dx]
            })),
        ))
    }

    /// Row i of a 2-D tensor, as [1×c].
    pub fn row(&self, i: usize) -> Result<Var<F>> {
        let x = self.value();
        if x.shape().len() != 2 || i >= x.rows() {
            return Err(Error::InvalidShape(format!(
                "row {i} on shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        let out = x.data()[i * c..(i + 1) * c].to_vec();
        Ok(self.graph().push(
            Tensor::new(vec![1, c], out)?,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[r, c]);
                dx.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
                vec![dx]
            })),
        ))
    }

    /// Gathers rows of a 2-D table; backward scatter-adds, so repeated
    /// indices accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var<F>> {
        let x = self.value();
        if x.shape().len() != 2 {
            return Err(Error::InvalidShape(format!(
                "gather_rows on shape {:?}",
                x.shape()
            )));
        }
        let (r, c) = (x.rows(), x.cols());
        for &i in indices {
            if i >= r {
                return Err(Error::TokenOutOfVocab { id: i, vocab: r });
            }
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(self.graph().push(
            Tensor::new(vec![indices.len(), c], out)?,
            vec![self.id()],
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(&[r, c]);
                for (pos, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx.data_mut()[i * c + j] += g.data()[pos * c + j];
                    }
                }
                vec![dx]
            })),
        ))
    }

    /// Broadcast-adds a length-c vector to every row of [r×c].
    pub fn add_row_vector(&self, bias: &Var<F>) -> Result<Var<F>> {
        let x = self.value();
        let b = bias.value();
        if x.shape().len() != 2 || b.shape().len() != 1 || b.numel() != x.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row_vector",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = x.clone();
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] += b.data()[j];
            }
        }
        Ok(self.graph().push(
            out,
            vec![self.id(), bias.id()],
            Some(Box::new(move |g| {
                let mut db = Tensor::zeros(&[c]);
                for i in 0..r {
                    for j in 0..c {
                        db.data_mut()[j] += g.data()[i * c + j];
                    }
                }
                vec![g.clone(), db]
            })),
        ))
    }
}

/// Concatenation along `axis` (0 or 1 for 2-D inputs, 0 for 1-D).
pub fn concat<F: Scalar>(graph: &Graph<F>, vars: &[Var<F>], axis: usize) -> Result<Var<F>> {
    if vars.is_empty() {
        return Err(Error::InvalidShape("concat of zero tensors".into()));
    }
    let values: Vec<Tensor<F>> = vars.iter().map(|v| v.value()).collect();
    let rank = values[0].shape().len();
    if axis >= rank || values.iter().any(|v| v.shape().len() != rank) {
        return Err(Error::InvalidShape(format!(
            "concat axis {axis} over ranks {:?}",
            values.iter().map(|v| v.shape().len()).collect::<Vec<_>>()
        )));
    }
    for v in &values[1..] {
        for d in 0..rank {
            if d != axis && v.shape()[d] != values[0].shape()[d] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
    }

    let mut out_shape = values[0].shape().to_vec();
    out_shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let parents: Vec<usize> = vars.iter().map(|v| v.id()).collect();
    let in_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();

    let out = if axis == rank - 1 {
        // interleave rows
        let rows: usize = out_shape[..rank - 1].iter().product();
        let widths: Vec<usize> = in_shapes.iter().map(|s| s[rank - 1]).collect();
        let total_w = out_shape[rank - 1];
        let mut data = vec![F::zero(); rows * total_w];
        for r in 0..rows {
            let mut off = 0;
            for (v, &w) in values.iter().zip(&widths) {
                data[r * total_w + off..r * total_w + off + w]
                    .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
                off += w;
            }
        }
        Tensor::new(out_shape.clone(), data)?
    } else {
        // axis 0 of 2-D: stack blocks
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for v in &values {
            data.extend_from_slice(v.data());
        }
        Tensor::new(out_shape.clone(), data)?
    };

    Ok(graph.push(
        out,
        parents,
        Some(Box::new(move |g| {
            let rank = in_shapes[0].len();
            if axis == rank - 1 {
                let rows: usize = in_shapes[0][..rank - 1].iter().product();
                let total_w: usize = in_shapes.iter().map(|s| s[rank - 1]).sum();
                let mut grads = Vec::with_capacity(in_shapes.len());
                let mut off = 0;
                for s in &in_shapes {
                    let w = s[rank - 1];
                    let mut dx = Tensor::zeros(s);
                    for r in 0..rows {
                        dx.data_mut()[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data()[r * total_w + off..r * total_w + off + w]);
                    }
                    off += w;
                    grads.push(dx);
                }
                grads
            } else {
                let mut grads = Vec::with_capacity(in_shapes.len());
                let mut off = 0;
                for s in &in_shapes {
                    let n: usize = s.iter().product();
                    let mut dx = Tensor::zeros(s);
                    dx.data_mut().copy_from_slice(&g.data()[off..off + n]);
                    off += n;
                    grads.push(dx);
                }
                grads
            }
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::concat;
    use crate::autodiff::Graph;
    use crate::error::Error;
    use crate::tensor::Tensor;

    type T = Tensor<f64>;

    #[test]
    fn backward_sum_gives_ones() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![3.0, -1.0, 2.5]));
        let s = x.sum_all();
        g.backward(&s).unwrap();
        assert_eq!(x.grad().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_is_2x() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0]));
        let s = x.hadamard(&x).unwrap().sum_all();
        g.backward(&s).unwrap();
        assert_eq!(x.grad().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(&x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn double_backward_requires_reset() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::scalar(2.0));
        let s = x.hadamard(&x).unwrap();
        g.backward(&s).unwrap();
        assert!(matches!(g.backward(&s), Err(Error::BackwardWithoutReset)));
        g.reset_grads();
        g.backward(&s).unwrap();
        assert_eq!(x.grad().data(), &[4.0]);
    }

    #[test]
    fn fan_out_accumulates_two_paths() {
        // f(x) = x·x + 3x; f'(x) = 2x + 3, hand-expanded.
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::scalar(1.5));
        let s = x.hadamard(&x).unwrap().add(&x.scale(3.0)).unwrap();
        g.backward(&s).unwrap();
        assert!((x.grad().scalar_value() - (2.0 * 1.5 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let g: Graph<f64> = Graph::new();
        let mut rng = crate::rng::Rng::new(3);
        let a = g.leaf(T::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let b = g.leaf(T::uniform(&[4, 2], -1.0, 1.0, &mut rng));
        let s = a.matmul(&b).unwrap().sum_all();
        g.backward(&s).unwrap();
        let expect = T::ones(&[3, 2]).matmul(&b.value().transpose().unwrap()).unwrap();
        assert!(a.grad().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stable() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![0.0, 0.0]));
        let y = x.softmax().value();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let big = g.leaf(T::from_vec(vec![1000.0, 0.0]));
        let y2 = big.softmax().value();
        assert!(y2.is_finite());
        assert!(y2.data()[0] > 1.0 - 1e-12 && y2.data()[1] < 1e-12);
    }

    #[test]
    fn sum_pool_groups() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(x.sum_pool(3).unwrap().value().data(), &[6.0, 15.0]);
        assert_eq!(x.sum_pool(1).unwrap().value(), x.value());
        assert!(matches!(
            x.sum_pool(4),
            Err(Error::NotDivisible { len: 6, k: 4 })
        ));
    }

    #[test]
    fn l2_normalize_345() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![3.0, 4.0]));
        assert_eq!(x.l2_normalize().value().data(), &[0.6, 0.8]);
        let z = g.leaf(T::from_vec(vec![0.0, 0.0, 0.0]));
        assert_eq!(z.l2_normalize().value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn power_norm_values() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(T::from_vec(vec![4.0, -9.0, 0.0]));
        assert_eq!(x.power_norm().value().data(), &[2.0, -3.0, 0.0]);
        let u = g.leaf(T::from_vec(vec![1.0, -1.0]));
        assert_eq!(u.power_norm().value().data(), &[1.0, -1.0]);
    }

    #[test]
    fn concat_axis0_and_axis1() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf(T::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = g.leaf(T::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let v = concat(&g, &[a.clone(), b.clone()], 0).unwrap();
        assert_eq!(v.value().shape(), &[2, 2]);
        let h = concat(&g, &[a, b], 1).unwrap();
        assert_eq!(h.value().shape(), &[1, 4]);
        assert_eq!(h.value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = h.sum_all();
        g.backward(&s).unwrap();
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let g: Graph<f64> = Graph::new();
        let t = g.leaf(T::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let got = t.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(got.value().shape(), &[3, 2]);
        let s = got.sum_all();
        g.backward(&s).unwrap();
        assert_eq!(t.grad().data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
