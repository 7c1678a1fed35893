//! Differentiable operations on [`Var`].

use std::rc::Rc;

use super::tape::{Tape, Var};
use super::tensor::{self, sigmoid, Tensor, COSINE_DELTA};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, a: &Tensor) -> Result<()> {
    if !a.is_matrix() {
        return Err(Error::dim(op, a.shape(), &[]));
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Builds a node from a forward value and a closure mapping the output
    /// gradient to one optional gradient per parent.
    pub(crate) fn custom(
        tape: &'t Tape,
        value: Tensor,
        parents: &[Var<'t>],
        backward: impl Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        tape.push(value, &ids, Box::new(backward))
    }

    fn unary(self, value: Tensor, back: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        Var::custom(self.tape, value, &[self], move |g| vec![Some(back(g))])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b)?;
        Ok(Var::custom(self.tape, out, &[self, rhs], move |g| {
            vec![g.matmul_t(&b).ok(), a.t_matmul(g).ok()]
        }))
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul_t(&b)?;
        Ok(Var::custom(self.tape, out, &[self, rhs], move |g| {
            vec![g.matmul(&b).ok(), g.t_matmul(&a).ok()]
        }))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(Var::custom(self.tape, out, &[self, rhs], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        }))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(Var::custom(self.tape, out, &[self, rhs], |g| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        }))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(Var::custom(self.tape, out, &[self, rhs], move |g| {
            vec![Some(g.zip_map(&b, |gv, bv| gv * bv)), Some(g.zip_map(&a, |gv, av| gv * av))]
        }))
    }

    /// Elementwise quotient.
    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        same_shape("div", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x / y);
        Ok(Var::custom(self.tape, out, &[self, rhs], move |g| {
            let ga = g.zip_map(&b, |gv, bv| gv / bv);
            let mut gb = g.zip_map(&a, |gv, av| -gv * av);
            for (v, bv) in gb.data_mut().iter_mut().zip(b.data()) {
                *v /= bv * bv;
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), bias.value());
        matrix("add_row", &a)?;
        if b.shape() != [a.cols()] {
            return Err(Error::dim("add_row", a.shape(), b.shape()));
        }
        let n = a.cols();
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(Var::custom(self.tape, out, &[self, bias], move |g| {
            let mut gb = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::vector(gb))]
        }))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|v| v * factor);
        self.unary(out, move |g| g.map(|v| v * factor))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary(out, |g| g.clone())
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let a = self.value();
        same_shape("mul_const", &a, c)?;
        let out = a.zip_map(c, |x, y| x * y);
        let c = c.clone();
        Ok(self.unary(out, move |g| g.zip_map(&c, |gv, cv| gv * cv)))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(self, factors: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        matrix("scale_rows", &a)?;
        if factors.len() != a.rows() {
            return Err(Error::dim("scale_rows", a.shape(), &[factors.len()]));
        }
        let n = a.cols();
        let factors = factors.to_vec();
        let apply = move |t: &Tensor| {
            let mut out = t.clone();
            for (row, f) in out.data_mut().chunks_mut(n).zip(&factors) {
                row.iter_mut().for_each(|v| *v *= f);
            }
            out
        };
        let out = apply(&a);
        Ok(self.unary(out, apply))
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        let y = out.clone();
        self.unary(out, move |g| g.zip_map(&y, |gv, yv| gv * (1.0 - yv * yv)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid);
        let y = out.clone();
        self.unary(out, move |g| g.zip_map(&y, |gv, yv| gv * yv * (1.0 - yv)))
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()));
        self.unary(out, move |g| {
            g.zip_map(&x, |gv, v| {
                let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
            })
        })
    }

    /// Natural logarithm.
    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(f64::ln);
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| gv / xv))
    }

    pub fn row_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        matrix("row_softmax", &x)?;
        let y = tensor::softmax_rows(&x);
        let out = y.clone();
        let n = y.cols();
        Ok(self.unary(out, move |g| {
            let mut dx = Tensor::zeros(y.shape());
            for ((yr, gr), dr) in y
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(dx.data_mut().chunks_mut(n))
            {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - dot);
                }
            }
            dx
        }))
    }

    /// Softmax over each column.
    pub fn col_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        matrix("col_softmax", &x)?;
        let y = tensor::softmax_rows(&x.transpose()).transpose();
        let out = y.clone();
        Ok(self.unary(out, move |g| {
            let (m, n) = (y.rows(), y.cols());
            let mut dots = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    dots[j] += y.get2(i, j) * g.get2(i, j);
                }
            }
            let mut dx = Tensor::zeros(y.shape());
            for i in 0..m {
                for j in 0..n {
                    dx.data_mut()[i * n + j] = y.get2(i, j) * (g.get2(i, j) - dots[j]);
                }
            }
            dx
        }))
    }

    /// Per-row layer normalization with affine `gain` and `bias` (length = cols).
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        matrix("layer_norm", &x)?;
        let n = x.cols();
        if gv.shape() != [n] || bv.shape() != [n] {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(x.rows());
        for (xr, hr) in x.data().chunks(n).zip(xhat.data_mut().chunks_mut(n)) {
            let mean = xr.iter().sum::<f64>() / n as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (h, v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * g + b;
            }
        }
        Ok(Var::custom(self.tape, out, &[self, gain, bias], move |g| {
            let mut dx = Tensor::zeros(xhat.shape());
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for (((hr, gr), dr), is) in xhat
                .data()
                .chunks(n)
                .zip(g.data().chunks(n))
                .zip(dx.data_mut().chunks_mut(n))
                .zip(&inv_std)
            {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..n {
                    dgain[j] += gr[j] * hr[j];
                    dbias[j] += gr[j];
                    let dh = gr[j] * gv.data()[j];
                    m1 += dh;
                    m2 += dh * hr[j];
                }
                m1 /= n as f64;
                m2 /= n as f64;
                for j in 0..n {
                    let dh = gr[j] * gv.data()[j];
                    dr[j] = is * (dh - m1 - hr[j] * m2);
                }
            }
            vec![Some(dx), Some(Tensor::vector(dgain)), Some(Tensor::vector(dbias))]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over rows: `m×n → [n]`.
    pub fn col_sums(self) -> Result<Var<'t>> {
        let x = self.value();
        matrix("col_sums", &x)?;
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(self.unary(Tensor::vector(out), move |g| {
            let mut dx = Vec::with_capacity(m * n);
            for _ in 0..m {
                dx.extend_from_slice(g.data());
            }
            Tensor::new(vec![m, n], dx).expect("shape")
        }))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        matrix("gather_rows", &x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::arg("idx", format!("row {bad} out of range for {:?}", x.shape())));
        }
        let out = x.gather_rows(idx);
        let (rows, n) = (x.rows(), x.cols());
        let idx = idx.to_vec();
        Ok(self.unary(out, move |g| {
            let mut dx = Tensor::zeros(&[rows, n]);
            for (k, &i) in idx.iter().enumerate() {
                let src = &g.data()[k * n..(k + 1) * n];
                for (d, s) in dx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                    *d += s;
                }
            }
            dx
        }))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        matrix("slice_rows", &x)?;
        if start > end || end > x.rows() {
            return Err(Error::arg("range", format!("{start}..{end} out of range for {:?}", x.shape())));
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(&idx)
    }

    /// Columns `idx` of an `m×n` matrix, in the given order.
    pub fn select_cols(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        matrix("select_cols", &x)?;
        let (m, n) = (x.rows(), x.cols());
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::arg("idx", format!("column {bad} out of range for {:?}", x.shape())));
        }
        let k = idx.len();
        let mut out = Vec::with_capacity(m * k);
        for i in 0..m {
            out.extend(idx.iter().map(|&j| x.get2(i, j)));
        }
        let idx = idx.to_vec();
        Ok(self.unary(Tensor::new(vec![m, k], out)?, move |g| {
            let mut dx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                for (c, &j) in idx.iter().enumerate() {
                    dx.data_mut()[i * n + j] += g.get2(i, c);
                }
            }
            dx
        }))
    }

    /// Column `k` as a vector.
    pub fn column(self, k: usize) -> Result<Var<'t>> {
        let m = self.value().rows();
        self.select_cols(&[k])?.reshape(vec![m])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        matrix("transpose", &x)?;
        Ok(self.unary(x.transpose(), |g| g.transpose()))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.unary(out, move |g| g.clone().reshape(orig.clone()).expect("reshape")))
    }

    /// `self` with rows `idx[k]` replaced by row `k` of `rows`.
    pub fn with_rows(self, idx: &[usize], rows: Var<'t>) -> Result<Var<'t>> {
        let (base, r) = (self.value(), rows.value());
        matrix("with_rows", &base)?;
        let n = base.cols();
        if !r.is_matrix() || r.rows() != idx.len() || r.cols() != n {
            return Err(Error::dim("with_rows", base.shape(), r.shape()));
        }
        let mut out = (*base).clone();
        for (k, &i) in idx.iter().enumerate() {
            if i >= base.rows() {
                return Err(Error::arg("idx", format!("row {i} out of range for {:?}", base.shape())));
            }
            out.data_mut()[i * n..(i + 1) * n].copy_from_slice(r.row(k));
        }
        let idx = idx.to_vec();
        Ok(Var::custom(self.tape, out, &[self, rows], move |g| {
            let mut gbase = g.clone();
            let mut grows = Vec::with_capacity(idx.len() * n);
            for &i in &idx {
                grows.extend_from_slice(&g.data()[i * n..(i + 1) * n]);
                gbase.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = 0.0);
            }
            vec![Some(gbase), Some(Tensor::new(vec![idx.len(), n], grows).expect("shape"))]
        }))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("parts", "nothing to concatenate"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let n = values[0].cols();
        let mut data = Vec::new();
        let mut counts = Vec::with_capacity(parts.len());
        for v in &values {
            if !v.is_matrix() || v.cols() != n {
                return Err(Error::dim("concat_rows", values[0].shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
            counts.push(v.rows());
        }
        let total: usize = counts.iter().sum();
        Ok(Var::custom(first.tape, Tensor::new(vec![total, n], data)?, parts, move |g| {
            let mut off = 0;
            counts
                .iter()
                .map(|&c| {
                    let chunk = g.data()[off * n..(off + c) * n].to_vec();
                    off += c;
                    Some(Tensor::new(vec![c, n], chunk).expect("shape"))
                })
                .collect()
        }))
    }

    /// Pairwise cosine similarity `m×C, n×C → m×n` with the δ-stabilized
    /// denominator of [`tensor::cosine_matrix`].
    pub fn cosine_sim(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let out = tensor::cosine_matrix(&a, &b)?;
        Ok(Var::custom(self.tape, out, &[self, rhs], move |g| {
            let (m, n, c) = (a.rows(), b.rows(), a.cols());
            let na: Vec<f64> = (0..m).map(|i| tensor::norm(a.row(i))).collect();
            let nb: Vec<f64> = (0..n).map(|j| tensor::norm(b.row(j))).collect();
            let dots = a.matmul_t(&b).expect("shape");
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for i in 0..m {
                for j in 0..n {
                    let gij = g.get2(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    let d = na[i] * nb[j] + COSINE_DELTA;
                    let dot = dots.get2(i, j);
                    // d/da_i [dot / d] = b_j / d - dot * nb_j * a_i / (na_i * d^2)
                    let ca = if na[i] > 0.0 { dot * nb[j] / (na[i] * d * d) } else { 0.0 };
                    let cb = if nb[j] > 0.0 { dot * na[i] / (nb[j] * d * d) } else { 0.0 };
                    for p in 0..c {
                        ga.data_mut()[i * c + p] += gij * (b.row(j)[p] / d - ca * a.row(i)[p]);
                        gb.data_mut()[j * c + p] += gij * (a.row(i)[p] / d - cb * b.row(j)[p]);
                    }
                }
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }
}
