use std::rc::Rc;

use super::tensor::{matmul_nn, matmul_nt, matmul_tn};
use super::{AutodiffError, Result, Tape, Tensor, Var};
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn bad(op: &'static str, msg: String) -> AutodiffError {
    AutodiffError::BadShape { op, msg }
}

/// Split `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    fn unary(self, out: Tensor<T>, back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static) -> Var<'t, T> {
        self.tape.record(out, &[self], Box::new(move |g| vec![back(g)]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y);
        Ok(self.tape.record(out, &[self, other], Box::new(|g| vec![g.clone(), g.clone()])))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y);
        Ok(self
            .tape
            .record(out, &[self, other], Box::new(|g| vec![g.clone(), g.map(|x| -x)])))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y);
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g| vec![g.zip_map(&b, |x, y| x * y), g.zip_map(&a, |x, y| x * y)]),
        ))
    }

    /// `x[.., C] + bias[C]`.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let c = x.last_dim();
        if b.shape() != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.record(
            out,
            &[self, bias],
            Box::new(move |g| {
                let mut gb = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![g.clone(), Tensor::new(vec![c], gb).expect("bias shape")]
            }),
        ))
    }

    pub fn scale(self, k: f64) -> Var<'t, T> {
        let k = T::lit(k);
        let out = self.value().map(|x| x * k);
        self.unary(out, move |g| g.map(|x| x * k))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n))?;
        Ok(self.tape.record(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = matmul_nt(g.data(), b.data(), m, n, k);
                let gb = matmul_tn(a.data(), g.data(), m, k, n);
                vec![
                    Tensor::new(vec![m, k], ga).expect("matmul grad"),
                    Tensor::new(vec![k, n], gb).expect("matmul grad"),
                ]
            }),
        ))
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.unary(out, move |g| g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { T::zero() }))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(|v| T::one() / (T::one() + (-v).exp())));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |gv, yv| gv * yv * (T::one() - yv)))
    }

    pub fn exp(self) -> Var<'t, T> {
        let y = Rc::new(self.value().map(|v| v.exp()));
        let yc = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yc, |gv, yv| gv * yv))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(bad("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut y = (*x).clone();
        {
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..len {
                        mx = mx.max(d[at(j)]);
                    }
                    let mut s = T::zero();
                    for j in 0..len {
                        let e = (d[at(j)] - mx).exp();
                        d[at(j)] = e;
                        s += e;
                    }
                    for j in 0..len {
                        d[at(j)] /= s;
                    }
                }
            }
        }
        let y = Rc::new(y);
        let yc = y.clone();
        Ok(self.unary((*y).clone(), move |g| {
            let mut gx = g.clone();
            let (gd, yd) = (g.data(), yc.data());
            let out = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += gd[at(j)] * yd[at(j)];
                    }
                    for j in 0..len {
                        out[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            gx
        }))
    }

    /// Normalise over the last axis, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let (gm, bt) = (gamma.value(), beta.value());
        let (rows, c) = x.rows_cols();
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gm.shape().to_vec(),
            });
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_c = T::one() / T::lit(c as f64);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * rs;
            }
        }
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] = xhat[r * c + j] * gm.data()[j] + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::new(shape.clone(), out)?;
        Ok(self.tape.record(
            out,
            &[self, gamma, beta],
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![T::zero(); rows * c];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let k = r * c + j;
                        let dxh = gd[k] * gm.data()[j];
                        m1 += dxh;
                        m2 += dxh * xhat[k];
                        gg[j] += gd[k] * xhat[k];
                        gb[j] += gd[k];
                    }
                    m1 *= inv_c;
                    m2 *= inv_c;
                    for j in 0..c {
                        let k = r * c + j;
                        let dxh = gd[k] * gm.data()[j];
                        gx[k] = rstd[r] * (dxh - m1 - xhat[k] * m2);
                    }
                }
                vec![
                    Tensor::new(shape.clone(), gx).expect("ln grad"),
                    Tensor::new(vec![c], gg).expect("ln grad"),
                    Tensor::new(vec![c], gb).expect("ln grad"),
                ]
            }),
        ))
    }

    /// Rows of `self` (axis 0) picked by `idx`; result has `idx.len()` rows.
    pub fn gather(self, idx: Rc<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let rows = x.shape()[0];
        let width = x.len() / rows.max(1);
        if let Some(&bad_i) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Index {
                op: "gather",
                index: bad_i,
                len: rows,
            });
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx.iter() {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let in_shape = x.shape().to_vec();
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&in_shape);
            let d = gx.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..width {
                    d[i * width + j] += g.data()[r * width + j];
                }
            }
            gx
        }))
    }

    /// Sum rows of `self` into `rows` output rows at positions `idx`.
    pub fn scatter_add(self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.shape()[0] != idx.len() {
            return Err(bad(
                "scatter_add",
                format!("{} indices for {} rows", idx.len(), x.shape()[0]),
            ));
        }
        if let Some(&bad_i) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Index {
                op: "scatter_add",
                index: bad_i,
                len: rows,
            });
        }
        let width = x.len() / idx.len().max(1);
        let mut shape = x.shape().to_vec();
        shape[0] = rows;
        let mut out = Tensor::zeros(&shape);
        {
            let d = out.data_mut();
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..width {
                    d[i * width + j] += x.data()[r * width + j];
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.unary(out, move |g| {
            let mut data = Vec::with_capacity(idx.len() * width);
            for &i in idx.iter() {
                data.extend_from_slice(&g.data()[i * width..(i + 1) * width]);
            }
            Tensor::new(in_shape.clone(), data).expect("scatter grad")
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if shape.iter().product::<usize>() != x.len() || shape.is_empty() || shape.len() > 4 {
            return Err(bad("reshape", format!("{:?} -> {shape:?}", x.shape())));
        }
        let in_shape = x.shape().to_vec();
        Ok(self.unary(x.reshaped(shape), move |g| g.reshaped(&in_shape)))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || start + len > x.shape()[1] {
            return Err(bad("slice_cols", format!("{start}+{len} of {:?}", x.shape())));
        }
        let (rows, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x.data()[r * c + start..r * c + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        Ok(self.unary(out, move |g| {
            let mut gx = Tensor::zeros(&[rows, c]);
            let d = gx.data_mut();
            for r in 0..rows {
                d[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            gx
        }))
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let s = crate::real::pairwise_sum(x.data());
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(s), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }
}

impl<T: Real> Tape<T> {
    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(bad("concat_cols", "no inputs".into()));
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].shape()[0];
        for v in &values {
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[1]).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.record(
            out,
            parts,
            Box::new(move |g| {
                let mut outs: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter()
                    .zip(&widths)
                    .map(|(d, &w)| Tensor::new(vec![rows, w], d).expect("concat grad"))
                    .collect()
            }),
        ))
    }

    /// Concatenate tensors along axis 0; trailing shapes must agree.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(bad("concat_rows", "no inputs".into()));
        }
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        for v in &values {
            if v.shape()[1..] != tail[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        let mut data = Vec::new();
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let mut shape = tail.clone();
        shape.insert(0, shapes.iter().map(|s| s[0]).sum());
        let out = Tensor::new(shape, data)?;
        Ok(self.record(
            out,
            parts,
            Box::new(move |g| {
                let mut off = 0;
                shapes
                    .iter()
                    .map(|s| {
                        let n: usize = s.iter().product();
                        let t = Tensor::new(s.clone(), g.data()[off..off + n].to_vec()).expect("concat grad");
                        off += n;
                        t
                    })
                    .collect()
            }),
        ))
    }
}
