use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `[m×k]·[k×n]` with optional transposition of either side, reading
/// the operands in place through strides.
pub(crate) fn matmul_raw<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) -> Vec<T> {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, a, a_strides, b, b_strides, &mut c);
    c
}

impl<T: Scalar> Tensor<T> {
    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(), other.data(), m, k, n, false, false);
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            &[self, other],
            move |g, _| {
                let ga = a
                    .requires_grad()
                    .then(|| matmul_raw(g, b.data(), m, n, k, false, true));
                let gb = b
                    .requires_grad()
                    .then(|| matmul_raw(a.data(), g, k, m, n, true, false));
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            self.shape().to_vec(),
            out,
            &[self, other],
            |g, _| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            out,
            &[self, other],
            |g, _| vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let out = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            out,
            &[self, other],
            move |g, _| {
                let ga = a
                    .requires_grad()
                    .then(|| g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect());
                let gb = b
                    .requires_grad()
                    .then(|| g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            },
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        let s = T::from_f64(s);
        let out = self.data().iter().map(|&v| v * s).collect();
        Tensor::from_op("scale", self.shape().to_vec(), out, &[self], move |g, _| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.last_dim();
        if bias.shape() != [n] {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let b = bias.data();
        let out = self
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        Ok(Tensor::from_op(
            "add_row",
            self.shape().to_vec(),
            out,
            &[self, bias],
            move |g, _| {
                let mut gb = vec![T::zero(); n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().copied().sum();
        let numel = self.numel();
        Tensor::from_op("sum", Vec::new(), vec![total], &[self], move |g, _| {
            vec![Some(vec![g[0]; numel])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let numel = self.numel();
        if numel == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        let inv = T::one() / T::from_f64(numel as f64);
        let total: T = self.data().iter().copied().sum();
        Ok(Tensor::from_op(
            "mean",
            Vec::new(),
            vec![total * inv],
            &[self],
            move |g, _| vec![Some(vec![g[0] * inv; numel])],
        ))
    }

    /// Mean absolute value; subgradient at exactly zero is zero.
    pub fn l1_mean(&self) -> Result<Tensor<T>> {
        let numel = self.numel();
        if numel == 0 {
            return Err(Error::EmptyReduction { op: "l1_mean" });
        }
        let inv = T::one() / T::from_f64(numel as f64);
        let total: T = self.data().iter().map(|v| v.abs()).sum();
        let x = self.clone();
        Ok(Tensor::from_op(
            "l1_mean",
            Vec::new(),
            vec![total * inv],
            &[self],
            move |g, _| {
                let s = g[0] * inv;
                let gx = x
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > T::zero() {
                            s
                        } else if v < T::zero() {
                            -s
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(gx)]
            },
        ))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("transpose", format!("expected 2-D, got {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.data(), m, n);
        Ok(Tensor::from_op("transpose", vec![n, m], out, &[self], move |g, _| {
            vec![Some(transpose_raw(g, n, m))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat_last", sa, sb));
        }
        let (na, nb) = (self.last_dim(), other.last_dim());
        let mut out = Vec::with_capacity(self.numel() + other.numel());
        for (ra, rb) in self.data().chunks(na.max(1)).zip(other.data().chunks(nb.max(1))) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        Ok(Tensor::from_op("concat_last", shape, out, &[self, other], move |g, _| {
            let mut ga = Vec::new();
            let mut gb = Vec::new();
            for row in g.chunks(na + nb) {
                ga.extend_from_slice(&row[..na]);
                gb.extend_from_slice(&row[na..]);
            }
            vec![Some(ga), Some(gb)]
        }))
    }

    /// Gathers rows (along the first axis of the `[rows, last_dim]` view).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let rows = self.rows();
        let n = self.last_dim();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "select_rows",
                format!("row {bad} out of range for {rows} rows"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(self.row(i));
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "select_rows",
            vec![indices.len(), n],
            out,
            &[self],
            move |g, _| {
                let mut gx = vec![T::zero(); rows * n];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gx[i * n..(i + 1) * n];
                    dst.iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, &v)| *a = *a + v);
                }
                vec![Some(gx)]
            },
        ))
    }
}

pub(crate) fn transpose_raw<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let b = t(&[1., 2., 3., 4.], &[2, 2]);
        let id = t(&[1., 0., 0., 1.], &[2, 2]);
        assert_eq!(id.matmul(&b).unwrap().to_vec(), vec![1., 2., 3., 4.]);
        let p = t(&[1., 0., 0., 0.], &[2, 2]);
        let c = t(&[5., 6., 7., 8.], &[2, 2]);
        assert_eq!(p.matmul(&c).unwrap().to_vec(), vec![5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = Tensor::from_vec(a.clone(), &[3, 4])
            .unwrap()
            .matmul(&Tensor::from_vec(b.clone(), &[4, 2]).unwrap())
            .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0f32;
                for k in 0..4 {
                    acc += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[0.; 6], &[2, 3]).matmul(&t(&[0.; 4], &[2, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn l1_mean_values_and_subgradient() {
        assert_eq!(t(&[0.; 4], &[2, 2]).l1_mean().unwrap().item(), 0.0);
        assert_eq!(t(&[1., -1., 2., -2.], &[2, 2]).l1_mean().unwrap().item(), 1.5);
        let x = Tensor::<f64>::param(vec![3., -4.], &[2]).unwrap();
        x.l1_mean().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, -0.5]);
        let z = Tensor::<f64>::param(vec![0., 1.], &[2]).unwrap();
        z.l1_mean().unwrap().backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![0.0, 0.5]);
        assert!(matches!(
            Tensor::<f64>::zeros(&[0]).l1_mean(),
            Err(Error::EmptyReduction { .. })
        ));
    }

    #[test]
    fn concat_and_select() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[5., 6.], &[2, 1]);
        assert_eq!(a.concat_last(&b).unwrap().to_vec(), vec![1., 2., 5., 3., 4., 6.]);
        assert_eq!(a.select_rows(&[1, 1]).unwrap().to_vec(), vec![3., 4., 3., 4.]);
        assert!(a.select_rows(&[2]).is_err());
        assert_eq!(a.transpose().unwrap().to_vec(), vec![1., 3., 2., 4.]);
        assert!(a.reshape(&[3]).is_err());
    }
}
