use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MASK_FILL: f64 = -1e9;

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericDomain { op })
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    let inv = T::one() / total;
    out.iter_mut().for_each(|o| *o = *o * inv);
}

fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tensor<T> {
    /// Row-wise softmax over the last axis, stabilized by the row max.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        check_finite("softmax_rows", self)?;
        let n = self.last_dim();
        let mut out = vec![T::zero(); self.numel()];
        for (row, o) in self.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        Ok(Tensor::from_op(
            "softmax_rows",
            self.shape().to_vec(),
            out,
            &[self],
            move |g, y| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        check_finite("log_softmax_rows", self)?;
        let n = self.last_dim();
        let mut out = vec![T::zero(); self.numel()];
        for (row, o) in self.data().chunks(n).zip(out.chunks_mut(n)) {
            log_softmax_row(row, o);
        }
        Ok(Tensor::from_op(
            "log_softmax_rows",
            self.shape().to_vec(),
            out,
            &[self],
            move |g, y| {
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &gi), &yi) in gxr.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean over masked-in rows of `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&self, targets: &[u32], mask: &[bool]) -> Result<Tensor<T>> {
        let (rows, v) = (self.rows(), self.last_dim());
        if self.shape().len() != 2 || targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy_rows",
                self.shape(),
                &[targets.len(), mask.len()],
            ));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .find(|(&t, &m)| m && t as usize >= v)
            .map(|(t, _)| t)
        {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        check_finite("cross_entropy_rows", self)?;
        let mut probs = vec![T::zero(); self.numel()];
        let mut total = T::zero();
        let mut scratch = vec![T::zero(); v];
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = self.row(r);
            log_softmax_row(row, &mut scratch);
            total = total - scratch[targets[r] as usize];
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(&scratch) {
                *p = l.exp();
            }
        }
        let inv = T::one() / T::from_f64(count as f64);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        Ok(Tensor::from_op(
            "cross_entropy_rows",
            Vec::new(),
            vec![total * inv],
            &[self],
            move |g, _| {
                let s = g[0] * inv;
                let mut gx = vec![T::zero(); probs.len()];
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    let dst = &mut gx[r * v..(r + 1) * v];
                    for (o, &p) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *o = p * s;
                    }
                    dst[targets[r] as usize] = dst[targets[r] as usize] - s;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&self) -> Tensor<T> {
        let out = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        let x = self.clone();
        Tensor::from_op("silu", self.shape().to_vec(), out, &[self], move |g, _| {
            let gx = g
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * s * (T::one() + x * (T::one() - s))
                })
                .collect();
            vec![Some(gx)]
        })
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let n = self.last_dim();
        if gain.shape() != [n] {
            return Err(Error::shape("rms_norm", self.shape(), gain.shape()));
        }
        let eps = T::from_f64(eps);
        let nf = T::from_f64(n as f64);
        let rows = self.rows();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut normed = vec![T::zero(); self.numel()];
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let row = self.row(r);
            let ms = row.iter().map(|&x| x * x).sum::<T>() / nf;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..n {
                let xh = row[j] * inv;
                normed[r * n + j] = xh;
                out[r * n + j] = xh * gain.data()[j];
            }
        }
        let gain_c = gain.clone();
        let x_req = self.requires_grad();
        Ok(Tensor::from_op(
            "rms_norm",
            self.shape().to_vec(),
            out,
            &[self, gain],
            move |g, _| {
                let gw = gain_c.data();
                let mut gg = vec![T::zero(); n];
                let mut gx = x_req.then(|| vec![T::zero(); g.len()]);
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xh = &normed[r * n..(r + 1) * n];
                    for j in 0..n {
                        gg[j] = gg[j] + gr[j] * xh[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dot = (0..n).map(|j| gr[j] * gw[j] * xh[j]).sum::<T>() / nf;
                        for j in 0..n {
                            gx[r * n + j] = inv_rms[r] * (gr[j] * gw[j] - xh[j] * dot);
                        }
                    }
                }
                vec![gx, Some(gg)]
            },
        ))
    }

    /// Gathers rows of a `[vocab×d]` table.
    pub fn embedding(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(self.row(i as usize));
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "embedding",
            vec![ids.len(), d],
            out,
            &[self],
            move |g, _| {
                let mut gw = vec![T::zero(); vocab * d];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gw[i as usize * d..(i as usize + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &v)| *a = *a + v);
                }
                vec![Some(gw)]
            },
        ))
    }

    /// Fills entries above the diagonal of each trailing `[T×T]` block with
    /// a large negative constant.
    pub fn causal_mask_add(&self) -> Result<Tensor<T>> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::invalid(
                "causal_mask_add",
                format!("trailing dims must be square, got {s:?}"),
            ));
        }
        let t = s[s.len() - 1];
        let fill = T::from_f64(MASK_FILL);
        let mut out = self.to_vec();
        for block in out.chunks_mut(t * t) {
            for i in 0..t {
                for j in i + 1..t {
                    block[i * t + j] = block[i * t + j] + fill;
                }
            }
        }
        Ok(Tensor::from_op(
            "causal_mask_add",
            s.to_vec(),
            out,
            &[self],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// Multi-head causal self-attention over `batch` sequences of length
    /// `seq`, with `q`, `k`, `v` laid out as `[batch·seq, d_model]`.
    pub fn causal_attention(
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
        attn: CausalAttention,
    ) -> Result<Tensor<T>> {
        let CausalAttention { batch, seq, heads } = attn;
        let d = q.last_dim();
        if q.shape() != [batch * seq, d] || k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(Error::shape("causal_attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "causal_attention",
                format!("d_model {d} not divisible by {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = vec![T::zero(); q.numel()];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        for b in 0..batch {
            for h in 0..heads {
                let p_block = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                    for (j, s) in scores[..=i].iter_mut().enumerate() {
                        let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                        *s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                    }
                    softmax_row(&scores[..=i], &mut p_block[i * seq..i * seq + i + 1]);
                    let oi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = p_block[i * seq + j];
                        let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + p * x);
                    }
                }
            }
        }
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        Ok(Tensor::from_op(
            "causal_attention",
            q.shape().to_vec(),
            out,
            &[q, k, v],
            move |g, _| {
                let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
                let mut gq = vec![T::zero(); qd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                let mut gv = vec![T::zero(); vd.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let p_block = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        for i in 0..seq {
                            let gi = &g[(b * seq + i) * d + h * dh..][..dh];
                            let prow = &p_block[i * seq..i * seq + i + 1];
                            for j in 0..=i {
                                let vj = &vd[(b * seq + j) * d + h * dh..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(&a, &c)| a * c).sum();
                                let gvj = &mut gv[(b * seq + j) * d + h * dh..][..dh];
                                gvj.iter_mut().zip(gi).for_each(|(o, &x)| *o = *o + prow[j] * x);
                            }
                            let dot: T = (0..=i).map(|j| prow[j] * dp[j]).sum();
                            let qi = &qd[(b * seq + i) * d + h * dh..][..dh];
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == T::zero() {
                                    continue;
                                }
                                let kj = &kd[(b * seq + j) * d + h * dh..][..dh];
                                let gqi = &mut gq[(b * seq + i) * d + h * dh..][..dh];
                                gqi.iter_mut().zip(kj).for_each(|(o, &x)| *o = *o + ds * x);
                                let gkj = &mut gk[(b * seq + j) * d + h * dh..][..dh];
                                gkj.iter_mut().zip(qi).for_each(|(o, &x)| *o = *o + ds * x);
                            }
                        }
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            },
        ))
    }
}

/// Layout of a batched causal attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalAttention {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

/// Graph-free attention for incremental decoding: `q` holds the rows for
/// absolute positions `offset..offset + n_q`, while `k` and `v` hold every
/// position up to and including the last query.
pub fn attention_rows<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    offset: usize,
) -> Vec<T> {
    let dh = d / heads;
    let n_q = q.len() / d;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); q.len()];
    let mut scores = vec![T::zero(); offset + n_q];
    let mut probs = vec![T::zero(); offset + n_q];
    for h in 0..heads {
        for i in 0..n_q {
            let pos = offset + i;
            let qi = &q[i * d + h * dh..][..dh];
            for (j, s) in scores[..=pos].iter_mut().enumerate() {
                let kj = &k[j * d + h * dh..][..dh];
                *s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
            }
            softmax_row(&scores[..=pos], &mut probs[..=pos]);
            let oi = &mut out[i * d + h * dh..][..dh];
            for (j, &p) in probs[..=pos].iter().enumerate() {
                let vj = &v[j * d + h * dh..][..dh];
                oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + p * x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), &[1, data.len()]).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let u = row(&[0.0; 4]).softmax_rows().unwrap();
        assert!(u.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let p = row(&[0.0, 2f64.ln()]).softmax_rows().unwrap();
        assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        let big = Tensor::<f32>::from_vec(vec![1000.0, 1000.0], &[1, 2])
            .unwrap()
            .softmax_rows()
            .unwrap();
        assert_eq!(big.to_vec(), vec![0.5, 0.5]);
        assert!(matches!(
            row(&[f64::NAN, 0.0]).softmax_rows(),
            Err(Error::NumericDomain { .. })
        ));
        assert!(row(&[f64::INFINITY, 0.0]).softmax_rows().is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::zeros(&[3, 8]);
        let ce = logits.cross_entropy_rows(&[0, 5, 7], &[true; 3]).unwrap();
        assert!((ce.item() - 8f64.ln()).abs() < 1e-12);

        let mut data = vec![0.0; 8];
        data[3] = 50.0;
        let ce = row(&data).cross_entropy_rows(&[3], &[true]).unwrap();
        assert!(ce.item() < 1e-9);

        assert!(matches!(
            logits.cross_entropy_rows(&[0, 0, 0], &[false; 3]),
            Err(Error::EmptyLoss)
        ));
        assert!(logits.cross_entropy_rows(&[9, 0, 0], &[true; 3]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_count() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0], &[2, 3]).unwrap();
        let loss = x.cross_entropy_rows(&[1, 2], &[true, false]).unwrap();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        let p = row(&[1.0, 2.0, 0.5]).softmax_rows().unwrap();
        assert!((g[0] - p.data()[0]).abs() < 1e-12);
        assert!((g[1] - (p.data()[1] - 1.0)).abs() < 1e-12);
        assert_eq!(&g[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn rms_norm_unit_gain_gives_unit_rms() {
        let x = row(&[3.0, -4.0]);
        let g = Tensor::from_vec(vec![1.0, 1.0], &[2]).unwrap();
        let y = x.rms_norm(&g, 0.0).unwrap();
        let rms = (y.data().iter().map(|v| v * v).sum::<f64>() / 2.0).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let s = Tensor::<f64>::zeros(&[2, 2]).causal_mask_add().unwrap();
        let p = s.softmax_rows().unwrap();
        assert_eq!(p.to_vec(), vec![1.0, 0.0, 0.5, 0.5]);
        assert!(Tensor::<f64>::zeros(&[2, 3]).causal_mask_add().is_err());
    }

    #[test]
    fn incremental_attention_matches_batched() {
        let d = 4;
        let seq = 3;
        let vals: Vec<f64> = (0..seq * d).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let q = Tensor::from_vec(vals.clone(), &[seq, d]).unwrap();
        let k = Tensor::from_vec(vals.iter().map(|v| v * 0.5 + 0.1).collect(), &[seq, d]).unwrap();
        let v = Tensor::from_vec(vals.iter().map(|v| -v).collect(), &[seq, d]).unwrap();
        let full = Tensor::causal_attention(
            &q,
            &k,
            &v,
            CausalAttention {
                batch: 1,
                seq,
                heads: 2,
            },
        )
        .unwrap();
        let last = attention_rows(&q.data()[2 * d..], k.data(), v.data(), d, 2, 2);
        for (a, b) in last.iter().zip(&full.data()[2 * d..]) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
