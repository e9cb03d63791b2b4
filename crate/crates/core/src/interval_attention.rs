//! Interval-infused attention: queries from interval embeddings, keys and
//! values from item embeddings, causal mask, per-position multi-head merge.

use rand::Rng;

use crate::autograd::MASK_VALUE;
use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const IIA_FORMAT: &str = "iia_v1";
pub const DEFAULT_HEADS: usize = 2;
pub const DEFAULT_DQ: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct IiaHead {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IiaParams {
    pub heads: Vec<IiaHead>,
    pub wo: Matrix,
}

impl IiaParams {
    /// Uniform in ±1/√fan_in.
    pub fn init<R: Rng + ?Sized>(heads: usize, d_llm: usize, d_q: usize, rng: &mut R) -> Self {
        let b = 1.0 / (d_llm as f64).sqrt();
        let heads = (0..heads)
            .map(|_| IiaHead {
                wq: Matrix::uniform(d_llm, d_q, b, rng),
                wk: Matrix::uniform(d_llm, d_q, b, rng),
                wv: Matrix::uniform(d_llm, d_q, b, rng),
            })
            .collect::<Vec<_>>();
        let wo = Matrix::uniform(heads.len() * d_q, d_llm, 1.0 / ((heads.len() * d_q) as f64).sqrt(), rng);
        Self { heads, wo }
    }

    pub fn zeros(heads: usize, d_llm: usize, d_q: usize) -> Self {
        let head = IiaHead { wq: Matrix::zeros(d_llm, d_q), wk: Matrix::zeros(d_llm, d_q), wv: Matrix::zeros(d_llm, d_q) };
        Self { heads: vec![head; heads], wo: Matrix::zeros(heads * d_q, d_llm) }
    }

    pub fn h(&self) -> usize {
        self.heads.len()
    }

    pub fn d_llm(&self) -> usize {
        self.wo.cols()
    }

    pub fn d_q(&self) -> usize {
        self.heads.first().map_or(0, |h| h.wq.cols())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d, dq) = (self.h(), self.d_llm(), self.d_q());
        if h == 0 || dq == 0 {
            return Err(Error::shape("interval attention needs at least one head and d_q ≥ 1"));
        }
        for (k, head) in self.heads.iter().enumerate() {
            for (name, m) in [("Wq", &head.wq), ("Wk", &head.wk), ("Wv", &head.wv)] {
                if m.shape() != (d, dq) {
                    return Err(Error::shape(format!("head {k} {name} is {:?}, expected ({d}, {dq})", m.shape())));
                }
            }
        }
        if self.wo.shape() != (h * dq, d) {
            return Err(Error::shape(format!("Wo is {:?}, expected ({}, {d})", self.wo.shape(), h * dq)));
        }
        if !self.named().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::numeric("interval attention parameters are not finite"));
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(3 * self.h() + 1);
        for (k, head) in self.heads.iter().enumerate() {
            out.push((format!("iia.head{k}.Wq"), &head.wq));
            out.push((format!("iia.head{k}.Wk"), &head.wk));
            out.push((format!("iia.head{k}.Wv"), &head.wv));
        }
        out.push(("iia.Wo".to_string(), &self.wo));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::with_capacity(3 * self.heads.len() + 1);
        for (k, head) in self.heads.iter_mut().enumerate() {
            out.push((format!("iia.head{k}.Wq"), &mut head.wq));
            out.push((format!("iia.head{k}.Wk"), &mut head.wk));
            out.push((format!("iia.head{k}.Wv"), &mut head.wv));
        }
        out.push(("iia.Wo".to_string(), &mut self.wo));
        out
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::new(IIA_FORMAT);
        for (name, m) in self.named() {
            t.insert(name, m.clone());
        }
        t
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        let wo = t.get("iia.Wo")?.clone();
        let mut heads = Vec::new();
        while t.tensors.contains_key(&format!("iia.head{}.Wq", heads.len())) {
            let k = heads.len();
            let wq = t.get(&format!("iia.head{k}.Wq"))?.clone();
            let (d, dq) = wq.shape();
            heads.push(IiaHead {
                wq,
                wk: t.expect(&format!("iia.head{k}.Wk"), d, dq)?,
                wv: t.expect(&format!("iia.head{k}.Wv"), d, dq)?,
            });
        }
        let p = Self { heads, wo };
        p.validate()?;
        Ok(p)
    }
}

/// Item and interval matrices of equal length; row 0 of `z` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSequences {
    pub x: Matrix,
    pub z: Matrix,
}

/// Prepends the zero row so that row k of Z holds the interval before item k.
pub fn align(x: &Matrix, z_raw: &Matrix) -> Result<AlignedSequences> {
    if x.rows() == 0 {
        return Err(Error::shape("no items to align"));
    }
    if z_raw.rows() + 1 != x.rows() {
        return Err(Error::shape(format!("{} items need {} intervals, got {}", x.rows(), x.rows() - 1, z_raw.rows())));
    }
    if z_raw.rows() > 0 && z_raw.cols() != x.cols() {
        return Err(Error::shape(format!("interval width {} differs from item width {}", z_raw.cols(), x.cols())));
    }
    let zero = Matrix::zeros(1, x.cols());
    let z = if z_raw.rows() == 0 { zero } else { Matrix::concat_rows(&[&zero, z_raw]) };
    Ok(AlignedSequences { x: x.clone(), z })
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: Matrix,
}

#[derive(Debug, Clone)]
pub struct IiaCache {
    pub heads: Vec<HeadCache>,
    pub concat: Matrix,
}

fn check_inputs(seq: &AlignedSequences, d_llm: usize) -> Result<()> {
    if seq.x.shape() != seq.z.shape() {
        return Err(Error::shape(format!("X is {:?} but Z is {:?}", seq.x.shape(), seq.z.shape())));
    }
    if seq.x.cols() != d_llm {
        return Err(Error::shape(format!("inputs have width {}, parameters expect {d_llm}", seq.x.cols())));
    }
    if !seq.x.is_finite() || !seq.z.is_finite() {
        return Err(Error::numeric("non-finite interval attention input"));
    }
    Ok(())
}

fn head_forward(seq: &AlignedSequences, head: &IiaHead) -> HeadCache {
    let q = seq.z.matmul(&head.wq);
    let k = seq.x.matmul(&head.wk);
    let v = seq.x.matmul(&head.wv);
    let scale = 1.0 / (head.wq.cols() as f64).sqrt();
    let mut attn = q.matmul_t(&k);
    let n = attn.rows();
    for r in 0..n {
        let row = attn.row_mut(r);
        for (c, s) in row.iter_mut().enumerate() {
            *s = if c <= r { *s * scale } else { *s * scale + MASK_VALUE };
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    HeadCache { q, k, v, attn }
}

/// One head's output, n × d_q.
pub fn iia_head(seq: &AlignedSequences, head: &IiaHead) -> Result<Matrix> {
    check_inputs(seq, head.wq.rows())?;
    let c = head_forward(seq, head);
    Ok(c.attn.matmul(&c.v))
}

pub fn iia_forward(seq: &AlignedSequences, params: &IiaParams) -> Result<(Matrix, IiaCache)> {
    params.validate()?;
    check_inputs(seq, params.d_llm())?;
    let heads: Vec<HeadCache> = params.heads.iter().map(|h| head_forward(seq, h)).collect();
    let outs: Vec<Matrix> = heads.iter().map(|c| c.attn.matmul(&c.v)).collect();
    let concat = Matrix::concat_cols(&outs.iter().collect::<Vec<_>>());
    let out = concat.matmul(&params.wo);
    if !out.is_finite() {
        return Err(Error::numeric("interval attention produced non-finite output"));
    }
    Ok((out, IiaCache { heads, concat }))
}

/// The interval-infused item embeddings x̂, n × d_llm.
pub fn multi_head_iia(seq: &AlignedSequences, params: &IiaParams) -> Result<Matrix> {
    Ok(iia_forward(seq, params)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IiaGrads {
    pub heads: Vec<IiaHead>,
    pub wo: Matrix,
    pub x: Matrix,
    pub z: Matrix,
}

impl IiaGrads {
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (k, head) in self.heads.iter().enumerate() {
            out.push((format!("iia.head{k}.Wq"), &head.wq));
            out.push((format!("iia.head{k}.Wk"), &head.wk));
            out.push((format!("iia.head{k}.Wv"), &head.wv));
        }
        out.push(("iia.Wo".to_string(), &self.wo));
        out
    }
}

/// Exact gradients of the forward map given the upstream gradient on x̂.
pub fn iia_backward(seq: &AlignedSequences, params: &IiaParams, cache: &IiaCache, upstream: &Matrix) -> Result<IiaGrads> {
    let n = seq.x.rows();
    if upstream.shape() != (n, params.d_llm()) {
        return Err(Error::shape(format!("upstream gradient is {:?}, expected ({n}, {})", upstream.shape(), params.d_llm())));
    }
    let dq = params.d_q();
    let scale = 1.0 / (dq as f64).sqrt();
    let wo_grad = cache.concat.t_matmul(upstream);
    let d_concat = upstream.matmul_t(&params.wo);
    let mut dx = Matrix::zeros(n, params.d_llm());
    let mut dz = Matrix::zeros(n, params.d_llm());
    let mut heads = Vec::with_capacity(params.h());
    for (k, (head, c)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let d_out = d_concat.slice_cols(k * dq, dq);
        let d_attn = d_out.matmul_t(&c.v);
        let d_v = c.attn.t_matmul(&d_out);
        // Softmax backward per row: dS = A ⊙ (dA − rowsum(dA ⊙ A)).
        let mut d_s = Matrix::zeros(n, n);
        for r in 0..n {
            let a = c.attn.row(r);
            let g = d_attn.row(r);
            let dot: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
            for (o, (ai, gi)) in d_s.row_mut(r).iter_mut().zip(a.iter().zip(g)) {
                *o = ai * (gi - dot) * scale;
            }
        }
        let d_q = d_s.matmul(&c.k);
        let d_k = d_s.t_matmul(&c.q);
        dz.add_assign(&d_q.matmul_t(&head.wq));
        dx.add_assign(&d_k.matmul_t(&head.wk));
        dx.add_assign(&d_v.matmul_t(&head.wv));
        heads.push(IiaHead { wq: seq.z.t_matmul(&d_q), wk: seq.x.t_matmul(&d_k), wv: seq.x.t_matmul(&d_v) });
    }
    Ok(IiaGrads { heads, wo: wo_grad, x: dx, z: dz })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn align_shapes() {
        let x = Matrix::filled(3, 2, 1.0);
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let a = align(&x, &z).unwrap();
        assert_eq!(a.z.row(0), &[0.0, 0.0]);
        assert_eq!(a.z.slice_rows(1, 2), z);
        let single = align(&Matrix::filled(1, 2, 1.0), &Matrix::zeros(0, 2)).unwrap();
        assert_eq!(single.z, Matrix::zeros(1, 2));
        assert!(align(&x, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn single_item_returns_its_value() {
        let mut rng = seed::rng(0);
        let p = IiaParams::init(1, 4, 3, &mut rng);
        let x = Matrix::uniform(1, 4, 1.0, &mut rng);
        let seq = align(&x, &Matrix::zeros(0, 4)).unwrap();
        let out = iia_head(&seq, &p.heads[0]).unwrap();
        assert!(out.max_abs_diff(&x.matmul(&p.heads[0].wv)) < 1e-15);
    }

    #[test]
    fn equal_logits_average_values() {
        let mut rng = seed::rng(1);
        let mut p = IiaParams::init(1, 4, 2, &mut rng);
        p.heads[0].wk = Matrix::zeros(4, 2);
        let x = Matrix::uniform(4, 4, 1.0, &mut rng);
        let z = Matrix::uniform(3, 4, 1.0, &mut rng);
        let seq = align(&x, &z).unwrap();
        let out = iia_head(&seq, &p.heads[0]).unwrap();
        let v = x.matmul(&p.heads[0].wv);
        for r in 0..4 {
            for c in 0..2 {
                let mean = (0..=r).map(|s| v.get(s, c)).sum::<f64>() / (r + 1) as f64;
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = seed::rng(2);
        let p = IiaParams::init(2, 5, 3, &mut rng);
        let seq = align(&Matrix::uniform(3, 5, 1.0, &mut rng), &Matrix::uniform(2, 5, 1.0, &mut rng)).unwrap();
        let (_, cache) = iia_forward(&seq, &p).unwrap();
        let g = iia_backward(&seq, &p, &cache, &Matrix::zeros(3, 5)).unwrap();
        assert!(g.named().iter().all(|(_, m)| m.max_abs() == 0.0));
        assert_eq!(g.x.max_abs(), 0.0);
        assert_eq!(g.z.max_abs(), 0.0);
    }

    #[test]
    fn tensors_round_trip() {
        let p = IiaParams::init(2, 4, 3, &mut seed::rng(4));
        let t = p.to_tensors();
        assert!(t.tensors.contains_key("iia.head1.Wv"));
        assert_eq!(IiaParams::from_tensors(&t).unwrap(), p);
    }
}
