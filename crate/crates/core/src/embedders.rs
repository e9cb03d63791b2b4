//! Item title embeddings from the frozen token table, and the interval
//! embedder: a two-layer tanh network over `ln(1 + t)`.

use rand::Rng;

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const INTERVAL_EMBEDDER_FORMAT: &str = "interval_embedder_v1";
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ItemEmbedding {
    pub vectors: Matrix,
    pub pooled: Vec<f64>,
}

/// Rows of `table` for `token_ids`, plus their mean.
pub fn embed_tokens(token_ids: &[usize], table: &Matrix) -> Result<ItemEmbedding> {
    if token_ids.is_empty() {
        return Err(Error::InvalidInput("title tokenizes to zero tokens".into()));
    }
    let d = table.cols();
    let mut vectors = Matrix::zeros(token_ids.len(), d);
    for (r, &id) in token_ids.iter().enumerate() {
        if id >= table.rows() {
            return Err(Error::Vocabulary(format!("token id {id} outside table of {} rows", table.rows())));
        }
        vectors.row_mut(r).copy_from_slice(table.row(id));
    }
    let pooled = pool_rows(&vectors);
    Ok(ItemEmbedding { vectors, pooled })
}

pub fn pool_rows(m: &Matrix) -> Vec<f64> {
    let mut pooled = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (p, v) in pooled.iter_mut().zip(m.row(r)) {
            *p += v;
        }
    }
    let n = m.rows() as f64;
    pooled.iter_mut().for_each(|p| *p /= n);
    pooled
}

pub fn normalize_interval(t: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!("interval {t} must be a finite non-negative number of days")));
    }
    Ok(t.ln_1p())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalEmbedder {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct IntervalCache {
    pub inputs: Vec<f64>,
    pub hidden: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalGrads {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    /// Gradient with respect to each normalized input scalar.
    pub inputs: Vec<f64>,
}

impl IntervalEmbedder {
    pub fn zeros(hidden: usize, d_llm: usize) -> Self {
        Self {
            w1: Matrix::zeros(1, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, d_llm),
            b2: Matrix::zeros(1, d_llm),
        }
    }

    /// Uniform in ±1/√fan_in for every weight and bias.
    pub fn init<R: Rng + ?Sized>(hidden: usize, d_llm: usize, rng: &mut R) -> Self {
        let b2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Matrix::uniform(1, hidden, 1.0, rng),
            b1: Matrix::uniform(1, hidden, 1.0, rng),
            w2: Matrix::uniform(hidden, d_llm, b2, rng),
            b2: Matrix::uniform(1, d_llm, b2, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_llm(&self) -> usize {
        self.w2.cols()
    }

    fn check_finite(&self) -> Result<()> {
        for (name, m) in self.named() {
            if !m.is_finite() {
                return Err(Error::numeric(format!("interval embedder parameter {name} is not finite")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Matrix); 4] {
        [("interval.W1", &self.w1), ("interval.b1", &self.b1), ("interval.W2", &self.w2), ("interval.b2", &self.b2)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("interval.W1", &mut self.w1),
            ("interval.b1", &mut self.b1),
            ("interval.W2", &mut self.w2),
            ("interval.b2", &mut self.b2),
        ]
    }

    /// Forward over already-normalized scalars, one output row each.
    pub fn forward_normalized(&self, inputs: &[f64]) -> Result<(Matrix, IntervalCache)> {
        self.check_finite()?;
        let h = self.hidden();
        let mut hidden = Matrix::zeros(inputs.len(), h);
        for (r, &s) in inputs.iter().enumerate() {
            for (j, out) in hidden.row_mut(r).iter_mut().enumerate() {
                *out = (s * self.w1.get(0, j) + self.b1.get(0, j)).tanh();
            }
        }
        let mut out = hidden.matmul(&self.w2);
        out.add_row(&self.b2);
        Ok((out, IntervalCache { inputs: inputs.to_vec(), hidden }))
    }

    /// Embeds day intervals, one output row per interval.
    pub fn embed(&self, days: &[f64]) -> Result<Matrix> {
        let inputs = days.iter().map(|&t| normalize_interval(t)).collect::<Result<Vec<_>>>()?;
        Ok(self.forward_normalized(&inputs)?.0)
    }

    pub fn embed_one(&self, days: f64) -> Result<Vec<f64>> {
        Ok(self.embed(&[days])?.into_vec())
    }

    pub fn backward(&self, cache: &IntervalCache, grad_out: &Matrix) -> IntervalGrads {
        let h = self.hidden();
        let gw2 = cache.hidden.t_matmul(grad_out);
        let gb2 = grad_out.sum_rows();
        // Through tanh: d pre = d hidden * (1 - hidden²).
        let mut gpre = grad_out.matmul_t(&self.w2);
        for r in 0..gpre.rows() {
            for j in 0..h {
                let a = cache.hidden.get(r, j);
                let v = gpre.get(r, j) * (1.0 - a * a);
                gpre.set(r, j, v);
            }
        }
        let mut gw1 = Matrix::zeros(1, h);
        let mut inputs = vec![0.0; cache.inputs.len()];
        for (r, &s) in cache.inputs.iter().enumerate() {
            for j in 0..h {
                let g = gpre.get(r, j);
                gw1.set(0, j, gw1.get(0, j) + g * s);
                inputs[r] += g * self.w1.get(0, j);
            }
        }
        IntervalGrads { w1: gw1, b1: gpre.sum_rows(), w2: gw2, b2: gb2, inputs }
    }

    pub fn to_tensors(&self) -> NamedTensors {
        let mut t = NamedTensors::new(INTERVAL_EMBEDDER_FORMAT);
        for (name, m) in self.named() {
            t.insert(name, m.clone());
        }
        t
    }

    pub fn from_tensors(t: &NamedTensors) -> Result<Self> {
        let w1 = t.get("interval.W1")?;
        let w2 = t.get("interval.W2")?;
        let (h, d) = (w1.cols(), w2.cols());
        Ok(Self {
            w1: t.expect("interval.W1", 1, h)?,
            b1: t.expect("interval.b1", 1, h)?,
            w2: t.expect("interval.W2", h, d)?,
            b2: t.expect("interval.b2", 1, d)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn normalization_values() {
        assert_eq!(normalize_interval(0.0).unwrap(), 0.0);
        assert!((normalize_interval(1.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((normalize_interval(std::f64::consts::E - 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(normalize_interval(-1.0).is_err());
        assert!(normalize_interval(f64::NAN).is_err());
    }

    #[test]
    fn zero_params_give_zero_vectors() {
        let e = IntervalEmbedder::zeros(8, 5);
        let out = e.embed(&[0.0, 3.0, 400.0]).unwrap();
        assert_eq!(out.max_abs(), 0.0);
        assert_eq!(out.shape(), (3, 5));
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut e = IntervalEmbedder::init(4, 3, &mut seed::rng(1));
        e.w2.set(1, 1, f64::INFINITY);
        assert!(matches!(e.embed(&[1.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn pooled_title_rows() {
        let table = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![0.0, 0.0]]).unwrap();
        let one = embed_tokens(&[1], &table).unwrap();
        assert_eq!(one.pooled, vec![3.0, 6.0]);
        let two = embed_tokens(&[0, 1], &table).unwrap();
        assert_eq!(two.pooled, vec![2.0, 4.0]);
        assert!(embed_tokens(&[], &table).is_err());
        assert!(embed_tokens(&[9], &table).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let e = IntervalEmbedder::init(6, 4, &mut seed::rng(3));
        let t = NamedTensors::from_bytes(&e.to_tensors().to_bytes().unwrap()).unwrap();
        assert_eq!(t.format, INTERVAL_EMBEDDER_FORMAT);
        assert_eq!(IntervalEmbedder::from_tensors(&t).unwrap(), e);
    }
}
