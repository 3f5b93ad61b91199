use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::nn::l2_normalize;

/// Embeddings with class and modality tags. For every anchor the positives
/// are the other embeddings of the same class from a different modality
/// group; the negatives are all embeddings of a different class.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// N×F.
    pub embeddings: Tensor,
    pub classes: Vec<usize>,
    pub groups: Vec<usize>,
    pub anchors: Vec<usize>,
    pub tau: f64,
}

impl ContrastiveBatch {
    /// Every embedding is an anchor.
    pub fn cross_modal(embeddings: Tensor, classes: Vec<usize>, groups: Vec<usize>, tau: f64) -> Self {
        let anchors = (0..classes.len()).collect();
        Self {
            embeddings,
            classes,
            groups,
            anchors,
            tau,
        }
    }

    pub fn is_positive(&self, i: usize, j: usize) -> bool {
        i != j && self.classes[i] == self.classes[j] && self.groups[i] != self.groups[j]
    }

    pub fn is_negative(&self, i: usize, k: usize) -> bool {
        self.classes[i] != self.classes[k]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        let n = self.embeddings.dim(0)?;
        if self.classes.len() != n || self.groups.len() != n {
            return Err(Error::invalid("class/group tags do not match the embedding count"));
        }
        for &a in &self.anchors {
            if a >= n {
                return Err(Error::invalid(format!("anchor {a} out of range")));
            }
            if !(0..n).any(|j| self.is_positive(a, j)) {
                return Err(Error::invalid(format!("anchor {a} has no positive")));
            }
            if !(0..n).any(|k| self.is_negative(a, k)) {
                return Err(Error::invalid(format!("anchor {a} has no negative")));
            }
        }
        Ok(())
    }
}

/// Numerically stable `ln(1 + eˣ)`.
pub(crate) fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

/// Mean over (anchor, positive) pairs of
/// `−log(exp(s_ij/τ) / (exp(s_ij/τ) + Σ_{k∈N_i} exp(s_ik/τ)))` with cosine `s`.
pub fn info_nce_loss(batch: &ContrastiveBatch) -> Result<Tensor> {
    batch.validate()?;
    let n = batch.classes.len();
    let dtype = batch.embeddings.dtype();
    let dev = batch.embeddings.device();
    let z = l2_normalize(&batch.embeddings)?;
    let logits = (z.matmul(&z.t()?)? / batch.tau)?;

    let mut is_anchor = vec![false; n];
    for &a in &batch.anchors {
        is_anchor[a] = true;
    }
    let mut pos = vec![0f64; n * n];
    let mut neg_fill = vec![0f64; n * n];
    let mut npairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if is_anchor[i] && batch.is_positive(i, j) {
                pos[i * n + j] = 1.0;
                npairs += 1;
            }
            if !batch.is_negative(i, j) {
                neg_fill[i * n + j] = -1e30;
            }
        }
    }
    let pos = Tensor::from_vec(pos, (n, n), dev)?.to_dtype(dtype)?;
    let neg_fill = Tensor::from_vec(neg_fill, (n, n), dev)?.to_dtype(dtype)?;

    // log Σ_{k∈N_i} exp(s_ik/τ), stabilised by the row max over negatives.
    let neg_logits = (&logits + &neg_fill)?;
    let row_max = neg_logits.max_keepdim(D::Minus1)?.detach();
    let log_neg = neg_logits
        .broadcast_sub(&row_max)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .broadcast_add(&row_max)?;
    // −log(e^a / (e^a + e^b)) = softplus(b − a)
    let per_pair = softplus(&log_neg.broadcast_sub(&logits)?)?;
    Ok(((per_pair * pos)?.sum_all()? / npairs as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, tensor_to_f64};
    use crate::rng::{normal_vec, rng_from};
    use candle_core::{DType, Device, Var};

    fn t64(v: Vec<f64>, n: usize, f: usize) -> Tensor {
        Tensor::from_vec(v, (n, f), &Device::Cpu).unwrap()
    }

    /// Direct evaluation of the loss with explicit loops.
    fn oracle(e: &[f64], f: usize, b: &ContrastiveBatch) -> f64 {
        let n = b.classes.len();
        let cos = |i: usize, j: usize| {
            let (a, c) = (&e[i * f..(i + 1) * f], &e[j * f..(j + 1) * f]);
            let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nc)
        };
        let (mut total, mut count) = (0.0, 0);
        for &i in &b.anchors {
            for j in 0..n {
                if !b.is_positive(i, j) {
                    continue;
                }
                let num = (cos(i, j) / b.tau).exp();
                let mut den = num;
                for k in 0..n {
                    if b.is_negative(i, k) {
                        den += (cos(i, k) / b.tau).exp();
                    }
                }
                total += -(num / den).ln();
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn all_orthogonal_gives_log_n_plus_one() {
        // anchor e0, positive e1, n = 4 negatives; every cosine with the anchor is 0
        let f = 6;
        let mut e = vec![0.0; 6 * f];
        for (row, col) in [(0, 0), (1, 1), (2, 2), (3, 3), (4, 4), (5, 5)] {
            e[row * f + col] = 1.0;
        }
        let b = ContrastiveBatch {
            embeddings: t64(e, 6, f),
            classes: vec![0, 0, 1, 2, 3, 4],
            groups: vec![0, 1, 0, 1, 2, 3],
            anchors: vec![0],
            tau: 0.07,
        };
        let loss = scalar(&info_nce_loss(&b).unwrap()).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn perfect_alignment_goes_to_zero_as_tau_shrinks() {
        let e = vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.1, 0.01, 0.001] {
            let b = ContrastiveBatch {
                embeddings: t64(e.clone(), 4, 2),
                classes: vec![0, 0, 1, 1],
                groups: vec![0, 1, 0, 1],
                anchors: vec![0],
                tau,
            };
            let loss = scalar(&info_nce_loss(&b).unwrap()).unwrap();
            assert!(loss >= 0.0 && (loss < prev || loss == 0.0));
            prev = loss;
        }
        assert!(prev < 1e-12, "{prev}");
    }

    #[test]
    fn matches_direct_formula_on_random_batch() {
        let mut rng = rng_from(31);
        let (n, f) = (8, 5);
        let e: Vec<f64> = normal_vec(&mut rng, n * f, 1.0).into_iter().map(f64::from).collect();
        let b = ContrastiveBatch::cross_modal(
            t64(e.clone(), n, f),
            vec![0, 0, 1, 1, 2, 2, 0, 1],
            vec![0, 1, 0, 1, 0, 1, 2, 2],
            0.07,
        );
        let got = scalar(&info_nce_loss(&b).unwrap()).unwrap();
        let want = oracle(&e, f, &b);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rng_from(32);
        let (n, f) = (6, 4);
        let classes = vec![0, 0, 1, 1, 2, 2];
        let groups = vec![0, 1, 0, 1, 0, 1];
        let e: Vec<f64> = normal_vec(&mut rng, n * f, 1.0).into_iter().map(f64::from).collect();
        let var = Var::from_tensor(&t64(e.clone(), n, f)).unwrap();
        let b = ContrastiveBatch::cross_modal(var.as_tensor().clone(), classes.clone(), groups.clone(), 0.5);
        let grads = info_nce_loss(&b).unwrap().backward().unwrap();
        let g = tensor_to_f64(grads.get(var.as_tensor()).unwrap()).unwrap();
        let eval = |v: Vec<f64>| {
            let b = ContrastiveBatch::cross_modal(t64(v, n, f), classes.clone(), groups.clone(), 0.5);
            scalar(&info_nce_loss(&b).unwrap()).unwrap()
        };
        let h = 1e-6;
        for idx in 0..n * f {
            let mut p = e.clone();
            p[idx] += h;
            let mut m = e.clone();
            m[idx] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - g[idx]).abs() < 1e-9, "coord {idx}: fd {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn rejects_bad_temperature_and_missing_negatives() {
        let e = t64(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let b = ContrastiveBatch::cross_modal(e.clone(), vec![0, 0], vec![0, 1], 0.1);
        assert!(info_nce_loss(&b).is_err());
        let b = ContrastiveBatch::cross_modal(e, vec![0, 1], vec![0, 1], 0.0);
        assert!(matches!(info_nce_loss(&b), Err(Error::InvalidArgument(_))));
        let _ = DType::F64;
    }
}
