use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// `K × D` table of latent embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    entries: Tensor<T>,
    frozen: bool,
}

impl<T: Real> Codebook<T> {
    pub fn new(entries: Tensor<T>) -> Result<Self> {
        let s = entries.shape();
        if s.len() != 2 {
            return Err(Error::Config(format!("codebook must be [K, D], got {s:?}")));
        }
        Ok(Codebook {
            entries,
            frozen: false,
        })
    }

    pub fn entries(&self) -> &Tensor<T> {
        &self.entries
    }

    /// Mutable access; refused once frozen.
    pub fn entries_mut(&mut self) -> Result<&mut Tensor<T>> {
        if self.frozen {
            return Err(Error::Invariant("codebook is frozen".into()));
        }
        Ok(&mut self.entries)
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn entry(&self, k: usize) -> &[T] {
        let d = self.dim();
        &self.entries.data()[k * d..(k + 1) * d]
    }

    /// Nearest entry by squared Euclidean distance; ties go to the lowest
    /// index. Returns `(index, squared distance)`.
    pub fn nearest(&self, v: &[T]) -> (usize, T) {
        let d = self.dim();
        let mut best = (0, T::infinity());
        for (k, e) in self.entries.data().chunks_exact(d).enumerate() {
            let dist = e
                .iter()
                .zip(v)
                .map(|(&a, &b)| (a - b) * (a - b))
                .fold(T::zero(), |acc, x| acc + x);
            if dist < best.1 {
                best = (k, dist);
            }
        }
        best
    }

    /// Replaces every `D`-vector of `latent` (last axis) by its nearest
    /// entry. Returns the quantized tensor and the index map.
    pub fn quantize(&self, latent: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.dim();
        if self.size() == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        if latent.shape().last() != Some(&d) {
            return Err(Error::Config(format!(
                "latent {:?} has channels != codebook dim {d}",
                latent.shape()
            )));
        }
        let mut out = Vec::with_capacity(latent.numel());
        let mut indices = Vec::with_capacity(latent.numel() / d);
        for v in latent.data().chunks_exact(d) {
            let (k, _) = self.nearest(v);
            indices.push(k);
            out.extend_from_slice(self.entry(k));
        }
        Ok((Tensor::new(latent.shape().to_vec(), out)?, indices))
    }

    /// Index of every pair of entries closer than `tol`, if any.
    pub fn duplicate_pair(&self, tol: f64) -> Option<(usize, usize)> {
        let k = self.size();
        for i in 0..k {
            for j in i + 1..k {
                let dist = self
                    .entry(i)
                    .iter()
                    .zip(self.entry(j))
                    .map(|(a, b)| (*a - *b).abs().as_f64())
                    .fold(0.0, f64::max);
                if dist < tol {
                    return Some((i, j));
                }
            }
        }
        None
    }

    pub fn cast<U: Real>(&self) -> Codebook<U> {
        Codebook {
            entries: self.entries.cast(),
            frozen: self.frozen,
        }
    }
}

/// In-graph quantization with a straight-through estimator.
pub struct QuantizedVars<'g, T: Real> {
    /// Forward value equals the quantized latent; the gradient copies
    /// unchanged to the pre-quantization latent.
    pub straight_through: Var<'g, T>,
    /// Selected codebook rows, differentiable with respect to the codebook.
    pub selected: Var<'g, T>,
    pub indices: Vec<usize>,
}

/// `latent` is `[..., D]`, `codebook` is `[K, D]`.
pub fn quantize_straight_through<'g, T: Real>(
    latent: Var<'g, T>,
    codebook: Var<'g, T>,
) -> Result<QuantizedVars<'g, T>> {
    let table = Codebook::new((*codebook.value()).clone())?;
    let (_, indices) = table.quantize(&latent.value())?;
    let shape = latent.shape();
    let selected = codebook.gather_rows(&indices)?.reshape(&shape)?;
    let offset = selected.sub(latent)?.detach();
    Ok(QuantizedVars {
        straight_through: latent.add(offset)?,
        selected,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Rng};

    fn random_book(k: usize, seed: u64) -> Codebook<f64> {
        let mut rng = Rng::new(seed);
        Codebook::new(rng.normal_tensor(&[k, 3])).unwrap()
    }

    #[test]
    fn exact_entry_maps_to_itself() {
        let book = random_book(16, 1);
        let v = Tensor::new([1, 3], book.entry(7).to_vec()).unwrap();
        let (q, idx) = book.quantize(&v).unwrap();
        assert_eq!(idx, [7]);
        assert_eq!(q.data(), book.entry(7));
        assert_eq!(book.nearest(book.entry(7)).1, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let e = Tensor::from_f64([3, 3], &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let book = Codebook::new(e).unwrap();
        assert_eq!(book.nearest(&[0.0, 0.0, 0.0]).0, 0);
        assert_eq!(book.nearest(&[1.0, 0.0, 0.0]).0, 0);
    }

    #[test]
    fn idempotent() {
        let book = random_book(16, 2);
        let mut rng = Rng::new(3);
        let z: Tensor<f64> = rng.normal_tensor(&[4, 4, 3]);
        let (q1, _) = book.quantize(&z).unwrap();
        let (q2, _) = book.quantize(&q1).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn matches_exhaustive_search() {
        let book = random_book(16, 4);
        let mut rng = Rng::new(5);
        let z: Tensor<f64> = rng.normal_tensor(&[100, 3]);
        let (_, idx) = book.quantize(&z).unwrap();
        for (n, v) in z.data().chunks_exact(3).enumerate() {
            let dists: Vec<f64> = (0..16)
                .map(|k| {
                    book.entry(k)
                        .iter()
                        .zip(v)
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                })
                .collect();
            let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let first = dists.iter().position(|&d| d == best).unwrap();
            assert_eq!(idx[n], first);
        }
    }

    #[test]
    fn empty_codebook_and_wrong_dim_are_config_errors() {
        let book = random_book(4, 6);
        let z = Tensor::<f64>::zeros([2, 2]);
        assert!(matches!(book.quantize(&z), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_codebook_refuses_mutation() {
        let mut book = random_book(4, 7);
        book.freeze();
        assert!(book.entries_mut().is_err());
    }

    #[test]
    fn straight_through_copies_gradient() {
        let g = Graph::<f64>::new();
        let mut rng = Rng::new(8);
        let z = g.param(rng.normal_tensor(&[2, 2, 3]));
        let book = g.param(rng.normal_tensor(&[5, 3]));
        let q = quantize_straight_through(z, book).unwrap();
        let table = Codebook::new((*book.value()).clone()).unwrap();
        let (expected, _) = table.quantize(&z.value()).unwrap();
        assert!(q.straight_through.value().max_abs_diff(&expected) < 1e-12);

        let weights = g.constant(rng.normal_tensor(&[2, 2, 3]));
        let loss = q.straight_through.mul(weights).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        // d loss / d z equals d loss / d z_q elementwise.
        assert_eq!(grads.wrt(z).data(), weights.value().data());
    }
}
