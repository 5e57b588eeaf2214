use crate::error::{Error, Result};
use crate::tensor::{
    glorot_uniform, layer_norm, linear, BoundParams, Graph, MultiHeadAttention, ParamStore, Real,
    Rng, Tensor, Var,
};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FafimConfig {
    /// Patch size `P`.
    pub patch: usize,
    /// Token width `C`.
    pub width: usize,
    pub heads: usize,
}

impl Default for FafimConfig {
    fn default() -> Self {
        FafimConfig {
            patch: 4,
            width: 64,
            heads: 4,
        }
    }
}

/// Background retrieval plus foreground-aware integration, producing the
/// reconstructed background latent `z_rec` from pooled foreground features
/// and the codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioner {
    pub config: FafimConfig,
    /// Latent grid `h × w`.
    pub height: usize,
    pub width: usize,
    /// Latent / codebook channel count.
    pub channels: usize,
    retrieval: MultiHeadAttention,
    cross: MultiHeadAttention,
    self_attn: MultiHeadAttention,
}

/// Intermediate values of one conditioning pass.
pub struct ConditionVars<'g, T: Real> {
    pub background: Var<'g, T>,
    pub retrieval_attention: Vec<Var<'g, T>>,
    pub tokens: Var<'g, T>,
    pub integrated: Var<'g, T>,
    pub z_rec: Var<'g, T>,
}

impl Conditioner {
    pub fn new(config: FafimConfig, height: usize, width: usize, channels: usize) -> Result<Self> {
        let FafimConfig {
            patch,
            width: c,
            heads,
        } = config;
        if patch == 0 || height % patch != 0 || width % patch != 0 {
            return Err(Error::Config(format!(
                "patch size {patch} does not tile the {height}x{width} latent grid"
            )));
        }
        if c == 0 || c % 4 != 0 {
            return Err(Error::Config(format!(
                "token width {c} must be a positive multiple of 4"
            )));
        }
        Ok(Conditioner {
            config,
            height,
            width,
            channels,
            retrieval: MultiHeadAttention::new("bkrm", channels, channels, channels, c, c, heads)?,
            cross: MultiHeadAttention::new("fafim.cross", c, c, c, c, c, heads)?,
            self_attn: MultiHeadAttention::new("fafim.self", c, c, c, c, c, heads)?,
        })
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.config.patch) * (self.width / self.config.patch)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &Rng) {
        let mut rng = rng.split("conditioning");
        let c = self.config.width;
        let d = self.channels;
        let pd = self.config.patch * self.config.patch * d;
        self.retrieval.init(store, &mut rng);
        self.cross.init(store, &mut rng);
        self.self_attn.init(store, &mut rng);
        store.insert("fafim.mask_embed", glorot_uniform(&mut rng, &[2, d], 2, d));
        store.insert("fafim.patch.w", glorot_uniform(&mut rng, &[pd, c], pd, c));
        store.insert("fafim.patch.b", Tensor::zeros([c]));
        for ln in ["fafim.ln1", "fafim.ln2"] {
            store.insert(format!("{ln}.gain"), Tensor::full([c], T::one()));
            store.insert(format!("{ln}.bias"), Tensor::zeros([c]));
        }
        store.insert("fafim.mlp.w1", glorot_uniform(&mut rng, &[c, c], c, c));
        store.insert("fafim.mlp.b1", Tensor::zeros([c]));
        store.insert("fafim.mlp.w2", glorot_uniform(&mut rng, &[c, d], c, d));
        store.insert("fafim.mlp.b2", Tensor::zeros([d]));
    }

    /// `x^b = MHA(x^f, e, e)`: pooled foreground vectors `[S, D]` attend over
    /// the codebook entries `[K, D]`. Returns `[S, C]` and the per-head
    /// attention matrices.
    pub fn retrieve_background<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        pooled: Var<'g, T>,
        codebook: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        self.retrieval
            .forward_with_weights(p, pooled, codebook, codebook)
    }

    /// Patch tokens of `ME(m̄^d) + c^f`, optionally with positional encoding.
    /// `features` is `[h, w, D]`, `foreground` is `m̄^d` as `[h, w]` 0/1.
    pub fn foreground_tokens<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        features: Var<'g, T>,
        foreground: &Tensor<T>,
        with_pe: bool,
    ) -> Result<Var<'g, T>> {
        let (h, w, d) = (self.height, self.width, self.channels);
        if features.shape() != [h, w, d] || foreground.shape() != [h, w] {
            return Err(Error::Dimension(format!(
                "foreground tokens need [{h}, {w}, {d}] features and a [{h}, {w}] mask, got {:?} and {:?}",
                features.shape(),
                foreground.shape()
            )));
        }
        let g = features.graph();
        let one_hot = Tensor::from_fn([h * w, 2], |i| {
            let on = foreground.data()[i / 2] > T::lit(0.5);
            if (i % 2 == 1) == on {
                T::one()
            } else {
                T::zero()
            }
        });
        let embed = g
            .constant(one_hot)
            .matmul(p.get("fafim.mask_embed")?)?
            .reshape(&[h, w, d])?;
        let pk = self.config.patch;
        let patches = features
            .add(embed)?
            .reshape(&[1, h, w, d])?
            .im2col(pk, pk, 0)?;
        let tokens = linear(
            patches,
            p.get("fafim.patch.w")?,
            Some(p.get("fafim.patch.b")?),
        )?;
        if with_pe {
            tokens.add(g.constant(self.positional_encoding()))
        } else {
            Ok(tokens)
        }
    }

    /// Fixed 2-D sinusoidal encoding `[N, C]`; the first half of the channels
    /// encodes the patch row, the second half the column.
    pub fn positional_encoding<T: Real>(&self) -> Tensor<T> {
        sinusoidal_2d(
            self.height / self.config.patch,
            self.width / self.config.patch,
            self.config.width,
        )
    }

    /// Cross-attention against `x^b` then self-attention with encoded
    /// queries and keys, each followed by a residual and layer norm.
    pub fn integrate<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        tokens: Var<'g, T>,
        background: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let fused = self.cross.forward(p, tokens, background, background)?;
        let fused = layer_norm(
            fused.add(tokens)?,
            p.get("fafim.ln1.gain")?,
            p.get("fafim.ln1.bias")?,
            LN_EPS,
        )?;
        let pe = tokens.graph().constant(self.positional_encoding());
        let located = fused.add(pe)?;
        let attended = self.self_attn.forward(p, located, located, fused)?;
        layer_norm(
            attended.add(fused)?,
            p.get("fafim.ln2.gain")?,
            p.get("fafim.ln2.bias")?,
            LN_EPS,
        )
    }

    /// Token grid upsampled by `P` then a per-position MLP: `[N, C] → [h, w, D]`.
    pub fn reconstruct<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        integrated: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let (h, w, c) = (self.height, self.width, self.config.width);
        let pk = self.config.patch;
        if integrated.shape() != [self.tokens(), c] {
            return Err(Error::Config(format!(
                "expected [{}, {c}] tokens, got {:?}",
                self.tokens(),
                integrated.shape()
            )));
        }
        let grid = integrated
            .reshape(&[1, h / pk, w / pk, c])?
            .upsample_nearest(pk)?
            .reshape(&[h * w, c])?;
        let hidden = linear(grid, p.get("fafim.mlp.w1")?, Some(p.get("fafim.mlp.b1")?))?.silu();
        linear(hidden, p.get("fafim.mlp.w2")?, Some(p.get("fafim.mlp.b2")?))?.reshape(&[
            h,
            w,
            self.channels,
        ])
    }

    /// Full pass: pooled features and codebook to `z_rec`.
    pub fn forward<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        pooled: Var<'g, T>,
        codebook: Var<'g, T>,
        features: Var<'g, T>,
        foreground: &Tensor<T>,
    ) -> Result<ConditionVars<'g, T>> {
        let (background, retrieval_attention) = self.retrieve_background(p, pooled, codebook)?;
        let tokens = self.foreground_tokens(p, features, foreground, true)?;
        let integrated = self.integrate(p, tokens, background)?;
        let z_rec = self.reconstruct(p, integrated)?;
        Ok(ConditionVars {
            background,
            retrieval_attention,
            tokens,
            integrated,
            z_rec,
        })
    }

    /// Convenience wrapper on frozen tensors.
    pub fn z_rec<T: Real>(
        &self,
        params: &ParamStore<T>,
        pooled: &Tensor<T>,
        codebook: &Tensor<T>,
        features: &Tensor<T>,
        foreground: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let vars = self.forward(
            &p,
            g.constant(pooled.clone()),
            g.constant(codebook.clone()),
            g.constant(features.clone()),
            foreground,
        )?;
        Ok((*vars.z_rec.value()).clone())
    }
}

/// `[rows·cols, C]` sinusoidal table; `C` must be divisible by 4.
pub fn sinusoidal_2d<T: Real>(rows: usize, cols: usize, channels: usize) -> Tensor<T> {
    let half = channels / 2;
    let enc = |pos: usize, j: usize| -> f64 {
        let pair = j / 2;
        let freq = 1.0 / 10000f64.powf(2.0 * pair as f64 / half as f64);
        let a = pos as f64 * freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    Tensor::from_fn([rows * cols, channels], |i| {
        let (n, ch) = (i / channels, i % channels);
        let (r, c) = (n / cols, n % cols);
        T::lit(if ch < half {
            enc(r, ch)
        } else {
            enc(c, ch - half)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(c: usize, heads: usize, patch: usize) -> (Conditioner, ParamStore<f64>) {
        let cond = Conditioner::new(
            FafimConfig {
                patch,
                width: c,
                heads,
            },
            8,
            8,
            3,
        )
        .unwrap();
        let mut store = ParamStore::new();
        cond.init(&mut store, &Rng::new(11));
        (cond, store)
    }

    #[test]
    fn token_count_matches_patch_grid() {
        let cond = Conditioner::new(FafimConfig::default(), 16, 16, 3).unwrap();
        assert_eq!(cond.tokens(), 16);
        assert!(Conditioner::new(
            FafimConfig {
                patch: 3,
                ..FafimConfig::default()
            },
            16,
            16,
            3
        )
        .is_err());
    }

    #[test]
    fn single_codebook_entry_gets_all_attention() {
        let (cond, store) = setup(8, 2, 4);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let xf = g.constant(Rng::new(1).normal_tensor(&[5, 3]));
        let book = g.constant(Rng::new(2).normal_tensor(&[1, 3]));
        let (xb, attn) = cond.retrieve_background(&p, xf, book).unwrap();
        assert_eq!(xb.shape(), [5, 8]);
        for a in attn {
            assert!(a.value().data().iter().all(|&v| v == 1.0));
        }
        // every row is the same single value token
        let v = xb.value();
        for row in v.data().chunks_exact(8) {
            assert_eq!(row, &v.data()[..8]);
        }
    }

    #[test]
    fn zero_inputs_give_pe_plus_bias() {
        let (cond, mut store) = setup(8, 2, 4);
        store
            .replace("fafim.mask_embed", Tensor::zeros([2, 3]))
            .unwrap();
        store
            .replace("fafim.patch.b", Tensor::full([8], 0.25))
            .unwrap();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let feats = g.constant(Tensor::zeros([8, 8, 3]));
        let mask = Tensor::zeros([8, 8]);
        let tokens = cond
            .foreground_tokens(&p, feats, &mask, true)
            .unwrap()
            .value();
        let pe: Tensor<f64> = cond.positional_encoding();
        let expected = pe.map(|v| v + 0.25);
        assert!(tokens.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn upsampled_blocks_are_constant() {
        let (cond, store) = setup(8, 2, 4);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let tokens = g.constant(Rng::new(3).normal_tensor(&[4, 8]));
        let z = cond.reconstruct(&p, tokens).unwrap().value();
        assert_eq!(z.shape(), [8, 8, 3]);
        let at = |y: usize, x: usize| &z.data()[(y * 8 + x) * 3..(y * 8 + x) * 3 + 3];
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(at(y, x), at(y / 4 * 4, x / 4 * 4));
            }
        }
    }

    #[test]
    fn pe_is_deterministic_and_bounded() {
        let a: Tensor<f64> = sinusoidal_2d(4, 4, 64);
        assert_eq!(a, sinusoidal_2d(4, 4, 64));
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        // row 0 / column 0 encodes sin(0)=0, cos(0)=1
        assert_eq!(&a.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
    }
}
