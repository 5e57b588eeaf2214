use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, glorot_uniform, layer_norm, linear, BoundParams, Graph, ParamStore, Real, Rng, Tensor,
    Var,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserConfig {
    /// Noisy latent plus condition channels.
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Width of the sinusoidal timestep features.
    pub time_features: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            in_channels: 7,
            out_channels: 3,
            base_width: 32,
            time_features: 32,
        }
    }
}

/// Two-level convolutional U-Net predicting noise from `[B, h, w, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
}

const LN_EPS: f64 = 1e-5;

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        if config.base_width == 0 || config.time_features == 0 || config.time_features % 2 != 0 {
            return Err(Error::Config(
                "denoiser widths must be positive and time features even".into(),
            ));
        }
        Ok(Denoiser { config })
    }

    fn embed_width(&self) -> usize {
        2 * self.config.base_width
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &Rng) {
        let mut rng = rng.split("denoiser");
        let c = self.config.base_width;
        let e = self.embed_width();
        let tf = self.config.time_features;
        let mut dense = |store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize| {
            store.insert(
                format!("{name}.w"),
                glorot_uniform(&mut rng, &[fan_in, fan_out], fan_in, fan_out),
            );
            store.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
        };
        dense(store, "unet.time.0", tf, e);
        dense(store, "unet.time.1", e, e);
        dense(store, "unet.in", 9 * self.config.in_channels, c);
        for (name, width) in [("unet.res0", c), ("unet.res1", 2 * c), ("unet.res2", c)] {
            dense(store, &format!("{name}.conv0"), 9 * width, width);
            dense(store, &format!("{name}.conv1"), 9 * width, width);
            dense(store, &format!("{name}.temb"), e, width);
        }
        dense(store, "unet.down", 9 * c, 2 * c);
        dense(store, "unet.up", 9 * 3 * c, c);
        dense(store, "unet.out", 9 * c, self.config.out_channels);
        for (name, width) in [
            ("unet.res0.ln0", c),
            ("unet.res0.ln1", c),
            ("unet.res1.ln0", 2 * c),
            ("unet.res1.ln1", 2 * c),
            ("unet.res2.ln0", c),
            ("unet.res2.ln1", c),
            ("unet.out.ln", c),
        ] {
            store.insert(format!("{name}.gain"), Tensor::full([width], T::one()));
            store.insert(format!("{name}.bias"), Tensor::zeros([width]));
        }
    }

    fn conv<'g, T: Real>(
        p: &BoundParams<'g, T>,
        name: &str,
        x: Var<'g, T>,
        stride: usize,
    ) -> Result<Var<'g, T>> {
        conv2d(
            x,
            p.get(&format!("{name}.w"))?,
            p.get(&format!("{name}.b"))?,
            3,
            stride,
            1,
        )
    }

    fn norm<'g, T: Real>(p: &BoundParams<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
        layer_norm(
            x,
            p.get(&format!("{name}.gain"))?,
            p.get(&format!("{name}.bias"))?,
            LN_EPS,
        )
    }

    fn res_block<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        name: &str,
        x: Var<'g, T>,
        emb: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        let h = Self::norm(p, &format!("{name}.ln0"), x)?.silu();
        let h = Self::conv(p, &format!("{name}.conv0"), h, 1)?;
        let shift = linear(
            emb,
            p.get(&format!("{name}.temb.w"))?,
            Some(p.get(&format!("{name}.temb.b"))?),
        )?
        .repeat_rows(s[1] * s[2])?
        .reshape(&s)?;
        let h = h.add(shift)?;
        let h = Self::norm(p, &format!("{name}.ln1"), h)?.silu();
        let h = Self::conv(p, &format!("{name}.conv1"), h, 1)?;
        x.add(h)
    }

    /// Sinusoidal features of each timestep, `[B, time_features]`.
    pub fn time_features<T: Real>(&self, timesteps: &[usize]) -> Tensor<T> {
        let half = self.config.time_features / 2;
        let n = self.config.time_features;
        Tensor::from_fn([timesteps.len(), n], |i| {
            let (b, j) = (i / n, i % n);
            let freq = 1.0 / 10000f64.powf((j % half) as f64 / half as f64);
            let a = timesteps[b] as f64 * freq;
            T::lit(if j < half { a.sin() } else { a.cos() })
        })
    }

    /// `ε̂` for `[B, h, w, in]` inputs, one timestep per batch entry.
    pub fn forward<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        x: Var<'g, T>,
        timesteps: &[usize],
    ) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4
            || s[3] != self.config.in_channels
            || s[1] % 2 != 0
            || s[2] % 2 != 0
            || s[0] != timesteps.len()
        {
            return Err(Error::Dimension(format!(
                "denoiser expects [B, h, w, {}] with even h, w and B timesteps; got {s:?} with {} timesteps",
                self.config.in_channels,
                timesteps.len()
            )));
        }
        let g = x.graph();
        let tf = g.constant(self.time_features(timesteps));
        let emb = linear(tf, p.get("unet.time.0.w")?, Some(p.get("unet.time.0.b")?))?.silu();
        let emb = linear(emb, p.get("unet.time.1.w")?, Some(p.get("unet.time.1.b")?))?.silu();

        let h0 = Self::conv(p, "unet.in", x, 1)?;
        let h0 = self.res_block(p, "unet.res0", h0, emb)?;
        let h1 = Self::conv(p, "unet.down", h0, 2)?;
        let h1 = self.res_block(p, "unet.res1", h1, emb)?;
        let up = h1.upsample_nearest(2)?;
        let h2 = Self::conv(p, "unet.up", Var::concat(&[up, h0], 3)?, 1)?;
        let h2 = self.res_block(p, "unet.res2", h2, emb)?;
        let out = Self::norm(p, "unet.out.ln", h2)?.silu();
        Self::conv(p, "unet.out", out, 1)
    }

    /// Inference on plain tensors.
    pub fn predict<T: Real>(
        &self,
        params: &ParamStore<T>,
        x: &Tensor<T>,
        timesteps: &[usize],
    ) -> Result<Tensor<T>> {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let out = self.forward(&p, g.constant(x.clone()), timesteps)?;
        Ok((*out.value()).clone())
    }
}
