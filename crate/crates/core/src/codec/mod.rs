//! Stage-1 image autoencoder with a vector-quantization codebook.
//!
//! The encoder compresses an `H×W×3` image to an `h×w×3` latent through `n`
//! stride-2 convolution stages. Decoding always passes the latent through
//! the quantization layer first, replacing each latent vector by its nearest
//! codebook entry, then mirrors the encoder with nearest-neighbour upsampling.
//! After stage-1 training the codec is frozen and only read.

mod quantize;
mod train;

pub use quantize::{quantize_straight_through, Codebook, QuantizedVars};
pub use train::{train_codec, usage_histogram, CodecLoss, CodecTrainConfig, CodecTrainReport};

use crate::error::{Error, Result};
use crate::raster::RgbImage;
use crate::tensor::{
    conv2d, glorot_uniform, BoundParams, Graph, ParamStore, Real, Rng, Tensor, Var,
};

/// Latent channel count; equal to the codebook dimension.
pub const LATENT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub image_size: usize,
    /// `n` in the downsample factor `f = 2^n`.
    pub downsample_stages: usize,
    pub codebook_size: usize,
    /// Encoder width of the first stage; doubles per stage.
    pub base_width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_size: 64,
            downsample_stages: 2,
            codebook_size: 128,
            base_width: 16,
        }
    }
}

impl CodecConfig {
    pub fn factor(&self) -> usize {
        1 << self.downsample_stages
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.factor()
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample_stages == 0 || self.downsample_stages > 6 {
            return Err(Error::Config(format!(
                "codec.downsample_stages must be in 1..=6, got {}",
                self.downsample_stages
            )));
        }
        if self.image_size == 0 || self.image_size % self.factor() != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by downsample factor {}",
                self.image_size,
                self.factor()
            )));
        }
        if self.codebook_size == 0 {
            return Err(Error::Config("codec.codebook_size must be >= 1".into()));
        }
        if self.base_width == 0 {
            return Err(Error::Config("codec.base_width must be >= 1".into()));
        }
        Ok(())
    }

    fn stage_width(&self, stage: usize) -> usize {
        self.base_width << stage
    }
}

/// Encoder/decoder architecture; weights live in a [`ParamStore`] under
/// `codec.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    pub config: CodecConfig,
}

impl LatentCodec {
    pub fn new(config: CodecConfig) -> Result<Self> {
        config.validate()?;
        Ok(LatentCodec { config })
    }

    /// Fresh weights plus a codebook drawn around the origin.
    pub fn init<T: Real>(&self, rng: &Rng) -> (ParamStore<T>, Codebook<T>) {
        let mut rng = rng.split("codec-init");
        let mut store = ParamStore::new();
        let n = self.config.downsample_stages;
        let mut conv =
            |store: &mut ParamStore<T>, name: &str, k: usize, cin: usize, cout: usize| {
                let w = glorot_uniform(&mut rng, &[k * k * cin, cout], k * k * cin, k * k * cout);
                store.insert(format!("{name}.w"), w);
                store.insert(format!("{name}.b"), Tensor::zeros([cout]));
            };
        let mut cin = 3;
        for s in 0..n {
            let cout = self.config.stage_width(s);
            conv(&mut store, &format!("codec.enc.{s}"), 3, cin, cout);
            cin = cout;
        }
        conv(&mut store, "codec.enc.proj", 1, cin, LATENT_CHANNELS);
        let top = self.config.stage_width(n - 1);
        conv(&mut store, "codec.dec.proj", 1, LATENT_CHANNELS, top);
        let mut cin = top;
        for s in (0..n).rev() {
            let cout = if s == 0 {
                self.config.base_width
            } else {
                self.config.stage_width(s - 1)
            };
            conv(&mut store, &format!("codec.dec.{s}"), 3, cin, cout);
            cin = cout;
        }
        conv(&mut store, "codec.dec.out", 3, cin, 3);

        let mut book_rng = rng.split("codebook");
        let entries =
            book_rng.uniform_tensor(&[self.config.codebook_size, LATENT_CHANNELS], -0.5, 0.5);
        let codebook = Codebook::new(entries).expect("rank-2 entries");
        (store, codebook)
    }

    fn check_image<T: Real>(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
            return Err(Error::Dimension(format!(
                "codec expects [B, {n}, {n}, 3] images, got {s:?}"
            )));
        }
        Ok(())
    }

    fn check_latent<T: Real>(&self, z: &Var<'_, T>) -> Result<()> {
        let s = z.shape();
        let n = self.config.latent_size();
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != LATENT_CHANNELS {
            return Err(Error::Dimension(format!(
                "codec expects [B, {n}, {n}, {LATENT_CHANNELS}] latents, got {s:?}"
            )));
        }
        Ok(())
    }

    /// `[B, H, W, 3] → [B, h, w, 3]`.
    pub fn encode_graph<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        x: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_image(&x)?;
        let mut h = x;
        for s in 0..self.config.downsample_stages {
            let name = format!("codec.enc.{s}");
            h = conv2d(
                h,
                p.get(&format!("{name}.w"))?,
                p.get(&format!("{name}.b"))?,
                3,
                2,
                1,
            )?
            .silu();
        }
        conv2d(
            h,
            p.get("codec.enc.proj.w")?,
            p.get("codec.enc.proj.b")?,
            1,
            1,
            0,
        )
    }

    /// Decoder body without quantization: `[B, h, w, 3] → [B, H, W, 3]`,
    /// unclamped.
    pub fn decode_graph<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        z: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_latent(&z)?;
        let mut h = conv2d(
            z,
            p.get("codec.dec.proj.w")?,
            p.get("codec.dec.proj.b")?,
            1,
            1,
            0,
        )?
        .silu();
        for s in (0..self.config.downsample_stages).rev() {
            let name = format!("codec.dec.{s}");
            h = h.upsample_nearest(2)?;
            h = conv2d(
                h,
                p.get(&format!("{name}.w"))?,
                p.get(&format!("{name}.b"))?,
                3,
                1,
                1,
            )?
            .silu();
        }
        conv2d(
            h,
            p.get("codec.dec.out.w")?,
            p.get("codec.dec.out.b")?,
            3,
            1,
            1,
        )
    }

    /// Encodes one `[H, W, 3]` image tensor to an `[h, w, 3]` latent.
    pub fn encode<T: Real>(&self, params: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .encode_batch(params, std::slice::from_ref(image))?
            .remove(0))
    }

    pub fn encode_batch<T: Real>(
        &self,
        params: &ParamStore<T>,
        images: &[Tensor<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let n = self.config.image_size;
        for img in images {
            if img.shape() != [n, n, 3] {
                return Err(Error::Dimension(format!(
                    "codec expects [{n}, {n}, 3] images, got {:?}",
                    img.shape()
                )));
            }
        }
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let x = g.constant(stack(images)?);
        let z = self.encode_graph(&p, x)?.value();
        unstack(&z)
    }

    pub fn encode_image<T: Real>(
        &self,
        params: &ParamStore<T>,
        image: &RgbImage,
    ) -> Result<Tensor<T>> {
        self.encode(params, &image.to_tensor())
    }

    /// Quantizes then decodes one `[h, w, 3]` latent; output clamped to `[0, 1]`.
    pub fn decode<T: Real>(
        &self,
        params: &ParamStore<T>,
        codebook: &Codebook<T>,
        latent: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let n = self.config.latent_size();
        if latent.shape() != [n, n, LATENT_CHANNELS] {
            return Err(Error::Dimension(format!(
                "codec expects [{n}, {n}, {LATENT_CHANNELS}] latents, got {:?}",
                latent.shape()
            )));
        }
        let (quantized, _) = codebook.quantize(latent)?;
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let z = g.constant(quantized.reshape([1, n, n, LATENT_CHANNELS])?);
        let x = self.decode_graph(&p, z)?.value();
        let size = self.config.image_size;
        let zero = T::zero();
        let one = T::one();
        (*x).clone()
            .reshape([size, size, 3])
            .map(|t| t.map(|v| v.max(zero).min(one)))
    }

    pub fn decode_image<T: Real>(
        &self,
        params: &ParamStore<T>,
        codebook: &Codebook<T>,
        latent: &Tensor<T>,
    ) -> Result<RgbImage> {
        RgbImage::from_tensor(&self.decode(params, codebook, latent)?)
    }

    /// `decode(quantize(encode(image)))`.
    pub fn reconstruct(
        &self,
        params: &ParamStore<f32>,
        codebook: &Codebook<f32>,
        image: &RgbImage,
    ) -> Result<RgbImage> {
        let z = self.encode_image(params, image)?;
        self.decode_image(params, codebook, &z)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Real>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "cannot stack {:?} with {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Splits the leading axis.
pub fn unstack<T: Real>(t: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    let n: usize = inner.iter().product();
    t.data()
        .chunks_exact(n)
        .map(|c| Tensor::new(inner.clone(), c.to_vec()))
        .collect()
}
