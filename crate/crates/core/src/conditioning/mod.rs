//! Turning a foreground object into the diffusion condition.
//!
//! The object is cropped and centred, encoded, clustered into superpixels and
//! pooled. The pooled vectors query the codebook for background knowledge,
//! which is fused with mask-embedded patch tokens of the full-frame object
//! features to reconstruct a background latent `z_rec`. The condition blends
//! the object features with `z_rec` and appends the downsampled mask.

mod fafim;
mod slic;

pub use fafim::{sinusoidal_2d, ConditionVars, Conditioner, FafimConfig};
pub use slic::{localized_masked_pooling, slic_superpixels, SlicConfig, SuperpixelAssignment};

use crate::codec::LatentCodec;
use crate::error::{Error, Result};
use crate::raster::{BBox, Mask, RgbImage};
use crate::tensor::{ParamStore, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConditioningConfig {
    pub slic: SlicConfig,
    pub fafim: FafimConfig,
}

/// Object crop centred on a zero canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct CroppedForeground {
    pub image: RgbImage,
    pub mask: Mask,
    /// Foreground box in the input image.
    pub bbox: BBox,
}

/// Crops the tight foreground box, shrinks it (bilinear content, nearest
/// mask) if it exceeds the target, and centres it on a zero canvas.
pub fn crop_and_pad(
    image: &RgbImage,
    mask: &Mask,
    height: usize,
    width: usize,
) -> Result<CroppedForeground> {
    mask.check_dims(image.height(), image.width())?;
    let bbox = mask
        .bbox()
        .ok_or_else(|| Error::Input("mask has no foreground".into()))?;
    let (bh, bw) = (bbox.height(), bbox.width());
    let mut content = RgbImage::black(bh, bw);
    let mut content_mask = Mask::empty(bh, bw);
    for y in 0..bh {
        for x in 0..bw {
            content.set_pixel(y, x, image.pixel(bbox.y0 + y, bbox.x0 + x));
            content_mask.set(y, x, mask.get(bbox.y0 + y, bbox.x0 + x));
        }
    }
    if bh > height || bw > width {
        let scale = (height as f64 / bh as f64).min(width as f64 / bw as f64);
        let nh = ((bh as f64 * scale).floor() as usize).clamp(1, height);
        let nw = ((bw as f64 * scale).floor() as usize).clamp(1, width);
        content = content.resize(nh, nw);
        content_mask = content_mask.resize(nh, nw);
    }
    let (ch, cw) = (content.height(), content.width());
    let (oy, ox) = ((height - ch) / 2, (width - cw) / 2);
    let mut out = RgbImage::black(height, width);
    let mut out_mask = Mask::empty(height, width);
    for y in 0..ch {
        for x in 0..cw {
            out.set_pixel(oy + y, ox + x, content.pixel(y, x));
            out_mask.set(oy + y, ox + x, content_mask.get(y, x));
        }
    }
    Ok(CroppedForeground {
        image: out,
        mask: out_mask,
        bbox,
    })
}

/// Object masks at image and latent resolution, full frame and cropped.
/// `Mask` stores the foreground indicator `m̄`; `m` is its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub foreground: Mask,
    pub foreground_latent: Mask,
    pub crop_foreground_latent: Mask,
}

impl MaskPair {
    pub fn new(foreground: &Mask, crop_foreground: &Mask, factor: usize) -> Result<Self> {
        Ok(MaskPair {
            foreground: foreground.clone(),
            foreground_latent: foreground.downsample_any(factor)?,
            crop_foreground_latent: crop_foreground.downsample_any(factor)?,
        })
    }

    /// `m^d` as `[h, w]`: 1 on editable background cells, 0 on the object.
    pub fn background_latent<T: Real>(&self) -> Tensor<T> {
        self.foreground_latent.background_tensor()
    }

    /// `m̄^d` as `[h, w]`.
    pub fn foreground_latent_tensor<T: Real>(&self) -> Tensor<T> {
        self.foreground_latent.foreground_tensor()
    }
}

/// Repeats an `[h, w]` map across `channels` trailing channels.
pub fn expand_channels<T: Real>(map: &Tensor<T>, channels: usize) -> Tensor<T> {
    let data = map
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat(v).take(channels))
        .collect();
    let mut shape = map.shape().to_vec();
    shape.push(channels);
    Tensor::new(shape, data).expect("shape built from data")
}

/// `c̃^f = c^f·(1−m^d) + z_rec·m^d` and `c = concat(c̃^f, m^d)` in-graph.
/// Returns `(c̃^f, c)`.
pub fn blend_condition<'g, T: Real>(
    features: Var<'g, T>,
    z_rec: Var<'g, T>,
    background: &Tensor<T>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let fs = features.shape();
    if fs.len() != 3 || z_rec.shape() != fs || background.shape() != &fs[..2] {
        return Err(Error::Dimension(format!(
            "condition parts disagree: c^f {fs:?}, z_rec {:?}, m^d {:?}",
            z_rec.shape(),
            background.shape()
        )));
    }
    let ch = fs[2];
    let bg = expand_channels(background, ch);
    let fg = bg.map(|v| T::one() - v);
    let blended = features.mask(&fg)?.add(z_rec.mask(&bg)?)?;
    let md = features.graph().constant(expand_channels(background, 1));
    let condition = Var::concat(&[blended, md], 2)?;
    Ok((blended, condition))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<T> {
    pub features: Tensor<T>,
    pub z_rec: Tensor<T>,
    pub blended: Tensor<T>,
    /// `m^d` as `[h, w, 1]`.
    pub background: Tensor<T>,
    /// `[h, w, D + 1]`.
    pub condition: Tensor<T>,
}

/// Exact per-cell blend on plain tensors.
pub fn build_condition<T: Real>(
    features: &Tensor<T>,
    z_rec: &Tensor<T>,
    background: &Tensor<T>,
) -> Result<ConditionBundle<T>> {
    let fs = features.shape();
    if fs.len() != 3 || z_rec.shape() != fs || background.shape() != &fs[..2] {
        return Err(Error::Dimension(format!(
            "condition parts disagree: c^f {fs:?}, z_rec {:?}, m^d {:?}",
            z_rec.shape(),
            background.shape()
        )));
    }
    let ch = fs[2];
    let blended = Tensor::from_fn(fs.to_vec(), |i| {
        if background.data()[i / ch] > T::lit(0.5) {
            z_rec.data()[i]
        } else {
            features.data()[i]
        }
    });
    let condition = Tensor::from_fn([fs[0], fs[1], ch + 1], |i| {
        let (cell, c) = (i / (ch + 1), i % (ch + 1));
        if c == ch {
            background.data()[cell]
        } else {
            blended.data()[cell * ch + c]
        }
    });
    Ok(ConditionBundle {
        features: features.clone(),
        z_rec: z_rec.clone(),
        blended,
        background: expand_channels(background, 1),
        condition,
    })
}

/// Everything about one training or generation input that does not depend
/// on trainable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample<T> {
    pub image: RgbImage,
    pub masks: MaskPair,
    /// Foreground area ratio at source resolution.
    pub ratio: f64,
    pub cropped: CroppedForeground,
    /// `E(I)`.
    pub z0: Tensor<T>,
    /// `E(I ⊙ m̄)`.
    pub features: Tensor<T>,
    /// `E(I^c ⊙ m̄^c)`.
    pub crop_features: Tensor<T>,
    pub assignment: SuperpixelAssignment,
    /// `x^f`, `[S, D]`.
    pub pooled: Tensor<T>,
}

/// Resizes the source to the codec size, then builds every frozen input of
/// the conditioning pass.
pub fn prepare_sample<T: Real>(
    codec: &LatentCodec,
    codec_params: &ParamStore<T>,
    source: &RgbImage,
    source_mask: &Mask,
    slic: &SlicConfig,
    seed: u64,
) -> Result<PreparedSample<T>> {
    source_mask.check_dims(source.height(), source.width())?;
    let count = source_mask.foreground_count();
    if count == 0 {
        return Err(Error::Input("mask has no foreground".into()));
    }
    let ratio = count as f64 / (source.height() * source.width()) as f64;
    let n = codec.config.image_size;
    let image = source.resize(n, n);
    let mut mask = source_mask.resize(n, n);
    if mask.foreground_count() == 0 {
        // a sub-pixel object can vanish under nearest resampling
        let b = source_mask.bbox().expect("nonempty");
        let cy = (b.y0 + b.y1) / 2 * n / source.height();
        let cx = (b.x0 + b.x1) / 2 * n / source.width();
        mask.set(cy, cx, true);
    }
    let cropped = crop_and_pad(&image, &mask, n, n)?;
    let masks = MaskPair::new(&mask, &cropped.mask, codec.config.factor())?;
    let z0 = codec.encode_image(codec_params, &image)?;
    let features = codec.encode_image(codec_params, &image.masked(&mask)?)?;
    let crop_features = codec.encode_image(codec_params, &cropped.image.masked(&cropped.mask)?)?;
    let assignment = slic_superpixels(&crop_features, &masks.crop_foreground_latent, slic, seed)?;
    let pooled = localized_masked_pooling(&crop_features, &assignment)?;
    Ok(PreparedSample {
        image,
        masks,
        ratio,
        cropped,
        z0,
        features,
        crop_features,
        assignment,
        pooled,
    })
}
