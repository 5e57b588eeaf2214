//! Fixtures shared by the kernel benchmarks.

use camogen_core::codec::{CodecConfig, LatentCodec};
use camogen_core::conditioning::{prepare_sample, FafimConfig, PreparedSample, SlicConfig};
use camogen_core::diffusion::{CamoModel, DenoiserConfig, NoiseSchedule};
use camogen_core::raster::{Mask, RgbImage};
use camogen_core::tensor::{ParamStore, Rng, Tensor};

pub fn random_image(seed: u64, size: usize) -> RgbImage {
    let mut rng = Rng::new(seed);
    RgbImage::new(size, size, (0..size * size * 3).map(|_| rng.uniform() as f32).collect())
        .expect("sized buffer")
}

/// Centred square object covering about a sixteenth of the frame.
pub fn square_mask(size: usize) -> Mask {
    let mut m = Mask::empty(size, size);
    let (lo, hi) = (size * 3 / 8, size * 5 / 8);
    for y in lo..hi {
        for x in lo..hi {
            m.set(y, x, true);
        }
    }
    m
}

/// Default-sized stage-2 setup on random images: 64x64 inputs, 16x16x3
/// latents.
pub struct StageTwo {
    pub model: CamoModel,
    pub params: ParamStore<f32>,
    pub codebook: Tensor<f32>,
    pub samples: Vec<PreparedSample<f32>>,
    pub schedule: NoiseSchedule,
}

pub fn stage_two(batch: usize) -> StageTwo {
    let codec = LatentCodec::new(CodecConfig::default()).expect("default codec");
    let (codec_params, book) = codec.init::<f32>(&Rng::new(1));
    let samples = (0..batch)
        .map(|i| {
            prepare_sample(
                &codec,
                &codec_params,
                &random_image(i as u64, 64),
                &square_mask(64),
                &SlicConfig::default(),
                i as u64,
            )
            .expect("valid sample")
        })
        .collect();
    let model = CamoModel::new(
        FafimConfig::default(),
        DenoiserConfig {
            in_channels: 7,
            out_channels: 3,
            base_width: 32,
            time_features: 32,
        },
        16,
        3,
    )
    .expect("default model");
    let params = model.init(&Rng::new(2));
    StageTwo {
        model,
        params,
        codebook: book.entries().clone(),
        samples,
        schedule: NoiseSchedule::linear(200, 1e-4, 0.02).expect("valid schedule"),
    }
}
