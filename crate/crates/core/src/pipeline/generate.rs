use std::path::Path;

use super::dataset::{load_dataset, name_seed};
use super::train::TrainedModel;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_items, EvalItem, MetricReport};
use crate::raster::{Mask, RgbImage};

/// A generated frame with the object mask at model resolution.
pub struct Generated {
    pub image: RgbImage,
    pub mask: Mask,
}

/// Resize, crop/pad, condition, sample and decode.
pub fn generate(
    trained: &TrainedModel,
    image: &RgbImage,
    mask: &Mask,
    seed: u64,
) -> Result<Generated> {
    let sample = trained.prepare(image, mask, seed)?;
    let bundle = trained
        .model
        .condition(&trained.params, &sample, trained.codebook.entries())?;
    let schedule = trained.config.schedule()?;
    let z = trained
        .model
        .sample_latent(&trained.params, &bundle, &schedule, seed)?;
    let out = trained
        .codec
        .decode_image(&trained.codec_params, &trained.codebook, &z)?;
    Ok(Generated {
        image: out,
        mask: sample.masks.foreground,
    })
}

/// One image per sample, seeded from the sample name; optionally saves the
/// generated frames as `<name>.png` under `save_dir`.
pub fn evaluate(
    trained: &TrainedModel,
    data_dir: &Path,
    save_dir: Option<&Path>,
) -> Result<MetricReport> {
    let (_, samples) = load_dataset(data_dir)?;
    if let Some(dir) = save_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let n = trained.config.codec.image_size;
    let mut items = Vec::with_capacity(samples.len());
    for s in samples {
        let generated = generate(
            trained,
            &s.image,
            &s.mask,
            name_seed(trained.config.seed, &s.name),
        )?;
        if let Some(dir) = save_dir {
            generated
                .image
                .save_png(&dir.join(format!("{}.png", s.name)))?;
        }
        items.push(EvalItem {
            reference: s.image.resize(n, n),
            generated: generated.image,
            mask: generated.mask,
            source_mask: s.mask,
            name: s.name,
        });
    }
    evaluate_items(&items)
}
