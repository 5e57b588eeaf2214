//! Foreground reconstruction quality and distribution-distance proxies.

mod proxy;
mod quality;

pub use proxy::{frechet_distance, image_features, mmd_unbiased, FeatureStats, FEATURE_DIM};
pub use quality::{is_small_object, masked_psnr, masked_ssim, PSNR_CAP};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

/// One evaluated pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub small: bool,
}

/// One generated/reference pair with the object mask. `source_mask` is the
/// mask at source resolution, used for the small-object split; `mask` is at
/// the evaluated resolution.
pub struct EvalItem {
    pub name: String,
    pub generated: RgbImage,
    pub reference: RgbImage,
    pub mask: Mask,
    pub source_mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_full: f64,
    /// `None` when the set has no small objects.
    pub psnr_small: Option<f64>,
    pub ssim_full: f64,
    pub ssim_small: Option<f64>,
    /// `None` when there are fewer than two images.
    pub frechet_proxy: Option<f64>,
    pub mmd_proxy: Option<f64>,
    pub n_images: usize,
    pub n_small: usize,
    pub scores: Vec<ImageScore>,
}

const INSUFFICIENT: &str = "insufficient_samples";
const NO_SMALL: &str = "no_small_objects";

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn show(v: Option<f64>, missing: &str) -> String {
    v.map_or_else(|| missing.to_owned(), |v| format!("{v:.6}"))
}

impl MetricReport {
    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "psnr_full={:.6}", self.psnr_full);
        let _ = writeln!(s, "psnr_small={}", show(self.psnr_small, NO_SMALL));
        let _ = writeln!(s, "ssim_full={:.6}", self.ssim_full);
        let _ = writeln!(s, "ssim_small={}", show(self.ssim_small, NO_SMALL));
        let _ = writeln!(
            s,
            "frechet_proxy={}",
            show(self.frechet_proxy, INSUFFICIENT)
        );
        let _ = writeln!(s, "mmd_proxy={}", show(self.mmd_proxy, INSUFFICIENT));
        let _ = writeln!(s, "n_images={}", self.n_images);
        let _ = writeln!(s, "n_small={}", self.n_small);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>14}", "metric", "value");
        for line in self.to_key_values().lines() {
            if let Some((k, v)) = line.split_once('=') {
                let _ = writeln!(s, "{k:<16} {v:>14}");
            }
        }
        s
    }
}

/// Per-image PSNR/SSIM, full and small-object averages, and proxy
/// distances between the generated and reference sets.
pub fn evaluate_items(items: &[EvalItem]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(items.len());
    for item in items {
        scores.push(ImageScore {
            name: item.name.clone(),
            psnr: masked_psnr(&item.generated, &item.reference, &item.mask)?,
            ssim: masked_ssim(&item.generated, &item.reference, &item.mask)?,
            small: is_small_object(&item.source_mask),
        });
    }
    let gen_feats: Vec<Vec<f64>> = items.iter().map(|i| image_features(&i.generated)).collect();
    let ref_feats: Vec<Vec<f64>> = items.iter().map(|i| image_features(&i.reference)).collect();
    let (frechet, mmd) = if items.len() >= 2 {
        let fa = FeatureStats::from_features(&gen_feats)?;
        let fb = FeatureStats::from_features(&ref_feats)?;
        (
            Some(frechet_distance(&fa, &fb)?),
            Some(mmd_unbiased(&gen_feats, &ref_feats, None)?),
        )
    } else {
        (None, None)
    };
    let small = || scores.iter().filter(|s| s.small);
    Ok(MetricReport {
        psnr_full: mean(scores.iter().map(|s| s.psnr)).expect("nonempty"),
        psnr_small: mean(small().map(|s| s.psnr)),
        ssim_full: mean(scores.iter().map(|s| s.ssim)).expect("nonempty"),
        ssim_small: mean(small().map(|s| s.ssim)),
        frechet_proxy: frechet,
        mmd_proxy: mmd,
        n_images: items.len(),
        n_small: small().count(),
        scores,
    })
}

/// Pairs `<name>.png` in `generated` with `<name>.png` and
/// `<name>_mask.png` in `reference`. The reference and mask are resampled
/// to the generated size when they differ.
pub fn evaluate_dirs(generated: &Path, reference: &Path) -> Result<MetricReport> {
    let names = crate::pipeline::dataset::sample_names(reference)?;
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let gen_path = generated.join(format!("{name}.png"));
        if !gen_path.exists() {
            return Err(Error::Input(format!(
                "missing generated image {}",
                gen_path.display()
            )));
        }
        let gen = RgbImage::load_png(&gen_path)?;
        let reference_img = RgbImage::load_png(&reference.join(format!("{name}.png")))?;
        let source_mask = Mask::load_png(&reference.join(format!("{name}_mask.png")))?;
        let (h, w) = (gen.height(), gen.width());
        items.push(EvalItem {
            name,
            reference: reference_img.resize(h, w),
            mask: source_mask.resize(h, w),
            source_mask,
            generated: gen,
        });
    }
    evaluate_items(&items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn item(name: &str, seed: u64, fg: usize) -> EvalItem {
        let mut rng = Rng::new(seed);
        let img = RgbImage::new(16, 16, (0..768).map(|_| rng.uniform() as f32).collect()).unwrap();
        let gen = RgbImage::new(
            16,
            16,
            img.data().iter().map(|v| (v * 0.9) + 0.05).collect(),
        )
        .unwrap();
        let mut mask = Mask::empty(16, 16);
        for p in 0..fg {
            mask.set(p / 16, p % 16, true);
        }
        EvalItem {
            name: name.into(),
            generated: gen,
            reference: img,
            source_mask: mask.clone(),
            mask,
        }
    }

    #[test]
    fn identical_sets() {
        let items: Vec<EvalItem> = (0..3)
            .map(|i| {
                let mut it = item(&format!("s{i}"), i, 40);
                it.generated = it.reference.clone();
                it
            })
            .collect();
        let r = evaluate_items(&items).unwrap();
        assert_eq!(r.psnr_full, PSNR_CAP);
        assert!((r.ssim_full - 1.0).abs() < 1e-12);
        assert!(r.frechet_proxy.unwrap().abs() < 1e-6);
        assert!(r.mmd_proxy.unwrap().abs() < 1e-6);
    }

    #[test]
    fn single_image_skips_proxies() {
        let r = evaluate_items(&[item("a", 1, 40)]).unwrap();
        assert_eq!(r.n_images, 1);
        assert!(r.frechet_proxy.is_none());
        assert!(r.to_key_values().contains("mmd_proxy=insufficient_samples"));
    }

    #[test]
    fn averages_and_small_split() {
        let items = vec![item("a", 1, 3), item("b", 2, 100), item("c", 3, 2)];
        let r = evaluate_items(&items).unwrap();
        assert_eq!(r.n_small, 2);
        let want: f64 = r.scores.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
        assert!((r.psnr_full - want).abs() < 1e-12);
        let small: f64 = (r.scores[0].psnr + r.scores[2].psnr) / 2.0;
        assert!((r.psnr_small.unwrap() - small).abs() < 1e-12);
        for key in [
            "psnr_full",
            "psnr_small",
            "ssim_full",
            "ssim_small",
            "frechet_proxy",
            "mmd_proxy",
        ] {
            assert!(r.to_key_values().contains(&format!("{key}=")));
        }
    }
}
