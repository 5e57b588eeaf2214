use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};
use crate::tensor::Rng;

pub const MANIFEST_FILE: &str = "manifest.csv";
const MASK_SUFFIX: &str = "_mask";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    pub height: usize,
    pub width: usize,
}

impl DatasetManifest {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {}x{}\nname,image,mask,split\n", self.height, self.width);
        for e in &self.entries {
            let file = |p: &Path| {
                p.file_name()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_default()
            };
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.name,
                file(&e.image),
                file(&e.mask),
                e.split
            );
        }
        s
    }
}

/// One loaded pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Object area bounds as fractions of the frame; sampled log-uniformly.
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 32,
            height: 64,
            width: 64,
            area_min: 1.0 / 256.0,
            area_max: 0.25,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synthetic dataset needs n >= 1".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(
                "synthetic frames must be at least 8x8".into(),
            ));
        }
        if !(self.area_min > 0.0 && self.area_min <= self.area_max && self.area_max <= 1.0) {
            return Err(Error::Config(format!(
                "object area range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.area_min, self.area_max
            )));
        }
        Ok(())
    }
}

/// Smoothly interpolated lattice noise with a random offset.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut Rng, cell: f64, span: f64) -> Self {
        let cols = (span / cell).ceil() as usize + 3;
        let lattice = (0..cols * cols).map(|_| rng.uniform()).collect();
        ValueNoise {
            cell,
            cols,
            lattice,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let fy = (y / self.cell).clamp(0.0, (self.cols - 2) as f64);
        let fx = (x / self.cell).clamp(0.0, (self.cols - 2) as f64);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
        let v = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - tx) + v(iy, ix + 1) * tx;
        let bottom = v(iy + 1, ix) * (1.0 - tx) + v(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Two octaves, normalized to `[0, 1]`.
struct Texture {
    coarse: ValueNoise,
    fine: ValueNoise,
    low: [f64; 3],
    high: [f64; 3],
}

impl Texture {
    fn color(&self, y: f64, x: f64) -> [f32; 3] {
        let n = 0.65 * self.coarse.at(y, x) + 0.35 * self.fine.at(y, x);
        let mut out = [0f32; 3];
        for c in 0..3 {
            out[c] = (self.low[c] + (self.high[c] - self.low[c]) * n).clamp(0.0, 1.0) as f32;
        }
        out
    }
}

enum Shape {
    Ellipse {
        ry: f64,
        rx: f64,
        angle: f64,
    },
    Polygon(Vec<(f64, f64)>),
    Blob {
        radius: f64,
        harmonics: [(f64, f64, f64); 2],
    },
}

impl Shape {
    /// Unit-scale shape.
    fn random(rng: &mut Rng) -> Shape {
        match rng.below(3) {
            0 => {
                let aspect = rng.uniform_range(0.5, 2.0);
                Shape::Ellipse {
                    ry: aspect.sqrt(),
                    rx: 1.0 / aspect.sqrt(),
                    angle: rng.uniform_range(0.0, std::f64::consts::PI),
                }
            }
            1 => {
                let k = 5 + rng.below(4);
                let base = rng.uniform_range(0.0, std::f64::consts::TAU);
                let verts = (0..k)
                    .map(|i| {
                        let a = base
                            + std::f64::consts::TAU * (i as f64 + rng.uniform_range(-0.25, 0.25))
                                / k as f64;
                        let r = rng.uniform_range(0.7, 1.3);
                        (r * a.sin(), r * a.cos())
                    })
                    .collect();
                Shape::Polygon(verts)
            }
            _ => Shape::Blob {
                radius: 1.0,
                harmonics: [
                    (
                        rng.uniform_range(0.05, 0.25),
                        2.0,
                        rng.uniform_range(0.0, std::f64::consts::TAU),
                    ),
                    (
                        rng.uniform_range(0.05, 0.2),
                        3.0,
                        rng.uniform_range(0.0, std::f64::consts::TAU),
                    ),
                ],
            },
        }
    }

    fn area(&self) -> f64 {
        match self {
            Shape::Ellipse { ry, rx, .. } => std::f64::consts::PI * ry * rx,
            Shape::Polygon(v) => {
                let n = v.len();
                (0..n)
                    .map(|i| {
                        let (y0, x0) = v[i];
                        let (y1, x1) = v[(i + 1) % n];
                        x0 * y1 - x1 * y0
                    })
                    .sum::<f64>()
                    .abs()
                    / 2.0
            }
            Shape::Blob { .. } => {
                let steps = 720;
                (0..steps)
                    .map(|i| {
                        let r = self.blob_radius(std::f64::consts::TAU * i as f64 / steps as f64);
                        r * r
                    })
                    .sum::<f64>()
                    * std::f64::consts::TAU
                    / steps as f64
                    / 2.0
            }
        }
    }

    fn blob_radius(&self, theta: f64) -> f64 {
        match self {
            Shape::Blob { radius, harmonics } => {
                radius
                    * (1.0
                        + harmonics
                            .iter()
                            .map(|(a, k, p)| a * (k * theta + p).sin())
                            .sum::<f64>())
            }
            _ => unreachable!("blob radius of a non-blob"),
        }
    }

    /// Largest distance from the origin at unit scale.
    fn extent(&self) -> f64 {
        match self {
            Shape::Ellipse { ry, rx, .. } => ry.max(*rx),
            Shape::Polygon(v) => v.iter().map(|(y, x)| y.hypot(*x)).fold(0.0, f64::max),
            Shape::Blob { radius, harmonics } => {
                radius * (1.0 + harmonics.iter().map(|h| h.0).sum::<f64>())
            }
        }
    }

    /// Point-in-shape for a point relative to the centre, at unit scale.
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (u, v) = (c * x + s * y, -s * x + c * y);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(v) => {
                let mut inside = false;
                let n = v.len();
                for i in 0..n {
                    let (yi, xi) = v[i];
                    let (yj, xj) = v[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Blob { .. } => y.hypot(x) <= self.blob_radius(y.atan2(x)),
        }
    }
}

fn random_palette(rng: &mut Rng) -> ([f64; 3], [f64; 3]) {
    let mut low = [0.0; 3];
    let mut high = [0.0; 3];
    for c in 0..3 {
        low[c] = rng.uniform_range(0.1, 0.7);
        high[c] = (low[c] + rng.uniform_range(0.1, 0.35)).min(0.95);
    }
    (low, high)
}

/// One synthetic image and its exact object mask.
pub fn synth_sample(config: &SynthConfig, rng: &mut Rng) -> (RgbImage, Mask) {
    let (h, w) = (config.height, config.width);
    let span = h.max(w) as f64 + 16.0;
    let (low, high) = random_palette(rng);
    let background = Texture {
        coarse: ValueNoise::new(rng, 16.0, span),
        fine: ValueNoise::new(rng, 8.0, span),
        low,
        high,
    };
    // same lattice sampled at a shifted position with a nudged palette
    let (dy, dx) = (rng.uniform_range(3.0, 8.0), rng.uniform_range(3.0, 8.0));
    let mut obj_low = low;
    let mut obj_high = high;
    for c in 0..3 {
        let shift = rng.uniform_range(-0.12, 0.12);
        obj_low[c] = (obj_low[c] + shift).clamp(0.0, 1.0);
        obj_high[c] = (obj_high[c] + shift).clamp(0.0, 1.0);
    }

    let shape = Shape::random(rng);
    let frac = (config.area_min.ln()
        + rng.uniform() * (config.area_max.ln() - config.area_min.ln()))
    .exp();
    let scale = (frac * (h * w) as f64 / shape.area()).sqrt();
    let reach = shape.extent() * scale;
    let centre = |len: usize, rng: &mut Rng| {
        let lo = reach.min(len as f64 / 2.0);
        let hi = (len as f64 - reach).max(len as f64 / 2.0);
        rng.uniform_range(lo, hi)
    };
    let cy = centre(h, rng);
    let cx = centre(w, rng);

    let mut image = RgbImage::black(h, w);
    let mut mask = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let inside = shape.contains((py - cy) / scale, (px - cx) / scale);
            mask.set(y, x, inside);
        }
    }
    if mask.foreground_count() == 0 {
        let y = (cy.floor() as usize).min(h - 1);
        let x = (cx.floor() as usize).min(w - 1);
        mask.set(y, x, true);
    }
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let rgb = if mask.get(y, x) {
                let n = 0.65 * background.coarse.at(py + dy, px + dx)
                    + 0.35 * background.fine.at(py + dy, px + dx);
                let mut out = [0f32; 3];
                for c in 0..3 {
                    out[c] = (obj_low[c] + (obj_high[c] - obj_low[c]) * n).clamp(0.0, 1.0) as f32;
                }
                out
            } else {
                background.color(py, px)
            };
            image.set_pixel(y, x, rgb);
        }
    }
    (image, mask)
}

pub fn sample_name(index: usize) -> String {
    format!("sample_{index:04}")
}

/// Writes `count` PNG pairs plus a manifest; deterministic per seed.
pub fn synthesize(dir: &Path, config: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let root = Rng::new(seed).split("synth");
    let mut entries = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let mut rng = root.split_index(i as u64);
        let (image, mask) = synth_sample(config, &mut rng);
        let name = sample_name(i);
        let image_path = dir.join(format!("{name}.png"));
        let mask_path = dir.join(format!("{name}{MASK_SUFFIX}.png"));
        image.save_png(&image_path)?;
        mask.save_png(&mask_path)?;
        entries.push(DatasetEntry {
            name,
            image: image_path,
            mask: mask_path,
            split: "train".into(),
        });
    }
    let manifest = DatasetManifest {
        entries,
        height: config.height,
        width: config.width,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Sorted sample names of `<name>.png` / `<name>_mask.png` pairs. Orphans on
/// either side are errors.
pub fn sample_names(dir: &Path) -> Result<Vec<String>> {
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_owned();
        match stem.strip_suffix(MASK_SUFFIX) {
            Some(base) => masks.push(base.to_owned()),
            None => images.push(stem),
        }
    }
    images.sort();
    masks.sort();
    if images.is_empty() && masks.is_empty() {
        return Err(Error::Input(format!("{}: no samples", dir.display())));
    }
    if let Some(name) = images.iter().find(|n| masks.binary_search(n).is_err()) {
        return Err(Error::Input(format!(
            "{}: image has no mask {name}{MASK_SUFFIX}.png",
            dir.join(format!("{name}.png")).display()
        )));
    }
    if let Some(name) = masks.iter().find(|n| images.binary_search(n).is_err()) {
        return Err(Error::Input(format!(
            "{}: mask has no image {name}.png",
            dir.join(format!("{name}{MASK_SUFFIX}.png")).display()
        )));
    }
    Ok(images)
}

/// Loads and validates every pair in `dir`.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let names = sample_names(dir)?;
    let mut samples = Vec::with_capacity(names.len());
    let mut entries = Vec::with_capacity(names.len());
    let mut dims: Option<(usize, usize)> = None;
    for name in names {
        let image_path = dir.join(format!("{name}.png"));
        let mask_path = dir.join(format!("{name}{MASK_SUFFIX}.png"));
        let image = RgbImage::load_png(&image_path)?;
        let mask = Mask::load_png(&mask_path)?;
        if (mask.height(), mask.width()) != (image.height(), image.width()) {
            return Err(Error::Input(format!(
                "{}: mask is {}x{}, image is {}x{}",
                mask_path.display(),
                mask.height(),
                mask.width(),
                image.height(),
                image.width()
            )));
        }
        if mask.foreground_count() == 0 {
            return Err(Error::Input(format!(
                "{}: mask has no foreground",
                mask_path.display()
            )));
        }
        dims.get_or_insert((image.height(), image.width()));
        entries.push(DatasetEntry {
            name: name.clone(),
            image: image_path,
            mask: mask_path,
            split: "train".into(),
        });
        samples.push(Sample { name, image, mask });
    }
    let (height, width) = dims.expect("at least one sample");
    Ok((
        DatasetManifest {
            entries,
            height,
            width,
        },
        samples,
    ))
}

/// Stable per-sample seed derived from the file name.
pub fn name_seed(seed: u64, name: &str) -> u64 {
    Rng::new(seed).split("sample").split(name).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::is_small_object;

    fn cfg(count: usize) -> SynthConfig {
        SynthConfig {
            count,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthesis_is_byte_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synthesize(a.path(), &cfg(4), 11).unwrap();
        synthesize(b.path(), &cfg(4), 11).unwrap();
        for i in 0..4 {
            for suffix in ["", MASK_SUFFIX] {
                let f = format!("{}{suffix}.png", sample_name(i));
                assert_eq!(
                    std::fs::read(a.path().join(&f)).unwrap(),
                    std::fs::read(b.path().join(&f)).unwrap()
                );
            }
        }
    }

    #[test]
    fn small_objects_are_populated() {
        let config = cfg(64);
        let root = Rng::new(5).split("synth");
        let mut small = 0;
        for i in 0..64 {
            let (_, mask) = synth_sample(&config, &mut root.split_index(i));
            assert!(mask.foreground_count() >= 1);
            small += usize::from(is_small_object(&mask));
        }
        assert!(small * 5 >= 64, "{small} of 64 small");
    }

    #[test]
    fn area_follows_target_range() {
        let config = SynthConfig {
            area_min: 0.05,
            area_max: 0.05,
            ..cfg(1)
        };
        let root = Rng::new(9);
        for i in 0..20 {
            let (_, mask) = synth_sample(&config, &mut root.split_index(i));
            let r = mask.foreground_ratio();
            assert!((r - 0.05).abs() < 0.02, "ratio {r}");
        }
    }

    #[test]
    fn load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(sample_names(dir.path())
            .unwrap_err()
            .to_string()
            .contains("no samples"));
        synthesize(dir.path(), &cfg(3), 2).unwrap();
        let (manifest, samples) = load_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!((manifest.height, manifest.width), (64, 64));
        std::fs::remove_file(dir.path().join("sample_0001_mask.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("sample_0001.png"), "{err}");
    }

    #[test]
    fn gray_mask_binarizes_to_foreground() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::black(4, 4)
            .save_png(&dir.path().join("a.png"))
            .unwrap();
        image::GrayImage::from_raw(4, 4, vec![128; 16])
            .unwrap()
            .save(dir.path().join("a_mask.png"))
            .unwrap();
        let (_, samples) = load_dataset(dir.path()).unwrap();
        assert_eq!(samples[0].mask.foreground_count(), 16);
    }

    #[test]
    fn mismatched_dims_name_the_mask() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::black(4, 4)
            .save_png(&dir.path().join("a.png"))
            .unwrap();
        Mask::full(5, 4)
            .save_png(&dir.path().join("a_mask.png"))
            .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(err.to_string().contains("a_mask.png"));
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(2, 2, vec![0u16; 12])
            .unwrap()
            .save(dir.path().join("a.png"))
            .unwrap();
        Mask::full(2, 2)
            .save_png(&dir.path().join("a_mask.png"))
            .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("8-bit"), "{err}");
    }
}
