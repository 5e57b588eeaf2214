use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Grid cells per side for the proxy features.
const GRID: usize = 4;
pub const FEATURE_DIM: usize = GRID * GRID * 3;

/// 48 hand-crafted statistics: for each cell of a 4×4 grid, the mean,
/// variance and mean squared forward-difference gradient, each averaged
/// over the RGB channels.
pub fn image_features(image: &RgbImage) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let px = |y: usize, x: usize, c: usize| f64::from(image.data()[(y * w + x) * 3 + c]);
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for gy in 0..GRID {
        let (y0, y1) = (
            gy * h / GRID,
            ((gy + 1) * h / GRID).max(gy * h / GRID + 1).min(h),
        );
        for gx in 0..GRID {
            let (x0, x1) = (
                gx * w / GRID,
                ((gx + 1) * w / GRID).max(gx * w / GRID + 1).min(w),
            );
            let (mut mean, mut var, mut edge) = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let m = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                    .map(|(y, x)| px(y, x, c))
                    .sum::<f64>()
                    / n;
                let v = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                    .map(|(y, x)| (px(y, x, c) - m).powi(2))
                    .sum::<f64>()
                    / n;
                let e = (y0..y1)
                    .flat_map(|y| (x0..x1).map(move |x| (y, x)))
                    .map(|(y, x)| {
                        let dx = if x + 1 < w {
                            px(y, x + 1, c) - px(y, x, c)
                        } else {
                            0.0
                        };
                        let dy = if y + 1 < h {
                            px(y + 1, x, c) - px(y, x, c)
                        } else {
                            0.0
                        };
                        dx * dx + dy * dy
                    })
                    .sum::<f64>()
                    / n;
                mean += m / 3.0;
                var += v / 3.0;
                edge += e / 3.0;
            }
            out.extend([mean, var, edge]);
        }
    }
    out
}

/// Mean vector and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Sample covariance with the `n − 1` denominator (zero for one sample).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::Input("no feature vectors".into()))?;
        let d = first.len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Input("feature vectors differ in length".into()));
        }
        let n = features.len();
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        Ok(FeatureStats {
            mean,
            cov,
            count: n,
        })
    }

    pub fn from_moments(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Input(format!(
                "{d}-dim mean with {} covariance entries",
                cov.len()
            )));
        }
        Ok(FeatureStats {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(d, d, &cov),
            count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clamped to 0.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`, clamped at 0.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "feature dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let root_a = psd_sqrt(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn cubic_kernel(x: &[f64], y: &[f64], scale: f64) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / scale + 1.0).powi(3)
}

/// Unbiased MMD² with the kernel `(xᵀy/scale + 1)³`; `scale` defaults to the
/// feature dimension. Equal-size sets use the paired U-statistic over
/// `i ≠ j`, so identical lists give exactly 0; unequal sizes use the
/// two-sample form with every cross pair.
pub fn mmd_unbiased(a: &[Vec<f64>], b: &[Vec<f64>], scale: Option<f64>) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Input(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Input("feature vectors differ in length".into()));
    }
    let scale = scale.unwrap_or(d as f64);
    if !(scale > 0.0) {
        return Err(Error::Config(format!(
            "MMD kernel scale must be > 0, got {scale}"
        )));
    }
    let k = |x: &Vec<f64>, y: &Vec<f64>| cubic_kernel(x, y, scale);
    let within = |s: &[Vec<f64>]| {
        let n = s.len();
        let mut t = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (n * (n - 1)) as f64
    };
    let (m, n) = (a.len(), b.len());
    let cross = if m == n {
        let mut t = 0.0;
        for i in 0..m {
            for j in 0..n {
                if i != j {
                    t += k(&a[i], &b[j]);
                }
            }
        }
        t / (m * (m - 1)) as f64
    } else {
        let mut t = 0.0;
        for x in a {
            for y in b {
                t += k(x, y);
            }
        }
        t / (m * n) as f64
    };
    Ok(within(a) + within(b) - 2.0 * cross)
}
