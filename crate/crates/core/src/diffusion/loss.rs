use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Family of foreground weights `w(r)` for foreground area ratio `r`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WeightingFn {
    /// `1 / (α + r)`.
    Paper,
    /// Straight line from `1/α` at `r = 0` to `1` at `r = 1`.
    Linear,
    /// `1 − 2·log10(r)`.
    Log,
    /// `1 / r`.
    Reciprocal,
    /// `w ≡ 1`.
    Uniform,
}

impl WeightingFn {
    pub const ALL: [WeightingFn; 5] = [
        WeightingFn::Paper,
        WeightingFn::Linear,
        WeightingFn::Log,
        WeightingFn::Reciprocal,
        WeightingFn::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightingFn::Paper => "paper",
            WeightingFn::Linear => "linear",
            WeightingFn::Log => "log",
            WeightingFn::Reciprocal => "reciprocal",
            WeightingFn::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WeightingFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightingFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightingFn::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown weighting function {s:?}; expected paper, linear, log, reciprocal or uniform"
                ))
            })
    }
}

/// Which mask multiplies which loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskPolarity {
    /// Weighted denoising term on the object (`1 − m^d`), unweighted term and
    /// background reconstruction on the editable region (`m^d`).
    Intent,
    /// The masks swapped: weighted term and unweighted term trade places,
    /// and background reconstruction is supervised on the object.
    Printed,
}

impl FromStr for MaskPolarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intent" => Ok(MaskPolarity::Intent),
            "printed" => Ok(MaskPolarity::Printed),
            _ => Err(Error::Config(format!(
                "unknown mask polarity {s:?}; expected intent or printed"
            ))),
        }
    }
}

impl fmt::Display for MaskPolarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPolarity::Intent => "intent",
            MaskPolarity::Printed => "printed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub weighting: WeightingFn,
    pub polarity: MaskPolarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.125,
            lambda: 1.0,
            weighting: WeightingFn::Paper,
            polarity: MaskPolarity::Intent,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "loss.alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn weight(&self, ratio: f64) -> Result<f64> {
        foreground_weight(ratio, self.alpha, self.weighting)
    }
}

/// `w(r)` for `0 < r ≤ 1`.
pub fn foreground_weight(ratio: f64, alpha: f64, weighting: WeightingFn) -> Result<f64> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Input(format!(
            "foreground ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let needs_alpha = matches!(weighting, WeightingFn::Paper | WeightingFn::Linear);
    if needs_alpha && alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    Ok(match weighting {
        WeightingFn::Paper => 1.0 / (alpha + ratio),
        WeightingFn::Linear => 1.0 / alpha - (1.0 / alpha - 1.0) * ratio,
        WeightingFn::Log => 1.0 - 2.0 * ratio.log10(),
        WeightingFn::Reciprocal => 1.0 / ratio,
        WeightingFn::Uniform => 1.0,
    })
}

/// Per-term loss values of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub fadl_fg: f64,
    pub fadl_bg: f64,
    pub fadl_total: f64,
    pub bgrec: f64,
    pub total: f64,
    /// Mean foreground weight over the batch.
    pub w: f64,
    pub timesteps: Vec<usize>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.fadl_fg,
            self.fadl_bg,
            self.fadl_total,
            self.bgrec,
            self.total,
            self.w,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Graph handles of the loss terms.
pub struct LossVars<'g, T: Real> {
    pub fadl_fg: Var<'g, T>,
    pub fadl_bg: Var<'g, T>,
    pub fadl_total: Var<'g, T>,
    pub bgrec: Var<'g, T>,
    pub total: Var<'g, T>,
}

impl<'g, T: Real> LossVars<'g, T> {
    pub fn breakdown(&self, w: f64, timesteps: Vec<usize>) -> LossBreakdown {
        let v = |x: &Var<'g, T>| x.value().item().as_f64();
        LossBreakdown {
            fadl_fg: v(&self.fadl_fg),
            fadl_bg: v(&self.fadl_bg),
            fadl_total: v(&self.fadl_total),
            bgrec: v(&self.bgrec),
            total: v(&self.total),
            w,
            timesteps,
        }
    }
}

fn check_binary<T: Real>(mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::Input("loss mask must be binary".into()));
    }
    Ok(())
}

/// Expands per-sample weights `[B]` over a `[B, ...]` mask.
fn weighted<T: Real>(mask: &Tensor<T>, weights: &[f64]) -> Tensor<T> {
    let per = mask.numel() / weights.len();
    Tensor::from_fn(mask.shape().to_vec(), |i| {
        mask.data()[i] * T::lit(weights[i / per])
    })
}

/// Foreground-aware denoising terms on a batch. `background` is `m^d`
/// expanded to the residual shape `[B, ...]`; `weights` holds one `w` per
/// batch entry. Returns `(fg, bg)`.
pub fn fadl_terms<'g, T: Real>(
    noise: Var<'g, T>,
    predicted: Var<'g, T>,
    background: &Tensor<T>,
    weights: &[f64],
    polarity: MaskPolarity,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let s = noise.shape();
    if predicted.shape() != s || background.shape() != s.as_slice() {
        return Err(Error::Dimension(format!(
            "loss inputs disagree: noise {s:?}, prediction {:?}, mask {:?}",
            predicted.shape(),
            background.shape()
        )));
    }
    if weights.is_empty() || s[0] != weights.len() {
        return Err(Error::Dimension(format!(
            "{} weights for a batch of {}",
            weights.len(),
            s[0]
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Input("foreground weights must be >= 0".into()));
    }
    check_binary(background)?;
    let foreground = background.map(|v| T::one() - v);
    let (weighted_region, plain_region) = match polarity {
        MaskPolarity::Intent => (foreground, background.clone()),
        MaskPolarity::Printed => (background.clone(), foreground),
    };
    let residual = noise.sub(predicted)?;
    let fg = residual
        .mask(&weighted(&weighted_region, weights))?
        .square()
        .mean();
    let bg = residual.mask(&plain_region)?.square().mean();
    Ok((fg, bg))
}

/// Background reconstruction of `z_rec` against `z0`, masked by `m^d`
/// (or by `1 − m^d` under the printed polarity).
pub fn bgrec_term<'g, T: Real>(
    z_rec: Var<'g, T>,
    z0: Var<'g, T>,
    background: &Tensor<T>,
    polarity: MaskPolarity,
) -> Result<Var<'g, T>> {
    let s = z_rec.shape();
    if z0.shape() != s || background.shape() != s.as_slice() {
        return Err(Error::Dimension(format!(
            "background reconstruction inputs disagree: z_rec {s:?}, z0 {:?}, mask {:?}",
            z0.shape(),
            background.shape()
        )));
    }
    check_binary(background)?;
    let region = match polarity {
        MaskPolarity::Intent => background.clone(),
        MaskPolarity::Printed => background.map(|v| T::one() - v),
    };
    Ok(z_rec.sub(z0)?.mask(&region)?.square().mean())
}

/// `λ·(fg + bg) + bgrec`.
pub fn combine<'g, T: Real>(
    fg: Var<'g, T>,
    bg: Var<'g, T>,
    bgrec: Var<'g, T>,
    lambda: f64,
) -> Result<LossVars<'g, T>> {
    let fadl_total = fg.add(bg)?;
    let total = fadl_total.scale(lambda).add(bgrec)?;
    Ok(LossVars {
        fadl_fg: fg,
        fadl_bg: bg,
        fadl_total,
        bgrec,
        total,
    })
}

/// `λ·fadl + bgrec` on plain numbers.
pub fn total_loss(fadl_total: f64, bgrec: f64, lambda: f64) -> f64 {
    lambda * fadl_total + bgrec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Rng};

    #[test]
    fn paper_weights() {
        assert_eq!(
            foreground_weight(0.875, 0.125, WeightingFn::Paper).unwrap(),
            1.0
        );
        assert_eq!(
            foreground_weight(0.125, 0.125, WeightingFn::Paper).unwrap(),
            4.0
        );
        let tiny = foreground_weight(1e-12, 0.125, WeightingFn::Paper).unwrap();
        assert!(tiny < 8.0 && tiny > 7.999_999);
        assert!(matches!(
            foreground_weight(0.0, 0.125, WeightingFn::Paper),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn other_weightings() {
        assert_eq!(
            foreground_weight(1.0, 0.125, WeightingFn::Linear).unwrap(),
            1.0
        );
        assert_eq!(
            foreground_weight(1.0, 0.125, WeightingFn::Log).unwrap(),
            1.0
        );
        assert_eq!(
            foreground_weight(0.01, 0.125, WeightingFn::Log).unwrap(),
            5.0
        );
        assert_eq!(
            foreground_weight(0.25, 0.125, WeightingFn::Reciprocal).unwrap(),
            4.0
        );
        assert_eq!(
            foreground_weight(0.3, 0.125, WeightingFn::Uniform).unwrap(),
            1.0
        );
        for w in WeightingFn::ALL {
            assert_eq!(w.name().parse::<WeightingFn>().unwrap(), w);
        }
        assert!(matches!(
            "square".parse::<WeightingFn>(),
            Err(Error::Config(_))
        ));
    }

    fn residual_pair(g: &Graph<f64>, seed: u64) -> (Var<'_, f64>, Var<'_, f64>) {
        let mut rng = Rng::new(seed);
        (
            g.constant(rng.normal_tensor(&[2, 4, 4, 3])),
            g.constant(rng.normal_tensor(&[2, 4, 4, 3])),
        )
    }

    #[test]
    fn zero_residual_is_zero() {
        let g = Graph::new();
        let (e, _) = residual_pair(&g, 1);
        let m = Tensor::from_fn([2, 4, 4, 3], |i| ((i / 3) % 2) as f64);
        let (fg, bg) = fadl_terms(e, e, &m, &[3.0, 2.0], MaskPolarity::Intent).unwrap();
        assert_eq!(fg.value().item(), 0.0);
        assert_eq!(bg.value().item(), 0.0);
    }

    #[test]
    fn unit_weight_partitions_mse() {
        let g = Graph::new();
        let (e, p) = residual_pair(&g, 2);
        let m = Tensor::from_fn([2, 4, 4, 3], |i| ((i / 3) % 3 == 0) as u8 as f64);
        let (fg, bg) = fadl_terms(e, p, &m, &[1.0, 1.0], MaskPolarity::Intent).unwrap();
        let mse = e.sub(p).unwrap().square().mean().value().item();
        assert!((fg.value().item() + bg.value().item() - mse).abs() < 1e-12);
    }

    #[test]
    fn all_background_has_no_foreground_term() {
        let g = Graph::new();
        let (e, p) = residual_pair(&g, 3);
        let m = Tensor::full([2, 4, 4, 3], 1.0);
        let (fg, _) = fadl_terms(e, p, &m, &[8.0, 8.0], MaskPolarity::Intent).unwrap();
        assert_eq!(fg.value().item(), 0.0);
    }

    #[test]
    fn non_binary_mask_is_an_input_error() {
        let g = Graph::new();
        let (e, p) = residual_pair(&g, 4);
        let m = Tensor::full([2, 4, 4, 3], 0.5);
        assert!(matches!(
            fadl_terms(e, p, &m, &[1.0, 1.0], MaskPolarity::Intent),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bgrec_cases() {
        let g = Graph::<f64>::new();
        let z = g.constant(Rng::new(5).normal_tensor(&[4]));
        let bg = Tensor::from_f64([4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            bgrec_term(z, z, &bg, MaskPolarity::Intent)
                .unwrap()
                .value()
                .item(),
            0.0
        );
        let zr = g.constant(Tensor::from_f64([4], &[2.0, 5.0, 5.0, 5.0]).unwrap());
        let z0 = g.constant(Tensor::zeros([4]));
        assert_eq!(
            bgrec_term(zr, z0, &bg, MaskPolarity::Intent)
                .unwrap()
                .value()
                .item(),
            1.0
        );
        let all_fg = Tensor::zeros([4]);
        assert_eq!(
            bgrec_term(zr, z0, &all_fg, MaskPolarity::Intent)
                .unwrap()
                .value()
                .item(),
            0.0
        );
    }

    #[test]
    fn combination() {
        assert_eq!(total_loss(0.7, 0.3, 0.0), 0.3);
        assert_eq!(total_loss(0.7, 0.0, 1.0), 0.7);
        assert_eq!(total_loss(0.5, 0.25, 2.0), 1.25);
    }

    #[test]
    fn printed_polarity_swaps_regions() {
        let g = Graph::new();
        let (e, p) = residual_pair(&g, 6);
        let m = Tensor::from_fn([2, 4, 4, 3], |i| ((i / 3) % 2) as f64);
        let inv = m.map(|v| 1.0 - v);
        let (a_fg, a_bg) = fadl_terms(e, p, &m, &[2.0, 3.0], MaskPolarity::Printed).unwrap();
        let (b_fg, b_bg) = fadl_terms(e, p, &inv, &[2.0, 3.0], MaskPolarity::Intent).unwrap();
        assert_eq!(a_fg.value().item(), b_fg.value().item());
        assert_eq!(a_bg.value().item(), b_bg.value().item());
    }
}
