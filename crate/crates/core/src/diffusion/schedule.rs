use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear variance schedule over steps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β` spaced linearly from `beta_min` to `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion steps must be >= 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min} and {beta_max}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("every beta must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Input(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`.
    pub fn diffuse<T: Real>(
        &self,
        z0: &Tensor<T>,
        t: usize,
        noise: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        forward_diffuse(z0, noise, self.alpha_bar(t)?)
    }
}

/// Forward process for an explicit `ᾱ`.
pub fn forward_diffuse<T: Real>(
    z0: &Tensor<T>,
    noise: &Tensor<T>,
    alpha_bar: f64,
) -> Result<Tensor<T>> {
    if z0.shape() != noise.shape() {
        return Err(Error::Dimension(format!(
            "latent {:?} and noise {:?} differ",
            z0.shape(),
            noise.shape()
        )));
    }
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// `z0 = (z_t − √(1−ᾱ) ε) / √ᾱ`.
pub fn invert_diffuse<T: Real>(
    zt: &Tensor<T>,
    noise: &Tensor<T>,
    alpha_bar: f64,
) -> Result<Tensor<T>> {
    if zt.shape() != noise.shape() {
        return Err(Error::Dimension(format!(
            "latent {:?} and noise {:?} differ",
            zt.shape(),
            noise.shape()
        )));
    }
    let a = T::lit(1.0 / alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    let data = zt
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&z, &e)| (z - b * e) * a)
        .collect();
    Tensor::new(zt.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn two_steps() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
    }

    #[test]
    fn defaults_strictly_decrease() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 1e-4);
    }

    #[test]
    fn invalid_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 0.05).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.05).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(matches!(s.alpha_bar(0), Err(Error::Input(_))));
        assert!(matches!(s.alpha_bar(11), Err(Error::Input(_))));
    }

    #[test]
    fn boundaries() {
        let z = Tensor::<f64>::from_f64([2], &[1.0, -2.0]).unwrap();
        let e = Tensor::<f64>::from_f64([2], &[0.3, 0.7]).unwrap();
        assert_eq!(forward_diffuse(&z, &e, 1.0).unwrap(), z);
        assert_eq!(forward_diffuse(&z, &e, 0.0).unwrap(), e);
        let one = Tensor::<f64>::full([1], 1.0);
        let zero = Tensor::<f64>::zeros([1]);
        assert_eq!(forward_diffuse(&one, &zero, 0.25).unwrap().item(), 0.5);
    }
}
