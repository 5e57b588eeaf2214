use super::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Rng, Tensor};

/// Anything that predicts the noise in `z_t`.
pub trait Denoise<T: Real> {
    fn predict_noise(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// The U-Net bound to trained weights and one condition `[h, w, D + 1]`.
pub struct ConditionedDenoiser<'a, T> {
    pub denoiser: &'a Denoiser,
    pub params: &'a ParamStore<T>,
    pub condition: &'a Tensor<T>,
}

impl<T: Real> Denoise<T> for ConditionedDenoiser<'_, T> {
    fn predict_noise(&self, z_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let zs = z_t.shape();
        let cs = self.condition.shape();
        if zs.len() != 3 || cs.len() != 3 || zs[..2] != cs[..2] {
            return Err(Error::Dimension(format!(
                "latent {zs:?} and condition {cs:?} disagree"
            )));
        }
        let (h, w) = (zs[0], zs[1]);
        let (a, b) = (zs[2], cs[2]);
        let mut input = Vec::with_capacity(h * w * (a + b));
        for cell in 0..h * w {
            input.extend_from_slice(&z_t.data()[cell * a..(cell + 1) * a]);
            input.extend_from_slice(&self.condition.data()[cell * b..(cell + 1) * b]);
        }
        let x = Tensor::new([1, h, w, a + b], input)?;
        self.denoiser
            .predict(self.params, &x, &[t])?
            .reshape(zs.to_vec())
    }
}

/// Ancestral reverse chain from `z_T ~ N(0, I)`:
/// `z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β_t·ξ`, with `ξ = 0` at `t = 1`.
pub fn sample<T: Real>(
    model: &dyn Denoise<T>,
    schedule: &NoiseSchedule,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<T>> {
    let mut rng = Rng::new(seed).split("sample");
    let mut z: Tensor<T> = rng.normal_tensor(shape);
    for t in (1..=schedule.steps()).rev() {
        let eps = model.predict_noise(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::Dimension(format!(
                "denoiser returned {:?} for a {:?} latent",
                eps.shape(),
                z.shape()
            )));
        }
        if !eps.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite noise prediction at t={t}"
            )));
        }
        let beta = schedule.beta(t)?;
        let inv_sqrt_alpha = T::lit(1.0 / schedule.alpha(t)?.sqrt());
        let coef = T::lit(beta / (1.0 - schedule.alpha_bar(t)?).sqrt());
        let sigma = T::lit(beta.sqrt());
        let noise: Option<Tensor<T>> = (t > 1).then(|| rng.normal_tensor(shape));
        let data = z
            .data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (&zi, &ei))| {
                let mean = (zi - coef * ei) * inv_sqrt_alpha;
                match &noise {
                    Some(n) => mean + sigma * n.data()[i],
                    None => mean,
                }
            })
            .collect();
        z = Tensor::new(shape.to_vec(), data)?;
    }
    if !z.is_finite() {
        return Err(Error::Numeric("sampled latent is not finite".into()));
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_diffuse;

    /// Knows `z0`, so it returns the exact noise in any `z_t`.
    struct Oracle {
        z0: Tensor<f64>,
        schedule: NoiseSchedule,
    }

    impl Denoise<f64> for Oracle {
        fn predict_noise(&self, z_t: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
            let ab = self.schedule.alpha_bar(t)?;
            let data = z_t
                .data()
                .iter()
                .zip(self.z0.data())
                .map(|(z, z0)| (z - ab.sqrt() * z0) / (1.0 - ab).sqrt())
                .collect();
            Tensor::new(z_t.shape().to_vec(), data)
        }
    }

    #[test]
    fn oracle_recovers_z0_in_one_step() {
        let schedule = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
        let z0: Tensor<f64> = Rng::new(9).normal_tensor(&[4, 4, 3]);
        let oracle = Oracle {
            z0: z0.clone(),
            schedule: schedule.clone(),
        };
        let out = sample(&oracle, &schedule, &[4, 4, 3], 5).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-5);
        // sanity: the oracle is consistent with the forward process
        let eps: Tensor<f64> = Rng::new(1).normal_tensor(&[4, 4, 3]);
        let zt = forward_diffuse(&z0, &eps, 0.7).unwrap();
        let back = oracle.predict_noise(&zt, 1).unwrap();
        assert!(back.max_abs_diff(&eps) < 1e-12);
    }

    struct Zero;

    impl Denoise<f32> for Zero {
        fn predict_noise(&self, z_t: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(z_t.shape().to_vec()))
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let schedule = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let a = sample(&Zero, &schedule, &[4, 4, 3], 3).unwrap();
        assert_eq!(a, sample(&Zero, &schedule, &[4, 4, 3], 3).unwrap());
        assert_ne!(a, sample(&Zero, &schedule, &[4, 4, 3], 4).unwrap());
    }

    struct Broken;

    impl Denoise<f32> for Broken {
        fn predict_noise(&self, z_t: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::full(z_t.shape().to_vec(), f32::NAN))
        }
    }

    #[test]
    fn nan_prediction_is_a_numeric_error() {
        let schedule = NoiseSchedule::linear(3, 1e-4, 0.02).unwrap();
        assert!(matches!(
            sample(&Broken, &schedule, &[2, 2, 3], 0),
            Err(Error::Numeric(_))
        ));
    }
}
