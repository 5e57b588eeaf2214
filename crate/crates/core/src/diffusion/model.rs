use super::loss::{bgrec_term, combine, fadl_terms, LossBreakdown, LossConfig, LossVars};
use super::{ConditionedDenoiser, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::conditioning::{
    blend_condition, build_condition, expand_channels, ConditionBundle, ConditionVars, Conditioner,
    FafimConfig, PreparedSample,
};
use crate::error::{Error, Result};
use crate::tensor::{Adam, BoundParams, Graph, ParamStore, Real, Rng, Tensor, Var};

/// Trainable stage-2 network: conditioning plus the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct CamoModel {
    pub conditioner: Conditioner,
    pub denoiser: Denoiser,
}

/// Timestep and noise for one batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw<T> {
    pub t: usize,
    pub noise: Tensor<T>,
}

/// Batch members and their draws for one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan<T> {
    pub indices: Vec<usize>,
    pub draws: Vec<Draw<T>>,
}

/// Keyed only by `(seed, step)`, so a resumed run replays the same batches.
pub fn plan_batch<T: Real>(
    seed: u64,
    step: u64,
    dataset_len: usize,
    batch: usize,
    schedule: &NoiseSchedule,
    latent_shape: &[usize],
) -> BatchPlan<T> {
    let mut rng = Rng::new(seed).split("diffusion").split_index(step);
    let indices: Vec<usize> = (0..batch).map(|_| rng.below(dataset_len)).collect();
    let draws = (0..batch)
        .map(|_| Draw {
            t: 1 + rng.below(schedule.steps()),
            noise: rng.normal_tensor(latent_shape),
        })
        .collect();
    BatchPlan { indices, draws }
}

impl CamoModel {
    pub fn new(
        fafim: FafimConfig,
        denoiser: DenoiserConfig,
        latent_size: usize,
        channels: usize,
    ) -> Result<Self> {
        let conditioner = Conditioner::new(fafim, latent_size, latent_size, channels)?;
        if denoiser.in_channels != 2 * channels + 1 || denoiser.out_channels != channels {
            return Err(Error::Config(format!(
                "denoiser must map {} channels to {channels}, configured {} to {}",
                2 * channels + 1,
                denoiser.in_channels,
                denoiser.out_channels
            )));
        }
        Ok(CamoModel {
            conditioner,
            denoiser: Denoiser::new(denoiser)?,
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [
            self.conditioner.height,
            self.conditioner.width,
            self.conditioner.channels,
        ]
    }

    pub fn init<T: Real>(&self, rng: &Rng) -> ParamStore<T> {
        let mut store = ParamStore::new();
        self.conditioner.init(&mut store, rng);
        self.denoiser.init(&mut store, rng);
        store
    }

    /// Conditioning pass for one sample: returns the intermediates, `c̃^f`
    /// and `c`.
    pub fn condition_graph<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        sample: &PreparedSample<T>,
        codebook: Var<'g, T>,
    ) -> Result<(ConditionVars<'g, T>, Var<'g, T>, Var<'g, T>)> {
        let g = codebook.graph();
        let features = g.constant(sample.features.clone());
        let vars = self.conditioner.forward(
            p,
            g.constant(sample.pooled.clone()),
            codebook,
            features,
            &sample.masks.foreground_latent_tensor(),
        )?;
        let (blended, condition) =
            blend_condition(features, vars.z_rec, &sample.masks.background_latent())?;
        Ok((vars, blended, condition))
    }

    /// Condition bundle on frozen weights.
    pub fn condition<T: Real>(
        &self,
        params: &ParamStore<T>,
        sample: &PreparedSample<T>,
        codebook: &Tensor<T>,
    ) -> Result<ConditionBundle<T>> {
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let (vars, _, _) = self.condition_graph(&p, sample, g.constant(codebook.clone()))?;
        build_condition(
            &sample.features,
            &vars.z_rec.value(),
            &sample.masks.background_latent(),
        )
    }

    /// The full objective on a batch with fixed draws. Returns the loss
    /// handles and the per-sample weights.
    pub fn loss_graph<'g, T: Real>(
        &self,
        p: &BoundParams<'g, T>,
        samples: &[&PreparedSample<T>],
        codebook: Var<'g, T>,
        draws: &[Draw<T>],
        loss: &LossConfig,
        schedule: &NoiseSchedule,
    ) -> Result<(LossVars<'g, T>, Vec<f64>)> {
        if samples.is_empty() || samples.len() != draws.len() {
            return Err(Error::Input(format!(
                "{} samples with {} draws",
                samples.len(),
                draws.len()
            )));
        }
        let g = codebook.graph();
        let [h, w, ch] = self.latent_shape();
        let mut inputs = Vec::with_capacity(samples.len());
        let mut z_recs = Vec::with_capacity(samples.len());
        let mut z0s = Vec::with_capacity(samples.len() * h * w * ch);
        let mut noises = Vec::with_capacity(samples.len() * h * w * ch);
        let mut masks = Vec::with_capacity(samples.len() * h * w * ch);
        let mut weights = Vec::with_capacity(samples.len());
        for (sample, draw) in samples.iter().zip(draws) {
            let (vars, _, condition) = self.condition_graph(p, sample, codebook)?;
            let z_t = g.constant(schedule.diffuse(&sample.z0, draw.t, &draw.noise)?);
            inputs.push(Var::concat(&[z_t, condition], 2)?.reshape(&[1, h, w, 2 * ch + 1])?);
            z_recs.push(vars.z_rec.reshape(&[1, h, w, ch])?);
            z0s.extend_from_slice(sample.z0.data());
            noises.extend_from_slice(draw.noise.data());
            masks.extend_from_slice(
                expand_channels(&sample.masks.background_latent::<T>(), ch).data(),
            );
            weights.push(loss.weight(sample.ratio)?);
        }
        let b = samples.len();
        let x = Var::concat(&inputs, 0)?;
        let timesteps: Vec<usize> = draws.iter().map(|d| d.t).collect();
        let predicted = self.denoiser.forward(p, x, &timesteps)?;
        let noise = g.constant(Tensor::new([b, h, w, ch], noises)?);
        let mask = Tensor::new([b, h, w, ch], masks)?;
        let (fg, bg) = fadl_terms(noise, predicted, &mask, &weights, loss.polarity)?;
        let z_rec = Var::concat(&z_recs, 0)?;
        let z0 = g.constant(Tensor::new([b, h, w, ch], z0s)?);
        let bgrec = bgrec_term(z_rec, z0, &mask, loss.polarity)?;
        Ok((combine(fg, bg, bgrec, loss.lambda)?, weights))
    }

    /// One optimizer step on the trainable store. The codebook and every
    /// cached latent enter the graph as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        store: &mut ParamStore<f32>,
        adam: &mut Adam<f32>,
        samples: &[&PreparedSample<f32>],
        codebook: &Tensor<f32>,
        draws: &[Draw<f32>],
        loss: &LossConfig,
        schedule: &NoiseSchedule,
    ) -> Result<LossBreakdown> {
        let g = Graph::new();
        let p = store.bind(&g);
        let (vars, weights) = self.loss_graph(
            &p,
            samples,
            g.constant(codebook.clone()),
            draws,
            loss,
            schedule,
        )?;
        let w = weights.iter().sum::<f64>() / weights.len() as f64;
        let breakdown = vars.breakdown(w, draws.iter().map(|d| d.t).collect());
        if !breakdown.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at timesteps {:?}: {breakdown:?}",
                breakdown.timesteps
            )));
        }
        let grads = g.backward(vars.total)?;
        store.accumulate_grads(&p, &grads);
        drop(p);
        adam.step(store)?;
        Ok(breakdown)
    }

    /// Mean squared noise-prediction residual on frozen weights, split into
    /// object cells and editable cells. Returns `(foreground, background)`
    /// per-cell means.
    pub fn residual_mse<T: Real>(
        &self,
        params: &ParamStore<T>,
        samples: &[&PreparedSample<T>],
        codebook: &Tensor<T>,
        draws: &[Draw<T>],
        schedule: &NoiseSchedule,
    ) -> Result<(f64, f64)> {
        if samples.is_empty() || samples.len() != draws.len() {
            return Err(Error::Input(format!(
                "{} samples with {} draws",
                samples.len(),
                draws.len()
            )));
        }
        let (mut fg, mut fg_n, mut bg, mut bg_n) = (0.0, 0usize, 0.0, 0usize);
        for (sample, draw) in samples.iter().zip(draws) {
            let bundle = self.condition(params, sample, codebook)?;
            let z_t = schedule.diffuse(&sample.z0, draw.t, &draw.noise)?;
            let bound = ConditionedDenoiser {
                denoiser: &self.denoiser,
                params,
                condition: &bundle.condition,
            };
            let predicted = super::Denoise::predict_noise(&bound, &z_t, draw.t)?;
            let ch = predicted.shape()[2];
            let editable = sample.masks.background_latent::<T>();
            for (i, (p, e)) in predicted.data().iter().zip(draw.noise.data()).enumerate() {
                let d = (p.as_f64() - e.as_f64()).powi(2);
                if editable.data()[i / ch] > T::lit(0.5) {
                    bg += d;
                    bg_n += 1;
                } else {
                    fg += d;
                    fg_n += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        Ok((mean(fg, fg_n), mean(bg, bg_n)))
    }

    /// Reverse chain under the sample's condition; returns `z'_0`.
    pub fn sample_latent<T: Real>(
        &self,
        params: &ParamStore<T>,
        condition: &ConditionBundle<T>,
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<Tensor<T>> {
        let bound = ConditionedDenoiser {
            denoiser: &self.denoiser,
            params,
            condition: &condition.condition,
        };
        super::sample(&bound, schedule, &self.latent_shape(), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, LatentCodec};
    use crate::conditioning::{prepare_sample, SlicConfig};
    use crate::raster::{Mask, RgbImage};
    use crate::tensor::{grad_check, AdamConfig, GradCheckConfig};

    struct Fixture<T> {
        model: CamoModel,
        samples: Vec<PreparedSample<T>>,
        codebook: Tensor<T>,
        schedule: NoiseSchedule,
    }

    fn fixture<T: Real>() -> Fixture<T> {
        let codec = LatentCodec::new(CodecConfig {
            image_size: 16,
            downsample_stages: 2,
            codebook_size: 6,
            base_width: 4,
        })
        .unwrap();
        let (params, book) = codec.init::<T>(&Rng::new(1));
        let mut rng = Rng::new(2);
        let samples = (0..2)
            .map(|i| {
                let img = RgbImage::new(16, 16, (0..768).map(|_| rng.uniform() as f32).collect())
                    .unwrap();
                let mut mask = Mask::empty(16, 16);
                for y in 3..9 + i {
                    for x in 5..11 {
                        mask.set(y, x, true);
                    }
                }
                prepare_sample(&codec, &params, &img, &mask, &SlicConfig::default(), 0).unwrap()
            })
            .collect();
        let model = CamoModel::new(
            FafimConfig {
                patch: 2,
                width: 8,
                heads: 2,
            },
            DenoiserConfig {
                in_channels: 7,
                out_channels: 3,
                base_width: 4,
                time_features: 4,
            },
            4,
            3,
        )
        .unwrap();
        Fixture {
            model,
            samples,
            codebook: book.entries().clone(),
            schedule: NoiseSchedule::linear(10, 1e-4, 0.02).unwrap(),
        }
    }

    #[test]
    fn composed_loss_matches_finite_differences() {
        let fx = fixture::<f64>();
        let store = fx.model.init::<f64>(&Rng::new(3));
        let plan = plan_batch::<f64>(4, 0, 2, 2, &fx.schedule, &[4, 4, 3]);
        let samples: Vec<_> = plan.indices.iter().map(|&i| &fx.samples[i]).collect();
        let report = grad_check(
            &store,
            |g, p| {
                let cb = g.constant(fx.codebook.clone());
                let (vars, _) = fx.model.loss_graph(
                    p,
                    &samples,
                    cb,
                    &plan.draws,
                    &LossConfig::default(),
                    &fx.schedule,
                )?;
                Ok(vars.total)
            },
            GradCheckConfig {
                max_probes_per_param: Some(2),
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(
            report.passed,
            "{:?}",
            report
                .params
                .iter()
                .filter(|p| p.max_rel_err > 1e-4)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn train_step_is_deterministic() {
        let fx = fixture::<f32>();
        let run = || {
            let mut store = fx.model.init::<f32>(&Rng::new(3));
            let mut adam = Adam::new(AdamConfig::default());
            let plan = plan_batch::<f32>(4, 0, 2, 2, &fx.schedule, &[4, 4, 3]);
            let samples: Vec<_> = plan.indices.iter().map(|&i| &fx.samples[i]).collect();
            let b = fx
                .model
                .train_step(
                    &mut store,
                    &mut adam,
                    &samples,
                    &fx.codebook,
                    &plan.draws,
                    &LossConfig::default(),
                    &fx.schedule,
                )
                .unwrap();
            (b, store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert!((a.fadl_total - (a.fadl_fg + a.fadl_bg)).abs() < 1e-6);
        assert!((a.total - (a.fadl_total + a.bgrec)).abs() < 1e-6);
    }

    #[test]
    fn condition_respects_the_mask() {
        let fx = fixture::<f64>();
        let store = fx.model.init::<f64>(&Rng::new(3));
        let s = &fx.samples[0];
        let bundle = fx.model.condition(&store, s, &fx.codebook).unwrap();
        let md = s.masks.background_latent::<f64>();
        for i in 0..48 {
            let want = if md.data()[i / 3] == 1.0 {
                bundle.z_rec.data()[i]
            } else {
                s.features.data()[i]
            };
            assert_eq!(bundle.blended.data()[i], want);
        }
        let z = fx
            .model
            .sample_latent(&store, &bundle, &fx.schedule, 8)
            .unwrap();
        assert_eq!(z.shape(), [4, 4, 3]);
        assert_eq!(
            z,
            fx.model
                .sample_latent(&store, &bundle, &fx.schedule, 8)
                .unwrap()
        );
    }
}
