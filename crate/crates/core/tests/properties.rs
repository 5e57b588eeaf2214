use camogen_core::codec::{quantize_straight_through, Codebook, CodecConfig, LatentCodec};
use camogen_core::conditioning::{
    blend_condition, localized_masked_pooling, prepare_sample, slic_superpixels, FafimConfig,
    SlicConfig, SuperpixelAssignment,
};
use camogen_core::diffusion::{
    fadl_terms, foreground_weight, forward_diffuse, invert_diffuse, plan_batch, sample, CamoModel,
    Denoise, DenoiserConfig, LossConfig, MaskPolarity, NoiseSchedule, WeightingFn,
};
use camogen_core::metrics::{
    frechet_distance, is_small_object, masked_psnr, masked_ssim, mmd_unbiased, FeatureStats,
};
use camogen_core::raster::{Mask, RgbImage};
use camogen_core::tensor::{multi_head_attention, Adam, AdamConfig, Graph, Rng, Tensor};
use camogen_core::Result;
use proptest::prelude::*;

fn normal(seed: u64, shape: &[usize]) -> Tensor<f64> {
    Rng::new(seed).normal_tensor(shape)
}

fn mask_from(bits: &[bool], h: usize, w: usize) -> Mask {
    Mask::new(h, w, bits[..h * w].to_vec()).unwrap()
}

fn image(seed: u64, h: usize, w: usize) -> RgbImage {
    let mut rng = Rng::new(seed);
    RgbImage::new(h, w, (0..h * w * 3).map(|_| rng.uniform() as f32).collect()).unwrap()
}

fn ensure_foreground(mut m: Mask) -> Mask {
    if m.foreground_count() == 0 {
        m.set(0, 0, true);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in 1usize..5, cols in 1usize..7, seed: u64, shift in -50.0f64..50.0
    ) {
        let x = normal(seed, &[rows, cols]);
        let g = Graph::new();
        let p = g.constant(x.clone()).softmax(1).unwrap().value();
        let q = g.constant(x.map(|v| v + shift)).softmax(1).unwrap().value();
        for r in 0..rows {
            let row = &p.data()[r * cols..(r + 1) * cols];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5, seed: u64) {
        let g = Graph::new();
        let a = g.constant(normal(seed, &[m, k]));
        let b = g.constant(normal(seed ^ 1, &[k, l]));
        let c = g.constant(normal(seed ^ 2, &[l, n]));
        let left = a.matmul(b).unwrap().matmul(c).unwrap().value();
        let right = a.matmul(b.matmul(c).unwrap()).unwrap().value();
        prop_assert!(left.max_abs_diff(&right) < 1e-10);
    }

    #[test]
    fn rng_streams_are_reproducible(seed: u64, label in "[a-z]{1,8}", index in 0u64..1000, n in 1usize..64) {
        let a = Rng::new(seed).split(&label).split_index(index);
        let mut s1 = a.clone();
        let mut s2 = a.clone();
        for i in 0..n {
            let v = s1.next_u64();
            prop_assert_eq!(v, s2.next_u64());
            prop_assert_eq!(v, a.at(i as u64));
        }
        let u = Rng::new(seed).split(&label).uniform();
        prop_assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn quantize_picks_the_nearest_entry(k in 1usize..40, d in 1usize..6, n in 1usize..40, seed: u64) {
        let entries = normal(seed, &[k, d]);
        let book = Codebook::new(entries.clone()).unwrap();
        let latent = normal(seed ^ 9, &[n, d]);
        let (q, idx) = book.quantize(&latent).unwrap();
        for (i, v) in latent.data().chunks_exact(d).enumerate() {
            let dist = |j: usize| -> f64 {
                (0..d).map(|c| (entries.data()[j * d + c] - v[c]).powi(2)).sum()
            };
            let chosen = dist(idx[i]);
            prop_assert!((0..k).all(|j| chosen <= dist(j)));
            prop_assert_eq!(&q.data()[i * d..(i + 1) * d], book.entry(idx[i]));
        }
    }

    #[test]
    fn straight_through_passes_gradients_unchanged(k in 1usize..10, n in 1usize..10, seed: u64) {
        let g = Graph::new();
        let latent = g.param(normal(seed, &[n, 3]));
        let book = g.param(normal(seed ^ 3, &[k, 3]));
        let q = quantize_straight_through(latent, book).unwrap();
        prop_assert!(q.straight_through.value().max_abs_diff(&q.selected.value()) < 1e-12);
        let upstream = normal(seed ^ 5, &[n, 3]);
        let loss = q.straight_through.mul(g.constant(upstream.clone())).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        prop_assert!(grads.wrt(latent).max_abs_diff(&upstream) < 1e-12);
    }

    #[test]
    fn mask_tensors_partition_and_blend_selects(h in 1usize..8, w in 1usize..8, bits in prop::collection::vec(any::<bool>(), 64), seed: u64) {
        let m = mask_from(&bits, h, w);
        let fg = m.foreground_tensor::<f64>();
        let bg = m.background_tensor::<f64>();
        prop_assert!(fg.data().iter().zip(bg.data()).all(|(a, b)| a + b == 1.0));

        let g = Graph::new();
        let features = normal(seed, &[h, w, 3]);
        let z_rec = normal(seed ^ 4, &[h, w, 3]);
        let (blended, condition) = blend_condition(g.constant(features.clone()), g.constant(z_rec.clone()), &bg).unwrap();
        let (blended, condition) = (blended.value(), condition.value());
        for cell in 0..h * w {
            let editable = bg.data()[cell] == 1.0;
            for c in 0..3 {
                let want = if editable { z_rec.data()[cell * 3 + c] } else { features.data()[cell * 3 + c] };
                prop_assert_eq!(blended.data()[cell * 3 + c], want);
                prop_assert_eq!(condition.data()[cell * 4 + c], want);
            }
            prop_assert_eq!(condition.data()[cell * 4 + 3], bg.data()[cell]);
        }
    }

    #[test]
    fn superpixels_partition_the_foreground(h in 2usize..14, w in 2usize..14, bits in prop::collection::vec(any::<bool>(), 196), s in 1usize..12, seed: u64) {
        let m = ensure_foreground(mask_from(&bits, h, w));
        let features = normal(seed, &[h, w, 2]);
        let config = SlicConfig { superpixels: s, ..SlicConfig::default() };
        let a = slic_superpixels(&features, &m, &config, seed).unwrap();
        prop_assert_eq!(&a, &slic_superpixels(&features, &m, &config, seed).unwrap());
        let mut counts = vec![0usize; a.count()];
        for y in 0..h {
            for x in 0..w {
                let l = a.label(y, x);
                prop_assert_eq!(l >= 0, m.get(y, x));
                if l >= 0 {
                    counts[l as usize] += 1;
                }
            }
        }
        prop_assert_eq!(&counts, &a.counts);
        prop_assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn pooling_permutes_with_labels(h in 2usize..10, w in 2usize..10, bits in prop::collection::vec(any::<bool>(), 100), seed: u64) {
        let m = ensure_foreground(mask_from(&bits, h, w));
        let features = normal(seed, &[h, w, 3]);
        let a = slic_superpixels(&features, &m, &SlicConfig { superpixels: 4, ..SlicConfig::default() }, seed).unwrap();
        let n = a.count();
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut perm);
        let relabelled = SuperpixelAssignment {
            labels: a.labels.iter().map(|&l| if l < 0 { l } else { perm[l as usize] as i32 }).collect(),
            counts: {
                let mut c = vec![0; n];
                for (j, &cnt) in a.counts.iter().enumerate() {
                    c[perm[j]] = cnt;
                }
                c
            },
            ..a.clone()
        };
        let p = localized_masked_pooling(&features, &a).unwrap();
        let q = localized_masked_pooling(&features, &relabelled).unwrap();
        for j in 0..n {
            prop_assert_eq!(&p.data()[j * 3..(j + 1) * 3], &q.data()[perm[j] * 3..(perm[j] + 1) * 3]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_tokens_permute(
        heads in 1usize..3, nq in 1usize..5, nk in 1usize..6, seed: u64
    ) {
        let (d, model) = (4usize, 4 * heads);
        let g = Graph::new();
        let q = normal(seed, &[nq, d]);
        let kv = normal(seed ^ 1, &[nk, d]);
        let ws: Vec<_> = (0..4).map(|i| g.constant(normal(seed ^ (10 + i), &[if i == 3 { model } else { d }, if i == 3 { d } else { model }]))).collect();
        let run = |q: &Tensor<f64>, kv: &Tensor<f64>| {
            multi_head_attention(g.constant(q.clone()), g.constant(kv.clone()), g.constant(kv.clone()), ws[0], ws[1], ws[2], ws[3], heads).unwrap()
        };
        let (out, weights) = run(&q, &kv);
        prop_assert_eq!(weights.len(), heads);
        for a in &weights {
            let a = a.value();
            for r in 0..nq {
                prop_assert!((a.data()[r * nk..(r + 1) * nk].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut qp: Vec<usize> = (0..nq).collect();
        let mut kp: Vec<usize> = (0..nk).collect();
        Rng::new(seed).shuffle(&mut qp);
        Rng::new(seed ^ 2).shuffle(&mut kp);
        let permute = |t: &Tensor<f64>, p: &[usize]| {
            let c = t.shape()[1];
            Tensor::new(t.shape().to_vec(), p.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect()).unwrap()
        };
        let (out2, _) = run(&permute(&q, &qp), &permute(&kv, &kp));
        prop_assert!(permute(&out.value(), &qp).max_abs_diff(&out2.value()) < 1e-10);
    }

    #[test]
    fn forward_process_inverts(alpha_bar in 1e-4f64..0.9999, seed: u64) {
        let z0 = normal(seed, &[4, 4, 3]);
        let eps = normal(seed ^ 1, &[4, 4, 3]);
        let zt = forward_diffuse(&z0, &eps, alpha_bar).unwrap();
        prop_assert!(invert_diffuse(&zt, &eps, alpha_bar).unwrap().max_abs_diff(&z0) < 1e-9);
    }

    #[test]
    fn denoising_terms_partition_and_scale_with_weight(
        b in 1usize..4, n in 1usize..30, w in 0.0f64..10.0, seed: u64,
        bits in prop::collection::vec(any::<bool>(), 120)
    ) {
        let noise = normal(seed, &[b, n]);
        let pred = normal(seed ^ 1, &[b, n]);
        let mask = Tensor::from_fn([b, n], |i| if bits[i] { 1.0 } else { 0.0 });
        let g = Graph::new();
        let terms = |weights: &[f64], polarity| {
            let (fg, bg) = fadl_terms(g.constant(noise.clone()), g.constant(pred.clone()), &mask, weights, polarity).unwrap();
            (fg.value().item(), bg.value().item())
        };
        for polarity in [MaskPolarity::Intent, MaskPolarity::Printed] {
            let (fg1, bg1) = terms(&vec![1.0; b], polarity);
            let mse = noise.data().iter().zip(pred.data()).map(|(a, c)| (a - c).powi(2)).sum::<f64>() / (b * n) as f64;
            prop_assert!((fg1 + bg1 - mse).abs() < 1e-12);
            let (fgw, bgw) = terms(&vec![w; b], polarity);
            prop_assert!((fgw - w * w * fg1).abs() < 1e-9 * (1.0 + fgw.abs()));
            prop_assert_eq!(bgw, bg1);
        }
    }

    #[test]
    fn paper_weight_is_decreasing_and_below_reciprocal(r1 in 1e-6f64..1.0, r2 in 1e-6f64..1.0, alpha in 0.01f64..1.0) {
        let (lo, hi) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
        prop_assume!(lo < hi);
        let w = |r| foreground_weight(r, alpha, WeightingFn::Paper).unwrap();
        prop_assert!(w(lo) > w(hi));
        prop_assert!(w(lo) < foreground_weight(lo, alpha, WeightingFn::Reciprocal).unwrap());
        prop_assert!(w(lo) < 1.0 / alpha);
    }

    #[test]
    fn metrics_ignore_the_background(h in 4usize..20, w in 4usize..20, bits in prop::collection::vec(any::<bool>(), 400), seed: u64) {
        let m = ensure_foreground(mask_from(&bits, h, w));
        let reference = image(seed, h, w);
        let generated = image(seed ^ 1, h, w);
        let scrambled = {
            let other = image(seed ^ 2, h, w);
            let data: Vec<f32> = (0..h * w * 3).map(|i| if m.data()[i / 3] { generated.data()[i] } else { other.data()[i] }).collect();
            RgbImage::new(h, w, data).unwrap()
        };
        prop_assert_eq!(masked_psnr(&generated, &reference, &m).unwrap(), masked_psnr(&scrambled, &reference, &m).unwrap());
        prop_assert_eq!(masked_ssim(&generated, &reference, &m).unwrap(), masked_ssim(&scrambled, &reference, &m).unwrap());
        prop_assert_eq!(masked_psnr(&reference, &reference, &m).unwrap(), 100.0);
        prop_assert!((masked_ssim(&reference, &reference, &m).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(d in 1usize..6, n in 2usize..12, seed: u64) {
        let mut rng = Rng::new(seed);
        let mut set = |shift: f64| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.normal() + shift).collect()).collect() };
        let a = FeatureStats::from_features(&set(0.0)).unwrap();
        let b = FeatureStats::from_features(&set(0.5)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn small_object_test_is_monotone(h in 8usize..40, w in 8usize..40, bits in prop::collection::vec(any::<bool>(), 1600), extra in 0usize..200) {
        let small = {
            let mut m = Mask::empty(h, w);
            for (i, &b) in bits.iter().take(h * w).enumerate() {
                if b && i % 7 == 0 {
                    m.set(i / w, i % w, true);
                }
            }
            m
        };
        let mut grown = small.clone();
        for i in 0..extra.min(h * w) {
            grown.set(i / w, i % w, true);
        }
        prop_assert_eq!(is_small_object(&small), small.foreground_count() * 64 < h * w);
        if !is_small_object(&small) {
            prop_assert!(!is_small_object(&grown));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn codec_shapes_follow_the_downsampling_factor(stages in 1usize..4, mult in 1usize..3, seed in 0u64..1000) {
        let factor = 1 << stages;
        let size = factor * 2 * mult;
        let codec = LatentCodec::new(CodecConfig { image_size: size, downsample_stages: stages, codebook_size: 8, base_width: 4 }).unwrap();
        let (params, book) = codec.init::<f32>(&Rng::new(seed));
        let z = codec.encode(&params, &image(seed, size, size).to_tensor()).unwrap();
        prop_assert_eq!(z.shape(), &[size / factor, size / factor, 3][..]);
        let x = codec.decode(&params, &book, &z).unwrap();
        prop_assert_eq!(x.shape(), &[size, size, 3][..]);
        prop_assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

struct ZeroNoise;

impl Denoise<f64> for ZeroNoise {
    fn predict_noise(&self, z_t: &Tensor<f64>, _t: usize) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(z_t.shape().to_vec()))
    }
}

/// Knows `z0`, so it returns the exact noise of any `z_t`.
struct Oracle {
    z0: Tensor<f64>,
    schedule: NoiseSchedule,
}

impl Denoise<f64> for Oracle {
    fn predict_noise(&self, z_t: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
        let ab = self.schedule.alpha_bar(t)?;
        Ok(Tensor::from_fn(z_t.shape().to_vec(), |i| {
            (z_t.data()[i] - ab.sqrt() * self.z0.data()[i]) / (1.0 - ab).sqrt()
        }))
    }
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let a = sample(&ZeroNoise, &schedule, &[4, 4, 3], 1).unwrap();
    let b = sample(&ZeroNoise, &schedule, &[4, 4, 3], 1).unwrap();
    let c = sample(&ZeroNoise, &schedule, &[4, 4, 3], 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.is_finite());
}

#[test]
fn single_step_oracle_sampling_recovers_the_latent() {
    let schedule = NoiseSchedule::linear(1, 0.02, 0.02).unwrap();
    let z0 = normal(4, &[4, 4, 3]);
    let oracle = Oracle {
        z0: z0.clone(),
        schedule: schedule.clone(),
    };
    let z = sample(&oracle, &schedule, &[4, 4, 3], 9).unwrap();
    assert!(z.max_abs_diff(&z0) < 1e-5);
}

#[test]
fn mmd_is_unbiased_under_the_null() {
    let mut rng = Rng::new(12);
    let mut draws = Vec::new();
    for _ in 0..200 {
        let mut set = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect()
        };
        let a = set(8);
        let b = set(8);
        draws.push(mmd_unbiased(&a, &b, None).unwrap());
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(
        mean.abs() < 3.0 * sd / n.sqrt(),
        "mean {mean}, se {}",
        sd / n.sqrt()
    );
}

#[test]
fn a_thousand_random_training_steps_stay_finite() {
    let codec = LatentCodec::new(CodecConfig {
        image_size: 16,
        downsample_stages: 2,
        codebook_size: 8,
        base_width: 4,
    })
    .unwrap();
    let (codec_params, book) = codec.init::<f32>(&Rng::new(1));
    let mut rng = Rng::new(2);
    let samples: Vec<_> = (0..6)
        .map(|i| {
            let img = image(100 + i, 16, 16);
            let mut mask = Mask::empty(16, 16);
            // from a single pixel up to most of the frame
            let side = 1 + 3 * i as usize;
            let (y0, x0) = (rng.below(17 - side), rng.below(17 - side));
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    mask.set(y, x, true);
                }
            }
            prepare_sample(
                &codec,
                &codec_params,
                &img,
                &mask,
                &SlicConfig::default(),
                i,
            )
            .unwrap()
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
            time_features: 8,
        },
        4,
        3,
    )
    .unwrap();
    let schedule = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
    let mut store = model.init::<f32>(&Rng::new(3));
    let mut adam = Adam::new(AdamConfig::default());
    for step in 0..1000u64 {
        let plan = plan_batch::<f32>(5, step, samples.len(), 2, &schedule, &[4, 4, 3]);
        let batch: Vec<_> = plan.indices.iter().map(|&i| &samples[i]).collect();
        let b = model
            .train_step(
                &mut store,
                &mut adam,
                &batch,
                book.entries(),
                &plan.draws,
                &LossConfig::default(),
                &schedule,
            )
            .unwrap();
        assert!(b.is_finite(), "step {step}: {b:?}");
    }
    assert!(store.iter().all(|(_, t)| t.is_finite()));
}
