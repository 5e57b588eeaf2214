use super::{quantize_straight_through, stack, Codebook, LatentCodec, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Commitment weight.
    pub beta: f64,
    /// An entry unused for this many consecutive steps is re-seeded.
    pub dead_after: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            steps: 500,
            batch: 4,
            lr: 2e-3,
            beta: 0.25,
            dead_after: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecLoss {
    pub step: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecTrainReport {
    pub losses: Vec<CodecLoss>,
    /// Entries re-seeded during training.
    pub revived: usize,
    /// Entries re-seeded by the final usage pass.
    pub final_reseeds: usize,
    /// Assignment histogram over the training set after training.
    pub usage: Vec<usize>,
}

const BOOK: &str = "codec.codebook";

/// Stage-1 training: reconstruction MSE plus the codebook and commitment
/// terms, with straight-through gradients. Returns frozen weights and a
/// frozen codebook.
pub fn train_codec(
    codec: &LatentCodec,
    images: &[Tensor<f32>],
    config: &CodecTrainConfig,
    seed: u64,
) -> Result<(ParamStore<f32>, Codebook<f32>, CodecTrainReport)> {
    if images.is_empty() {
        return Err(Error::Input(
            "codec training needs at least one image".into(),
        ));
    }
    if config.batch == 0 {
        return Err(Error::Config("codec batch must be >= 1".into()));
    }
    let n = codec.config.image_size;
    for (i, img) in images.iter().enumerate() {
        if img.shape() != [n, n, 3] {
            return Err(Error::Dimension(format!(
                "training image {i} has shape {:?}, expected [{n}, {n}, 3]",
                img.shape()
            )));
        }
    }

    let root = Rng::new(seed);
    let (mut store, book) = codec.init::<f32>(&root);
    store.insert(BOOK, book.entries().clone());
    let k = book.size();
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut last_used = vec![0usize; k];
    let mut report = CodecTrainReport {
        losses: Vec::with_capacity(config.steps),
        revived: 0,
        final_reseeds: 0,
        usage: Vec::new(),
    };
    let stream = root.split("codec");

    for step in 0..config.steps {
        let mut rng = stream.split_index(step as u64);
        let batch: Vec<Tensor<f32>> = (0..config.batch)
            .map(|_| images[rng.below(images.len())].clone())
            .collect();
        let x = stack(&batch)?;

        let g = Graph::new();
        let p = store.bind(&g);
        let xv = g.constant(x);
        let z = codec.encode_graph(&p, xv)?;
        let q = quantize_straight_through(z, p.get(BOOK)?)?;
        let recon = codec
            .decode_graph(&p, q.straight_through)?
            .sub(xv)?
            .square()
            .mean();
        let codebook_term = z.detach().sub(q.selected)?.square().mean();
        let commit = z
            .sub(q.selected.detach())?
            .square()
            .mean()
            .scale(config.beta);
        let total = recon.add(codebook_term)?.add(commit)?;
        let record = CodecLoss {
            step,
            recon: recon.value().item() as f64,
            codebook: codebook_term.value().item() as f64,
            commit: commit.value().item() as f64,
            total: total.value().item() as f64,
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric(format!(
                "codec loss is {} at step {step}",
                record.total
            )));
        }
        let grads = g.backward(total)?;
        store.accumulate_grads(&p, &grads);
        let encoded = z.value();
        drop(p);
        adam.step(&mut store)?;
        report.losses.push(record);

        for &idx in &q.indices {
            last_used[idx] = step + 1;
        }
        let entries = store.get_mut(BOOK).expect("codebook tensor");
        let vectors = encoded.data().len() / LATENT_CHANNELS;
        for (entry, last) in last_used.iter_mut().enumerate() {
            if step + 1 - *last >= config.dead_after {
                let pick = rng.below(vectors);
                let src = &encoded.data()[pick * LATENT_CHANNELS..(pick + 1) * LATENT_CHANNELS];
                entries.data_mut()[entry * LATENT_CHANNELS..(entry + 1) * LATENT_CHANNELS]
                    .copy_from_slice(src);
                *last = step + 1;
                report.revived += 1;
            }
        }
    }

    let entries = store.get(BOOK).expect("codebook tensor").clone();
    let mut params = ParamStore::new();
    for (name, t) in store.iter().filter(|(name, _)| *name != BOOK) {
        params.insert(name, t.clone());
    }
    let mut book = Codebook::new(entries)?;
    let latents = codec.encode_batch(&params, images)?;
    let (reseeds, usage) = reseed_unused(&mut book, &latents)?;
    report.final_reseeds = reseeds;
    report.usage = usage;
    book.freeze();
    Ok((params, book, report))
}

/// Assignment histogram of every latent vector.
pub fn usage_histogram(book: &Codebook<f32>, latents: &[Tensor<f32>]) -> Result<Vec<usize>> {
    let mut hist = vec![0; book.size()];
    for z in latents {
        for idx in book.quantize(z)?.1 {
            hist[idx] += 1;
        }
    }
    Ok(hist)
}

/// Moves every entry that no training vector selects onto the worst-served
/// training vector, one at a time, never orphaning an entry that serves a
/// single vector. Returns the number of moves and the final histogram.
fn reseed_unused(book: &mut Codebook<f32>, latents: &[Tensor<f32>]) -> Result<(usize, Vec<usize>)> {
    let d = book.dim();
    let vectors: Vec<&[f32]> = latents
        .iter()
        .flat_map(|z| z.data().chunks_exact(d))
        .collect();
    let limit = 4 * book.size();
    let mut moves = 0;
    loop {
        let assigned: Vec<(usize, f32)> = vectors.iter().map(|v| book.nearest(v)).collect();
        let mut hist = vec![0; book.size()];
        for &(idx, _) in &assigned {
            hist[idx] += 1;
        }
        let Some(dead) = hist.iter().position(|&c| c == 0) else {
            return Ok((moves, hist));
        };
        if moves >= limit {
            return Ok((moves, hist));
        }
        let worst = assigned
            .iter()
            .enumerate()
            .filter(|(_, (idx, dist))| hist[*idx] >= 2 && *dist > 0.0)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(worst) = worst else {
            return Ok((moves, hist));
        };
        book.entries_mut()?.data_mut()[dead * d..(dead + 1) * d].copy_from_slice(vectors[worst]);
        moves += 1;
    }
}
