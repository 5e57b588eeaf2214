use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::{load_dataset, name_seed, Sample};
use crate::codec::{train_codec, Codebook, CodecTrainReport, LatentCodec, LATENT_CHANNELS};
use crate::conditioning::{prepare_sample, PreparedSample};
use crate::diffusion::{plan_batch, CamoModel, LossBreakdown};
use crate::error::{Error, Result};
use crate::tensor::{Adam, ParamStore, Rng, Tensor};

pub const LOSS_LOG: &str = "loss.csv";
pub const CODEC_LOG: &str = "codec_loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.camf";
pub const STAGE1_CHECKPOINT: &str = "stage1.camf";
const LOSS_HEADER: &str = "step,fadl_fg,fadl_bg,bgrec,total,w,t,codec_checksum";

const CODEC_PREFIX: &str = "codec/";
const MODEL_PREFIX: &str = "model/";
const ADAM_PREFIX: &str = "adam/";
const CODEBOOK: &str = "codebook";
const STEP: &str = "state/step";
const ADAM_STEPS: &str = "state/adam_steps";

/// Frozen codec plus the stage-2 network, as stored in a checkpoint.
#[derive(Clone)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub codec: LatentCodec,
    pub codec_params: ParamStore<f32>,
    pub codebook: Codebook<f32>,
    pub model: CamoModel,
    pub params: ParamStore<f32>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.camf")
}

/// CRC-32 over the codec weights and codebook.
pub fn codec_checksum(params: &ParamStore<f32>, codebook: &Codebook<f32>) -> u32 {
    let mut all = params.clone();
    all.insert("codec.codebook", codebook.entries().clone());
    all.checksum()
}

fn build_model(config: &RunConfig) -> Result<(LatentCodec, CamoModel)> {
    config.validate()?;
    let codec = LatentCodec::new(config.codec.clone())?;
    let model = CamoModel::new(
        config.fafim,
        config.denoiser(),
        config.codec.latent_size(),
        LATENT_CHANNELS,
    )?;
    Ok((codec, model))
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config)?;
        let (codec, model) = build_model(&config)?;
        let mut codebook = Codebook::new(ckpt.get::<f32>(CODEBOOK)?)?;
        codebook.freeze();
        let trained = TrainedModel {
            codec_params: ckpt.store(CODEC_PREFIX)?,
            params: ckpt.store(MODEL_PREFIX)?,
            config,
            codec,
            codebook,
            model,
        };
        trained.check_layout()?;
        Ok(trained)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Every expected tensor is present with its initialized shape.
    fn check_layout(&self) -> Result<()> {
        let probe = Rng::new(0);
        let (codec_ref, book_ref) = self.codec.init::<f32>(&probe);
        let model_ref = self.model.init::<f32>(&probe);
        for (what, want, have) in [
            ("codec", &codec_ref, &self.codec_params),
            ("model", &model_ref, &self.params),
        ] {
            for (name, t) in want.iter() {
                match have.get(name) {
                    Some(h) if h.shape() == t.shape() => {}
                    Some(h) => {
                        return Err(Error::Integrity(format!(
                            "{what} tensor {name} has shape {:?}, config expects {:?}",
                            h.shape(),
                            t.shape()
                        )))
                    }
                    None => {
                        return Err(Error::Integrity(format!(
                            "checkpoint lacks {what} tensor {name}"
                        )))
                    }
                }
            }
            if have.len() != want.len() {
                return Err(Error::Integrity(format!(
                    "checkpoint has unexpected {what} tensors"
                )));
            }
        }
        if self.codebook.entries().shape() != book_ref.entries().shape() {
            return Err(Error::Integrity(
                "codebook shape disagrees with config".into(),
            ));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, step: usize, adam: Option<&Adam<f32>>) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.config.to_text());
        ckpt.insert_store(CODEC_PREFIX, &self.codec_params);
        ckpt.insert(CODEBOOK, self.codebook.entries().clone());
        ckpt.insert_store(MODEL_PREFIX, &self.params);
        ckpt.insert(STEP, Tensor::<f64>::scalar(step as f64));
        if let Some(adam) = adam {
            ckpt.insert(ADAM_STEPS, Tensor::<f64>::scalar(adam.steps() as f64));
            for (name, t) in adam.state_tensors() {
                ckpt.insert(format!("{ADAM_PREFIX}{name}"), t.clone());
            }
        }
        ckpt
    }

    pub fn prepare(
        &self,
        image: &crate::raster::RgbImage,
        mask: &crate::raster::Mask,
        seed: u64,
    ) -> Result<PreparedSample<f32>> {
        prepare_sample(
            &self.codec,
            &self.codec_params,
            image,
            mask,
            &self.config.slic,
            seed,
        )
    }
}

/// Summary of a `train` invocation.
pub struct TrainOutcome {
    pub trained: TrainedModel,
    pub codec_report: Option<CodecTrainReport>,
    /// Stage-2 breakdowns produced by this invocation.
    pub losses: Vec<LossBreakdown>,
    pub first_step: usize,
    pub final_checkpoint: PathBuf,
    pub codec_checksum: u32,
}

fn format_row(step: usize, b: &LossBreakdown, checksum: u32) -> String {
    let t: Vec<String> = b.timesteps.iter().map(usize::to_string).collect();
    format!(
        "{step},{},{},{},{},{},{},{checksum:08x}",
        b.fadl_fg,
        b.fadl_bg,
        b.bgrec,
        b.total,
        b.w,
        t.join(";")
    )
}

/// Rows of an existing log up to and including step `keep_below`.
fn retained_rows(path: &Path, keep_below: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut rows = Vec::new();
    for line in reader.lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Input(format!("{}: malformed row {line:?}", path.display())))?;
        if step <= keep_below {
            rows.push(line);
        }
    }
    Ok(rows)
}

fn write_codec_log(path: &Path, report: &CodecTrainReport) -> Result<()> {
    let mut s = String::from("step,recon,codebook,commit,total\n");
    for l in &report.losses {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            l.step + 1,
            l.recon,
            l.codebook,
            l.commit,
            l.total
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Stage 1: trains and freezes the codec, then initializes the stage-2
/// network.
pub fn train_stage_one(
    config: &RunConfig,
    samples: &[Sample],
) -> Result<(TrainedModel, CodecTrainReport)> {
    let (codec, model) = build_model(config)?;
    let n = config.codec.image_size;
    let images: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| s.image.resize(n, n).to_tensor())
        .collect();
    let (codec_params, codebook, report) =
        train_codec(&codec, &images, &config.codec_train, config.seed)?;
    let params = model.init::<f32>(&Rng::new(config.seed).split("model"));
    Ok((
        TrainedModel {
            config: config.clone(),
            codec,
            codec_params,
            codebook,
            model,
            params,
        },
        report,
    ))
}

fn resume_from(config: &RunConfig, path: &Path) -> Result<(TrainedModel, Adam<f32>, usize)> {
    let ckpt = Checkpoint::load(path)?;
    let mut trained = TrainedModel::from_checkpoint(&ckpt)?;
    let mismatched = trained.config.resume_mismatches(config);
    if !mismatched.is_empty() {
        return Err(Error::Config(format!(
            "{}: resume config differs from checkpoint in {}",
            path.display(),
            mismatched.join(", ")
        )));
    }
    trained.config = config.clone();
    let step = ckpt.scalar(STEP)? as usize;
    let adam = if ckpt.tensors.contains_key(ADAM_STEPS) {
        let steps = ckpt.scalar(ADAM_STEPS)? as u64;
        let mut state = Vec::new();
        for name in ckpt.tensors.keys() {
            if let Some(rest) = name.strip_prefix(ADAM_PREFIX) {
                state.push((rest.to_owned(), ckpt.get::<f32>(name)?));
            }
        }
        Adam::restore(config.adam, steps, state)?
    } else {
        Adam::new(config.adam)
    };
    Ok((trained, adam, step))
}

/// What the stage-2 loop exposes after each step.
pub struct StepView<'a> {
    /// Completed steps, 1-based.
    pub step: usize,
    pub breakdown: &'a LossBreakdown,
    pub trained: &'a TrainedModel,
    pub adam: &'a Adam<f32>,
    pub codec_checksum: u32,
}

/// Prepared stage-2 inputs, SLIC seeded per sample name.
pub fn prepare_samples(
    trained: &TrainedModel,
    samples: &[Sample],
) -> Result<Vec<PreparedSample<f32>>> {
    samples
        .iter()
        .map(|s| trained.prepare(&s.image, &s.mask, name_seed(trained.config.seed, &s.name)))
        .collect()
}

/// Stage-2 steps `start..end` on `trained.params`. The codec checksum is
/// verified after every step and `on_step` sees each result.
pub fn train_stage_two(
    trained: &mut TrainedModel,
    adam: &mut Adam<f32>,
    prepared: &[PreparedSample<f32>],
    start: usize,
    end: usize,
    mut on_step: impl FnMut(&StepView<'_>) -> Result<()>,
) -> Result<Vec<LossBreakdown>> {
    if prepared.is_empty() {
        return Err(Error::Input("stage 2 needs at least one sample".into()));
    }
    if let Some(name) = trained
        .params
        .names()
        .find(|n| trained.codec_params.contains(n))
    {
        return Err(Error::Invariant(format!(
            "{name} is both a codec and a diffusion parameter"
        )));
    }
    let checksum = codec_checksum(&trained.codec_params, &trained.codebook);
    let config = trained.config.clone();
    let schedule = config.schedule()?;
    let latent_shape = trained.model.latent_shape();
    let mut losses = Vec::with_capacity(end.saturating_sub(start));
    for step in start..end {
        let plan = plan_batch::<f32>(
            config.seed,
            step as u64,
            prepared.len(),
            config.batch,
            &schedule,
            &latent_shape,
        );
        let batch: Vec<&PreparedSample<f32>> = plan.indices.iter().map(|&i| &prepared[i]).collect();
        let breakdown = trained
            .model
            .train_step(
                &mut trained.params,
                adam,
                &batch,
                trained.codebook.entries(),
                &plan.draws,
                &config.loss,
                &schedule,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("stage-2 step {}: {msg}", step + 1)),
                other => other,
            })?;
        let now = codec_checksum(&trained.codec_params, &trained.codebook);
        if now != checksum {
            return Err(Error::Invariant(format!(
                "codec changed during stage 2 at step {}: {checksum:08x} -> {now:08x}",
                step + 1
            )));
        }
        on_step(&StepView {
            step: step + 1,
            breakdown: &breakdown,
            trained,
            adam,
            codec_checksum: now,
        })?;
        losses.push(breakdown);
    }
    Ok(losses)
}

/// Both stages (or stage 2 only, when resuming). Loss rows go to
/// `<out>/loss.csv`; checkpoints to `<out>/step_NNNNNN.camf` at the configured
/// interval and `<out>/final.camf` at the end.
pub fn run_training(
    config: &RunConfig,
    resume: Option<&Path>,
    mut observe: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    config.validate()?;
    let (_, samples) = load_dataset(&config.data_dir)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (mut trained, mut adam, start, codec_report) = match resume {
        Some(path) => {
            let (trained, adam, step) = resume_from(config, path)?;
            (trained, adam, step, None)
        }
        None => {
            let (trained, report) = train_stage_one(config, &samples)?;
            write_codec_log(&out.join(CODEC_LOG), &report)?;
            trained
                .to_checkpoint(0, None)
                .save(&out.join(STAGE1_CHECKPOINT))?;
            (trained, Adam::new(config.adam), 0, Some(report))
        }
    };
    let prepared = prepare_samples(&trained, &samples)?;

    let log_path = out.join(LOSS_LOG);
    let kept = retained_rows(&log_path, start)?;
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let io = |e| Error::io(&log_path, e);
    writeln!(log, "{LOSS_HEADER}").map_err(io)?;
    for row in &kept {
        writeln!(log, "{row}").map_err(io)?;
    }

    let result = train_stage_two(
        &mut trained,
        &mut adam,
        &prepared,
        start,
        config.train_steps,
        |view| {
            writeln!(
                log,
                "{}",
                format_row(view.step, view.breakdown, view.codec_checksum)
            )
            .map_err(io)?;
            observe(view.step, view.breakdown);
            if config.checkpoint_every > 0 && view.step % config.checkpoint_every == 0 {
                log.flush().map_err(io)?;
                view.trained
                    .to_checkpoint(view.step, Some(view.adam))
                    .save(&out.join(checkpoint_name(view.step)))?;
            }
            Ok(())
        },
    );
    log.flush().map_err(io)?;
    let losses = result?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let done = config.train_steps.max(start);
    trained
        .to_checkpoint(done, Some(&adam))
        .save(&final_checkpoint)?;
    let checksum = codec_checksum(&trained.codec_params, &trained.codebook);
    Ok(TrainOutcome {
        trained,
        codec_report,
        losses,
        first_step: start,
        final_checkpoint,
        codec_checksum: checksum,
    })
}
