//! Latent denoising diffusion: schedule, conditional U-Net, the
//! foreground-weighted objective and ancestral sampling.

mod loss;
mod model;
mod sampler;
mod schedule;
mod unet;

pub use loss::{
    bgrec_term, combine, fadl_terms, foreground_weight, total_loss, LossBreakdown, LossConfig,
    LossVars, MaskPolarity, WeightingFn,
};
pub use model::{plan_batch, BatchPlan, CamoModel, Draw};
pub use sampler::{sample, ConditionedDenoiser, Denoise};
pub use schedule::{forward_diffuse, invert_diffuse, NoiseSchedule};
pub use unet::{Denoiser, DenoiserConfig};
