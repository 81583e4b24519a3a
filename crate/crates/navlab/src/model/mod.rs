//! The learnable navigation policy.
//!
//! A shared convolutional encoder compresses each depth view into a feature
//! vector; the four view features are fused by concatenation. A variational
//! latent imagines the feature of the next expected observation before the
//! controller picks a motion action, while two auxiliary heads predict
//! per-action collisions and whether the target has been reached.

mod encoder;
mod net;

pub use encoder::Encoder;
pub use net::{ActMode, NavModel, PolicyOutput};

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionId, Panorama, D_MAX, VIEW_SIZE};
use crate::nn::Mat;

/// Log-variance clamp range for the Gaussian latents.
pub const LOGVAR_CLAMP: f64 = 10.0;
/// Stop threshold of the target checking head.
pub const TAU_STOP: f64 = 0.5;
/// Collision probability above which an action is masked when collision
/// masking is enabled at inference.
pub const COLLISION_MASK_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: &'static str },
    #[error("batch is empty")]
    EmptyBatch,
}

/// Model structure variants used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Variational generation + controller + both auxiliary heads.
    Full,
    /// No variational generation: a direct head on (fused, target) features.
    NoVg,
    /// No collision prediction loss (the head exists but its weight is 0).
    NoCp,
    /// No target checking head; the controller owns all 7 actions.
    NoTc,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "full" => Some(Variant::Full),
            "novg" => Some(Variant::NoVg),
            "nocp" => Some(Variant::NoCp),
            "notc" => Some(Variant::NoTc),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVg => "novg",
            Variant::NoCp => "nocp",
            Variant::NoTc => "notc",
        }
    }
}

/// Network shape. The defaults follow the reference architecture; smaller
/// widths are used for desk-scale training and gradient checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channel widths of the five stride-2 conv stages (64 -> 2 spatially).
    /// The last entry is the per-view feature dimension.
    pub channels: [usize; 5],
    pub latent_dim: usize,
    /// Hidden width of the perceptron heads.
    pub hidden_dim: usize,
    /// Parameter initialization seed.
    pub init_seed: u64,
    /// Mask actions whose predicted collision probability exceeds
    /// [`COLLISION_MASK_THRESHOLD`] at inference. Off by default.
    #[serde(default)]
    pub collision_masking: bool,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            variant: Variant::Full,
            channels: [32, 64, 128, 256, 512],
            latent_dim: 64,
            hidden_dim: 256,
            init_seed: 0,
            collision_masking: false,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels[4]
    }

    pub fn fused_dim(&self) -> usize {
        4 * self.feature_dim()
    }

    /// Number of controller logits: 6 motion actions, plus stop for NoTc.
    pub fn n_logits(&self) -> usize {
        if self.variant == Variant::NoTc {
            7
        } else {
            6
        }
    }

    /// Compact profile used by training-speed-bound tests and examples.
    pub fn desk(variant: Variant, init_seed: u64) -> ModelConfig {
        ModelConfig {
            variant,
            channels: [8, 16, 16, 32, 64],
            latent_dim: 16,
            hidden_dim: 64,
            init_seed,
            collision_masking: false,
        }
    }

    /// Width-reduced double-precision profile for finite-difference checks.
    pub fn tiny(variant: Variant, init_seed: u64) -> ModelConfig {
        ModelConfig {
            variant,
            channels: [2, 2, 4, 4, 8],
            latent_dim: 4,
            hidden_dim: 8,
            init_seed,
            collision_masking: false,
        }
    }
}

/// Diagonal-Gaussian latent parameters, one row per batch step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Mat,
    pub log_variance: Mat,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// Reparameterized sample: z = mean + exp(0.5 * log_variance) * noise.
pub fn sample_latent(latent: &GaussianLatent, noise: &Mat) -> Mat {
    &latent.mean + &(latent.log_variance.mapv(|lv| (0.5 * lv).exp()) * noise)
}

/// Closed-form KL divergence between diagonal Gaussians, summed over latent
/// dimensions; one value per batch row. Zero exactly when q == p.
pub fn kl_gaussians(q: &GaussianLatent, p: &GaussianLatent) -> Array1<f64> {
    let b = q.mean.nrows();
    let mut out = Array1::zeros(b);
    for i in 0..b {
        let mut acc = 0.0;
        for d in 0..q.mean.ncols() {
            let (mq, lq) = (q.mean[(i, d)], q.log_variance[(i, d)]);
            let (mp, lp) = (p.mean[(i, d)], p.log_variance[(i, d)]);
            let dm = mq - mp;
            acc += 0.5 * ((lq - lp).exp() + dm * dm * (-lp).exp() - 1.0 + lp - lq);
        }
        out[i] = acc;
    }
    out
}

/// Loss term weights (alpha, beta, gamma, zeta, eta).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            alpha: 0.01,
            beta: 0.0001,
            gamma: 1.0,
            zeta: 0.4,
            eta: 0.4,
        }
    }
}

/// The five loss terms and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub action_ce: f64,
    pub cpm: f64,
    pub tcm: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl, self.action_ce, self.cpm, self.tcm, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// One training batch of `len()` time steps drawn from demonstrations.
///
/// `images` stacks, in order: the four panorama views of every step
/// (step-major), then the ground-truth next front view of every step, then
/// the target view of every step — (6B, 1, 64, 64), depths normalized to
/// [0, 1].
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub images: Array4<f64>,
    pub actions: Vec<ActionId>,
    /// None at trajectory starts (encoded as the zero vector).
    pub prev_actions: Vec<Option<ActionId>>,
    pub collision_labels: Vec<[bool; 6]>,
    pub stop_labels: Vec<bool>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let b = self.len();
        if b == 0 {
            return Err(ModelError::EmptyBatch);
        }
        assert_eq!(self.images.dim(), (6 * b, 1, VIEW_SIZE, VIEW_SIZE));
        assert_eq!(self.prev_actions.len(), b);
        assert_eq!(self.collision_labels.len(), b);
        assert_eq!(self.stop_labels.len(), b);
        Ok(())
    }
}

/// Normalize a rendered depth view to [0, 1] for the encoder.
pub fn normalize_view(view: &Array2<f32>) -> Array2<f64> {
    view.mapv(|d| d as f64 / D_MAX)
}

/// Copy a normalized view into row `idx` of an image stack.
pub fn write_image(stack: &mut Array4<f64>, idx: usize, view: &Array2<f32>) {
    for r in 0..VIEW_SIZE {
        for c in 0..VIEW_SIZE {
            stack[(idx, 0, r, c)] = view[(r, c)] as f64 / D_MAX;
        }
    }
}

/// Stack panorama views plus next-front and target views into the batch
/// image layout documented on [`TrainBatch`].
pub fn assemble_images(
    panoramas: &[&Panorama],
    next_fronts: &[&Array2<f32>],
    targets: &[&Array2<f32>],
) -> Array4<f64> {
    let b = panoramas.len();
    assert_eq!(next_fronts.len(), b);
    assert_eq!(targets.len(), b);
    let mut images = Array4::zeros((6 * b, 1, VIEW_SIZE, VIEW_SIZE));
    for (t, pano) in panoramas.iter().enumerate() {
        for (v, view) in pano.views.iter().enumerate() {
            write_image(&mut images, 4 * t + v, view);
        }
    }
    for (t, view) in next_fronts.iter().enumerate() {
        write_image(&mut images, 4 * b + t, view);
    }
    for (t, view) in targets.iter().enumerate() {
        write_image(&mut images, 5 * b + t, view);
    }
    images
}

/// One-hot action encoding over the canonical 7-action order; `None` (the
/// episode-start previous action) encodes as all zeros.
pub fn action_one_hot(action: Option<ActionId>) -> [f64; 7] {
    let mut v = [0.0; 7];
    if let Some(a) = action {
        v[a.index()] = 1.0;
    }
    v
}
