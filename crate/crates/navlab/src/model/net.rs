//! The navigation policy network: loss forward/backward and inference.

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{ActionId, Panorama, ALL_ACTIONS, VIEW_SIZE};
use crate::nn::{Mat, Mlp2, Mlp2Cache};

use super::encoder::{Encoder, EncoderCache};
use super::{
    action_one_hot, kl_gaussians, sample_latent, write_image, GaussianLatent, LossBreakdown,
    LossWeights, ModelConfig, ModelError, TrainBatch, Variant, COLLISION_MASK_THRESHOLD,
    LOGVAR_CLAMP, TAU_STOP,
};

/// Inference mode: deterministic uses the posterior mean, stochastic draws
/// one reparameterized latent sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Deterministic,
    Stochastic,
}

/// Per-step outputs of the policy.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub action_logits: Vec<f64>,
    pub collision_probs: [f64; 6],
    pub stop_prob: f64,
    /// Imagined next-front-view feature (absent for the NoVg variant).
    pub neo_feature: Option<Vec<f64>>,
    pub posterior: Option<GaussianLatent>,
}

pub struct NavModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    posterior: Option<Mlp2>,
    prior: Option<Mlp2>,
    decoder: Option<Mlp2>,
    control: Mlp2,
    cpm: Mlp2,
    tcm: Option<Mlp2>,
}

/// Caches of one loss forward pass, consumed by [`NavModel::backward`].
pub struct ForwardCaches {
    enc: EncoderCache,
    next: Mat,
    vg: Option<VgCaches>,
    ctrl_cache: Mlp2Cache,
    logits: Mat,
    cpm_cache: Mlp2Cache,
    cpm_logits: Mat,
    tcm: Option<(Mlp2Cache, Mat)>,
}

struct VgCaches {
    post_cache: Mlp2Cache,
    post_raw: Mat,
    q: GaussianLatent,
    prior_cache: Mlp2Cache,
    prior_raw: Mat,
    p: GaussianLatent,
    noise: Mat,
    dec_cache: Mlp2Cache,
    neo: Mat,
}

impl NavModel {
    pub fn new(config: ModelConfig) -> NavModel {
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let f = config.feature_dim();
        let fused = config.fused_dim();
        let l = config.latent_dim;
        let h = config.hidden_dim;
        let encoder = Encoder::new(&mut rng, &config.channels);
        let has_vg = config.variant != Variant::NoVg;
        let posterior = has_vg.then(|| Mlp2::new(&mut rng, fused + f, h, 2 * l));
        let prior = has_vg.then(|| Mlp2::new(&mut rng, fused + 7, h, 2 * l));
        let decoder = has_vg.then(|| Mlp2::new(&mut rng, l, f, f));
        let ctrl_in = if has_vg { 3 * f + 7 } else { fused + f };
        let control = Mlp2::new(&mut rng, ctrl_in, h, config.n_logits());
        let cpm = Mlp2::new(&mut rng, fused, h, 6);
        let tcm =
            (config.variant != Variant::NoTc).then(|| Mlp2::new(&mut rng, fused + f, h, 1));
        NavModel {
            config,
            encoder,
            posterior,
            prior,
            decoder,
            control,
            cpm,
            tcm,
        }
    }

    /// Encode one normalized depth view (evaluation path).
    pub fn encode_view(&self, view: &Array2<f32>) -> Array1<f64> {
        let mut images = Array4::zeros((1, 1, VIEW_SIZE, VIEW_SIZE));
        write_image(&mut images, 0, view);
        let (feats, _) = self.encoder.forward(&images);
        feats.row(0).to_owned()
    }

    /// Concatenate four view features in camera order into the fused vector.
    pub fn fuse_panorama(features: &[Array1<f64>; 4]) -> Array1<f64> {
        let views: Vec<_> = features.iter().map(|f| f.view()).collect();
        concatenate(Axis(0), &views).unwrap()
    }

    /// Posterior head q(z | x_t, g) on a batch of (fused, target) features.
    pub fn posterior(&self, fused: &Mat, target_feat: &Mat) -> GaussianLatent {
        let head = self.posterior.as_ref().expect("variant has no posterior");
        let input = concatenate![Axis(1), fused.view(), target_feat.view()];
        let (raw, _) = head.forward(&input);
        split_gaussian(&raw)
    }

    /// Prior head p(z | x_t, a_t) conditioned on the ground-truth action.
    pub fn prior(&self, fused: &Mat, action_onehot: &Mat) -> GaussianLatent {
        let head = self.prior.as_ref().expect("variant has no prior");
        let input = concatenate![Axis(1), fused.view(), action_onehot.view()];
        let (raw, _) = head.forward(&input);
        split_gaussian(&raw)
    }

    /// Decode a latent sample into the imagined next-front-view feature.
    pub fn decode_neo(&self, z: &Mat) -> Mat {
        let dec = self.decoder.as_ref().expect("variant has no decoder");
        dec.forward(z).0
    }

    /// Controller logits from (front, imagined next, previous action).
    pub fn control(&self, front: &Mat, neo: &Mat, prev_onehot: &Mat) -> Mat {
        let diff = front - neo;
        let input = concatenate![Axis(1), front.view(), neo.view(), diff.view(), prev_onehot.view()];
        self.control.forward(&input).0
    }

    /// Per-motion-action collision probabilities.
    pub fn cpm_head(&self, fused: &Mat) -> Mat {
        self.cpm.forward(fused).0.mapv(sigmoid)
    }

    /// Probability that the agent has reached the target.
    pub fn tcm_head(&self, fused: &Mat, target_feat: &Mat) -> Mat {
        let head = self.tcm.as_ref().expect("variant has no tcm head");
        let input = concatenate![Axis(1), fused.view(), target_feat.view()];
        head.forward(&input).0.mapv(sigmoid)
    }

    /// One spectral-norm power-iteration step on the encoder (training mode).
    pub fn power_iterate(&mut self) {
        self.encoder.power_iterate();
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    /// Forward pass of the combined objective. Deterministic: does not
    /// mutate the model; `noise` supplies the reparameterization draws
    /// ((B, latent_dim), ignored by NoVg).
    pub fn forward(
        &self,
        batch: &TrainBatch,
        noise: &Mat,
        weights: &LossWeights,
    ) -> Result<(LossBreakdown, ForwardCaches), ModelError> {
        self.forward_inner(batch, noise, weights, None)
    }

    /// Like [`NavModel::forward`] but with the reconstruction target pinned
    /// to a caller-supplied feature matrix instead of the live encoder
    /// output. The target is a stop-gradient in the objective, so finite
    /// differencing only matches the analytic gradients when the target is
    /// held fixed across perturbations.
    pub fn loss_with_frozen_target(
        &self,
        batch: &TrainBatch,
        noise: &Mat,
        weights: &LossWeights,
        target: &Mat,
    ) -> Result<LossBreakdown, ModelError> {
        self.forward_inner(batch, noise, weights, Some(target))
            .map(|(l, _)| l)
    }

    /// Encoder features of the reconstruction-target rows (the detached
    /// next-front views), for use with [`NavModel::loss_with_frozen_target`].
    pub fn recon_target_features(&self, batch: &TrainBatch) -> Mat {
        let b = batch.len();
        let (feats, _) = self.encoder.forward(&batch.images);
        feats.slice(s![4 * b..5 * b, ..]).to_owned()
    }

    fn forward_inner(
        &self,
        batch: &TrainBatch,
        noise: &Mat,
        weights: &LossWeights,
        frozen_target: Option<&Mat>,
    ) -> Result<(LossBreakdown, ForwardCaches), ModelError> {
        batch.validate()?;
        let b = batch.len();
        let f = self.config.feature_dim();
        let (feats, enc) = self.encoder.forward(&batch.images);
        let fused = feats
            .slice(s![0..4 * b, ..])
            .to_owned()
            .into_shape_with_order((b, 4 * f))
            .unwrap();
        let next = match frozen_target {
            Some(t) => t.clone(),
            None => feats.slice(s![4 * b..5 * b, ..]).to_owned(),
        };
        let tgt = feats.slice(s![5 * b..6 * b, ..]).to_owned();

        let gt_onehot = Mat::from_shape_fn((b, 7), |(i, j)| {
            action_one_hot(Some(batch.actions[i]))[j]
        });
        let prev_onehot =
            Mat::from_shape_fn((b, 7), |(i, j)| action_one_hot(batch.prev_actions[i])[j]);

        let (vg, ctrl_input) = if self.config.variant == Variant::NoVg {
            let input = concatenate![Axis(1), fused.view(), tgt.view()];
            (None, input)
        } else {
            let post_in = concatenate![Axis(1), fused.view(), tgt.view()];
            let (post_raw, post_cache) = self.posterior.as_ref().unwrap().forward(&post_in);
            let q = split_gaussian(&post_raw);
            let prior_in = concatenate![Axis(1), fused.view(), gt_onehot.view()];
            let (prior_raw, prior_cache) = self.prior.as_ref().unwrap().forward(&prior_in);
            let p = split_gaussian(&prior_raw);
            let z = sample_latent(&q, noise);
            let (neo, dec_cache) = self.decoder.as_ref().unwrap().forward(&z);
            let front = fused.slice(s![.., 0..f]).to_owned();
            let diff = &front - &neo;
            let input = concatenate![
                Axis(1),
                front.view(),
                neo.view(),
                diff.view(),
                prev_onehot.view()
            ];
            (
                Some(VgCaches {
                    post_cache,
                    post_raw,
                    q,
                    prior_cache,
                    prior_raw,
                    p,
                    noise: noise.clone(),
                    dec_cache,
                    neo,
                }),
                input,
            )
        };

        let (logits, ctrl_cache) = self.control.forward(&ctrl_input);
        let (cpm_logits, cpm_cache) = self.cpm.forward(&fused);
        let tcm = self.tcm.as_ref().map(|head| {
            let input = concatenate![Axis(1), fused.view(), tgt.view()];
            let (logit, cache) = head.forward(&input);
            (cache, logit)
        });

        // --- loss terms ---
        let (recon, kl) = match &vg {
            Some(vg) => {
                let recon = (&vg.neo - &next).mapv(|v| v * v).sum() / (b * f) as f64;
                let kl = kl_gaussians(&vg.q, &vg.p).sum() / b as f64;
                (recon, kl)
            }
            None => (0.0, 0.0),
        };
        let action_ce = self.action_cross_entropy(batch, &logits);
        let cpm_loss = bce_with_logits_mean(&cpm_logits, &collision_targets(batch));
        let tcm_loss = tcm
            .as_ref()
            .map(|(_, logit)| bce_with_logits_mean(logit, &stop_targets(batch)))
            .unwrap_or(0.0);

        let breakdown = LossBreakdown {
            recon,
            kl,
            action_ce,
            cpm: cpm_loss,
            tcm: tcm_loss,
            total: weights.alpha * recon
                + weights.beta * kl
                + weights.gamma * action_ce
                + weights.zeta * cpm_loss
                + weights.eta * tcm_loss,
        };
        for (term, v) in [
            ("recon", recon),
            ("kl", kl),
            ("action_ce", action_ce),
            ("cpm", cpm_loss),
            ("tcm", tcm_loss),
        ] {
            if !v.is_finite() {
                return Err(ModelError::NonFinite { term });
            }
        }
        Ok((
            breakdown,
            ForwardCaches {
                enc,
                next,
                vg,
                ctrl_cache,
                logits,
                cpm_cache,
                cpm_logits,
                tcm,
            },
        ))
    }

    /// Mean cross-entropy of the controller logits against ground-truth
    /// actions. Stop steps are excluded unless the controller owns stop.
    fn action_cross_entropy(&self, batch: &TrainBatch, logits: &Mat) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &a) in batch.actions.iter().enumerate() {
            if a == ActionId::Stop && self.config.variant != Variant::NoTc {
                continue;
            }
            let row = logits.row(i);
            total += log_sum_exp(row.as_slice().unwrap()) - row[a.index()];
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }

    /// Backward pass for the weighted total of the most recent forward.
    /// Accumulates gradients into the parameter buffers.
    pub fn backward(&mut self, batch: &TrainBatch, caches: &ForwardCaches, weights: &LossWeights) {
        let b = batch.len();
        let f = self.config.feature_dim();
        let mut dfused = Mat::zeros((b, 4 * f));
        let mut dtgt = Mat::zeros((b, f));

        // Target checking head.
        if let (Some(head), Some((cache, logit))) = (&mut self.tcm, &caches.tcm) {
            let mut dlogit = logit.mapv(sigmoid);
            dlogit -= &stop_targets(batch);
            dlogit *= weights.eta / b as f64;
            let din = head.backward(cache, &dlogit);
            dfused += &din.slice(s![.., 0..4 * f]);
            dtgt += &din.slice(s![.., 4 * f..]);
        }

        // Collision prediction head.
        {
            let targets = collision_targets(batch);
            let mut dcpm = caches.cpm_logits.mapv(sigmoid);
            dcpm -= &targets;
            dcpm *= weights.zeta / (b * 6) as f64;
            let din = self.cpm.backward(&caches.cpm_cache, &dcpm);
            dfused += &din;
        }

        // Controller cross-entropy.
        let dlogits = {
            let n = self.config.n_logits();
            let include: Vec<bool> = batch
                .actions
                .iter()
                .map(|&a| a != ActionId::Stop || self.config.variant == Variant::NoTc)
                .collect();
            let count = include.iter().filter(|&&x| x).count().max(1);
            let mut d = Mat::zeros((b, n));
            for i in 0..b {
                if !include[i] {
                    continue;
                }
                let row = caches.logits.row(i);
                let sm = softmax(row.as_slice().unwrap());
                for j in 0..n {
                    d[(i, j)] = weights.gamma * sm[j] / count as f64;
                }
                d[(i, batch.actions[i].index())] -= weights.gamma / count as f64;
            }
            d
        };
        let dctrl_in = self.control.backward(&caches.ctrl_cache, &dlogits);

        match &caches.vg {
            None => {
                dfused += &dctrl_in.slice(s![.., 0..4 * f]);
                dtgt += &dctrl_in.slice(s![.., 4 * f..]);
            }
            Some(vg) => {
                let dfront_a = dctrl_in.slice(s![.., 0..f]);
                let dneo_ctrl = dctrl_in.slice(s![.., f..2 * f]);
                let ddiff = dctrl_in.slice(s![.., 2 * f..3 * f]);
                let mut dfront = dfront_a.to_owned();
                dfront += &ddiff;
                let mut dneo = dneo_ctrl.to_owned();
                dneo -= &ddiff;

                // Reconstruction term (target feature detached).
                dneo += &((&vg.neo - &caches.next) * (2.0 * weights.alpha / (b * f) as f64));

                // Decoder -> latent sample.
                let dz = self.decoder.as_mut().unwrap().backward(&vg.dec_cache, &dneo);
                let mut dmean_q = dz.clone();
                let mut dlv_q =
                    &dz * &vg.noise * &vg.q.log_variance.mapv(|lv| 0.5 * (0.5 * lv).exp());

                // KL term.
                let kw = weights.beta / b as f64;
                let exp_neg_lp = vg.p.log_variance.mapv(|lp| (-lp).exp());
                let dm = &vg.q.mean - &vg.p.mean;
                let ratio =
                    (&vg.q.log_variance - &vg.p.log_variance).mapv(f64::exp);
                dmean_q += &(&dm * &exp_neg_lp * kw);
                let dmean_p = -(&dm * &exp_neg_lp * kw);
                dlv_q += &(ratio.mapv(|r| 0.5 * (r - 1.0)) * kw);
                let dlv_p = (ratio.mapv(|r| 0.5 * (1.0 - r))
                    - &(&dm * &dm * &exp_neg_lp).mapv(|v| 0.5 * v))
                    * kw;

                // Through the clamp and the two Gaussian heads.
                let dpost = merge_gaussian_grad(&vg.post_raw, &dmean_q, &dlv_q);
                let din = self
                    .posterior
                    .as_mut()
                    .unwrap()
                    .backward(&vg.post_cache, &dpost);
                dfused += &din.slice(s![.., 0..4 * f]);
                dtgt += &din.slice(s![.., 4 * f..]);

                let dprior = merge_gaussian_grad(&vg.prior_raw, &dmean_p, &dlv_p);
                let din = self
                    .prior
                    .as_mut()
                    .unwrap()
                    .backward(&vg.prior_cache, &dprior);
                dfused += &din.slice(s![.., 0..4 * f]);
                // action one-hot part has no parameters upstream

                let mut front_cols = dfused.slice_mut(s![.., 0..f]);
                front_cols += &dfront;
            }
        }

        // Assemble per-image feature gradients: panorama views get the
        // reshaped fused gradient, the recon target is detached, the target
        // view collects the posterior/tcm contributions.
        let mut dfeats = Mat::zeros((6 * b, f));
        let dviews = dfused.into_shape_with_order((4 * b, f)).unwrap();
        dfeats.slice_mut(s![0..4 * b, ..]).assign(&dviews);
        dfeats.slice_mut(s![5 * b..6 * b, ..]).assign(&dtgt);
        self.encoder.backward(&caches.enc, &dfeats);
    }

    /// Loss without gradient accumulation (used by finite differencing).
    pub fn loss_only(
        &self,
        batch: &TrainBatch,
        noise: &Mat,
        weights: &LossWeights,
    ) -> Result<LossBreakdown, ModelError> {
        self.forward(batch, noise, weights).map(|(l, _)| l)
    }

    /// Forward + backward in one call.
    pub fn loss_and_grad(
        &mut self,
        batch: &TrainBatch,
        noise: &Mat,
        weights: &LossWeights,
    ) -> Result<LossBreakdown, ModelError> {
        let (loss, caches) = self.forward(batch, noise, weights)?;
        self.backward(batch, &caches, weights);
        Ok(loss)
    }

    /// Single-step inference.
    pub fn policy_output(
        &self,
        panorama: &Panorama,
        target_view: &Array2<f32>,
        prev_action: Option<ActionId>,
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> PolicyOutput {
        let f = self.config.feature_dim();
        let mut images = Array4::zeros((5, 1, VIEW_SIZE, VIEW_SIZE));
        for (v, view) in panorama.views.iter().enumerate() {
            write_image(&mut images, v, view);
        }
        write_image(&mut images, 4, target_view);
        let (feats, _) = self.encoder.forward(&images);
        let fused = feats
            .slice(s![0..4, ..])
            .to_owned()
            .into_shape_with_order((1, 4 * f))
            .unwrap();
        let tgt = feats.slice(s![4..5, ..]).to_owned();
        let prev = Mat::from_shape_fn((1, 7), |(_, j)| action_one_hot(prev_action)[j]);

        let (logits, neo_feature, posterior) = if self.config.variant == Variant::NoVg {
            let input = concatenate![Axis(1), fused.view(), tgt.view()];
            (self.control.forward(&input).0, None, None)
        } else {
            let q = self.posterior(&fused, &tgt);
            let z = match mode {
                ActMode::Deterministic => q.mean.clone(),
                ActMode::Stochastic => {
                    let noise = crate::nn::standard_normal(rng, (1, self.config.latent_dim));
                    sample_latent(&q, &noise)
                }
            };
            let neo = self.decode_neo(&z);
            let front = fused.slice(s![.., 0..f]).to_owned();
            let logits = self.control(&front, &neo, &prev);
            (logits, Some(neo.row(0).to_vec()), Some(q))
        };

        let collision = self.cpm_head(&fused);
        let mut collision_probs = [0.0; 6];
        collision_probs.copy_from_slice(collision.row(0).as_slice().unwrap());

        let stop_prob = match &self.tcm {
            Some(_) => self.tcm_head(&fused, &tgt)[(0, 0)],
            None => softmax(logits.row(0).as_slice().unwrap())[ActionId::Stop.index()],
        };

        PolicyOutput {
            action_logits: logits.row(0).to_vec(),
            collision_probs,
            stop_prob,
            neo_feature,
            posterior,
        }
    }

    /// Pick an action: the target checking head owns `Stop` (threshold 0.5);
    /// otherwise the controller argmax decides among the motion actions.
    pub fn act(
        &self,
        panorama: &Panorama,
        target_view: &Array2<f32>,
        prev_action: Option<ActionId>,
        mode: ActMode,
        rng: &mut ChaCha8Rng,
    ) -> ActionId {
        let out = self.policy_output(panorama, target_view, prev_action, mode, rng);
        self.select_action(&out)
    }

    pub fn select_action(&self, out: &PolicyOutput) -> ActionId {
        if self.config.variant != Variant::NoTc && out.stop_prob > TAU_STOP {
            return ActionId::Stop;
        }
        let mut best: Option<(usize, f64)> = None;
        for (j, &logit) in out.action_logits.iter().enumerate() {
            if self.config.collision_masking
                && j < 6
                && out.collision_probs[j] > COLLISION_MASK_THRESHOLD
            {
                continue;
            }
            if best.map(|(_, v)| logit > v).unwrap_or(true) {
                best = Some((j, logit));
            }
        }
        // All actions masked: fall back to the unmasked argmax.
        let idx = best
            .map(|(j, _)| j)
            .unwrap_or_else(|| arg_max(&out.action_logits));
        ALL_ACTIONS[idx]
    }

    /// Visit every trainable tensor as (name, values, grads) flat slices,
    /// in a fixed deterministic order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        for (i, conv) in self.encoder.convs.iter_mut().enumerate() {
            f(
                &format!("encoder.conv{}.w", i + 1),
                conv.w.as_slice_mut().unwrap(),
                conv.gw.as_slice_mut().unwrap(),
            );
            f(
                &format!("encoder.conv{}.b", i + 1),
                conv.b.as_slice_mut().unwrap(),
                conv.gb.as_slice_mut().unwrap(),
            );
        }
        let mut heads: Vec<(&str, &mut Mlp2)> = Vec::new();
        if let Some(h) = self.posterior.as_mut() {
            heads.push(("posterior", h));
        }
        if let Some(h) = self.prior.as_mut() {
            heads.push(("prior", h));
        }
        if let Some(h) = self.decoder.as_mut() {
            heads.push(("decoder", h));
        }
        heads.push(("control", &mut self.control));
        heads.push(("cpm", &mut self.cpm));
        if let Some(h) = self.tcm.as_mut() {
            heads.push(("tcm", h));
        }
        for (name, head) in heads {
            for (li, lin) in [(1, &mut head.l1), (2, &mut head.l2)] {
                f(
                    &format!("{name}.l{li}.w"),
                    lin.w.as_slice_mut().unwrap(),
                    lin.gw.as_slice_mut().unwrap(),
                );
                f(
                    &format!("{name}.l{li}.b"),
                    lin.b.as_slice_mut().unwrap(),
                    lin.gb.as_slice_mut().unwrap(),
                );
            }
        }
    }

    /// Visit non-trainable state (spectral-norm power-iteration vectors).
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, conv) in self.encoder.convs.iter_mut().enumerate() {
            if let Some(sn) = conv.sn.as_mut() {
                f(
                    &format!("encoder.conv{}.sn.u", i + 1),
                    sn.u.as_slice_mut().unwrap(),
                );
                f(
                    &format!("encoder.conv{}.sn.v", i + 1),
                    sn.v.as_slice_mut().unwrap(),
                );
            }
        }
    }

    pub fn grad_norm(&mut self) -> f64 {
        let mut acc = 0.0;
        self.visit_params(&mut |_, _, g| {
            acc += g.iter().map(|v| v * v).sum::<f64>();
        });
        acc.sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        self.visit_params(&mut |_, _, g| {
            for v in g.iter_mut() {
                *v *= s;
            }
        });
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, v, _| n += v.len());
        n
    }
}

/// Split a raw (B, 2L) head output into mean and clamped log-variance.
fn split_gaussian(raw: &Mat) -> GaussianLatent {
    let l = raw.ncols() / 2;
    let mean = raw.slice(s![.., 0..l]).to_owned();
    let log_variance = raw
        .slice(s![.., l..])
        .mapv(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    GaussianLatent { mean, log_variance }
}

/// Merge mean/log-variance gradients back into the raw head layout, zeroing
/// gradients where the clamp is active.
fn merge_gaussian_grad(raw: &Mat, dmean: &Mat, dlv: &Mat) -> Mat {
    let l = dmean.ncols();
    let mut d = Mat::zeros(raw.dim());
    d.slice_mut(s![.., 0..l]).assign(dmean);
    let mut lv_part = d.slice_mut(s![.., l..]);
    lv_part.assign(dlv);
    lv_part.zip_mut_with(&raw.slice(s![.., l..]), |g, &r| {
        if r.abs() > LOGVAR_CLAMP {
            *g = 0.0;
        }
    });
    d
}

fn collision_targets(batch: &TrainBatch) -> Mat {
    Mat::from_shape_fn((batch.len(), 6), |(i, j)| {
        if batch.collision_labels[i][j] {
            1.0
        } else {
            0.0
        }
    })
}

fn stop_targets(batch: &TrainBatch) -> Mat {
    Mat::from_shape_fn((batch.len(), 1), |(i, _)| {
        if batch.stop_labels[i] {
            1.0
        } else {
            0.0
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable mean binary cross-entropy on logits.
fn bce_with_logits_mean(logits: &Mat, targets: &Mat) -> f64 {
    debug_assert_eq!(logits.dim(), targets.dim());
    let mut total = 0.0;
    for (&s, &y) in logits.iter().zip(targets.iter()) {
        total += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
    }
    total / logits.len() as f64
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn arg_max(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal;
    use rand::Rng;
    use std::collections::HashMap;

    fn synthetic_batch(rng: &mut ChaCha8Rng, b: usize) -> TrainBatch {
        let images = Array4::from_shape_fn((6 * b, 1, VIEW_SIZE, VIEW_SIZE), |_| {
            rng.gen_range(0.0..1.0f64)
        });
        let motions = [
            ActionId::MoveForward,
            ActionId::MoveLeft,
            ActionId::RotateCw,
            ActionId::MoveBack,
            ActionId::RotateCcw,
            ActionId::MoveRight,
        ];
        let actions: Vec<ActionId> = (0..b)
            .map(|i| {
                if i == b - 1 {
                    ActionId::Stop
                } else {
                    motions[i % motions.len()]
                }
            })
            .collect();
        let prev_actions: Vec<Option<ActionId>> = (0..b)
            .map(|i| if i == 0 { None } else { Some(actions[i - 1]) })
            .collect();
        let collision_labels = (0..b)
            .map(|_| {
                let mut l = [false; 6];
                for v in l.iter_mut() {
                    *v = rng.gen_bool(0.3);
                }
                l
            })
            .collect();
        let stop_labels = actions.iter().map(|&a| a == ActionId::Stop).collect();
        TrainBatch {
            images,
            actions,
            prev_actions,
            collision_labels,
            stop_labels,
        }
    }

    fn tiny_model(variant: Variant, seed: u64) -> NavModel {
        NavModel::new(ModelConfig::tiny(variant, seed))
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = synthetic_batch(&mut rng, 3);
        let model = tiny_model(Variant::Full, 11);
        let noise = standard_normal(&mut rng, (3, model.config.latent_dim));
        let w = LossWeights::default();
        let a = model.loss_only(&batch, &noise, &w).unwrap();
        let b = model.loss_only(&batch, &noise, &w).unwrap();
        assert!(a.is_finite());
        assert_eq!(a.total, b.total);
        assert!(a.recon > 0.0 && a.kl >= 0.0 && a.action_ce > 0.0);
    }

    #[test]
    fn uniform_logits_give_ln6_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = synthetic_batch(&mut rng, 4);
        let mut model = tiny_model(Variant::Full, 5);
        model.visit_params(&mut |name, v, _| {
            if name.starts_with("control.l2") {
                v.fill(0.0);
            }
        });
        let noise = Mat::zeros((4, model.config.latent_dim));
        let loss = model.loss_only(&batch, &noise, &LossWeights::default()).unwrap();
        assert!(
            (loss.action_ce - 6.0f64.ln()).abs() < 1e-12,
            "ce {}",
            loss.action_ce
        );
    }

    #[test]
    fn variant_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = synthetic_batch(&mut rng, 2);
        let w = LossWeights::default();

        let novg = tiny_model(Variant::NoVg, 1);
        let noise = Mat::zeros((2, novg.config.latent_dim));
        let l = novg.loss_only(&batch, &noise, &w).unwrap();
        assert_eq!(l.recon, 0.0);
        assert_eq!(l.kl, 0.0);
        assert!(l.tcm > 0.0);

        let notc = tiny_model(Variant::NoTc, 1);
        let l = notc.loss_only(&batch, &noise, &w).unwrap();
        assert_eq!(l.tcm, 0.0);
        assert_eq!(notc.config.n_logits(), 7);
    }

    #[test]
    fn stop_threshold_controls_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = tiny_model(Variant::Full, 4);
        // Force the target-checking logit strongly positive.
        model.visit_params(&mut |name, v, _| {
            if name == "tcm.l2.w" {
                v.fill(0.0);
            }
            if name == "tcm.l2.b" {
                v.fill(50.0);
            }
        });
        let view = Array2::from_elem((VIEW_SIZE, VIEW_SIZE), 5.0f32);
        let pano = Panorama {
            views: [view.clone(), view.clone(), view.clone(), view.clone()],
        };
        let a = model.act(&pano, &view, None, ActMode::Deterministic, &mut rng);
        assert_eq!(a, ActionId::Stop);
        // And strongly negative: never stop.
        model.visit_params(&mut |name, v, _| {
            if name == "tcm.l2.b" {
                v.fill(-50.0);
            }
        });
        let a = model.act(&pano, &view, None, ActMode::Deterministic, &mut rng);
        assert_ne!(a, ActionId::Stop);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let batch = synthetic_batch(&mut rng, 2);
        let mut model = tiny_model(Variant::Full, 13);
        // Warm up the spectral-norm estimates as the training loop would;
        // a random initial (u, v) can make sigma arbitrarily small, which
        // blows up the effective weights and ruins finite differencing.
        for _ in 0..50 {
            model.power_iterate();
        }
        let noise = standard_normal(&mut rng, (2, model.config.latent_dim));
        let w = LossWeights::default();
        // The reconstruction target is a stop-gradient; pin it so finite
        // differences measure the same objective the backward pass computes.
        let frozen = model.recon_target_features(&batch);

        model.zero_grads();
        model.loss_and_grad(&batch, &noise, &w).unwrap();
        let mut analytic: HashMap<String, Vec<f64>> = HashMap::new();
        let mut sizes: Vec<(String, usize)> = Vec::new();
        model.visit_params(&mut |name, v, g| {
            analytic.insert(name.to_string(), g.to_vec());
            sizes.push((name.to_string(), v.len()));
        });

        // Step size balances leaky-ReLU kink error (shrinks with eps)
        // against f64 roundoff in the central difference (grows as 1/eps).
        let eps = 1e-6;
        let mut probe_rng = ChaCha8Rng::seed_from_u64(99);
        for (name, len) in &sizes {
            for _ in 0..4 {
                let idx = probe_rng.gen_range(0..*len);
                let mut eval_at = |delta: f64| {
                    model.visit_params(&mut |n, v, _| {
                        if n == name {
                            v[idx] += delta;
                        }
                    });
                    let l = model
                        .loss_with_frozen_target(&batch, &noise, &w, &frozen)
                        .unwrap()
                        .total;
                    model.visit_params(&mut |n, v, _| {
                        if n == name {
                            v[idx] -= delta;
                        }
                    });
                    l
                };
                let fd = (eval_at(eps) - eval_at(-eps)) / (2.0 * eps);
                let an = analytic[name][idx];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{idx}]: fd {fd} analytic {an}"
                );
            }
        }
    }
}
