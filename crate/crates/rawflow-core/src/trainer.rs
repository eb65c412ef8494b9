//! Three-stage optimization: (1) dual-domain autoencoder with alternating
//! branch updates, (2) flow matching over frozen-encoder latents, (3) end-to-
//! end fine-tuning through the sampling chain with truncated backprop.
//! Every random draw derives from the run seed, so identical config+seed
//! replays byte-identically.

use std::io::Write;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{Dataset, LoadedPair};
use crate::dlae::{
    self, feature_alignment_loss_nodes, raw4_to_rgb3_node, reconstruction_loss_nodes,
    AlignmentSet, Dlae, DlaeSpec, Latent,
};
use crate::dlfm::{self, Dlfm, GuidanceMode, Variant};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::nn::params::ParamStore;
use crate::nn::phi::PhiNet;
use crate::nn::tape::{NodeId, Tape};
use crate::rng;

pub struct Models {
    pub store: ParamStore,
    pub dlae: Dlae,
    pub dlfm: Dlfm,
    pub phi: PhiNet,
}

/// Build all networks in a fixed registration order from the run seed.
pub fn build_models(cfg: &RunConfig) -> Result<Models> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(cfg.seed, "init", 0);
    let dlae = Dlae::new(
        &mut store,
        DlaeSpec {
            latent_channels: cfg.model.latent_channels,
            base_width: cfg.model.dlae_base_width,
            zero_init_decoders: cfg.model.zero_init_decoders,
        },
        &mut init_rng,
    );
    let dlfm = Dlfm::new(
        &mut store,
        cfg.model.velocity_unet_spec(),
        cfg.model.context_base_width,
        &mut init_rng,
    )?;
    let phi = PhiNet::new(cfg.model.phi_seed);
    Ok(Models {
        store,
        dlae,
        dlfm,
        phi,
    })
}

pub fn load_models(cfg: &RunConfig, ckpt_dir: &Path) -> Result<Models> {
    let mut models = build_models(cfg)?;
    checkpoint::restore_into(ckpt_dir, &mut models.store)?;
    Ok(models)
}

/// Plain-text loss log: one `step,loss_name,value` row per observation.
pub struct LossLog {
    file: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        writeln!(file, "step,loss_name,value").map_err(|e| Error::io(path, e))?;
        Ok(LossLog { file })
    }

    pub fn log(&mut self, step: u64, name: &str, value: f64) {
        let _ = writeln!(self.file, "{step},{name},{value}");
    }

    pub fn flush(&mut self) {
        let _ = self.file.flush();
    }
}

/// Reduce-on-plateau: halve the rate only after `patience` consecutive
/// non-improving validations.
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Returns true when `val` improves on the best seen so far.
    pub fn observe(&mut self, val: f64) -> bool {
        if val < self.best {
            self.best = val;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad = 0;
            }
            false
        }
    }
}

fn stack_images<'a>(items: impl ExactSizeIterator<Item = &'a Array3<f64>>) -> Array4<f64> {
    let views: Vec<_> = items.map(|a| a.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).expect("batch stack")
}

fn epoch_batches(n: usize, batch: usize, seed: u64, label: &str, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, label, epoch);
    order.shuffle(&mut r);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

fn check_finite(loss: f64, what: &str, ckpt_hint: &Path) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "{what} became non-finite; last good checkpoint at {}",
            ckpt_hint.display()
        )))
    }
}

// ---- Stage 1: dual-domain autoencoder ----

struct RawStepLosses {
    rec: f64,
    fea: f64,
    total: NodeId,
}

fn stage1_rgb_loss(models: &Models, tape: &mut Tape, x: NodeId, lambda1: f64) -> Result<NodeId> {
    let (z, _f) = models.dlae.encode_rgb_nodes(tape, &models.store, x)?;
    let recon = models.dlae.decode_rgb_nodes(tape, &models.store, z)?;
    reconstruction_loss_nodes(tape, &models.phi, recon, x, lambda1)
}

fn stage1_raw_loss(
    models: &Models,
    tape: &mut Tape,
    rgb: NodeId,
    raw: NodeId,
    lambda1: f64,
    lambda2: f64,
) -> Result<RawStepLosses> {
    // RGB branch is the stable reference: its features are detached so
    // neither the alignment term nor decoder injection updates it.
    let (_z_rgb, f_rgb) = models.dlae.encode_rgb_nodes(tape, &models.store, rgb)?;
    let f_rgb: Vec<NodeId> = f_rgb.into_iter().map(|f| tape.detach(f)).collect();

    let (z_raw, f_raw) = models.dlae.encode_raw_nodes(tape, &models.store, raw)?;
    let recon = models.dlae.decode_raw_nodes(tape, &models.store, z_raw, &f_rgb)?;
    let rec = reconstruction_loss_nodes(tape, &models.phi, recon, raw, lambda1)?;
    let fea = feature_alignment_loss_nodes(tape, &f_raw, &f_rgb, &AlignmentSet::default())?;
    let total = if lambda2 > 0.0 {
        let scaled = tape.scale(fea, lambda2);
        tape.add(rec, scaled)?
    } else {
        rec
    };
    Ok(RawStepLosses {
        rec: tape.scalar(rec),
        fea: tape.scalar(fea),
        total,
    })
}

fn stage1_val_loss(models: &Models, cfg: &RunConfig, pairs: &[&LoadedPair]) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        let mut tape = Tape::new();
        let x = tape.constant(dlae::batch_of_one(&p.rgb.data));
        let y = tape.constant(dlae::batch_of_one(&p.raw.data));
        let lr_rgb = stage1_rgb_loss(models, &mut tape, x, cfg.train.lambda1)?;
        let raw_losses = stage1_raw_loss(models, &mut tape, x, y, cfg.train.lambda1, cfg.train.lambda2)?;
        acc += tape.scalar(lr_rgb) + tape.scalar(raw_losses.total);
    }
    Ok(acc / pairs.len() as f64)
}

/// Alternating-branch autoencoder training; retains the best-validation
/// checkpoint under `out_dir/ckpt_best` and leaves the models loaded with it.
pub fn train_stage1(
    cfg: &RunConfig,
    data: &Dataset,
    models: &mut Models,
    out_dir: &Path,
) -> Result<f64> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = LossLog::create(&out_dir.join("stage1_loss.csv"))?;
    let best_dir = out_dir.join("ckpt_best");
    let train = data.train_pairs();
    let val = data.test_pairs();
    let mut sched = PlateauScheduler::new(
        cfg.train.lr,
        cfg.train.plateau_factor,
        cfg.train.plateau_patience,
        cfg.train.min_lr,
    );
    models.store.reset_optimizer();
    let mut step: u64 = 0;
    let mut best_val = f64::INFINITY;

    for epoch in 0..cfg.train.stage1_epochs {
        for batch in epoch_batches(train.len(), cfg.train.batch_size, cfg.seed, "shuffle1", epoch as u64) {
            let rgb = stack_images(batch.iter().map(|&i| &train[i].rgb.data));
            let raw = stack_images(batch.iter().map(|&i| &train[i].raw.data));

            // RGB branch first.
            let mut tape = Tape::new();
            let x = tape.constant(rgb.clone());
            let loss_rgb = stage1_rgb_loss(models, &mut tape, x, cfg.train.lambda1)?;
            tape.backward(loss_rgb, &mut models.store)?;
            if cfg.train.grad_clip > 0.0 {
                models.store.clip_grad_norm(cfg.train.grad_clip, |n| n.starts_with("dlae.rgb"));
            }
            models.store.adam_step(&cfg.train.adam, sched.lr, |n| n.starts_with("dlae.rgb"));
            models.store.zero_grads();
            let rgb_val = tape.scalar(loss_rgb);
            check_finite(rgb_val, "stage1 rgb loss", &best_dir)?;
            log.log(step, "rgb_rec", rgb_val);

            // Then the RAW branch, against the just-updated RGB reference.
            let mut tape = Tape::new();
            let x = tape.constant(rgb);
            let y = tape.constant(raw);
            let losses = stage1_raw_loss(models, &mut tape, x, y, cfg.train.lambda1, cfg.train.lambda2)?;
            tape.backward(losses.total, &mut models.store)?;
            if cfg.train.grad_clip > 0.0 {
                models.store.clip_grad_norm(cfg.train.grad_clip, |n| n.starts_with("dlae.raw"));
            }
            models.store.adam_step(&cfg.train.adam, sched.lr, |n| n.starts_with("dlae.raw"));
            models.store.zero_grads();
            let raw_total = tape.scalar(losses.total);
            check_finite(raw_total, "stage1 raw loss", &best_dir)?;
            log.log(step, "raw_rec", losses.rec);
            log.log(step, "raw_fea", losses.fea);
            log.log(step, "raw_total", raw_total);

            if step % cfg.train.finite_check_every as u64 == 0 && !models.store.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite parameters at step {step}; last good checkpoint at {}",
                    best_dir.display()
                )));
            }
            step += 1;
        }
        let val_loss = stage1_val_loss(models, cfg, &val)?;
        log.log(step, "val_total", val_loss);
        if sched.observe(val_loss) {
            best_val = val_loss;
            checkpoint::save_checkpoint(&best_dir, &models.store, &cfg.model, cfg.seed, "stage1")?;
        }
        log.log(step, "lr", sched.lr);
    }
    log.flush();
    checkpoint::restore_into(&best_dir, &mut models.store)?;
    checkpoint::save_checkpoint(&out_dir.join("ckpt_last"), &models.store, &cfg.model, cfg.seed, "stage1")?;
    Ok(best_val)
}

// ---- Stage 2: flow matching over frozen latents ----

struct LatentCache {
    z0: Vec<Latent>,
    z1: Vec<Latent>,
}

fn precompute_latents(models: &Models, pairs: &[&LoadedPair]) -> Result<LatentCache> {
    let mut z0 = Vec::with_capacity(pairs.len());
    let mut z1 = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (zr, _) = models.dlae.encode_rgb(&models.store, &p.rgb)?;
        let (zw, _) = models.dlae.encode_raw(&models.store, &p.raw)?;
        if zr.dim() != zw.dim() {
            return Err(Error::shape("paired latents disagree in shape"));
        }
        z0.push(zr);
        z1.push(zw);
    }
    Ok(LatentCache { z0, z1 })
}

#[allow(clippy::too_many_arguments)]
fn stage2_loss(
    models: &Models,
    tape: &mut Tape,
    cache: &LatentCache,
    pairs: &[&LoadedPair],
    batch: &[usize],
    ts: &[f64],
    eps: Option<&[Latent]>,
    mode: GuidanceMode,
) -> Result<NodeId> {
    let mut zt_items = Vec::with_capacity(batch.len());
    let mut v_items = Vec::with_capacity(batch.len());
    for (j, &i) in batch.iter().enumerate() {
        let (start, target) = match eps {
            None => (&cache.z0[i], &cache.z1[i]),
            Some(e) => (&e[j], &cache.z1[i]),
        };
        zt_items.push(dlfm::interpolate(start, &cache.z1[i], ts[j])?);
        v_items.push(dlfm::target_velocity(start, target)?);
    }
    let zt = tape.constant(stack_images(zt_items.iter()));
    let v_target = tape.constant(stack_images(v_items.iter()));
    let rgb = tape.constant(stack_images(batch.iter().map(|&i| &pairs[i].rgb.data)));
    let z0b = tape.constant(stack_images(batch.iter().map(|&i| &cache.z0[i])));
    let guidance = models.dlfm.guidance_nodes(tape, &models.store, mode, rgb, z0b)?;
    let v_hat = models
        .dlfm
        .velocity
        .forward(tape, &models.store, zt, Some(ts), Some(&guidance))?;
    tape.mse_loss(v_hat, v_target)
}

/// Flow-matching training with the autoencoder frozen. Latents are
/// precomputed once since the encoders cannot change.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &Dataset,
    models: &mut Models,
    out_dir: &Path,
) -> Result<f64> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = LossLog::create(&out_dir.join("stage2_loss.csv"))?;
    let best_dir = out_dir.join("ckpt_best");
    let train = data.train_pairs();
    let val = data.test_pairs();
    let mode = cfg.guidance;
    let stochastic = cfg.sampler.variant == Variant::Stochastic;

    let dlae_before = models.store.fingerprint_filtered(|n| n.starts_with("dlae."));
    let cache = precompute_latents(models, &train)?;
    let val_cache = precompute_latents(models, &val)?;
    let latent_dim = cache.z0[0].raw_dim();

    let mut sched = PlateauScheduler::new(
        cfg.train.lr,
        cfg.train.plateau_factor,
        cfg.train.plateau_patience,
        cfg.train.min_lr,
    );
    models.store.reset_optimizer();
    let mut step: u64 = 0;
    let mut best_val = f64::INFINITY;

    for epoch in 0..cfg.train.stage2_epochs {
        for batch in epoch_batches(train.len(), cfg.train.batch_size, cfg.seed, "shuffle2", epoch as u64) {
            let mut trng = rng::stream(cfg.seed, "t", step);
            let ts: Vec<f64> = (0..batch.len()).map(|_| trng.gen::<f64>()).collect();
            let eps = if stochastic {
                let mut erng = rng::stream(cfg.seed, "eps", step);
                Some(
                    (0..batch.len())
                        .map(|_| sample_normal(&mut erng, latent_dim.clone()))
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let mut tape = Tape::new();
            let loss = stage2_loss(models, &mut tape, &cache, &train, &batch, &ts, eps.as_deref(), mode)?;
            tape.backward(loss, &mut models.store)?;
            if cfg.train.grad_clip > 0.0 {
                models.store.clip_grad_norm(cfg.train.grad_clip, |n| n.starts_with("dlfm."));
            }
            models.store.adam_step(&cfg.train.adam, sched.lr, |n| n.starts_with("dlfm."));
            models.store.zero_grads();
            let lv = tape.scalar(loss);
            check_finite(lv, "stage2 flow loss", &best_dir)?;
            log.log(step, "flow", lv);
            step += 1;
        }
        let val_loss = stage2_val_loss(models, cfg, &val, &val_cache, mode, stochastic)?;
        log.log(step, "val_flow", val_loss);
        if sched.observe(val_loss) {
            best_val = val_loss;
            checkpoint::save_checkpoint(&best_dir, &models.store, &cfg.model, cfg.seed, "stage2")?;
        }
        log.log(step, "lr", sched.lr);
    }
    log.flush();
    checkpoint::restore_into(&best_dir, &mut models.store)?;
    checkpoint::save_checkpoint(&out_dir.join("ckpt_last"), &models.store, &cfg.model, cfg.seed, "stage2")?;

    let dlae_after = models.store.fingerprint_filtered(|n| n.starts_with("dlae."));
    if dlae_before != dlae_after {
        return Err(Error::numeric("frozen autoencoder weights changed during stage 2"));
    }
    Ok(best_val)
}

fn sample_normal(r: &mut impl Rng, dim: ndarray::Ix3) -> Latent {
    let mut a = Latent::zeros(dim);
    for v in a.iter_mut() {
        *v = StandardNormal.sample(r);
    }
    a
}

fn stage2_val_loss(
    models: &Models,
    cfg: &RunConfig,
    pairs: &[&LoadedPair],
    cache: &LatentCache,
    mode: GuidanceMode,
    stochastic: bool,
) -> Result<f64> {
    let mut acc = 0.0;
    for (i, _p) in pairs.iter().enumerate() {
        // Fixed t (and noise) per item so epochs are comparable.
        let t: f64 = rng::stream(cfg.seed, "val-t", i as u64).gen();
        let eps = if stochastic {
            Some(vec![sample_normal(
                &mut rng::stream(cfg.seed, "val-eps", i as u64),
                cache.z0[i].raw_dim(),
            )])
        } else {
            None
        };
        let mut tape = Tape::new();
        let batch = [i];
        let loss = stage2_loss(models, &mut tape, cache, pairs, &batch, &[t], eps.as_deref(), mode)?;
        acc += tape.scalar(loss);
    }
    Ok(acc / pairs.len() as f64)
}

// ---- Stage 3: end-to-end fine-tuning through the sampler ----

/// Differentiable reconstruction loss through the Euler chain; gradients are
/// truncated `grad_truncation_steps` before the end to bound memory.
fn stage3_loss(
    models: &Models,
    cfg: &RunConfig,
    tape: &mut Tape,
    rgb: &Array4<f64>,
    raw: &Array4<f64>,
) -> Result<NodeId> {
    let k = cfg.sampler.steps;
    let trunc = cfg.train.grad_truncation_steps;
    let n = rgb.dim().0;
    let x = tape.constant(rgb.clone());
    let y = tape.constant(raw.clone());
    let (z0, f_rgb) = models.dlae.encode_rgb_nodes(tape, &models.store, x)?;
    let guidance = models
        .dlfm
        .guidance_nodes(tape, &models.store, cfg.guidance, x, z0)?;
    let dt = 1.0 / k as f64;
    let mut z = z0;
    for kk in 0..k {
        if k - kk == trunc.min(k) {
            z = tape.detach(z);
        }
        let t = kk as f64 / k as f64;
        let ts = vec![t; n];
        let v = models
            .dlfm
            .velocity
            .forward(tape, &models.store, z, Some(&ts), Some(&guidance))?;
        let scaled = tape.scale(v, dt);
        z = tape.add(z, scaled)?;
        if tape.value(z).iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite latent at sampler step {kk}")));
        }
    }
    let recon = models.dlae.decode_raw_nodes(tape, &models.store, z, &f_rgb)?;
    let l1 = tape.l1_loss(recon, y)?;
    if cfg.train.lambda3 == 0.0 {
        return Ok(l1);
    }
    let p3 = raw4_to_rgb3_node(tape, recon)?;
    let t3 = raw4_to_rgb3_node(tape, y)?;
    let perc = models.phi.perceptual_loss(tape, p3, t3)?;
    let scaled = tape.scale(perc, cfg.train.lambda3);
    tape.add(l1, scaled)
}

pub fn train_stage3(
    cfg: &RunConfig,
    data: &Dataset,
    models: &mut Models,
    out_dir: &Path,
) -> Result<f64> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = LossLog::create(&out_dir.join("stage3_loss.csv"))?;
    let best_dir = out_dir.join("ckpt_best");
    let train = data.train_pairs();
    let val = data.test_pairs();
    let mut sched = PlateauScheduler::new(
        cfg.train.lr * cfg.train.stage3_lr_scale,
        cfg.train.plateau_factor,
        cfg.train.plateau_patience,
        cfg.train.min_lr,
    );
    models.store.reset_optimizer();
    let mut step: u64 = 0;
    let mut best_val = f64::INFINITY;

    // Baseline validation so fine-tuning can only keep a checkpoint that is
    // at least as good as its starting point.
    let init_val = stage3_val_loss(models, cfg, &val)?;
    log.log(0, "val_finetune", init_val);
    checkpoint::save_checkpoint(&best_dir, &models.store, &cfg.model, cfg.seed, "stage3")?;
    sched.observe(init_val);
    best_val = best_val.min(init_val);

    for epoch in 0..cfg.train.stage3_epochs {
        for batch in epoch_batches(train.len(), cfg.train.batch_size, cfg.seed, "shuffle3", epoch as u64) {
            let rgb = stack_images(batch.iter().map(|&i| &train[i].rgb.data));
            let raw = stack_images(batch.iter().map(|&i| &train[i].raw.data));
            let mut tape = Tape::new();
            let loss = stage3_loss(models, cfg, &mut tape, &rgb, &raw)?;
            tape.backward(loss, &mut models.store)?;
            if !models.store.grads_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradients at stage3 step {step}; last good checkpoint at {}",
                    best_dir.display()
                )));
            }
            if cfg.train.grad_clip > 0.0 {
                models.store.clip_grad_norm(cfg.train.grad_clip, |_| true);
            }
            models.store.adam_step(&cfg.train.adam, sched.lr, |_| true);
            models.store.zero_grads();
            let lv = tape.scalar(loss);
            check_finite(lv, "stage3 loss", &best_dir)?;
            log.log(step, "finetune", lv);
            step += 1;
        }
        let val_loss = stage3_val_loss(models, cfg, &val)?;
        log.log(step, "val_finetune", val_loss);
        if sched.observe(val_loss) {
            best_val = val_loss;
            checkpoint::save_checkpoint(&best_dir, &models.store, &cfg.model, cfg.seed, "stage3")?;
        }
        log.log(step, "lr", sched.lr);
    }
    log.flush();
    checkpoint::restore_into(&best_dir, &mut models.store)?;
    checkpoint::save_checkpoint(&out_dir.join("ckpt_last"), &models.store, &cfg.model, cfg.seed, "stage3")?;
    Ok(best_val)
}

fn stage3_val_loss(models: &Models, cfg: &RunConfig, pairs: &[&LoadedPair]) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        let mut tape = Tape::new();
        let rgb = dlae::batch_of_one(&p.rgb.data);
        let raw = dlae::batch_of_one(&p.raw.data);
        let loss = stage3_loss(models, cfg, &mut tape, &rgb, &raw)?;
        acc += tape.scalar(loss);
    }
    Ok(acc / pairs.len() as f64)
}

// ---- Inference and evaluation over a dataset ----

/// Reconstruct one pair, honoring the sampler variant. Stochastic inference
/// seeds its noise from the pair index so runs are repeatable.
pub fn reconstruct_pair(
    models: &Models,
    cfg: &RunConfig,
    pair: &LoadedPair,
    index: usize,
) -> Result<crate::data_isp::RawImage> {
    let start = if cfg.sampler.variant == Variant::Stochastic {
        let (z0, _) = models.dlae.encode_rgb(&models.store, &pair.rgb)?;
        Some(sample_normal(
            &mut rng::stream(cfg.seed, "infer-eps", index as u64),
            z0.raw_dim(),
        ))
    } else {
        None
    };
    dlfm::reconstruct(
        &models.dlae,
        &models.dlfm,
        &models.store,
        &pair.rgb,
        &cfg.sampler,
        cfg.guidance,
        start.as_ref(),
    )
}

/// Full-pipeline evaluation of the given pair indices.
pub fn evaluate_reconstruction(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    indices: &[usize],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let pair = &data.pairs[i];
        let pred = reconstruct_pair(models, cfg, pair, i)?;
        rows.push(metrics::evaluate(&pair.name, &pred, &pair.raw, &data.manifest.isp)?);
    }
    EvalReport::from_rows(rows, &cfg.fingerprint())
}

/// Autoencoder round-trip evaluation (RAW in, RAW out, with live RGB
/// features injected), used by stage-1 checks and the ablation grid.
pub fn evaluate_autoencoder(
    models: &Models,
    cfg: &RunConfig,
    data: &Dataset,
    indices: &[usize],
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let pair = &data.pairs[i];
        let (_z_rgb, f_rgb) = models.dlae.encode_rgb(&models.store, &pair.rgb)?;
        let (z_raw, _) = models.dlae.encode_raw(&models.store, &pair.raw)?;
        let pred = models.dlae.decode_raw(&models.store, &z_raw, &f_rgb)?;
        rows.push(metrics::evaluate(&pair.name, &pred, &pair.raw, &data.manifest.isp)?);
    }
    EvalReport::from_rows(rows, &cfg.fingerprint())
}

/// RGB autoencoder round-trip PSNR (no injection path).
pub fn evaluate_rgb_autoencoder(
    models: &Models,
    data: &Dataset,
    indices: &[usize],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for &i in indices {
        let pair = &data.pairs[i];
        let (z, _) = models.dlae.encode_rgb(&models.store, &pair.rgb)?;
        let rec = models.dlae.decode_rgb(&models.store, &z)?;
        let p = metrics::psnr(&rec.data, &pair.rgb.data, 1.0)?;
        if p.is_finite() {
            acc += p;
            n += 1;
        }
    }
    if n == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(acc / n as f64)
}

/// Train all three stages in sequence under one output directory.
pub fn train_full_pipeline(cfg: &RunConfig, data: &Dataset, out_dir: &Path) -> Result<Models> {
    let mut models = build_models(cfg)?;
    cfg.write_snapshot(out_dir)?;
    train_stage1(cfg, data, &mut models, &out_dir.join("stage1"))?;
    train_stage2(cfg, data, &mut models, &out_dir.join("stage2"))?;
    train_stage3(cfg, data, &mut models, &out_dir.join("stage3"))?;
    checkpoint::save_checkpoint(&out_dir.join("ckpt_final"), &models.store, &cfg.model, cfg.seed, "final")?;
    Ok(models)
}

/// Mean RAW image over the given indices; the trivial predictor whose PSNR
/// is the floor that any learned model must clear.
pub fn mean_raw_predictor(data: &Dataset, indices: &[usize]) -> Result<Array3<f64>> {
    if indices.is_empty() {
        return Err(Error::data("mean predictor needs at least one image"));
    }
    let mut acc = Array3::<f64>::zeros(data.pairs[indices[0]].raw.data.raw_dim());
    for &i in indices {
        acc += &data.pairs[i].raw.data;
    }
    Ok(acc / indices.len() as f64)
}

pub use crate::checkpoint::save_checkpoint;

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub seed: u64,
    pub psnr_raw: f64,
    pub ssim_raw: f64,
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

/// The ablation grid: alignment loss on/off (autoencoder quality),
/// deterministic vs stochastic flow, and cross/single/latent guidance, all
/// at identical budgets per seed.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let test_idx = data.manifest.test.clone();
    let mut rows = Vec::new();

    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;

        // Autoencoder with the alignment loss (the one everything else uses).
        let mut models_full = build_models(&cfg)?;
        let dir = out_dir.join(format!("s{seed}_dlae_full"));
        train_stage1(&cfg, data, &mut models_full, &dir)?;
        let ae_full = evaluate_autoencoder(&models_full, &cfg, data, &test_idx)?;
        rows.push(row("dlae", "with_fea", seed, &ae_full));

        // Injection-only autoencoder (lambda2 = 0).
        let mut cfg_nofea = cfg.clone();
        cfg_nofea.train.lambda2 = 0.0;
        let mut models_nofea = build_models(&cfg_nofea)?;
        let dir = out_dir.join(format!("s{seed}_dlae_nofea"));
        train_stage1(&cfg_nofea, data, &mut models_nofea, &dir)?;
        let ae_nofea = evaluate_autoencoder(&models_nofea, &cfg_nofea, data, &test_idx)?;
        rows.push(row("dlae", "injection_only", seed, &ae_nofea));

        // Flow variants share the aligned autoencoder.
        let store_snapshot = out_dir.join(format!("s{seed}_dlae_full/ckpt_last"));
        let grid: [(&str, &str, Variant, GuidanceMode); 4] = [
            ("flow", "deterministic", Variant::Deterministic, GuidanceMode::Cross),
            ("flow", "stochastic", Variant::Stochastic, GuidanceMode::Cross),
            ("guidance", "single", Variant::Deterministic, GuidanceMode::Single),
            ("guidance", "latent", Variant::Deterministic, GuidanceMode::Latent),
        ];
        let mut det_cross: Option<EvalReport> = None;
        for (group, variant, var, mode) in grid {
            let mut vcfg = cfg.clone();
            vcfg.sampler.variant = var;
            vcfg.guidance = mode;
            let mut models = load_models(&vcfg, &store_snapshot)?;
            let dir = out_dir.join(format!("s{seed}_{group}_{variant}"));
            train_stage2(&vcfg, data, &mut models, &dir)?;
            let report = evaluate_reconstruction(&models, &vcfg, data, &test_idx)?;
            rows.push(row(group, variant, seed, &report));
            if group == "flow" && variant == "deterministic" {
                det_cross = Some(report);
            }
        }
        // Cross guidance row mirrors the deterministic flow run.
        if let Some(report) = det_cross {
            rows.push(row("guidance", "cross", seed, &report));
        }
    }
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

fn row(group: &str, variant: &str, seed: u64, report: &EvalReport) -> AblationRow {
    AblationRow {
        group: group.into(),
        variant: variant.into(),
        seed,
        psnr_raw: report.mean_psnr_raw,
        ssim_raw: report.mean_ssim_raw,
        psnr_rgb: report.mean_psnr_rgb,
        ssim_rgb: report.mean_ssim_rgb,
    }
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut out = String::from("group,variant,seed,psnr_raw,ssim_raw,psnr_rgb,ssim_rgb\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.group, r.variant, r.seed, r.psnr_raw, r.ssim_raw, r.psnr_rgb, r.ssim_rgb
        ));
    }
    // Per-(group,variant) means across seeds, appended after the raw rows.
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.group.clone(), r.variant.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (g, v) in keys {
        let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.group == g && r.variant == v).collect();
        let m = |f: &dyn Fn(&AblationRow) -> f64| {
            sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64
        };
        out.push_str(&format!(
            "{g},{v},mean,{},{},{},{}\n",
            m(&|r| r.psnr_raw),
            m(&|r| r.ssim_raw),
            m(&|r| r.psnr_rgb),
            m(&|r| r.ssim_rgb)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

