//! Alternating adversarial training with the information-weight schedule,
//! decaying instance noise, and per-step spectral refresh.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryDataset;
use crate::error::{Result, VpaError};
use crate::nn::{Adam, ParamStore};

use super::losses::{discriminator_loss_session, generator_loss_session, LossBatch};
use super::{gaussian_sample, CiganBundle, CiganConfig, CiganModel};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochDiag {
    pub epoch: usize,
    pub info_weight: f64,
    pub instance_noise: f64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_adv: f64,
    pub mi_bound: f64,
    pub magnitude_reg: f64,
    pub d_real_acc: f64,
    pub d_fake_acc: f64,
    pub mean_delta_norm: f64,
    pub mean_sigma: f64,
}

fn normal2(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| gaussian_sample(rng) as f32)
}

fn normal4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), std: f64) -> Array4<f32> {
    Array4::from_shape_fn(shape, |_| (gaussian_sample(rng) * std) as f32)
}

/// Assemble one frozen loss batch from dataset records.
fn sample_batch(
    dataset: &TrajectoryDataset,
    config: &CiganConfig,
    batch_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    inst_std: f64,
) -> LossBatch<f32> {
    let b = config.batch_size;
    let res = config.resolution;
    let n = dataset.len();
    let mut real = Array4::<f32>::zeros((b, 2, res, res));
    let mut context = config.context.then(|| Array4::<f32>::zeros((b, 1, res, res)));
    for bi in 0..b {
        let idx = batch_rng.gen_range(0..n);
        let rec = &dataset.records[idx];
        for (i, &p) in rec.obs.pixels.iter().enumerate() {
            real[[bi, 0, i / res, i % res]] = p as f32 / 255.0;
        }
        for (i, &p) in rec.next_obs.pixels.iter().enumerate() {
            real[[bi, 1, i / res, i % res]] = p as f32 / 255.0;
        }
        if let Some(ctx) = context.as_mut() {
            let c = rec
                .context
                .as_ref()
                .expect("context model requires context records");
            for (i, &p) in c.pixels.iter().enumerate() {
                ctx[[bi, 0, i / res, i % res]] = p as f32 / 255.0;
            }
        }
    }
    let latent_s = normal2(noise_rng, b, config.d_latent);
    let trans_eps = normal2(noise_rng, b, config.d_latent);
    let noise_z = (config.noise_dim > 0).then(|| normal2(noise_rng, b, config.noise_dim));
    let (inst_real, inst_fake) = if inst_std > 0.0 {
        (
            Some(normal4(noise_rng, (b, 2, res, res), inst_std)),
            Some(normal4(noise_rng, (b, 2, res, res), inst_std)),
        )
    } else {
        (None, None)
    };
    LossBatch {
        real_pairs: real,
        context,
        latent_s,
        trans_eps,
        noise_z,
        inst_real,
        inst_fake,
    }
}

/// Train the full generative stack on consecutive observation pairs.
/// Deterministic given `(dataset, config, seed)` up to floating-point
/// reduction order.
pub fn train_cigan(
    dataset: &TrajectoryDataset,
    config: &CiganConfig,
    seed: u64,
) -> Result<CiganBundle> {
    if dataset.is_empty() {
        return Err(VpaError::Empty("training dataset".into()));
    }
    if dataset.resolution() != config.resolution {
        return Err(VpaError::Config(format!(
            "dataset resolution {} != model resolution {}",
            dataset.resolution(),
            config.resolution
        )));
    }
    if config.context && !dataset.manifest.context_present {
        return Err(VpaError::Config(
            "context model requires a context-bearing dataset".into(),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(0);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    batch_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(2);

    let mut store = ParamStore::<f32>::new();
    let mut model = CiganModel::build(config, &mut store, &mut init_rng);

    let mut adam_d = Adam::new(&store, model.discriminator_ids(), config.lr).with_betas(0.5, 0.999);
    let mut adam_g = Adam::new(&store, model.generator_ids(), config.lr).with_betas(0.5, 0.999);

    let steps_per_epoch = if config.steps_per_epoch > 0 {
        config.steps_per_epoch
    } else {
        (dataset.len() / config.batch_size).max(1)
    };
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut diagnostics = Vec::with_capacity(config.epochs);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let info_weight = config.info_weight(epoch);
        let mut acc = EpochDiag {
            epoch,
            info_weight,
            instance_noise: 0.0,
            d_loss: 0.0,
            g_loss: 0.0,
            g_adv: 0.0,
            mi_bound: 0.0,
            magnitude_reg: 0.0,
            d_real_acc: 0.0,
            d_fake_acc: 0.0,
            mean_delta_norm: 0.0,
            mean_sigma: 0.0,
        };
        for _ in 0..steps_per_epoch {
            let inst_std =
                config.instance_noise * (1.0 - global_step as f64 / total_steps as f64);
            global_step += 1;

            // Discriminator update.
            model.discriminator.refresh_spectral(&store);
            let batch = sample_batch(dataset, config, &mut batch_rng, &mut noise_rng, inst_std);
            let (mut d_sess, d_loss, real_logits, fake_logits) =
                discriminator_loss_session(&model, &store, &batch, config.label_smoothing);
            let d_loss_v = d_sess.tape.scalar(d_loss) as f64;
            check_finite(d_loss_v, epoch, "discriminator")?;
            d_sess.tape.backward(d_loss);
            adam_d.step(&mut store, &d_sess);
            drop(d_sess);

            // Generator-side update on fresh latent draws.
            let batch = sample_batch(dataset, config, &mut batch_rng, &mut noise_rng, inst_std);
            let mut g = generator_loss_session(
                &model,
                &store,
                &batch,
                info_weight,
                config.reg_weight,
            );
            let g_loss_v = g.sess.tape.scalar(g.loss) as f64;
            check_finite(g_loss_v, epoch, "generator")?;
            check_finite(g.mi_bound, epoch, "mi_bound")?;
            check_finite(g.reg, epoch, "magnitude_reg")?;
            g.sess.tape.backward(g.loss);
            adam_g.step(&mut store, &g.sess);
            model.generator.apply_bn_updates(&g.bn_stats);

            acc.instance_noise += inst_std;
            acc.d_loss += d_loss_v;
            acc.g_loss += g_loss_v;
            acc.g_adv += g.adv;
            acc.mi_bound += g.mi_bound;
            acc.magnitude_reg += g.reg;
            acc.d_real_acc +=
                real_logits.iter().filter(|&&l| l > 0.0).count() as f64 / real_logits.len() as f64;
            acc.d_fake_acc +=
                fake_logits.iter().filter(|&&l| l < 0.0).count() as f64 / fake_logits.len() as f64;
            acc.mean_delta_norm += g.mean_delta_norm;
            acc.mean_sigma += g.mean_sigma;
        }
        let k = steps_per_epoch as f64;
        acc.instance_noise /= k;
        acc.d_loss /= k;
        acc.g_loss /= k;
        acc.g_adv /= k;
        acc.mi_bound /= k;
        acc.magnitude_reg /= k;
        acc.d_real_acc /= k;
        acc.d_fake_acc /= k;
        acc.mean_delta_norm /= k;
        acc.mean_sigma /= k;
        crate::progress!(
            "cigan epoch {:>3}  d_loss {:.3}  g_loss {:.3}  mi {:.3}  |delta| {:.3}  sigma {:.3}  d_acc {:.2}/{:.2}",
            epoch,
            acc.d_loss,
            acc.g_loss,
            acc.mi_bound,
            acc.mean_delta_norm,
            acc.mean_sigma,
            acc.d_real_acc,
            acc.d_fake_acc
        );
        diagnostics.push(acc);
    }

    Ok(CiganBundle {
        model,
        store,
        diagnostics,
    })
}

fn check_finite(v: f64, epoch: usize, term: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(VpaError::Training {
            epoch,
            term: term.into(),
            message: format!("non-finite loss {v}"),
        })
    }
}

/// Tile one context image across a batch dimension.
pub fn tile_context(ctx: &Array4<f32>, batch: usize) -> Array4<f32> {
    let (_, c, h, w) = ctx.dim();
    let mut out = Array4::<f32>::zeros((batch, c, h, w));
    for b in 0..batch {
        out.index_axis_mut(Axis(0), b).assign(&ctx.index_axis(Axis(0), 0));
    }
    out
}
