//! Loss graphs: adversarial pair losses, the variational mutual-information
//! bound with the disentangled per-frame posterior, and the transition
//! magnitude regularizer.

use ndarray::{Array2, Array4};

use crate::error::{Result, VpaError};
use crate::nn::{ParamStore, Real, Session, Var};

use super::{generator_pair_forward, prior_entropy, CiganModel, Mode};

/// Exact log density of a diagonal Gaussian.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], sigma: &[f64]) -> f64 {
    let mut acc = -0.5 * x.len() as f64 * std::f64::consts::TAU.ln();
    for i in 0..x.len() {
        let z = (x[i] - mean[i]) / sigma[i];
        acc -= 0.5 * z * z + sigma[i].ln();
    }
    acc
}

/// Variational lower bound on mutual information: mean posterior log density
/// of the sampled latents plus the latent entropy.
pub fn mi_lower_bound(log_q: &[f64], entropy: f64) -> f64 {
    let mean = log_q.iter().sum::<f64>() / log_q.len() as f64;
    mean + entropy
}

/// One step's worth of frozen randomness: everything a loss evaluation needs
/// besides the parameters, so losses are pure functions of the store.
#[derive(Debug, Clone)]
pub struct LossBatch<S: Real> {
    /// Real consecutive observation pairs `[B,2,R,R]`.
    pub real_pairs: Array4<S>,
    /// Context images `[B,1,R,R]` for context models.
    pub context: Option<Array4<S>>,
    /// Prior latent draws `[B,d]`.
    pub latent_s: Array2<S>,
    /// Reparametrization noise for the transition sample `[B,d]`.
    pub trans_eps: Array2<S>,
    /// Optional generator noise input `[B,z]`.
    pub noise_z: Option<Array2<S>>,
    /// Instance noise added to the discriminator inputs (already scaled).
    pub inst_real: Option<Array4<S>>,
    pub inst_fake: Option<Array4<S>>,
}

pub(crate) struct GenParts {
    pub fake: Var,
    pub s: Var,
    pub s_next: Var,
    pub delta: Var,
    pub sigma: Var,
}

/// Forward the latent prior draw through the transition model and generator.
pub(crate) fn generator_forward_batch<S: Real>(
    model: &CiganModel,
    store: &ParamStore<S>,
    sess: &mut Session<S>,
    batch: &LossBatch<S>,
    mode: Mode,
) -> (GenParts, super::BnUpdates<S>) {
    let s = sess.input(batch.latent_s.clone().into_dyn());
    let eps = sess.input(batch.trans_eps.clone().into_dyn());
    let (delta, sigma) = model.transition.forward(store, sess, s);
    let shifted = sess.tape.add(s, delta);
    let noise_term = sess.tape.mul(sigma, eps);
    let s_next = sess.tape.add(shifted, noise_term);
    let z = batch
        .noise_z
        .as_ref()
        .map(|z| sess.input(z.clone().into_dyn()));
    let ctx = batch
        .context
        .as_ref()
        .map(|c| sess.input(c.clone().into_dyn()));
    let (fake, stats) =
        generator_pair_forward(model, store, sess, s, s_next, z, ctx, mode);
    (
        GenParts {
            fake,
            s,
            s_next,
            delta,
            sigma,
        },
        stats,
    )
}

fn bce_with_logits<S: Real>(sess: &mut Session<S>, logits: Var, target: f64) -> Var {
    // softplus(l) - target * l, averaged.
    let sp = sess.tape.softplus(logits);
    let scaled = sess.tape.scale(logits, S::from_f64(target));
    let diff = sess.tape.sub(sp, scaled);
    sess.tape.mean_all(diff)
}

fn with_instance_noise<S: Real>(
    sess: &mut Session<S>,
    images: Var,
    noise: Option<&Array4<S>>,
) -> Var {
    match noise {
        Some(n) => {
            let nv = sess.input(n.clone().into_dyn());
            sess.tape.add(images, nv)
        }
        None => images,
    }
}

/// Discriminator minimax loss on real vs generated pairs. Returns the
/// session (for backward), the loss var, and the real/fake logit values.
pub(crate) fn discriminator_loss_session<'s, S: Real>(
    model: &CiganModel,
    store: &'s ParamStore<S>,
    batch: &LossBatch<S>,
    label_smoothing: f64,
) -> (Session<S>, Var, Vec<f64>, Vec<f64>) {
    let mut sess = Session::new(store);
    sess.freeze(&model.generator_ids());
    let (parts, _) = generator_forward_batch(model, store, &mut sess, batch, Mode::Train);
    let real = sess.input(batch.real_pairs.clone().into_dyn());
    let real_in = with_instance_noise(&mut sess, real, batch.inst_real.as_ref());
    let fake_in = with_instance_noise(&mut sess, parts.fake, batch.inst_fake.as_ref());
    let l_real = model.discriminator.forward(store, &mut sess, real_in);
    let l_fake = model.discriminator.forward(store, &mut sess, fake_in);
    let loss_real = bce_with_logits(&mut sess, l_real, label_smoothing);
    let loss_fake = bce_with_logits(&mut sess, l_fake, 0.0);
    let loss = sess.tape.add(loss_real, loss_fake);
    let real_logits = sess.value(l_real).iter().map(|v| v.as_f64()).collect();
    let fake_logits = sess.value(l_fake).iter().map(|v| v.as_f64()).collect();
    (sess, loss, real_logits, fake_logits)
}

pub(crate) struct GenLossParts<S: Real> {
    pub sess: Session<S>,
    pub loss: Var,
    pub adv: f64,
    pub mi_bound: f64,
    pub reg: f64,
    pub mean_delta_norm: f64,
    pub mean_sigma: f64,
    pub bn_stats: super::BnUpdates<S>,
}

/// Generator-side loss: adversarial term minus the weighted MI bound plus the
/// delta/sigma magnitude regularizer. Trains generator, posterior, transition
/// and context encoder; the discriminator is frozen.
pub(crate) fn generator_loss_session<S: Real>(
    model: &CiganModel,
    store: &ParamStore<S>,
    batch: &LossBatch<S>,
    info_weight: f64,
    reg_weight: f64,
) -> GenLossParts<S> {
    let mut sess = Session::new(store);
    sess.freeze(&model.discriminator_ids());
    let (parts, bn_stats) =
        generator_forward_batch(model, store, &mut sess, batch, Mode::Train);

    // Adversarial: make the discriminator call the pair real.
    let fake_in = with_instance_noise(&mut sess, parts.fake, batch.inst_fake.as_ref());
    let l_fake = model.discriminator.forward(store, &mut sess, fake_in);
    let adv = bce_with_logits(&mut sess, l_fake, 1.0);

    // MI bound with the disentangled posterior Q(s,s'|o,o') = Q(s|o)Q(s'|o').
    let first = sess.tape.slice_axis(parts.fake, 1, 0, 1);
    let second = sess.tape.slice_axis(parts.fake, 1, 1, 2);
    let logq_s = posterior_log_density(model, store, &mut sess, first, parts.s);
    let logq_n = posterior_log_density(model, store, &mut sess, second, parts.s_next);
    let logq = sess.tape.add(logq_s, logq_n);
    let mean_logq = sess.tape.mean_all(logq);
    // H(s,s') = H(s) + H(s'|s); the conditional entropy depends on sigma(s).
    let d = model.config.d_latent;
    let ln_sigma = sess.tape.ln(parts.sigma);
    let sum_ln_sigma = sess.tape.sum_axis(ln_sigma, 1);
    let mean_ln_sigma = sess.tape.mean_all(sum_ln_sigma);
    let h_const = prior_entropy(d) // H(s)
        + 0.5 * d as f64 * (std::f64::consts::TAU * std::f64::consts::E).ln();
    let entropy = sess.tape.add_scalar(mean_ln_sigma, S::from_f64(h_const));
    let mi = sess.tape.add(mean_logq, entropy);

    // Locality: penalize the magnitude of delta and sigma.
    let d2 = sess.tape.square(parts.delta);
    let d2s = sess.tape.sum_axis(d2, 1);
    let mean_d2 = sess.tape.mean_all(d2s);
    let g2 = sess.tape.square(parts.sigma);
    let g2s = sess.tape.sum_axis(g2, 1);
    let mean_g2 = sess.tape.mean_all(g2s);
    let reg = sess.tape.add(mean_d2, mean_g2);

    let neg_mi = sess.tape.scale(mi, S::from_f64(-info_weight));
    let reg_term = sess.tape.scale(reg, S::from_f64(reg_weight));
    let partial = sess.tape.add(adv, neg_mi);
    let loss = sess.tape.add(partial, reg_term);

    let adv_v = sess.tape.scalar(adv).as_f64();
    let mi_v = sess.tape.scalar(mi).as_f64();
    let reg_v = sess.tape.scalar(reg).as_f64();
    let delta_norm = sess.tape.scalar(mean_d2).as_f64().sqrt();
    let sigma_mean = {
        let sv = sess.value(parts.sigma);
        sv.iter().map(|v| v.as_f64()).sum::<f64>() / sv.len() as f64
    };
    GenLossParts {
        sess,
        loss,
        adv: adv_v,
        mi_bound: mi_v,
        reg: reg_v,
        mean_delta_norm: delta_norm,
        mean_sigma: sigma_mean,
        bn_stats,
    }
}

/// `log Q(latent | image)` per batch row, `[B]`.
fn posterior_log_density<S: Real>(
    model: &CiganModel,
    store: &ParamStore<S>,
    sess: &mut Session<S>,
    image: Var,
    latent: Var,
) -> Var {
    let (mean, std) = model.posterior.forward(store, sess, image);
    let centered = sess.tape.sub(latent, mean);
    let z = sess.tape.div(centered, std);
    let z2 = sess.tape.square(z);
    let sum_z2 = sess.tape.sum_axis(z2, 1);
    let ln_std = sess.tape.ln(std);
    let sum_ln_std = sess.tape.sum_axis(ln_std, 1);
    let half = sess.tape.scale(sum_z2, S::from_f64(-0.5));
    let partial = sess.tape.sub(half, sum_ln_std);
    let d = model.config.d_latent as f64;
    sess.tape
        .add_scalar(partial, S::from_f64(-0.5 * d * std::f64::consts::TAU.ln()))
}

/// Loss values and diagnostics for one frozen batch.
#[derive(Debug, Clone, Copy)]
pub struct LossValues {
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

/// Compute both adversarial losses and diagnostics on one batch without
/// touching parameters. Non-finite values abort with the offending term.
pub fn cigan_losses<S: Real>(
    model: &CiganModel,
    store: &ParamStore<S>,
    batch: &LossBatch<S>,
    info_weight: f64,
) -> Result<LossValues> {
    if batch.real_pairs.dim().0 == 0 {
        return Err(VpaError::Empty("loss batch".into()));
    }
    if info_weight < 0.0 {
        return Err(VpaError::Config("info_weight must be >= 0".into()));
    }
    let (d_sess, d_loss, real_logits, fake_logits) =
        discriminator_loss_session(model, store, batch, model.config.label_smoothing);
    let d_loss_v = d_sess.tape.scalar(d_loss).as_f64();
    let g = generator_loss_session(model, store, batch, info_weight, model.config.reg_weight);
    let g_loss_v = g.sess.tape.scalar(g.loss).as_f64();
    for (term, v) in [
        ("discriminator", d_loss_v),
        ("generator", g_loss_v),
        ("mi_bound", g.mi_bound),
        ("magnitude_reg", g.reg),
    ] {
        if !v.is_finite() {
            return Err(VpaError::Training {
                epoch: 0,
                term: term.into(),
                message: format!("non-finite loss value {v}"),
            });
        }
    }
    let d_real_acc =
        real_logits.iter().filter(|&&l| l > 0.0).count() as f64 / real_logits.len() as f64;
    let d_fake_acc =
        fake_logits.iter().filter(|&&l| l < 0.0).count() as f64 / fake_logits.len() as f64;
    Ok(LossValues {
        d_loss: d_loss_v,
        g_loss: g_loss_v,
        g_adv: g.adv,
        mi_bound: g.mi_bound,
        magnitude_reg: g.reg,
        d_real_acc,
        d_fake_acc,
        mean_delta_norm: g.mean_delta_norm,
        mean_sigma: g.mean_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::central_difference;
    use ndarray::Array4;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_setup(context: bool) -> (CiganModel, ParamStore<f64>, LossBatch<f64>) {
        let mut config = super::super::CiganConfig::new(8);
        config.d_latent = 2;
        config.base_filters = 6;
        config.transition_hidden = 5;
        config.batch_size = 3;
        config.context = context;
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = CiganModel::build(&config, &mut store, &mut rng);

        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut unif = |scale: f64| move |_: (usize, usize, usize, usize)| 0.0 * scale;
        let _ = &mut unif;
        let real = Array4::from_shape_fn((3, 2, 8, 8), |_| rng.gen_range(0.0..1.0));
        let ctx = context.then(|| {
            // Keep the composition away from the clamp kinks.
            Array4::from_shape_fn((3, 1, 8, 8), |_| rng.gen_range(0.0..0.3))
        });
        let latent_s = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let trans_eps = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));
        let inst = Array4::from_shape_fn((3, 2, 8, 8), |_| rng.gen_range(-0.02..0.02));
        let inst2 = Array4::from_shape_fn((3, 2, 8, 8), |_| rng.gen_range(-0.02..0.02));
        let batch = LossBatch {
            real_pairs: real,
            context: ctx,
            latent_s,
            trans_eps,
            noise_z: None,
            inst_real: Some(inst),
            inst_fake: Some(inst2),
        };
        (model, store, batch)
    }

    use rand::Rng;

    #[test]
    fn generator_transition_loss_gradients_pass_finite_differences() {
        for context in [false, true] {
            let (model, store, batch) = toy_setup(context);
            let parts = generator_loss_session(&model, &store, &batch, 0.05, 0.1);
            let mut sess = parts.sess;
            sess.tape.backward(parts.loss);
            let analytic: Vec<_> = model
                .generator_ids()
                .into_iter()
                .map(|id| (id, sess.grad_of(id).cloned().unwrap()))
                .collect();
            let report = central_difference(
                &store,
                &analytic,
                |s| {
                    let p = generator_loss_session(&model, s, &batch, 0.05, 0.1);
                    p.sess.tape.scalar(p.loss)
                },
                1e-5,
            );
            assert!(
                report.max_rel_err < 1e-4,
                "context={context}: max rel err {} over {} params",
                report.max_rel_err,
                report.checked
            );
        }
    }

    #[test]
    fn discriminator_loss_gradients_pass_finite_differences() {
        let (model, store, batch) = toy_setup(false);
        let (mut sess, loss, _, _) =
            discriminator_loss_session(&model, &store, &batch, 0.9);
        sess.tape.backward(loss);
        let analytic: Vec<_> = model
            .discriminator_ids()
            .into_iter()
            .map(|id| (id, sess.grad_of(id).cloned().unwrap()))
            .collect();
        let report = central_difference(
            &store,
            &analytic,
            |s| {
                let (sess, loss, _, _) = discriminator_loss_session(&model, s, &batch, 0.9);
                sess.tape.scalar(loss)
            },
            1e-5,
        );
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} over {} params",
            report.max_rel_err,
            report.checked
        );
    }

    #[test]
    fn constant_half_discriminator_gives_symmetric_cross_entropy() {
        // With logits identically zero the pair loss is 2 ln 2 regardless of
        // smoothing: softplus(0) twice.
        let (model, mut store, batch) = toy_setup(false);
        // Zero out the final discriminator layer so every logit is exactly 0.
        store.get_mut(model.discriminator.out.w).fill(0.0);
        store.get_mut(model.discriminator.out.b).fill(0.0);
        let (sess, loss, _, _) = discriminator_loss_session(&model, &store, &batch, 0.9);
        let v = sess.tape.scalar(loss);
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn zero_info_weight_drops_the_mi_term() {
        let (model, store, batch) = toy_setup(false);
        let with = generator_loss_session(&model, &store, &batch, 0.0, 0.1);
        let v_with = with.sess.tape.scalar(with.loss);
        // adversarial + reg only
        let expect = with.adv + 0.1 * with.reg;
        assert!((v_with - expect).abs() < 1e-9, "{v_with} vs {expect}");
    }

    #[test]
    fn cigan_losses_reports_finite_values() {
        let (model, store, batch) = toy_setup(false);
        let values = cigan_losses(&model, &store, &batch, 0.02).unwrap();
        assert!(values.d_loss.is_finite());
        assert!(values.g_loss.is_finite());
        assert!(values.mean_sigma > 0.0);
    }

    #[test]
    fn mi_bound_discrete_oracle() {
        // s uniform on {0,1}, o = s, Q the exact posterior: the bound equals
        // the true mutual information ln 2. Enumerate the joint exactly.
        let entropy = std::f64::consts::LN_2;
        // log Q(s|o) = log 1 = 0 for both outcomes.
        let log_q = [0.0, 0.0];
        let bound = mi_lower_bound(&log_q, entropy);
        assert!((bound - std::f64::consts::LN_2).abs() < 1e-6);

        // Q independent of o (equal to the prior): bound collapses to zero.
        let log_prior = [(0.5f64).ln(), (0.5f64).ln()];
        let bound = mi_lower_bound(&log_prior, entropy);
        assert!(bound.abs() < 1e-12);

        // Batch of identical samples equals the single-sample value.
        let rep = [0.25f64.ln(); 7];
        let single = mi_lower_bound(&rep[..1], entropy);
        let many = mi_lower_bound(&rep, entropy);
        assert_eq!(single, many);
    }

    #[test]
    fn mi_bound_never_exceeds_true_mi_on_discrete_family() {
        // For any approximate posterior q on the enumerable toy construction,
        // E[log q] + H(s) <= I = ln 2 (Gibbs). Sweep a parametrized family.
        let entropy = std::f64::consts::LN_2;
        for p in [0.5, 0.6, 0.75, 0.9, 0.99, 0.999999] {
            // q(s=o|o) = p: expected log-q over the exact joint.
            let log_q = [(p as f64).ln(), (p as f64).ln()];
            let bound = mi_lower_bound(&log_q, entropy);
            assert!(bound <= std::f64::consts::LN_2 + 1e-12, "p={p}");
        }
    }
}
