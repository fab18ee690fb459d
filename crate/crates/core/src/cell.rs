//! Factorized Kalman recurrence: prediction, scalar observation update and
//! their reverse-mode derivatives.
//!
//! With `H = [I 0]` and covariance restricted to the paired `(i, m + i)`
//! blocks, every operation reduces to elementwise arithmetic over the three
//! variance vectors plus banded sums over the transition blocks.

use crate::belief::{BeliefGrad, BeliefState, LatentObservation};
use crate::error::{Error, Result};
use crate::nn::{elu_plus_one_grad, VAR_FLOOR};
use crate::transition::{assemble_transition, BlockTransition, TransitionModel};

/// Stabilizer added to the population variance in [`normalize_latent`].
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Prior from a posterior under an already assembled transition `a` and
/// transition-noise variances `trans_noise` (length `2m`).
///
/// Variance sums run over the column index `k` of the band, weighting the
/// posterior variance at `k`: diag(M diag(σ) Nᵀ)_i = Σ_k M_ik N_ik σ_k.
pub fn predict_with(post: &BeliefState, a: &BlockTransition, trans_noise: &[f64]) -> BeliefState {
    let m = post.m();
    let mean = a.mul_vec(&post.mean);
    let (u, l, s) = (&post.var_upper, &post.var_lower, &post.var_side);
    let mut var_upper = trans_noise[..m].to_vec();
    let mut var_lower = trans_noise[m..].to_vec();
    let mut var_side = vec![0.0; m];
    let (d11, d12, d21, d22) = (a.b11.data(), a.b12.data(), a.b21.data(), a.b22.data());
    for i in 0..m {
        let (lo, hi) = a.b11.row_span(i);
        let (mut vu, mut vl, mut vs) = (0.0, 0.0, 0.0);
        for k in lo..hi {
            let idx = a.b11.index_unchecked(i, k);
            let (p11, p12, p21, p22) = (d11[idx], d12[idx], d21[idx], d22[idx]);
            vu += p11 * p11 * u[k] + 2.0 * p11 * p12 * s[k] + p12 * p12 * l[k];
            vl += p21 * p21 * u[k] + 2.0 * p22 * p21 * s[k] + p22 * p22 * l[k];
            vs += p21 * p11 * u[k] + (p22 * p11 + p21 * p12) * s[k] + p22 * p12 * l[k];
        }
        var_upper[i] += vu;
        var_lower[i] += vl;
        var_side[i] = vs;
    }
    BeliefState {
        mean,
        var_upper,
        var_lower,
        var_side,
    }
}

/// Prediction step with the transition assembled from `post.mean`.
pub fn predict(post: &BeliefState, model: &TransitionModel) -> Result<BeliefState> {
    let asm = assemble_transition(model, &post.mean)?;
    let prior = predict_with(post, &asm.matrix, &model.trans_noise());
    check_finite(&prior, "predicted belief")?;
    Ok(prior)
}

/// Gradients of [`predict_with`] w.r.t. the posterior, the transition matrix
/// and the transition-noise variances.
pub fn predict_with_backward(
    post: &BeliefState,
    a: &BlockTransition,
    d_prior: &BeliefGrad,
) -> (BeliefGrad, BlockTransition, Vec<f64>) {
    let m = post.m();
    let mut d_post = BeliefGrad::zeros(m);
    let mut d_a = BlockTransition::zeros(m, a.b11.bandwidth());

    // mean = A z  =>  dz = Aᵀ dmean,  dA_ij = dmean_i z_j
    d_post.mean = a.mul_vec_transpose(&d_prior.mean);
    let (zu, zl) = post.mean.split_at(m);
    let (gu, gl) = d_prior.mean.split_at(m);

    let (u, l, s) = (&post.var_upper, &post.var_lower, &post.var_side);
    let (d11, d12, d21, d22) = (a.b11.data(), a.b12.data(), a.b21.data(), a.b22.data());
    for i in 0..m {
        let (gvu, gvl, gvs) = (d_prior.var_upper[i], d_prior.var_lower[i], d_prior.var_side[i]);
        let (lo, hi) = a.b11.row_span(i);
        for k in lo..hi {
            let idx = a.b11.index_unchecked(i, k);
            let (p11, p12, p21, p22) = (d11[idx], d12[idx], d21[idx], d22[idx]);
            let (uk, lk, sk) = (u[k], l[k], s[k]);

            d_post.var_upper[k] += gvu * p11 * p11 + gvl * p21 * p21 + gvs * p21 * p11;
            d_post.var_side[k] += 2.0 * gvu * p11 * p12
                + 2.0 * gvl * p22 * p21
                + gvs * (p22 * p11 + p21 * p12);
            d_post.var_lower[k] += gvu * p12 * p12 + gvl * p22 * p22 + gvs * p22 * p12;

            d_a.b11.data_mut()[idx] +=
                gvu * (2.0 * p11 * uk + 2.0 * p12 * sk) + gvs * (p21 * uk + p22 * sk) + gu[i] * zu[k];
            d_a.b12.data_mut()[idx] +=
                gvu * (2.0 * p11 * sk + 2.0 * p12 * lk) + gvs * (p21 * sk + p22 * lk) + gu[i] * zl[k];
            d_a.b21.data_mut()[idx] +=
                gvl * (2.0 * p21 * uk + 2.0 * p22 * sk) + gvs * (p11 * uk + p12 * sk) + gl[i] * zu[k];
            d_a.b22.data_mut()[idx] +=
                gvl * (2.0 * p21 * sk + 2.0 * p22 * lk) + gvs * (p11 * sk + p12 * lk) + gl[i] * zl[k];
        }
    }
    let mut d_noise = d_prior.var_upper.clone();
    d_noise.extend_from_slice(&d_prior.var_lower);
    (d_post, d_a, d_noise)
}

/// Chain rule from transition-noise variances to the raw parameters.
pub fn trans_noise_raw_grad(raw: &[f64], d_noise: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(d_noise)
        .map(|(&r, &g)| g * elu_plus_one_grad(r))
        .collect()
}

/// Scalar Kalman gains of unit `i`.
struct Gains {
    qu: f64,
    ql: f64,
    /// `1 - qu`, formed as `r / D` so it stays positive when `u >> r`.
    keep: f64,
    denom: f64,
    clamped: bool,
}

fn gains(prior: &BeliefState, obs: &LatentObservation, i: usize) -> Gains {
    let (u, r) = (prior.var_upper[i], obs.var_obs[i]);
    let raw = u + r;
    let (denom, clamped) = if raw < VAR_FLOOR {
        (VAR_FLOOR, true)
    } else {
        (raw, false)
    };
    let keep = if clamped { (denom - u) / denom } else { r / denom };
    Gains {
        qu: u / denom,
        ql: prior.var_side[i] / denom,
        keep,
        denom,
        clamped,
    }
}

/// Observation update with `H = [I 0]`; `obs.present` is not consulted.
pub fn update(prior: &BeliefState, obs: &LatentObservation) -> BeliefState {
    let m = prior.m();
    let mut post = prior.clone();
    for i in 0..m {
        let g = gains(prior, obs, i);
        let resid = obs.w[i] - prior.mean[i];
        post.mean[i] += g.qu * resid;
        post.mean[m + i] += g.ql * resid;
        post.var_upper[i] = g.keep * prior.var_upper[i];
        post.var_side[i] = g.keep * prior.var_side[i];
        post.var_lower[i] = prior.var_lower[i] - g.ql * prior.var_side[i];
    }
    post
}

/// Gradients of [`update`] w.r.t. the prior, `w` and `var_obs`.
pub fn update_backward(
    prior: &BeliefState,
    obs: &LatentObservation,
    d_post: &BeliefGrad,
) -> (BeliefGrad, Vec<f64>, Vec<f64>) {
    let m = prior.m();
    let mut d_prior = BeliefGrad::zeros(m);
    let mut d_w = vec![0.0; m];
    let mut d_var_obs = vec![0.0; m];
    for i in 0..m {
        let Gains {
            qu,
            ql,
            keep,
            denom,
            clamped,
        } = gains(prior, obs, i);
        let (u, s) = (prior.var_upper[i], prior.var_side[i]);
        let resid = obs.w[i] - prior.mean[i];
        let (g_mu, g_ml) = (d_post.mean[i], d_post.mean[m + i]);
        let (g_u, g_l, g_s) = (d_post.var_upper[i], d_post.var_lower[i], d_post.var_side[i]);

        let g_qu = g_mu * resid - g_u * u - g_s * s;
        let g_ql = g_ml * resid - g_l * s;
        let g_resid = g_mu * qu + g_ml * ql;

        d_prior.mean[i] = g_mu - g_resid;
        d_prior.mean[m + i] = g_ml;
        d_w[i] = g_resid;

        // direct dependence of the posterior variances on the prior
        let mut du = g_u * keep;
        let mut ds = g_s * keep - g_l * ql;
        let dl = g_l;

        // through the gains: qu = u / D, ql = s / D, D = u + r
        du += g_qu / denom;
        ds += g_ql / denom;
        if !clamped {
            let g_denom = -(g_qu * u + g_ql * s) / (denom * denom);
            du += g_denom;
            d_var_obs[i] = g_denom;
        }
        d_prior.var_upper[i] = du;
        d_prior.var_lower[i] = dl;
        d_prior.var_side[i] = ds;
    }
    (d_prior, d_w, d_var_obs)
}

/// One recurrence step: predict, then update if the observation is present.
/// An absent observation yields a posterior identical to the prior.
pub fn step(
    post_prev: &BeliefState,
    model: &TransitionModel,
    obs: &LatentObservation,
) -> Result<(BeliefState, BeliefState)> {
    let prior = predict(post_prev, model)?;
    let post = if obs.present {
        let post = update(&prior, obs);
        check_finite(&post, "updated belief")?;
        post
    } else {
        prior.clone()
    };
    Ok((prior, post))
}

/// Zero mean, unit population variance across the `m` features.
pub fn normalize_latent(w: &[f64]) -> Vec<f64> {
    let (mean, inv_std) = moments(w);
    w.iter().map(|x| (x - mean) * inv_std).collect()
}

fn moments(w: &[f64]) -> (f64, f64) {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + NORMALIZE_EPS).sqrt())
}

/// Gradient of [`normalize_latent`] given the output gradient `d_y`.
pub fn normalize_latent_backward(w: &[f64], d_y: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let (mean, inv_std) = moments(w);
    let y: Vec<f64> = w.iter().map(|x| (x - mean) * inv_std).collect();
    let mean_g = d_y.iter().sum::<f64>() / n;
    let mean_gy = d_y.iter().zip(&y).map(|(g, yi)| g * yi).sum::<f64>() / n;
    d_y.iter()
        .zip(&y)
        .map(|(g, yi)| inv_std * (g - mean_g - yi * mean_gy))
        .collect()
}

fn check_finite(b: &BeliefState, what: &str) -> Result<()> {
    let ok = b
        .mean
        .iter()
        .chain(&b.var_upper)
        .chain(&b.var_lower)
        .chain(&b.var_side)
        .all(|x| x.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::non_finite(what, None))
    }
}
