//! DDIM noise schedule, forward marginal sampling, and the reverse
//! denoising loop over multi-scale score maps.
//!
//! The model predicts the clean map directly, so the reverse step combines
//! the prediction with the current noisy map:
//!
//!   y_prev = sigma*eps + sqrt(abar_prev)*y0_hat
//!          + sqrt(1 - abar_prev - sigma^2) * (y_t - sqrt(abar_t)*y0_hat) / sqrt(1 - abar_t)
//!
//! with sigma = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev).
//! eta = 0 gives the deterministic sampler; eta = 1 recovers the ancestral
//! (DDPM posterior) variance.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// Number of diffusion steps T; valid step indices are 1..=T.
    pub t_steps: usize,
    /// beta[t] for t in 1..=T; beta[0] is fixed to 0 so alpha_bar[0] = 1.
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub eta: f64,
    /// sigma[t] for the adjacent (t, t-1) pair; sigma[0] = 0.
    pub sigma: Vec<f64>,
}

pub fn make_schedule(t_steps: usize, beta_start: f64, beta_end: f64, eta: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("eta must be in [0,1], got {eta}")));
    }
    let mut beta = vec![0.0; t_steps + 1];
    for t in 1..=t_steps {
        beta[t] = if t_steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_steps - 1) as f64
        };
    }
    let mut alpha_bar = vec![1.0; t_steps + 1];
    for t in 1..=t_steps {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }
    let mut sched = NoiseSchedule {
        t_steps,
        beta,
        alpha_bar,
        eta,
        sigma: vec![0.0; t_steps + 1],
    };
    for t in 1..=t_steps {
        sched.sigma[t] = sched.sigma_between(t, t - 1);
    }
    Ok(sched)
}

impl NoiseSchedule {
    /// Reverse-step noise scale for an arbitrary (t, t_prev) pair.
    pub fn sigma_between(&self, t: usize, t_prev: usize) -> f64 {
        let (at, ap) = (self.alpha_bar[t], self.alpha_bar[t_prev]);
        self.eta * ((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt()
    }
}

/// Sample the forward marginal q(Y_t | Y_0) on valid cells; invalid cells
/// stay at 0. `mask` is 1.0 for valid cells.
pub fn forward_sample(
    y0: &Tensor,
    mask: &[f64],
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if eps.shape() != y0.shape() {
        return Err(Error::ShapeMismatch {
            expected: y0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    assert!(t >= 1 && t <= sched.t_steps, "t out of range");
    let sa = sched.alpha_bar[t].sqrt();
    let se = (1.0 - sched.alpha_bar[t]).sqrt();
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (y, e))| mask[i / y0.cols()] * (sa * y + se * e))
        .collect();
    Ok(Tensor::from_vec(y0.shape(), data))
}

/// One DDIM reverse step from t to t-1.
pub fn ddim_step(
    yt: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Tensor> {
    ddim_step_between(yt, y0_hat, t, t - 1, sched, eps)
}

/// DDIM reverse step for a gap-adjusted (t, t_prev) pair.
pub fn ddim_step_between(
    yt: &Tensor,
    y0_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eps: &Tensor,
) -> Result<Tensor> {
    assert!(t >= 1 && t <= sched.t_steps && t_prev < t);
    if yt.shape() != y0_hat.shape() || eps.shape() != yt.shape() {
        return Err(Error::ShapeMismatch {
            expected: yt.shape().to_vec(),
            got: y0_hat.shape().to_vec(),
        });
    }
    let at = sched.alpha_bar[t];
    let ap = sched.alpha_bar[t_prev];
    let sigma = sched.sigma_between(t, t_prev);
    let dir_sq = 1.0 - ap - sigma * sigma;
    if dir_sq < -1e-12 {
        return Err(Error::ScheduleInconsistent { t, prev: t_prev });
    }
    let dir = dir_sq.max(0.0).sqrt();
    let sa_t = at.sqrt();
    let sa_p = ap.sqrt();
    let inv = 1.0 / (1.0 - at).sqrt();
    let data = yt
        .data()
        .iter()
        .zip(y0_hat.data())
        .zip(eps.data())
        .map(|((y, y0), e)| sigma * e + sa_p * y0 + dir * (y - sa_t * y0) * inv)
        .collect();
    Ok(Tensor::from_vec(yt.shape(), data))
}

/// Standard Gaussian noise on valid cells, zero elsewhere.
pub fn masked_noise(shape: &[usize], mask: &[f64], rng: &mut impl Rng) -> Tensor {
    let cols = shape[1];
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let e: f64 = rng.sample(StandardNormal);
            e * mask[i / cols]
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Run the reverse chain over a strictly decreasing step subsequence ending
/// at 1, starting each scale map from pure noise. `predict` maps the noisy
/// scale maps and step t to clean-map estimates.
pub fn sample_loop<F>(
    mut predict: F,
    shapes: &[Vec<usize>],
    masks: &[Vec<f64>],
    sched: &NoiseSchedule,
    steps: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor], usize) -> Vec<Tensor>,
{
    if steps.is_empty() {
        return Err(Error::EmptySubsequence);
    }
    if steps[0] > sched.t_steps
        || *steps.last().unwrap() != 1
        || steps.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidParameter(
            "steps must strictly decrease from <= T down to 1".into(),
        ));
    }
    let mut maps: Vec<Tensor> = shapes
        .iter()
        .zip(masks)
        .map(|(shape, mask)| masked_noise(shape, mask, rng))
        .collect();
    for (si, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(si + 1).copied().unwrap_or(0);
        let preds = predict(&maps, t);
        assert_eq!(preds.len(), maps.len(), "predictor must return one map per scale");
        for (k, pred) in preds.iter().enumerate() {
            let eps = if sched.eta > 0.0 && t_prev > 0 {
                masked_noise(&maps[k].shape().to_vec(), &masks[k], rng)
            } else {
                Tensor::zeros(maps[k].shape())
            };
            let stepped = ddim_step_between(&maps[k], pred, t, t_prev, sched, &eps)?;
            // re-apply the validity mask so invalid cells stay at exactly 0
            let cols = stepped.cols();
            let data = stepped
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * masks[k][i / cols])
                .collect();
            maps[k] = Tensor::from_vec(stepped.shape(), data);
        }
    }
    Ok(maps)
}

/// Evenly strided inference subsequence T, T-s, ..., down to 1.
pub fn stride_steps(t_steps: usize, n_steps: usize) -> Vec<usize> {
    let n = n_steps.clamp(1, t_steps);
    let mut steps: Vec<usize> = (0..n)
        .map(|i| {
            let f = 1.0 - i as f64 / n as f64;
            ((t_steps as f64 * f).round() as usize).clamp(1, t_steps)
        })
        .collect();
    steps.dedup();
    if *steps.last().unwrap() != 1 {
        steps.push(1);
    }
    steps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_mask(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn schedule_basics() {
        let s = make_schedule(1, 0.1, 0.1, 0.0).unwrap();
        assert!((s.alpha_bar[1] - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar[0], 1.0);

        let s = make_schedule(50, 1e-4, 0.05, 0.0).unwrap();
        for t in 1..=50 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert_eq!(s.sigma[t], 0.0);
        }
        assert!(make_schedule(0, 0.1, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.0, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.3, 0.2, 0.0).is_err());
        assert!(make_schedule(10, 0.1, 0.2, 1.5).is_err());
    }

    #[test]
    fn forward_sample_endpoints() {
        let s = make_schedule(10, 1e-3, 0.2, 0.0).unwrap();
        let y0 = Tensor::from_vec(&[3, 1], vec![0.2, 0.5, 0.9]);
        let zero = Tensor::zeros(&[3, 1]);
        let mask = flat_mask(3);
        let yt = forward_sample(&y0, &mask, 5, &zero, &s).unwrap();
        let sa = s.alpha_bar[5].sqrt();
        for (a, b) in yt.data().iter().zip(y0.data()) {
            assert!((a - sa * b).abs() < 1e-15);
        }
        let eps = Tensor::from_vec(&[3, 1], vec![1.0, -2.0, 0.5]);
        let yt = forward_sample(&zero, &mask, 5, &eps, &s).unwrap();
        let se = (1.0 - s.alpha_bar[5]).sqrt();
        for (a, b) in yt.data().iter().zip(eps.data()) {
            assert!((a - se * b).abs() < 1e-15);
        }
        let bad = Tensor::zeros(&[2, 1]);
        assert!(forward_sample(&y0, &mask, 5, &bad, &s).is_err());
    }

    #[test]
    fn forward_marginal_monte_carlo() {
        let s = make_schedule(100, 1e-4, 0.05, 0.0).unwrap();
        let t = 60;
        let y0 = Tensor::from_vec(&[2, 2], vec![0.1, 0.4, 0.7, 1.0]);
        let mask = flat_mask(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut sum = vec![0.0; 4];
        let mut sumsq = vec![0.0; 4];
        for _ in 0..draws {
            let eps = masked_noise(&[2, 2], &mask, &mut rng);
            let yt = forward_sample(&y0, &mask, t, &eps, &s).unwrap();
            for (i, v) in yt.data().iter().enumerate() {
                sum[i] += v;
                sumsq[i] += v * v;
            }
        }
        let exp_mean: Vec<f64> = y0.data().iter().map(|y| s.alpha_bar[t].sqrt() * y).collect();
        let exp_var = 1.0 - s.alpha_bar[t];
        for i in 0..4 {
            let m = sum[i] / draws as f64;
            let v = sumsq[i] / draws as f64 - m * m;
            assert!((m - exp_mean[i]).abs() <= 0.01, "mean {m} vs {}", exp_mean[i]);
            assert!((v - exp_var).abs() / exp_var <= 0.02, "var {v} vs {exp_var}");
        }
    }

    #[test]
    fn ddim_step_collapses_at_t1() {
        let s = make_schedule(10, 1e-3, 0.2, 0.0).unwrap();
        let yt = Tensor::from_vec(&[2, 1], vec![0.3, -0.4]);
        let y0_hat = Tensor::from_vec(&[2, 1], vec![0.8, 0.1]);
        let zero = Tensor::zeros(&[2, 1]);
        let out = ddim_step(&yt, &y0_hat, 1, &s, &zero).unwrap();
        assert_eq!(out, y0_hat);
    }

    #[test]
    fn ddim_step_is_forward_consistent() {
        // eta=0, y0_hat = y0, Yt from the forward marginal with noise e:
        // the reverse step must land on the forward marginal at t-1 with e.
        let s = make_schedule(100, 1e-4, 0.05, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = flat_mask(3);
        let y0 = Tensor::from_vec(&[3, 1], vec![0.2, 0.6, 1.0]);
        for t in [2, 17, 55, 100] {
            let eps = masked_noise(&[3, 1], &mask, &mut rng);
            let yt = forward_sample(&y0, &mask, t, &eps, &s).unwrap();
            let zero = Tensor::zeros(&[3, 1]);
            let got = ddim_step(&yt, &y0, t, &s, &zero).unwrap();
            let want = forward_sample(&y0, &mask, t - 1, &eps, &s).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-9, "t={t}");
        }
    }

    #[test]
    fn eta_one_matches_ddpm_posterior_variance() {
        let s = make_schedule(100, 1e-4, 0.05, 1.0).unwrap();
        let t = 40;
        let yt = Tensor::from_vec(&[1, 1], vec![0.3]);
        let y0 = Tensor::from_vec(&[1, 1], vec![0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..draws {
            let e: f64 = rng.sample(StandardNormal);
            let eps = Tensor::from_vec(&[1, 1], vec![e]);
            let out = ddim_step(&yt, &y0, t, &s, &eps).unwrap();
            let v = out.item();
            sum += v;
            sumsq += v * v;
        }
        let m = sum / draws as f64;
        let var = sumsq / draws as f64 - m * m;
        let beta_tilde = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
        assert!((var - beta_tilde).abs() / beta_tilde <= 0.02, "var {var} vs {beta_tilde}");
    }

    #[test]
    fn sample_loop_with_oracle_predictor() {
        let s = make_schedule(100, 1e-4, 0.05, 0.0).unwrap();
        let y0 = Tensor::from_vec(&[2, 2], vec![0.9, 0.2, 0.0, 0.5]);
        let mask = vec![1.0, 1.0];
        let shapes = vec![vec![2, 2]];
        let masks = vec![mask];
        let steps: Vec<usize> = (1..=100).rev().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let oracle = |_maps: &[Tensor], _t: usize| vec![y0.clone()];
        let full = sample_loop(oracle, &shapes, &masks, &s, &steps, &mut rng).unwrap();
        assert!(full[0].max_abs_diff(&y0) <= 1e-12);

        let strided = stride_steps(100, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let out = sample_loop(|_m: &[Tensor], _t| vec![y0.clone()], &shapes, &masks, &s, &strided, &mut rng)
            .unwrap();
        assert!(out[0].max_abs_diff(&full[0]) <= 1e-12);
    }

    #[test]
    fn sample_loop_determinism_and_validation() {
        let s = make_schedule(20, 1e-3, 0.1, 1.0).unwrap();
        let shapes = vec![vec![2, 1]];
        let masks = vec![vec![1.0, 1.0]];
        let steps = vec![20, 10, 1];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_loop(
                |m: &[Tensor], _t| vec![m[0].map(|x| x * 0.5)],
                &shapes,
                &masks,
                &s,
                &steps,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42)[0].data(), run(43)[0].data());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_loop(|_: &[Tensor], _| vec![], &shapes, &masks, &s, &[], &mut rng),
            Err(Error::EmptySubsequence)
        ));
        assert!(sample_loop(
            |m: &[Tensor], _| m.to_vec(),
            &shapes,
            &masks,
            &s,
            &[5, 5, 1],
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn stride_steps_shape() {
        let s = stride_steps(100, 25);
        assert_eq!(s[0], 100);
        assert_eq!(*s.last().unwrap(), 1);
        assert!(s.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(stride_steps(100, 100).len(), 100);
    }
}
