//! Local update rules and server aggregation rules.
//!
//! * FedAvg: `θ = Σ_k (n_k / n) θ_k`.
//! * FedProx: local loss plus `μ/2 ‖θ − θ_init‖²`.
//! * SCAFFOLD (option II control variates): local step
//!   `y ← y − η (g(y) − c_i + c)`, then
//!   `c_i⁺ = c_i − c + (x − y) / (K η)` after `K` local steps.
//! * FedNova: `θ = θ_g − τ_eff Σ_k p_k (θ_g − θ_k) / τ_k` with
//!   `τ_eff = Σ_k p_k τ_k`.
//! * Ditto: personalized model `v` minimizes `F_k(v) + λ/2 ‖v − θ_g‖²`
//!   while the global model is trained with plain local SGD.

use super::model::{loss_and_grad, ModelSpec, Sample};
use super::FedError;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRun {
    pub theta: Vec<f64>,
    /// Number of SGD steps taken.
    pub steps: usize,
    /// Mean minibatch loss over the final epoch.
    pub loss: f64,
}

/// Plain minibatch SGD. `correction` may add extra terms to the gradient in
/// place given the current parameters.
pub fn local_sgd(
    spec: &ModelSpec,
    theta_init: &[f64],
    shard: &[Sample],
    settings: &LocalSettings,
    rng: &mut ChaCha8Rng,
    mut correction: impl FnMut(&[f64], &mut [f64]),
) -> Result<LocalRun, FedError> {
    let mut theta = theta_init.to_vec();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut steps = 0;
    let mut last_loss = 0.0;
    let batch_size = settings.batch_size.max(1);
    for _ in 0..settings.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &shard[i]).collect();
            let (loss, mut grad) = loss_and_grad(spec, &theta, &batch);
            if !loss.is_finite() {
                return Err(FedError::NonFinite(format!("local loss {loss} at step {steps}")));
            }
            correction(&theta, &mut grad);
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= settings.learning_rate * g;
            }
            steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        last_loss = if batches > 0 { epoch_loss / batches as f64 } else { 0.0 };
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(FedError::NonFinite("parameters diverged".into()));
    }
    Ok(LocalRun {
        theta,
        steps,
        loss: last_loss,
    })
}

fn check_lengths<T: AsRef<[f64]>>(vectors: &[T]) -> Result<usize, FedError> {
    let first = vectors.first().ok_or(FedError::Empty)?.as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != first) {
        return Err(FedError::LengthMismatch);
    }
    Ok(first)
}

/// Normalized sample-count weights `n_k / Σ n`.
pub fn sample_weights(counts: &[usize]) -> Result<Vec<f64>, FedError> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(FedError::ZeroTotal);
    }
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

pub fn aggregate_fedavg<T: AsRef<[f64]>>(params: &[T], counts: &[usize]) -> Result<Vec<f64>, FedError> {
    let len = check_lengths(params)?;
    if counts.len() != params.len() {
        return Err(FedError::LengthMismatch);
    }
    let weights = sample_weights(counts)?;
    let mut out = vec![0.0; len];
    for (p, w) in params.iter().zip(&weights) {
        for (o, v) in out.iter_mut().zip(p.as_ref()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Gradient of `μ/2 ‖θ − anchor‖²`.
pub fn proximal_gradient(theta: &[f64], anchor: &[f64], mu: f64) -> Vec<f64> {
    theta.iter().zip(anchor).map(|(t, a)| mu * (t - a)).collect()
}

pub fn proximal_value(theta: &[f64], anchor: &[f64], mu: f64) -> f64 {
    0.5 * mu * theta.iter().zip(anchor).map(|(t, a)| (t - a).powi(2)).sum::<f64>()
}

pub fn local_update_fedprox(
    spec: &ModelSpec,
    theta_init: &[f64],
    shard: &[Sample],
    mu: f64,
    settings: &LocalSettings,
    rng: &mut ChaCha8Rng,
) -> Result<LocalRun, FedError> {
    if mu < 0.0 {
        return Err(FedError::InvalidConfig("mu must be non-negative".into()));
    }
    if mu == 0.0 {
        return local_sgd(spec, theta_init, shard, settings, rng, |_, _| {});
    }
    local_sgd(spec, theta_init, shard, settings, rng, |theta, grad| {
        for ((g, t), a) in grad.iter_mut().zip(theta).zip(theta_init) {
            *g += mu * (t - a);
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaffoldUpdate {
    pub run: LocalRun,
    pub control_new: Vec<f64>,
}

pub fn local_update_scaffold(
    spec: &ModelSpec,
    theta_init: &[f64],
    shard: &[Sample],
    control_global: &[f64],
    control_local: &[f64],
    settings: &LocalSettings,
    rng: &mut ChaCha8Rng,
) -> Result<ScaffoldUpdate, FedError> {
    if control_global.len() != theta_init.len() || control_local.len() != theta_init.len() {
        return Err(FedError::LengthMismatch);
    }
    let shift: Vec<f64> = control_global.iter().zip(control_local).map(|(c, ci)| c - ci).collect();
    let run = local_sgd(spec, theta_init, shard, settings, rng, |_, grad| {
        for (g, s) in grad.iter_mut().zip(&shift) {
            *g += s;
        }
    })?;
    let control_new = if run.steps == 0 {
        control_local.to_vec()
    } else {
        let k_eta = run.steps as f64 * settings.learning_rate;
        control_local
            .iter()
            .zip(control_global)
            .zip(theta_init.iter().zip(&run.theta))
            .map(|((ci, c), (x, y))| ci - c + (x - y) / k_eta)
            .collect()
    };
    Ok(ScaffoldUpdate { run, control_new })
}

pub fn aggregate_fednova<T: AsRef<[f64]>>(
    global: &[f64],
    locals: &[T],
    taus: &[usize],
    counts: &[usize],
) -> Result<Vec<f64>, FedError> {
    let len = check_lengths(locals)?;
    if len != global.len() || taus.len() != locals.len() || counts.len() != locals.len() {
        return Err(FedError::LengthMismatch);
    }
    if taus.contains(&0) {
        return Err(FedError::InvalidConfig("every local step count must be at least 1".into()));
    }
    let p = sample_weights(counts)?;
    let tau_eff: f64 = p.iter().zip(taus).map(|(pk, &t)| pk * t as f64).sum();
    let mut direction = vec![0.0; len];
    for ((local, pk), &tau) in locals.iter().zip(&p).zip(taus) {
        for ((d, g), l) in direction.iter_mut().zip(global).zip(local.as_ref()) {
            *d += pk * (g - l) / tau as f64;
        }
    }
    Ok(global.iter().zip(&direction).map(|(g, d)| g - tau_eff * d).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DittoUpdate {
    pub global_run: LocalRun,
    pub personal_run: LocalRun,
}

/// Gradient of `λ/2 ‖v − θ_g‖²`.
pub fn ditto_regularizer_gradient(personal: &[f64], global: &[f64], lambda: f64) -> Vec<f64> {
    proximal_gradient(personal, global, lambda)
}

pub fn local_update_ditto(
    spec: &ModelSpec,
    theta_global: &[f64],
    personal: &[f64],
    shard: &[Sample],
    lambda: f64,
    settings: &LocalSettings,
    rng: &mut ChaCha8Rng,
) -> Result<DittoUpdate, FedError> {
    if lambda < 0.0 {
        return Err(FedError::InvalidConfig("lambda must be non-negative".into()));
    }
    if personal.len() != theta_global.len() {
        return Err(FedError::LengthMismatch);
    }
    let mut personal_rng = rng.clone();
    let global_run = local_sgd(spec, theta_global, shard, settings, rng, |_, _| {})?;
    let personal_run = if lambda == 0.0 {
        local_sgd(spec, personal, shard, settings, &mut personal_rng, |_, _| {})?
    } else {
        local_sgd(spec, personal, shard, settings, &mut personal_rng, |v, grad| {
            for ((g, vi), gi) in grad.iter_mut().zip(v).zip(theta_global) {
                *g += lambda * (vi - gi);
            }
        })?
    };
    Ok(DittoUpdate {
        global_run,
        personal_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn shard(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let x = (0..4)
                    .map(|j| if (j % 2) == y { 1.0 } else { -1.0 } + rng.random_range(-0.3..0.3))
                    .collect();
                Sample { x, y }
            })
            .collect()
    }

    const SETTINGS: LocalSettings = LocalSettings {
        epochs: 2,
        batch_size: 4,
        learning_rate: 0.1,
    };

    #[test]
    fn fedavg_equal_counts_is_midpoint() {
        let out = aggregate_fedavg(&[vec![1.0, 3.0], vec![3.0, 5.0]], &[10, 10]).unwrap();
        assert_eq!(out, vec![2.0, 4.0]);
    }

    #[test]
    fn fedavg_weighted_by_counts() {
        // 1/4 * [0,0] + 3/4 * [4,8] = [3,6]
        let out = aggregate_fedavg(&[vec![0.0, 0.0], vec![4.0, 8.0]], &[1, 3]).unwrap();
        assert_eq!(out, vec![3.0, 6.0]);
    }

    #[test]
    fn fedavg_single_client_is_identity() {
        let theta = vec![0.3, -1.7, 2.5];
        assert_eq!(aggregate_fedavg(&[theta.clone()], &[7]).unwrap(), theta);
    }

    #[test]
    fn fedavg_rejects_bad_inputs() {
        assert_eq!(
            aggregate_fedavg(&[vec![1.0], vec![1.0, 2.0]], &[1, 1]),
            Err(FedError::LengthMismatch)
        );
        assert_eq!(aggregate_fedavg(&[vec![1.0]], &[0]), Err(FedError::ZeroTotal));
        assert_eq!(aggregate_fedavg::<Vec<f64>>(&[], &[]), Err(FedError::Empty));
    }

    #[test]
    fn proximal_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let theta = rand_vec(&mut rng, 6);
            let anchor = rand_vec(&mut rng, 6);
            let mu = rng.random_range(0.01..3.0);
            let g = proximal_gradient(&theta, &anchor, mu);
            let h = 1e-5;
            for i in 0..theta.len() {
                let (mut p, mut m) = (theta.clone(), theta.clone());
                p[i] += h;
                m[i] -= h;
                let fd = (proximal_value(&p, &anchor, mu) - proximal_value(&m, &anchor, mu)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(1e-8);
                assert!(rel < 1e-5, "rel {rel}");
            }
        }
    }

    #[test]
    fn proximal_gradient_vanishes_at_anchor() {
        let theta = vec![0.4, -0.2, 9.0];
        assert!(proximal_gradient(&theta, &theta, 0.7).iter().all(|&g| g == 0.0));
        assert!(ditto_regularizer_gradient(&theta, &theta, 5.0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fedprox_mu_zero_is_plain_sgd() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(1, 10);
        let theta = rand_vec(&mut ChaCha8Rng::seed_from_u64(2), spec.param_count());
        let a = local_update_fedprox(&spec, &theta, &data, 0.0, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = local_sgd(&spec, &theta, &data, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(9), |_, _| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fedprox_pulls_toward_anchor() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(1, 10);
        let theta = vec![0.0; spec.param_count()];
        let dist = |mu: f64| {
            let r = local_update_fedprox(&spec, &theta, &data, mu, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            r.theta.iter().map(|v| v * v).sum::<f64>()
        };
        assert!(dist(1.0) < dist(0.0));
    }

    #[test]
    fn scaffold_with_zero_controls_is_plain_sgd() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(5, 12);
        let theta = vec![0.0; spec.param_count()];
        let zeros = vec![0.0; spec.param_count()];
        let one_step = LocalSettings {
            epochs: 1,
            batch_size: 12,
            learning_rate: 0.1,
        };
        let s = local_update_scaffold(&spec, &theta, &data, &zeros, &zeros, &one_step, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let p = local_sgd(&spec, &theta, &data, &one_step, &mut ChaCha8Rng::seed_from_u64(3), |_, _| {}).unwrap();
        assert_eq!(s.run, p);
    }

    #[test]
    fn scaffold_control_update_matches_definition() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta = rand_vec(&mut rng, spec.param_count());
        let c = rand_vec(&mut rng, spec.param_count());
        let ci = rand_vec(&mut rng, spec.param_count());
        let u = local_update_scaffold(&spec, &theta, &data, &c, &ci, &SETTINGS, &mut rng).unwrap();
        let k_eta = u.run.steps as f64 * SETTINGS.learning_rate;
        for j in 0..theta.len() {
            let expect = ci[j] - c[j] + (theta[j] - u.run.theta[j]) / k_eta;
            assert!((u.control_new[j] - expect).abs() < 1e-12);
        }
    }

    /// Brute-force FedNova closed form on a 2-client unequal-τ case.
    #[test]
    fn fednova_two_clients_unequal_tau() {
        let global = [1.0, -1.0];
        let locals = [vec![0.0, 0.0], vec![3.0, 1.0]];
        let taus = [2, 4];
        let counts = [1, 3];
        // p = (1/4, 3/4); tau_eff = 0.5 + 3 = 3.5
        // d = 1/4*(g - l1)/2 + 3/4*(g - l2)/4 = [1/8 - 3/8, -1/8 - 3/8] = [-0.25, -0.5]
        // θ = g - 3.5 d = [1.875, 0.75]
        let out = aggregate_fednova(&global, &locals, &taus, &counts).unwrap();
        assert!((out[0] - 1.875).abs() < 1e-12 && (out[1] - 0.75).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn fednova_equal_tau_matches_fedavg() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let global = rand_vec(&mut rng, 5);
        let locals: Vec<Vec<f64>> = (0..3).map(|_| rand_vec(&mut rng, 5)).collect();
        let counts = [3, 9, 4];
        let nova = aggregate_fednova(&global, &locals, &[6, 6, 6], &counts).unwrap();
        let avg = aggregate_fedavg(&locals, &counts).unwrap();
        for (a, b) in nova.iter().zip(&avg) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn fednova_single_client_identity() {
        let global = [0.5, 0.5];
        let local = vec![vec![2.0, -3.0]];
        let out = aggregate_fednova(&global, &local, &[7], &[4]).unwrap();
        assert!((out[0] - 2.0).abs() < 1e-12 && (out[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn ditto_lambda_zero_decouples_personal_model() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(2, 10);
        let g1 = vec![0.0; spec.param_count()];
        let g2 = vec![1.0; spec.param_count()];
        let v = vec![0.2; spec.param_count()];
        let a = local_update_ditto(&spec, &g1, &v, &data, 0.0, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = local_update_ditto(&spec, &g2, &v, &data, 0.0, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.personal_run, b.personal_run);
    }

    #[test]
    fn ditto_distance_decreases_with_lambda() {
        let spec = ModelSpec::logistic(4, 2);
        let data = shard(2, 16);
        let global = vec![0.0; spec.param_count()];
        let personal = vec![0.0; spec.param_count()];
        let dists: Vec<f64> = [0.0, 0.1, 1.0, 10.0]
            .iter()
            .map(|&lam| {
                let u = local_update_ditto(&spec, &global, &personal, &data, lam, &SETTINGS, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
                u.personal_run.theta.iter().zip(&global).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        assert!(dists.windows(2).all(|w| w[1] < w[0]), "{dists:?}");
    }

    #[test]
    fn ditto_regularizer_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let v = rand_vec(&mut rng, 8);
        let g = rand_vec(&mut rng, 8);
        let grad = ditto_regularizer_gradient(&v, &g, 2.5);
        let h = 1e-5;
        for i in 0..v.len() {
            let (mut p, mut m) = (v.clone(), v.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (proximal_value(&p, &g, 2.5) - proximal_value(&m, &g, 2.5)) / (2.0 * h);
            assert!((fd - grad[i]).abs() / grad[i].abs().max(1e-8) < 1e-5);
        }
    }
}
