//! Exact multivariate Hawkes processes with exponential kernels.
//!
//! Serves two roles: a closed-form log-likelihood oracle that the Monte Carlo
//! survival integral is checked against, and a thinning simulator that
//! generates synthetic ground-truth datasets with known dynamics.
//!
//! The intensity of type `c` is
//! `λ_c(t) = μ_c + Σ_{t_k ≤ t} α[c, c_k] · exp(-β[c, c_k] (t - t_k))`,
//! right-continuous: it jumps by `α[c, c']` at an event of type `c'`.

use crate::data::{EventDataset, EventSequence};
use crate::error::{Error, Result};
use crate::rng;

/// Base rates and exponential excitation kernels.
///
/// `alpha` and `beta` are `K×K` row-major with row = target type, column =
/// source type. `beta` must be strictly positive; `mu` and `alpha`
/// non-negative (the simulator cannot thin inhibitory intensities).
#[derive(Clone, Debug, PartialEq)]
pub struct HawkesParams {
    num_types: usize,
    mu: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl HawkesParams {
    pub fn new(mu: Vec<f64>, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let k = mu.len();
        if k == 0 || alpha.len() != k * k || beta.len() != k * k {
            return Err(Error::Contract(format!(
                "expected mu[K], alpha[K*K], beta[K*K]; got {}, {}, {}",
                mu.len(),
                alpha.len(),
                beta.len()
            )));
        }
        if mu.iter().any(|&x| !(x >= 0.0)) || alpha.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Contract("mu and alpha must be non-negative".into()));
        }
        if beta.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Contract("beta must be strictly positive".into()));
        }
        Ok(HawkesParams {
            num_types: k,
            mu,
            alpha,
            beta,
        })
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn alpha(&self, target: usize, source: usize) -> f64 {
        self.alpha[target * self.num_types + source]
    }

    pub fn beta(&self, target: usize, source: usize) -> f64 {
        self.beta[target * self.num_types + source]
    }

    /// Spectral radius of the branching matrix `[α/β]`, by power iteration.
    /// Stationarity requires this to be below 1.
    pub fn branching_spectral_radius(&self) -> f64 {
        let k = self.num_types;
        let m: Vec<f64> = self
            .alpha
            .iter()
            .zip(&self.beta)
            .map(|(a, b)| a / b)
            .collect();
        let mut v = vec![1.0 / (k as f64).sqrt(); k];
        let mut radius = 0.0;
        for _ in 0..200 {
            let mut w = vec![0.0; k];
            for i in 0..k {
                for j in 0..k {
                    w[i] += m[i * k + j] * v[j];
                }
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            radius = norm;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / norm;
            }
        }
        radius
    }

    pub fn is_stable(&self) -> bool {
        self.branching_spectral_radius() < 1.0
    }
}

/// Conditional intensity of type `c` at time `t`, given the history.
///
/// Right-continuous: events at exactly `t` are included. `t` must not
/// precede the last history event.
pub fn intensity(p: &HawkesParams, history: &EventSequence, t: f64, c: usize) -> Result<f64> {
    Ok(intensity_all(p, history, t)?[c])
}

/// All K intensities at `t` in one pass.
pub fn intensity_all(p: &HawkesParams, history: &EventSequence, t: f64) -> Result<Vec<f64>> {
    if let Some(&last) = history.times().last() {
        if t < last {
            return Err(Error::Contract(format!(
                "intensity query at t = {t} precedes the history frontier {last}"
            )));
        }
    }
    let mut lam = p.mu.clone();
    for (&tk, &ck) in history.times().iter().zip(history.types()) {
        if tk > t {
            break;
        }
        let dt = t - tk;
        for (c, l) in lam.iter_mut().enumerate() {
            *l += p.alpha(c, ck) * (-p.beta(c, ck) * dt).exp();
        }
    }
    Ok(lam)
}

/// Exact negative log-likelihood of a sequence, integrating from 0 to the
/// last event time. Ties contribute in index order: the event term for event
/// `i` sums excitation from indices `< i` only.
pub fn exact_nll(p: &HawkesParams, seq: &EventSequence) -> Result<f64> {
    let k = p.num_types;
    let times = seq.times();
    let types = seq.types();
    let t_end = *times.last().unwrap();

    let mut log_term = 0.0;
    for i in 0..times.len() {
        let c = types[i];
        let mut lam = p.mu[c];
        for j in 0..i {
            lam += p.alpha(c, types[j]) * (-p.beta(c, types[j]) * (times[i] - times[j])).exp();
        }
        if lam <= 0.0 {
            return Err(Error::Contract(format!(
                "non-positive intensity {lam} at event {i}"
            )));
        }
        log_term += lam.ln();
    }

    let mut compensator = p.mu.iter().sum::<f64>() * t_end;
    for (&tk, &ck) in times.iter().zip(types) {
        for c in 0..k {
            let a = p.alpha(c, ck);
            let b = p.beta(c, ck);
            compensator += a / b * (1.0 - (-b * (t_end - tk)).exp());
        }
    }
    Ok(-log_term + compensator)
}

/// Total-compensator increments between consecutive events (the first from 0
/// to `t_1`). Under the generating model these are unit-exponential.
pub fn compensator_increments(p: &HawkesParams, seq: &EventSequence) -> Vec<f64> {
    let k = p.num_types;
    let times = seq.times();
    let types = seq.types();
    // state[c*K + src] = decayed excitation of target c from source src
    let mut state = vec![0.0; k * k];
    let mut prev = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let mu_total: f64 = p.mu.iter().sum();
    for (&t, &c_new) in times.iter().zip(types) {
        let dt = t - prev;
        let mut inc = mu_total * dt;
        for c in 0..k {
            for src in 0..k {
                let b = p.beta(c, src);
                let s = state[c * k + src];
                inc += s / b * (1.0 - (-b * dt).exp());
                state[c * k + src] = s * (-b * dt).exp();
            }
        }
        out.push(inc);
        for c in 0..k {
            state[c * k + c_new] += p.alpha(c, c_new);
        }
        prev = t;
    }
    out
}

/// Ogata thinning over `[0, horizon]`. Returns raw (time, type) pairs; an
/// empty result is a valid draw.
///
/// The bound is the total intensity at the current frontier, which dominates
/// until the next event because exponential kernels only decay; after every
/// rejection the bound is re-tightened at the rejected point. Excitation is
/// tracked as a decayed `K×K` state, so each proposal costs `O(K²)` rather
/// than a scan of the history.
pub fn simulate(p: &HawkesParams, horizon: f64, seed: u64) -> Vec<(f64, usize)> {
    let k = p.num_types;
    let mut r = rng::derive(seed, 1, 0);
    let mut state = vec![0.0; k * k]; // state[c*K+src]
    let mut s = 0.0;
    let mut events = Vec::new();

    let lambda_of = |state: &[f64], c: usize| -> f64 {
        p.mu[c] + state[c * k..(c + 1) * k].iter().sum::<f64>()
    };

    loop {
        let mut bound = 0.0;
        for c in 0..k {
            bound += lambda_of(&state, c);
        }
        if bound <= 0.0 {
            break;
        }
        let delta = -rng::uniform_open_closed(&mut r).ln() / bound;
        let cand = s + delta;
        if cand > horizon {
            break;
        }
        // decay state to the candidate time
        for c in 0..k {
            for src in 0..k {
                state[c * k + src] *= (-p.beta(c, src) * delta).exp();
            }
        }
        let lam: Vec<f64> = (0..k).map(|c| lambda_of(&state, c)).collect();
        let total: f64 = lam.iter().sum();
        s = cand;
        if rng::uniform01(&mut r) < total / bound {
            // accepted: draw the type proportional to λ_c
            let mut u = rng::uniform01(&mut r) * total;
            let mut ty = k - 1;
            for (c, &l) in lam.iter().enumerate() {
                if u < l {
                    ty = c;
                    break;
                }
                u -= l;
            }
            for c in 0..k {
                state[c * k + ty] += p.alpha(c, ty);
            }
            events.push((s, ty));
        }
        // rejected: loop re-tightens the bound at the rejected point
    }
    events
}

/// Maximum-likelihood homogeneous Poisson rates (`α = 0`): per-type event
/// count over total observed time. The reference baseline any sequence model
/// must beat. Rates are floored at 1e-12 so unseen types stay scoreable.
pub fn fit_poisson(ds: &EventDataset) -> Result<HawkesParams> {
    let k = ds.num_types;
    let total_time: f64 = ds.sequences.iter().map(|s| s.times().last().unwrap()).sum();
    if total_time <= 0.0 {
        return Err(Error::Contract("cannot fit rates to zero observed time".into()));
    }
    let mut counts = vec![0usize; k];
    for s in &ds.sequences {
        for &c in s.types() {
            counts[c] += 1;
        }
    }
    let mu = counts.iter().map(|&c| (c as f64 / total_time).max(1e-12)).collect();
    HawkesParams::new(mu, vec![0.0; k * k], vec![1.0; k * k])
}

/// Simulates `n` non-empty sequences into a dataset. Empty draws (possible
/// for tiny `μ·horizon`) are re-drawn from the next seed lane.
pub fn simulate_dataset(p: &HawkesParams, n: usize, horizon: f64, seed: u64) -> Result<EventDataset> {
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut attempt = 0u64;
        loop {
            let lane = seed ^ (i as u64).wrapping_mul(0x0100_0000_01b3) ^ (attempt << 48);
            let evs = simulate(p, horizon, lane);
            if !evs.is_empty() {
                let times = evs.iter().map(|e| e.0).collect();
                let types = evs.iter().map(|e| e.1).collect();
                sequences.push(EventSequence::new(times, types)?);
                break;
            }
            attempt += 1;
            if attempt > 1000 {
                return Err(Error::Contract(
                    "simulate_dataset: persistent empty draws; raise horizon or mu".into(),
                ));
            }
        }
    }
    EventDataset::new(p.num_types, sequences, "simulated")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_type(mu: f64, alpha: f64, beta: f64) -> HawkesParams {
        HawkesParams::new(vec![mu], vec![alpha], vec![beta]).unwrap()
    }

    #[test]
    fn intensity_with_empty_excitation() {
        let p = one_type(0.5, 0.0, 1.0);
        let h = EventSequence::new(vec![0.0], vec![0]).unwrap();
        // alpha = 0 so only the base rate remains
        assert!((intensity(&p, &h, 5.0, 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn intensity_just_after_event() {
        let p = one_type(0.5, 0.8, 1.0);
        let h = EventSequence::new(vec![0.0], vec![0]).unwrap();
        assert!((intensity(&p, &h, 0.0, 0).unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn intensity_after_one_decay_halflife() {
        let p = one_type(0.5, 0.8, 1.0);
        let h = EventSequence::new(vec![0.0], vec![0]).unwrap();
        let lam = intensity(&p, &h, 2.0f64.ln(), 0).unwrap();
        assert!((lam - 0.9).abs() < 1e-15);
    }

    #[test]
    fn intensity_query_before_frontier_rejected() {
        let p = one_type(0.5, 0.8, 1.0);
        let h = EventSequence::new(vec![0.0, 1.0], vec![0, 0]).unwrap();
        assert!(intensity(&p, &h, 0.5, 0).is_err());
    }

    #[test]
    fn intensity_jumps_by_alpha() {
        let p = HawkesParams::new(
            vec![0.3, 0.1],
            vec![0.2, 0.5, 0.4, 0.1],
            vec![1.0, 2.0, 1.5, 1.0],
        )
        .unwrap();
        let before = EventSequence::new(vec![1.0], vec![1]).unwrap();
        let after = EventSequence::new(vec![1.0, 2.0], vec![1, 0]).unwrap();
        for c in 0..2 {
            let pre = intensity(&p, &before, 2.0, c).unwrap();
            let post = intensity(&p, &after, 2.0, c).unwrap();
            assert!((post - pre - p.alpha(c, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_nll_closed_form() {
        let p = one_type(2.0, 0.0, 1.0);
        let seq = EventSequence::new(vec![0.5, 1.0], vec![0, 0]).unwrap();
        let nll = exact_nll(&p, &seq).unwrap();
        let expected = -2.0 * 2.0f64.ln() + 2.0;
        assert!((nll - expected).abs() < 1e-12, "nll {nll}");
    }

    /// Composite-Simpson integration of the total intensity, piecewise over
    /// inter-event intervals. Independent of the closed-form compensator.
    fn quadrature_nll(p: &HawkesParams, seq: &EventSequence) -> f64 {
        let times = seq.times();
        let types = seq.types();
        let mut log_term = 0.0;
        for i in 0..times.len() {
            let c = types[i];
            let mut lam = p.mu()[c];
            for j in 0..i {
                lam += p.alpha(c, types[j]) * (-p.beta(c, types[j]) * (times[i] - times[j])).exp();
            }
            log_term += lam.ln();
        }
        // per-interval smooth branch: interval i sees events with index < i
        let total_at = |hist: usize, t: f64| -> f64 {
            let mut s = p.mu().iter().sum::<f64>();
            for (&tk, &ck) in times[..hist].iter().zip(&types[..hist]) {
                for c in 0..p.num_types() {
                    s += p.alpha(c, ck) * (-p.beta(c, ck) * (t - tk)).exp();
                }
            }
            s
        };
        let mut integral = 0.0;
        let mut prev = 0.0;
        for (i, &t) in times.iter().enumerate() {
            let n = 2000; // even
            let h = (t - prev) / n as f64;
            if h > 0.0 {
                let mut acc = total_at(i, prev) + total_at(i, t);
                for j in 1..n {
                    let x = prev + j as f64 * h;
                    acc += total_at(i, x) * if j % 2 == 1 { 4.0 } else { 2.0 };
                }
                integral += acc * h / 3.0;
            }
            prev = t;
        }
        -log_term + integral
    }

    #[test]
    fn exact_nll_matches_quadrature() {
        let p = one_type(0.5, 0.8, 1.0);
        let seq = EventSequence::new(vec![0.3, 0.9], vec![0, 0]).unwrap();
        let exact = exact_nll(&p, &seq).unwrap();
        let quad = quadrature_nll(&p, &seq);
        assert!((exact - quad).abs() < 1e-8, "exact {exact} quad {quad}");
    }

    #[test]
    fn exact_nll_matches_quadrature_multitype() {
        let p = HawkesParams::new(
            vec![0.4, 0.2],
            vec![0.3, 0.6, 0.5, 0.2],
            vec![1.2, 2.0, 0.8, 1.5],
        )
        .unwrap();
        let seq = EventSequence::new(vec![0.2, 0.5, 1.1, 1.6, 2.4], vec![0, 1, 1, 0, 1]).unwrap();
        let exact = exact_nll(&p, &seq).unwrap();
        let quad = quadrature_nll(&p, &seq);
        assert!((exact - quad).abs() < 1e-8, "exact {exact} quad {quad}");
    }

    #[test]
    fn poisson_mean_count() {
        let p = one_type(2.0, 0.0, 1.0);
        let mut total = 0usize;
        let n_seeds = 50;
        for seed in 0..n_seeds {
            total += simulate(&p, 1000.0, seed).len();
        }
        let mean = total as f64 / n_seeds as f64;
        // var of a Poisson(2000) count is 2000
        let se = (2000.0f64).sqrt() / (n_seeds as f64).sqrt();
        assert!((mean - 2000.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn stationary_rate_recovered() {
        let p = one_type(0.5, 0.8, 1.0);
        let horizon = 5000.0;
        let mut rates = Vec::new();
        for seed in 0..20 {
            let n = simulate(&p, horizon, seed).len();
            rates.push(n as f64 / horizon);
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let expected = 0.5 / (1.0 - 0.8);
        assert!(
            (mean - expected).abs() / expected < 0.05,
            "rate {mean} vs {expected}"
        );
    }

    #[test]
    fn simulate_is_deterministic() {
        let p = one_type(0.5, 0.8, 1.0);
        let a = simulate(&p, 100.0, 7);
        let b = simulate(&p, 100.0, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn time_rescaling_residuals() {
        let p = HawkesParams::new(
            vec![0.4, 0.3],
            vec![0.5, 0.2, 0.3, 0.4],
            vec![1.0, 1.0, 2.0, 1.5],
        )
        .unwrap();
        let mut incs = Vec::new();
        let mut seed = 0;
        while incs.len() < 10_000 {
            let evs = simulate(&p, 2000.0, seed);
            seed += 1;
            if evs.is_empty() {
                continue;
            }
            let times: Vec<f64> = evs.iter().map(|e| e.0).collect();
            let types: Vec<usize> = evs.iter().map(|e| e.1).collect();
            let seq = EventSequence::new(times, types).unwrap();
            incs.extend(compensator_increments(&p, &seq));
        }
        let mean = incs.iter().sum::<f64>() / incs.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "residual mean {mean}");
    }

    #[test]
    fn spectral_radius_and_stability() {
        let stable = one_type(0.5, 0.8, 1.0);
        assert!((stable.branching_spectral_radius() - 0.8).abs() < 1e-9);
        assert!(stable.is_stable());
        let unstable = one_type(0.5, 1.5, 1.0);
        assert!(!unstable.is_stable());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(HawkesParams::new(vec![-0.1], vec![0.0], vec![1.0]).is_err());
        assert!(HawkesParams::new(vec![0.1], vec![-0.2], vec![1.0]).is_err());
        assert!(HawkesParams::new(vec![0.1], vec![0.2], vec![0.0]).is_err());
        assert!(HawkesParams::new(vec![0.1], vec![0.2, 0.3], vec![1.0]).is_err());
    }

    #[test]
    fn simulate_dataset_shapes() {
        let p = one_type(1.0, 0.2, 1.0);
        let ds = simulate_dataset(&p, 5, 10.0, 3).unwrap();
        assert_eq!(ds.sequences.len(), 5);
        assert_eq!(ds.num_types, 1);
        for seq in &ds.sequences {
            assert!(seq.len() >= 1);
        }
    }
}
