//! Closed-form packet-loss and frame-corruption estimates.
//!
//! A packet preceding the RERR arrival by `n` slots of `T_data` is in the GOOD
//! state if the failure-to-RERR delay fits in the `n - 1` slots after it, and
//! in the FAIL state if the delay ends inside its own slot:
//!
//! ```text
//! Pg(n) = P[T_delay <= (n-1) T_data]
//! Pf(n) = P[(n-1) T_data < T_delay <= n T_data]
//! Pr(n) = lambda_g Pg(n) + lambda_f Pf(n)
//! ```
//!
//! `n = 1` is the most recent packet sent before the RERR arrived. Packets for
//! which the delay exceeds their whole slot get `Pr(n) = 0`, exactly as the
//! formulas give.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn invalid(msg: impl Into<String>) -> EstimatorError {
    EstimatorError::InvalidParameter(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Payload size L in bits.
    pub payload_bits: u64,
    /// Transmission rate R_t in bits per second.
    pub rate_bps: f64,
    pub t_retrans: SimTime,
    pub t_rerr: SimTime,
    pub lambda_g: f64,
    pub lambda_f: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            payload_bits: 8_000,
            rate_bps: 1e6,
            t_retrans: SimTime::from_millis(10),
            t_rerr: SimTime::from_millis(5),
            lambda_g: 0.0,
            lambda_f: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !self.rate_bps.is_finite() || self.rate_bps <= 0.0 {
            return Err(invalid(format!("rate must be positive, got {}", self.rate_bps)));
        }
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_f", self.lambda_f)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} = {v} outside [0,1]")));
            }
        }
        if self.lambda_g > self.lambda_f {
            return Err(invalid(format!(
                "lambda_g ({}) exceeds lambda_f ({})",
                self.lambda_g, self.lambda_f
            )));
        }
        Ok(())
    }

    pub fn t_data(&self) -> Result<SimTime, EstimatorError> {
        t_data(self.payload_bits, self.rate_bps)
    }

    pub fn t_delay(&self) -> SimTime {
        t_delay(self.t_retrans, self.t_rerr)
    }
}

/// Law of the failure-to-RERR delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DelayDistribution {
    Deterministic(SimTime),
    /// Sorted, non-empty.
    Empirical(Vec<SimTime>),
}

impl DelayDistribution {
    pub fn empirical(mut samples: Vec<SimTime>) -> Result<Self, EstimatorError> {
        if samples.is_empty() {
            return Err(invalid("empirical delay distribution needs at least one sample"));
        }
        samples.sort();
        Ok(DelayDistribution::Empirical(samples))
    }

    /// P[T_delay <= t]
    fn cdf(&self, t: SimTime) -> f64 {
        match self {
            DelayDistribution::Deterministic(v) => {
                if *v <= t {
                    1.0
                } else {
                    0.0
                }
            }
            DelayDistribution::Empirical(s) => s.partition_point(|x| *x <= t) as f64 / s.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub n: usize,
    pub p_good: f64,
    pub p_fail: f64,
    pub pr: f64,
}

/// Per-packet serialization interval `L / R_t`, rounded to the nearest microsecond.
pub fn t_data(payload_bits: u64, rate_bps: f64) -> Result<SimTime, EstimatorError> {
    if !rate_bps.is_finite() || rate_bps <= 0.0 {
        return Err(invalid(format!("rate must be positive, got {rate_bps}")));
    }
    let us = (payload_bits as f64 * 1e6 / rate_bps).round();
    Ok(SimTime(us as u64))
}

/// `2 T_retrans + T_RERR`: one timer period for the packet, one for its ACK, then RERR transit.
pub fn t_delay(t_retrans: SimTime, t_rerr: SimTime) -> SimTime {
    t_retrans * 2 + t_rerr
}

pub fn state_probs(n: usize, dist: &DelayDistribution, t_data: SimTime) -> Result<(f64, f64), EstimatorError> {
    if n == 0 {
        return Err(invalid("packet index n starts at 1"));
    }
    if t_data == SimTime::ZERO {
        return Err(invalid("t_data must be positive"));
    }
    let lower = t_data * (n as u64 - 1);
    let upper = t_data * n as u64;
    let p_good = dist.cdf(lower);
    let p_fail = dist.cdf(upper) - p_good;
    Ok((p_good, p_fail.max(0.0)))
}

pub fn loss_estimate(
    n: usize,
    params: &ChannelParams,
    dist: &DelayDistribution,
) -> Result<LossEstimate, EstimatorError> {
    params.validate()?;
    let (p_good, p_fail) = state_probs(n, dist, params.t_data()?)?;
    Ok(LossEstimate {
        n,
        p_good,
        p_fail,
        pr: params.lambda_g * p_good + params.lambda_f * p_fail,
    })
}

pub fn packet_loss_prob(n: usize, params: &ChannelParams, dist: &DelayDistribution) -> Result<f64, EstimatorError> {
    loss_estimate(n, params, dist).map(|e| e.pr)
}

/// `1 - prod(1 - p_i)`; an empty frame is never corrupted.
pub fn frame_corruption_prob(packet_loss_probs: &[f64]) -> Result<f64, EstimatorError> {
    let mut survive = 1.0;
    for &p in packet_loss_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid(format!("packet loss probability {p} outside [0,1]")));
        }
        survive *= 1.0 - p;
    }
    Ok(1.0 - survive)
}

/// Collects observed failure-to-RERR delays at a source.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RerrDelayRecorder {
    samples: Vec<SimTime>,
}

impl RerrDelayRecorder {
    pub fn record_rerr_delay(&mut self, sample: SimTime) {
        self.samples.push(sample);
    }

    pub fn samples(&self) -> &[SimTime] {
        &self.samples
    }

    pub fn empirical_dist(&self) -> Option<DelayDistribution> {
        DelayDistribution::empirical(self.samples.clone()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn params(lg: f64, lf: f64) -> ChannelParams {
        ChannelParams {
            lambda_g: lg,
            lambda_f: lf,
            ..ChannelParams::default()
        }
    }

    #[test]
    fn t_data_values() {
        assert_eq!(t_data(8000, 1e6).unwrap(), ms(8));
        assert_eq!(t_data(0, 1e6).unwrap(), SimTime::ZERO);
        assert_eq!(t_data(1_000_000, 1e6).unwrap(), SimTime::from_secs(1));
        assert!(t_data(8000, 0.0).is_err());
        assert!(t_data(8000, -5.0).is_err());
    }

    #[test]
    fn t_delay_values() {
        assert_eq!(t_delay(ms(10), ms(5)), ms(25));
        assert_eq!(t_delay(SimTime::ZERO, SimTime::ZERO), SimTime::ZERO);
        assert_eq!(t_delay(ms(3), ms(4)), ms(10));
    }

    #[test]
    fn state_probs_deterministic_examples() {
        let d = DelayDistribution::Deterministic(ms(25));
        assert_eq!(state_probs(4, &d, ms(8)).unwrap(), (0.0, 1.0));
        assert_eq!(state_probs(5, &d, ms(8)).unwrap(), (1.0, 0.0));
        assert_eq!(state_probs(1, &d, ms(8)).unwrap(), (0.0, 0.0));
        assert!(state_probs(1, &d, SimTime::ZERO).is_err());
        assert!(state_probs(0, &d, ms(8)).is_err());
    }

    #[test]
    fn boundary_convention_is_verbatim() {
        // Delay exactly on a slot boundary: upper side inclusive for FAIL, GOOD inclusive too.
        let d = DelayDistribution::Deterministic(ms(24));
        assert_eq!(state_probs(3, &d, ms(8)).unwrap(), (0.0, 1.0));
        assert_eq!(state_probs(4, &d, ms(8)).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn packet_loss_prob_examples() {
        let d = DelayDistribution::Deterministic(ms(25));
        let p = params(0.05, 1.0);
        assert!((packet_loss_prob(4, &p, &d).unwrap() - 1.0).abs() < TOL);
        assert!((packet_loss_prob(5, &p, &d).unwrap() - 0.05).abs() < TOL);
        let zero = params(0.0, 0.0);
        for n in 1..20 {
            assert_eq!(packet_loss_prob(n, &zero, &d).unwrap(), 0.0);
        }
        assert!(packet_loss_prob(4, &params(0.5, 0.2), &d).is_err());
    }

    #[test]
    fn frame_corruption_examples() {
        assert!((frame_corruption_prob(&[0.1, 0.2]).unwrap() - 0.28).abs() < TOL);
        assert_eq!(frame_corruption_prob(&[0.3, 1.0, 0.1]).unwrap(), 1.0);
        assert_eq!(frame_corruption_prob(&[]).unwrap(), 0.0);
        assert!(frame_corruption_prob(&[1.2]).is_err());
        assert!(frame_corruption_prob(&[-0.1]).is_err());
    }

    #[test]
    fn frame_corruption_matches_bernoulli_monte_carlo() {
        // Independent oracle: simulate per-packet Bernoulli losses.
        let probs = [0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let trials = 100_000;
        let corrupted = (0..trials)
            .filter(|_| probs.iter().any(|&p| rng.random_bool(p)))
            .count();
        let freq = corrupted as f64 / trials as f64;
        assert!((freq - 0.28).abs() < 0.01, "{freq}");
        assert!((frame_corruption_prob(&probs).unwrap() - freq).abs() < 0.01);
    }

    #[test]
    fn recorder_singleton_matches_deterministic() {
        let mut r = RerrDelayRecorder::default();
        assert!(r.empirical_dist().is_none());
        r.record_rerr_delay(ms(25));
        let emp = r.empirical_dist().unwrap();
        assert_eq!(emp, DelayDistribution::Empirical(vec![ms(25)]));
        let det = DelayDistribution::Deterministic(ms(25));
        for n in 1..12 {
            assert_eq!(
                state_probs(n, &emp, ms(8)).unwrap(),
                state_probs(n, &det, ms(8)).unwrap()
            );
        }
    }

    #[test]
    fn empirical_tracks_generating_law() {
        // Delays drawn uniformly from [20 ms, 36 ms); analytic CDF is linear on that range.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r = RerrDelayRecorder::default();
        for _ in 0..1000 {
            r.record_rerr_delay(SimTime(rng.random_range(20_000..36_000)));
        }
        let dist = r.empirical_dist().unwrap();
        let cdf = |t: f64| ((t - 20_000.0) / 16_000.0).clamp(0.0, 1.0);
        for n in 1..8usize {
            let (pg, pf) = state_probs(n, &dist, ms(8)).unwrap();
            let lo = 8_000.0 * (n as f64 - 1.0);
            let hi = 8_000.0 * n as f64;
            assert!((pg - cdf(lo)).abs() < 0.05, "n={n} pg={pg}");
            assert!((pf - (cdf(hi) - cdf(lo))).abs() < 0.05, "n={n} pf={pf}");
        }
    }

    fn dist_strategy() -> impl Strategy<Value = DelayDistribution> {
        prop_oneof![
            (0u64..200_000).prop_map(|v| DelayDistribution::Deterministic(SimTime(v))),
            prop::collection::vec(0u64..200_000, 1..40)
                .prop_map(|v| DelayDistribution::empirical(v.into_iter().map(SimTime).collect()).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn state_probs_are_a_sub_distribution(dist in dist_strategy(), t in 1u64..20_000, n in 1usize..40) {
            let (pg, pf) = state_probs(n, &dist, SimTime(t)).unwrap();
            prop_assert!((0.0..=1.0).contains(&pg));
            prop_assert!(pf >= 0.0);
            prop_assert!(pg + pf <= 1.0 + TOL);
            let (pg_next, _) = state_probs(n + 1, &dist, SimTime(t)).unwrap();
            prop_assert!(pg_next >= pg);
        }

        #[test]
        fn loss_prob_bounded_by_lambdas(dist in dist_strategy(), n in 1usize..40, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lg, lf) = if a <= b { (a, b) } else { (b, a) };
            let p = params(lg, lf);
            let e = loss_estimate(n, &p, &dist).unwrap();
            prop_assert!((e.pr - (lg * e.p_good + lf * e.p_fail)).abs() < TOL);
            prop_assert!(e.pr <= lf + TOL);
            if (e.p_good + e.p_fail - 1.0).abs() < TOL {
                prop_assert!(e.pr >= lg - TOL && e.pr <= lf + TOL);
            }
        }

        #[test]
        fn singleton_empirical_equals_deterministic(v in 0u64..200_000, t in 1u64..20_000, n in 1usize..40) {
            let det = DelayDistribution::Deterministic(SimTime(v));
            let emp = DelayDistribution::empirical(vec![SimTime(v)]).unwrap();
            prop_assert_eq!(state_probs(n, &det, SimTime(t)).unwrap(), state_probs(n, &emp, SimTime(t)).unwrap());
        }

        #[test]
        fn corruption_monotone_and_permutation_invariant(
            mut ps in prop::collection::vec(0.0f64..=1.0, 0..6),
            idx in 0usize..6,
            bump in 0.0f64..=1.0,
        ) {
            let base = frame_corruption_prob(&ps).unwrap();
            let mut rev = ps.clone();
            rev.reverse();
            prop_assert!((frame_corruption_prob(&rev).unwrap() - base).abs() < TOL);
            if !ps.is_empty() {
                let i = idx % ps.len();
                ps[i] = (ps[i] + bump).min(1.0);
                prop_assert!(frame_corruption_prob(&ps).unwrap() >= base - TOL);
            }
        }
    }
}
