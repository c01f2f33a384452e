//! Capacity, Monte Carlo QPSK bit-error rate and the AWGN oracle.

use num_complex::Complex64;
use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::em::CMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Radio parameters shared by both case studies.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub carrier_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_dbm: f64,
    pub pathloss_exponent: f64,
    pub link_distance_m: f64,
    pub num_streams_or_users: usize,
    pub attenuation_ratio: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return Err(Error::domain("carrier frequency must be positive"));
        }
        if !self.tx_power_dbm.is_finite() || !self.noise_dbm.is_finite() {
            return Err(Error::domain("powers must be finite"));
        }
        if !(self.pathloss_exponent > 0.0 && self.link_distance_m > 0.0) {
            return Err(Error::domain("path-loss exponent and link distance must be positive"));
        }
        if self.num_streams_or_users == 0 {
            return Err(Error::domain("need at least one stream/user"));
        }
        if !(0.0..1.0).contains(&self.attenuation_ratio) {
            return Err(Error::domain("attenuation ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    pub fn noise_w(&self) -> f64 {
        dbm_to_watts(self.noise_dbm)
    }

    pub fn wavelength(&self) -> f64 {
        crate::em::SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn path_loss(&self) -> Result<f64> {
        crate::em::path_loss(self.link_distance_m, self.pathloss_exponent, self.wavelength())
    }
}

pub fn dbm_to_watts(p_dbm: f64) -> f64 {
    10f64.powf((p_dbm - 30.0) / 10.0)
}

/// Equal-power capacity over the `streams` strongest singular modes.
pub fn capacity(effective: &CMatrix, tx_power_w: f64, noise_w: f64, streams: usize) -> Result<f64> {
    if effective.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("effective channel has non-finite entries".into()));
    }
    let dim = effective.nrows().min(effective.ncols());
    if streams == 0 || streams > dim {
        return Err(Error::shape(format!("{streams} streams requested, channel supports {dim}")));
    }
    let mut sv: Vec<f64> = effective.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let snr = tx_power_w / streams as f64 / noise_w;
    Ok(sv[..streams].iter().map(|s| (snr * s * s).ln_1p()).sum::<f64>() / std::f64::consts::LN_2)
}

/// `Q(sqrt(2 gamma_b))`, the Gray-coded QPSK bit-error rate on AWGN.
pub fn qpsk_awgn_oracle(gamma_b: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(gamma_b.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_symbols: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { min_errors: 200, max_symbols: 10_000_000 }
    }
}

/// Symbol slots (one QPSK symbol per user) per Monte Carlo batch.
pub const BATCH_SLOTS: u64 = 4096;
/// Batches evaluated concurrently before the stop rule is checked; fixed so
/// results never depend on the thread count.
const ROUND: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct BerEstimate {
    pub per_user: Vec<f64>,
    pub average: f64,
    /// Symbol slots simulated; each slot carries one symbol per user.
    pub symbols: u64,
    pub bit_errors: u64,
}

/// Monte Carlo BER of Gray QPSK through `effective` (users x users, all
/// gains included). Each user gets `tx_power_w / users`; user `k` detects
/// with the scalar `effective[k, k]` and sees the off-diagonal terms as
/// interference.
pub fn ber_qpsk(effective: &CMatrix, tx_power_w: f64, noise_w: f64, seed: u64, stop: StopRule) -> Result<BerEstimate> {
    ber_qpsk_pooled(std::slice::from_ref(effective), tx_power_w, noise_w, seed, stop)
}

/// Like [`ber_qpsk`], but batches cycle round-robin over several effective
/// matrices (e.g. independent realizations) sharing one stop rule.
pub fn ber_qpsk_pooled(effectives: &[CMatrix], tx_power_w: f64, noise_w: f64, seed: u64, stop: StopRule) -> Result<BerEstimate> {
    let first = effectives.first().ok_or_else(|| Error::shape("no effective matrices"))?;
    let users = first.nrows();
    for e in effectives {
        if e.nrows() != e.ncols() || e.nrows() != users || users == 0 {
            return Err(Error::shape(format!("effective matrix must be {users}x{users}, got {:?}", e.shape())));
        }
    }
    if !(tx_power_w > 0.0 && noise_w > 0.0) {
        return Err(Error::domain("powers must be positive"));
    }
    let amp = Complex64::from((tx_power_w / users as f64).sqrt());
    let scaled: Vec<CMatrix> = effectives.iter().map(|e| e * amp).collect();
    let sigma = (noise_w / 2.0).sqrt();

    let mut errors = vec![0u64; users];
    let mut slots = 0u64;
    let mut batch = 0u64;
    'outer: loop {
        let round: Vec<(u64, u64)> = (0..ROUND as u64)
            .map(|i| {
                let b = batch + i;
                let start = b * BATCH_SLOTS;
                (b, BATCH_SLOTS.min(stop.max_symbols.saturating_sub(start)))
            })
            .filter(|&(_, n)| n > 0)
            .collect();
        if round.is_empty() {
            break;
        }
        let results: Vec<Vec<u64>> = round
            .par_iter()
            .map(|&(b, n)| {
                let r = (b % scaled.len() as u64) as usize;
                simulate_batch(&scaled[r], sigma, rng::substream(seed, &[r as u64, b]), n)
            })
            .collect();
        for ((_, n), errs) in round.iter().zip(results) {
            slots += n;
            errors.iter_mut().zip(errs).for_each(|(e, x)| *e += x);
            if errors.iter().sum::<u64>() >= stop.min_errors || slots >= stop.max_symbols {
                break 'outer;
            }
        }
        batch += round.len() as u64;
    }
    let per_user: Vec<f64> = errors.iter().map(|&e| e as f64 / (2 * slots) as f64).collect();
    let average = per_user.iter().sum::<f64>() / users as f64;
    Ok(BerEstimate { per_user, average, symbols: slots, bit_errors: errors.iter().sum() })
}

fn simulate_batch(a: &CMatrix, sigma: f64, mut rng: rand_chacha::ChaCha8Rng, slots: u64) -> Vec<u64> {
    let users = a.nrows();
    let inv_diag: Vec<Complex64> = (0..users).map(|k| a[(k, k)].inv()).collect();
    let mut errors = vec![0u64; users];
    let mut s = vec![Complex64::default(); users];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for _ in 0..slots {
        let mut bits = 0u64;
        for (j, sj) in s.iter_mut().enumerate() {
            if j % 32 == 0 {
                bits = rng.random();
            }
            let re = if bits >> (2 * (j % 32)) & 1 == 0 { h } else { -h };
            let im = if bits >> (2 * (j % 32) + 1) & 1 == 0 { h } else { -h };
            *sj = Complex64::new(re, im);
        }
        for k in 0..users {
            let mut y = Complex64::new(
                sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng),
                sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng),
            );
            for (j, sj) in s.iter().enumerate() {
                y += a[(k, j)] * sj;
            }
            let z = y * inv_diag[k];
            errors[k] += u64::from((z.re < 0.0) != (s[k].re < 0.0)) + u64::from((z.im < 0.0) != (s[k].im < 0.0));
        }
    }
    errors
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dbm_conversions() {
        assert_eq!(dbm_to_watts(30.0), 1.0);
        assert_relative_eq!(dbm_to_watts(20.0), 0.1, max_relative = 1e-15);
        assert_relative_eq!(dbm_to_watts(-110.0), 1e-14, max_relative = 1e-14);
    }

    #[test]
    fn capacity_closed_forms() {
        let i4 = CMatrix::identity(4, 4);
        assert_relative_eq!(capacity(&i4, 12.0, 1.0, 4).unwrap(), 8.0, epsilon = 1e-12);
        assert_eq!(capacity(&CMatrix::zeros(4, 4), 1.0, 1.0, 4).unwrap(), 0.0);
        assert!(matches!(capacity(&i4, 1.0, 1.0, 5), Err(Error::Shape(_))));
        let mut bad = i4.clone();
        bad[(0, 0)] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(capacity(&bad, 1.0, 1.0, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn capacity_uses_strongest_modes() {
        let m = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            Complex64::from(0.5),
            Complex64::from(2.0),
            Complex64::from(1.0),
        ]));
        let c = capacity(&m, 2.0, 1.0, 2).unwrap();
        assert_relative_eq!(c, (1.0f64 + 4.0).log2() + (1.0f64 + 1.0).log2(), epsilon = 1e-12);
    }

    #[test]
    fn capacity_attenuation_scaling() {
        let h = crate::em::rayleigh_channel(6, 4, 1.0, 7).unwrap().matrix;
        let scaled = &h * Complex64::from(0.85f64.powf(7.0 / 2.0));
        let direct: f64 = {
            let sv = h.singular_values();
            sv.iter().map(|s| (1.0 + 2.5 * 0.85f64.powi(7) * s * s).log2()).sum()
        };
        assert_relative_eq!(capacity(&scaled, 10.0, 1.0, 4).unwrap(), direct, max_relative = 1e-12);
    }

    #[test]
    fn oracle_values() {
        assert_eq!(qpsk_awgn_oracle(0.0), 0.5);
        assert!(qpsk_awgn_oracle(1e4) < 1e-300);
        assert_relative_eq!(qpsk_awgn_oracle(10f64.powf(0.9588)), 9.996_885_314_860_781e-6, max_relative = 1e-9);
    }

    #[test]
    fn high_snr_is_error_free() {
        let e = CMatrix::identity(4, 4);
        let stop = StopRule { min_errors: 10, max_symbols: 50_000 };
        let b = ber_qpsk(&e, 4.0, 1e-6, 3, stop).unwrap();
        assert_eq!(b.average, 0.0);
        assert_eq!(b.symbols, 50_000);
    }

    #[test]
    fn interference_floor() {
        // user 0 sees an interferer as strong as itself: half its symbols
        // combine to zero on one axis
        let mut e = CMatrix::identity(2, 2);
        e[(0, 1)] = Complex64::from(1.0);
        let stop = StopRule { min_errors: 100_000, max_symbols: 200_000 };
        let b = ber_qpsk(&e, 2.0, 1e-3, 5, stop).unwrap();
        assert!(b.per_user[1] < 1e-4);
        assert!((b.per_user[0] - 0.25).abs() < 0.01, "{}", b.per_user[0]);
    }

    #[test]
    fn stop_rule_and_shapes() {
        let e = CMatrix::identity(1, 1);
        let b = ber_qpsk(&e, 1.0, 1.0, 1, StopRule { min_errors: 50, max_symbols: 1_000_000 }).unwrap();
        assert!(b.bit_errors >= 50 && b.symbols <= BATCH_SLOTS);
        assert!(matches!(ber_qpsk(&CMatrix::zeros(2, 3), 1.0, 1.0, 1, StopRule::default()), Err(Error::Shape(_))));
        assert!(ber_qpsk_pooled(&[], 1.0, 1.0, 1, StopRule::default()).is_err());
    }
}
