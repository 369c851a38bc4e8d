//! Zero-phase FIR bandpass filtering.
//!
//! Taps come from a Hamming-windowed sinc design (difference of two unit-DC
//! lowpasses), which keeps them exactly symmetric. Zero phase is realized by
//! the forward-backward pass: filter, reverse, filter, reverse, with mirror
//! padding at the edges. The net magnitude response is |H|^2.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirFilter {
    taps: Vec<f64>,
    pub fs: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl FirFilter {
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Magnitude of the frequency response at `f_hz`, evaluated directly from
    /// the taps (independent of any filtering code path).
    pub fn magnitude_at(&self, f_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * f_hz / self.fs;
        let mut re = 0.0;
        let mut im = 0.0;
        for (n, &t) in self.taps.iter().enumerate() {
            re += t * (omega * n as f64).cos();
            im -= t * (omega * n as f64).sin();
        }
        (re * re + im * im).sqrt()
    }
}

/// Hamming window evaluated symmetrically around the center tap so that
/// `w[n] == w[N-1-n]` holds bit-for-bit.
fn hamming(n: usize, num_taps: usize) -> f64 {
    let alpha = (num_taps - 1) as f64 / 2.0;
    let x = n as f64 - alpha;
    0.54 + 0.46 * (2.0 * std::f64::consts::PI * x / (num_taps - 1) as f64).cos()
}

/// Windowed-sinc lowpass with unit DC gain.
fn lowpass_taps(cutoff_hz: f64, fs: f64, num_taps: usize) -> Vec<f64> {
    let nu = cutoff_hz / fs; // cycles per sample
    let alpha = (num_taps - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..num_taps)
        .map(|n| {
            let x = n as f64 - alpha;
            let sinc = if x == 0.0 {
                2.0 * nu
            } else {
                (2.0 * std::f64::consts::PI * nu * x).sin() / (std::f64::consts::PI * x)
            };
            sinc * hamming(n, num_taps)
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= dc;
    }
    taps
}

/// Design a linear-phase FIR bandpass as the difference of two unit-DC
/// lowpasses under a Hamming window. `num_taps` must be odd.
pub fn design_fir_bandpass(fs: f64, low_hz: f64, high_hz: f64, num_taps: usize) -> Result<FirFilter> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::Config(format!(
            "band edges must satisfy 0 < {low_hz} < {high_hz} < {}",
            fs / 2.0
        )));
    }
    if num_taps < 3 || num_taps % 2 == 0 {
        return Err(Error::Config(format!(
            "tap count must be odd and >= 3, got {num_taps}"
        )));
    }
    let high = lowpass_taps(high_hz, fs, num_taps);
    let low = lowpass_taps(low_hz, fs, num_taps);
    let taps: Vec<f64> = high.iter().zip(&low).map(|(h, l)| h - l).collect();
    Ok(FirFilter {
        taps,
        fs,
        low_hz,
        high_hz,
    })
}

/// Centered ("same") convolution; indices falling outside `a` contribute zero.
fn convolve_same(a: &[f64], taps: &[f64]) -> Vec<f64> {
    let half = (taps.len() - 1) / 2;
    let n = a.len();
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        // y[i] = sum_k taps[k] * a[i + half - k]
        let k_lo = (i + half).saturating_sub(n - 1);
        let k_hi = (i + half).min(taps.len() - 1);
        for k in k_lo..=k_hi {
            acc += taps[k] * a[i + half - k];
        }
        *o = acc;
    }
    out
}

/// Forward-backward filtering with mirror padding; output length equals the
/// input length and the net phase response is zero.
pub fn zero_phase_filter(signal: &[f64], filter: &FirFilter) -> Result<Vec<f64>> {
    let n = signal.len();
    let taps = &filter.taps;
    if n <= taps.len() {
        return Err(Error::Input(format!(
            "signal length {} must exceed the filter length {}",
            n,
            taps.len()
        )));
    }
    let pad = taps.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(signal[i]);
    }
    ext.extend_from_slice(signal);
    for i in 0..pad {
        ext.push(signal[n - 2 - i]);
    }

    let mut y = convolve_same(&ext, taps);
    y.reverse();
    let mut y = convolve_same(&y, taps);
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_exactly_symmetric() {
        let f = design_fir_bandpass(100.0, 0.2, 40.0, 201).unwrap();
        let taps = f.taps();
        for i in 0..taps.len() {
            assert_eq!(taps[i].to_bits(), taps[taps.len() - 1 - i].to_bits());
        }
    }

    #[test]
    fn rejects_bad_design() {
        assert!(design_fir_bandpass(100.0, 0.0, 40.0, 101).is_err());
        assert!(design_fir_bandpass(100.0, 0.2, 60.0, 101).is_err());
        assert!(design_fir_bandpass(100.0, 0.2, 40.0, 100).is_err());
    }

    #[test]
    fn frequency_response_contract() {
        let f = design_fir_bandpass(100.0, 0.2, 40.0, 1001).unwrap();
        assert!(f.magnitude_at(0.0) < 0.01, "dc {}", f.magnitude_at(0.0));
        let pass = f.magnitude_at(10.0);
        assert!((0.99..=1.01).contains(&pass), "10 Hz {pass}");
        assert!(f.magnitude_at(48.0) < 0.05, "48 Hz {}", f.magnitude_at(48.0));
    }

    #[test]
    fn zero_signal_stays_zero() {
        let f = design_fir_bandpass(100.0, 0.2, 40.0, 101).unwrap();
        let y = zero_phase_filter(&vec![0.0; 500], &f).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_passes_with_zero_lag() {
        let f = design_fir_bandpass(100.0, 0.2, 40.0, 1001).unwrap();
        let n = 4000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 100.0).sin())
            .collect();
        let y = zero_phase_filter(&x, &f).unwrap();
        // Cross-correlation over interior samples peaks at lag 0.
        let xcorr = |lag: i64| -> f64 {
            let mut s = 0.0;
            for i in 1200..2800i64 {
                s += x[i as usize] * y[(i + lag) as usize];
            }
            s
        };
        // Lag 0 is the global peak; a 10 Hz probe at 100 Hz repeats every 10
        // samples, so period multiples tie with it up to rounding.
        let at_zero = xcorr(0);
        for lag in -40..=40i64 {
            if lag != 0 {
                assert!(
                    at_zero >= xcorr(lag) - at_zero.abs() * 1e-12,
                    "lag {lag} beats 0"
                );
            }
            if lag != 0 && lag.abs() < 5 {
                assert!(at_zero > xcorr(lag), "lag {lag} not dominated");
            }
        }
    }

    #[test]
    fn dc_offset_is_rejected_in_the_interior() {
        let f = design_fir_bandpass(100.0, 0.2, 40.0, 1001).unwrap();
        let x = vec![3.5; 4000];
        let y = zero_phase_filter(&x, &f).unwrap();
        // |H(0)|^2 < 1e-4 -> interior samples near zero
        for &v in &y[1500..2500] {
            assert!(v.abs() < 3.5 * 1e-4, "interior residual {v}");
        }
    }
}
