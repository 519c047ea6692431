//! Centering, envelope-based amplitude normalization and the local linear
//! smoother used to initialize a fit.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Signal;

/// What [`normalize_amplitude`] did to a signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRecord {
    pub ybar: f64,
    /// Smoothed upper envelope `z_i`.
    pub z: Vec<f64>,
    /// Rolling-average window in samples.
    pub window: usize,
}

/// Subtracts the sample mean.
pub fn center(signal: &Signal) -> Signal {
    let y = signal.y();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let mut out = signal.with_values(y.iter().map(|v| v - ybar).collect());
    out.preproc.ybar = Some(out.preproc.ybar.unwrap_or(0.0) + ybar);
    out
}

/// Magnitude of the analytic signal.
///
/// The analytic signal is obtained in the frequency domain (negative
/// frequencies zeroed, positive ones doubled) after mirror-padding the data
/// to a power of two, which keeps the edges from ringing.
pub fn hilbert_envelope(signal: &Signal) -> Result<Vec<f64>> {
    analytic_magnitude(signal.y())
}

fn analytic_magnitude(y: &[f64]) -> Result<Vec<f64>> {
    let n = y.len();
    if n < 4 {
        return Err(Error::InvalidSignal(format!("envelope needs at least 4 samples, got {n}")));
    }
    let size = (2 * n).next_power_of_two();
    let left = (size - n) / 2;
    let padded: Vec<f64> = (0..size).map(|k| y[reflect(k as isize - left as isize, n)]).collect();

    let mut buf: Vec<Complex<f64>> = padded.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    let half = size / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || k == half {
            continue;
        } else if k < half {
            *c *= 2.0;
        } else {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = 1.0 / size as f64;
    Ok(buf[left..left + n].iter().map(|c| c.norm() * scale).collect())
}

// Whole-sample symmetric reflection, periodic beyond one mirror image.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

/// Centered moving average whose window shrinks symmetrically near the ends.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let half = window.max(1) / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let (lo, hi) = (i - h, i + h + 1);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Centers the signal and divides it by its smoothed Hilbert envelope.
///
/// `window_fraction` is the rolling-average window as a fraction of the
/// signal length (0.10 is the usual choice). After this step the peak of
/// the mean curve is close to one, so the fit may assume `A + B = 1`.
pub fn normalize_amplitude(signal: &Signal, window_fraction: f64) -> Result<(Signal, EnvelopeRecord)> {
    if !(window_fraction > 0.0 && window_fraction <= 0.5) {
        return Err(Error::Config(format!("window fraction {window_fraction} outside (0, 0.5]")));
    }
    let centered = center(signal);
    let ybar = signal.y().iter().sum::<f64>() / signal.len() as f64;
    let env = hilbert_envelope(&centered)?;
    let window = ((window_fraction * signal.len() as f64).round() as usize).max(1);
    let z = rolling_mean(&env, window);

    let scale = centered.y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    if let Some(start) = z.iter().position(|&v| !(v > floor)) {
        let end = start + z[start..].iter().take_while(|&&v| !(v > floor)).count() - 1;
        return Err(Error::ZeroEnvelope { start, end });
    }
    let y = centered.y().iter().zip(&z).map(|(v, e)| v / e).collect();
    let mut out = centered.with_values(y);
    out.preproc.envelope = Some(z.clone());
    out.preproc.normalized = true;
    Ok((out, EnvelopeRecord { ybar, z, window }))
}

/// Smallest neighbourhood accepted by [`loess_smooth`].
pub const LOESS_MIN_POINTS: usize = 4;

/// Local linear regression with tricube weights over the `span * len`
/// nearest neighbours of each sample, evaluated at every `x_i`.
pub fn loess_smooth(signal: &Signal, span: f64) -> Result<Vec<f64>> {
    let x = signal.x();
    let y = signal.y();
    let n = x.len();
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::Config(format!("loess span {span} outside (0, 1]")));
    }
    let q = ((span * n as f64).floor() as usize).min(n);
    if q < LOESS_MIN_POINTS {
        return Err(Error::SpanTooSmall { span, points: q, min: LOESS_MIN_POINTS });
    }

    let mut out = Vec::with_capacity(n);
    let mut lo = 0usize;
    for i in 0..n {
        let xi = x[i];
        // slide a window of q consecutive points to the q nearest neighbours of x_i
        while lo + q < n && (x[lo + q] - xi).abs() < (xi - x[lo]).abs() {
            lo += 1;
        }
        let hi = lo + q;
        let dmax = (xi - x[lo]).abs().max((x[hi - 1] - xi).abs());
        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in lo..hi {
            let u = if dmax > 0.0 { (x[k] - xi).abs() / dmax } else { 0.0 };
            let w = if u < 1.0 { (1.0 - u * u * u).powi(3) } else { 0.0 };
            let dx = x[k] - xi;
            sw += w;
            swx += w * dx;
            swy += w * y[k];
            swxx += w * dx * dx;
            swxy += w * dx * y[k];
        }
        // intercept of the weighted line in coordinates centered at x_i
        let det = sw * swxx - swx * swx;
        let fit = if det.abs() > 1e-12 * sw * swxx.max(f64::MIN_POSITIVE) {
            (swxx * swy - swx * swxy) / det
        } else {
            swy / sw
        };
        out.push(fit);
    }
    Ok(out)
}
