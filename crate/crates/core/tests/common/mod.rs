//! Oracles and builders shared by the integration tests.
#![allow(dead_code)]

use modalnet::engine::{Engine, Excitation, Target};
use modalnet::{Instrument, Level, MacroParams, NodeRef, RateConfig, Template};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub const SR: f64 = 44100.0;

pub fn rates(sample_rate: f64, oversample: u32) -> RateConfig {
    RateConfig {
        sample_rate,
        oversample,
        ..RateConfig::default()
    }
}

pub fn macro_params(f0: f64, damping: f64) -> MacroParams {
    MacroParams {
        fundamental: f0,
        total_mass: 1.0,
        global_damping: damping,
        stretch: 0.0,
    }
}

/// One custom network named `n` holding a single node.
pub fn single_node(f0: f64, damping: f64, level: Level) -> Instrument {
    let mut inst = Instrument::new(rates(SR, 1));
    inst.add_network("n", Template::Custom, 1, macro_params(f0, damping), level)
        .unwrap();
    inst
}

pub fn struck(inst: Instrument, node: usize, energy: f64) -> Engine {
    let mut engine = Engine::new(inst);
    engine
        .schedule(Excitation::strike(Target::Node(NodeRef::new(0, node)), energy, 0))
        .unwrap();
    engine
}

/// Frequency from upward zero crossings, with linear interpolation of the
/// crossing instants.
pub fn zero_crossing_frequency(signal: &[f64], sample_rate: f64) -> f64 {
    let mut crossings = Vec::new();
    for n in 1..signal.len() {
        let (a, b) = (signal[n - 1], signal[n]);
        if a < 0.0 && b >= 0.0 {
            crossings.push((n - 1) as f64 + a / (a - b));
        }
    }
    assert!(crossings.len() > 2, "too few crossings");
    let span = crossings.last().unwrap() - crossings[0];
    (crossings.len() - 1) as f64 * sample_rate / span
}

/// Hann-windowed magnitude spectrum, `n/2 + 1` bins.
pub fn spectrum(signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    let mut buf: Vec<Complex<f64>> = signal
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos();
            Complex::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Peak frequency in `[lo, hi]` Hz, refined by parabolic interpolation
/// of log magnitudes.
pub fn peak_frequency(signal: &[f64], sample_rate: f64, lo: f64, hi: f64) -> f64 {
    let mags = spectrum(signal);
    let bin = sample_rate / signal.len() as f64;
    let (a, b) = ((lo / bin).floor() as usize, ((hi / bin).ceil() as usize).min(mags.len() - 2));
    let k = (a.max(1)..=b)
        .max_by(|&i, &j| mags[i].total_cmp(&mags[j]))
        .unwrap();
    let (l, c, r) = (mags[k - 1].ln(), mags[k].ln(), mags[k + 1].ln());
    let denom = l - 2.0 * c + r;
    let offset = if denom.abs() > 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
    (k as f64 + offset) * bin
}

pub fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn rms(a: &[f64]) -> f64 {
    (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt()
}
