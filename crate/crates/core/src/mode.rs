//! A single normal mode of vibration.
//!
//! A modal node carries three user parameters (mass, nominal frequency and
//! decay) and a state vector `M = (M0, M1, ..., MN)` holding the per-sample
//! displacement and its discrete derivatives. The node is advanced with a
//! semi-implicit Euler cascade:
//!
//! ```text
//! M2' = -d_s * M1 - w^2 * M0 - beta_s * M0^3
//! M1' = M1 + M2'
//! M0' = M0 + M1'
//! ```
//!
//! with `w0 = 2 pi f0 / rate` and `d_s = damping / rate`. The node exposes an
//! energy value and accepts energy influx; every interaction with other
//! structures happens through those two functions.

use std::f64::consts::{PI, TAU};

use thiserror::Error;

/// Energies at or below this value count as "no energy".
pub const ENERGY_EPSILON: f64 = 1e-30;

/// Per-window retention of the smoothed feed power used for L3 detuning.
pub const FEED_POWER_RETENTION: f64 = 0.99;

/// Headroom kept below the stability limit when clamping detuned frequencies.
const DETUNE_HEADROOM: f64 = 0.999;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModeError {
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("damping must be finite and nonnegative, got {0}")]
    NegativeDamping(f64),
    #[error("frequency {frequency} Hz outside (0, {limit}) at this rate")]
    FrequencyOutOfRange { frequency: f64, limit: f64 },
    #[error("duffing term {0} requires complexity level L4")]
    DuffingBelowL4(f64),
    #[error("state order must be at least 2, got {0}")]
    BadOrder(usize),
    #[error("mode state became non-finite")]
    NumericOverflow,
}

/// Complexity level of a node or network.
///
/// L1: linear, phase-blind, `f = f0`. L2: phase-dependent transfers and
/// excitation response. L3: energy feed detunes the node, still linear.
/// L4: nonlinear vibration equation (cubic stiffness).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub enum Level {
    #[default]
    L1,
    L2,
    L3,
    L4,
}

impl Level {
    pub fn from_index(index: u8) -> Option<Level> {
        match index {
            1 => Some(Level::L1),
            2 => Some(Level::L2),
            3 => Some(Level::L3),
            4 => Some(Level::L4),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Level::L1 => 1,
            Level::L2 => 2,
            Level::L3 => 3,
            Level::L4 => 4,
        }
    }

    pub fn phase_aware(self) -> bool {
        self >= Level::L2
    }

    pub fn detunes(self) -> bool {
        self >= Level::L3
    }
}

/// Parameters of one normal mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeParams {
    /// Abstract scaling analogous to physical mass.
    pub mass: f64,
    /// Nominal frequency in Hz.
    pub nominal_frequency: f64,
    /// Decay coefficient per second.
    pub damping: f64,
    /// Cubic stiffness coefficient; only meaningful at L4.
    pub duffing_beta: f64,
    pub level: Level,
}

impl ModeParams {
    pub fn new(mass: f64, nominal_frequency: f64, damping: f64) -> Self {
        ModeParams {
            mass,
            nominal_frequency,
            damping,
            duffing_beta: 0.0,
            level: Level::L1,
        }
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    pub fn with_duffing(mut self, beta: f64) -> Self {
        self.duffing_beta = beta;
        self
    }

    /// Per-sample damping at the given effective rate.
    pub fn damping_per_sample(&self, effective_rate: f64) -> f64 {
        self.damping / effective_rate
    }

    /// Highest frequency at which the recurrence stays bounded.
    pub fn frequency_limit(&self, effective_rate: f64) -> f64 {
        stability_limit(effective_rate, self.damping_per_sample(effective_rate))
    }

    pub fn validate(&self, effective_rate: f64) -> Result<(), ModeError> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(ModeError::NonPositiveMass(self.mass));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(ModeError::NegativeDamping(self.damping));
        }
        let limit = self.frequency_limit(effective_rate);
        if !(self.nominal_frequency > 0.0 && self.nominal_frequency < limit) {
            return Err(ModeError::FrequencyOutOfRange {
                frequency: self.nominal_frequency,
                limit,
            });
        }
        if self.duffing_beta != 0.0 && self.level != Level::L4 {
            return Err(ModeError::DuffingBelowL4(self.duffing_beta));
        }
        Ok(())
    }
}

/// Frequency bound for a bounded recurrence: `w^2 + 2 d_s < 4`, capped at
/// Nyquist. At zero damping this is `rate / pi`.
pub fn stability_limit(effective_rate: f64, damping_per_sample: f64) -> f64 {
    let w_max_sq = (4.0 - 2.0 * damping_per_sample).max(0.0);
    let limit = w_max_sq.sqrt() * effective_rate / TAU;
    limit.min(effective_rate / 2.0)
}

/// Dynamic state of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    /// `M0` displacement, `M1` first difference, ... up to `MN`.
    pub m: Vec<f64>,
    /// Effective frequency in Hz; equals the nominal frequency at L1/L2.
    pub effective_frequency: f64,
    /// Phase in `[0, 2pi)`, refreshed once per control block.
    pub phase: f64,
    /// Energy delta pending for the current coupling window.
    pub feed_accumulator: f64,
    /// Smoothed |feed| per sample, drives L3 detuning.
    pub feed_power_smoothed: f64,
}

impl ModeState {
    /// Order-2 state at rest.
    pub fn at_rest(params: &ModeParams) -> Self {
        Self::with_order(2, params).expect("order 2 is valid")
    }

    pub fn with_order(order: usize, params: &ModeParams) -> Result<Self, ModeError> {
        if order < 2 {
            return Err(ModeError::BadOrder(order));
        }
        Ok(ModeState {
            m: vec![0.0; order + 1],
            effective_frequency: params.nominal_frequency,
            phase: 0.0,
            feed_accumulator: 0.0,
            feed_power_smoothed: 0.0,
        })
    }

    pub fn order(&self) -> usize {
        self.m.len() - 1
    }

    pub fn displacement(&self) -> f64 {
        self.m[0]
    }

    pub fn velocity(&self) -> f64 {
        self.m[1]
    }

    pub fn is_at_rest(&self) -> bool {
        self.m.iter().all(|&v| v == 0.0)
    }

    /// Zeroes the dynamics, leaving parameters-derived fields alone.
    pub fn silence(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.feed_accumulator = 0.0;
        self.phase = 0.0;
    }

    /// Sets displacement and first difference directly; higher entries are cleared.
    pub fn set_displacement_velocity(&mut self, displacement: f64, velocity: f64) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.m[0] = displacement;
        self.m[1] = velocity;
    }
}

/// Signed energy transfer quantum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyDelta {
    pub amount: f64,
    /// Phase used when energy lands on a node that currently has none.
    pub phase_hint: Option<f64>,
}

impl EnergyDelta {
    pub fn new(amount: f64) -> Self {
        EnergyDelta {
            amount,
            phase_hint: None,
        }
    }

    pub fn with_phase(amount: f64, phase: f64) -> Self {
        EnergyDelta {
            amount,
            phase_hint: Some(phase),
        }
    }
}

/// Nominal angular frequency per (oversampled) sample.
pub fn omega0(params: &ModeParams, effective_rate: f64) -> f64 {
    TAU * params.nominal_frequency / effective_rate
}

/// Angular frequency actually used by the integrator.
pub fn omega_effective(state: &ModeState, params: &ModeParams, effective_rate: f64) -> f64 {
    if params.level.detunes() {
        TAU * state.effective_frequency / effective_rate
    } else {
        omega0(params, effective_rate)
    }
}

/// Advances the node by one (oversampled) sample.
///
/// On a non-finite result the state is zeroed and `NumericOverflow` is
/// returned; the caller decides whether to mute the node.
pub fn step_node(
    state: &mut ModeState,
    params: &ModeParams,
    effective_rate: f64,
) -> Result<(), ModeError> {
    let w0 = omega0(params, effective_rate);
    let w = omega_effective(state, params, effective_rate);
    let damping = params.damping_per_sample(effective_rate);
    let beta = if params.level == Level::L4 {
        params.duffing_beta * w0 * w0
    } else {
        0.0
    };

    let m0 = state.m[0];
    let m1 = state.m[1];
    let accel = -damping * m1 - w * w * m0 - beta * m0 * m0 * m0;
    let m1 = m1 + accel;
    let m0 = m0 + m1;

    // Higher orders track backward differences of the entry below so the
    // integration cascade M_k' = M_k + M_{k+1}' holds for every k.
    let mut previous_old = state.m[2];
    state.m[2] = accel;
    for k in 3..state.m.len() {
        let old = state.m[k];
        state.m[k] = state.m[k - 1] - previous_old;
        previous_old = old;
    }
    state.m[1] = m1;
    state.m[0] = m0;

    if !(m0.is_finite() && m1.is_finite() && state.m.iter().all(|v| v.is_finite())) {
        state.silence();
        return Err(ModeError::NumericOverflow);
    }
    Ok(())
}

/// Energy held by the node.
///
/// This is the quadratic invariant of the semi-implicit update,
/// `1/2 m (M1^2 + w0^2 M0^2 - w0^2 M0 M1)`, so a free undamped L1 node keeps
/// it exactly up to rounding. It is positive definite for `w0 < 2`.
pub fn energy_of(state: &ModeState, params: &ModeParams, effective_rate: f64) -> f64 {
    let w0 = omega0(params, effective_rate);
    quadratic_energy(params.mass, w0, state.m[0], state.m[1])
}

#[inline]
pub(crate) fn quadratic_energy(mass: f64, w0: f64, m0: f64, m1: f64) -> f64 {
    let w2 = w0 * w0;
    let e = 0.5 * mass * (m1 * m1 + w2 * m0 * m0 - w2 * m0 * m1);
    e.max(0.0)
}

/// Applies an energy influx (or drain) to the node.
///
/// With energy present, `M` is scaled uniformly so phase is untouched and
/// the energy moves by exactly `amount` (clamped at zero). A node without
/// energy is seeded at `phase_hint` (default 0).
pub fn apply_feed(state: &mut ModeState, params: &ModeParams, effective_rate: f64, delta: EnergyDelta) {
    if delta.amount == 0.0 || !delta.amount.is_finite() {
        return;
    }
    let energy = energy_of(state, params, effective_rate);
    if energy > ENERGY_EPSILON {
        let target = (energy + delta.amount).max(0.0);
        if target == 0.0 {
            state.m.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let scale = (target / energy).sqrt();
        state.m.iter_mut().for_each(|v| *v *= scale);
    } else if delta.amount > 0.0 {
        let phase = delta.phase_hint.unwrap_or(0.0);
        let w0 = omega0(params, effective_rate);
        let unit_m0 = phase.cos();
        let unit_m1 = -w0 * phase.sin();
        let unit_energy = quadratic_energy(params.mass, w0, unit_m0, unit_m1);
        if unit_energy <= 0.0 {
            return;
        }
        let amplitude = (delta.amount / unit_energy).sqrt();
        state.set_displacement_velocity(amplitude * unit_m0, amplitude * unit_m1);
    }
}

/// Result of a frequency/phase estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseEstimate {
    pub frequency: f64,
    pub phase: f64,
    /// Set when the node had no energy; `phase` is then 0 by convention.
    pub indeterminate: bool,
}

/// Estimates effective frequency and phase from the state vector.
///
/// Convention: `x = A cos(phi)` with `phi` increasing in time, so
/// `phi = atan2(-M1 / w_eff, M0)`.
pub fn estimate_freq_phase(state: &ModeState, params: &ModeParams, effective_rate: f64) -> PhaseEstimate {
    let frequency = if params.level.detunes() {
        state.effective_frequency
    } else {
        params.nominal_frequency
    };
    if energy_of(state, params, effective_rate) <= ENERGY_EPSILON {
        return PhaseEstimate {
            frequency,
            phase: 0.0,
            indeterminate: true,
        };
    }
    let w = omega_effective(state, params, effective_rate);
    let phase = wrap_phase((-state.m[1] / w).atan2(state.m[0]));
    PhaseEstimate {
        frequency,
        phase,
        indeterminate: false,
    }
}

/// Refreshes the stored phase (and pins frequency at L1/L2).
pub fn refresh_estimate(state: &mut ModeState, params: &ModeParams, effective_rate: f64) -> PhaseEstimate {
    let estimate = estimate_freq_phase(state, params, effective_rate);
    state.phase = estimate.phase;
    if !params.level.detunes() {
        state.effective_frequency = params.nominal_frequency;
    }
    estimate
}

/// Applies the feed-detune law `f = f0 (1 + kappa * p)` at L3/L4.
///
/// Below L3 the effective frequency is pinned to nominal.
pub fn update_effective_frequency(state: &mut ModeState, params: &ModeParams, effective_rate: f64, kappa: f64) {
    if !params.level.detunes() {
        state.effective_frequency = params.nominal_frequency;
        return;
    }
    let detuned = params.nominal_frequency * (1.0 + kappa * state.feed_power_smoothed);
    let ceiling = DETUNE_HEADROOM * params.frequency_limit(effective_rate);
    state.effective_frequency = if detuned.is_finite() {
        detuned.clamp(0.0, ceiling)
    } else {
        ceiling
    };
}

/// One-pole smoothing of |feed| per sample, once per coupling window.
pub fn smooth_feed_power(state: &mut ModeState, feed_per_sample: f64) {
    state.feed_power_smoothed = FEED_POWER_RETENTION * state.feed_power_smoothed
        + (1.0 - FEED_POWER_RETENTION) * feed_per_sample.abs();
}

/// Maps any angle to `[0, 2pi)`.
pub fn wrap_phase(phase: f64) -> f64 {
    let wrapped = phase.rem_euclid(TAU);
    if wrapped >= TAU {
        0.0
    } else {
        wrapped
    }
}

/// Phase difference folded into `(-pi, pi]`.
pub fn phase_difference(a: f64, b: f64) -> f64 {
    let d = wrap_phase(a - b);
    if d > PI {
        d - TAU
    } else {
        d
    }
}
