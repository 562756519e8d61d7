//! Energy-transfer functions.
//!
//! An ETF maps the frozen states of its participants to signed energy deltas.
//! Pair kernels compute one flow `q` from participant `a` to `b` per window
//! and return `(-q, +q)`; groups apply the pair kernel to every pair `(i, j)`
//! with `i < j` in participant order. `limit` drains a whole network towards
//! an energy ceiling and is the only non-conservative kind.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::instrument::NodeRef;
use crate::mode::{estimate_freq_phase, energy_of, EnergyDelta, ModeParams, ModeState};
use crate::network::NetworkMacroState;

/// Template names offered to editors, in menu order.
pub const TEMPLATE_NAMES: [&str; 6] = ["linear", "phase", "detune", "saturate", "oneway", "limit"];

pub const DEFAULT_STRENGTH: f64 = 1e-4;
pub const DEFAULT_SATURATION: f64 = 1.0;
pub const DEFAULT_ENERGY_CEILING: f64 = 1.0;
pub const DEFAULT_KAPPA: f64 = 0.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EtfError {
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("limit coupling evaluated without a network macro state")]
    MissingMacroState,
    #[error("unknown ETF template '{0}'")]
    UnknownTemplate(String),
    #[error("parameter '{name}' out of range: {value}")]
    InvalidParam { name: String, value: f64 },
    #[error("template '{template}' has no parameter '{name}'")]
    UnknownParam { template: &'static str, name: String },
}

/// Kernel selection and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtfKind {
    /// `q = k K (Ea - Eb)`.
    LinearDiffusive { k: f64 },
    /// `q = k K (Ea - Eb) cos(phi_a - phi_b)`.
    PhaseWeighted { k: f64 },
    /// Linear flow that also feeds the participants' detune power.
    DetuningLinear { k: f64, kappa: f64 },
    /// `q = k K s tanh((Ea - Eb) / s)`.
    SaturatingNonlinear { k: f64, saturation_scale: f64 },
    /// `q = k K max(0, Ea - Eb)`.
    OneWay { k: f64 },
    /// Proportional drain of a network above `e_max`.
    GlobalConstraint { e_max: f64 },
}

impl EtfKind {
    pub fn template_name(&self) -> &'static str {
        match self {
            EtfKind::LinearDiffusive { .. } => "linear",
            EtfKind::PhaseWeighted { .. } => "phase",
            EtfKind::DetuningLinear { .. } => "detune",
            EtfKind::SaturatingNonlinear { .. } => "saturate",
            EtfKind::OneWay { .. } => "oneway",
            EtfKind::GlobalConstraint { .. } => "limit",
        }
    }

    /// Builds a kind from a template name and named parameters; missing
    /// parameters take defaults.
    pub fn from_template(name: &str, params: &BTreeMap<String, f64>) -> Result<EtfKind, EtfError> {
        let mut kind = match name {
            "linear" => EtfKind::LinearDiffusive { k: DEFAULT_STRENGTH },
            "phase" => EtfKind::PhaseWeighted { k: DEFAULT_STRENGTH },
            "detune" => EtfKind::DetuningLinear {
                k: DEFAULT_STRENGTH,
                kappa: DEFAULT_KAPPA,
            },
            "saturate" => EtfKind::SaturatingNonlinear {
                k: DEFAULT_STRENGTH,
                saturation_scale: DEFAULT_SATURATION,
            },
            "oneway" => EtfKind::OneWay { k: DEFAULT_STRENGTH },
            "limit" => EtfKind::GlobalConstraint {
                e_max: DEFAULT_ENERGY_CEILING,
            },
            other => return Err(EtfError::UnknownTemplate(other.to_string())),
        };
        for (param, value) in params {
            kind.set_param(param, *value)?;
        }
        Ok(kind)
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            EtfKind::LinearDiffusive { .. } | EtfKind::PhaseWeighted { .. } | EtfKind::OneWay { .. } => &["k"],
            EtfKind::DetuningLinear { .. } => &["k", "kappa"],
            EtfKind::SaturatingNonlinear { .. } => &["k", "s"],
            EtfKind::GlobalConstraint { .. } => &["e_max"],
        }
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        match (self, name) {
            (EtfKind::LinearDiffusive { k }, "k")
            | (EtfKind::PhaseWeighted { k }, "k")
            | (EtfKind::OneWay { k }, "k")
            | (EtfKind::DetuningLinear { k, .. }, "k")
            | (EtfKind::SaturatingNonlinear { k, .. }, "k") => Some(*k),
            (EtfKind::DetuningLinear { kappa, .. }, "kappa") => Some(*kappa),
            (EtfKind::SaturatingNonlinear { saturation_scale, .. }, "s") => Some(*saturation_scale),
            (EtfKind::GlobalConstraint { e_max }, "e_max") => Some(*e_max),
            _ => None,
        }
    }

    pub fn set_param(&mut self, name: &str, value: f64) -> Result<(), EtfError> {
        let template = self.template_name();
        let invalid = || EtfError::InvalidParam {
            name: name.to_string(),
            value,
        };
        if !value.is_finite() {
            return Err(invalid());
        }
        let slot = match (self, name) {
            (EtfKind::LinearDiffusive { k }, "k")
            | (EtfKind::PhaseWeighted { k }, "k")
            | (EtfKind::OneWay { k }, "k")
            | (EtfKind::DetuningLinear { k, .. }, "k")
            | (EtfKind::SaturatingNonlinear { k, .. }, "k") => {
                if value < 0.0 {
                    return Err(invalid());
                }
                k
            }
            (EtfKind::DetuningLinear { kappa, .. }, "kappa") => kappa,
            (EtfKind::SaturatingNonlinear { saturation_scale, .. }, "s") => {
                if value <= 0.0 {
                    return Err(invalid());
                }
                saturation_scale
            }
            (EtfKind::GlobalConstraint { e_max }, "e_max") => {
                if value <= 0.0 {
                    return Err(invalid());
                }
                e_max
            }
            _ => {
                return Err(EtfError::UnknownParam {
                    template,
                    name: name.to_string(),
                })
            }
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), EtfError> {
        let mut copy = *self;
        for name in self.param_names() {
            let value = self.param(name).expect("listed parameter exists");
            copy.set_param(name, value)?;
        }
        Ok(())
    }

    pub fn is_conservative(&self) -> bool {
        !matches!(self, EtfKind::GlobalConstraint { .. })
    }

    pub fn uses_phase(&self) -> bool {
        matches!(self, EtfKind::PhaseWeighted { .. })
    }
}

/// Stable identifier of a coupling within an instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CouplingId(pub u64);

impl fmt::Display for CouplingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Something an ETF reads energy from and feeds energy into.
#[derive(Debug, Clone, PartialEq)]
pub enum Participant {
    Node(NodeRef),
    /// A whole network, optionally coupled at a spatial location.
    Network { network: usize, location: Option<Vec<f64>> },
}

/// An ETF instance bound to its participants.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub id: CouplingId,
    pub kind: EtfKind,
    pub participants: Vec<Participant>,
    /// Evaluate every `rate_divisor` steps.
    pub rate_divisor: u32,
}

impl Coupling {
    /// Checks arity, distinctness and parameter ranges (not whether the
    /// participants exist).
    pub fn validate_shape(&self) -> Result<(), EtfError> {
        self.kind.validate()?;
        if self.rate_divisor == 0 {
            return Err(EtfError::InvalidParam {
                name: "rate".into(),
                value: 0.0,
            });
        }
        match self.kind {
            EtfKind::GlobalConstraint { .. } => match self.participants.as_slice() {
                [Participant::Network { .. }] => Ok(()),
                _ => Err(EtfError::ArityMismatch(
                    "limit takes exactly one network participant".into(),
                )),
            },
            _ => {
                if self.participants.len() < 2 {
                    return Err(EtfError::ArityMismatch(format!(
                        "{} needs at least 2 participants, got {}",
                        self.kind.template_name(),
                        self.participants.len()
                    )));
                }
                for (i, a) in self.participants.iter().enumerate() {
                    if self.participants[i + 1..].iter().any(|b| same_target(a, b)) {
                        return Err(EtfError::ArityMismatch("participants must be distinct".into()));
                    }
                }
                Ok(())
            }
        }
    }
}

fn same_target(a: &Participant, b: &Participant) -> bool {
    match (a, b) {
        (Participant::Node(x), Participant::Node(y)) => x == y,
        (Participant::Network { network: x, .. }, Participant::Network { network: y, .. }) => x == y,
        (Participant::Node(n), Participant::Network { network, .. })
        | (Participant::Network { network, .. }, Participant::Node(n)) => n.network == *network,
    }
}

/// What an ETF reads from one participant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EtfInput {
    pub energy: f64,
    pub phase: f64,
}

impl EtfInput {
    pub fn from_mode(state: &ModeState, params: &ModeParams, effective_rate: f64) -> Self {
        EtfInput {
            energy: energy_of(state, params, effective_rate),
            phase: estimate_freq_phase(state, params, effective_rate).phase,
        }
    }
}

/// Flow from `a` to `b` for one window of `window` samples.
#[inline]
pub fn pair_flow(kind: &EtfKind, a: EtfInput, b: EtfInput, window: f64) -> f64 {
    match *kind {
        EtfKind::LinearDiffusive { k } | EtfKind::DetuningLinear { k, .. } => k * window * (a.energy - b.energy),
        EtfKind::PhaseWeighted { k } => k * window * (a.energy - b.energy) * (a.phase - b.phase).cos(),
        EtfKind::SaturatingNonlinear { k, saturation_scale } => {
            k * window * saturation_scale * ((a.energy - b.energy) / saturation_scale).tanh()
        }
        EtfKind::OneWay { k } => k * window * (a.energy - b.energy).max(0.0),
        EtfKind::GlobalConstraint { .. } => 0.0,
    }
}

/// Evaluates a kernel into `out` without allocating.
///
/// For `limit`, `inputs` are the network's nodes and `macro_total` the
/// network's total energy.
pub fn eval_into(
    kind: &EtfKind,
    inputs: &[EtfInput],
    macro_total: Option<f64>,
    window: f64,
    out: &mut [f64],
) -> Result<(), EtfError> {
    if out.len() != inputs.len() {
        return Err(EtfError::ArityMismatch(format!(
            "{} inputs for {} outputs",
            inputs.len(),
            out.len()
        )));
    }
    out.iter_mut().for_each(|d| *d = 0.0);
    match *kind {
        EtfKind::GlobalConstraint { e_max } => {
            let total = macro_total.ok_or(EtfError::MissingMacroState)?;
            if total > e_max {
                let excess = total - e_max;
                for (d, input) in out.iter_mut().zip(inputs) {
                    *d = -excess * input.energy / total;
                }
            }
        }
        _ => {
            if inputs.len() < 2 {
                return Err(EtfError::ArityMismatch(format!(
                    "{} needs at least 2 participants",
                    kind.template_name()
                )));
            }
            for i in 0..inputs.len() {
                for j in i + 1..inputs.len() {
                    let q = pair_flow(kind, inputs[i], inputs[j], window);
                    out[i] -= q;
                    out[j] += q;
                }
            }
        }
    }
    Ok(())
}

/// Evaluates a coupling against frozen participant inputs.
pub fn eval_etf(
    coupling: &Coupling,
    inputs: &[EtfInput],
    macro_state: Option<&NetworkMacroState>,
    window: f64,
) -> Result<Vec<EnergyDelta>, EtfError> {
    if coupling.kind.is_conservative() && inputs.len() != coupling.participants.len() {
        return Err(EtfError::ArityMismatch(format!(
            "{} participants but {} states",
            coupling.participants.len(),
            inputs.len()
        )));
    }
    let mut out = vec![0.0; inputs.len()];
    eval_into(
        &coupling.kind,
        inputs,
        macro_state.map(|m| m.total_energy),
        window,
        &mut out,
    )?;
    Ok(out.into_iter().map(EnergyDelta::new).collect())
}

/// Rescales a coupling's deltas so no participant's energy goes negative.
///
/// All deltas share one factor, so a conservative set stays conservative.
pub fn clamp_transfer(deltas: &mut [f64], energies: &[f64]) {
    let mut factor = 1.0f64;
    for (&d, &e) in deltas.iter().zip(energies) {
        if e + d < 0.0 && d < 0.0 {
            factor = factor.min(e.max(0.0) / -d);
        }
    }
    if factor < 1.0 {
        deltas.iter_mut().for_each(|d| *d *= factor);
    }
}

/// Convenience wrapper over [`clamp_transfer`] for [`EnergyDelta`] lists.
pub fn clamp_deltas(deltas: &[EnergyDelta], energies: &[f64]) -> Vec<EnergyDelta> {
    let mut amounts: Vec<f64> = deltas.iter().map(|d| d.amount).collect();
    clamp_transfer(&mut amounts, energies);
    deltas
        .iter()
        .zip(amounts)
        .map(|(d, amount)| EnergyDelta { amount, ..*d })
        .collect()
}
