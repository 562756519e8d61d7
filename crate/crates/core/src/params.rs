//! Parameter paths and values shared by the instrument file, snapshots and
//! the control protocol.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParamError {
    #[error("bad path '{0}'")]
    BadPath(String),
    #[error("bad value '{0}'")]
    BadValue(String),
    #[error("unknown id '{0}'")]
    UnknownId(String),
    #[error("'{0}' is read-only")]
    ReadOnly(String),
}

/// How a parameter edit relates to running state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    /// Integrated into the running state; node states are preserved.
    Playable,
    /// May reconfigure structures and reset affected state.
    SystemState,
    /// Observation only.
    ReadOnly,
}

/// Representation an f0 value was written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum F0Repr {
    /// Multiple of the network fundamental (`1.5r`).
    Ratio,
    /// Hz away from the node's harmonic partial (`+3d`).
    Deviation,
    /// Absolute Hz (`660h` or a bare number).
    Absolute,
}

impl F0Repr {
    pub fn suffix(self) -> char {
        match self {
            F0Repr::Ratio => 'r',
            F0Repr::Deviation => 'd',
            F0Repr::Absolute => 'h',
        }
    }
}

/// An f0 value in one of the three representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Value {
    pub repr: F0Repr,
    pub value: f64,
}

impl F0Value {
    pub fn hz(value: f64) -> Self {
        F0Value {
            repr: F0Repr::Absolute,
            value,
        }
    }

    /// Converts to Hz given the fundamental and the node's harmonic partial.
    pub fn to_hz(self, fundamental: f64, partial: f64) -> f64 {
        match self.repr {
            F0Repr::Ratio => fundamental * self.value,
            F0Repr::Deviation => partial + self.value,
            F0Repr::Absolute => self.value,
        }
    }
}

impl FromStr for F0Value {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParamError::BadValue(s.to_string());
        let (body, repr) = match s.chars().last().ok_or_else(bad)? {
            'r' => (&s[..s.len() - 1], F0Repr::Ratio),
            'd' => (&s[..s.len() - 1], F0Repr::Deviation),
            'h' => (&s[..s.len() - 1], F0Repr::Absolute),
            _ => (s, F0Repr::Absolute),
        };
        let value = parse_number(body).ok_or_else(bad)?;
        Ok(F0Value { repr, value })
    }
}

impl fmt::Display for F0Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.repr {
            F0Repr::Absolute => write!(f, "{}", Num(self.value)),
            F0Repr::Deviation if self.value >= 0.0 => write!(f, "+{}d", Num(self.value)),
            repr => write!(f, "{}{}", Num(self.value), repr.suffix()),
        }
    }
}

/// Parses a finite decimal or scientific number.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.strip_prefix('+').unwrap_or(s);
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit() || b"+-.eE".contains(&b)) {
        return None;
    }
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Locale-independent canonical number formatting.
///
/// Integral values print without a fraction; everything else uses the
/// shortest representation that reads back to the same bits.
#[derive(Debug, Clone, Copy)]
pub struct Num(pub f64);

impl fmt::Display for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        if v == 0.0 {
            f.write_str("0")
        } else if v.fract() == 0.0 && v.abs() < 1e15 {
            write!(f, "{}", v as i64)
        } else if (1e-5..1e15).contains(&v.abs()) {
            write!(f, "{v}")
        } else {
            write!(f, "{v:e}")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetParam {
    F0,
    Mass,
    Damp,
    Stretch,
    Duffing,
    Modes,
    Template,
    Level,
    StateHash,
}

impl NetParam {
    pub const ALL: [NetParam; 9] = [
        NetParam::F0,
        NetParam::Mass,
        NetParam::Damp,
        NetParam::Stretch,
        NetParam::Duffing,
        NetParam::Modes,
        NetParam::Template,
        NetParam::Level,
        NetParam::StateHash,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetParam::F0 => "f0",
            NetParam::Mass => "mass",
            NetParam::Damp => "damp",
            NetParam::Stretch => "B",
            NetParam::Duffing => "duffing",
            NetParam::Modes => "modes",
            NetParam::Template => "template",
            NetParam::Level => "level",
            NetParam::StateHash => "statehash",
        }
    }

    fn from_name(s: &str) -> Option<NetParam> {
        NetParam::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeParam {
    F0,
    Mass,
    Damp,
    Duffing,
    Energy,
}

impl NodeParam {
    pub const ALL: [NodeParam; 5] = [
        NodeParam::F0,
        NodeParam::Mass,
        NodeParam::Damp,
        NodeParam::Duffing,
        NodeParam::Energy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NodeParam::F0 => "f0",
            NodeParam::Mass => "mass",
            NodeParam::Damp => "damp",
            NodeParam::Duffing => "duffing",
            NodeParam::Energy => "energy",
        }
    }

    fn from_name(s: &str) -> Option<NodeParam> {
        NodeParam::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CouplingParam {
    /// A kernel parameter (`k`, `s`, `e_max`, `kappa`).
    Kernel(String),
    Rate,
    Kind,
    Participants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RateParam {
    SampleRate,
    Oversample,
    ControlBlock,
    CouplingDivisor,
}

impl RateParam {
    pub const ALL: [RateParam; 4] = [
        RateParam::SampleRate,
        RateParam::Oversample,
        RateParam::ControlBlock,
        RateParam::CouplingDivisor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RateParam::SampleRate => "sample_rate",
            RateParam::Oversample => "oversample",
            RateParam::ControlBlock => "control_block",
            RateParam::CouplingDivisor => "coupling_divisor",
        }
    }

    fn from_name(s: &str) -> Option<RateParam> {
        RateParam::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PickupParam {
    Gain,
    X,
}

/// A dotted parameter path such as `net.s.node.3.f0` or `coupling.2.k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamPath {
    Net { net: String, param: NetParam },
    Node { net: String, node: usize, param: NodeParam },
    Coupling { id: u64, param: CouplingParam },
    Rate(RateParam),
    Pickup { name: String, param: PickupParam },
    StateHash,
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl ParamPath {
    pub fn class(&self) -> ParamClass {
        match self {
            ParamPath::Net { param, .. } => match param {
                NetParam::Modes | NetParam::Template | NetParam::Level => ParamClass::SystemState,
                NetParam::StateHash => ParamClass::ReadOnly,
                _ => ParamClass::Playable,
            },
            ParamPath::Node { param, .. } => match param {
                NodeParam::Energy => ParamClass::ReadOnly,
                _ => ParamClass::Playable,
            },
            ParamPath::Coupling { param, .. } => match param {
                CouplingParam::Kernel(_) => ParamClass::Playable,
                CouplingParam::Rate => ParamClass::SystemState,
                CouplingParam::Kind | CouplingParam::Participants => ParamClass::ReadOnly,
            },
            ParamPath::Rate(_) => ParamClass::SystemState,
            ParamPath::Pickup { .. } => ParamClass::Playable,
            ParamPath::StateHash => ParamClass::ReadOnly,
        }
    }

    pub fn is_playable(&self) -> bool {
        self.class() == ParamClass::Playable
    }

    /// True for paths whose value comes from running state rather than
    /// configuration.
    pub fn is_runtime(&self) -> bool {
        matches!(
            self,
            ParamPath::StateHash
                | ParamPath::Net {
                    param: NetParam::StateHash,
                    ..
                }
                | ParamPath::Node {
                    param: NodeParam::Energy,
                    ..
                }
        )
    }

    pub fn is_f0(&self) -> bool {
        matches!(
            self,
            ParamPath::Net {
                param: NetParam::F0,
                ..
            } | ParamPath::Node {
                param: NodeParam::F0,
                ..
            }
        )
    }
}

impl FromStr for ParamPath {
    type Err = ParamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParamError::BadPath(s.to_string());
        let parts: Vec<&str> = s.split('.').collect();
        let path = match parts.as_slice() {
            ["net", net, param] if is_identifier(net) => ParamPath::Net {
                net: net.to_string(),
                param: NetParam::from_name(param).ok_or_else(bad)?,
            },
            ["net", net, "node", k, param] if is_identifier(net) => ParamPath::Node {
                net: net.to_string(),
                node: parse_index(k).ok_or_else(bad)?,
                param: NodeParam::from_name(param).ok_or_else(bad)?,
            },
            ["coupling", id, param] => ParamPath::Coupling {
                id: parse_index(id).ok_or_else(bad)? as u64,
                param: match *param {
                    "rate" => CouplingParam::Rate,
                    "kind" => CouplingParam::Kind,
                    "participants" => CouplingParam::Participants,
                    "k" | "s" | "e_max" | "kappa" => CouplingParam::Kernel(param.to_string()),
                    _ => return Err(bad()),
                },
            },
            ["rates", param] => ParamPath::Rate(RateParam::from_name(param).ok_or_else(bad)?),
            ["pickup", name, param] if is_identifier(name) => ParamPath::Pickup {
                name: name.to_string(),
                param: match *param {
                    "gain" => PickupParam::Gain,
                    "x" => PickupParam::X,
                    _ => return Err(bad()),
                },
            },
            ["state", "hash"] => ParamPath::StateHash,
            _ => return Err(bad()),
        };
        Ok(path)
    }
}

fn parse_index(s: &str) -> Option<usize> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

impl fmt::Display for ParamPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamPath::Net { net, param } => write!(f, "net.{net}.{}", param.name()),
            ParamPath::Node { net, node, param } => write!(f, "net.{net}.node.{node}.{}", param.name()),
            ParamPath::Coupling { id, param } => {
                let name = match param {
                    CouplingParam::Kernel(n) => n.as_str(),
                    CouplingParam::Rate => "rate",
                    CouplingParam::Kind => "kind",
                    CouplingParam::Participants => "participants",
                };
                write!(f, "coupling.{id}.{name}")
            }
            ParamPath::Rate(p) => write!(f, "rates.{}", p.name()),
            ParamPath::Pickup { name, param } => {
                let p = match param {
                    PickupParam::Gain => "gain",
                    PickupParam::X => "x",
                };
                write!(f, "pickup.{name}.{p}")
            }
            ParamPath::StateHash => f.write_str("state.hash"),
        }
    }
}

/// A typed parameter value.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Number(f64),
    F0(F0Value),
    /// Spatial coordinate (pickup location).
    Vector(Vec<f64>),
    Text(String),
}

impl ParamValue {
    /// Parses a textual value in the form the path expects.
    pub fn parse_for(path: &ParamPath, text: &str) -> Result<ParamValue, ParamError> {
        let bad = || ParamError::BadValue(text.to_string());
        if path.is_f0() {
            return text.parse().map(ParamValue::F0);
        }
        match path {
            ParamPath::Net {
                param: NetParam::Template,
                ..
            } => {
                if is_identifier(text) {
                    Ok(ParamValue::Text(text.to_string()))
                } else {
                    Err(bad())
                }
            }
            ParamPath::Pickup {
                param: PickupParam::X,
                ..
            } => parse_vector(text).map(ParamValue::Vector).ok_or_else(bad),
            _ => parse_number(text).map(ParamValue::Number).ok_or_else(bad),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            ParamValue::Number(v) => Some(*v),
            ParamValue::F0(F0Value {
                repr: F0Repr::Absolute,
                value,
            }) => Some(*value),
            _ => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Number(v) => write!(f, "{}", Num(*v)),
            ParamValue::F0(v) => write!(f, "{v}"),
            ParamValue::Vector(v) => f.write_str(&format_vector(v)),
            ParamValue::Text(t) => f.write_str(t),
        }
    }
}

/// Parses `0.25` or `0.25,0.5`.
pub fn parse_vector(text: &str) -> Option<Vec<f64>> {
    text.split(',').map(|c| parse_number(c.trim())).collect()
}

pub fn format_vector(v: &[f64]) -> String {
    v.iter().map(|c| Num(*c).to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_round_trip() {
        for s in [
            "net.s.f0",
            "net.s.B",
            "net.s.node.3.f0",
            "net.s.node.0.energy",
            "coupling.2.k",
            "coupling.0.participants",
            "rates.oversample",
            "pickup.main.gain",
            "state.hash",
        ] {
            let p: ParamPath = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        for s in ["net.s", "net..f0", "net.s.node.x.f0", "coupling.a.k", "rates.q", "foo", ""] {
            assert!(s.parse::<ParamPath>().is_err(), "{s}");
        }
    }

    #[test]
    fn classes_partition() {
        let cases = [
            ("net.s.f0", ParamClass::Playable),
            ("net.s.modes", ParamClass::SystemState),
            ("net.s.template", ParamClass::SystemState),
            ("net.s.node.1.damp", ParamClass::Playable),
            ("coupling.1.kappa", ParamClass::Playable),
            ("coupling.1.rate", ParamClass::SystemState),
            ("rates.sample_rate", ParamClass::SystemState),
            ("state.hash", ParamClass::ReadOnly),
        ];
        for (s, class) in cases {
            assert_eq!(s.parse::<ParamPath>().unwrap().class(), class, "{s}");
        }
    }

    #[test]
    fn f0_suffixes() {
        assert_eq!(
            "1.5r".parse::<F0Value>().unwrap(),
            F0Value {
                repr: F0Repr::Ratio,
                value: 1.5
            }
        );
        assert_eq!("+3.0d".parse::<F0Value>().unwrap().value, 3.0);
        assert_eq!("-2d".parse::<F0Value>().unwrap().value, -2.0);
        assert_eq!("660h".parse::<F0Value>().unwrap(), F0Value::hz(660.0));
        assert_eq!("660".parse::<F0Value>().unwrap(), F0Value::hz(660.0));
        assert!("abc".parse::<F0Value>().is_err());
        assert!("r".parse::<F0Value>().is_err());
        assert!("inf".parse::<F0Value>().is_err());

        let v: F0Value = "2.5r".parse().unwrap();
        assert_eq!(v.to_hz(100.0, 300.0), 250.0);
        let v: F0Value = "+3d".parse().unwrap();
        assert_eq!(v.to_hz(100.0, 300.0), 303.0);
        assert_eq!(v.to_string(), "+3d");
        assert_eq!(F0Value::hz(220.0).to_string(), "220");
    }

    #[test]
    fn number_format() {
        assert_eq!(Num(220.0).to_string(), "220");
        assert_eq!(Num(0.1).to_string(), "0.1");
        assert_eq!(Num(-0.0).to_string(), "0");
        assert_eq!(Num(1e-7).to_string(), "1e-7");
        assert_eq!(Num(2.5e20).to_string(), "2.5e20");
        assert_eq!(parse_number("1e-7"), Some(1e-7));
        assert_eq!(parse_number("nan"), None);
        assert_eq!(parse_number("1,5"), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn number_format_round_trips(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
                let text = Num(v).to_string();
                let back = parse_number(&text).unwrap();
                prop_assert!(back == v, "{} -> {} -> {}", v, text, back);
            }

            #[test]
            fn f0_values_round_trip(v in -1e6f64..1e6, repr in 0usize..3) {
                let repr = [F0Repr::Ratio, F0Repr::Deviation, F0Repr::Absolute][repr];
                let f = F0Value { repr, value: v };
                prop_assert_eq!(f.to_string().parse::<F0Value>().unwrap(), f);
            }
        }
    }
}
