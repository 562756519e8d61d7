//! Instrument files and snapshots.
//!
//! The format is line-oriented `key = value` text in sections; see
//! `docs/instrument-format.md`. [`serialize`] writes a canonical form
//! (fixed section and key order) so files diff and round-trip cleanly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::engine::{Pickup, PickupTap};
use crate::etf::{Coupling, CouplingId, EtfKind, Participant, TEMPLATE_NAMES};
use crate::instrument::{node_f0_value, Instrument, InstrumentError, NodeRef};
use crate::mode::Level;
use crate::network::{MacroParams, Template};
use crate::params::{
    format_vector, parse_number, parse_vector, F0Value, NodeParam, Num, ParamPath, ParamValue,
};
use crate::scheduler::RateConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersistError {
    #[error("line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {msg}")]
    Range { line: usize, msg: String },
    #[error(transparent)]
    Instrument(#[from] InstrumentError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapshotScope {
    Instrument,
    Network(String),
    /// A network's frequency window: its fundamental and node f0s.
    Window(String),
}

impl SnapshotScope {
    pub fn parse(text: &str) -> Option<SnapshotScope> {
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["instrument"] => Some(SnapshotScope::Instrument),
            ["network", n] => Some(SnapshotScope::Network(n.to_string())),
            ["window", n] => Some(SnapshotScope::Window(n.to_string())),
            _ => None,
        }
    }
}

impl std::fmt::Display for SnapshotScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SnapshotScope::Instrument => f.write_str("instrument"),
            SnapshotScope::Network(n) => write!(f, "network {n}"),
            SnapshotScope::Window(n) => write!(f, "window {n}"),
        }
    }
}

/// Named playable values; keys are parameter paths, values canonical text.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub name: String,
    pub scope: SnapshotScope,
    pub entries: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatesDecl {
    pub sample_rate: Option<f64>,
    pub oversample: Option<u32>,
    pub control_block: Option<u32>,
    pub coupling_divisor: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeDecl {
    pub f0: Option<F0Value>,
    pub mass: Option<f64>,
    pub damp: Option<f64>,
    pub duffing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDecl {
    pub name: String,
    pub template: Template,
    pub modes: usize,
    pub f0: Option<f64>,
    pub mass: Option<f64>,
    pub damp: Option<f64>,
    pub stretch: Option<f64>,
    pub level: Option<u8>,
    pub duffing: Option<f64>,
    pub nodes: BTreeMap<usize, NodeDecl>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParticipantDecl {
    Node { net: String, node: usize },
    Network { net: String, location: Option<Vec<f64>> },
}

impl std::fmt::Display for ParticipantDecl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParticipantDecl::Node { net, node } => write!(f, "{net}.{node}"),
            ParticipantDecl::Network { net, location: None } => f.write_str(net),
            ParticipantDecl::Network {
                net,
                location: Some(x),
            } => write!(f, "{net}@{}", format_vector(x)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingDecl {
    pub id: u64,
    pub kind: String,
    pub participants: Vec<ParticipantDecl>,
    pub params: BTreeMap<String, f64>,
    pub rate: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickupMode {
    Sum,
    Location,
    Weights,
}

impl PickupMode {
    fn name(self) -> &'static str {
        match self {
            PickupMode::Sum => "sum",
            PickupMode::Location => "location",
            PickupMode::Weights => "weights",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PickupDecl {
    pub name: String,
    pub mode: PickupMode,
    pub net: Option<String>,
    pub x: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub gain: Option<f64>,
}

/// Parsed instrument file, kept separate from the live [`Instrument`].
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentFile {
    pub format_version: u32,
    pub rates: Option<RatesDecl>,
    pub networks: Vec<NetworkDecl>,
    pub couplings: Vec<CouplingDecl>,
    pub pickups: Vec<PickupDecl>,
    pub snapshots: Vec<Snapshot>,
}

impl Default for InstrumentFile {
    fn default() -> Self {
        InstrumentFile {
            format_version: FORMAT_VERSION,
            rates: None,
            networks: Vec::new(),
            couplings: Vec::new(),
            pickups: Vec::new(),
            snapshots: Vec::new(),
        }
    }
}

enum Section {
    Top,
    Rates,
    Network(usize),
    Coupling(usize),
    Pickup(usize),
    Snapshot(usize),
}

/// Header line, kind, kernel params with their lines, whether participants were given.
type CouplingProgress = (usize, Option<String>, Vec<(usize, String)>, bool);

struct Partial {
    network: Vec<(usize, Option<Template>, Option<usize>)>,
    coupling_kind: Vec<CouplingProgress>,
    pickup_mode: Vec<(usize, Option<PickupMode>)>,
    snapshot_scope: Vec<(usize, Option<SnapshotScope>)>,
}

struct Line {
    number: usize,

}

impl Line {
    fn syntax(&self, col: usize, msg: impl Into<String>) -> PersistError {
        PersistError::Syntax {
            line: self.number,
            col,
            msg: msg.into(),
        }
    }

    fn range(&self, msg: impl Into<String>) -> PersistError {
        PersistError::Range {
            line: self.number,
            msg: msg.into(),
        }
    }

    fn unknown(&self, key: &str) -> PersistError {
        PersistError::UnknownKey {
            line: self.number,
            key: key.to_string(),
        }
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

struct Value<'a> {
    text: &'a str,
    col: usize,
}

impl Value<'_> {
    fn number(&self, line: &Line) -> Result<f64, PersistError> {
        parse_number(self.text).ok_or_else(|| line.syntax(self.col, format!("expected a number, found '{}'", self.text)))
    }

    fn positive(&self, line: &Line) -> Result<f64, PersistError> {
        let v = self.number(line)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(line.range(format!("{} must be positive", self.text)))
        }
    }

    fn nonnegative(&self, line: &Line) -> Result<f64, PersistError> {
        let v = self.number(line)?;
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(line.range(format!("{} must not be negative", self.text)))
        }
    }

    fn count(&self, line: &Line) -> Result<u32, PersistError> {
        let v = self.number(line)?;
        if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(line.range(format!("{} must be a positive integer", self.text)))
        }
    }

    fn vector(&self, line: &Line) -> Result<Vec<f64>, PersistError> {
        parse_vector(self.text).ok_or_else(|| line.syntax(self.col, format!("expected numbers, found '{}'", self.text)))
    }
}

fn set_once<T>(slot: &mut Option<T>, value: T, line: &Line, key: &str) -> Result<(), PersistError> {
    if slot.is_some() {
        return Err(line.range(format!("duplicate key '{key}'")));
    }
    *slot = Some(value);
    Ok(())
}

fn parse_participant(token: &str, line: &Line, col: usize) -> Result<ParticipantDecl, PersistError> {
    let bad = || line.syntax(col, format!("bad participant '{token}'"));
    if let Some((net, x)) = token.split_once('@') {
        if !is_identifier(net) {
            return Err(bad());
        }
        let location = parse_vector(x).ok_or_else(bad)?;
        return Ok(ParticipantDecl::Network {
            net: net.to_string(),
            location: Some(location),
        });
    }
    if let Some((net, k)) = token.split_once('.') {
        if !is_identifier(net) || k.is_empty() || !k.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        return Ok(ParticipantDecl::Node {
            net: net.to_string(),
            node: k.parse().map_err(|_| bad())?,
        });
    }
    if !is_identifier(token) {
        return Err(bad());
    }
    Ok(ParticipantDecl::Network {
        net: token.to_string(),
        location: None,
    })
}

/// Parses instrument text; reports the first error with its line.
pub fn parse_instrument(text: &str) -> Result<InstrumentFile, PersistError> {
    let mut file = InstrumentFile::default();
    let mut version_seen = false;
    let mut section = Section::Top;
    let mut seen_keys: BTreeSet<String> = BTreeSet::new();
    let mut partial = Partial {
        network: Vec::new(),
        coupling_kind: Vec::new(),
        pickup_mode: Vec::new(),
        snapshot_scope: Vec::new(),
    };

    for (index, raw) in text.lines().enumerate() {
        let line = Line { number: index + 1 };
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let lead = content.len() - content.trim_start().len();

        if trimmed.starts_with('[') {
            if !trimmed.ends_with(']') {
                return Err(line.syntax(lead + trimmed.len() + 1, "expected ']'"));
            }
            let inner = &trimmed[1..trimmed.len() - 1];
            let words: Vec<&str> = inner.split_whitespace().collect();
            seen_keys.clear();
            section = match words.as_slice() {
                ["rates"] => {
                    if file.rates.is_some() {
                        return Err(line.range("duplicate [rates] section"));
                    }
                    file.rates = Some(RatesDecl::default());
                    Section::Rates
                }
                ["network", name] if is_identifier(name) => {
                    if file.networks.iter().any(|n| n.name == *name) {
                        return Err(line.range(format!("duplicate network '{name}'")));
                    }
                    file.networks.push(NetworkDecl {
                        name: name.to_string(),
                        template: Template::Custom,
                        modes: 1,
                        f0: None,
                        mass: None,
                        damp: None,
                        stretch: None,
                        level: None,
                        duffing: None,
                        nodes: BTreeMap::new(),
                    });
                    partial.network.push((line.number, None, None));
                    Section::Network(file.networks.len() - 1)
                }
                ["coupling", id] if !id.is_empty() && id.bytes().all(|b| b.is_ascii_digit()) => {
                    let id: u64 = id.parse().map_err(|_| line.syntax(lead + 11, "bad coupling id"))?;
                    if file.couplings.iter().any(|c| c.id == id) {
                        return Err(line.range(format!("duplicate coupling {id}")));
                    }
                    file.couplings.push(CouplingDecl {
                        id,
                        kind: String::new(),
                        participants: Vec::new(),
                        params: BTreeMap::new(),
                        rate: None,
                    });
                    partial.coupling_kind.push((line.number, None, Vec::new(), false));
                    Section::Coupling(file.couplings.len() - 1)
                }
                ["pickup"] | ["pickup", _] => {
                    let name = words.get(1).copied().unwrap_or("main");
                    if !is_identifier(name) {
                        return Err(line.syntax(lead + 9, format!("bad pickup name '{name}'")));
                    }
                    if file.pickups.iter().any(|p| p.name == name) {
                        return Err(line.range(format!("duplicate pickup '{name}'")));
                    }
                    file.pickups.push(PickupDecl {
                        name: name.to_string(),
                        mode: PickupMode::Sum,
                        net: None,
                        x: None,
                        weights: None,
                        gain: None,
                    });
                    partial.pickup_mode.push((line.number, None));
                    Section::Pickup(file.pickups.len() - 1)
                }
                ["snapshot", name] if is_identifier(name) => {
                    if file.snapshots.iter().any(|s| s.name == *name) {
                        return Err(line.range(format!("duplicate snapshot '{name}'")));
                    }
                    file.snapshots.push(Snapshot {
                        name: name.to_string(),
                        scope: SnapshotScope::Instrument,
                        entries: BTreeMap::new(),
                    });
                    partial.snapshot_scope.push((line.number, None));
                    Section::Snapshot(file.snapshots.len() - 1)
                }
                _ => return Err(line.syntax(lead + 2, format!("unknown section '[{inner}]'"))),
            };
            continue;
        }

        let Some(eq) = content.find('=') else {
            return Err(line.syntax(content.trim_end().len() + 1, "expected '='"));
        };
        let key = content[..eq].trim();
        if key.is_empty() {
            return Err(line.syntax(lead + 1, "missing key"));
        }
        let after = &content[eq + 1..];
        let value_text = after.trim();
        let value_col = eq + 2 + (after.len() - after.trim_start().len());
        if value_text.is_empty() {
            return Err(line.syntax(value_col, "missing value"));
        }
        if !seen_keys.insert(key.to_string()) {
            return Err(line.range(format!("duplicate key '{key}'")));
        }
        let value = Value {
            text: value_text,
            col: value_col,
        };

        match section {
            Section::Top => match key {
                "format_version" => {
                    let v = value.number(&line)?;
                    if v != FORMAT_VERSION as f64 {
                        return Err(line.range(format!("unsupported format_version {value_text}")));
                    }
                    version_seen = true;
                }
                _ => return Err(line.unknown(key)),
            },
            Section::Rates => {
                let rates = file.rates.as_mut().expect("in rates section");
                match key {
                    "sample_rate" => rates.sample_rate = Some(value.positive(&line)?),
                    "oversample" => rates.oversample = Some(value.count(&line)?),
                    "control_block" => rates.control_block = Some(value.count(&line)?),
                    "coupling_divisor" => rates.coupling_divisor = Some(value.count(&line)?),
                    _ => return Err(line.unknown(key)),
                }
            }
            Section::Network(i) => {
                let net = &mut file.networks[i];
                let p = &mut partial.network[i];
                match key {
                    "template" => {
                        let t = Template::from_name(value_text).map_err(|_| {
                            line.range(format!("unknown template '{value_text}'"))
                        })?;
                        net.template = t;
                        p.1 = Some(t);
                    }
                    "modes" => {
                        let n = value.count(&line)? as usize;
                        net.modes = n;
                        p.2 = Some(n);
                    }
                    "f0" => net.f0 = Some(value.positive(&line)?),
                    "mass" => net.mass = Some(value.positive(&line)?),
                    "damp" => net.damp = Some(value.nonnegative(&line)?),
                    "B" => net.stretch = Some(value.nonnegative(&line)?),
                    "level" => {
                        let v = value.number(&line)?;
                        if !(v.fract() == 0.0 && (1.0..=4.0).contains(&v)) {
                            return Err(line.range(format!("level must be 1..4, found {value_text}")));
                        }
                        net.level = Some(v as u8);
                    }
                    "duffing" => net.duffing = Some(value.number(&line)?),
                    _ => {
                        let parts: Vec<&str> = key.split('.').collect();
                        let ["node", k, param] = parts.as_slice() else {
                            return Err(line.unknown(key));
                        };
                        let k: usize = k.parse().map_err(|_| line.unknown(key))?;
                        let node = net.nodes.entry(k).or_default();
                        match *param {
                            "f0" => {
                                let f: F0Value = value_text
                                    .parse()
                                    .map_err(|_| line.syntax(value_col, format!("bad f0 '{value_text}'")))?;
                                set_once(&mut node.f0, f, &line, key)?
                            }
                            "mass" => set_once(&mut node.mass, value.positive(&line)?, &line, key)?,
                            "damp" => set_once(&mut node.damp, value.nonnegative(&line)?, &line, key)?,
                            "duffing" => set_once(&mut node.duffing, value.number(&line)?, &line, key)?,
                            _ => return Err(line.unknown(key)),
                        }
                    }
                }
            }
            Section::Coupling(i) => {
                let c = &mut file.couplings[i];
                let p = &mut partial.coupling_kind[i];
                match key {
                    "kind" => {
                        if !TEMPLATE_NAMES.contains(&value_text) {
                            return Err(line.range(format!("unknown coupling kind '{value_text}'")));
                        }
                        c.kind = value_text.to_string();
                        p.1 = Some(value_text.to_string());
                    }
                    "participants" => {
                        let mut col = value_col;
                        let mut rest = value_text;
                        while !rest.is_empty() {
                            let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
                            c.participants.push(parse_participant(&rest[..end], &line, col)?);
                            let next = rest[end..].trim_start();
                            col += rest.len() - next.len();
                            rest = next;
                        }
                        p.3 = true;
                    }
                    "rate" => c.rate = Some(value.count(&line)?),
                    "k" | "s" | "e_max" | "kappa" => {
                        c.params.insert(key.to_string(), value.number(&line)?);
                        p.2.push((line.number, key.to_string()));
                    }
                    _ => return Err(line.unknown(key)),
                }
            }
            Section::Pickup(i) => {
                let pk = &mut file.pickups[i];
                match key {
                    "mode" => {
                        let mode = match value_text {
                            "sum" => PickupMode::Sum,
                            "location" => PickupMode::Location,
                            "weights" => PickupMode::Weights,
                            _ => return Err(line.range(format!("unknown pickup mode '{value_text}'"))),
                        };
                        pk.mode = mode;
                        partial.pickup_mode[i].1 = Some(mode);
                    }
                    "net" => {
                        if !is_identifier(value_text) {
                            return Err(line.syntax(value_col, format!("bad network name '{value_text}'")));
                        }
                        pk.net = Some(value_text.to_string());
                    }
                    "x" => pk.x = Some(value.vector(&line)?),
                    "weights" => pk.weights = Some(value.vector(&line)?),
                    "gain" => pk.gain = Some(value.number(&line)?),
                    _ => return Err(line.unknown(key)),
                }
            }
            Section::Snapshot(i) => {
                let snap = &mut file.snapshots[i];
                if key == "scope" {
                    let scope = SnapshotScope::parse(value_text)
                        .ok_or_else(|| line.range(format!("bad scope '{value_text}'")))?;
                    snap.scope = scope.clone();
                    partial.snapshot_scope[i].1 = Some(scope);
                    continue;
                }
                let path: ParamPath = key.parse().map_err(|_| line.unknown(key))?;
                if !path.is_playable() {
                    return Err(line.range(format!("'{key}' is not a playable parameter")));
                }
                let v = ParamValue::parse_for(&path, value_text)
                    .map_err(|_| line.syntax(value_col, format!("bad value '{value_text}'")))?;
                snap.entries.insert(key.to_string(), v.to_string());
            }
        }
    }

    let _ = version_seen;
    let at = |line: usize, msg: String| PersistError::Range { line, msg };
    for (net, (line, template, modes)) in file.networks.iter().zip(&partial.network) {
        if template.is_none() {
            return Err(at(*line, format!("network '{}' needs a template", net.name)));
        }
        if modes.is_none() {
            return Err(at(*line, format!("network '{}' needs modes", net.name)));
        }
        if let Some(k) = net.nodes.keys().find(|k| **k >= net.modes) {
            return Err(at(*line, format!("node {k} out of range for '{}'", net.name)));
        }
    }
    for (c, (line, kind, params, has_participants)) in file.couplings.iter().zip(&partial.coupling_kind) {
        let Some(kind) = kind else {
            return Err(at(*line, format!("coupling {} needs a kind", c.id)));
        };
        if !has_participants {
            return Err(at(*line, format!("coupling {} needs participants", c.id)));
        }
        let expected = EtfKind::from_template(kind, &BTreeMap::new())
            .expect("kind checked")
            .param_names();
        for (pline, key) in params {
            if !expected.contains(&key.as_str()) {
                return Err(PersistError::UnknownKey {
                    line: *pline,
                    key: key.clone(),
                });
            }
        }
        EtfKind::from_template(kind, &c.params).map_err(|e| at(*line, e.to_string()))?;
    }
    for (pk, (line, _)) in file.pickups.iter().zip(&partial.pickup_mode) {
        let ok = match pk.mode {
            PickupMode::Sum => pk.net.is_none() && pk.x.is_none() && pk.weights.is_none(),
            PickupMode::Location => pk.net.is_some() && pk.x.is_some() && pk.weights.is_none(),
            PickupMode::Weights => pk.weights.is_some() && pk.x.is_none() && pk.net.is_none(),
        };
        if !ok {
            return Err(at(*line, format!("pickup '{}' keys do not match mode {}", pk.name, pk.mode.name())));
        }
    }
    Ok(file)
}

/// Writes the canonical text form.
pub fn serialize(file: &InstrumentFile) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version = {}", file.format_version);
    let kv = |out: &mut String, key: &str, value: &dyn std::fmt::Display| {
        let _ = writeln!(out, "{key} = {value}");
    };
    if let Some(r) = &file.rates {
        out.push_str("\n[rates]\n");
        if let Some(v) = r.sample_rate {
            kv(&mut out, "sample_rate", &Num(v));
        }
        if let Some(v) = r.oversample {
            kv(&mut out, "oversample", &v);
        }
        if let Some(v) = r.control_block {
            kv(&mut out, "control_block", &v);
        }
        if let Some(v) = r.coupling_divisor {
            kv(&mut out, "coupling_divisor", &v);
        }
    }
    for n in &file.networks {
        let _ = writeln!(out, "\n[network {}]", n.name);
        kv(&mut out, "template", &n.template);
        kv(&mut out, "modes", &n.modes);
        for (key, v) in [
            ("f0", n.f0),
            ("mass", n.mass),
            ("damp", n.damp),
            ("B", n.stretch),
        ] {
            if let Some(v) = v {
                kv(&mut out, key, &Num(v));
            }
        }
        if let Some(l) = n.level {
            kv(&mut out, "level", &l);
        }
        if let Some(v) = n.duffing {
            kv(&mut out, "duffing", &Num(v));
        }
        for (k, node) in &n.nodes {
            if let Some(f) = node.f0 {
                kv(&mut out, &format!("node.{k}.f0"), &f);
            }
            for (name, v) in [("mass", node.mass), ("damp", node.damp), ("duffing", node.duffing)] {
                if let Some(v) = v {
                    kv(&mut out, &format!("node.{k}.{name}"), &Num(v));
                }
            }
        }
    }
    let mut couplings: Vec<&CouplingDecl> = file.couplings.iter().collect();
    couplings.sort_by_key(|c| c.id);
    for c in couplings {
        let _ = writeln!(out, "\n[coupling {}]", c.id);
        kv(&mut out, "kind", &c.kind);
        let participants: Vec<String> = c.participants.iter().map(ToString::to_string).collect();
        kv(&mut out, "participants", &participants.join(" "));
        let order = EtfKind::from_template(&c.kind, &BTreeMap::new())
            .map(|k| k.param_names())
            .unwrap_or(&[]);
        for name in order {
            if let Some(v) = c.params.get(*name) {
                kv(&mut out, name, &Num(*v));
            }
        }
        if let Some(r) = c.rate {
            kv(&mut out, "rate", &r);
        }
    }
    for p in &file.pickups {
        let _ = writeln!(out, "\n[pickup {}]", p.name);
        kv(&mut out, "mode", &p.mode.name());
        if let Some(n) = &p.net {
            kv(&mut out, "net", n);
        }
        if let Some(x) = &p.x {
            kv(&mut out, "x", &format_vector(x));
        }
        if let Some(w) = &p.weights {
            kv(&mut out, "weights", &format_vector(w));
        }
        if let Some(g) = p.gain {
            kv(&mut out, "gain", &Num(g));
        }
    }
    let mut snapshots: Vec<&Snapshot> = file.snapshots.iter().collect();
    snapshots.sort_by(|a, b| a.name.cmp(&b.name));
    for s in snapshots {
        let _ = writeln!(out, "\n[snapshot {}]", s.name);
        kv(&mut out, "scope", &s.scope);
        for (k, v) in &s.entries {
            kv(&mut out, k, v);
        }
    }
    out
}

/// Parses and re-serializes, giving the canonical form of `text`.
pub fn canonicalize(text: &str) -> Result<String, PersistError> {
    parse_instrument(text).map(|f| serialize(&f))
}

impl Instrument {
    /// Builds a live instrument from a parsed file.
    pub fn from_file(file: &InstrumentFile) -> Result<Instrument, PersistError> {
        let defaults = RateConfig::default();
        let rates = file.rates.as_ref().map_or(defaults, |r| RateConfig {
            sample_rate: r.sample_rate.unwrap_or(defaults.sample_rate),
            oversample: r.oversample.unwrap_or(defaults.oversample),
            control_block: r.control_block.unwrap_or(defaults.control_block),
            default_coupling_divisor: r.coupling_divisor.unwrap_or(defaults.default_coupling_divisor),
        });
        let mut inst = Instrument::new(rates);
        let default_macro = MacroParams::default();
        for n in &file.networks {
            let macro_params = MacroParams {
                fundamental: n.f0.unwrap_or(default_macro.fundamental),
                total_mass: n.mass.unwrap_or(default_macro.total_mass),
                global_damping: n.damp.unwrap_or(default_macro.global_damping),
                stretch: n.stretch.unwrap_or(default_macro.stretch),
            };
            let level = Level::from_index(n.level.unwrap_or(1)).unwrap_or_default();
            inst.add_network(&n.name, n.template, n.modes, macro_params, level)?;
            let set = |inst: &mut Instrument, path: ParamPath, value: ParamValue| inst.set_param(&path, &value).map(|_| ());
            if let Some(beta) = n.duffing {
                set(
                    &mut inst,
                    ParamPath::Net {
                        net: n.name.clone(),
                        param: crate::params::NetParam::Duffing,
                    },
                    ParamValue::Number(beta),
                )?;
            }
            for (k, node) in &n.nodes {
                let path = |param| ParamPath::Node {
                    net: n.name.clone(),
                    node: *k,
                    param,
                };
                if let Some(f) = node.f0 {
                    set(&mut inst, path(NodeParam::F0), ParamValue::F0(f))?;
                }
                if let Some(v) = node.mass {
                    set(&mut inst, path(NodeParam::Mass), ParamValue::Number(v))?;
                }
                if let Some(v) = node.damp {
                    set(&mut inst, path(NodeParam::Damp), ParamValue::Number(v))?;
                }
                if let Some(v) = node.duffing {
                    set(&mut inst, path(NodeParam::Duffing), ParamValue::Number(v))?;
                }
            }
        }
        for c in &file.couplings {
            let kind = EtfKind::from_template(&c.kind, &c.params).map_err(InstrumentError::from)?;
            let participants = c
                .participants
                .iter()
                .map(|p| inst.parse_participant(&p.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            inst.insert_coupling(Coupling {
                id: CouplingId(c.id),
                kind,
                participants,
                rate_divisor: c.rate.unwrap_or(rates.default_coupling_divisor),
            })?;
        }
        for p in &file.pickups {
            let tap = match p.mode {
                PickupMode::Sum => PickupTap::Sum,
                PickupMode::Weights => PickupTap::Weights(p.weights.clone().unwrap_or_default()),
                PickupMode::Location => {
                    let name = p.net.clone().unwrap_or_default();
                    let network = inst
                        .network_index(&name)
                        .ok_or(InstrumentError::UnknownParticipant(name))?;
                    PickupTap::Location {
                        network,
                        x: p.x.clone().unwrap_or_default(),
                    }
                }
            };
            inst.add_pickup(Pickup {
                name: p.name.clone(),
                tap,
                gain: p.gain.unwrap_or(1.0),
            })?;
        }
        for s in &file.snapshots {
            inst.insert_snapshot(s.clone())?;
        }
        Ok(inst)
    }

    /// Describes the instrument's configuration (not node state) as a file.
    pub fn to_file(&self) -> InstrumentFile {
        let r = self.rates();
        let mut file = InstrumentFile {
            rates: Some(RatesDecl {
                sample_rate: Some(r.sample_rate),
                oversample: Some(r.oversample),
                control_block: Some(r.control_block),
                coupling_divisor: Some(r.default_coupling_divisor),
            }),
            ..InstrumentFile::default()
        };
        for net in self.networks() {
            let m = net.macro_params();
            let base_duffing = net.duffing();
            let mut nodes = BTreeMap::new();
            for (k, node) in net.nodes().iter().enumerate() {
                let decl = NodeDecl {
                    f0: node_f0_value(net, k),
                    mass: (node.params.mass != net.template_mass()).then_some(node.params.mass),
                    damp: node.damping_override,
                    duffing: (node.params.duffing_beta != base_duffing).then_some(node.params.duffing_beta),
                };
                if decl != NodeDecl::default() {
                    nodes.insert(k, decl);
                }
            }
            file.networks.push(NetworkDecl {
                name: net.name().to_string(),
                template: net.template(),
                modes: net.len(),
                f0: Some(m.fundamental),
                mass: Some(m.total_mass),
                damp: Some(m.global_damping),
                stretch: Some(m.stretch),
                level: Some(net.level().index()),
                duffing: (base_duffing != 0.0).then_some(base_duffing),
                nodes,
            });
        }
        for c in self.couplings() {
            let participants = c
                .participants
                .iter()
                .map(|p| match p {
                    Participant::Node(NodeRef { network, node }) => ParticipantDecl::Node {
                        net: self.networks()[*network].name().to_string(),
                        node: *node,
                    },
                    Participant::Network { network, location } => ParticipantDecl::Network {
                        net: self.networks()[*network].name().to_string(),
                        location: location.clone(),
                    },
                })
                .collect();
            file.couplings.push(CouplingDecl {
                id: c.id.0,
                kind: c.kind.template_name().to_string(),
                participants,
                params: c
                    .kind
                    .param_names()
                    .iter()
                    .map(|n| (n.to_string(), c.kind.param(n).expect("listed")))
                    .collect(),
                rate: Some(c.rate_divisor),
            });
        }
        for p in self.pickups() {
            let (mode, net, x, weights) = match &p.tap {
                PickupTap::Sum => (PickupMode::Sum, None, None, None),
                PickupTap::Location { network, x } => (
                    PickupMode::Location,
                    Some(self.networks()[*network].name().to_string()),
                    Some(x.clone()),
                    None,
                ),
                PickupTap::Weights(w) => (PickupMode::Weights, None, None, Some(w.clone())),
            };
            file.pickups.push(PickupDecl {
                name: p.name.clone(),
                mode,
                net,
                x,
                weights,
                gain: Some(p.gain),
            });
        }
        file.snapshots = self.snapshots().values().cloned().collect();
        file
    }

    pub fn from_text(text: &str) -> Result<Instrument, PersistError> {
        Instrument::from_file(&parse_instrument(text)?)
    }

    pub fn to_text(&self) -> String {
        serialize(&self.to_file())
    }
}

pub fn load_instrument(path: &Path) -> Result<Instrument, PersistError> {
    let text = std::fs::read_to_string(path).map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    Instrument::from_text(&text)
}

pub fn save_instrument(inst: &Instrument, path: &Path) -> Result<(), PersistError> {
    std::fs::write(path, inst.to_text()).map_err(|e| PersistError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}
