//! The instrument: networks, couplings, pickups and snapshots addressed
//! through one parameter namespace.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::Hasher;

use thiserror::Error;

use crate::engine::{Pickup, PickupTap};
use crate::etf::{Coupling, CouplingId, EtfError, EtfKind, Participant};
use crate::mode::{Level, ModeError};
use crate::network::{MacroParams, Network, NetworkError, Template};
use crate::params::{
    format_vector, parse_vector, CouplingParam, F0Repr, F0Value, NetParam, NodeParam, ParamClass,
    ParamError, ParamPath, ParamValue, PickupParam, RateParam,
};
use crate::persistence::{Snapshot, SnapshotScope};
use crate::scheduler::{CouplingRegistry, RateConfig};

/// Address of one node: network index and zero-based node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef {
    pub network: usize,
    pub node: usize,
}

impl NodeRef {
    pub fn new(network: usize, node: usize) -> Self {
        NodeRef { network, node }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstrumentError {
    #[error("bad path '{0}'")]
    BadPath(String),
    #[error("bad value '{0}'")]
    BadValue(String),
    #[error("unknown id '{0}'")]
    UnknownId(String),
    #[error("'{0}' is read-only")]
    ReadOnly(String),
    #[error("unknown participant '{0}'")]
    UnknownParticipant(String),
    #[error("duplicate name '{0}'")]
    DuplicateName(String),
    #[error("unknown snapshot '{0}'")]
    UnknownSnapshot(String),
    #[error("'{0}' is not a playable parameter")]
    NotPlayable(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Etf(#[from] EtfError),
    #[error(transparent)]
    Mode(#[from] ModeError),
}

impl From<ParamError> for InstrumentError {
    fn from(e: ParamError) -> Self {
        match e {
            ParamError::BadPath(p) => InstrumentError::BadPath(p),
            ParamError::BadValue(v) => InstrumentError::BadValue(v),
            ParamError::UnknownId(i) => InstrumentError::UnknownId(i),
            ParamError::ReadOnly(p) => InstrumentError::ReadOnly(p),
        }
    }
}

impl InstrumentError {
    /// Protocol error code.
    pub fn code(&self) -> &'static str {
        match self {
            InstrumentError::BadPath(_)
            | InstrumentError::ReadOnly(_)
            | InstrumentError::UnknownParticipant(_)
            | InstrumentError::NotPlayable(_) => "badpath",
            InstrumentError::UnknownId(_) | InstrumentError::UnknownSnapshot(_) => "unknownid",
            InstrumentError::DuplicateName(_)
            | InstrumentError::BadValue(_)
            | InstrumentError::Network(_)
            | InstrumentError::Etf(_)
            | InstrumentError::Mode(_) => "badvalue",
        }
    }
}

/// What a successful parameter edit did beyond the value change.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SetOutcome {
    /// The edit may have reset node state.
    pub structural: bool,
    /// Couplings dropped because their participants disappeared.
    pub removed_couplings: Vec<CouplingId>,
}

/// Result of recalling a snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recall {
    /// Edits whose values differ from the current ones, in entry order.
    pub edits: Vec<(ParamPath, ParamValue)>,
    /// Entries that no longer resolve.
    pub stale: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instrument {
    rates: RateConfig,
    networks: Vec<Network>,
    registry: CouplingRegistry,
    pickups: Vec<Pickup>,
    snapshots: BTreeMap<String, Snapshot>,
    revision: u64,
}

impl Default for Instrument {
    fn default() -> Self {
        Instrument::new(RateConfig::default())
    }
}

impl Instrument {
    pub fn new(rates: RateConfig) -> Self {
        Instrument {
            rates,
            networks: Vec::new(),
            registry: CouplingRegistry::default(),
            pickups: Vec::new(),
            snapshots: BTreeMap::new(),
            revision: 0,
        }
    }

    pub fn rates(&self) -> &RateConfig {
        &self.rates
    }

    pub fn effective_rate(&self) -> f64 {
        self.rates.effective_rate()
    }

    /// Bumped on every successful edit; the scheduler recompiles when it moves.
    pub fn revision(&self) -> u64 {
        self.revision
    }

    fn touch(&mut self) {
        self.revision += 1;
    }

    pub fn networks(&self) -> &[Network] {
        &self.networks
    }

    pub fn networks_mut(&mut self) -> &mut [Network] {
        self.touch();
        &mut self.networks
    }

    /// Node-state access for the audio path; does not count as an edit.
    pub(crate) fn networks_untracked(&mut self) -> &mut [Network] {
        &mut self.networks
    }

    pub fn network(&self, index: usize) -> Option<&Network> {
        self.networks.get(index)
    }

    pub fn network_index(&self, name: &str) -> Option<usize> {
        self.networks.iter().position(|n| n.name() == name)
    }

    fn require_network(&self, name: &str) -> Result<usize, InstrumentError> {
        self.network_index(name)
            .ok_or_else(|| InstrumentError::BadPath(format!("net.{name}")))
    }

    pub fn node_count(&self) -> usize {
        self.networks.iter().map(Network::len).sum()
    }

    pub fn registry(&self) -> &CouplingRegistry {
        &self.registry
    }

    pub fn couplings(&self) -> impl Iterator<Item = &Coupling> {
        self.registry.iter()
    }

    pub fn coupling(&self, id: CouplingId) -> Option<&Coupling> {
        self.registry.get(id)
    }

    pub fn pickups(&self) -> &[Pickup] {
        &self.pickups
    }

    /// Pickups used for output: the configured ones, or a unit-gain sum of
    /// every node when none is configured.
    pub fn output_pickups(&self) -> Vec<Pickup> {
        if self.pickups.is_empty() {
            vec![Pickup::sum("main", 1.0)]
        } else {
            self.pickups.clone()
        }
    }

    pub fn add_pickup(&mut self, pickup: Pickup) -> Result<(), InstrumentError> {
        if self.pickups.iter().any(|p| p.name == pickup.name) {
            return Err(InstrumentError::DuplicateName(pickup.name));
        }
        if self.pickups.len() >= 2 {
            return Err(InstrumentError::BadValue("at most two pickups".into()));
        }
        self.validate_pickup(&pickup)?;
        self.pickups.push(pickup);
        self.touch();
        Ok(())
    }

    fn validate_pickup(&self, pickup: &Pickup) -> Result<(), InstrumentError> {
        if !pickup.gain.is_finite() {
            return Err(InstrumentError::BadValue(pickup.gain.to_string()));
        }
        match &pickup.tap {
            PickupTap::Sum => Ok(()),
            PickupTap::Location { network, x } => {
                let net = self
                    .networks
                    .get(*network)
                    .ok_or_else(|| InstrumentError::UnknownParticipant(network.to_string()))?;
                if !net.template().has_spatial_model() {
                    return Err(NetworkError::NoSpatialModel(net.name().to_string()).into());
                }
                if !net.template().contains(x) {
                    return Err(NetworkError::BadLocation.into());
                }
                Ok(())
            }
            PickupTap::Weights(w) => {
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(InstrumentError::BadValue(format_vector(w)));
                }
                Ok(())
            }
        }
    }

    pub fn snapshots(&self) -> &BTreeMap<String, Snapshot> {
        &self.snapshots
    }

    pub fn add_network(
        &mut self,
        name: &str,
        template: Template,
        n_modes: usize,
        macro_params: MacroParams,
        level: Level,
    ) -> Result<usize, InstrumentError> {
        if self.network_index(name).is_some() {
            return Err(InstrumentError::DuplicateName(name.to_string()));
        }
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
            return Err(InstrumentError::BadValue(name.to_string()));
        }
        let net = Network::build(name, template, n_modes, macro_params, level, self.effective_rate())?;
        self.networks.push(net);
        self.touch();
        Ok(self.networks.len() - 1)
    }

    /// Like [`Instrument::add_network`], also registering the couplings the
    /// template brings along (a cymbal's saturating mode links).
    pub fn add_network_with_defaults(
        &mut self,
        name: &str,
        template: Template,
        n_modes: usize,
        macro_params: MacroParams,
        level: Level,
    ) -> Result<usize, InstrumentError> {
        let index = self.add_network(name, template, n_modes, macro_params, level)?;
        for c in self.networks[index].default_couplings(index) {
            self.add_coupling(c.kind, c.participants, c.rate_divisor)?;
        }
        Ok(index)
    }

    fn check_participant(&self, p: &Participant) -> Result<(), InstrumentError> {
        match p {
            Participant::Node(r) => {
                let net = self
                    .networks
                    .get(r.network)
                    .ok_or_else(|| InstrumentError::UnknownParticipant(format!("{}.{}", r.network, r.node)))?;
                if r.node >= net.len() {
                    return Err(InstrumentError::UnknownParticipant(format!("{}.{}", net.name(), r.node)));
                }
                Ok(())
            }
            Participant::Network { network, location } => {
                let net = self
                    .networks
                    .get(*network)
                    .ok_or_else(|| InstrumentError::UnknownParticipant(network.to_string()))?;
                if let Some(x) = location {
                    if !net.template().has_spatial_model() && net.len() > 1 {
                        return Err(NetworkError::NoSpatialModel(net.name().to_string()).into());
                    }
                    if net.template().has_spatial_model() && !net.template().contains(x) {
                        return Err(NetworkError::BadLocation.into());
                    }
                }
                Ok(())
            }
        }
    }

    /// Registers a coupling and returns its id. Ids are never reused.
    pub fn add_coupling(
        &mut self,
        kind: EtfKind,
        participants: Vec<Participant>,
        rate_divisor: u32,
    ) -> Result<CouplingId, InstrumentError> {
        for p in &participants {
            self.check_participant(p)?;
        }
        let id = self.registry.add(kind, participants, rate_divisor)?;
        self.touch();
        Ok(id)
    }

    /// Registers a coupling under a fixed id (used when loading files).
    pub fn insert_coupling(&mut self, coupling: Coupling) -> Result<(), InstrumentError> {
        for p in &coupling.participants {
            self.check_participant(p)?;
        }
        self.registry.insert(coupling)?;
        self.touch();
        Ok(())
    }

    pub fn remove_coupling(&mut self, id: CouplingId) -> Result<Coupling, InstrumentError> {
        let removed = self
            .registry
            .remove(id)
            .ok_or_else(|| InstrumentError::UnknownId(id.to_string()))?;
        self.touch();
        Ok(removed)
    }

    /// Parses `s.3` (node), `s` (whole network) or `s@0.25` (network at a location).
    pub fn parse_participant(&self, text: &str) -> Result<Participant, InstrumentError> {
        let unknown = || InstrumentError::UnknownParticipant(text.to_string());
        if let Some((net, x)) = text.split_once('@') {
            let network = self.network_index(net).ok_or_else(unknown)?;
            let location = parse_vector(x).ok_or_else(|| InstrumentError::BadValue(text.to_string()))?;
            return Ok(Participant::Network {
                network,
                location: Some(location),
            });
        }
        if let Some((net, k)) = text.rsplit_once('.') {
            if let (Some(network), Ok(node)) = (self.network_index(net), k.parse::<usize>()) {
                self.check_participant(&Participant::Node(NodeRef::new(network, node)))?;
                return Ok(Participant::Node(NodeRef::new(network, node)));
            }
            return Err(unknown());
        }
        let network = self.network_index(text).ok_or_else(unknown)?;
        Ok(Participant::Network {
            network,
            location: None,
        })
    }

    pub fn format_participant(&self, p: &Participant) -> String {
        let name = |i: usize| {
            self.networks
                .get(i)
                .map(|n| n.name().to_string())
                .unwrap_or_else(|| format!("#{i}"))
        };
        match p {
            Participant::Node(r) => format!("{}.{}", name(r.network), r.node),
            Participant::Network { network, location: None } => name(*network),
            Participant::Network {
                network,
                location: Some(x),
            } => format!("{}@{}", name(*network), format_vector(x)),
        }
    }

    /// Sum of enabled-node energies over all networks.
    pub fn total_energy(&self) -> f64 {
        self.networks.iter().map(|n| n.macro_state().total_energy).sum()
    }

    pub fn node_energy(&self, r: NodeRef) -> f64 {
        self.networks[r.network].node_energy(r.node)
    }

    /// Hash of every node state vector in one network.
    pub fn network_state_hash(&self, index: usize) -> u64 {
        let mut h = DefaultHasher::new();
        hash_network(&mut h, &self.networks[index]);
        h.finish()
    }

    /// Hash of every node state vector in the instrument.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for net in &self.networks {
            hash_network(&mut h, net);
        }
        h.finish()
    }

    /// Reads a parameter in canonical form (f0 in Hz).
    pub fn get_param(&self, path: &ParamPath) -> Result<ParamValue, InstrumentError> {
        let bad = || InstrumentError::BadPath(path.to_string());
        Ok(match path {
            ParamPath::Net { net, param } => {
                let index = self.require_network(net)?;
                let n = &self.networks[index];
                let m = n.macro_params();
                match param {
                    NetParam::F0 => ParamValue::Number(m.fundamental),
                    NetParam::Mass => ParamValue::Number(m.total_mass),
                    NetParam::Damp => ParamValue::Number(m.global_damping),
                    NetParam::Stretch => ParamValue::Number(m.stretch),
                    NetParam::Duffing => ParamValue::Number(n.duffing()),
                    NetParam::Modes => ParamValue::Number(n.len() as f64),
                    NetParam::Template => ParamValue::Text(n.template().name().to_string()),
                    NetParam::Level => ParamValue::Number(n.level().index() as f64),
                    NetParam::StateHash => ParamValue::Text(format!("{:016x}", self.network_state_hash(index))),
                }
            }
            ParamPath::Node { net, node, param } => {
                let index = self.require_network(net)?;
                let n = &self.networks[index];
                let nd = n.node(*node).map_err(|_| bad())?;
                match param {
                    NodeParam::F0 => ParamValue::Number(nd.params.nominal_frequency),
                    NodeParam::Mass => ParamValue::Number(nd.params.mass),
                    NodeParam::Damp => ParamValue::Number(nd.params.damping),
                    NodeParam::Duffing => ParamValue::Number(nd.params.duffing_beta),
                    NodeParam::Energy => ParamValue::Number(n.node_energy(*node)),
                }
            }
            ParamPath::Coupling { id, param } => {
                let c = self
                    .registry
                    .get(CouplingId(*id))
                    .ok_or_else(|| InstrumentError::UnknownId(id.to_string()))?;
                match param {
                    CouplingParam::Kernel(name) => ParamValue::Number(c.kind.param(name).ok_or_else(bad)?),
                    CouplingParam::Rate => ParamValue::Number(c.rate_divisor as f64),
                    CouplingParam::Kind => ParamValue::Text(c.kind.template_name().to_string()),
                    CouplingParam::Participants => ParamValue::Text(
                        c.participants
                            .iter()
                            .map(|p| self.format_participant(p))
                            .collect::<Vec<_>>()
                            .join(" "),
                    ),
                }
            }
            ParamPath::Rate(p) => ParamValue::Number(match p {
                RateParam::SampleRate => self.rates.sample_rate,
                RateParam::Oversample => self.rates.oversample as f64,
                RateParam::ControlBlock => self.rates.control_block as f64,
                RateParam::CouplingDivisor => self.rates.default_coupling_divisor as f64,
            }),
            ParamPath::Pickup { name, param } => {
                let p = self.pickups.iter().find(|p| &p.name == name).ok_or_else(bad)?;
                match (param, &p.tap) {
                    (PickupParam::Gain, _) => ParamValue::Number(p.gain),
                    (PickupParam::X, PickupTap::Location { x, .. }) => ParamValue::Vector(x.clone()),
                    (PickupParam::X, _) => return Err(bad()),
                }
            }
            ParamPath::StateHash => ParamValue::Text(format!("{:016x}", self.state_hash())),
        })
    }

    /// Parses `text` for `path` and applies it.
    pub fn set_param_text(&mut self, path: &ParamPath, text: &str) -> Result<SetOutcome, InstrumentError> {
        let value = ParamValue::parse_for(path, text)?;
        self.set_param(path, &value)
    }

    /// Applies an edit. Playable edits never touch node state.
    pub fn set_param(&mut self, path: &ParamPath, value: &ParamValue) -> Result<SetOutcome, InstrumentError> {
        if path.class() == ParamClass::ReadOnly {
            return Err(InstrumentError::ReadOnly(path.to_string()));
        }
        let bad_value = || InstrumentError::BadValue(value.to_string());
        let number = || value.as_number().ok_or_else(bad_value);
        let count = |v: f64| -> Result<usize, InstrumentError> {
            if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(bad_value())
            }
        };
        let mut outcome = SetOutcome {
            structural: path.class() == ParamClass::SystemState,
            ..SetOutcome::default()
        };
        match path {
            ParamPath::Net { net, param } => {
                let index = self.require_network(net)?;
                match param {
                    NetParam::F0 => {
                        let hz = match value {
                            ParamValue::Number(v) => *v,
                            ParamValue::F0(F0Value {
                                repr: F0Repr::Absolute,
                                value,
                            }) => *value,
                            _ => return Err(bad_value()),
                        };
                        self.networks[index].set_macro_param("f0", hz)?;
                    }
                    NetParam::Mass => self.networks[index].set_macro_param("mass", number()?)?,
                    NetParam::Damp => self.networks[index].set_macro_param("damp", number()?)?,
                    NetParam::Stretch => self.networks[index].set_macro_param("B", number()?)?,
                    NetParam::Duffing => {
                        let beta = number()?;
                        let n = &mut self.networks[index];
                        let mut scratch = n.clone();
                        for k in 0..scratch.len() {
                            scratch.set_node_duffing(k, beta)?;
                        }
                        *n = scratch;
                    }
                    NetParam::Modes => {
                        let n = count(number()?)?;
                        self.networks[index].resize(n)?;
                        outcome.removed_couplings = self.prune_couplings();
                    }
                    NetParam::Template => {
                        let ParamValue::Text(name) = value else {
                            return Err(bad_value());
                        };
                        self.networks[index].swap_template(Template::from_name(name)?)?;
                    }
                    NetParam::Level => {
                        let v = number()?;
                        let level = (v.fract() == 0.0 && (1.0..=4.0).contains(&v))
                            .then(|| Level::from_index(v as u8))
                            .flatten()
                            .ok_or_else(bad_value)?;
                        self.networks[index].set_level(level)?;
                    }
                    NetParam::StateHash => unreachable!("read-only"),
                }
            }
            ParamPath::Node { net, node, param } => {
                let index = self.require_network(net)?;
                let n = &mut self.networks[index];
                if *node >= n.len() {
                    return Err(InstrumentError::BadPath(path.to_string()));
                }
                match param {
                    NodeParam::F0 => {
                        let f0 = match value {
                            ParamValue::F0(v) => *v,
                            ParamValue::Number(v) => F0Value::hz(*v),
                            _ => return Err(bad_value()),
                        };
                        match f0.repr {
                            F0Repr::Ratio => n.set_node_ratio(*node, f0.value)?,
                            repr => {
                                let fundamental = n.macro_params().fundamental;
                                let partial = fundamental * (*node + 1) as f64;
                                n.set_node_frequency(*node, f0.to_hz(fundamental, partial), repr)?
                            }
                        }
                    }
                    NodeParam::Mass => n.set_node_mass(*node, number()?)?,
                    NodeParam::Damp => n.set_node_damping(*node, number()?)?,
                    NodeParam::Duffing => n.set_node_duffing(*node, number()?)?,
                    NodeParam::Energy => unreachable!("read-only"),
                }
            }
            ParamPath::Coupling { id, param } => {
                let v = number()?;
                let c = self
                    .registry
                    .get_mut(CouplingId(*id))
                    .ok_or_else(|| InstrumentError::UnknownId(id.to_string()))?;
                match param {
                    CouplingParam::Kernel(name) => c.kind.set_param(name, v)?,
                    CouplingParam::Rate => c.rate_divisor = count(v)? as u32,
                    _ => unreachable!("read-only"),
                }
            }
            ParamPath::Rate(p) => {
                let v = number()?;
                let mut rates = self.rates;
                match p {
                    RateParam::SampleRate => {
                        if !(v > 0.0) {
                            return Err(bad_value());
                        }
                        rates.sample_rate = v;
                    }
                    RateParam::Oversample => rates.oversample = count(v)? as u32,
                    RateParam::ControlBlock => rates.control_block = count(v)? as u32,
                    RateParam::CouplingDivisor => rates.default_coupling_divisor = count(v)? as u32,
                }
                self.set_rates(rates)?;
            }
            ParamPath::Pickup { name, param } => {
                let i = self
                    .pickups
                    .iter()
                    .position(|p| &p.name == name)
                    .ok_or_else(|| InstrumentError::BadPath(path.to_string()))?;
                let mut pickup = self.pickups[i].clone();
                match (param, &mut pickup.tap) {
                    (PickupParam::Gain, _) => pickup.gain = number()?,
                    (PickupParam::X, PickupTap::Location { x, .. }) => {
                        *x = match value {
                            ParamValue::Vector(v) => v.clone(),
                            ParamValue::Number(v) => vec![*v],
                            _ => return Err(bad_value()),
                        }
                    }
                    (PickupParam::X, _) => return Err(InstrumentError::BadPath(path.to_string())),
                }
                self.validate_pickup(&pickup)?;
                self.pickups[i] = pickup;
            }
            ParamPath::StateHash => unreachable!("read-only"),
        }
        self.touch();
        Ok(outcome)
    }

    pub fn set_rates(&mut self, rates: RateConfig) -> Result<(), InstrumentError> {
        rates.validate().map_err(InstrumentError::BadValue)?;
        self.rates = rates;
        let rate = rates.effective_rate();
        for net in &mut self.networks {
            net.set_effective_rate(rate);
        }
        self.touch();
        Ok(())
    }

    /// Drops couplings whose participants no longer exist.
    fn prune_couplings(&mut self) -> Vec<CouplingId> {
        let dangling: Vec<CouplingId> = self
            .registry
            .iter()
            .filter(|c| c.participants.iter().any(|p| self.check_participant(p).is_err()))
            .map(|c| c.id)
            .collect();
        for id in &dangling {
            self.registry.remove(*id);
        }
        dangling
    }

    /// Every exposed path with its current value, in a stable order.
    pub fn list(&self, prefix: &str) -> Vec<(ParamPath, ParamValue)> {
        self.all_paths()
            .into_iter()
            .filter(|p| p.to_string().starts_with(prefix))
            .filter_map(|p| self.get_param(&p).ok().map(|v| (p, v)))
            .collect()
    }

    fn all_paths(&self) -> Vec<ParamPath> {
        let mut paths = Vec::new();
        for net in &self.networks {
            let name = net.name().to_string();
            for param in NetParam::ALL {
                paths.push(ParamPath::Net {
                    net: name.clone(),
                    param,
                });
            }
            for node in 0..net.len() {
                for param in NodeParam::ALL {
                    paths.push(ParamPath::Node {
                        net: name.clone(),
                        node,
                        param,
                    });
                }
            }
        }
        for c in self.registry.iter() {
            let id = c.id.0;
            paths.push(ParamPath::Coupling {
                id,
                param: CouplingParam::Kind,
            });
            paths.push(ParamPath::Coupling {
                id,
                param: CouplingParam::Participants,
            });
            for name in c.kind.param_names() {
                paths.push(ParamPath::Coupling {
                    id,
                    param: CouplingParam::Kernel(name.to_string()),
                });
            }
            paths.push(ParamPath::Coupling {
                id,
                param: CouplingParam::Rate,
            });
        }
        for p in RateParam::ALL {
            paths.push(ParamPath::Rate(p));
        }
        for p in &self.pickups {
            paths.push(ParamPath::Pickup {
                name: p.name.clone(),
                param: PickupParam::Gain,
            });
            if matches!(p.tap, PickupTap::Location { .. }) {
                paths.push(ParamPath::Pickup {
                    name: p.name.clone(),
                    param: PickupParam::X,
                });
            }
        }
        paths.push(ParamPath::StateHash);
        paths
    }

    fn scope_contains(&self, scope: &SnapshotScope, path: &ParamPath) -> bool {
        match scope {
            SnapshotScope::Instrument => true,
            SnapshotScope::Network(name) => match path {
                ParamPath::Net { net, .. } | ParamPath::Node { net, .. } => net == name,
                ParamPath::Coupling { id, .. } => {
                    let Some(index) = self.network_index(name) else {
                        return false;
                    };
                    self.registry.get(CouplingId(*id)).is_some_and(|c| {
                        c.participants.iter().all(|p| match p {
                            Participant::Node(r) => r.network == index,
                            Participant::Network { network, .. } => *network == index,
                        })
                    })
                }
                _ => false,
            },
            SnapshotScope::Window(name) => path.is_f0()
                && matches!(path, ParamPath::Net { net, .. } | ParamPath::Node { net, .. } if net == name),
        }
    }

    /// Captures every playable value in scope.
    pub fn capture_snapshot(&self, name: &str, scope: SnapshotScope) -> Result<Snapshot, InstrumentError> {
        if let SnapshotScope::Network(n) | SnapshotScope::Window(n) = &scope {
            self.require_network(n)?;
        }
        let mut entries = BTreeMap::new();
        for path in self.all_paths() {
            if !path.is_playable() || !self.scope_contains(&scope, &path) {
                continue;
            }
            let value = self.snapshot_value(&path)?;
            entries.insert(path.to_string(), value.to_string());
        }
        let snapshot = Snapshot {
            name: name.to_string(),
            scope,
            entries,
        };
        debug_assert!(snapshot
            .entries
            .keys()
            .all(|k| k.parse::<ParamPath>().is_ok_and(|p| p.is_playable())));
        Ok(snapshot)
    }

    /// Value as stored in snapshots and files: node f0 keeps its edit representation.
    pub(crate) fn snapshot_value(&self, path: &ParamPath) -> Result<ParamValue, InstrumentError> {
        if let ParamPath::Node {
            net,
            node,
            param: NodeParam::F0,
        } = path
        {
            let index = self.require_network(net)?;
            if let Some(v) = node_f0_value(&self.networks[index], *node) {
                return Ok(ParamValue::F0(v));
            }
        }
        self.get_param(path)
    }

    pub fn save_snapshot(&mut self, name: &str, scope: SnapshotScope) -> Result<&Snapshot, InstrumentError> {
        let snapshot = self.capture_snapshot(name, scope)?;
        self.snapshots.insert(name.to_string(), snapshot);
        Ok(&self.snapshots[name])
    }

    pub fn insert_snapshot(&mut self, snapshot: Snapshot) -> Result<(), InstrumentError> {
        if self.snapshots.contains_key(&snapshot.name) {
            return Err(InstrumentError::DuplicateName(snapshot.name));
        }
        for key in snapshot.entries.keys() {
            let path: ParamPath = key.parse()?;
            if !path.is_playable() {
                return Err(InstrumentError::NotPlayable(key.clone()));
            }
        }
        self.snapshots.insert(snapshot.name.clone(), snapshot);
        Ok(())
    }

    /// Stores a snapshot, replacing any with the same name.
    pub fn insert_snapshot_replacing(&mut self, snapshot: Snapshot) -> Result<(), InstrumentError> {
        self.snapshots.remove(&snapshot.name);
        self.insert_snapshot(snapshot)
    }

    pub fn remove_snapshot(&mut self, name: &str) -> Option<Snapshot> {
        self.snapshots.remove(name)
    }

    /// Computes the edits that bring the instrument to the snapshot's values.
    /// Nothing is applied.
    pub fn recall_snapshot(&self, name: &str) -> Result<Recall, InstrumentError> {
        let snapshot = self
            .snapshots
            .get(name)
            .ok_or_else(|| InstrumentError::UnknownSnapshot(name.to_string()))?;
        self.plan_recall(snapshot)
    }

    pub fn plan_recall(&self, snapshot: &Snapshot) -> Result<Recall, InstrumentError> {
        let mut scratch = self.clone();
        let mut recall = Recall::default();
        for (key, text) in &snapshot.entries {
            let resolved = key
                .parse::<ParamPath>()
                .ok()
                .filter(|p| p.is_playable())
                .and_then(|p| scratch.get_param(&p).ok().map(|current| (p, current)));
            let Some((path, current)) = resolved else {
                recall.stale.push(key.clone());
                continue;
            };
            let Ok(value) = ParamValue::parse_for(&path, text) else {
                recall.stale.push(key.clone());
                continue;
            };
            let mut trial = scratch.clone();
            if trial.set_param(&path, &value).is_err() {
                recall.stale.push(key.clone());
                continue;
            }
            if trial.get_param(&path)? != current {
                scratch = trial;
                recall.edits.push((path, value));
            }
        }
        Ok(recall)
    }
}

fn hash_network(h: &mut DefaultHasher, net: &Network) {
    for node in net.nodes() {
        for v in &node.state.m {
            h.write_u64(v.to_bits());
        }
    }
}

/// A node's f0 in the representation it was last edited in, if any.
pub(crate) fn node_f0_value(net: &Network, index: usize) -> Option<F0Value> {
    let node = &net.nodes()[index];
    let fundamental = net.macro_params().fundamental;
    let value = match node.f0_repr? {
        F0Repr::Ratio => net.freq_ratios()[index],
        F0Repr::Deviation => node.params.nominal_frequency - fundamental * (index + 1) as f64,
        F0Repr::Absolute => node.params.nominal_frequency,
    };
    Some(F0Value {
        repr: node.f0_repr?,
        value,
    })
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.network, self.node)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instrument() -> Instrument {
        let mut inst = Instrument::default();
        inst.add_network("s", Template::String, 4, MacroParams::default(), Level::L1)
            .unwrap();
        inst
    }

    fn path(s: &str) -> ParamPath {
        s.parse().unwrap()
    }

    #[test]
    fn set_get_coherence() {
        let mut inst = instrument();
        inst.set_param_text(&path("net.s.f0"), "220h").unwrap();
        assert_eq!(inst.get_param(&path("net.s.f0")).unwrap().to_string(), "220");
        inst.set_param_text(&path("net.s.f0"), "100").unwrap();
        inst.set_param_text(&path("net.s.node.2.f0"), "2.5r").unwrap();
        assert_eq!(inst.get_param(&path("net.s.node.2.f0")).unwrap(), ParamValue::Number(250.0));
        inst.set_param_text(&path("net.s.node.1.f0"), "+3d").unwrap();
        assert_eq!(inst.get_param(&path("net.s.node.1.f0")).unwrap(), ParamValue::Number(203.0));
    }

    #[test]
    fn errors_map_to_codes() {
        let mut inst = instrument();
        let e = inst.set_param_text(&path("net.q.f0"), "1").unwrap_err();
        assert_eq!(e.code(), "badpath");
        let e = inst.set_param_text(&path("net.s.f0"), "abc").unwrap_err();
        assert_eq!(e.code(), "badvalue");
        let e = inst.set_param_text(&path("coupling.9.k"), "1").unwrap_err();
        assert_eq!(e.code(), "unknownid");
        let e = inst.set_param_text(&path("state.hash"), "1").unwrap_err();
        assert_eq!(e.code(), "badpath");
        let e = inst.set_param_text(&path("net.s.level"), "5").unwrap_err();
        assert_eq!(e.code(), "badvalue");
    }

    #[test]
    fn coupling_ids_monotone() {
        let mut inst = instrument();
        let p = |k| Participant::Node(NodeRef::new(0, k));
        let a = inst
            .add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(0), p(1)], 1)
            .unwrap();
        assert_eq!(a, CouplingId(0));
        inst.remove_coupling(a).unwrap();
        let b = inst
            .add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(0), p(1)], 1)
            .unwrap();
        assert_eq!(b, CouplingId(1));
        assert!(matches!(inst.remove_coupling(a), Err(InstrumentError::UnknownId(_))));
        assert!(matches!(
            inst.add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(0), p(9)], 1),
            Err(InstrumentError::UnknownParticipant(_))
        ));
        assert!(matches!(
            inst.add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(0)], 1),
            Err(InstrumentError::Etf(EtfError::ArityMismatch(_)))
        ));
    }

    #[test]
    fn participants_parse_and_format() {
        let inst = instrument();
        for text in ["s.0", "s.3", "s", "s@0.25", "s@0.25,0.5"] {
            let p = inst.parse_participant(text).unwrap();
            assert_eq!(inst.format_participant(&p), text);
        }
        assert!(inst.parse_participant("s.4").is_err());
        assert!(inst.parse_participant("q.0").is_err());
    }

    #[test]
    fn shrink_prunes_couplings() {
        let mut inst = instrument();
        let p = |k| Participant::Node(NodeRef::new(0, k));
        inst.add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(0), p(1)], 1)
            .unwrap();
        let far = inst
            .add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, vec![p(2), p(3)], 1)
            .unwrap();
        let out = inst.set_param_text(&path("net.s.modes"), "3").unwrap();
        assert!(out.structural);
        assert_eq!(out.removed_couplings, vec![far]);
        assert_eq!(inst.registry().len(), 1);
    }

    #[test]
    fn snapshot_save_recall() {
        let mut inst = instrument();
        inst.save_snapshot("a", SnapshotScope::Instrument).unwrap();
        assert!(inst.recall_snapshot("a").unwrap().edits.is_empty());

        inst.set_param_text(&path("net.s.f0"), "300").unwrap();
        let recall = inst.recall_snapshot("a").unwrap();
        assert_eq!(recall.edits.len(), 1);
        assert_eq!(recall.edits[0].0, path("net.s.f0"));
        assert!(matches!(
            inst.recall_snapshot("zz"),
            Err(InstrumentError::UnknownSnapshot(_))
        ));
    }

    #[test]
    fn snapshots_hold_only_playable_paths() {
        let mut inst = instrument();
        let p = |k| Participant::Node(NodeRef::new(0, k));
        inst.add_coupling(EtfKind::SaturatingNonlinear { k: 1e-4, saturation_scale: 1.0 }, vec![p(0), p(1)], 2)
            .unwrap();
        let snap = inst.capture_snapshot("x", SnapshotScope::Instrument).unwrap();
        for key in snap.entries.keys() {
            assert!(path(key).is_playable(), "{key}");
        }
        assert!(snap.entries.contains_key("coupling.0.s"));
        assert!(!snap.entries.contains_key("coupling.0.rate"));
        let window = inst.capture_snapshot("w", SnapshotScope::Window("s".into())).unwrap();
        assert_eq!(window.entries.len(), 5);
    }

    #[test]
    fn stale_entries_reported() {
        let mut inst = instrument();
        let mut snap = inst.capture_snapshot("x", SnapshotScope::Instrument).unwrap();
        snap.entries.clear();
        snap.entries.insert("net.s.node.0.f0".into(), "150".into());
        snap.entries.insert("net.s.node.1.f0".into(), "250".into());
        snap.entries.insert("net.s.node.3.f0".into(), "450".into());
        inst.insert_snapshot(snap).unwrap();
        inst.set_param_text(&path("net.s.modes"), "3").unwrap();
        let recall = inst.recall_snapshot("x").unwrap();
        assert_eq!(recall.edits.len(), 2);
        assert_eq!(recall.stale, vec!["net.s.node.3.f0".to_string()]);
    }

    #[test]
    fn list_prefix() {
        let inst = instrument();
        let nets = inst.list("net.s.node.0.");
        assert_eq!(nets.len(), NodeParam::ALL.len());
        assert!(inst.list("coupling").is_empty());
        assert_eq!(inst.list("state").len(), 1);
    }

    #[test]
    fn duffing_requires_l4() {
        let mut inst = instrument();
        assert!(inst.set_param_text(&path("net.s.duffing"), "0.1").is_err());
        inst.set_param_text(&path("net.s.level"), "4").unwrap();
        inst.set_param_text(&path("net.s.duffing"), "0.1").unwrap();
        assert!(inst.set_param_text(&path("net.s.level"), "1").is_err());
    }
}
