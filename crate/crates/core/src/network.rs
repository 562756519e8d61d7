//! Networks of modal nodes.
//!
//! A network owns its nodes, translates macro-parameter edits into node
//! parameters, reports an aggregate state and, for the physical templates,
//! parameterizes its state over space through mode shapes.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use thiserror::Error;

use crate::etf::{Coupling, CouplingId, EtfKind, Participant};
use crate::instrument::NodeRef;
use crate::mode::{energy_of, stability_limit, EnergyDelta, Level, ModeParams, ModeState};
use crate::params::F0Repr;

/// Fraction of the global damping added per mode index.
pub const DAMPING_RAMP: f64 = 0.1;

/// Default strength of the adjacent-mode couplings a cymbal brings along.
pub const CYMBAL_COUPLING_K: f64 = 1e-4;
pub const CYMBAL_SATURATION: f64 = 1e-3;

/// `beta L` roots of `cos(b) cosh(b) = 1` (free-free beam).
const FREE_FREE_ROOTS: [f64; 5] = [
    4.730_040_744_862_704,
    7.853_204_624_095_838,
    10.995_607_838_001_671,
    14.137_165_491_257_464,
    17.278_759_657_399_48,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid template parameter: {0}")]
    InvalidTemplateParam(String),
    #[error("unknown macro parameter '{0}'")]
    UnknownParam(String),
    #[error("value {value} out of range for '{name}'")]
    OutOfRange { name: String, value: f64 },
    #[error("network '{0}' has no spatial model")]
    NoSpatialModel(String),
    #[error("every mode shape vanishes at this location")]
    AllShapesZero,
    #[error("location is empty or off the unit domain")]
    BadLocation,
    #[error("node {index} out of range (network has {count} nodes)")]
    NodeOutOfRange { index: usize, count: usize },
    #[error("unknown template '{0}'")]
    UnknownTemplate(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    String,
    Bar,
    Membrane,
    Cymbal,
    Custom,
}

impl Template {
    pub const ALL: [Template; 5] = [
        Template::String,
        Template::Bar,
        Template::Membrane,
        Template::Cymbal,
        Template::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::String => "string",
            Template::Bar => "bar",
            Template::Membrane => "membrane",
            Template::Cymbal => "cymbal",
            Template::Custom => "custom",
        }
    }

    pub fn from_name(name: &str) -> Result<Template, NetworkError> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| NetworkError::UnknownTemplate(name.to_string()))
    }

    pub fn has_spatial_model(self) -> bool {
        !matches!(self, Template::Custom)
    }

    /// Frequency ratio of mode `k` (1-based) relative to the fundamental.
    pub fn ratio(self, k: usize, stretch: f64) -> f64 {
        let kf = k as f64;
        match self {
            Template::String => kf * (1.0 + stretch * kf * kf).sqrt(),
            Template::Bar => {
                let root = free_free_root(k);
                (root / FREE_FREE_ROOTS[0]).powi(2)
            }
            Template::Membrane | Template::Cymbal => bessel_j0_zero(k) / bessel_j0_zero(1),
            Template::Custom => 1.0,
        }
    }

    /// Whether `x` lies on the template's unit domain: `[0, 1]` along a
    /// string or bar, radius at most 1 on a membrane.
    pub fn contains(self, x: &[f64]) -> bool {
        if x.is_empty() || x.iter().any(|c| !c.is_finite()) {
            return false;
        }
        match self {
            Template::String | Template::Bar => (0.0..=1.0).contains(&x[0]),
            Template::Membrane | Template::Cymbal => x.iter().map(|c| c * c).sum::<f64>() <= 1.0,
            Template::Custom => false,
        }
    }

    /// Mode shape of mode `k` (1-based) at `x`; `None` without a spatial
    /// model or off the domain.
    pub fn shape(self, k: usize, x: &[f64]) -> Option<f64> {
        if !self.contains(x) {
            return None;
        }
        let first = x[0];
        match self {
            Template::String => Some((k as f64 * PI * first).sin()),
            Template::Bar => Some(free_free_shape(free_free_root(k), first)),
            Template::Membrane | Template::Cymbal => {
                let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
                Some(libm::j0(bessel_j0_zero(k) * r))
            }
            Template::Custom => None,
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn free_free_root(k: usize) -> f64 {
    if let Some(&root) = FREE_FREE_ROOTS.get(k - 1) {
        return root;
    }
    // Newton on cos x - sech x from the asymptote (2k+1) pi/2.
    let mut x = (2 * k + 1) as f64 * FRAC_PI_2;
    for _ in 0..4 {
        let sech = 1.0 / x.cosh();
        x -= (x.cos() - sech) / (-x.sin() + sech * x.tanh());
    }
    x
}

/// Free-free beam shape on `[0, 1]`, scaled so the ends sit at magnitude 1.
///
/// Written with quotients of hyperbolic terms so large roots do not cancel.
fn free_free_shape(beta: f64, x: f64) -> f64 {
    let denom = beta.sinh() - beta.sin();
    let sigma = (beta.cosh() - beta.cos()) / denom;
    let bx = beta * x;
    let hyperbolic = ((beta - bx).sinh() + bx.sinh() * beta.cos() - bx.cosh() * beta.sin()) / denom;
    0.5 * (bx.cos() - sigma * bx.sin() + hyperbolic)
}

/// k-th positive zero of J0 (1-based).
pub fn bessel_j0_zero(k: usize) -> f64 {
    let b = (k as f64 - 0.25) * PI;
    let mut x = b + 1.0 / (8.0 * b) - 124.0 / (3.0 * (8.0 * b).powi(3));
    for _ in 0..6 {
        // J0' = -J1
        let step = libm::j0(x) / -libm::j1(x);
        x -= step;
        if step.abs() < 1e-15 * x {
            break;
        }
    }
    x
}

/// User-level parameters of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroParams {
    pub fundamental: f64,
    pub total_mass: f64,
    /// Per-second decay applied to mode 1; higher modes ramp up.
    pub global_damping: f64,
    /// Stiffness stretch `B` (string template).
    pub stretch: f64,
}

impl Default for MacroParams {
    fn default() -> Self {
        MacroParams {
            fundamental: 100.0,
            total_mass: 1.0,
            global_damping: 0.0,
            stretch: 0.0,
        }
    }
}

impl MacroParams {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let check = |name: &str, value: f64, ok: bool| {
            if ok && value.is_finite() {
                Ok(())
            } else {
                Err(NetworkError::InvalidTemplateParam(format!("{name} = {value}")))
            }
        };
        check("f0", self.fundamental, self.fundamental > 0.0)?;
        check("mass", self.total_mass, self.total_mass > 0.0)?;
        check("damp", self.global_damping, self.global_damping >= 0.0)?;
        check("B", self.stretch, self.stretch >= 0.0)
    }
}

/// Aggregate view of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkMacroState {
    pub total_energy: f64,
    pub fundamental: f64,
    pub node_count: usize,
}

/// One modal node inside a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub params: ModeParams,
    pub state: ModeState,
    /// False when over the frequency limit; disabled nodes are not stepped.
    pub enabled: bool,
    /// Set after a numeric overflow; the node stays silent.
    pub muted: bool,
    /// Representation the node's f0 was last edited in, if any.
    pub f0_repr: Option<F0Repr>,
    /// Damping set on this node directly rather than by the macro ramp.
    pub damping_override: Option<f64>,
}

impl Node {
    pub fn active(&self) -> bool {
        self.enabled && !self.muted
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    name: String,
    template: Template,
    macro_params: MacroParams,
    level: Level,
    freq_ratios: Vec<f64>,
    nodes: Vec<Node>,
    effective_rate: f64,
    weight_cache: Vec<(Vec<u64>, Vec<f64>)>,
}

impl Network {
    /// Builds a network from a template. Nodes above the frequency limit
    /// are created disabled.
    pub fn build(
        name: impl Into<String>,
        template: Template,
        n_modes: usize,
        macro_params: MacroParams,
        level: Level,
        effective_rate: f64,
    ) -> Result<Network, NetworkError> {
        if n_modes == 0 {
            return Err(NetworkError::InvalidTemplateParam("modes must be at least 1".into()));
        }
        macro_params.validate()?;
        let mut net = Network {
            name: name.into(),
            template,
            macro_params,
            level,
            freq_ratios: Vec::with_capacity(n_modes),
            nodes: Vec::with_capacity(n_modes),
            effective_rate,
            weight_cache: Vec::new(),
        };
        for k in 1..=n_modes {
            net.push_template_node(k, n_modes);
        }
        net.refresh_enabled();
        Ok(net)
    }

    fn push_template_node(&mut self, k: usize, n_modes: usize) {
        let ratio = self.template.ratio(k, self.macro_params.stretch);
        let params = ModeParams {
            mass: self.macro_params.total_mass / n_modes as f64,
            nominal_frequency: self.macro_params.fundamental * ratio,
            damping: self.ramp_damping(k),
            duffing_beta: 0.0,
            level: self.level,
        };
        self.freq_ratios.push(ratio);
        self.nodes.push(Node {
            state: ModeState::at_rest(&params),
            params,
            enabled: true,
            muted: false,
            f0_repr: None,
            damping_override: None,
        });
    }

    fn ramp_damping(&self, k: usize) -> f64 {
        self.macro_params.global_damping * (1.0 + DAMPING_RAMP * (k as f64 - 1.0))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn template(&self) -> Template {
        self.template
    }

    pub fn macro_params(&self) -> &MacroParams {
        &self.macro_params
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn freq_ratios(&self) -> &[f64] {
        &self.freq_ratios
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn node(&self, index: usize) -> Result<&Node, NetworkError> {
        self.nodes.get(index).ok_or(NetworkError::NodeOutOfRange {
            index,
            count: self.nodes.len(),
        })
    }

    pub fn node_mut(&mut self, index: usize) -> Result<&mut Node, NetworkError> {
        let count = self.nodes.len();
        self.nodes
            .get_mut(index)
            .ok_or(NetworkError::NodeOutOfRange { index, count })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn effective_rate(&self) -> f64 {
        self.effective_rate
    }

    pub fn enabled_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.enabled).count()
    }

    /// Template ratio of node `index` (0-based) under the current stretch.
    pub fn template_ratio(&self, index: usize) -> f64 {
        self.template.ratio(index + 1, self.macro_params.stretch)
    }

    /// Default (un-overridden) mass of a node.
    pub fn template_mass(&self) -> f64 {
        self.macro_params.total_mass / self.nodes.len() as f64
    }

    pub fn template_damping(&self, index: usize) -> f64 {
        self.ramp_damping(index + 1)
    }

    /// Recomputes enable flags against the frequency limit.
    pub fn refresh_enabled(&mut self) -> bool {
        let rate = self.effective_rate;
        let mut changed = false;
        for node in &mut self.nodes {
            let limit = stability_limit(rate, node.params.damping_per_sample(rate));
            let enabled = node.params.nominal_frequency > 0.0 && node.params.nominal_frequency < limit;
            if enabled != node.enabled {
                node.enabled = enabled;
                changed = true;
            }
        }
        if changed {
            self.weight_cache.clear();
        }
        changed
    }

    pub fn set_effective_rate(&mut self, rate: f64) {
        self.effective_rate = rate;
        self.refresh_enabled();
    }

    /// Applies a macro edit (`f0`, `mass`, `damp`, `B`); node states are never touched.
    pub fn set_macro_param(&mut self, name: &str, value: f64) -> Result<(), NetworkError> {
        let out_of_range = || NetworkError::OutOfRange {
            name: name.to_string(),
            value,
        };
        if !value.is_finite() {
            return Err(out_of_range());
        }
        match name {
            "f0" => {
                if value <= 0.0 {
                    return Err(out_of_range());
                }
                self.macro_params.fundamental = value;
                self.apply_ratios();
            }
            "mass" => {
                if value <= 0.0 {
                    return Err(out_of_range());
                }
                let scale = value / self.macro_params.total_mass;
                self.macro_params.total_mass = value;
                for node in &mut self.nodes {
                    node.params.mass *= scale;
                }
            }
            "damp" => {
                if value < 0.0 {
                    return Err(out_of_range());
                }
                self.macro_params.global_damping = value;
                for k in 0..self.nodes.len() {
                    if self.nodes[k].damping_override.is_none() {
                        self.nodes[k].params.damping = self.ramp_damping(k + 1);
                    }
                }
                self.refresh_enabled();
            }
            "B" => {
                if value < 0.0 {
                    return Err(out_of_range());
                }
                self.macro_params.stretch = value;
                for k in 0..self.nodes.len() {
                    if self.nodes[k].f0_repr.is_none() {
                        self.freq_ratios[k] = self.template.ratio(k + 1, value);
                    }
                }
                self.apply_ratios();
            }
            other => return Err(NetworkError::UnknownParam(other.to_string())),
        }
        Ok(())
    }

    fn apply_ratios(&mut self) {
        let f0 = self.macro_params.fundamental;
        for (node, ratio) in self.nodes.iter_mut().zip(&self.freq_ratios) {
            node.params.nominal_frequency = f0 * ratio;
        }
        self.refresh_enabled();
    }

    /// Sets one node's nominal frequency; the ratio follows.
    pub fn set_node_frequency(&mut self, index: usize, hz: f64, repr: F0Repr) -> Result<(), NetworkError> {
        if !(hz > 0.0 && hz.is_finite()) {
            return Err(NetworkError::OutOfRange {
                name: "f0".into(),
                value: hz,
            });
        }
        let f0 = self.macro_params.fundamental;
        let node = self.node_mut(index)?;
        node.params.nominal_frequency = hz;
        node.f0_repr = Some(repr);
        self.freq_ratios[index] = hz / f0;
        self.refresh_enabled();
        Ok(())
    }

    /// Sets a node's frequency ratio exactly.
    pub fn set_node_ratio(&mut self, index: usize, ratio: f64) -> Result<(), NetworkError> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(NetworkError::OutOfRange {
                name: "f0".into(),
                value: ratio,
            });
        }
        let f0 = self.macro_params.fundamental;
        let node = self.node_mut(index)?;
        node.params.nominal_frequency = f0 * ratio;
        node.f0_repr = Some(F0Repr::Ratio);
        self.freq_ratios[index] = ratio;
        self.refresh_enabled();
        Ok(())
    }

    pub fn set_node_mass(&mut self, index: usize, mass: f64) -> Result<(), NetworkError> {
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(NetworkError::OutOfRange {
                name: "mass".into(),
                value: mass,
            });
        }
        self.node_mut(index)?.params.mass = mass;
        Ok(())
    }

    pub fn set_node_damping(&mut self, index: usize, damping: f64) -> Result<(), NetworkError> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(NetworkError::OutOfRange {
                name: "damp".into(),
                value: damping,
            });
        }
        let node = self.node_mut(index)?;
        node.params.damping = damping;
        node.damping_override = Some(damping);
        self.refresh_enabled();
        Ok(())
    }

    /// The network-wide Duffing coefficient: the value most nodes share,
    /// the earliest such value on a tie.
    pub fn duffing(&self) -> f64 {
        let betas: Vec<f64> = self.nodes.iter().map(|n| n.params.duffing_beta).collect();
        let count = |b: f64| betas.iter().filter(|&&v| v == b).count();
        betas
            .iter()
            .copied()
            .fold((0.0, 0), |best, b| {
                let c = count(b);
                if c > best.1 {
                    (b, c)
                } else {
                    best
                }
            })
            .0
    }

    pub fn set_node_duffing(&mut self, index: usize, beta: f64) -> Result<(), NetworkError> {
        if !beta.is_finite() || (beta != 0.0 && self.level != Level::L4) {
            return Err(NetworkError::OutOfRange {
                name: "duffing".into(),
                value: beta,
            });
        }
        self.node_mut(index)?.params.duffing_beta = beta;
        Ok(())
    }

    /// Sets the complexity level of every node. Lowering below L4 requires
    /// all Duffing terms to be zero.
    pub fn set_level(&mut self, level: Level) -> Result<(), NetworkError> {
        if level != Level::L4 {
            if let Some(node) = self.nodes.iter().find(|n| n.params.duffing_beta != 0.0) {
                return Err(NetworkError::OutOfRange {
                    name: "level".into(),
                    value: node.params.duffing_beta,
                });
            }
        }
        self.level = level;
        for node in &mut self.nodes {
            node.params.level = level;
            if !level.detunes() {
                node.state.effective_frequency = node.params.nominal_frequency;
            }
        }
        Ok(())
    }

    /// Changes the node count. Existing nodes keep parameters and state;
    /// new nodes start at rest with template defaults.
    pub fn resize(&mut self, n_modes: usize) -> Result<(), NetworkError> {
        if n_modes == 0 {
            return Err(NetworkError::OutOfRange {
                name: "modes".into(),
                value: 0.0,
            });
        }
        if n_modes < self.nodes.len() {
            self.nodes.truncate(n_modes);
            self.freq_ratios.truncate(n_modes);
        } else {
            for k in self.nodes.len() + 1..=n_modes {
                self.push_template_node(k, n_modes);
            }
        }
        self.weight_cache.clear();
        self.refresh_enabled();
        Ok(())
    }

    /// Rebuilds with another template; all node state is reset.
    pub fn swap_template(&mut self, template: Template) -> Result<(), NetworkError> {
        let rebuilt = Network::build(
            self.name.clone(),
            template,
            self.nodes.len(),
            self.macro_params,
            self.level,
            self.effective_rate,
        )?;
        *self = rebuilt;
        Ok(())
    }

    /// Couplings a template brings along (cymbal: saturating links between
    /// neighbouring modes). Ids are placeholders.
    pub fn default_couplings(&self, network_index: usize) -> Vec<Coupling> {
        match self.template {
            Template::Cymbal => (1..self.nodes.len())
                .map(|k| Coupling {
                    id: CouplingId(0),
                    kind: EtfKind::SaturatingNonlinear {
                        k: CYMBAL_COUPLING_K,
                        saturation_scale: CYMBAL_SATURATION,
                    },
                    participants: vec![
                        Participant::Node(NodeRef::new(network_index, k - 1)),
                        Participant::Node(NodeRef::new(network_index, k)),
                    ],
                    rate_divisor: 1,
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Shape value of node `index` (0-based) at `x`.
    pub fn mode_shape(&self, index: usize, x: &[f64]) -> Result<f64, NetworkError> {
        if !self.template.has_spatial_model() {
            return Err(NetworkError::NoSpatialModel(self.name.clone()));
        }
        self.template.shape(index + 1, x).ok_or(NetworkError::BadLocation)
    }

    /// `sum_k psi_k(x) M0_k` over enabled nodes.
    pub fn displacement_at(&self, x: &[f64]) -> Result<f64, NetworkError> {
        if !self.template.has_spatial_model() {
            return Err(NetworkError::NoSpatialModel(self.name.clone()));
        }
        if !self.template.contains(x) {
            return Err(NetworkError::BadLocation);
        }
        let mut sum = 0.0;
        for (k, node) in self.nodes.iter().enumerate() {
            if node.enabled {
                sum += self.mode_shape(k, x)? * node.state.m[0];
            }
        }
        Ok(sum)
    }

    fn compute_weights(&self, x: &[f64]) -> Result<Vec<f64>, NetworkError> {
        if self.nodes.len() == 1 {
            return Ok(vec![1.0]);
        }
        if !self.template.has_spatial_model() {
            return Err(NetworkError::NoSpatialModel(self.name.clone()));
        }
        if !self.template.contains(x) {
            return Err(NetworkError::BadLocation);
        }
        let mut weights = Vec::with_capacity(self.nodes.len());
        for (k, node) in self.nodes.iter().enumerate() {
            let w = if node.enabled {
                let psi = self.mode_shape(k, x)?;
                psi * psi
            } else {
                0.0
            };
            weights.push(w);
        }
        let sum: f64 = weights.iter().sum();
        if !(sum > 1e-24) {
            return Err(NetworkError::AllShapesZero);
        }
        weights.iter_mut().for_each(|w| *w /= sum);
        Ok(weights)
    }

    /// Normalized `psi_k(x)^2` weights, cached per location.
    pub fn inject_weights(&mut self, x: &[f64]) -> Result<&[f64], NetworkError> {
        let key: Vec<u64> = x.iter().map(|c| c.to_bits()).collect();
        if let Some(pos) = self.weight_cache.iter().position(|(k, _)| *k == key) {
            return Ok(&self.weight_cache[pos].1);
        }
        let weights = self.compute_weights(x)?;
        self.weight_cache.push((key, weights));
        Ok(&self.weight_cache.last().expect("just pushed").1)
    }

    /// Splits `total` over the nodes by their shape weights at `x`.
    pub fn inject_at(&mut self, x: &[f64], total: EnergyDelta) -> Result<Vec<EnergyDelta>, NetworkError> {
        let phase_hint = total.phase_hint;
        let weights = self.inject_weights(x)?;
        Ok(weights
            .iter()
            .map(|w| EnergyDelta {
                amount: total.amount * w,
                phase_hint,
            })
            .collect())
    }

    /// Number of locations with cached weights.
    pub fn cached_locations(&self) -> usize {
        self.weight_cache.len()
    }

    pub fn node_energy(&self, index: usize) -> f64 {
        let node = &self.nodes[index];
        energy_of(&node.state, &node.params, self.effective_rate)
    }

    pub fn macro_state(&self) -> NetworkMacroState {
        let total_energy = (0..self.nodes.len())
            .filter(|&k| self.nodes[k].enabled)
            .map(|k| self.node_energy(k))
            .sum();
        NetworkMacroState {
            total_energy,
            fundamental: self.macro_params.fundamental,
            node_count: self.nodes.len(),
        }
    }
}
