//! Per-sample ordering of coupling evaluation, energy feeds and node steps.
//!
//! Each oversampled step runs three phases: (A) freeze every node's energy
//! and evaluate the due couplings in ascending id order against that frozen
//! view, (B) apply the accumulated feeds, (C) step every active node.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_queue::ArrayQueue;

use crate::engine::EventLog;
use crate::etf::{clamp_transfer, eval_into, Coupling, CouplingId, EtfError, EtfInput, EtfKind, Participant};
use crate::instrument::{Instrument, NodeRef};
use crate::mode::{
    apply_feed, energy_of, estimate_freq_phase, refresh_estimate, smooth_feed_power, step_node,
    update_effective_frequency, EnergyDelta,
};
use crate::params::{ParamPath, ParamValue};
use crate::persistence::Snapshot;

/// Audio, oversampling, control and coupling rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateConfig {
    pub sample_rate: f64,
    pub oversample: u32,
    /// Samples per control block; edits land on block boundaries.
    pub control_block: u32,
    /// Divisor given to couplings that do not name one.
    pub default_coupling_divisor: u32,
}

impl Default for RateConfig {
    fn default() -> Self {
        RateConfig {
            sample_rate: 44100.0,
            oversample: 1,
            control_block: 64,
            default_coupling_divisor: 1,
        }
    }
}

impl RateConfig {
    pub fn effective_rate(&self) -> f64 {
        self.sample_rate * self.oversample as f64
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(format!("sample_rate = {}", self.sample_rate));
        }
        for (name, v) in [
            ("oversample", self.oversample),
            ("control_block", self.control_block),
            ("coupling_divisor", self.default_coupling_divisor),
        ] {
            if v == 0 {
                return Err(format!("{name} = 0"));
            }
        }
        Ok(())
    }
}

/// Couplings keyed by id; iteration is always in ascending id order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CouplingRegistry {
    couplings: BTreeMap<CouplingId, Coupling>,
    next_id: u64,
}

impl CouplingRegistry {
    pub fn add(
        &mut self,
        kind: EtfKind,
        participants: Vec<Participant>,
        rate_divisor: u32,
    ) -> Result<CouplingId, EtfError> {
        let coupling = Coupling {
            id: CouplingId(self.next_id),
            kind,
            participants,
            rate_divisor,
        };
        coupling.validate_shape()?;
        self.next_id += 1;
        let id = coupling.id;
        self.couplings.insert(id, coupling);
        Ok(id)
    }

    /// Inserts under the coupling's own id; later ids continue above it.
    pub fn insert(&mut self, coupling: Coupling) -> Result<(), EtfError> {
        coupling.validate_shape()?;
        if self.couplings.contains_key(&coupling.id) {
            return Err(EtfError::InvalidParam {
                name: "id".into(),
                value: coupling.id.0 as f64,
            });
        }
        self.next_id = self.next_id.max(coupling.id.0 + 1);
        self.couplings.insert(coupling.id, coupling);
        Ok(())
    }

    pub fn remove(&mut self, id: CouplingId) -> Option<Coupling> {
        self.couplings.remove(&id)
    }

    pub fn get(&self, id: CouplingId) -> Option<&Coupling> {
        self.couplings.get(&id)
    }

    pub fn get_mut(&mut self, id: CouplingId) -> Option<&mut Coupling> {
        self.couplings.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Coupling> {
        self.couplings.values()
    }

    pub fn len(&self) -> usize {
        self.couplings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.couplings.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Never lowers the counter, so ids stay unique.
    pub fn reserve_ids_below(&mut self, next_id: u64) {
        self.next_id = self.next_id.max(next_id);
    }
}

/// An edit handed from the control side to the audio side.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlEdit {
    Set { path: ParamPath, value: ParamValue },
    /// A coupling with its id already assigned.
    AddCoupling(Coupling),
    RemoveCoupling(CouplingId),
    StoreSnapshot(Snapshot),
}

/// Bounded edit queue; when full the oldest edit is dropped and counted.
#[derive(Debug)]
pub struct EditQueue {
    queue: ArrayQueue<ControlEdit>,
    dropped: AtomicU64,
}

impl EditQueue {
    pub const DEFAULT_CAPACITY: usize = 1024;

    pub fn new(capacity: usize) -> Self {
        EditQueue {
            queue: ArrayQueue::new(capacity.max(1)),
            dropped: AtomicU64::new(0),
        }
    }

    /// Returns false when an older edit had to be dropped.
    pub fn push(&self, edit: ControlEdit) -> bool {
        if self.queue.force_push(edit).is_some() {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            false
        } else {
            true
        }
    }

    pub fn pop(&self) -> Option<ControlEdit> {
        self.queue.pop()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

impl Default for EditQueue {
    fn default() -> Self {
        EditQueue::new(EditQueue::DEFAULT_CAPACITY)
    }
}

/// Applies queued edits at a block boundary. Edits were validated on the
/// way in; any that no longer apply are logged and skipped.
pub fn apply_control_edits(
    edits: impl IntoIterator<Item = ControlEdit>,
    inst: &mut Instrument,
    log: &mut EventLog,
) -> usize {
    let mut applied = 0;
    for edit in edits {
        let result = match edit {
            ControlEdit::Set { path, value } => inst.set_param(&path, &value).map(|outcome| {
                if outcome.structural {
                    log.push(format!("system-state edit {path} = {value}; affected state may reset"));
                }
                for id in outcome.removed_couplings {
                    log.push(format!("coupling {id} removed with its participants"));
                }
            }),
            ControlEdit::AddCoupling(c) => inst.insert_coupling(c),
            ControlEdit::RemoveCoupling(id) => inst.remove_coupling(id).map(|_| ()),
            ControlEdit::StoreSnapshot(s) => {
                let name = s.name.clone();
                inst.insert_snapshot_replacing(s).map(|_| log.push(format!("snapshot {name} stored")))
            }
        };
        match result {
            Ok(()) => applied += 1,
            Err(e) => log.push(format!("edit skipped: {e}")),
        }
    }
    applied
}

#[derive(Debug, Clone)]
enum Slot {
    Node(usize),
    Network {
        net: usize,
        /// Location weights over the network's nodes for positive deltas.
        weights: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
struct CompiledCoupling {
    id: CouplingId,
    kind: EtfKind,
    divisor: u32,
    counter: u32,
    slots: Vec<Slot>,
    /// Offset and length of this coupling's deltas in `coupling_deltas`.
    segment: usize,
    width: usize,
    fired: bool,
}

/// Stateful per-sample driver for an [`Instrument`].
///
/// Holds flat work buffers so a step does not allocate. Call
/// [`Scheduler::sync`] after editing the instrument.
#[derive(Debug, Clone, Default)]
pub struct Scheduler {
    revision: Option<u64>,
    offsets: Vec<usize>,
    flat: Vec<NodeRef>,
    energies: Vec<f64>,
    phases: Vec<f64>,
    needs_phase: Vec<bool>,
    kappa: Vec<f64>,
    net_totals: Vec<f64>,
    compiled: Vec<CompiledCoupling>,
    inputs: Vec<EtfInput>,
    slot_energy: Vec<f64>,
    coupling_deltas: Vec<f64>,
    /// Per node: energy drained this step, then the factor that keeps the
    /// combined drain within the frozen energy.
    drain: Vec<f64>,
    drain_factor: Vec<f64>,
    oversample: f64,
    steps: u64,
    overflows: Vec<NodeRef>,
}

impl Scheduler {
    pub fn new(inst: &Instrument) -> Self {
        let mut s = Scheduler::default();
        s.rebuild(inst);
        s
    }

    /// Recompiles if the instrument changed since the last build.
    pub fn sync(&mut self, inst: &Instrument) -> bool {
        if self.revision == Some(inst.revision()) {
            return false;
        }
        self.rebuild(inst);
        true
    }

    fn rebuild(&mut self, inst: &Instrument) {
        let counters: BTreeMap<CouplingId, u32> = self.compiled.iter().map(|c| (c.id, c.counter)).collect();
        self.offsets.clear();
        self.flat.clear();
        for (n, net) in inst.networks().iter().enumerate() {
            self.offsets.push(self.flat.len());
            self.flat.extend((0..net.len()).map(|k| NodeRef::new(n, k)));
        }
        let total = self.flat.len();
        self.energies = vec![0.0; total];
        self.phases = vec![0.0; total];
        self.needs_phase = vec![false; total];
        self.kappa = vec![f64::NAN; total];
        self.net_totals = vec![0.0; inst.networks().len()];
        self.oversample = inst.rates().oversample as f64;

        self.compiled.clear();
        let mut widest = 0;
        let mut segment = 0;
        for c in inst.couplings() {
            let mut slots = Vec::with_capacity(c.participants.len());
            for p in &c.participants {
                slots.push(match p {
                    Participant::Node(r) => Slot::Node(self.offsets[r.network] + r.node),
                    Participant::Network { network, location } => {
                        let net = &inst.networks()[*network];
                        let weights = location.as_ref().and_then(|x| {
                            net.clone().inject_weights(x).ok().map(<[f64]>::to_vec)
                        });
                        Slot::Network { net: *network, weights }
                    }
                });
            }
            for slot in &slots {
                let span = self.slot_span(slot, inst);
                for i in span {
                    if c.kind.uses_phase() {
                        self.needs_phase[i] = true;
                    }
                    if let EtfKind::DetuningLinear { kappa, .. } = c.kind {
                        if self.kappa[i].is_nan() {
                            self.kappa[i] = kappa;
                        }
                    }
                }
            }
            let width = match c.kind {
                EtfKind::GlobalConstraint { .. } => slots
                    .iter()
                    .map(|s| self.slot_span(s, inst).len())
                    .sum(),
                _ => slots.len(),
            };
            widest = widest.max(width);
            self.compiled.push(CompiledCoupling {
                id: c.id,
                kind: c.kind,
                divisor: c.rate_divisor.max(1),
                counter: counters.get(&c.id).copied().unwrap_or(0),
                slots,
                segment,
                width,
                fired: false,
            });
            segment += width;
        }
        self.inputs = vec![EtfInput::default(); widest];
        self.slot_energy = vec![0.0; widest];
        self.coupling_deltas = vec![0.0; segment];
        self.drain = vec![0.0; total];
        self.drain_factor = vec![1.0; total];
        self.revision = Some(inst.revision());
    }

    fn slot_span(&self, slot: &Slot, inst: &Instrument) -> std::ops::Range<usize> {
        match *slot {
            Slot::Node(i) => i..i + 1,
            Slot::Network { net, .. } => {
                let start = self.offsets[net];
                start..start + inst.networks()[net].len()
            }
        }
    }

    /// Oversampled steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Nodes muted by numeric overflow since the last call.
    pub fn take_overflows(&mut self) -> Vec<NodeRef> {
        std::mem::take(&mut self.overflows)
    }

    pub fn coupling_count(&self) -> usize {
        self.compiled.len()
    }

    /// One oversampled step. External feeds (presses) may already sit in
    /// each node's `feed_accumulator`.
    pub fn step(&mut self, inst: &mut Instrument) {
        let rate = inst.effective_rate();
        let nets = inst.networks_untracked();

        // Phase A: freeze.
        for (n, net) in nets.iter().enumerate() {
            let base = self.offsets[n];
            let mut total = 0.0;
            for (k, node) in net.nodes().iter().enumerate() {
                let i = base + k;
                let e = if node.enabled {
                    energy_of(&node.state, &node.params, rate)
                } else {
                    0.0
                };
                self.energies[i] = e;
                total += e;
                if self.needs_phase[i] {
                    self.phases[i] = estimate_freq_phase(&node.state, &node.params, rate).phase;
                }
            }
            self.net_totals[n] = total;
        }

        // Phase A: evaluate due couplings against the frozen view. Each
        // coupling is clamped on its own, then any node that several
        // couplings overdraw scales those couplings down together.
        let mut overdrawn = false;
        for c in &mut self.compiled {
            c.fired = c.counter == 0;
            c.counter = (c.counter + 1) % c.divisor;
            if !c.fired {
                continue;
            }
            let window = c.divisor as f64 / self.oversample;
            let deltas = &mut self.coupling_deltas[c.segment..c.segment + c.width];
            if let EtfKind::GlobalConstraint { .. } = c.kind {
                let Some(Slot::Network { net, .. }) = c.slots.first() else {
                    c.fired = false;
                    continue;
                };
                let start = self.offsets[*net];
                for j in 0..c.width {
                    self.inputs[j] = EtfInput {
                        energy: self.energies[start + j],
                        phase: 0.0,
                    };
                }
                let inputs = &self.inputs[..c.width];
                if eval_into(&c.kind, inputs, Some(self.net_totals[*net]), window, deltas).is_err() {
                    c.fired = false;
                    continue;
                }
                clamp_transfer(deltas, &self.energies[start..start + c.width]);
                for (j, d) in deltas.iter().enumerate() {
                    self.drain[start + j] -= d.min(0.0);
                }
                continue;
            }

            for (j, slot) in c.slots.iter().enumerate() {
                let (energy, phase) = match *slot {
                    Slot::Node(i) => (self.energies[i], self.phases[i]),
                    Slot::Network { net, .. } => (self.net_totals[net], 0.0),
                };
                self.inputs[j] = EtfInput { energy, phase };
                self.slot_energy[j] = energy;
            }
            if eval_into(&c.kind, &self.inputs[..c.width], None, window, deltas).is_err() {
                c.fired = false;
                continue;
            }
            clamp_transfer(deltas, &self.slot_energy[..c.width]);
            for (slot, &d) in c.slots.iter().zip(deltas.iter()) {
                if d >= 0.0 {
                    continue;
                }
                match *slot {
                    Slot::Node(i) => self.drain[i] -= d,
                    Slot::Network { net, .. } => {
                        let start = self.offsets[net];
                        let total = self.net_totals[net];
                        for j in start..start + nets[net].len() {
                            self.drain[j] -= d * self.energies[j] / total;
                        }
                    }
                }
            }
        }
        for (drain, (&e, factor)) in self.drain.iter_mut().zip(self.energies.iter().zip(self.drain_factor.iter_mut())) {
            *factor = if *drain > e {
                overdrawn = true;
                e / *drain
            } else {
                1.0
            };
            *drain = 0.0;
        }

        for c in &self.compiled {
            if !c.fired {
                continue;
            }
            let deltas = &self.coupling_deltas[c.segment..c.segment + c.width];
            let mut scale = 1.0f64;
            if let EtfKind::GlobalConstraint { .. } = c.kind {
                let Some(Slot::Network { net, .. }) = c.slots.first() else {
                    continue;
                };
                let start = self.offsets[*net];
                if overdrawn {
                    for (j, d) in deltas.iter().enumerate() {
                        if *d < 0.0 {
                            scale = scale.min(self.drain_factor[start + j]);
                        }
                    }
                }
                for (j, d) in deltas.iter().enumerate() {
                    nets[*net].nodes_mut()[j].state.feed_accumulator += d * scale;
                }
                continue;
            }
            if overdrawn {
                for (slot, &d) in c.slots.iter().zip(deltas) {
                    if d >= 0.0 {
                        continue;
                    }
                    match *slot {
                        Slot::Node(i) => scale = scale.min(self.drain_factor[i]),
                        Slot::Network { net, .. } => {
                            let start = self.offsets[net];
                            for j in start..start + nets[net].len() {
                                if self.energies[j] > 0.0 {
                                    scale = scale.min(self.drain_factor[j]);
                                }
                            }
                        }
                    }
                }
            }
            let window = c.divisor as f64 / self.oversample;
            let detunes = matches!(c.kind, EtfKind::DetuningLinear { .. });
            for (slot, &d) in c.slots.iter().zip(deltas) {
                let d = d * scale;
                match slot {
                    Slot::Node(i) => {
                        let r = self.flat[*i];
                        let state = &mut nets[r.network].nodes_mut()[r.node].state;
                        state.feed_accumulator += d;
                        if detunes {
                            smooth_feed_power(state, d / window);
                        }
                    }
                    Slot::Network { net, weights } => {
                        let start = self.offsets[*net];
                        let nodes = nets[*net].nodes_mut();
                        let total = self.net_totals[*net];
                        let active = nodes.iter().filter(|n| n.enabled).count().max(1) as f64;
                        for (j, node) in nodes.iter_mut().enumerate() {
                            let share = if d < 0.0 {
                                if total > 0.0 {
                                    self.energies[start + j] / total
                                } else {
                                    0.0
                                }
                            } else if let Some(w) = weights {
                                w[j]
                            } else if node.enabled {
                                1.0 / active
                            } else {
                                0.0
                            };
                            let part = d * share;
                            let state = &mut node.state;
                            state.feed_accumulator += part;
                            if detunes {
                                smooth_feed_power(state, part / window);
                            }
                        }
                    }
                }
            }
        }

        // Phase B: feed. Phase C: step.
        for (n, net) in nets.iter_mut().enumerate() {
            for (k, node) in net.nodes_mut().iter_mut().enumerate() {
                let feed = std::mem::take(&mut node.state.feed_accumulator);
                if !node.active() {
                    continue;
                }
                if feed != 0.0 {
                    apply_feed(&mut node.state, &node.params, rate, EnergyDelta::new(feed));
                }
                if step_node(&mut node.state, &node.params, rate).is_err() {
                    node.muted = true;
                    self.overflows.push(NodeRef::new(n, k));
                }
            }
        }
        self.steps += 1;
    }

    /// Control-rate work: refresh stored phases and, at L3 and above, the
    /// feed-detuned effective frequencies.
    pub fn control_update(&mut self, inst: &mut Instrument) {
        let rate = inst.effective_rate();
        for (n, net) in inst.networks_untracked().iter_mut().enumerate() {
            let base = self.offsets[n];
            for (k, node) in net.nodes_mut().iter_mut().enumerate() {
                refresh_estimate(&mut node.state, &node.params, rate);
                let kappa = self.kappa[base + k];
                let kappa = if kappa.is_nan() { 0.0 } else { kappa };
                update_effective_frequency(&mut node.state, &node.params, rate, kappa);
            }
        }
    }

    /// Kappa applied to a node (lowest-id detune coupling touching it).
    pub fn node_kappa(&self, r: NodeRef) -> f64 {
        let k = self.kappa[self.offsets[r.network] + r.node];
        if k.is_nan() {
            0.0
        } else {
            k
        }
    }

    /// Flat index of a node in scheduler order.
    pub fn flat_index(&self, r: NodeRef) -> usize {
        self.offsets[r.network] + r.node
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mode::Level;
    use crate::network::{MacroParams, Template};

    fn pair(k: f64) -> Instrument {
        let mut inst = Instrument::default();
        let m = MacroParams {
            fundamental: 220.0,
            ..MacroParams::default()
        };
        inst.add_network("a", Template::Custom, 2, m, Level::L1).unwrap();
        inst.add_coupling(
            EtfKind::LinearDiffusive { k },
            vec![
                Participant::Node(NodeRef::new(0, 0)),
                Participant::Node(NodeRef::new(0, 1)),
            ],
            1,
        )
        .unwrap();
        inst
    }

    fn seed(inst: &mut Instrument, r: NodeRef, e: f64) {
        let rate = inst.effective_rate();
        let node = &mut inst.networks_mut()[r.network].nodes_mut()[r.node];
        apply_feed(&mut node.state, &node.params, rate, EnergyDelta::new(e));
    }

    #[test]
    fn silent_instrument_stays_silent() {
        let mut inst = pair(1e-3);
        let mut s = Scheduler::new(&inst);
        for _ in 0..1000 {
            s.step(&mut inst);
        }
        assert_eq!(inst.total_energy(), 0.0);
        assert!(inst.networks()[0].nodes().iter().all(|n| n.state.is_at_rest()));
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut inst = pair(1e-3);
        seed(&mut inst, NodeRef::new(0, 0), 1.0);
        let rate = inst.effective_rate();
        let mut expected = inst.clone();
        let mut s = Scheduler::new(&inst);
        s.step(&mut inst);

        let q = 1e-3 * 1.0;
        for (k, d) in [(0, -q), (1, q)] {
            let node = &mut expected.networks_mut()[0].nodes_mut()[k];
            apply_feed(&mut node.state, &node.params, rate, EnergyDelta::new(d));
            step_node(&mut node.state, &node.params, rate).unwrap();
        }
        assert_eq!(inst.networks()[0].nodes()[0].state, expected.networks()[0].nodes()[0].state);
        assert_eq!(inst.networks()[0].nodes()[1].state, expected.networks()[0].nodes()[1].state);
    }

    #[test]
    fn couplings_see_frozen_energies() {
        // Two couplings share node 1; the second must see node 1's energy
        // from before the first coupling's delta.
        let mut inst = Instrument::default();
        inst.add_network("a", Template::Custom, 3, MacroParams::default(), Level::L1)
            .unwrap();
        let n = |k| Participant::Node(NodeRef::new(0, k));
        inst.add_coupling(EtfKind::OneWay { k: 0.1 }, vec![n(0), n(1)], 1).unwrap();
        inst.add_coupling(EtfKind::OneWay { k: 0.1 }, vec![n(1), n(2)], 1).unwrap();
        seed(&mut inst, NodeRef::new(0, 0), 1.0);
        let mut s = Scheduler::new(&inst);
        s.step(&mut inst);
        // node 1 started empty, so nothing is forwarded to node 2 in step 1
        assert!(inst.networks()[0].nodes()[2].state.is_at_rest());
        assert!(inst.node_energy(NodeRef::new(0, 1)) > 0.0);
    }

    #[test]
    fn divisor_gates_evaluation() {
        let mut inst = pair(1e-3);
        inst.set_param_text(&"coupling.0.rate".parse().unwrap(), "4").unwrap();
        seed(&mut inst, NodeRef::new(0, 0), 1.0);
        let mut s = Scheduler::new(&inst);
        let mut moved = Vec::new();
        for _ in 0..8 {
            let before = inst.node_energy(NodeRef::new(0, 1));
            s.step(&mut inst);
            moved.push(inst.node_energy(NodeRef::new(0, 1)) > before + 1e-12);
        }
        assert_eq!(moved, vec![true, false, false, false, true, false, false, false]);
    }

    #[test]
    fn registry_ids() {
        let mut r = CouplingRegistry::default();
        let ps = vec![
            Participant::Node(NodeRef::new(0, 0)),
            Participant::Node(NodeRef::new(0, 1)),
        ];
        let a = r.add(EtfKind::OneWay { k: 1.0 }, ps.clone(), 1).unwrap();
        assert_eq!(a, CouplingId(0));
        r.remove(a);
        assert!(r.is_empty());
        assert_eq!(r.add(EtfKind::OneWay { k: 1.0 }, ps, 1).unwrap(), CouplingId(1));
    }

    #[test]
    fn queue_drops_oldest() {
        let q = EditQueue::new(4);
        for i in 0..10 {
            q.push(ControlEdit::RemoveCoupling(CouplingId(i)));
        }
        assert_eq!(q.dropped(), 6);
        assert_eq!(q.pop(), Some(ControlEdit::RemoveCoupling(CouplingId(6))));
    }

    #[test]
    fn overflow_mutes_node() {
        let mut inst = Instrument::default();
        inst.add_network("a", Template::Custom, 1, MacroParams::default(), Level::L1)
            .unwrap();
        inst.networks_mut()[0].nodes_mut()[0].state.m[0] = f64::MAX;
        inst.networks_mut()[0].nodes_mut()[0].state.m[1] = f64::MAX;
        let mut s = Scheduler::new(&inst);
        s.step(&mut inst);
        assert_eq!(s.take_overflows(), vec![NodeRef::new(0, 0)]);
        assert!(inst.networks()[0].nodes()[0].muted);
        s.step(&mut inst);
        assert!(s.take_overflows().is_empty());
    }

    #[test]
    fn network_participants_conserve() {
        let mut inst = Instrument::default();
        inst.add_network("a", Template::String, 3, MacroParams::default(), Level::L1)
            .unwrap();
        inst.add_network("b", Template::String, 4, MacroParams::default(), Level::L1)
            .unwrap();
        inst.add_coupling(
            EtfKind::LinearDiffusive { k: 1e-3 },
            vec![
                Participant::Network {
                    network: 0,
                    location: None,
                },
                Participant::Network {
                    network: 1,
                    location: Some(vec![0.3]),
                },
            ],
            1,
        )
        .unwrap();
        for k in 0..3 {
            seed(&mut inst, NodeRef::new(0, k), 0.3);
        }
        let e0 = inst.total_energy();
        let mut s = Scheduler::new(&inst);
        for _ in 0..4410 {
            s.step(&mut inst);
        }
        let e1 = inst.total_energy();
        assert!(((e1 - e0) / e0).abs() < 1e-9, "{e0} {e1}");
        assert!(inst.networks()[1].macro_state().total_energy > 0.1);
    }

    #[test]
    fn shared_donor_is_not_overdrawn() {
        let mut inst = Instrument::default();
        inst.add_network("a", Template::Custom, 4, MacroParams::default(), Level::L1)
            .unwrap();
        // Each coupling alone may take all of node 0; together they must
        // share what it has.
        for k in 1..4 {
            inst.add_coupling(
                EtfKind::OneWay { k: 0.9 },
                vec![
                    Participant::Node(NodeRef::new(0, 0)),
                    Participant::Node(NodeRef::new(0, k)),
                ],
                1,
            )
            .unwrap();
        }
        seed(&mut inst, NodeRef::new(0, 0), 1e-3);
        let before = inst.total_energy();
        let mut sched = Scheduler::new(&inst);
        sched.step(&mut inst);
        assert!((inst.total_energy() - before).abs() < 1e-15);
        assert!(inst.node_energy(NodeRef::new(0, 0)) < 1e-15);
        let third = inst.node_energy(NodeRef::new(0, 1));
        assert!((third - before / 3.0).abs() < 1e-15);
    }
}
