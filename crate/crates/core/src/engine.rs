//! Excitation, output pickup, oversampling, offline rendering and the live
//! run loop.

use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::instrument::{Instrument, NodeRef};
use crate::mode::{apply_feed, energy_of, estimate_freq_phase, EnergyDelta, ENERGY_EPSILON};
use crate::network::NetworkError;
use crate::scheduler::{apply_control_edits, ControlEdit, EditQueue, Scheduler};

/// Decimation lowpass cutoff as a fraction of the output sample rate.
pub const DECIMATION_CUTOFF: f64 = 0.45;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown excitation target: {0}")]
    UnknownTarget(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid excitation: {0}")]
    BadExcitation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("file error: {0}")]
    File(String),
}

/// Where an excitation lands.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Node(NodeRef),
    /// A network, at a location or spread evenly over its enabled nodes.
    Network { network: usize, x: Option<Vec<f64>> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExcitationKind {
    /// Delivers `energy` once.
    Strike,
    /// Delivers `rate` energy per frame for `duration` frames.
    Press { duration: u64, rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Excitation {
    pub kind: ExcitationKind,
    pub target: Target,
    pub energy: f64,
    /// Excitation phase in radians; shapes the response at L2 and above.
    pub phase: f64,
    /// Output frame at which the excitation starts.
    pub time: u64,
}

impl Excitation {
    pub fn strike(target: Target, energy: f64, time: u64) -> Self {
        Excitation {
            kind: ExcitationKind::Strike,
            target,
            energy,
            phase: 0.0,
            time,
        }
    }

    pub fn press(target: Target, rate: f64, duration: u64, time: u64) -> Self {
        Excitation {
            kind: ExcitationKind::Press { duration, rate },
            target,
            energy: rate * duration as f64,
            phase: 0.0,
            time,
        }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: &str| Err(EngineError::BadExcitation(m.to_string()));
        if !(self.energy > 0.0 && self.energy.is_finite()) {
            return bad("energy must be positive");
        }
        if !self.phase.is_finite() {
            return bad("phase must be finite");
        }
        if let ExcitationKind::Press { duration, rate } = self.kind {
            if duration == 0 {
                return bad("press duration must be at least one frame");
            }
            if !(rate > 0.0 && rate.is_finite()) {
                return bad("press rate must be positive");
            }
        }
        Ok(())
    }
}

/// How a pickup reads node displacements.
#[derive(Debug, Clone, PartialEq)]
pub enum PickupTap {
    /// Every enabled node with weight 1.
    Sum,
    /// Mode shapes of one network at `x`.
    Location { network: usize, x: Vec<f64> },
    /// Explicit weights in instrument node order (networks in order).
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pickup {
    pub name: String,
    pub tap: PickupTap,
    pub gain: f64,
}

impl Pickup {
    pub fn sum(name: &str, gain: f64) -> Self {
        Pickup {
            name: name.to_string(),
            tap: PickupTap::Sum,
            gain,
        }
    }

    pub fn location(name: &str, network: usize, x: Vec<f64>, gain: f64) -> Self {
        Pickup {
            name: name.to_string(),
            tap: PickupTap::Location { network, x },
            gain,
        }
    }

    pub fn weights(name: &str, weights: Vec<f64>, gain: f64) -> Self {
        Pickup {
            name: name.to_string(),
            tap: PickupTap::Weights(weights),
            gain,
        }
    }
}

/// Reads one output sample from the current node displacements.
pub fn pickup_sample(inst: &Instrument, pickup: &Pickup) -> Result<f64, NetworkError> {
    let value = match &pickup.tap {
        PickupTap::Sum => inst
            .networks()
            .iter()
            .flat_map(|n| n.nodes())
            .filter(|n| n.enabled)
            .map(|n| n.state.m[0])
            .sum(),
        PickupTap::Location { network, x } => inst
            .network(*network)
            .ok_or(NetworkError::BadLocation)?
            .displacement_at(x)?,
        PickupTap::Weights(w) => inst
            .networks()
            .iter()
            .flat_map(|n| n.nodes())
            .zip(w)
            .map(|(n, w)| w * n.state.m[0])
            .sum(),
    };
    Ok(pickup.gain * value)
}

/// Pickup flattened to one weight per node, gain included.
fn compile_pickup(inst: &Instrument, pickup: &Pickup, out: &mut Vec<f64>) -> Result<(), NetworkError> {
    out.clear();
    for (n, net) in inst.networks().iter().enumerate() {
        for (k, node) in net.nodes().iter().enumerate() {
            let w = match &pickup.tap {
                PickupTap::Sum => f64::from(node.enabled),
                PickupTap::Location { network, x } if *network == n => {
                    if node.enabled {
                        net.mode_shape(k, x)?
                    } else {
                        0.0
                    }
                }
                PickupTap::Location { .. } => 0.0,
                PickupTap::Weights(w) => w.get(out.len()).copied().unwrap_or(0.0),
            };
            out.push(w * pickup.gain);
        }
    }
    Ok(())
}

/// Timestamped engine events (overflows, skipped edits, underruns).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    lines: Vec<String>,
}

impl EventLog {
    pub fn push(&mut self, line: impl Into<String>) {
        let line = line.into();
        log::debug!("{line}");
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn take(&mut self) -> Vec<String> {
        std::mem::take(&mut self.lines)
    }
}

/// Per-node energies published once per control block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeterFrame {
    /// Output frame at which the meters were read.
    pub frame: u64,
    /// Node count per network, in network order.
    pub layout: Vec<usize>,
    pub energies: Vec<f64>,
    pub enabled: Vec<bool>,
    pub network_hashes: Vec<u64>,
    pub state_hash: u64,
}

/// Audio-side ends of the control channel.
pub struct EngineLink {
    pub edits: Arc<EditQueue>,
    pub meters: triple_buffer::Input<MeterFrame>,
}

#[derive(Debug, Clone)]
struct ActivePress {
    /// Energy per node per oversampled step.
    per_step: Vec<(NodeRef, f64)>,
    remaining: u64,
}

/// Renders an instrument one output frame at a time.
pub struct Engine {
    inst: Instrument,
    sched: Scheduler,
    pending: VecDeque<Excitation>,
    presses: Vec<ActivePress>,
    timed_edits: VecDeque<(u64, ControlEdit)>,
    local_edits: VecDeque<ControlEdit>,
    link: Option<EngineLink>,
    frame: u64,
    pickup_revision: Option<u64>,
    pickups: Vec<Pickup>,
    pickup_weights: Vec<Vec<f64>>,
    filters: Vec<f64>,
    filter_coeff: f64,
    events: EventLog,
    meter_scratch: MeterFrame,
}

impl Engine {
    pub fn new(inst: Instrument) -> Self {
        let sched = Scheduler::new(&inst);
        let rates = *inst.rates();
        let mut engine = Engine {
            inst,
            sched,
            pending: VecDeque::new(),
            presses: Vec::new(),
            timed_edits: VecDeque::new(),
            local_edits: VecDeque::new(),
            link: None,
            frame: 0,
            pickup_revision: None,
            pickups: Vec::new(),
            pickup_weights: Vec::new(),
            filters: Vec::new(),
            filter_coeff: lowpass_coefficient(rates.sample_rate, rates.oversample),
            events: EventLog::default(),
            meter_scratch: MeterFrame::default(),
        };
        engine.refresh_pickups();
        engine
    }

    pub fn attach(&mut self, link: EngineLink) {
        self.link = Some(link);
    }

    pub fn instrument(&self) -> &Instrument {
        &self.inst
    }

    /// Direct access; edits take effect from the next frame.
    pub fn instrument_mut(&mut self) -> &mut Instrument {
        &mut self.inst
    }

    pub fn into_instrument(self) -> Instrument {
        self.inst
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn frame(&self) -> u64 {
        self.frame
    }

    pub fn channels(&self) -> usize {
        self.pickups.len()
    }

    pub fn events(&self) -> &EventLog {
        &self.events
    }

    pub fn events_mut(&mut self) -> &mut EventLog {
        &mut self.events
    }

    /// Checks an excitation against the instrument.
    pub fn check_excitation(&self, ex: &Excitation) -> Result<(), EngineError> {
        ex.validate()?;
        match &ex.target {
            Target::Node(r) => {
                let ok = self.inst.network(r.network).is_some_and(|n| r.node < n.len());
                if !ok {
                    return Err(EngineError::UnknownTarget(r.to_string()));
                }
            }
            Target::Network { network, x } => {
                let net = self
                    .inst
                    .network(*network)
                    .ok_or_else(|| EngineError::UnknownTarget(network.to_string()))?;
                if let Some(x) = x {
                    if !net.template().has_spatial_model() {
                        return Err(NetworkError::NoSpatialModel(net.name().to_string()).into());
                    }
                    if !net.template().contains(x) {
                        return Err(NetworkError::BadLocation.into());
                    }
                }
            }
        }
        Ok(())
    }

    /// Schedules an excitation; ones whose time has passed fire on the next frame.
    pub fn schedule(&mut self, ex: Excitation) -> Result<(), EngineError> {
        self.check_excitation(&ex)?;
        let pos = self.pending.iter().position(|p| p.time > ex.time).unwrap_or(self.pending.len());
        self.pending.insert(pos, ex);
        Ok(())
    }

    /// Queues an edit for the next control-block boundary.
    pub fn queue_edit(&mut self, edit: ControlEdit) {
        self.local_edits.push_back(edit);
    }

    /// Queues an edit for the first block boundary at or after `frame`.
    pub fn schedule_edit(&mut self, frame: u64, edit: ControlEdit) {
        let pos = self
            .timed_edits
            .iter()
            .position(|(t, _)| *t > frame)
            .unwrap_or(self.timed_edits.len());
        self.timed_edits.insert(pos, (frame, edit));
    }

    /// Energy each node receives from an excitation of `amount`.
    fn distribute(&mut self, target: &Target, amount: f64) -> Result<Vec<(NodeRef, f64)>, EngineError> {
        match target {
            Target::Node(r) => Ok(vec![(*r, amount)]),
            Target::Network { network, x: Some(x) } => {
                let net = &mut self.inst.networks_untracked()[*network];
                let weights = net.inject_weights(x)?;
                Ok(weights
                    .iter()
                    .enumerate()
                    .map(|(k, w)| (NodeRef::new(*network, k), amount * w))
                    .collect())
            }
            Target::Network { network, x: None } => {
                let net = &self.inst.networks()[*network];
                let enabled = net.enabled_count().max(1) as f64;
                Ok(net
                    .nodes()
                    .iter()
                    .enumerate()
                    .filter(|(_, n)| n.enabled)
                    .map(|(k, _)| (NodeRef::new(*network, k), amount / enabled))
                    .collect())
            }
        }
    }

    fn strike(&mut self, ex: &Excitation) -> Result<(), EngineError> {
        let shares = self.distribute(&ex.target, ex.energy)?;
        let rate = self.inst.effective_rate();
        for (r, amount) in shares {
            let node = &mut self.inst.networks_untracked()[r.network].nodes_mut()[r.node];
            if !node.active() || amount <= 0.0 {
                continue;
            }
            let mut amount = amount;
            let energy = energy_of(&node.state, &node.params, rate);
            if node.params.level.phase_aware() && energy > ENERGY_EPSILON {
                let phi = estimate_freq_phase(&node.state, &node.params, rate).phase;
                amount *= 0.5 * (1.0 + (phi - ex.phase).cos());
            }
            apply_feed(
                &mut node.state,
                &node.params,
                rate,
                EnergyDelta::with_phase(amount, ex.phase),
            );
        }
        Ok(())
    }

    fn start_excitations(&mut self) {
        while self.pending.front().is_some_and(|e| e.time <= self.frame) {
            let ex = self.pending.pop_front().expect("checked");
            let result = match ex.kind {
                ExcitationKind::Strike => self.strike(&ex),
                ExcitationKind::Press { duration, rate } => {
                    let steps = self.inst.rates().oversample as f64;
                    self.distribute(&ex.target, rate / steps).map(|per_step| {
                        self.presses.push(ActivePress {
                            per_step,
                            remaining: duration,
                        })
                    })
                }
            };
            if let Err(e) = result {
                self.events.push(format!("frame {}: excitation skipped: {e}", self.frame));
            }
        }
    }

    fn refresh_pickups(&mut self) {
        if self.pickup_revision == Some(self.inst.revision()) {
            return;
        }
        self.pickups = self.inst.output_pickups();
        self.pickup_weights.resize_with(self.pickups.len(), Vec::new);
        for (p, w) in self.pickups.iter().zip(self.pickup_weights.iter_mut()) {
            if let Err(e) = compile_pickup(&self.inst, p, w) {
                self.events.push(format!("pickup {} disabled: {e}", p.name));
                w.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.filters.resize(self.pickups.len(), 0.0);
        let rates = self.inst.rates();
        self.filter_coeff = lowpass_coefficient(rates.sample_rate, rates.oversample);
        self.pickup_revision = Some(self.inst.revision());
    }

    fn block_boundary(&mut self) {
        let mut edits = Vec::new();
        while self.timed_edits.front().is_some_and(|(t, _)| *t <= self.frame) {
            edits.push(self.timed_edits.pop_front().expect("checked").1);
        }
        edits.extend(self.local_edits.drain(..));
        if let Some(link) = &self.link {
            while let Some(e) = link.edits.pop() {
                edits.push(e);
            }
        }
        if !edits.is_empty() {
            apply_control_edits(edits, &mut self.inst, &mut self.events);
        }
        self.sync();
        self.sched.control_update(&mut self.inst);
        self.publish_meters();
    }

    fn sync(&mut self) {
        if self.sched.sync(&self.inst) {
            self.refresh_pickups();
        }
    }

    fn fill_meters(inst: &Instrument, frame: u64, m: &mut MeterFrame) {
        let rate = inst.effective_rate();
        m.frame = frame;
        m.layout.clear();
        m.energies.clear();
        m.enabled.clear();
        m.network_hashes.clear();
        for (i, net) in inst.networks().iter().enumerate() {
            m.layout.push(net.len());
            for node in net.nodes() {
                m.enabled.push(node.enabled);
                m.energies.push(if node.enabled {
                    energy_of(&node.state, &node.params, rate)
                } else {
                    0.0
                });
            }
            m.network_hashes.push(inst.network_state_hash(i));
        }
        m.state_hash = inst.state_hash();
    }

    fn publish_meters(&mut self) {
        if let Some(link) = &mut self.link {
            Engine::fill_meters(&self.inst, self.frame, link.meters.input_buffer_mut());
            link.meters.publish();
        }
    }

    /// Current meter values (what the next publish would carry).
    pub fn meters(&mut self) -> &MeterFrame {
        Engine::fill_meters(&self.inst, self.frame, &mut self.meter_scratch);
        &self.meter_scratch
    }

    /// Renders one output frame into `out` (one value per pickup).
    pub fn next_frame(&mut self, out: &mut [f64]) {
        let block = self.inst.rates().control_block as u64;
        if self.frame.is_multiple_of(block) {
            self.block_boundary();
        } else {
            self.sync();
        }
        self.start_excitations();

        let steps = self.inst.rates().oversample;
        let a = self.filter_coeff;
        for _ in 0..steps {
            for press in &self.presses {
                for (r, amount) in &press.per_step {
                    self.inst.networks_untracked()[r.network].nodes_mut()[r.node]
                        .state
                        .feed_accumulator += amount;
                }
            }
            self.sched.step(&mut self.inst);
            for (c, weights) in self.pickup_weights.iter().enumerate() {
                let mut acc = 0.0;
                let mut i = 0;
                for net in self.inst.networks() {
                    for node in net.nodes() {
                        acc += weights[i] * node.state.m[0];
                        i += 1;
                    }
                }
                if steps > 1 {
                    self.filters[c] += a * (acc - self.filters[c]);
                } else {
                    self.filters[c] = acc;
                }
            }
        }
        for press in &mut self.presses {
            press.remaining -= 1;
        }
        self.presses.retain(|p| p.remaining > 0);
        for r in self.sched.take_overflows() {
            self.events
                .push(format!("frame {}: node {} overflowed and was muted", self.frame, r));
        }
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = *f;
        }
        self.frame += 1;
    }

    /// Renders `frames` frames, interleaved by pickup.
    pub fn render(&mut self, frames: usize) -> Vec<f64> {
        let channels = self.channels();
        let mut out = vec![0.0; frames * channels];
        for frame in out.chunks_mut(channels.max(1)) {
            self.next_frame(frame);
        }
        out
    }

    /// Renders `frames` frames of the first pickup.
    pub fn render_mono(&mut self, frames: usize) -> Vec<f64> {
        let channels = self.channels();
        let mut frame = vec![0.0; channels.max(1)];
        (0..frames)
            .map(|_| {
                self.next_frame(&mut frame);
                frame[0]
            })
            .collect()
    }

    /// Fills sink buffers a control block at a time until `stop` is set or
    /// the sink asks to stop. Control edits arriving through the attached
    /// link are drained at each block boundary.
    pub fn run_live(&mut self, sink: &mut dyn AudioSink, stop: &AtomicBool) {
        let channels = self.channels().max(1);
        let block = self.inst.rates().control_block as usize;
        let mut frame = vec![0.0; channels];
        let mut buffer: Vec<f32> = Vec::with_capacity(block * channels);
        while !stop.load(Ordering::Relaxed) {
            buffer.clear();
            for _ in 0..block {
                self.next_frame(&mut frame);
                buffer.extend(frame.iter().map(|v| *v as f32));
            }
            match sink.write(&buffer, channels) {
                SinkStatus::Continue => {}
                SinkStatus::Underrun => self.events.push(format!("frame {}: sink underrun", self.frame)),
                SinkStatus::Stop => break,
            }
        }
    }
}

fn lowpass_coefficient(sample_rate: f64, oversample: u32) -> f64 {
    let inner = sample_rate * oversample as f64;
    1.0 - (-TAU * DECIMATION_CUTOFF * sample_rate / inner).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkStatus {
    Continue,
    Underrun,
    Stop,
}

/// Receives interleaved audio blocks from [`Engine::run_live`].
pub trait AudioSink {
    fn write(&mut self, interleaved: &[f32], channels: usize) -> SinkStatus;
}

/// Discards audio; optionally stops after a number of frames.
#[derive(Debug, Clone, Default)]
pub struct NullSink {
    pub frames: u64,
    pub limit: Option<u64>,
}

impl NullSink {
    pub fn with_limit(frames: u64) -> Self {
        NullSink {
            frames: 0,
            limit: Some(frames),
        }
    }
}

impl AudioSink for NullSink {
    fn write(&mut self, interleaved: &[f32], channels: usize) -> SinkStatus {
        self.frames += (interleaved.len() / channels.max(1)) as u64;
        match self.limit {
            Some(limit) if self.frames >= limit => SinkStatus::Stop,
            _ => SinkStatus::Continue,
        }
    }
}

/// Discards audio at wall-clock pace, reporting underruns when the
/// producer falls behind.
#[derive(Debug)]
pub struct PacedSink {
    sample_rate: f64,
    started: Option<Instant>,
    frames: u64,
    limit: Option<u64>,
}

impl PacedSink {
    pub fn new(sample_rate: f64, limit: Option<u64>) -> Self {
        PacedSink {
            sample_rate,
            started: None,
            frames: 0,
            limit,
        }
    }
}

impl AudioSink for PacedSink {
    fn write(&mut self, interleaved: &[f32], channels: usize) -> SinkStatus {
        let started = *self.started.get_or_insert_with(Instant::now);
        self.frames += (interleaved.len() / channels.max(1)) as u64;
        let due = Duration::from_secs_f64(self.frames as f64 / self.sample_rate);
        let elapsed = started.elapsed();
        let status = if elapsed > due + Duration::from_millis(50) {
            SinkStatus::Underrun
        } else {
            if due > elapsed {
                std::thread::sleep(due - elapsed);
            }
            SinkStatus::Continue
        };
        match self.limit {
            Some(limit) if self.frames >= limit => SinkStatus::Stop,
            _ => status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SampleFormat {
    #[default]
    Float32,
    Int16,
}

/// An offline render request.
#[derive(Debug, Clone)]
pub struct RenderJob {
    pub instrument: Instrument,
    pub excitations: Vec<Excitation>,
    /// Seconds.
    pub duration: f64,
    pub output: PathBuf,
    pub format: SampleFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderReport {
    pub frames: u64,
    pub channels: usize,
    pub peak: f64,
    /// Samples outside [-1, 1].
    pub clipped: u64,
    pub events: Vec<String>,
    pub seconds: f64,
}

/// Renders a job to a RIFF/WAVE file.
pub fn render(job: &RenderJob) -> Result<RenderReport, EngineError> {
    if !(job.duration > 0.0 && job.duration.is_finite()) {
        return Err(EngineError::Config(format!("duration {}", job.duration)));
    }
    let started = Instant::now();
    let rates = *job.instrument.rates();
    let mut engine = Engine::new(job.instrument.clone());
    for ex in &job.excitations {
        engine.schedule(ex.clone())?;
    }
    let frames = (job.duration * rates.sample_rate).round() as u64;
    let channels = engine.channels();
    let spec = hound::WavSpec {
        channels: channels as u16,
        sample_rate: rates.sample_rate.round() as u32,
        bits_per_sample: match job.format {
            SampleFormat::Float32 => 32,
            SampleFormat::Int16 => 16,
        },
        sample_format: match job.format {
            SampleFormat::Float32 => hound::SampleFormat::Float,
            SampleFormat::Int16 => hound::SampleFormat::Int,
        },
    };
    let file_err = |e: hound::Error| EngineError::File(format!("{}: {e}", job.output.display()));
    let mut writer = hound::WavWriter::create(&job.output, spec).map_err(file_err)?;
    let mut frame = vec![0.0; channels];
    let mut peak = 0.0f64;
    let mut clipped = 0;
    for _ in 0..frames {
        engine.next_frame(&mut frame);
        for &v in &frame {
            peak = peak.max(v.abs());
            if v.abs() > 1.0 {
                clipped += 1;
            }
            match job.format {
                SampleFormat::Float32 => writer.write_sample(v as f32).map_err(file_err)?,
                SampleFormat::Int16 => {
                    let s = (v.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
                    writer.write_sample(s).map_err(file_err)?
                }
            }
        }
    }
    writer.finalize().map_err(file_err)?;
    Ok(RenderReport {
        frames,
        channels,
        peak,
        clipped,
        events: engine.events_mut().take(),
        seconds: started.elapsed().as_secs_f64(),
    })
}
