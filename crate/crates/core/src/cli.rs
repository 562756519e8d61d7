//! The `modalnet` command: check, render, serve and inspect instruments.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad instrument),
//! 2 runtime error (I/O, rendering, sockets).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::control::{ControlHub, ControlServer, DEFAULT_PORT};
use crate::engine::{render, Excitation, PacedSink, RenderJob, SampleFormat, Target};
use crate::instrument::{Instrument, NodeRef};
use crate::params::{format_vector, parse_vector};
use crate::persistence::{load_instrument, save_instrument, serialize, InstrumentFile, PersistError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "modalnet", version, about = "Render and play modal-network instruments")]
pub struct Cli {
    /// Log progress and engine events to standard error.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    F32,
    I16,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and validate an instrument, then print a summary.
    Check { instrument: PathBuf },
    /// Render an instrument to a WAV file.
    Render {
        instrument: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seconds of audio.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long)]
        sample_rate: Option<f64>,
        #[arg(long)]
        oversample: Option<u32>,
        /// `strike@<t>,net=<n>[,node=<k>|,x=<x>],e=<E>[,phi=<rad>]` or
        /// `press@<t>,net=<n>,...,rate=<E/s>,dur=<s>`; repeatable.
        #[arg(long = "excite")]
        excite: Vec<ExciteSpec>,
        /// Recall this snapshot before rendering.
        #[arg(long)]
        snapshot: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::F32)]
        format: Format,
        /// Reserved for stochastic excitations.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the instrument live with the control socket open.
    Serve {
        instrument: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        sample_rate: Option<f64>,
        #[arg(long)]
        oversample: Option<u32>,
        /// Stop after this many seconds instead of running until killed.
        #[arg(long)]
        duration: Option<f64>,
        /// Recall this snapshot at start.
        #[arg(long)]
        snapshot: Option<String>,
        /// Save the final instrument (with snapshots) here on shutdown.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List snapshots, or print one as instrument-file text.
    Snapshot {
        instrument: PathBuf,
        #[arg(long)]
        snapshot: Option<String>,
    },
}

/// A command-line excitation before network names are resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ExciteSpec {
    pub press: bool,
    /// Seconds.
    pub time: f64,
    pub net: String,
    pub node: Option<usize>,
    pub x: Option<Vec<f64>>,
    pub energy: Option<f64>,
    pub phase: f64,
    /// Press energy per second.
    pub rate: Option<f64>,
    /// Press duration in seconds.
    pub dur: Option<f64>,
}

impl FromStr for ExciteSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (head, rest) = s.split_once(',').unwrap_or((s, ""));
        let (kind, time) = head
            .split_once('@')
            .ok_or_else(|| format!("expected strike@<t> or press@<t>, found '{head}'"))?;
        let press = match kind {
            "strike" => false,
            "press" => true,
            _ => return Err(format!("unknown excitation '{kind}'")),
        };
        let num = |key: &str, v: &str| -> Result<f64, String> {
            crate::params::parse_number(v).ok_or_else(|| format!("{key}: expected a number, found '{v}'"))
        };
        let mut spec = ExciteSpec {
            press,
            time: num("time", time)?,
            net: String::new(),
            node: None,
            x: None,
            energy: None,
            phase: 0.0,
            rate: None,
            dur: None,
        };
        for field in rest.split(',').filter(|f| !f.is_empty()) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, found '{field}'"))?;
            match key {
                "net" => spec.net = value.to_string(),
                "node" => spec.node = Some(value.parse().map_err(|_| format!("node: bad index '{value}'"))?),
                // Multi-dimensional locations separate coordinates with ':'.
                "x" => {
                    spec.x = Some(
                        parse_vector(&value.replace(':', ","))
                            .ok_or_else(|| format!("x: bad location '{value}'"))?,
                    )
                }
                "e" => spec.energy = Some(num(key, value)?),
                "phi" => spec.phase = num(key, value)?,
                "rate" => spec.rate = Some(num(key, value)?),
                "dur" => spec.dur = Some(num(key, value)?),
                _ => return Err(format!("unknown excitation key '{key}'")),
            }
        }
        if spec.net.is_empty() {
            return Err("missing net=<name>".into());
        }
        if spec.node.is_some() && spec.x.is_some() {
            return Err("give node or x, not both".into());
        }
        if !(spec.time >= 0.0) {
            return Err("time must not be negative".into());
        }
        if spec.press {
            if spec.rate.is_none() || spec.dur.is_none() {
                return Err("press needs rate=<E/s> and dur=<s>".into());
            }
        } else if spec.energy.is_none() {
            return Err("strike needs e=<energy>".into());
        }
        Ok(spec)
    }
}

impl ExciteSpec {
    /// Resolves names against `inst`; times become frames at `sample_rate`.
    pub fn resolve(&self, inst: &Instrument) -> Result<Excitation, String> {
        let network = inst
            .network_index(&self.net)
            .ok_or_else(|| format!("unknown network '{}'", self.net))?;
        let target = match (self.node, &self.x) {
            (Some(node), _) => {
                if node >= inst.networks()[network].len() {
                    return Err(format!("node {node} out of range for '{}'", self.net));
                }
                Target::Node(NodeRef::new(network, node))
            }
            (None, x) => Target::Network { network, x: x.clone() },
        };
        let sr = inst.rates().sample_rate;
        let time = (self.time * sr).round() as u64;
        let ex = if self.press {
            let frames = (self.dur.unwrap_or(0.0) * sr).round() as u64;
            let per_frame = self.rate.unwrap_or(0.0) / sr;
            Excitation::press(target, per_frame, frames, time)
        } else {
            Excitation::strike(target, self.energy.unwrap_or(0.0), time)
        }
        .with_phase(self.phase);
        ex.validate().map_err(|e| e.to_string())?;
        if let Target::Network { x: Some(x), .. } = &ex.target {
            let template = inst.networks()[network].template();
            if !template.has_spatial_model() {
                return Err(format!("network '{}' has no spatial model; use node=<k>", self.net));
            }
            if !template.contains(x) {
                return Err(format!("location {} is off the {template} domain", format_vector(x)));
            }
        }
        Ok(ex)
    }
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<PersistError> for Failure {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

/// Runs the command line and returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Debug
        } else {
            log::LevelFilter::Warn
        })
        .try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(msg)) => {
            eprintln!("modalnet: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("modalnet: {msg}");
            EXIT_RUNTIME
        }
    }
}

fn load_with_rates(path: &Path, sample_rate: Option<f64>, oversample: Option<u32>) -> Result<Instrument, Failure> {
    let mut inst = load_instrument(path)?;
    let mut rates = *inst.rates();
    if let Some(sr) = sample_rate {
        rates.sample_rate = sr;
    }
    if let Some(o) = oversample {
        rates.oversample = o;
    }
    inst.set_rates(rates).map_err(|e| Failure::Invalid(e.to_string()))?;
    Ok(inst)
}

fn recall(inst: &mut Instrument, name: &str) -> Result<(), Failure> {
    let plan = inst.recall_snapshot(name).map_err(|e| Failure::Invalid(e.to_string()))?;
    for stale in &plan.stale {
        log::warn!("snapshot {name}: stale entry {stale} skipped");
    }
    for (path, value) in plan.edits {
        inst.set_param(&path, &value).map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    Ok(())
}

/// One-line description of an instrument.
pub fn summary(inst: &Instrument) -> String {
    let nodes = inst.node_count();
    let disabled: usize = inst.networks().iter().map(|n| n.len() - n.enabled_count()).sum();
    format!(
        "networks {} nodes {nodes} couplings {} disabled {disabled} pickups {} snapshots {}",
        inst.networks().len(),
        inst.registry().len(),
        inst.pickups().len(),
        inst.snapshots().len()
    )
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Check { instrument } => {
            let inst = load_instrument(&instrument)?;
            println!("{}", summary(&inst));
            for net in inst.networks() {
                let off = net.len() - net.enabled_count();
                if off > 0 {
                    println!("{}: {off} of {} modes above Nyquist, disabled", net.name(), net.len());
                }
            }
            Ok(())
        }
        Command::Render {
            instrument,
            out,
            duration,
            sample_rate,
            oversample,
            excite,
            snapshot,
            format,
            seed: _,
        } => {
            if !(duration > 0.0 && duration.is_finite()) {
                return Err(Failure::Invalid(format!("--duration must be positive, got {duration}")));
            }
            let mut inst = load_with_rates(&instrument, sample_rate, oversample)?;
            if let Some(name) = &snapshot {
                recall(&mut inst, name)?;
            }
            let excitations = excite
                .iter()
                .map(|e| e.resolve(&inst))
                .collect::<Result<Vec<_>, _>>()
                .map_err(Failure::Invalid)?;
            let job = RenderJob {
                instrument: inst,
                excitations,
                duration,
                output: out,
                format: match format {
                    Format::F32 => SampleFormat::Float32,
                    Format::I16 => SampleFormat::Int16,
                },
            };
            let report = render(&job).map_err(|e| Failure::Runtime(e.to_string()))?;
            for line in &report.events {
                log::info!("{line}");
            }
            println!(
                "rendered {} frames x {} channels in {:.3} s; peak {:.6}; clipped {}",
                report.frames, report.channels, report.seconds, report.peak, report.clipped
            );
            Ok(())
        }
        Command::Serve {
            instrument,
            port,
            sample_rate,
            oversample,
            duration,
            snapshot,
            out,
        } => {
            if let Some(d) = duration {
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Failure::Invalid(format!("--duration must be positive, got {d}")));
                }
            }
            let mut inst = load_with_rates(&instrument, sample_rate, oversample)?;
            if let Some(name) = &snapshot {
                recall(&mut inst, name)?;
            }
            let sr = inst.rates().sample_rate;
            let (mut engine, hub) = ControlHub::connect(inst);
            let server = ControlServer::bind(("127.0.0.1", port), Arc::clone(&hub))
                .map_err(|e| Failure::Runtime(format!("port {port}: {e}")))?;
            let addr = server.local_addr().map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("listening on {addr}");
            let stop = Arc::new(AtomicBool::new(false));
            let accept = server.spawn(Arc::clone(&stop));
            let limit = duration.map(|d| (d * sr).round() as u64);
            let mut sink = PacedSink::new(sr, limit);
            engine.run_live(&mut sink, &AtomicBool::new(false));
            stop.store(true, std::sync::atomic::Ordering::Relaxed);
            let _ = accept.join();
            for line in engine.events_mut().take() {
                log::info!("{line}");
            }
            if let Some(path) = out {
                save_instrument(engine.instrument(), &path)?;
            }
            Ok(())
        }
        Command::Snapshot { instrument, snapshot } => {
            let inst = load_instrument(&instrument)?;
            match snapshot {
                None => {
                    for (name, s) in inst.snapshots() {
                        println!("{name} {} ({} entries)", s.scope, s.entries.len());
                    }
                }
                Some(name) => {
                    let s = inst
                        .snapshots()
                        .get(&name)
                        .ok_or_else(|| Failure::Invalid(format!("unknown snapshot '{name}'")))?;
                    let file = InstrumentFile {
                        snapshots: vec![s.clone()],
                        ..InstrumentFile::default()
                    };
                    print!("{}", serialize(&file));
                }
            }
            Ok(())
        }
    }
}
