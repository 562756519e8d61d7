//! Modal networks: coupled resonators exchanging energy through transfer
//! functions, rendered sample by sample and editable while running.
//!
//! The layers, bottom up:
//! - [`mode`]: a single damped oscillator node and its energy accounting.
//! - [`etf`]: energy transfer functions between nodes and networks.
//! - [`network`]: templated groups of nodes with macro parameters.
//! - [`scheduler`]: per-sample evaluation of couplings and node steps.
//! - [`engine`]: excitation, pickups, oversampling and audio output.
//! - [`persistence`]: the instrument file format and snapshots.
//! - [`control`]: the line protocol for live editing and metering.
//! - [`cli`]: the `modalnet` command.

pub mod cli;
pub mod control;
pub mod engine;
pub mod etf;
pub mod instrument;
pub mod mode;
pub mod network;
pub mod params;
pub mod persistence;
pub mod scheduler;

pub use engine::{Engine, Excitation, Pickup, PickupTap, RenderJob, Target};
pub use etf::{Coupling, CouplingId, EtfKind, Participant};
pub use instrument::{Instrument, InstrumentError, NodeRef};
pub use mode::{Level, ModeParams, ModeState};
pub use network::{MacroParams, Network, Template};
pub use params::{ParamPath, ParamValue};
pub use persistence::{parse_instrument, serialize, InstrumentFile, Snapshot, SnapshotScope};
pub use scheduler::{RateConfig, Scheduler};
