//! Line protocol for live control and metering; see `docs/protocol.md`.
//!
//! Sessions validate every edit against a mirror of the instrument's
//! configuration, then forward it to the audio thread through the bounded
//! [`EditQueue`]. Reads of configuration come from the mirror; reads of
//! running state (energies, state hashes) come from the meter frame the
//! engine publishes each control block.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, TrySendError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::engine::{Engine, EngineLink, MeterFrame};
use crate::etf::{CouplingId, EtfKind};
use crate::instrument::{Instrument, InstrumentError};
use crate::params::{parse_number, NetParam, NodeParam, ParamPath, ParamValue};
use crate::persistence::SnapshotScope;
use crate::scheduler::{ControlEdit, EditQueue};

pub const MAX_METER_HZ: f64 = 60.0;
pub const DEFAULT_PORT: u16 = 7770;

/// Pending push frames per connection before new ones are dropped.
const PUSH_BACKLOG: usize = 8;
const POLL_INTERVAL: Duration = Duration::from_millis(50);

/// Shared control-side state: the instrument mirror, the edit queue and
/// the reading end of the meter buffer.
pub struct ControlHub {
    mirror: Mutex<Instrument>,
    edits: Arc<EditQueue>,
    meters: Mutex<triple_buffer::Output<MeterFrame>>,
}

impl ControlHub {
    /// Creates a hub mirroring `inst` and the link the engine attaches.
    pub fn new(inst: &Instrument) -> (Arc<ControlHub>, EngineLink) {
        let (input, output) = triple_buffer::triple_buffer(&MeterFrame::default());
        let edits = Arc::new(EditQueue::default());
        let hub = ControlHub {
            mirror: Mutex::new(inst.clone()),
            edits: Arc::clone(&edits),
            meters: Mutex::new(output),
        };
        (Arc::new(hub), EngineLink { edits, meters: input })
    }

    /// An engine for `inst` already attached to a new hub.
    pub fn connect(inst: Instrument) -> (Engine, Arc<ControlHub>) {
        let (hub, link) = ControlHub::new(&inst);
        let mut engine = Engine::new(inst);
        engine.attach(link);
        (engine, hub)
    }

    /// The latest published meter frame.
    pub fn meters(&self) -> MeterFrame {
        lock(&self.meters).read().clone()
    }

    pub fn mirror(&self) -> MutexGuard<'_, Instrument> {
        lock(&self.mirror)
    }

    /// Edits lost because the queue was full. The mirror has already
    /// applied them, so a nonzero count means the two may disagree.
    pub fn dropped_edits(&self) -> u64 {
        self.edits.dropped()
    }

    fn submit(&self, edit: ControlEdit) {
        if !self.edits.push(edit) {
            log::warn!("edit queue full; oldest edit dropped");
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn err(code: &str, token: &str, msg: impl std::fmt::Display) -> String {
    format!("ERR {code} {token} {msg}")
}

fn inst_err(token: &str, e: &InstrumentError) -> String {
    err(e.code(), token, e)
}

/// One client's protocol state. Transport-free: feed it lines, send back
/// what it returns.
pub struct Session {
    hub: Arc<ControlHub>,
    meter_hz: Option<f64>,
}

impl Session {
    pub fn new(hub: Arc<ControlHub>) -> Self {
        Session { hub, meter_hz: None }
    }

    /// Active meter subscription rate.
    pub fn subscription(&self) -> Option<f64> {
        self.meter_hz
    }

    /// Replies to one request line. Blank lines get no reply; everything
    /// else gets exactly one `OK`, `VAL` or `ERR` line, except `LIST`,
    /// which sends its `VAL` lines followed by `OK <count>`.
    pub fn handle(&mut self, line: &str) -> Vec<String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some((verb, args)) = words.split_first() else {
            return Vec::new();
        };
        let reply = match verb.to_ascii_uppercase().as_str() {
            "PING" => "OK".to_string(),
            "SET" => self.set(args),
            "GET" => self.get(args),
            "LIST" => return self.list(args),
            "COUPLE" => self.couple(args),
            "SNAP" => self.snap(args),
            "SUB" => self.sub(args),
            "UNSUB" => match args {
                ["meters"] => {
                    self.meter_hz = None;
                    "OK".to_string()
                }
                _ => err("parse", args.first().unwrap_or(verb), "expected UNSUB meters"),
            },
            "MAP" => err("parse", verb, "MAP is reserved"),
            _ => err("parse", verb, "unknown verb"),
        };
        vec![reply]
    }

    fn set(&mut self, args: &[&str]) -> String {
        let [path_text, value_text] = args else {
            return err("parse", args.first().copied().unwrap_or("SET"), "expected SET <path> <value>");
        };
        let path: ParamPath = match path_text.parse() {
            Ok(p) => p,
            Err(_) => return err("badpath", path_text, "unknown path"),
        };
        let value = match ParamValue::parse_for(&path, value_text) {
            Ok(v) => v,
            Err(_) => return err("badvalue", value_text, format!("not a value for {path}")),
        };
        let mut mirror = self.hub.mirror();
        match mirror.set_param(&path, &value) {
            Ok(_) => {
                self.hub.submit(ControlEdit::Set { path, value });
                "OK".to_string()
            }
            Err(e) => inst_err(
                if matches!(e, InstrumentError::BadValue(_) | InstrumentError::Network(_) | InstrumentError::Mode(_)) {
                    value_text
                } else {
                    path_text
                },
                &e,
            ),
        }
    }

    fn get(&self, args: &[&str]) -> String {
        let [path_text] = args else {
            return err("parse", args.first().copied().unwrap_or("GET"), "expected GET <path>");
        };
        let path: ParamPath = match path_text.parse() {
            Ok(p) => p,
            Err(_) => return err("badpath", path_text, "unknown path"),
        };
        let mirror = self.hub.mirror();
        match value_of(&mirror, &self.hub.meters(), &path) {
            Ok(v) => format!("VAL {path} {v}"),
            Err(e) => inst_err(path_text, &e),
        }
    }

    fn list(&self, args: &[&str]) -> Vec<String> {
        let prefix = match args {
            [] => "",
            [p] => p,
            _ => return vec![err("parse", args[1], "expected LIST [prefix]")],
        };
        let mirror = self.hub.mirror();
        let meters = self.hub.meters();
        let mut lines: Vec<String> = mirror
            .list(prefix)
            .into_iter()
            .map(|(path, value)| {
                let value = if path.is_runtime() {
                    value_of(&mirror, &meters, &path).unwrap_or(value)
                } else {
                    value
                };
                format!("VAL {path} {value}")
            })
            .collect();
        lines.push(format!("OK {}", lines.len()));
        lines
    }

    fn couple(&self, args: &[&str]) -> String {
        match args {
            ["ADD" | "add", kind, rest @ ..] => self.couple_add(kind, rest),
            ["DEL" | "del", id] => {
                let Some(id) = id.parse::<u64>().ok() else {
                    return err("parse", id, "expected a coupling id");
                };
                let mut mirror = self.hub.mirror();
                match mirror.remove_coupling(CouplingId(id)) {
                    Ok(_) => {
                        self.hub.submit(ControlEdit::RemoveCoupling(CouplingId(id)));
                        "OK".to_string()
                    }
                    Err(e) => inst_err(&id.to_string(), &e),
                }
            }
            _ => err("parse", args.first().copied().unwrap_or("COUPLE"), "expected COUPLE ADD|DEL"),
        }
    }

    fn couple_add(&self, kind: &str, rest: &[&str]) -> String {
        let mut params = BTreeMap::new();
        let mut rate = None;
        let mut participants_text = Vec::new();
        for token in rest {
            match token.split_once('=') {
                Some((key, value)) => {
                    let Some(v) = parse_number(value) else {
                        return err("badvalue", token, "expected a number");
                    };
                    if key == "rate" {
                        if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                            return err("badvalue", token, "rate must be a positive integer");
                        }
                        rate = Some(v as u32);
                    } else {
                        params.insert(key.to_string(), v);
                    }
                }
                None => participants_text.push(*token),
            }
        }
        let kind = match EtfKind::from_template(kind, &params) {
            Ok(k) => k,
            Err(e) => return err("badvalue", kind, e),
        };
        let mut mirror = self.hub.mirror();
        let mut participants = Vec::with_capacity(participants_text.len());
        for token in participants_text {
            match mirror.parse_participant(token) {
                Ok(p) => participants.push(p),
                Err(e) => return err("unknownid", token, e),
            }
        }
        let divisor = rate.unwrap_or(mirror.rates().default_coupling_divisor);
        match mirror.add_coupling(kind, participants, divisor) {
            Ok(id) => {
                let coupling = mirror.coupling(id).expect("just added").clone();
                self.hub.submit(ControlEdit::AddCoupling(coupling));
                format!("OK {id}")
            }
            Err(e) => inst_err(rest.first().copied().unwrap_or("COUPLE"), &e),
        }
    }

    fn snap(&self, args: &[&str]) -> String {
        match args {
            ["SAVE" | "save", name, scope @ ..] => {
                let scope = if scope.is_empty() {
                    Some(SnapshotScope::Instrument)
                } else {
                    SnapshotScope::parse(&scope.join(" "))
                };
                let Some(scope) = scope else {
                    return err("parse", args[2], "expected instrument, network <name> or window <name>");
                };
                let mut mirror = self.hub.mirror();
                let snapshot = match mirror.capture_snapshot(name, scope) {
                    Ok(s) => s,
                    Err(e) => return inst_err(name, &e),
                };
                let count = snapshot.entries.len();
                if let Err(e) = mirror.insert_snapshot_replacing(snapshot.clone()) {
                    return inst_err(name, &e);
                }
                self.hub.submit(ControlEdit::StoreSnapshot(snapshot));
                format!("OK {count}")
            }
            ["LOAD" | "load", name] => {
                let mut mirror = self.hub.mirror();
                let recall = match mirror.recall_snapshot(name) {
                    Ok(r) => r,
                    Err(e) => return inst_err(name, &e),
                };
                let mut applied = 0;
                let mut skipped = recall.stale;
                for (path, value) in recall.edits {
                    match mirror.set_param(&path, &value) {
                        Ok(_) => {
                            self.hub.submit(ControlEdit::Set { path, value });
                            applied += 1;
                        }
                        Err(_) => skipped.push(path.to_string()),
                    }
                }
                if skipped.is_empty() {
                    format!("OK {applied}")
                } else {
                    format!("OK {applied} stale {}", skipped.join(" "))
                }
            }
            _ => err("parse", args.first().copied().unwrap_or("SNAP"), "expected SNAP SAVE|LOAD <name>"),
        }
    }

    fn sub(&mut self, args: &[&str]) -> String {
        let ["meters", hz] = args else {
            return err("parse", args.first().copied().unwrap_or("SUB"), "expected SUB meters <hz>");
        };
        match parse_number(hz) {
            Some(v) if v > 0.0 && v <= MAX_METER_HZ => {
                self.meter_hz = Some(v);
                "OK".to_string()
            }
            _ => err("badvalue", hz, format!("rate must be in (0, {MAX_METER_HZ}]")),
        }
    }

    /// One meter push: a header line then one line per enabled node.
    pub fn meter_lines(&self, dropped: u64) -> Vec<String> {
        let meters = self.hub.meters();
        let mirror = self.hub.mirror();
        let mut lines = vec![format!("MTR @frame {} dropped {dropped}", meters.frame)];
        let mut flat = 0;
        for (i, count) in meters.layout.iter().enumerate() {
            let name = mirror.network(i).map(|n| n.name().to_string());
            for k in 0..*count {
                if let (Some(name), true) = (&name, meters.enabled[flat + k]) {
                    lines.push(format!(
                        "MTR net.{name}.node.{k}.energy {}",
                        ParamValue::Number(meters.energies[flat + k])
                    ));
                }
            }
            flat += count;
        }
        lines
    }
}

/// Resolves a path, taking running state from the meter frame when the
/// frame matches the mirror's layout.
fn value_of(mirror: &Instrument, meters: &MeterFrame, path: &ParamPath) -> Result<ParamValue, InstrumentError> {
    let fallback = mirror.get_param(path)?;
    let layout: Vec<usize> = mirror.networks().iter().map(|n| n.len()).collect();
    if !path.is_runtime() || meters.layout != layout {
        return Ok(fallback);
    }
    let index = |net: &str| mirror.network_index(net).expect("resolved above");
    Ok(match path {
        ParamPath::StateHash => ParamValue::Text(format!("{:016x}", meters.state_hash)),
        ParamPath::Net {
            net,
            param: NetParam::StateHash,
        } => ParamValue::Text(format!("{:016x}", meters.network_hashes[index(net)])),
        ParamPath::Node {
            net,
            node,
            param: NodeParam::Energy,
        } => {
            let offset: usize = layout[..index(net)].iter().sum();
            ParamValue::Number(meters.energies[offset + node])
        }
        _ => fallback,
    })
}

enum Outbound {
    Reply(Vec<String>),
    Push(Vec<String>),
}

/// Accepts protocol connections until `stop` is set.
pub struct ControlServer {
    listener: TcpListener,
    hub: Arc<ControlHub>,
}

impl ControlServer {
    pub fn bind(addr: impl ToSocketAddrs, hub: Arc<ControlHub>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(ControlServer { listener, hub })
    }

    pub fn local_addr(&self) -> std::io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    /// Runs the accept loop on a new thread.
    pub fn spawn(self, stop: Arc<AtomicBool>) -> JoinHandle<()> {
        std::thread::spawn(move || self.run(&stop))
    }

    pub fn run(&self, stop: &Arc<AtomicBool>) {
        let mut sessions = Vec::new();
        while !stop.load(Ordering::Relaxed) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    log::info!("control connection from {peer}");
                    let hub = Arc::clone(&self.hub);
                    let stop = Arc::clone(stop);
                    sessions.push(std::thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, hub, &stop) {
                            log::info!("control connection {peer} closed: {e}");
                        }
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL_INTERVAL),
                Err(e) => log::warn!("accept failed: {e}"),
            }
            sessions.retain(|h: &JoinHandle<()>| !h.is_finished());
        }
        for handle in sessions {
            let _ = handle.join();
        }
    }
}

fn serve_connection(stream: TcpStream, hub: Arc<ControlHub>, stop: &AtomicBool) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let writer_stream = stream.try_clone()?;
    let (tx, rx) = sync_channel::<Outbound>(PUSH_BACKLOG);
    let writer = std::thread::spawn(move || write_loop(writer_stream, rx));

    let mut session = Session::new(hub);
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    let mut next_push: Option<Instant> = None;
    let mut dropped = 0u64;
    let result = loop {
        if stop.load(Ordering::Relaxed) {
            break Ok(());
        }
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => break Ok(()),
            Ok(_) if line.ends_with(b"\n") => {
                let text = String::from_utf8_lossy(&line).into_owned();
                line.clear();
                let reply = session.handle(&text);
                if !reply.is_empty() && tx.send(Outbound::Reply(reply)).is_err() {
                    break Ok(());
                }
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => break Err(e),
        }
        match session.subscription() {
            None => next_push = None,
            Some(hz) => {
                let now = Instant::now();
                let due = *next_push.get_or_insert(now);
                if now >= due {
                    match tx.try_send(Outbound::Push(session.meter_lines(dropped))) {
                        Ok(()) => {}
                        Err(TrySendError::Full(_)) => dropped += 1,
                        Err(TrySendError::Disconnected(_)) => break Ok(()),
                    }
                    next_push = Some(due + Duration::from_secs_f64(1.0 / hz));
                }
            }
        }
    };
    drop(tx);
    let _ = writer.join();
    result
}

fn write_loop(mut stream: TcpStream, rx: Receiver<Outbound>) {
    for item in rx {
        let (Outbound::Reply(lines) | Outbound::Push(lines)) = item;
        let mut text = lines.join("\n");
        text.push('\n');
        if stream.write_all(text.as_bytes()).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

/// Sends request lines and collects replies; handy for scripts and tests.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        Ok(Client {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn send(&mut self, line: &str) -> std::io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")
    }

    /// Next line from the server, without the newline.
    pub fn read_line(&mut self) -> std::io::Result<String> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        Ok(line.trim_end().to_string())
    }

    /// Sends a request and returns its reply, skipping meter pushes.
    /// For `LIST`, returns every line up to and including `OK <n>`.
    pub fn request(&mut self, line: &str) -> std::io::Result<Vec<String>> {
        self.send(line)?;
        let is_list = line.split_whitespace().next().is_some_and(|v| v.eq_ignore_ascii_case("LIST"));
        let mut out = Vec::new();
        loop {
            let reply = self.read_line()?;
            if reply.starts_with("MTR ") {
                continue;
            }
            let done = !is_list || !reply.starts_with("VAL ");
            out.push(reply);
            if done {
                return Ok(out);
            }
        }
    }
}
