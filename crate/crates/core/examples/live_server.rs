// Runs the TCP control server beside a real-time paced engine for one
// second and talks to it from a client.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use modalnet::control::{Client, ControlHub, ControlServer};
use modalnet::engine::{Excitation, PacedSink, Target};
use modalnet::Instrument;

const TEXT: &str = "\
[network bell]
template = cymbal
modes = 8
f0 = 330
damp = 2
";

fn main() {
    let inst = Instrument::from_text(TEXT).unwrap();
    let sr = inst.rates().sample_rate;
    let (mut engine, hub) = ControlHub::connect(inst);
    let stop = Arc::new(AtomicBool::new(false));
    let server = ControlServer::bind("127.0.0.1:0", hub).unwrap();
    let addr = server.local_addr().unwrap();
    let accept = server.spawn(Arc::clone(&stop));

    let audio = thread::spawn(move || {
        engine
            .schedule(Excitation::strike(Target::Network { network: 0, x: None }, 1e-2, 0))
            .unwrap();
        engine.run_live(&mut PacedSink::new(sr, Some(sr as u64)), &AtomicBool::new(false));
        engine
    });

    let mut client = Client::connect(addr).unwrap();
    println!("connected to {addr}");
    for request in ["PING", "SET net.bell.damp 6", "SUB meters 20"] {
        println!("> {request}\n< {}", client.request(request).unwrap().join("\n< "));
    }
    for _ in 0..4 {
        println!("  {}", client.read_line().unwrap());
    }
    println!("> UNSUB meters\n< {}", client.request("UNSUB meters").unwrap().join(""));

    let engine = audio.join().unwrap();
    stop.store(true, Ordering::Relaxed);
    accept.join().unwrap();
    println!("final energy {:.3e}", engine.instrument().total_energy());
}
