// Drives an engine through the line protocol without a socket: each
// request is answered from the control mirror, and edits reach the audio
// side at the next block boundary.

use modalnet::control::{ControlHub, Session};
use modalnet::engine::{Excitation, Target};
use modalnet::Instrument;

const TEXT: &str = "\
[network s]
template = string
modes = 12
f0 = 196
damp = 1
";

fn main() {
    let (mut engine, hub) = ControlHub::connect(Instrument::from_text(TEXT).unwrap());
    let mut session = Session::new(hub);
    engine
        .schedule(Excitation::strike(Target::Network { network: 0, x: Some(vec![0.2]) }, 1e-3, 0))
        .unwrap();

    let script = [
        "PING",
        "SET net.s.f0 220",
        "SET net.s.node.3.f0 +4d",
        "COUPLE ADD linear s.0 s.1 k=0.0002",
        "SNAP SAVE bright window s",
        "LIST net.s.node.3",
        "GET net.s.node.0.energy",
        "SET net.s.f0 banana",
    ];
    for request in script {
        println!("> {request}");
        for reply in session.handle(request) {
            println!("< {reply}");
        }
        engine.render(256);
    }
    println!("engine fundamental {}", engine.instrument().networks()[0].macro_params().fundamental);
}
