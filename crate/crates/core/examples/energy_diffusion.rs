// Two detuned nodes joined by a linear energy coupling. The struck node
// hands energy to its neighbour until both hold half.

use modalnet::engine::{Engine, Excitation, Target};
use modalnet::{EtfKind, Instrument, Level, MacroParams, NodeRef, Participant, RateConfig, Template};

fn main() {
    let mut inst = Instrument::new(RateConfig::default());
    for (name, f0) in [("low", 300.0), ("high", 470.0)] {
        let params = MacroParams {
            fundamental: f0,
            total_mass: 1.0,
            global_damping: 0.0,
            stretch: 0.0,
        };
        inst.add_network(name, Template::Custom, 1, params, Level::L1).unwrap();
    }
    let pair = vec![
        Participant::Node(NodeRef::new(0, 0)),
        Participant::Node(NodeRef::new(1, 0)),
    ];
    inst.add_coupling(EtfKind::LinearDiffusive { k: 1e-4 }, pair, 1).unwrap();

    let mut engine = Engine::new(inst);
    engine
        .schedule(Excitation::strike(Target::Node(NodeRef::new(0, 0)), 1.0, 0))
        .unwrap();
    engine.render(1);
    println!("{:>6}  {:>10}  {:>10}  {:>12}", "ms", "low", "high", "total");
    for step in 0..=10 {
        let inst = engine.instrument();
        let (a, b) = (inst.node_energy(NodeRef::new(0, 0)), inst.node_energy(NodeRef::new(1, 0)));
        engine.render(1);
    println!("{:>6}  {a:>10.6}  {b:>10.6}  {:>12.9}", step * 50, a + b);
        engine.render(2205);
    }
}
