// A single undamped node: pitch from zero crossings and the energy it
// keeps over ten seconds.

use modalnet::engine::{Engine, Excitation, Target};
use modalnet::mode::energy_of;
use modalnet::{Instrument, Level, MacroParams, NodeRef, RateConfig, Template};

fn main() {
    let mut inst = Instrument::new(RateConfig::default());
    let params = MacroParams {
        fundamental: 440.0,
        total_mass: 1.0,
        global_damping: 0.0,
        stretch: 0.0,
    };
    inst.add_network("a", Template::Custom, 1, params, Level::L1).unwrap();
    let sr = inst.rates().sample_rate;

    let mut engine = Engine::new(inst);
    engine
        .schedule(Excitation::strike(Target::Node(NodeRef::new(0, 0)), 1.0, 0))
        .unwrap();
    let out = engine.render_mono((10.0 * sr) as usize);

    let crossings: Vec<f64> = out
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
        .map(|(n, w)| n as f64 + w[0] / (w[0] - w[1]))
        .collect();
    let periods = (crossings.len() - 1) as f64;
    let hz = periods * sr / (crossings.last().unwrap() - crossings[0]);

    let node = &engine.instrument().networks()[0].nodes()[0];
    let energy = energy_of(&node.state, &node.params, sr);
    println!("measured {hz:.3} Hz, energy after 10 s {energy:.12}");
}
