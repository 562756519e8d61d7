// The same struck node at each level: L1 linear, L2 phase-aware
// coupling, L3 feed-driven detuning and L4 Duffing stiffening.

use modalnet::engine::{Engine, Excitation, Target};
use modalnet::{EtfKind, Instrument, Level, MacroParams, NodeRef, ParamPath, Participant, RateConfig, Template};

fn peak_hz(signal: &[f64], sr: f64) -> f64 {
    let crossings: Vec<f64> = signal
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] < 0.0 && w[1] >= 0.0)
        .map(|(n, w)| n as f64 + w[0] / (w[0] - w[1]))
        .collect();
    (crossings.len() - 1) as f64 * sr / (crossings.last().unwrap() - crossings[0])
}

fn main() {
    let sr = 44100.0;
    for level in [Level::L1, Level::L2, Level::L3, Level::L4] {
        let mut inst = Instrument::new(RateConfig::default());
        let params = MacroParams {
            fundamental: 500.0,
            total_mass: 1.0,
            global_damping: 0.5,
            stretch: 0.0,
        };
        inst.add_network("n", Template::Custom, 2, params, level).unwrap();
        let pair = vec![
            Participant::Node(NodeRef::new(0, 0)),
            Participant::Node(NodeRef::new(0, 1)),
        ];
        let kind = match level {
            Level::L1 => EtfKind::LinearDiffusive { k: 1e-6 },
            Level::L2 => EtfKind::PhaseWeighted { k: 1e-6 },
            _ => EtfKind::DetuningLinear { k: 1e-6, kappa: 1e7 },
        };
        inst.add_coupling(kind, pair, 1).unwrap();
        if level == Level::L4 {
            let path: ParamPath = "net.n.duffing".parse().unwrap();
            inst.set_param_text(&path, "0.1").unwrap();
        }
        let mut engine = Engine::new(inst);
        engine
            .schedule(Excitation::strike(Target::Node(NodeRef::new(0, 0)), 5e-3, 0))
            .unwrap();
        let out = engine.render_mono(sr as usize / 2);
        let inst = engine.instrument();
        println!(
            "{:?}: {:8.3} Hz, node 1 holds {:.3e}",
            level,
            peak_hz(&out, sr),
            inst.node_energy(NodeRef::new(0, 1))
        );
    }
}
