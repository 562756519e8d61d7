// A cymbal: membrane-tuned modes linked by the template's saturating
// couplings, struck hard and rendered to a stereo file.

use modalnet::engine::{render, Excitation, SampleFormat, Target};
use modalnet::{Instrument, Level, MacroParams, Pickup, RateConfig, RenderJob, Template};

fn main() {
    let mut inst = Instrument::new(RateConfig {
        sample_rate: 48000.0,
        oversample: 2,
        ..RateConfig::default()
    });
    let params = MacroParams {
        fundamental: 280.0,
        total_mass: 1.0,
        global_damping: 0.8,
        stretch: 0.0,
    };
    inst.add_network_with_defaults("c", Template::Cymbal, 24, params, Level::L2)
        .unwrap();
    println!("{} default couplings", inst.registry().len());
    inst.add_pickup(Pickup::location("near", 0, vec![0.15, 0.0], 1.0)).unwrap();
    inst.add_pickup(Pickup::location("far", 0, vec![0.0, 0.7], 1.0)).unwrap();

    let output = std::env::temp_dir().join("modalnet-cymbal.wav");
    let report = render(&RenderJob {
        instrument: inst,
        excitations: vec![Excitation::strike(
            Target::Network { network: 0, x: Some(vec![0.4, 0.1]) },
            3e-6,
            0,
        )],
        duration: 3.0,
        output: output.clone(),
        format: SampleFormat::Float32,
    })
    .unwrap();
    println!("{}: peak {:.4}, clipped {}", output.display(), report.peak, report.clipped);
}
