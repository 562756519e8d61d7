// Plucks a stiff string near one end and writes two seconds of audio.

use modalnet::engine::{render, Excitation, SampleFormat, Target};
use modalnet::{Instrument, Level, MacroParams, Pickup, RateConfig, RenderJob, Template};

fn main() {
    let mut inst = Instrument::new(RateConfig {
        oversample: 2,
        ..RateConfig::default()
    });
    let params = MacroParams {
        fundamental: 110.0,
        total_mass: 1.0,
        global_damping: 1.5,
        stretch: 2e-4,
    };
    inst.add_network("s", Template::String, 40, params, Level::L1).unwrap();
    inst.add_pickup(Pickup::location("bridge", 0, vec![0.05], 1.0)).unwrap();

    let output = std::env::temp_dir().join("modalnet-string-pluck.wav");
    let job = RenderJob {
        instrument: inst,
        excitations: vec![Excitation::strike(
            Target::Network { network: 0, x: Some(vec![0.18]) },
            3e-6,
            0,
        )],
        duration: 2.0,
        output: output.clone(),
        format: SampleFormat::Float32,
    };
    let report = render(&job).unwrap();
    println!(
        "{}: {} frames, peak {:.4}, {:.3} s",
        output.display(),
        report.frames,
        report.peak,
        report.seconds
    );
}
