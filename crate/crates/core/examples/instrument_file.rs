// Loads an instrument from text, edits it, stores and recalls a
// snapshot, and prints the canonical file.

use modalnet::{Instrument, ParamPath, SnapshotScope};

const TEXT: &str = "\
format_version = 1

[network bar]
template = bar
modes = 4
f0 = 220
level = 2
node.2.f0 = +3d   # a little sharp

[network drum]
template = membrane
modes = 3
f0 = 110

[coupling 0]
kind = phase
participants = bar drum@0.3
k = 0.0001

[pickup]
mode = location
net = bar
x = 0.1
";

fn set(inst: &mut Instrument, path: &str, value: &str) {
    let path: ParamPath = path.parse().unwrap();
    inst.set_param_text(&path, value).unwrap();
}

fn main() {
    let mut inst = Instrument::from_text(TEXT).unwrap();
    inst.save_snapshot("original", SnapshotScope::Window("bar".into())).unwrap();

    set(&mut inst, "net.bar.f0", "247");
    set(&mut inst, "net.bar.node.1.f0", "2.9r");
    set(&mut inst, "coupling.0.k", "0.0004");

    let recall = inst.recall_snapshot("original").unwrap();
    println!("recalling 'original' changes {} values:", recall.edits.len());
    for (path, value) in &recall.edits {
        println!("  {path} = {value}");
    }
    print!("\n{}", inst.to_text());
}
