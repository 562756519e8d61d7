use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use modalnet::params::F0Value;
use modalnet::persistence::{
    canonicalize, load_instrument, save_instrument, CouplingDecl, NetworkDecl, NodeDecl, ParticipantDecl,
    PersistError, PickupDecl, PickupMode, RatesDecl,
};
use modalnet::{parse_instrument, serialize, Instrument, InstrumentFile, Snapshot, SnapshotScope, Template};
use proptest::prelude::*;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn corpus(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "mnet"))
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    files.sort();
    assert!(!files.is_empty());
    files
}

fn without_comments(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect()
}

#[test]
fn golden_files_are_canonical() {
    for (path, text) in corpus(&data("")) {
        let want = without_comments(&text);
        assert_eq!(canonicalize(&text).unwrap(), want, "{}", path.display());
        let live = Instrument::from_text(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let written = live.to_text();
        // Live instruments write every value, so only fully explicit files
        // come back verbatim.
        if text.contains("[rates]") {
            assert_eq!(written, want, "{} via a live instrument", path.display());
        }
        assert_eq!(canonicalize(&written).unwrap(), written);
        assert_eq!(Instrument::from_text(&written).unwrap().to_text(), written);
    }
}

/// Each error file starts with `# expect: <kind> <line> [<col>]`.
#[test]
fn error_corpus_reports_kind_and_position() {
    for (path, text) in corpus(&data("errors")) {
        let header = text.lines().next().unwrap().strip_prefix("# expect: ").unwrap();
        let words: Vec<&str> = header.split_whitespace().collect();
        let nums: Vec<usize> = words[1..].iter().map(|w| w.parse().unwrap()).collect();
        let err = parse_instrument(&text).expect_err(&path.display().to_string());
        let got = match &err {
            PersistError::Syntax { line, col, .. } => ("syntax", vec![*line, *col]),
            PersistError::UnknownKey { line, .. } => ("unknownkey", vec![*line]),
            PersistError::Range { line, .. } => ("range", vec![*line]),
            other => panic!("{}: unexpected {other:?}", path.display()),
        };
        assert_eq!((got.0, &got.1), (words[0], &nums), "{}: {err}", path.display());
        assert!(err.to_string().starts_with(&format!("line {}", got.1[0])));
    }
}

#[test]
fn semantic_errors_surface_on_load() {
    let overlapping = "[network s]\ntemplate = string\nmodes = 2\n\n[coupling 0]\nkind = linear\nparticipants = s s.0\n";
    assert!(parse_instrument(overlapping).is_ok());
    assert!(matches!(Instrument::from_text(overlapping), Err(PersistError::Instrument(_))));

    let unknown_net = "[network s]\ntemplate = string\nmodes = 2\n\n[coupling 0]\nkind = linear\nparticipants = s.0 q.1\n";
    let err = Instrument::from_text(unknown_net).unwrap_err();
    assert!(matches!(&err, PersistError::Instrument(e) if e.code() == "badpath"), "{err}");
}

#[test]
fn save_and_load_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let inst = load_instrument(&data("ensemble.mnet")).unwrap();
    assert_eq!(inst.networks().len(), 2);
    assert_eq!(inst.couplings().count(), 4);
    assert_eq!(inst.snapshots().len(), 2);
    let out = dir.path().join("copy.mnet");
    save_instrument(&inst, &out).unwrap();
    assert_eq!(fs::read_to_string(&out).unwrap(), inst.to_text());

    let missing = load_instrument(&dir.path().join("absent.mnet")).unwrap_err();
    assert!(matches!(missing, PersistError::Io { .. }));
    let unwritable = save_instrument(&inst, &dir.path().join("no/such/dir.mnet")).unwrap_err();
    assert!(matches!(unwritable, PersistError::Io { .. }));
}

#[test]
fn loaded_snapshots_recall_and_report_stale_entries() {
    let mut inst = load_instrument(&data("ensemble.mnet")).unwrap();
    let recall = inst.recall_snapshot("bright").unwrap();
    assert_eq!(recall.edits.len(), 3);
    assert!(recall.stale.is_empty());

    let path = "net.bar.modes".parse().unwrap();
    inst.set_param_text(&path, "2").unwrap();
    let recall = inst.recall_snapshot("bright").unwrap();
    assert_eq!(recall.edits.len(), 2);
    assert_eq!(recall.stale, vec!["net.bar.node.3.f0".to_string()]);
}

fn number() -> impl Strategy<Value = f64> {
    prop_oneof![(1u32..2000).prop_map(f64::from), 0.001f64..1000.0]
}

fn unit() -> impl Strategy<Value = f64> {
    0.0f64..=1.0
}

fn node_decl() -> impl Strategy<Value = NodeDecl> {
    (
        proptest::option::of((number(), 0usize..3)),
        proptest::option::of(number()),
        proptest::option::of(number()),
    )
        .prop_map(|(f0, mass, damp)| NodeDecl {
            f0: f0.map(|(value, repr)| {
                let text = format!("{value}{}", ['r', 'd', 'h'][repr]);
                text.parse::<F0Value>().unwrap()
            }),
            mass,
            damp,
            duffing: None,
        })
}

fn network_decl(name: String) -> impl Strategy<Value = NetworkDecl> {
    (
        0usize..4,
        1usize..6,
        proptest::option::of(number()),
        proptest::option::of(number()),
        proptest::option::of(number()),
        proptest::option::of(0.0f64..0.01),
        proptest::option::of(1u8..=4),
        proptest::collection::btree_map(0usize..6, node_decl(), 0..3),
    )
        .prop_map(move |(t, modes, f0, mass, damp, stretch, level, nodes)| NetworkDecl {
            name: name.clone(),
            template: Template::ALL[t],
            modes,
            f0,
            mass,
            damp,
            stretch,
            level,
            duffing: None,
            nodes: nodes
                .into_iter()
                .filter(|(k, n)| *k < modes && *n != NodeDecl::default())
                .collect(),
        })
}

fn participant(nets: &[NetworkDecl]) -> BoxedStrategy<ParticipantDecl> {
    let choices: Vec<(String, usize)> = nets.iter().map(|n| (n.name.clone(), n.modes)).collect();
    (0..choices.len(), 0usize..6, proptest::option::of(unit()), any::<bool>())
        .prop_map(move |(i, node, x, whole)| {
            let (net, modes) = choices[i].clone();
            if whole {
                ParticipantDecl::Network { net, location: x.map(|x| vec![x]) }
            } else {
                ParticipantDecl::Node { net, node: node % modes }
            }
        })
        .boxed()
}

fn coupling_decl(nets: Vec<NetworkDecl>) -> BoxedStrategy<CouplingDecl> {
    let first = nets[0].name.clone();
    (
        0usize..6,
        proptest::collection::vec(participant(&nets), 2..4),
        number(),
        number(),
        proptest::option::of(1u32..9),
    )
        .prop_map(move |(kind, mut participants, a, b, rate)| {
            let names: &[&str] = match kind {
                0 | 1 | 4 => &["k"],
                2 => &["k", "kappa"],
                3 => &["k", "s"],
                _ => &["e_max"],
            };
            if kind == 5 {
                participants = vec![ParticipantDecl::Network { net: first.clone(), location: None }];
            }
            let params: BTreeMap<String, f64> = names.iter().map(|n| n.to_string()).zip([a, b]).collect();
            CouplingDecl {
                id: 0,
                kind: modalnet::etf::TEMPLATE_NAMES[kind].to_string(),
                participants,
                params,
                rate,
            }
        })
        .boxed()
}

fn pickup_decl(nets: Vec<NetworkDecl>) -> BoxedStrategy<PickupDecl> {
    (0usize..3, 0..nets.len(), unit(), proptest::collection::vec(number(), 1..5), proptest::option::of(number()))
        .prop_map(move |(mode, net, x, weights, gain)| {
            let mode = [PickupMode::Sum, PickupMode::Location, PickupMode::Weights][mode];
            PickupDecl {
                name: String::new(),
                mode,
                net: (mode == PickupMode::Location).then(|| nets[net].name.clone()),
                x: (mode == PickupMode::Location).then(|| vec![x]),
                weights: (mode == PickupMode::Weights).then_some(weights),
                gain,
            }
        })
        .boxed()
}

fn instrument_file() -> impl Strategy<Value = InstrumentFile> {
    let rates = proptest::option::of(
        (
            proptest::option::of(prop_oneof![Just(44100.0), Just(48000.0), 8000.0f64..96000.0]),
            proptest::option::of(1u32..5),
            proptest::option::of(1u32..512),
            proptest::option::of(1u32..9),
        )
            .prop_map(|(sample_rate, oversample, control_block, coupling_divisor)| RatesDecl {
                sample_rate,
                oversample,
                control_block,
                coupling_divisor,
            }),
    );
    (1usize..4, rates)
        .prop_flat_map(|(count, rates)| {
            let nets: Vec<_> = (0..count).map(|i| network_decl(format!("n{i}"))).collect();
            (nets, Just(rates))
        })
        .prop_flat_map(|(nets, rates)| {
            let couplings = proptest::collection::vec(coupling_decl(nets.clone()), 0..4);
            let pickups = proptest::collection::vec(pickup_decl(nets.clone()), 0..3);
            let snapshots = proptest::collection::vec((0..nets.len(), number(), number()), 0..3);
            (Just(nets), Just(rates), couplings, pickups, snapshots)
        })
        .prop_map(|(networks, rates, mut couplings, mut pickups, snaps)| {
            for (i, c) in couplings.iter_mut().enumerate() {
                c.id = 3 * i as u64 + 1;
            }
            for (i, p) in pickups.iter_mut().enumerate() {
                p.name = format!("p{i}");
            }
            let snapshots = snaps
                .into_iter()
                .enumerate()
                .map(|(i, (net, f0, damp))| {
                    let name = &networks[net].name;
                    Snapshot {
                        name: format!("s{i}"),
                        scope: SnapshotScope::Network(name.clone()),
                        entries: [
                            (format!("net.{name}.f0"), serialize_number(f0)),
                            (format!("net.{name}.damp"), serialize_number(damp)),
                        ]
                        .into_iter()
                        .collect(),
                    }
                })
                .collect();
            InstrumentFile {
                format_version: 1,
                rates,
                networks,
                couplings,
                pickups,
                snapshots,
            }
        })
}

fn serialize_number(v: f64) -> String {
    modalnet::params::Num(v).to_string()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn files_round_trip(file in instrument_file()) {
        let text = serialize(&file);
        let parsed = parse_instrument(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(&parsed, &file);
        prop_assert_eq!(serialize(&parsed), text);
    }
}
