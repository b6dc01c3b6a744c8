use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ep_core::inference::{assign_batch, write_assignments_csv};
use ep_core::stream::read_all;
use ep_core::synth::distance_bands;
use ep_core::{Basis, Dictionary};
use tempfile::TempDir;

fn ep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ep"))
        .args(args)
        .env_remove("EP_THREADS")
        .output()
        .expect("spawn ep")
}

fn ok(args: &[&str]) -> String {
    let out = ep(args);
    assert!(
        out.status.success(),
        "ep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap_or_default().to_string()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Five-cluster fixture plus the percentile that puts theta in the gap.
    fn fixture(&self, seed: u64) -> (PathBuf, f64) {
        let stream = self.path(&format!("fixture{seed}.epas"));
        let labels = self.path(&format!("fixture{seed}.labels"));
        let seed = seed.to_string();
        ok(&[
            "synth", "--clusters", "5", "--dim", "64", "--n", "6000", "--seed", &seed, "--out", p(&stream),
            "--labels", p(&labels),
        ]);
        let (_, rows) = read_all(fs::File::open(&stream).unwrap()).unwrap();
        let labels: Vec<u32> = fs::read_to_string(&labels)
            .unwrap()
            .lines()
            .map(|l| l.parse().unwrap())
            .collect();
        let bands = distance_bands(&rows[..2000 * 64], 64, &labels[..2000]).unwrap();
        (stream, bands.gap_percentile().expect("separated fixture"))
    }

    fn build(&self, stream: &Path, percentile: f64, out: &str) -> (PathBuf, String) {
        let dict = self.path(out);
        let stdout = ok(&[
            "build", "--stream", p(stream), "--p", &percentile.to_string(), "--budget", "2000", "--batch", "256",
            "--out", p(&dict),
        ]);
        (dict, stdout)
    }
}

#[test]
fn build_recovers_five_clusters() {
    let ws = Workspace::new();
    let (stream, pct) = ws.fixture(1);
    let (dict, stdout) = ws.build(&stream, pct, "d.epdc");
    let d = Dictionary::load_from_path(&dict).unwrap();
    assert_eq!(d.len(), 5);
    assert!(d.saturated);
    assert!(stdout.starts_with("K=5 "), "{stdout}");
    for field in ["tokens=", "theta=", "saturated=true", "seconds="] {
        assert!(stdout.contains(field), "{stdout}");
    }
}

#[test]
fn identical_invocations_write_identical_files() {
    let ws = Workspace::new();
    let (stream, pct) = ws.fixture(2);
    let (a, _) = ws.build(&stream, pct, "a.epdc");
    let (b, _) = ws.build(&stream, pct, "b.epdc");
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn assign_csv_matches_library() {
    let ws = Workspace::new();
    let (stream, pct) = ws.fixture(3);
    let (dict, _) = ws.build(&stream, pct, "d.epdc");
    let probe = ws.path("probe.epas");
    ok(&["synth", "--clusters", "5", "--dim", "64", "--n", "300", "--seed", "3", "--out", p(&probe)]);
    let csv = ws.path("a.csv");
    ok(&[
        "assign", "--dict", p(&dict), "--stream", p(&probe), "--basis", "exemplar", "--out", p(&csv),
    ]);

    let d = Dictionary::load_from_path(&dict).unwrap();
    let (_, rows) = read_all(fs::File::open(&probe).unwrap()).unwrap();
    let mut expected = Vec::new();
    write_assignments_csv(&mut expected, 0, &assign_batch(&d, &rows, Basis::Exemplar).unwrap()).unwrap();
    let got = fs::read(&csv).unwrap();
    assert_eq!(String::from_utf8(got).unwrap(), String::from_utf8(expected).unwrap());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 301);
}

#[test]
fn csv_schemas_are_stable() {
    let ws = Workspace::new();
    let (stream, pct) = ws.fixture(4);
    let (a, _) = ws.build(&stream, pct, "a.epdc");
    let shuffled = ws.path("shuffled.epas");
    ok(&["shuffle", "--stream", p(&stream), "--seed", "9", "--out", p(&shuffled)]);
    let trace = ws.path("trace.csv");
    let b = ws.path("b.epdc");
    ok(&[
        "build", "--stream", p(&shuffled), "--p", &pct.to_string(), "--batch", "256", "--trace", p(&trace),
        "--out", p(&b),
    ]);
    let tokens = ws.path("tokens.txt");
    let scores = ws.path("scores.txt");
    let n = 6000;
    fs::write(&tokens, (0..n).map(|i| format!("{}\n", i % 37)).collect::<String>()).unwrap();
    fs::write(&scores, (0..n).map(|i| format!("{}\n", (i % 3) as f64 / 2.0)).collect::<String>()).unwrap();

    let out = |name: &str| ws.path(name);
    ok(&["assign", "--dict", p(&a), "--stream", p(&stream), "--out", p(&out("assign.csv"))]);
    ok(&["encode", "--dict", p(&a), "--stream", p(&stream), "--basis", "mean", "--out", p(&out("codes.csv"))]);
    ok(&["match", "--a", p(&a), "--b", p(&b), "--out", p(&out("match.csv"))]);
    ok(&["cross-tab", "--a", p(&a), "--b", p(&b), "--out", p(&out("cross.csv"))]);
    ok(&[
        "stability", "--dict", p(&a), p(&b), "--out", p(&out("stab.csv")), "--summary", p(&out("stab_summary.csv")),
    ]);
    ok(&[
        "tokens", "--dict", p(&a), "--stream", p(&stream), "--tokens", p(&tokens), "--k", "5", "--out",
        p(&out("profiles.csv")),
    ]);
    ok(&[
        "correspond", "--a", p(&out("profiles.csv")), "--b", p(&out("profiles.csv")), "--dict", p(&a), "--out",
        p(&out("corr.csv")),
    ]);
    ok(&[
        "label", "--dict", p(&a), "--stream", p(&stream), "--scores", p(&scores), "--out", p(&out("labels.csv")),
    ]);
    ok(&[
        "saturation", "--run", &format!("shuffled={}", p(&trace)), "--out", p(&out("sat.csv")), "--curves",
        p(&out("curves.csv")),
    ]);

    let golden = [
        ("assign.csv", "index,region,distance,margin,within_theta"),
        ("codes.csv", "index,j,z"),
        ("match.csv", "a,b,cosine,persisted"),
        ("cross.csv", "direction,region,nearest,cosine,percentile_rank"),
        ("profiles.csv", "unit,activation_count,eligible,tokens"),
        ("labels.csv", "region,count,mean_score,selected"),
        ("trace.csv", "batch_index,spawned,K,activations"),
        ("curves.csv", "name,batch_index,spawned,K,activations"),
        ("stab_summary.csv", "kind,key,value"),
    ];
    for (file, header) in golden {
        assert_eq!(first_line(&out(file)), header, "{file}");
    }
    for file in ["stab.csv", "corr.csv", "sat.csv"] {
        assert!(!first_line(&out(file)).is_empty(), "{file}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let out = ep(&["build", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(ep(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ep(&["calibrate", "--stream", "x", "--p", "100", "--out", "y"]).status.code(), Some(2));
    assert_eq!(ep(&["build", "--stream", "x", "--p", "5", "--batch", "0", "--out", "y"]).status.code(), Some(2));
    assert_eq!(ep(&["--threads", "0", "info", "--stream", "x"]).status.code(), Some(2));
    assert_eq!(ep(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_inputs_exit_one_without_panicking() {
    let ws = Workspace::new();
    let junk = ws.path("junk.bin");
    fs::write(&junk, b"this is not a stream or a dictionary").unwrap();
    let truncated = ws.path("truncated.epas");
    ok(&["synth", "--clusters", "2", "--dim", "8", "--n", "10", "--out", p(&truncated)]);
    let bytes = fs::read(&truncated).unwrap();
    fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let out = ws.path("out");

    let cases: Vec<Vec<&str>> = vec![
        vec!["info", "--dict", p(&junk)],
        vec!["info", "--stream", p(&junk)],
        vec!["info", "--stream", p(&truncated)],
        vec!["calibrate", "--stream", p(&truncated), "--p", "10", "--out", p(&out)],
        vec!["build", "--stream", p(&junk), "--p", "10", "--out", p(&out)],
        vec!["assign", "--dict", p(&junk), "--stream", p(&truncated), "--out", p(&out)],
        vec!["match", "--a", p(&junk), "--b", p(&junk), "--out", p(&out)],
        vec!["info", "--dict", "/nonexistent/d.epdc"],
    ];
    for args in cases {
        let o = ep(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.starts_with("error: "), "{args:?}: {err}");
        assert!(!err.contains("panicked"), "{args:?}: {err}");
    }
}

#[test]
fn shuffle_permutes_sidecar_in_lockstep() {
    let ws = Workspace::new();
    let stream = ws.path("s.epas");
    ok(&["synth", "--clusters", "3", "--dim", "4", "--n", "50", "--seed", "7", "--out", p(&stream)]);
    let sidecar = ws.path("s.jsonl");
    let records: Vec<ep_core::stream::ProvenanceRecord> = (0..50u64)
        .map(|i| ep_core::stream::ProvenanceRecord {
            index: i,
            doc_id: format!("doc{}", i / 10),
            position: (i % 10) as u32,
            tag: None,
        })
        .collect();
    ep_core::stream::write_sidecar(fs::File::create(&sidecar).unwrap(), &records).unwrap();
    let (out, side_out) = (ws.path("t.epas"), ws.path("t.jsonl"));
    ok(&[
        "shuffle", "--stream", p(&stream), "--seed", "1", "--out", p(&out), "--sidecar", p(&sidecar), "--sidecar-out",
        p(&side_out),
    ]);
    let (_, before) = read_all(fs::File::open(&stream).unwrap()).unwrap();
    let (_, after) = read_all(fs::File::open(&out).unwrap()).unwrap();
    let moved = ep_core::stream::read_sidecar(std::io::BufReader::new(fs::File::open(&side_out).unwrap())).unwrap();
    assert_eq!(moved.len(), 50);
    for (k, rec) in moved.iter().enumerate() {
        let src = (rec.doc_id[3..].parse::<usize>().unwrap()) * 10 + rec.position as usize;
        assert_eq!(&after[k * 4..(k + 1) * 4], &before[src * 4..(src + 1) * 4]);
    }
    assert_ne!(before, after);
}

#[test]
fn info_reports_stream_header() {
    let ws = Workspace::new();
    let stream = ws.path("s.epas");
    ok(&["synth", "--clusters", "2", "--dim", "3", "--n", "2", "--out", p(&stream)]);
    assert_eq!(fs::metadata(&stream).unwrap().len(), 21 + 24);
    let stdout = ok(&["info", "--stream", p(&stream)]);
    assert!(stdout.contains("dim=3 declared_count=2 records=2"), "{stdout}");
    let header = read_all(Cursor::new(fs::read(&stream).unwrap())).unwrap().0;
    assert_eq!(header.count, 2);
}
