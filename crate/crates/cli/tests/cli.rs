use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "world": {"n_points": 40, "n_frames": 12, "d_feat": 16, "latent_dim": 8, "oracle_hidden": 16, "shift_rank": 4,
            "box_extent": [2.0, 2.0, 1.5], "orbit_radius": [2.0, 2.5]},
  "split": {"mapping_len": [2, 4], "query_len": [1, 3]},
  "n_train": 3, "n_heldout": 2, "buffer_cap": 2000,
  "pretrain": {
    "model": {"d_feat": 16, "d_model": 8, "n_blocks": 1, "n_heads": 2, "ffn_ratio": 2, "d_map": 8, "head_hidden": 8},
    "n_c": 8, "n_active": 2, "n_spb": 2, "n_pps": 16, "n_qstandby": 4, "budget": [6, 10],
    "head_period": 3, "total_iterations": 24, "log_every": 6
  },
  "mapping": {"iterations": 12, "batch_size": 32, "n_c": 8, "buffer_cap": 2000}
}"#;

fn aceg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aceg"));
    c.env_remove("ACEG_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    aceg().args(args).output().expect("spawn aceg")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "aceg {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("reading {}: {e}", p.as_ref().display()))
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn synth(&self, out: &str) -> PathBuf {
        let out = self.path(out);
        ok(&["synth", "--config", s(&self.config), "--out", s(&out), "--seed", "5"]);
        out
    }

    fn pretrain(&self, manifest: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args = vec!["pretrain", "--config", s(&self.config), "--manifest", s(manifest), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

#[test]
fn synth_writes_one_buffer_pair_per_tuple_and_is_reproducible() {
    let f = Fixture::new();
    let a = f.synth("a");
    let b = f.synth("b");
    let manifest = String::from_utf8(read(a.join("manifest.txt"))).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.contains(".M = ")).count(), 3);
    assert_eq!(manifest.lines().filter(|l| l.contains(".Q = ")).count(), 3);
    assert_eq!(read(a.join("manifest.txt")), read(b.join("manifest.txt")));
    assert_eq!(std::fs::read_dir(a.join("heldout")).unwrap().count(), 2);
    assert!(a.join("config.json").exists());
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let f = Fixture::new();
    let data = f.synth("data");
    let manifest = data.join("manifest.txt");
    let p1 = f.pretrain(&manifest, "p1", &[]);
    let p2 = f.pretrain(&manifest, "p2", &[]);
    assert_eq!(read(p1.join("theta.prm")), read(p2.join("theta.prm")));
    assert_eq!(read(p1.join("log.txt")), read(p2.join("log.txt")));
    assert_eq!(read(p1.join("checkpoint/state.prm")), read(p2.join("checkpoint/state.prm")));

    let theta = p1.join("theta.prm");
    let theta_before = read(&theta);
    let scene = data.join("heldout/held000.scn");
    for out in ["m1", "m2"] {
        ok(&[
            "map", "--config", s(&f.config), "--theta", s(&theta), "--scene", s(&scene), "--out", s(&f.path(out)),
        ]);
    }
    assert_eq!(read(f.path("m1/held000.map")), read(f.path("m2/held000.map")));
    assert_eq!(&read(f.path("m1/held000.map"))[..8], b"ACEGMAP1");
    assert_eq!(read(&theta), theta_before);

    let code = f.path("m1/held000.map");
    for out in ["l1", "l2"] {
        ok(&[
            "localize", "--config", s(&f.config), "--theta", s(&theta), "--code", s(&code), "--scene", s(&scene),
            "--views", "all", "--out", s(&f.path(out)),
        ]);
    }
    assert_eq!(read(f.path("l1/frames.tsv")), read(f.path("l2/frames.tsv")));
    let report = String::from_utf8(read(f.path("l1/frames.txt"))).unwrap();
    assert!(report.contains("failure_rate"));

    let scenes = data.join("heldout");
    for out in ["e1", "e2"] {
        ok(&[
            "eval", "--config", s(&f.config), "--theta", s(&theta), "--scenes", s(&scenes), "--out", s(&f.path(out)),
        ]);
    }
    assert_eq!(read(f.path("e1/query.tsv")), read(f.path("e2/query.tsv")));
    assert_eq!(read(f.path("e1/query.json")), read(f.path("e2/query.json")));
}

#[test]
fn resumed_pretraining_matches_uninterrupted_run() {
    let f = Fixture::new();
    let data = f.synth("data");
    let manifest = data.join("manifest.txt");
    let straight = f.pretrain(&manifest, "straight", &[]);
    let first = f.pretrain(&manifest, "first", &["--stop-at", "12"]);
    let resumed = f.path("resumed");
    ok(&[
        "pretrain", "--manifest", s(&manifest), "--resume", s(&first.join("checkpoint")), "--out", s(&resumed),
    ]);
    assert_eq!(read(straight.join("theta.prm")), read(resumed.join("theta.prm")));
    assert_eq!(read(straight.join("checkpoint/state.prm")), read(resumed.join("checkpoint/state.prm")));
    assert_ne!(read(first.join("theta.prm")), read(straight.join("theta.prm")));
}

#[test]
fn mapping_only_skips_query_iterations_and_log_follows_cadence() {
    let f = Fixture::new();
    let data = f.synth("data");
    let manifest = data.join("manifest.txt");
    let p = f.pretrain(&manifest, "mo", &["--mapping-only", "--log-every", "4"]);
    let log = String::from_utf8(read(p.join("log.txt"))).unwrap();
    let scalars: Vec<&str> = log.lines().filter(|l| l.contains("mapping_nll=")).collect();
    assert_eq!(scalars.len(), 24 / 4);
    assert!(scalars.iter().all(|l| l.contains("query_nll=nan")));
    let cfg = String::from_utf8(read(p.join("config.json"))).unwrap();
    assert!(cfg.contains("\"mapping_only\": true"));

    let both = f.pretrain(&manifest, "mq", &[]);
    let log = String::from_utf8(read(both.join("log.txt"))).unwrap();
    assert!(log.lines().any(|l| l.contains("mapping_nll=") && !l.contains("query_nll=nan")));
}

#[test]
fn malformed_inputs_exit_nonzero() {
    let f = Fixture::new();
    let data = f.synth("data");
    let garbage = f.path("garbage.bin");
    std::fs::write(&garbage, b"not a file format").unwrap();

    let o = run(&["pretrain", "--manifest", s(&garbage), "--out", s(&f.path("x"))]);
    assert!(!o.status.success());

    let buf = data.join("buffers/train000.M.buf");
    let mut bytes = read(&buf);
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&buf, bytes).unwrap();
    let o = run(&[
        "pretrain", "--config", s(&f.config), "--manifest", s(&data.join("manifest.txt")), "--out", s(&f.path("y")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest mismatch"));

    let scene = data.join("heldout/held000.scn");
    let o = run(&[
        "localize", "--config", s(&f.config), "--theta", s(&garbage), "--code", s(&garbage), "--scene", s(&scene),
        "--out", s(&f.path("z")),
    ]);
    assert!(!o.status.success());

    let o = run(&["map", "--theta", s(&garbage), "--scene", s(&garbage), "--out", s(&f.path("w"))]);
    assert!(!o.status.success());

    let bad_cfg = f.path("bad.json");
    std::fs::write(&bad_cfg, "{\"n_train\": \"many\"}").unwrap();
    let o = run(&["synth", "--config", s(&bad_cfg), "--out", s(&f.path("v"))]);
    assert!(!o.status.success());
}

#[test]
fn output_root_defaults_to_environment_variable() {
    let f = Fixture::new();
    let root = f.path("root");
    let o = aceg()
        .args(["synth", "--config", s(&f.config), "--n-train", "2", "--n-heldout", "1"])
        .env("ACEG_OUT", &root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = String::from_utf8(read(root.join("synth/manifest.txt"))).unwrap();
    assert!(manifest.contains("n_tuples = 2"));
}

#[test]
fn gradcheck_reports_every_op_and_passes() {
    let out = ok(&["gradcheck", "--configs", "2"]);
    for op in ["attention", "layer_norm", "laplace_nll_3d", "regress_laplace_end_to_end"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.contains("max_rel_err=")), "{op} missing:\n{out}");
    }
    assert!(out.contains("gradcheck passed"));
}
