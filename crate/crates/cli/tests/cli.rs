use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specmatch"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// `(exit code, stderr error line)`
fn fail(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().last().unwrap_or("").to_string();
    (out.status.code().unwrap(), line)
}

const CONFIG: &str = "\
seed = 5
synth.count = 12
synth.pairs = 2
deform.level = 1
zeroshot.k = 6
zeroshot.steps = 4
zeroshot.eval_target = 12
zeroshot.mask_samples = 8
zeroshot.mask_every = 2
zeroshot.features.hidden = 8,8
zeroshot.features.out_dim = 8
zeroshot.features.hks_count = 4
denoiser.widths = 16
train.epochs = 3
train.batch_size = 4
schedule.steps = 6
";

fn setup(dir: &Path) {
    std::fs::write(dir.join("run.cfg"), CONFIG).unwrap();
    ok(dir, &["synth-data", "--config", "run.cfg", "--out", "shapes"]);
    ok(
        dir,
        &[
            "build-dataset",
            "--config",
            "run.cfg",
            "--manifest",
            "shapes/shapes.json",
            "--out",
            "ds",
        ],
    );
    ok(
        dir,
        &["train", "--config", "run.cfg", "--dataset", "ds", "--out", "abs.sgm"],
    );
}

fn read(dir: &Path, p: &str) -> Vec<u8> {
    std::fs::read(dir.join(p)).unwrap()
}

fn json(dir: &Path, p: &str) -> Value {
    serde_json::from_slice(&read(dir, p)).unwrap()
}

fn strip_clock(mut v: Value) -> Value {
    v["result"].as_object_mut().unwrap().remove("wall_clock_s");
    v
}

#[test]
fn pipeline_outputs_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);

    let ds = json(d, "ds/dataset.json");
    assert_eq!(ds["k"], 6);
    assert_eq!(ds["count"], 13, "training shapes plus the template self map");
    let log = json(d, "abs.sgm.log.json");
    assert_eq!(log["epoch_losses"].as_array().unwrap().len(), 3);
    assert_eq!(log["config"]["zeroshot"]["k"], 6, "report echoes the resolved config");

    ok(
        d,
        &[
            "sample",
            "--checkpoint",
            "abs.sgm",
            "--count",
            "2",
            "--seed",
            "3",
            "--frames",
            "3",
            "--out",
            "s1",
        ],
    );
    ok(
        d,
        &[
            "sample",
            "--checkpoint",
            "abs.sgm",
            "--count",
            "2",
            "--seed",
            "3",
            "--frames",
            "3",
            "--out",
            "s2",
        ],
    );
    assert_eq!(read(d, "s1/sample_001.fmat"), read(d, "s2/sample_001.fmat"));
    assert_eq!(
        read(d, "s1/sample_000_step_006.ppm"),
        read(d, "s2/sample_000_step_006.ppm")
    );
    let ppm = read(d, "s1/sample_000_step_000.ppm");
    assert!(ppm.starts_with(b"P6\n6 6\n255\n"));
    assert_eq!(ppm.len(), 11 + 6 * 6 * 3);

    ok(
        d,
        &[
            "distill-mask",
            "--checkpoint",
            "abs.sgm",
            "--fmap",
            "s1/sample_000.fmat",
            "--sigma",
            "0.5,1",
            "--N",
            "8",
            "--out",
            "mk",
        ],
    );
    for s in ["0.5", "1"] {
        assert!(d.join(format!("mk/mask_sigma_{s}.fmat")).exists());
        let side = json(d, &format!("mk/mask_sigma_{s}.json"));
        assert!(side["max"].as_f64().unwrap() > 0.0);
    }

    let m = |out: &str| {
        ok(
            d,
            &[
                "match",
                "--config",
                "run.cfg",
                "--mesh1",
                "shapes/pair_001_a.off",
                "--mesh2",
                "shapes/pair_001_b.off",
                "--gt",
                "shapes/pair_001_gt.pmap",
                "--checkpoint",
                "abs.sgm",
                "--out",
                out,
            ],
        )
    };
    m("m1");
    m("m2");
    for f in ["fmap.fmat", "p2p.pmap", "c_init.fmat", "mask.fmat", "mask.ppm"] {
        assert_eq!(read(d, &format!("m1/{f}")), read(d, &format!("m2/{f}")), "{f}");
    }
    let r1 = json(d, "m1/report.json");
    assert_eq!(strip_clock(r1.clone()), strip_clock(json(d, "m2/report.json")));
    assert_eq!(r1["result"]["trace"]["total"].as_array().unwrap().len(), 4);
    assert_eq!(r1["config"]["seed"], 5);

    ok(
        d,
        &[
            "eval",
            "--pred",
            "m1/p2p.pmap",
            "--gt",
            "shapes/pair_001_gt.pmap",
            "--mesh2",
            "shapes/pair_001_b.off",
            "--out",
            "ev",
        ],
    );
    let ev = json(d, "ev/eval.json");
    let reported = r1["result"]["mean_error"].as_f64().unwrap();
    assert!((ev["mean"].as_f64().unwrap() - reported).abs() < 1e-12);
    let curve = String::from_utf8(read(d, "ev/curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("threshold,fraction"));
    assert_eq!(curve.lines().count(), 102);

    let out = ok(
        d,
        &[
            "baseline",
            "--config",
            "run.cfg",
            "--pairs",
            "shapes/pairs.json",
            "--mask",
            "laplacian,slanted",
            "--jobs",
            "2",
            "--out",
            "bl",
        ],
    );
    assert!(out.contains("laplacian"));
    let bl = json(d, "bl/baseline.json");
    assert_eq!(bl["rows"][1]["per_pair_x100"].as_array().unwrap().len(), 2);

    ok(
        d,
        &[
            "ablate",
            "--config",
            "run.cfg",
            "--pairs",
            "shapes/pairs.json",
            "--checkpoint",
            "abs.sgm",
            "--modes",
            "mask-zoomout,proper",
            "--out",
            "ab1",
        ],
    );
    ok(
        d,
        &[
            "ablate",
            "--config",
            "run.cfg",
            "--pairs",
            "shapes/pairs.json",
            "--checkpoint",
            "abs.sgm",
            "--modes",
            "mask-zoomout,proper",
            "--jobs",
            "2",
            "--out",
            "ab2",
        ],
    );
    assert_eq!(
        read(d, "ab1/ablation.json"),
        read(d, "ab2/ablation.json"),
        "job count does not change results"
    );
}

#[test]
fn identical_meshes_match_within_an_edge_length() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let n = specmatch::mesh::io::load_mesh_auto(d.join("shapes/pair_000_a.off")).unwrap();
    let ident: Vec<usize> = (0..n.n_vertices()).collect();
    specmatch::formats::write_pmap(d.join("id.pmap"), &ident).unwrap();
    ok(
        d,
        &[
            "match",
            "--config",
            "run.cfg",
            "--mesh1",
            "shapes/pair_000_a.off",
            "--mesh2",
            "shapes/pair_000_a.off",
            "--gt",
            "id.pmap",
            "--checkpoint",
            "abs.sgm",
            "--out",
            "self",
        ],
    );
    let err = json(d, "self/report.json")["result"]["mean_error"].as_f64().unwrap();
    let edge = n.mean_edge_length() / n.total_area().sqrt();
    assert!(err < edge, "{err} vs edge {edge}");

    ok(
        d,
        &[
            "eval",
            "--pred",
            "id.pmap",
            "--gt",
            "id.pmap",
            "--mesh2",
            "shapes/pair_000_a.off",
            "--out",
            "ev0",
        ],
    );
    assert_eq!(json(d, "ev0/eval.json")["mean"], 0.0);
}

fn assert_line(line: &str, kind: &str, code: i32) {
    let prefix = format!("error: kind={kind} code={code} msg=\"");
    assert!(line.starts_with(&prefix), "{line}");
    assert!(line.ends_with('"'), "{line}");
}

#[test]
fn errors_have_codes_and_machine_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let (code, line) = fail(d, &["no-such-command"]);
    assert_eq!(code, 2);
    assert_line(&line, "UsageError", 2);

    let (code, line) = fail(d, &["synth-data", "--out", "x", "--set", "zeroshot.bogus=1"]);
    assert_eq!(code, 2);
    assert_line(&line, "UsageError", 2);
    assert!(line.contains("zeroshot.bogus"));

    std::fs::write(d.join("bad.cfg"), "seed=1\nnot a pair\n").unwrap();
    let (code, _) = fail(d, &["synth-data", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(code, 2);

    let (code, line) = fail(
        d,
        &[
            "eval",
            "--pred",
            "missing.pmap",
            "--gt",
            "missing.pmap",
            "--mesh2",
            "missing.off",
            "--out",
            "e",
        ],
    );
    assert_eq!(code, 3);
    assert_line(&line, "IoError", 3);

    std::fs::write(d.join("junk.fmat"), b"FMAT\x01").unwrap();
    std::fs::write(d.join("junk.sgm"), b"nope").unwrap();
    let (code, line) = fail(
        d,
        &[
            "distill-mask",
            "--checkpoint",
            "junk.sgm",
            "--fmap",
            "junk.fmat",
            "--out",
            "mk",
        ],
    );
    assert_eq!(code, 3);
    assert!(line.contains("code=3"));
}

#[test]
fn sigma_outside_schedule_is_rejected_and_nan_map_is_numerical() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    setup(d);
    let c = nalgebra::DMatrix::<f64>::identity(6, 6);
    specmatch::formats::write_fmat(d.join("c.fmat"), &c).unwrap();
    let (code, line) = fail(
        d,
        &[
            "distill-mask",
            "--checkpoint",
            "abs.sgm",
            "--fmap",
            "c.fmat",
            "--sigma",
            "50",
            "--out",
            "mk",
        ],
    );
    assert_eq!(code, 2);
    assert_line(&line, "SigmaOutOfRange", 2);

    let mut bad = c.clone();
    bad[(0, 0)] = f64::NAN;
    specmatch::formats::write_fmat(d.join("nan.fmat"), &bad).unwrap();
    let (code, line) = fail(
        d,
        &[
            "distill-mask",
            "--checkpoint",
            "abs.sgm",
            "--fmap",
            "nan.fmat",
            "--out",
            "mk2",
        ],
    );
    assert_eq!(code, 4);
    assert_line(&line, "NonFinite", 4);
}
