use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
corpus_size = 6
scan_image_size = 24
resolution = 16
latent_side = 4
codebook_size = 64
vq_widths = [4, 8, 8]
groups = 2
vq_steps = 2
vq_batch_size = 2
render_size = 16
views_per_step = 1
unet_widths = [8, 16]
attention_resolutions = [2, 4]
time_dim = 16
token_count = 5
token_dim = 8
token_image_size = 16
diff_steps = 2
diff_batch_size = 2
inference_steps = 4
n_samples = 2
best_of = 2
chamfer_points = 256
split_train = 0.5
split_val = 0.25
split_test = 0.25
";

fn shapediff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shapediff"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = shapediff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_verb_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let run = root.join("run");
    let (vq, diff) = (run.join("vq.sdck"), run.join("diff.sdck"));

    ok(&["gen-data", "--config", s(&cfg), "--out-dir", s(&data)]);
    assert!(data.join("shapes/shape0005.tsdf").exists());
    assert!(ok(&["split", "--data-dir", s(&data), "--config", s(&cfg)])
        .contains("train 3 val 2 test 1"));
    ok(&[
        "train-vqvae",
        "--config",
        s(&cfg),
        "--data-dir",
        s(&data),
        "--out",
        s(&vq),
    ]);
    ok(&[
        "train-diffusion",
        "--config",
        s(&cfg),
        "--vqvae",
        s(&vq),
        "--data-dir",
        s(&data),
        "--out",
        s(&diff),
    ]);
    assert!(Path::new(&format!("{}.json", s(&diff))).exists());

    let complete = |out: &Path, seed: &str| {
        ok(&[
            "complete",
            "--vqvae",
            s(&vq),
            "--diffusion",
            s(&diff),
            "--data-dir",
            s(&data),
            "--shape",
            "shape0000",
            "--seed",
            seed,
            "--obj",
            "--out-dir",
            s(out),
        ])
    };
    let (a, b, c) = (root.join("a"), root.join("b"), root.join("c"));
    complete(&a, "7");
    complete(&b, "7");
    complete(&c, "8");
    let read = |d: &Path| std::fs::read(d.join("sample_00.tsdf")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    assert!(a.join("sample_01.obj").exists());
    assert!(a.join("sample_01.tsdf.json").exists());
    assert!(a.join("metrics.json").exists());

    let normals = root.join("n.ppm");
    let depth = root.join("d.pgm");
    ok(&[
        "render",
        "--grid",
        s(&data.join("shapes/shape0000.tsdf")),
        "--pose",
        "1",
        "--size",
        "32",
        "--out",
        s(&depth),
        s(&normals),
    ]);
    assert!(std::fs::read(&depth).unwrap().starts_with(b"P5"));
    assert!(std::fs::read(&normals).unwrap().starts_with(b"P6"));

    // Ground truth against itself scores zero error.
    let report = root.join("eval.json");
    ok(&[
        "eval",
        "--pred-dir",
        s(&data.join("shapes")),
        "--gt-dir",
        s(&data.join("shapes")),
        "--report",
        s(&report),
        "--chamfer-points",
        "256",
    ]);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["aggregate"]["l1"], 0.0);
    assert_eq!(r["aggregate"]["iou"], 1.0);

    let ab = root.join("ablate.json");
    let text = ok(&[
        "ablate",
        "--config",
        s(&cfg),
        "--vqvae",
        s(&vq),
        "--diffusion",
        s(&diff),
        "--data-dir",
        s(&data),
        "--report",
        s(&ab),
    ]);
    for m in ["image_only", "partial_only", "both"] {
        assert!(text.contains(m));
    }
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ab).unwrap()).unwrap();
    assert_eq!(r["reports"].as_array().unwrap().len(), 3);
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "vq_stepz = 3\n").unwrap();
    let out = shapediff(&["gen-data", "--config", s(&cfg), "--out-dir", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vq_stepz"));

    let out = shapediff(&["split", "--data-dir", s(tmp.path())]);
    assert!(!out.status.success());
    let out = shapediff(&[
        "complete",
        "--mode",
        "nonsense",
        "--vqvae",
        "a",
        "--diffusion",
        "b",
        "--out-dir",
        "c",
    ]);
    assert!(!out.status.success());
}
