use std::path::Path;
use std::process::{Command, Output};

fn aps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aps")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = aps(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn assert_one_line_error(out: &Output, kind: &str) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error kind={kind}: ")), "{err}");
}

/// Reads a P6 file into (width, height, rgb bytes).
fn ppm(path: &Path) -> (usize, usize, Vec<u8>) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..2], b"P6");
    let mut fields = Vec::new();
    let mut pos = 2;
    while fields.len() < 3 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap().parse::<usize>().unwrap());
    }
    let (w, h) = (fields[0], fields[1]);
    assert_eq!(fields[2], 255);
    let data = bytes[pos + 1..].to_vec();
    assert_eq!(data.len(), w * h * 3);
    (w, h, data)
}

#[test]
fn analyze_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("a.toml"),
        "trials = 2000\ngrid = 16\ncrop_models = [\"identical\"]\ns = [0.25]\ngammas = [0.0, 3.0]\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["analyze", "--config", &cfg, "--seed", "4", "--out", a.to_str().unwrap()]);
    ok(&["analyze", "--config", &cfg, "--seed", "4", "--out", b.to_str().unwrap()]);
    for f in ["asymmetry.csv", "density.csv"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)));
    }
    let table = read(&a.join("asymmetry.csv"));
    let analytic = |strategy: &str, gamma: &str| -> f64 {
        table
            .lines()
            .map(|l| l.split(',').collect::<Vec<_>>())
            .find(|c| c[0] == strategy && c[2] == "0.25" && c[4] == gamma)
            .unwrap()[7]
            .parse()
            .unwrap()
    };
    assert_eq!(analytic("selective", "3"), 0.0125);
    assert_eq!(analytic("selective", "0"), 0.03125);
    assert_eq!(analytic("naive", "0"), 0.0625);
    let density = read(&a.join("density.csv"));
    assert!(density.starts_with("s1,gamma,r,p_sel\n"));
    assert_eq!(density.lines().count(), 1 + 2 * 101);
}

#[test]
fn analyze_default_config_has_the_headline_row() {
    let out = ok(&["analyze", "--dry-run"]);
    assert!(out.contains("s = [0.25]"));
    assert!(out.contains("gammas = [0.0, 3.0]"));
}

#[test]
fn bad_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let zero = write(&dir.path().join("z.toml"), "trials = 0\n");
    let out = aps(&["analyze", "--config", &zero]);
    assert_one_line_error(&out, "usage");
    assert_eq!(out.status.code(), Some(2));

    let unknown = write(&dir.path().join("u.toml"), "trials = 10\nbogus = 1\n");
    assert_one_line_error(&aps(&["analyze", "--config", &unknown]), "usage");
    let unknown_train = write(&dir.path().join("t.toml"), "[optim]\nlr = 0.1\nmomentum = 0.9\n");
    assert_one_line_error(&aps(&["train", "--config", &unknown_train]), "usage");
    assert_one_line_error(&aps(&["frobnicate"]), "usage");
    assert_one_line_error(&aps(&["demo", "--image", "/nonexistent.ppm"]), "io");
    let junk = write(&dir.path().join("junk.ckpt"), "not a checkpoint");
    assert_one_line_error(&aps(&["probe", &junk]), "corrupt");
}

#[test]
fn demo_writes_pixmaps_and_avoids_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("d.toml"), "gamma = 8.0\nscale = 1\n");
    let out = dir.path().join("out");
    ok(&["demo", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()]);
    for f in ["crop1.ppm", "crop2.ppm", "view1_mask.ppm", "view2_overlap.ppm", "view2_mask.ppm"] {
        let (w, h, _) = ppm(&out.join(f));
        assert_eq!((w, h), (64, 64));
    }
    // read one pixel per 8×8 patch from the emitted heat map and mask
    let (_, _, heat) = ppm(&out.join("view2_overlap.ppm"));
    let (_, _, mask) = ppm(&out.join("view2_mask.ppm"));
    let (mut sel, mut unsel) = (Vec::new(), Vec::new());
    for row in 0..8 {
        for col in 0..8 {
            let px = ((row * 8 + 4) * 64 + col * 8 + 4) * 3;
            let r = heat[px] as f64 / 255.0;
            if mask[px] == 255 { sel.push(r) } else { unsel.push(r) }
        }
    }
    assert_eq!(sel.len(), 16);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&sel) < mean(&unsel), "{} vs {}", mean(&sel), mean(&unsel));
}

#[test]
fn demo_full_sampling_of_identical_crops_lights_the_whole_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("d.toml"), "crops = \"identity\"\ns1 = 1.0\ns2 = 1.0\nscale = 1\n");
    let out = dir.path().join("out");
    ok(&["demo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let (_, _, mask) = ppm(&out.join("view1_mask.ppm"));
    assert!(mask.iter().all(|&b| b == 255));
}

#[test]
fn train_dry_run_prints_plan() {
    let out = ok(&["train", "--dry-run", "--seed", "9"]);
    assert!(out.contains("seed = 9"));
    assert!(out.contains("4 steps per epoch"));
    assert!(out.contains("200 total steps"));
}

#[test]
fn smoke_train_then_probe_reproduces_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    ok(&["train", "--out", o]);
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "step,lr,loss,grad_norm,clip_triggered");
    assert_eq!(metrics.lines().count(), 201);
    let ckpt = out.join("checkpoint-000200.ckpt");
    assert!(ckpt.exists());
    assert!(out.join("checkpoint-000100.ckpt").exists());
    let logged = read(&out.join("probe.csv"));
    let reprobe = ok(&["probe", ckpt.to_str().unwrap()]);
    assert_eq!(logged, reprobe);
}

#[test]
fn resumed_training_matches_unbroken_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("t.toml"),
        "[data]\nn_per_class = 8\nholdout_per_class = 4\n[optim]\nbatch_size = 8\n[schedule]\nwarmup_epochs = 1\nepochs = 3\n[checkpoint]\nevery_steps = 2\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--steps", "2", "--out", b.to_str().unwrap()]);
    let mid = b.join("checkpoint-000002.ckpt");
    ok(&["train", "--resume", mid.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
    assert_eq!(read(&a.join("probe.csv")), read(&b.join("probe.csv")));
}
