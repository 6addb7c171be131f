use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const GRID: [&str; 4] = ["--sample-rate", "8000", "--duration", "0.25"];

fn chain(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../chains").join(format!("{name}.chain"))
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modsynth")).arg("-q").args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn random_renders_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a.wav"), dir.path().join("b.wav"), dir.path().join("c.wav"));
    let fig4 = chain("fig4");
    for out in [&a, &b] {
        let o = run(&[&["render", s(&fig4), s(out), "--random", "--seed", "7"][..], &GRID].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    run(&[&["render", s(&fig4), s(&c), "--random", "--seed", "8"][..], &GRID].concat());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn stored_parameters_reproduce_the_render() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, p) = (dir.path().join("a.wav"), dir.path().join("b.wav"), dir.path().join("p.json"));
    let fig4 = chain("fig4");
    let o = run(&[&["render", s(&fig4), s(&a), "--random", "--seed", "3", "--save-params", s(&p)][..], &GRID].concat());
    assert!(o.status.success());
    let o = run(&[&["render", s(&fig4), s(&b), "--params", s(&p)][..], &GRID].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn trace_writes_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace");
    let out = dir.path().join("out.wav");
    let o = run(&[&["render", s(&chain("basic")), s(&out), "--random", "--trace", s(&trace)][..], &GRID].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(&trace).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let want = ["cell_0_0.wav", "cell_0_1.wav", "cell_0_2.wav", "cell_0_3.wav", "cell_0_4.wav", "cell_1_0.wav", "cell_1_1.wav", "cell_2_0.wav"];
    assert_eq!(names, want);
}

#[test]
fn invalid_chains_exit_2_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.chain");
    fs::write(&bad, "chain bad\ncell 0 0 osc\ncell 0 1 lowpass\nconnect 0,1 -> 0,0\n").unwrap();
    let o = run(&[&["render", s(&bad), s(&dir.path().join("x.wav")), "--random"][..], &GRID].concat());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 4"), "{err}");
    let o = run(&["gradcheck", "--chain", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_outputs_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("missing/dir/out.wav");
    let o = run(&[&["render", s(&chain("single_osc")), s(&out), "--random"][..], &GRID].concat());
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sweep_writes_one_line_per_point_plus_header() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = run(&[&["sweep", "--chain", s(&chain("fm")), "--param", "0,1.freq_c", "--points", "500", "--out", s(out)][..], &GRID].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 501);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let o = run(&["sweep", "--chain", s(&chain("fm")), "--param", "0,1.waveform", "--out", s(&a)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bench_with_one_variant_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = run(&[
        "bench", "--waveform", "square", "--distance", "300", "--processing", "cumsum-time", "--transform", "spectrogram",
        "--trials", "20", "--seed", "1", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "waveform,transform,processing,distance,trials,accuracy");
    assert!(lines[1].starts_with("square,spectrogram,cumsum-time,300,20,"), "{}", lines[1]);
}

#[test]
fn gradcheck_passes_on_a_simple_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = run(&[&["gradcheck", "--chain", s(&chain("single_osc")), "--points", "3", "--out", s(&out)][..], &GRID].concat());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("0,0.amp") && table.contains("0,0.freq"), "{table}");
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn dataset_and_match_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&[&["dataset", s(&chain("single_osc")), s(&data), "--n", "2", "--seed", "4"][..], &GRID].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "loss.cells = output\nloss.windows = 512\noptimizer.steps = 20\noptimizer.restarts = 1\n").unwrap();
    let out = dir.path().join("match");
    let o = run(&["match", s(&data.join("000000.wav")), s(&chain("single_osc")), s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(doc["trajectory"].as_array().unwrap().len(), 20);
    assert!(doc["params"]["cells"]["0,0"]["amp"].is_number());
    assert!(out.join("match.wav").exists());
}

#[test]
fn bad_config_files_exit_2_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("t.wav");
    run(&[&["render", s(&chain("single_osc")), s(&wav), "--random"][..], &GRID].concat());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nloss.norm = l7\n").unwrap();
    let o = run(&["match", s(&wav), s(&chain("single_osc")), s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.cfg:2"));
}

#[test]
fn match_without_a_config_uses_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("t.wav");
    run(&[&["render", s(&chain("single_osc")), s(&wav), "--random", "--seed", "2"][..], &GRID].concat());
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "optimizer.steps = 5\noptimizer.restarts = 1\n").unwrap();
    let out = dir.path().join("m");
    let o = run(&["match", s(&wav), s(&chain("single_osc")), s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&cfg, "loss.cells = all\noptimizer.steps = 5\n").unwrap();
    let o = run(&["match", s(&wav), s(&chain("single_osc")), s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}
