use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use windsr::cli::{self, main_with_args};
use windsr::io::{read_grid, write_grid, GRID_HEADER_LEN};
use windsr::synth::{gen_terrain, SynthConfig};

const SMALL: &str = r#"{
  "synth": {"size": 32, "seed": 4},
  "data": {"patch_size": 16, "da_stations": 3, "eval_stations": 2},
  "schedule": {"steps": 10, "beta_start": 0.001, "beta_end": 0.2},
  "model": {"layers": 2, "hidden_channels": 4},
  "train": {"iterations": 5, "batch_size": 2, "seed": 2},
  "seeds": {"sample": 9, "stations": 1}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_windsr"))
}

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["windsr"];
    argv.extend_from_slice(args);
    main_with_args(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("config.json"), SMALL).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn gen(&self) -> PathBuf {
        let out = self.p("scene");
        assert_eq!(run(&["gen", "--config", s(&self.p("config.json")), "--out", s(&out)]), 0);
        out
    }

    fn train(&self, scene: &Path) -> PathBuf {
        let ckpt = self.p("model.ckpt");
        assert_eq!(
            run(&["train", "--config", s(&self.p("config.json")), "--data", s(scene), "--out", s(&ckpt)]),
            0
        );
        ckpt
    }
}

fn report_row(path: &Path) -> Vec<(String, String)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let h: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    let v: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    h.into_iter().zip(v).collect()
}

fn field(row: &[(String, String)], name: &str) -> f64 {
    row.iter().find(|(k, _)| k == name).unwrap().1.parse().unwrap()
}

#[test]
fn gen_writes_scene_and_self_eval_is_perfect() {
    let ws = Workspace::new();
    let scene = ws.gen();
    for f in [cli::TRUTH_FILE, cli::SIM_FILE, cli::TERRAIN_FILE, cli::LR_SIM_FILE, cli::LR_TRUTH_FILE] {
        assert!(scene.join(f).is_file(), "{f}");
    }
    assert_eq!(read_grid(&scene.join(cli::LR_SIM_FILE)).unwrap().shape(), (8, 8));
    let stations = fs::read_to_string(scene.join(cli::STATIONS_FILE)).unwrap();
    assert_eq!(stations.lines().count(), 4);
    let truth = scene.join(cli::TRUTH_FILE);
    let report = ws.p("self.csv");
    assert_eq!(run(&["eval", "--pred", s(&truth), "--truth", s(&truth), "--out", s(&report)]), 0);
    let row = report_row(&report);
    assert_eq!(field(&row, "mae"), 0.0);
    assert_eq!(field(&row, "ssim"), 1.0);
    assert!(field(&row, "psnr_db").is_infinite());
    let holdout = ws.p("holdout.csv");
    assert_eq!(
        run(&[
            "eval", "--pred", s(&scene.join(cli::SIM_FILE)), "--truth", s(&truth),
            "--holdout", s(&scene.join(cli::HOLDOUT_FILE)), "--out", s(&holdout),
        ]),
        0
    );
    assert_eq!(field(&report_row(&holdout), "n_pixels"), 2.0);
}

#[test]
fn empty_station_file_matches_plain_downscale() {
    let ws = Workspace::new();
    let scene = ws.gen();
    let ckpt = ws.train(&scene);
    assert!(cli::sidecar(&ckpt, "loss.csv").is_file());
    let lr = scene.join(cli::LR_SIM_FILE);
    let terrain = scene.join(cli::TERRAIN_FILE);
    let empty = ws.p("empty.csv");
    fs::write(&empty, "id,row,col,height_m,speed_mps\n").unwrap();
    let (a, b, c) = (ws.p("plain.wsrg"), ws.p("da_empty.wsrg"), ws.p("da.wsrg"));
    let cfg = ws.p("config.json");
    assert_eq!(
        run(&["downscale", "--model", s(&ckpt), "--lr", s(&lr), "--terrain", s(&terrain), "--seed", "5", "--out", s(&a)]),
        0
    );
    assert_eq!(
        run(&[
            "assimilate", "--model", s(&ckpt), "--lr", s(&lr), "--terrain", s(&terrain), "--stations", s(&empty),
            "--config", s(&cfg), "--seed", "5", "--out", s(&b),
        ]),
        0
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        run(&[
            "assimilate", "--model", s(&ckpt), "--lr", s(&lr), "--terrain", s(&terrain),
            "--stations", s(&scene.join(cli::STATIONS_FILE)), "--config", s(&cfg), "--seed", "5", "--out", s(&c),
        ]),
        0
    );
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    assert_eq!(read_grid(&c).unwrap().shape(), (32, 32));
}

#[test]
fn replay_reproduces_outputs_without_touching_inputs() {
    let ws = Workspace::new();
    let scene = ws.gen();
    let before: Vec<Vec<u8>> = [cli::TRUTH_FILE, cli::TERRAIN_FILE]
        .iter()
        .map(|f| fs::read(scene.join(f)).unwrap())
        .collect();
    let ckpt = ws.train(&scene);
    let replayed = ws.p("replayed.ckpt");
    assert_eq!(run(&["replay", "--meta", s(&cli::sidecar(&ckpt, "meta.json")), "--out", s(&replayed)]), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&replayed).unwrap());
    let rescene = ws.p("rescene");
    assert_eq!(run(&["replay", "--meta", s(&scene.join(cli::GEN_METADATA_FILE)), "--out", s(&rescene)]), 0);
    for f in [cli::TRUTH_FILE, cli::SIM_FILE, cli::STATIONS_FILE, cli::HOLDOUT_FILE] {
        assert_eq!(fs::read(scene.join(f)).unwrap(), fs::read(rescene.join(f)).unwrap(), "{f}");
    }
    let after: Vec<Vec<u8>> = [cli::TRUTH_FILE, cli::TERRAIN_FILE]
        .iter()
        .map(|f| fs::read(scene.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
    let meta = cli::read_metadata(&cli::sidecar(&ckpt, "meta.json")).unwrap();
    assert_eq!(meta.config.train.iterations, 5);
    assert_eq!(meta.config.profile.alpha, 1.0 / 7.0);
}

#[test]
fn baseline_upsamples_by_factor() {
    let ws = Workspace::new();
    let scene = ws.gen();
    let out = ws.p("bicubic.wsrg");
    assert_eq!(run(&["baseline", "--method", "bicubic", "--lr", s(&scene.join(cli::LR_SIM_FILE)), "--out", s(&out)]), 0);
    assert_eq!(read_grid(&out).unwrap().shape(), (32, 32));
    assert!(cli::sidecar(&out, "meta.json").is_file());
}

#[test]
fn grid_file_size_for_128_square() {
    let ws = Workspace::new();
    let f = gen_terrain(&SynthConfig { seed: 3, ..Default::default() }).unwrap();
    let p = ws.p("t.wsrg");
    write_grid(&f, &p).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len() as usize, GRID_HEADER_LEN + 128 * 128 * 4);
    assert_eq!(GRID_HEADER_LEN, 22);
}

fn stderr_error(out: &std::process::Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim_end()).unwrap()
}

#[test]
fn failures_give_one_line_errors() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_error(&out)["error"]["kind"], "usage");

    let out = bin().args(["baseline", "--lr", "/nonexistent/x.wsrg", "--out", "/tmp/never.wsrg"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["error"]["kind"], "io");

    let ws = Workspace::new();
    fs::write(ws.p("bad.json"), r#"{"train": {"learning_rat": 1}}"#).unwrap();
    let out = bin().args(["gen", "--config", s(&ws.p("bad.json")), "--out", s(&ws.p("x"))]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_error(&out)["error"]["kind"], "json");
    assert!(!ws.p("x").exists());

    fs::write(ws.p("junk.wsrg"), b"NOPE\x01\x00").unwrap();
    let out = bin().args(["baseline", "--lr", s(&ws.p("junk.wsrg")), "--out", s(&ws.p("y.wsrg"))]).output().unwrap();
    assert_eq!(stderr_error(&out)["error"]["kind"], "bad-magic");
    assert!(!ws.p("y.wsrg").exists());

    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}
