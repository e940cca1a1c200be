use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mipsr_core::image::{load_image, save_image, Role};
use mipsr_core::synthetic::scene;

const TINY: &str = "# small networks for fast runs
levels = 1
channels = 4
skip_channels = 2
noise_channels = 4
ref_channels = 4
loc_channels = 2
iterations = 500
alpha = 0.05
";

fn mipsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mipsr")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    gt: PathBuf,
    lsr: PathBuf,
    reference: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let (gt, reference) = scene(3, 64, 64, 9).unwrap();
        let p = |n: &str| dir.path().join(n);
        let f = Fixture {
            gt: p("gt.png"),
            lsr: p("lsr.png"),
            reference: p("ref.png"),
            config: p("tiny.cfg"),
            dir,
        };
        save_image(&gt, &f.gt).unwrap();
        save_image(&reference, &f.reference).unwrap();
        std::fs::write(&f.config, TINY).unwrap();
        let out = mipsr(&["downsample", "--in", s(&f.gt), "--scale", "4", "--out", s(&f.lsr)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn sr(&self, out: &Path, extra: &[&str]) -> Output {
        let mut args = vec![
            "sr", "--lsr", s(&self.lsr), "--ref", s(&self.reference), "--out", s(out),
            "--config", s(&self.config), "--iters", "6",
        ];
        args.extend_from_slice(extra);
        mipsr(&args)
    }
}

#[test]
fn selftest_exits_zero() {
    let out = mipsr(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("gradient suite: ok") && text.contains("kernel suite: ok"));
}

#[test]
fn repeated_sr_runs_are_byte_identical() {
    let f = Fixture::new();
    let (a, b) = (f.path("a.png"), f.path("b.png"));
    let (la, lb) = (f.path("a.tsv"), f.path("b.tsv"));
    assert!(f.sr(&a, &["--log", s(&la)]).status.success());
    assert!(f.sr(&b, &["--log", s(&lb)]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&la).unwrap(), std::fs::read(&lb).unwrap());
    let c = f.path("c.png");
    assert!(f.sr(&c, &["--seed", "1"]).status.success());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(load_image(&a, Role::Sr).unwrap().shape(), [3, 64, 64]);
}

#[test]
fn log_and_metrics_output() {
    let f = Fixture::new();
    let (out_png, log) = (f.path("sr.png"), f.path("log.tsv"));
    let out = f.sr(&out_png, &["--log", s(&log), "--gt", s(&f.gt), "--set", "log_every=2"]);
    assert!(out.status.success());
    let log = std::fs::read_to_string(&log).unwrap();
    let iters: Vec<&str> = log.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(iters, ["1", "2", "4", "6"]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["psnr", "ssim", "vif", "ergas"] {
        assert!(json[key].as_f64().is_some(), "{json}");
    }
    assert_eq!(json["scale"], 4);
}

fn effective(f: &Fixture, extra: &[&str]) -> String {
    let out = f.sr(&f.path("unused.png"), &[&["--print-config"], extra].concat());
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn config_precedence_defaults_file_flags() {
    let f = Fixture::new();
    // the fixture always passes --iters 6, overriding the file's 500
    let text = effective(&f, &[]);
    assert!(text.contains("iterations = 6\n"), "{text}");
    assert!(text.contains("alpha = 0.05\n"));
    assert!(text.contains("scale = 4\n"));
    assert!(text.contains("lr = 0.0001\n"));

    let text = effective(&f, &["--set", "alpha=0.07", "--set", "iterations=9"]);
    assert!(text.contains("alpha = 0.07\n"));
    // explicit flags beat --set
    assert!(text.contains("iterations = 6\n"));

    let out = mipsr(&["sr", "--lsr", "x", "--ref", "y", "--out", "z", "--print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("iterations = 10000\n") && text.contains("alpha = 0.03\n"));
    assert!(!f.path("unused.png").exists());
}

#[test]
fn metrics_of_identical_images() {
    let f = Fixture::new();
    let out = mipsr(&["metrics", "--a", s(&f.gt), "--b", s(&f.gt)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(r#""psnr":"inf""#), "{text}");
    assert!(text.contains(r#""ergas":0.0"#));
}

#[test]
fn baseline_upsamples() {
    let f = Fixture::new();
    let up = f.path("up.png");
    let out = mipsr(&["baseline", "--in", s(&f.lsr), "--scale", "4", "--out", s(&up)]);
    assert!(out.status.success());
    assert_eq!(load_image(&up, Role::Sr).unwrap().shape(), [3, 64, 64]);
    assert_eq!(load_image(&f.lsr, Role::Lsr).unwrap().shape(), [3, 16, 16]);
}

#[test]
fn usage_errors_exit_two() {
    let f = Fixture::new();
    assert_eq!(mipsr(&["sr"]).status.code(), Some(2));
    assert_eq!(mipsr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mipsr(&["--help"]).status.code(), Some(0));
    let out = f.sr(&f.path("x.png"), &["--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f.sr(&f.path("x.png"), &["--scale", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mipsr(&["metrics", "--a", "/nonexistent.png", "--b", s(&f.gt)]);
    assert_eq!(out.status.code(), Some(1));
}
