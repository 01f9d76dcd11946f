use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tseforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tseforge")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn s(&self, p: &str) -> String {
        self.path(p).to_string_lossy().into_owned()
    }
}

fn write_config(dir: &Path, preset: &str) -> PathBuf {
    let p = dir.join(format!("{preset}.toml"));
    std::fs::write(
        &p,
        format!(
            "preset = \"{preset}\"\nn_train = 2\nduration_s = 1.0\nenrollment_s = 1.0\n\
             steps = 2\nbatch_size = 2\nvalid_every = 0\n"
        ),
    )
    .unwrap();
    p
}

// One small trained model per backbone, a manifest and an evaluation, shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: TempDir::new().unwrap() };
        for preset in ["soundbeam-m2d-full", "waveformer-m2d-full"] {
            let cfg = write_config(f.dir.path(), preset);
            ok(&[
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out-dir",
                &f.s(preset),
            ]);
        }
        ok(&[
            "--seed",
            "7",
            "simulate",
            "--n",
            "2",
            "--classes",
            "4",
            "--duration",
            "1.0",
            "--out",
            &f.s("eval.jsonl"),
            "--wav-dir",
            &f.s("wavs"),
        ]);
        f
    })
}

fn ckpt(backbone: &str) -> String {
    fixture().s(&format!("{backbone}-m2d-full/model.safetensors"))
}

fn first_wav(sub: &str) -> PathBuf {
    let dir = fixture().path("wavs");
    let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.contains(sub) && n.ends_with(".wav"))
        })
        .collect();
    found.sort();
    found.into_iter().next().unwrap_or_else(|| panic!("no {sub} wav in {}", dir.display()))
}

#[test]
fn train_writes_run_files() {
    let f = fixture();
    for preset in ["soundbeam-m2d-full", "waveformer-m2d-full"] {
        for file in ["model.safetensors", "resolved.toml", "train_log.jsonl", "train.jsonl"] {
            assert!(f.path(preset).join(file).exists(), "{preset}/{file}");
        }
    }
}

#[test]
fn inspect_reports_normalized_weights() {
    let out = ok(&["inspect", "--checkpoint", &ckpt("soundbeam")]);
    assert!(out.contains("backbone: SoundBeam"), "{out}");
    for key in ["aie layer weights", "mhfa key weights", "mhfa value weights"] {
        let line = out.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("{key}: {out}"));
        let sum: f64 = line.rsplit("sum=").next().unwrap().trim().parse().unwrap();
        assert!((sum - 1.0).abs() < 1e-5, "{line}");
    }
}

#[test]
fn evaluate_then_report() {
    let f = fixture();
    let out_dir = f.s("eval_sb");
    let out = ok(&[
        "evaluate",
        "--checkpoint",
        &ckpt("soundbeam"),
        "--manifest",
        &f.s("eval.jsonl"),
        "--clue",
        "both",
        "--out-dir",
        &out_dir,
    ]);
    let rows: Vec<&str> = out
        .lines()
        .filter(|l| l.starts_with("class_label") || l.starts_with("enrollment"))
        .collect();
    assert_eq!(rows.len(), 2, "{out}");
    for file in ["metrics.csv", "summary.md", "per_class.svg"] {
        assert!(Path::new(&out_dir).join(file).exists(), "{file}");
    }
    let csv = std::fs::read_to_string(Path::new(&out_dir).join("metrics.csv")).unwrap();
    // header + 2 mixtures x 2 targets x 2 clue kinds
    assert_eq!(csv.lines().count(), 1 + 8);

    let re_dir = f.s("report_sb");
    let out2 = ok(&[
        "report",
        "--metrics",
        &format!("{out_dir}/metrics.csv"),
        "--manifest",
        &f.s("eval.jsonl"),
        "--out-dir",
        &re_dir,
    ]);
    let rows2: Vec<&str> = out2
        .lines()
        .filter(|l| l.starts_with("class_label") || l.starts_with("enrollment"))
        .collect();
    assert_eq!(rows, rows2);
    assert!(Path::new(&re_dir).join("per_class.svg").exists());
}

#[test]
fn extract_with_label_and_enrollment() {
    let f = fixture();
    let mix = first_wav("_mix");
    let enroll = first_wav("enroll");
    let out = f.s("x_label.wav");
    ok(&[
        "extract",
        "--checkpoint",
        &ckpt("soundbeam"),
        "--mixture",
        mix.to_str().unwrap(),
        "--label",
        "1",
        "--out",
        &out,
    ]);
    let n_mix = hound::WavReader::open(&mix).unwrap().len();
    assert_eq!(hound::WavReader::open(&out).unwrap().len(), n_mix);

    let out = f.s("x_enroll.wav");
    ok(&[
        "extract",
        "--checkpoint",
        &ckpt("soundbeam"),
        "--mixture",
        mix.to_str().unwrap(),
        "--enroll",
        enroll.to_str().unwrap(),
        "--out",
        &out,
    ]);
    assert_eq!(hound::WavReader::open(&out).unwrap().len(), n_mix);
}

#[test]
fn streaming_extract_matches_offline() {
    let f = fixture();
    let mix = first_wav("_mix");
    let a = f.s("wf_offline.wav");
    let b = f.s("wf_stream.wav");
    for (out, chunk) in [(&a, None), (&b, Some("128"))] {
        let mut args = vec![
            "extract",
            "--checkpoint",
            &ckpt_wf(),
            "--mixture",
            mix.to_str().unwrap(),
            "--label",
            "0",
            "--out",
            out,
        ]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
        if let Some(c) = chunk {
            args.extend(["--chunk".to_string(), c.to_string()]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    }
    let read = |p: &str| -> Vec<f32> {
        hound::WavReader::open(p).unwrap().samples::<f32>().map(|s| s.unwrap()).collect()
    };
    let (xa, xb) = (read(&a), read(&b));
    assert_eq!(xa.len(), xb.len());
    let max = xa.iter().zip(&xb).map(|(p, q)| (p - q).abs()).fold(0f32, f32::max);
    assert!(max < 1e-4, "max diff {max}");
}

fn ckpt_wf() -> String {
    ckpt("waveformer")
}

#[test]
fn clue_arguments_are_exclusive_and_required() {
    let f = fixture();
    let mix = first_wav("_mix");
    let enroll = first_wav("enroll");
    let base = ["extract", "--checkpoint", &ckpt("soundbeam"), "--mixture", mix.to_str().unwrap()];
    let out = f.s("never.wav");

    let mut both = base.to_vec();
    both.extend(["--label", "0", "--enroll", enroll.to_str().unwrap(), "--out", &out]);
    assert_eq!(run(&both).status.code(), Some(2));

    let mut neither = base.to_vec();
    neither.extend(["--out", &out]);
    assert_eq!(run(&neither).status.code(), Some(2));

    let mut unknown = base.to_vec();
    unknown.extend(["--label", "99", "--out", &out]);
    assert_eq!(run(&unknown).status.code(), Some(2));
    assert!(!Path::new(&out).exists());
}

#[test]
fn missing_checkpoint_exits_one() {
    let dir = TempDir::new().unwrap();
    let o = run(&["inspect", "--checkpoint", dir.path().join("nope.safetensors").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!o.stderr.is_empty());
}

#[test]
fn bad_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"soundbeam-baseline\"\nlearning_rate = 1.0\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["train", "--preset", "no-such-preset", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn streaming_is_rejected_for_offline_backbone() {
    let f = fixture();
    let mix = first_wav("_mix");
    let o = run(&[
        "extract",
        "--checkpoint",
        &ckpt("soundbeam"),
        "--mixture",
        mix.to_str().unwrap(),
        "--label",
        "0",
        "--out",
        &f.s("never2.wav"),
        "--chunk",
        "128",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    for sub in [&["--help"][..], &["train", "--help"], &["extract", "--help"], &["evaluate", "--help"]] {
        assert_eq!(run(sub).status.code(), Some(0), "{sub:?}");
    }
}

#[test]
fn simulate_is_deterministic_under_seed() {
    let dir = TempDir::new().unwrap();
    let mut bytes = Vec::new();
    for (i, seed) in ["3", "3", "4"].iter().enumerate() {
        let out = dir.path().join(format!("m{i}.jsonl"));
        ok(&["--seed", seed, "simulate", "--n", "3", "--duration", "1.0", "--out", out.to_str().unwrap()]);
        bytes.push(std::fs::read(out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_ne!(bytes[0], bytes[2]);
}

#[test]
fn resolved_config_reloads_to_the_same_run() {
    let f = fixture();
    let resolved = f.path("soundbeam-m2d-full").join("resolved.toml");
    let text = std::fs::read_to_string(&resolved).unwrap();
    let run = tseforge::trainer::RunConfig::from_toml(&text).unwrap();
    assert_eq!(run.to_toml().unwrap(), text);
    assert_eq!(run.resolve().unwrap().run, run);
}
