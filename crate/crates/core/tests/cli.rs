use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clipmi::config::{open_backend, RunConfig};
use clipmi::eval::{acc_drop, acc_increase, accuracy, mean_auc};
use clipmi::imaging::concept_colour;
use clipmi::pipeline::{ImageInput, Pipeline};
use clipmi::world::SyntheticWorld;
use serde_json::Value;
use tempfile::TempDir;

struct Setup {
    _tmp: TempDir,
    world: PathBuf,
    out: PathBuf,
}

fn setup(per_class: usize) -> Setup {
    let tmp = tempfile::tempdir().unwrap();
    let world = tmp.path().join("world");
    SyntheticWorld::standard(3, per_class).write(&world).unwrap();
    let out = tmp.path().join("out");
    Setup { _tmp: tmp, world, out }
}

fn clipmi(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_clipmi"));
    c.args(args).env_remove("CLIPMI_MODEL");
    c
}

impl Setup {
    /// Runs a subcommand against the world with its encoder passed as a flag.
    fn run(&self, args: &[&str]) -> Output {
        let mut c = clipmi(args);
        c.arg("--model").arg(self.world.join("encoder.json"));
        self.data_args(&mut c);
        c.output().unwrap()
    }

    fn data_args(&self, c: &mut Command) {
        c.arg("--dataset")
            .arg(&self.world)
            .arg("--descriptors")
            .arg(self.world.join("descriptors.json"))
            .arg("--output")
            .arg(&self.out)
            .args(["--u", "10"]);
    }
}

fn ok(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn error_of(o: &Output) -> (i32, Value) {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let v: Value = serde_json::from_str(stderr.trim()).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    (o.status.code().unwrap(), v["error"].clone())
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn repeated_runs_are_byte_identical() {
    let s = setup(2);
    let cmds: [&[&str]; 5] = [&["extract"], &["explain"], &["mi"], &["evaluate"], &["boost"]];
    for c in cmds {
        ok(&s.run(c));
    }
    let first = snapshot(&s.out);
    for c in cmds {
        ok(&s.run(c));
    }
    assert!(first.len() > 50);
    assert_eq!(first, snapshot(&s.out));
}

#[test]
fn evaluate_matches_library_calls() {
    let s = setup(2);
    ok(&s.run(&["evaluate"]));
    let written = read_json(&s.out.join("evaluate/metrics.json"));

    let config: RunConfig = serde_json::from_value(written["config"].clone()).unwrap();
    let backend = open_backend(&config).unwrap();
    let (p, dataset) = Pipeline::from_config(config, backend.as_ref()).unwrap();
    let ex = p.explain(&ImageInput::from_dataset(&dataset).unwrap()).unwrap();
    let curves = p.faithfulness_all(&ex).unwrap();
    let del: Vec<_> = curves.iter().map(|c| c.deletion.clone()).collect();
    let ins: Vec<_> = curves.iter().map(|c| c.insertion.clone()).collect();
    let preds: Vec<_> = ex.iter().map(|e| e.analysis.prediction.clone()).collect();

    let m = &written["data"];
    assert_eq!(m["images"], 20);
    assert_eq!(m["deletion"].as_f64().unwrap(), mean_auc(&del).unwrap());
    assert_eq!(m["insertion"].as_f64().unwrap(), mean_auc(&ins).unwrap());
    assert_eq!(m["acc_drop"].as_f64().unwrap(), acc_drop(&del).unwrap());
    assert_eq!(m["acc_increase"].as_f64().unwrap(), acc_increase(&ins).unwrap());
    assert_eq!(m["accuracy"].as_f64().unwrap(), accuracy(&preds).unwrap());

    // The per-image CSVs carry the same deletion scores.
    for c in &curves {
        let text = fs::read_to_string(s.out.join(format!("evaluate/curves/{}.csv", c.image_id))).unwrap();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let col: Vec<f64> = r.records().map(|row| row.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(col, c.deletion.scores);
    }
}

#[test]
fn one_concept_overlay_uses_one_colour() {
    let s = setup(1);
    ok(&s.run(&["explain", "-l", "1", "--image", "img_004"]));
    let dir = s.out.join("explain/img_004");
    let seg = read_json(&dir.join("segmentation.json"));
    let labels: Vec<Option<u64>> = serde_json::from_value(seg["data"]["labels"].clone()).unwrap();
    assert!(labels.iter().flatten().count() > 0);
    assert!(labels.iter().flatten().all(|l| *l == 0));

    let config: RunConfig = serde_json::from_value(seg["config"].clone()).unwrap();
    let backend = open_backend(&config).unwrap();
    let (p, dataset) = Pipeline::from_config(config, backend.as_ref()).unwrap();
    let input = ImageInput::from_dataset(&dataset).unwrap().into_iter().find(|i| i.id == "img_004").unwrap();
    let clean = p.analyze(&input).unwrap().image;
    let overlay = image::open(dir.join("overlay.png")).unwrap().to_rgb8();
    assert_eq!(overlay.dimensions(), clean.dimensions());

    let colour = concept_colour(0);
    let mut tinted = 0;
    for (x, y, px) in overlay.enumerate_pixels() {
        let i = (y / 16 * 14 + x / 16) as usize;
        let base = clean.get_pixel(x, y).0;
        if labels[i].is_some() {
            // Integer blend at one half: out = floor((base + colour) / 2).
            for ch in 0..3 {
                let back = 2 * px.0[ch] as i32 - base[ch] as i32;
                assert!(back == colour[ch] as i32 || back + 1 == colour[ch] as i32, "({x},{y})");
            }
            tinted += 1;
        } else {
            assert_eq!(px.0, base);
        }
    }
    assert!(tinted > 0);
}

#[test]
fn flags_override_config_file_and_env() {
    let s = setup(1);
    let cfg = s.out.with_extension("json");
    fs::write(&cfg, r#"{"k": 7, "top_n": 2, "model": "/nonexistent/encoder.json"}"#).unwrap();

    // The env var beats the config file for the model path.
    let mut c = clipmi(&["ground", "--config", cfg.to_str().unwrap(), "--k", "3", "--image", "img_001"]);
    c.env("CLIPMI_MODEL", s.world.join("encoder.json"));
    s.data_args(&mut c);
    ok(&c.output().unwrap());
    let written = read_json(&s.out.join("ground/img_001.json"));
    assert_eq!(written["config"]["k"], 3);
    assert_eq!(written["config"]["top_n"], 2);
    assert_eq!(written["config"]["u"], 10);
    assert_eq!(written["config"]["model"], s.world.join("encoder.json").to_str().unwrap());

    // An explicit flag beats the env var.
    let mut c = clipmi(&["ground", "--model", "/nonexistent/flag.json"]);
    c.env("CLIPMI_MODEL", s.world.join("encoder.json"));
    s.data_args(&mut c);
    let (code, err) = error_of(&c.output().unwrap());
    assert_eq!(code, 1);
    assert!(err["message"].as_str().unwrap().contains("flag.json"), "{err}");
}

#[test]
fn failures_print_error_json() {
    let s = setup(1);

    let mut c = clipmi(&["explain"]);
    s.data_args(&mut c);
    let (code, err) = error_of(&c.output().unwrap());
    assert_eq!((code, err["kind"].as_str().unwrap()), (1, "config"));

    let onnx = s.world.join("model.onnx");
    fs::write(&onnx, b"not a graph").unwrap();
    let mut c = clipmi(&["mi", "--model", onnx.to_str().unwrap()]);
    s.data_args(&mut c);
    let (code, err) = error_of(&c.output().unwrap());
    assert_eq!((code, err["kind"].as_str().unwrap()), (1, "backend_unavailable"));

    let (code, err) = error_of(&s.run(&["explain", "--tau", "0"]));
    assert_eq!((code, err["kind"].as_str().unwrap()), (1, "config"));

    let (code, err) = error_of(&s.run(&["explain", "--class", "no such class"]));
    assert_eq!((code, err["kind"].as_str().unwrap()), (1, "invalid_input"));

    let (code, err) = error_of(&clipmi(&["explain", "--no-such-flag"]).output().unwrap());
    assert_eq!((code, err["kind"].as_str().unwrap()), (2, "usage"));

    assert!(!s.out.exists(), "failed runs left outputs behind");
}

#[test]
fn report_detects_modified_outputs() {
    let s = setup(1);
    ok(&s.run(&["explain"]));
    ok(&s.run(&["mi"]));
    let summary = ok(&s.run(&["report"]));
    assert_eq!(summary["failed"], 0);
    assert_eq!(snapshot(&s.out.join("report")).len(), 3);

    let path = s.out.join("mi/summary.csv");
    let text = fs::read_to_string(&path).unwrap();
    let last = text.trim_end().rsplit_once(',').unwrap().0.to_string();
    fs::write(&path, format!("{last},0.5\n")).unwrap();
    let (code, err) = error_of(&s.run(&["report"]));
    assert_eq!((code, err["kind"].as_str().unwrap()), (1, "format"));
    let verification = fs::read_to_string(s.out.join("report/verification.csv")).unwrap();
    assert!(verification.lines().any(|l| l.starts_with("mi,summary.csv,") && l.ends_with(",false")));
}
