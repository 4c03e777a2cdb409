use std::path::Path;
use std::process::{Command, Output};

use incepformer::analysis::{count_params, estimate_flops};
use incepformer::model::ModelConfig;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incepformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_csv_totals_match_library() {
    let out = run(&["analyze", "--model", "ipt-t", "--input", "512x512", "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(reader.headers().unwrap(), vec!["layer", "params", "flops"]);
    let rows: Vec<(String, u64, u64)> = reader.deserialize().map(Result::unwrap).collect();
    let (total, layers) = rows.split_last().unwrap();
    assert_eq!(total.0, "total");
    assert_eq!(total.1, layers.iter().map(|r| r.1).sum::<u64>());
    assert_eq!(total.2, layers.iter().map(|r| r.2).sum::<u64>());
    let lib = estimate_flops(&ModelConfig::ipt_t(), 512, 512).unwrap();
    assert_eq!((total.1, total.2), (lib.totals.params, lib.totals.flops));
    assert_eq!(total.1, count_params(&ModelConfig::ipt_t()).totals.params);
}

#[test]
fn analyze_ipt_b_parameter_total() {
    let out = run(&["analyze", "--model", "ipt-b", "--format", "json"]);
    assert_eq!(code(&out), 0);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let millions = doc["totals"]["params"].as_u64().unwrap() as f64 / 1e6;
    assert!((millions / 39.6 - 1.0).abs() <= 0.20, "{millions}M");
}

#[test]
fn ipt_s_preset_depths() {
    let out = run(&["analyze", "--model", "ipt-s", "--format", "json"]);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mut depths = [0usize; 4];
    for row in doc["rows"].as_array().unwrap() {
        let layer = row["layer"].as_str().unwrap();
        let parts: Vec<&str> = layer.split('/').collect();
        if let (Some(stage), Some(block)) = (
            parts[0].strip_prefix("stage"),
            parts.get(1).and_then(|b| b.strip_prefix("block")),
        ) {
            let (s, b): (usize, usize) = (stage.parse().unwrap(), block.parse().unwrap());
            depths[s - 1] = depths[s - 1].max(b + 1);
        }
    }
    assert_eq!(depths, [3, 4, 12, 3]);
}

#[test]
fn gradcheck_micro_passes() {
    let out = run(&["gradcheck", "--model", "micro", "--dtype", "f64", "--format", "csv"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut reader = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(rows.iter().any(|r| &r[0] == "op") && rows.iter().any(|r| &r[0] == "param"));
    assert!(rows.iter().all(|r| &r[5] == "true"));
}

#[test]
fn gradcheck_failure_exits_one() {
    // a tolerance no finite-difference estimate can meet
    let out = run(&["gradcheck", "--ops-only", "--tol", "1e-300"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["analyze", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["analyze", "--input", "512"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn invalid_config_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::micro();
    cfg.stages[1].heads = 3;
    let file = dir.path().join("bad.json");
    std::fs::write(&file, cfg.to_json()).unwrap();
    let out = run(&["analyze", "--model", path(&file)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stages[1]"));

    std::fs::write(&file, "{\"stages\": [}").unwrap();
    let out = run(&["analyze", "--model", path(&file)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    assert_eq!(code(&run(&["train", "--crop", "50x50"])), 3);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.json");
    std::fs::write(&file, ModelConfig::ipt_s().to_json()).unwrap();
    let from_file = run(&["analyze", "--model", path(&file), "--input", "64x64", "--format", "csv"]);
    let preset = run(&["analyze", "--model", "ipt-s", "--input", "64x64", "--format", "csv"]);
    assert_eq!(code(&from_file), 0);
    assert_eq!(from_file.stdout, preset.stdout);
}

#[test]
fn missing_checkpoint_exits_four() {
    assert_eq!(code(&run(&["eval", "--checkpoint", "/nonexistent/x.ckpt"])), 4);
}

#[test]
fn train_log_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let file = |name: &str| dir.path().join(name);
    let cfg = file("train.json");
    std::fs::write(
        &cfg,
        r#"{"max_iters": 6, "base_lr": 0.001, "crop": [32, 32], "seed": 3}"#,
    )
    .unwrap();
    let train = |extra: &[&str]| {
        let base = [
            "train",
            "--model",
            "micro",
            "--input",
            "32x32",
            "--samples",
            "4",
            "--config",
            path(&cfg),
        ];
        run(&[&base[..], extra].concat())
    };

    let whole = train(&["--out", path(&file("full.ckpt"))]);
    assert_eq!(code(&whole), 0, "{}", String::from_utf8_lossy(&whole.stderr));
    let log = stdout(&whole);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iter,lr,loss");
    assert_eq!(lines.len(), 7);
    for (i, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[0], i.to_string());
        assert!(fields[1].parse::<f64>().unwrap() >= 0.0);
        assert!(fields[2].parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(train(&["--out", path(&file("again.ckpt"))]).stdout, whole.stdout);

    // three steps of the same schedule, checkpointed through the library
    let head = file("head.ckpt");
    {
        use incepformer::model::IncepFormer;
        use incepformer::train::{make_synth_dataset, TrainConfig, Trainer};
        let tc: TrainConfig = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
        let data = make_synth_dataset(4, 32, 32, 2, 3).unwrap();
        let mut t = Trainer::new(IncepFormer::<f32>::new(ModelConfig::micro(), 3).unwrap(), tc).unwrap();
        for _ in 0..3 {
            t.step(&data).unwrap();
        }
        t.checkpoint().save(&head).unwrap();
    }
    let resumed = train(&["--checkpoint", path(&head), "--out", path(&file("rest.ckpt"))]);
    assert_eq!(code(&resumed), 0, "{}", String::from_utf8_lossy(&resumed.stderr));
    let tail = stdout(&resumed);
    assert_eq!(tail.lines().skip(1).collect::<Vec<_>>(), lines[4..]);
    assert_eq!(
        std::fs::read(file("rest.ckpt")).unwrap(),
        std::fs::read(file("full.ckpt")).unwrap()
    );
}

fn pnm_header(bytes: &[u8]) -> (String, usize, usize, usize, usize) {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).to_string();
    let mut fields = text.split_ascii_whitespace();
    let magic = fields.next().unwrap().to_string();
    let w: usize = fields.next().unwrap().parse().unwrap();
    let h: usize = fields.next().unwrap().parse().unwrap();
    let max: usize = fields.next().unwrap().parse().unwrap();
    let header = format!("{magic}\n{w} {h}\n{max}\n").len();
    (magic, w, h, max, header)
}

#[test]
fn infer_writes_masks_at_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let (mask, color) = (dir.path().join("m.pgm"), dir.path().join("m.ppm"));
    let out = run(&[
        "infer",
        "--input",
        "96x64",
        "--seed",
        "2",
        "--out",
        path(&mask),
        "--color",
        path(&color),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = std::fs::read(&mask).unwrap();
    let (magic, w, h, max, header) = pnm_header(&pgm);
    assert_eq!((magic.as_str(), w, h, max), ("P5", 96, 64, 255));
    assert_eq!(pgm.len(), header + w * h);
    assert!(pgm[header..].iter().all(|&c| c < 2));
    let ppm = std::fs::read(&color).unwrap();
    let (magic, w, h, _, header) = pnm_header(&ppm);
    assert_eq!((magic.as_str(), w, h), ("P6", 96, 64));
    assert_eq!(ppm.len(), header + 3 * w * h);

    // the color rendering is itself a valid input image
    let again = dir.path().join("again.pgm");
    assert_eq!(
        code(&run(&["infer", "--image", path(&color), "--out", path(&again)])),
        0
    );
    assert_eq!(pnm_header(&std::fs::read(&again).unwrap()).1, 96);

    let twice = dir.path().join("twice.pgm");
    run(&["infer", "--input", "96x64", "--seed", "2", "--out", path(&twice)]);
    assert_eq!(std::fs::read(&twice).unwrap(), pgm);
}

#[test]
fn eval_reports_miou() {
    let out = run(&["eval", "--samples", "2", "--input", "32x32", "--format", "json"]);
    assert_eq!(code(&out), 0);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let miou = doc["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(doc["scored_pixels"].as_u64(), Some(2 * 32 * 32));
}
