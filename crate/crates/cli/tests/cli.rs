use std::path::Path;
use std::process::{Command, Output};

use wearseg::dataio::{load_mask, ClassPalette, NUM_CLASSES};

const SMALL: [&str; 10] = [
    "--set",
    "data.n_train=4",
    "--set",
    "data.n_validation=2",
    "--set",
    "data.n_test=2",
    "--set",
    "train.epochs=2",
    "--set",
    "unet.phi=1/16",
];

fn wearseg(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wearseg"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out_dir: &Path) -> String {
    let out = wearseg(args, out_dir);
    assert!(
        out.status.success(),
        "wearseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, eval) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("eval"));
    ok(&with_small(&["synth"]), &data);
    assert!(data.join("split.tsv").is_file());
    assert!(data.join("images/train00000.png").is_file());
    assert!(data.join("masks/test00001.png").is_file());

    ok(&with_small(&["train", "--data", s(&data)]), &run);
    for f in ["best.ckpt", "last.ckpt", "history.csv", "config-train.txt", "manifest-train.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");

    let best = run.join("best.ckpt");
    let stdout = ok(&with_small(&["eval", "--data", s(&data), "--checkpoint", s(&best)]), &eval);
    assert!(stdout.contains("2 test images"), "{stdout}");
    let metrics = std::fs::read_to_string(eval.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert!(rows[0].starts_with("id,iou_background"));
    assert_eq!(rows.len(), 1 + 2 + 2);
    assert!(rows[3].starts_with("micro,") && rows[4].starts_with("macro,"));
}

#[test]
fn resolved_config_reproduces_a_run_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&with_small(&["synth", "--seed", "3"]), &data);
    let first = tmp.path().join("first");
    ok(&with_small(&["train", "--seed", "3", "--data", s(&data)]), &first);
    let second = tmp.path().join("second");
    ok(&["train", "--config", s(&first.join("config-train.txt"))], &second);
    for f in ["history.csv", "best.ckpt", "last.ckpt", "config-train.txt"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(second.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let manifest = |dir: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest-train.json")).unwrap()).unwrap()
    };
    let (a, b) = (manifest(&first), manifest(&second));
    assert_eq!(a["config_sha256"], b["config_sha256"]);
    assert_eq!(a["seed"], 3);
    assert_eq!(a["versions"]["checkpoint_format"], 1);
}

#[test]
fn predict_writes_a_decodable_mask_beside_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&with_small(&["synth"]), &data);
    ok(&with_small(&["train", "--data", s(&data)]), &run);
    let input = tmp.path().join("frame.png");
    std::fs::copy(data.join("images/train00000.png"), &input).unwrap();
    ok(
        &["predict", "--checkpoint", s(&run.join("best.ckpt")), s(&input)],
        &tmp.path().join("pred"),
    );
    let mask = load_mask(tmp.path().join("frame_mask.png"), &ClassPalette::default()).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
    assert!(mask.classes().iter().all(|&c| (c as usize) < NUM_CLASSES));
}

#[test]
fn timing_prints_the_twenty_micron_row() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["timing"], tmp.path());
    let row = stdout
        .lines()
        .find(|l| l.split_whitespace().next() == Some("20.00"))
        .unwrap_or_else(|| panic!("no 20 um row in\n{stdout}"));
    let cols: Vec<f64> = row.split_whitespace().map(|c| c.parse().unwrap()).collect();
    assert!((cols[1] - 21.3).abs() <= 0.5, "{row}");
    assert!((cols[2] - 20.0).abs() < 1e-2, "{row}");
    assert!((cols[3] - 3.2).abs() < 1e-2, "{row}");
    assert!(tmp.path().join("timing.csv").is_file());
}

fn failure(args: &[&str], out_dir: &Path) -> String {
    let out = wearseg(args, out_dir);
    assert!(!out.status.success(), "wearseg {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    stderr
}

#[test]
fn failures_print_one_categorised_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# run\ntrain.epochs = 3\ntrain.epoch = 4\n").unwrap();
    let err = failure(&["timing", "--config", s(&cfg)], tmp.path());
    assert!(err.starts_with("error[config]: "), "{err}");
    assert!(err.contains("run.cfg:3") && err.contains("train.epoch"), "{err}");

    let err = failure(&["train", "--data", s(&tmp.path().join("absent"))], tmp.path());
    assert!(err.starts_with("error[missing-path]: "), "{err}");

    let err = failure(
        &[
            "synth",
            "--set",
            "unet.depth=5",
            "--set",
            "unet.base_dropout=[0.1,0.1,0.2,0.2,0.3,0.3]",
            "--set",
            "unet.phi=0.5",
            "--set",
            "synth.width=48",
        ],
        tmp.path(),
    );
    assert!(err.starts_with("error[config]: ") && err.contains("data.fit"), "{err}");
}

#[test]
fn grid_bayes_and_series_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    ok(&with_small(&["synth", "--sequence", "--set", "series.frames=6", "--set", "series.cleanings=[250]"]), &data);

    let grid = tmp.path().join("grid");
    let mut args = with_small(&["grid", "--data", s(&data)]);
    args.extend(["--set", "grid.phis=[0.0625]", "--set", "grid.batch_sizes=[2,4]", "--set", "grid.epochs=1"]);
    ok(&args, &grid);
    let table = std::fs::read_to_string(grid.join("grid.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 + 1, "{table}");
    assert!(table.lines().last().unwrap().starts_with("argmax,0.0625,"));

    let bayes = tmp.path().join("bayes");
    let mut args = with_small(&["bayes", "--data", s(&data)]);
    args.extend(["--set", "bayes.initial_samples=2", "--set", "bayes.iterations=2", "--set", "train.epochs=1"]);
    ok(&args, &bayes);
    let trace = std::fs::read_to_string(bayes.join("bayes.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4, "{trace}");
    assert!(trace.starts_with("evaluation,w_adhesive,w_spalling,val_adhesive_iou"));

    ok(&with_small(&["train", "--data", s(&data)]), &run);
    let series = tmp.path().join("series");
    ok(
        &[
            "series",
            "--checkpoint",
            s(&run.join("best.ckpt")),
            "--sequence",
            s(&data.join("sequence")),
        ],
        &series,
    );
    let truth = std::fs::read_to_string(series.join("series_truth.csv")).unwrap();
    let pred = std::fs::read_to_string(series.join("series.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + 6 * 6);
    assert_eq!(truth.lines().next(), Some("stroke,class,count"));
    let adhesive: Vec<u64> = truth
        .lines()
        .filter(|l| l.contains(",adhesive_wear,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(adhesive.len(), 6);
    assert!(adhesive[4] < adhesive[3], "cleaning at stroke 250: {adhesive:?}");
}
