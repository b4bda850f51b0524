use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dropnet::data::{encode_idx_images, encode_idx_labels, read_examples, IdxImages};
use dropnet::model::read_checkpoint;
use dropnet_cli::config::parse_config;
use dropnet_cli::experiment::{cell_file_name, run_experiment, Mode, SUMMARY_METRICS};

fn dropnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dropnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(format!("{name}.conf"));
    let text = format!("name = {name}\noutput = {}\n{body}", dir.join("out").display());
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "data = halfspace\nd = 6\ngamma0 = 0.4\nq = 0.5\neta = 0.5\n";

fn data_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn single_iteration_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "smoke", &format!("{SMALL}m = 32\nT = 1\n"));
    let out = dropnet(&["run", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out/smoke");
    assert_eq!(data_rows(&dir.join(cell_file_name(32, 0.5, 0))).len(), 1);
    assert_eq!(data_rows(&dir.join("summary.csv")).len(), 1);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("lemma_report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 1);
}

#[test]
fn invalid_configs_fail_with_reasons() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad", &format!("{SMALL}m = 32\nT = 5\ntheory = true\n").replace("eta = 0.5", "eta = 0.8"));
    let out = dropnet(&["run", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ln 2"));

    let cfg = write_config(tmp.path(), "neg", &format!("{SMALL}m = 32\nT = 5\n").replace("gamma0 = 0.4", "gamma0 = -0.4"));
    let out = dropnet(&["run", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gamma0"));

    let out = dropnet(&["run", tmp.path().join("missing.conf").to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}m = 16, 64\nT = 120\nseeds = 2\nn_random_masks = 3\nn_mc = 200\n");
    let one = write_config(tmp.path(), "a", &format!("{body}threads = 1\n"));
    let two = write_config(tmp.path(), "b", &format!("{body}threads = 2\n"));
    assert!(dropnet(&["run", &one]).status.success());
    assert!(dropnet(&["run", &two]).status.success());
    let (da, db) = (tmp.path().join("out/a"), tmp.path().join("out/b"));
    for file in [cell_file_name(16, 0.5, 0), cell_file_name(64, 0.5, 1), "summary.csv".into()] {
        assert_eq!(fs::read(da.join(&file)).unwrap(), fs::read(db.join(&file)).unwrap(), "{file}");
    }
    assert!(dropnet(&["run", &one]).status.success());
    assert_eq!(
        fs::read(da.join(cell_file_name(64, 0.5, 1))).unwrap(),
        fs::read(db.join(cell_file_name(64, 0.5, 1))).unwrap()
    );
}

#[test]
fn summary_matches_per_seed_files() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "name = sum\noutput = {}\n{SMALL}m = 24\nT = 80\nseeds = 3\nseed = 4\nn_mc = 300\nthreads = 1\n",
        tmp.path().display()
    );
    let spec = parse_config(&text).unwrap();
    let res = run_experiment(&spec, Mode::Run).unwrap();
    let summary = data_rows(&res.dir.join("summary.csv"));
    assert_eq!(summary.len(), 1);
    let header = csv::Reader::from_path(res.dir.join("summary.csv")).unwrap().headers().unwrap().clone();
    let cell_header = csv::Reader::from_path(res.dir.join(cell_file_name(24, 0.5, 4))).unwrap().headers().unwrap().clone();
    let col = |name: &str| cell_header.iter().position(|h| h == name).unwrap();
    let lasts: Vec<csv::StringRecord> = (4..7)
        .map(|s| data_rows(&res.dir.join(cell_file_name(24, 0.5, s))).pop().unwrap())
        .collect();
    for metric in SUMMARY_METRICS {
        let values: Vec<Option<f64>> = lasts
            .iter()
            .map(|row| match metric {
                "flip_fraction" => Some(row[col("flip_count")].parse::<f64>().unwrap() / 24.0),
                name => row[col(name)].parse().ok(),
            })
            .collect();
        let got = &summary[0][header.iter().position(|h| h == format!("{metric}_mean")).unwrap()];
        match values.into_iter().collect::<Option<Vec<f64>>>() {
            Some(v) => {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                assert!((got.parse::<f64>().unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{metric}");
            }
            None => assert_eq!(got, "", "{metric}"),
        }
    }
}

#[test]
fn verify_writes_lemma_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "v", &format!("{SMALL}m = 64\nT = 150\nseeds = 2\n"));
    let out = dropnet(&["verify", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("preconditions unmet") && stdout.contains("regret"));
    let dir = tmp.path().join("out/v");
    assert!(!dir.join("summary.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("lemma_report.json")).unwrap()).unwrap();
    let lemmas = report["cells"][0]["lemmas"].as_array().unwrap();
    let regret = lemmas.iter().find(|l| l["id"] == "regret").unwrap();
    assert_eq!(regret["seeds_passed"], 2);
    assert_eq!(regret["seeds_total"], 2);

    let fast = write_config(tmp.path(), "fast", &format!("{SMALL}m = 8\nT = 5\n").replace("eta = 0.5", "eta = 0.9"));
    assert!(!dropnet(&["verify", &fast]).status.success());
}

#[test]
fn bounds_subcommand() {
    let out = dropnet(&["bounds", "--gamma", "0.25", "--eta", "0.5", "--T", "1000", "--m", "4096", "--d", "20"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("c                = 11.24024350140311"), "{text}");
    let json = dropnet(&["bounds", "--gamma", "0.25", "--eta", "0.5", "--T", "1000", "--m", "4096", "--d", "20", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(v["width_sufficient"], false);
    assert!(!dropnet(&["bounds", "--gamma", "0", "--eta", "0.5", "--T", "10", "--m", "4", "--d", "2"]).status.success());
}

#[test]
fn mnist_export_and_text_training() {
    let tmp = tempfile::tempdir().unwrap();
    let (rows, cols, n) = (4, 4, 60);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 3) as u8;
        for p in 0..rows * cols {
            let bright = if label == 1 { p < 8 } else { p >= 8 };
            pixels.push(if bright { 200 + (i % 7) as u8 } else { (i % 5) as u8 });
        }
        labels.push(label);
    }
    let images = IdxImages { rows, cols, pixels };
    fs::write(tmp.path().join("train-images-idx3-ubyte"), encode_idx_images(&images)).unwrap();
    fs::write(tmp.path().join("train-labels-idx1-ubyte"), encode_idx_labels(&labels)).unwrap();
    let dir = tmp.path().to_str().unwrap();
    let out = dropnet(&["mnist-prepare", dir, "--pos", "1", "--neg", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let export = tmp.path().join("mnist_1_2.txt");
    let examples = read_examples(std::io::BufReader::new(fs::File::open(&export).unwrap())).unwrap();
    assert_eq!(examples.len(), 40);
    assert!(examples.iter().all(|e| e.dim() == 16));

    let body = format!(
        "data = text\ndata_path = {}\nm = 32\nq = 0.5\nT = 25\neta = 0.5\nc = 5\ncheckpoint_stride = 10\n",
        export.display()
    );
    let cfg = write_config(tmp.path(), "text", &body);
    let out = dropnet(&["run", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cell_dir = tmp.path().join("out/text");
    assert_eq!(data_rows(&cell_dir.join(cell_file_name(32, 0.5, 0))).len(), 25);
    let ck = read_checkpoint(fs::File::open(cell_dir.join("ckpt_m32_q0.5_s0_t11.bin")).unwrap()).unwrap();
    assert_eq!((ck.iteration, ck.params.width(), ck.params.dim()), (11, 32, 16));

    let mnist_cfg = write_config(
        tmp.path(),
        "idx",
        &format!("data = mnist\nmnist_dir = {dir}\ndigit_pos = 1\ndigit_neg = 2\nm = 16\nq = 0.5\nT = 40\neta = 0.5\nc = 5\n"),
    );
    // 40 examples with a 20% hold-out leave 32 for training
    let out = dropnet(&["run", &mnist_cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("iteration 33"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        parse_config(&fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 4);
}
