use std::fs;
use std::path::Path;
use std::process::Command;

use bcnn::cli::{run, EXIT_CONFIG, EXIT_IO, EXIT_OK};
use bcnn::io::{checkpoint_load, ppm_load, tensor_load, tensor_save, AnyTensor};
use bcnn::Tensor;
use tempfile::TempDir;

fn bcnn(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(std::iter::once("bcnn").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SYNTH: &str = "classes = 3\nsize = 16\ntrain = 4\nval = 2\ntest = 3\nseed = 5\n";
const CONFIG: &str = "backbone = 4p,8\ntap = t2\nencoder = bilinear\nbank_taps = t1,t2\n\
                      epochs_head = 3\nepochs_finetune = 1\nbatch = 4\nbank_epochs = 5\n";

/// Synthetic data plus one trained checkpoint in a fresh directory.
fn trained(config: &str) -> (TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("synth.txt");
    fs::write(&spec, SYNTH).unwrap();
    let data = dir.path().join("data");
    let (code, out, err) = bcnn(&["synth", "--spec", p(&spec), "--out", p(&data)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("train\t12"), "{out}");
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, config).unwrap();
    let ck = dir.path().join("model.bckp");
    let (code, _, err) = bcnn(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ck)]);
    assert_eq!(code, EXIT_OK, "{err}");
    (dir, data, ck)
}

#[test]
fn train_eval_extract_invert() {
    let (dir, data, ck) = trained(CONFIG);

    let (code, out, _) = bcnn(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--confusion", "3"]);
    assert_eq!(code, EXIT_OK);
    let acc: f64 = out.lines().next().unwrap().strip_prefix("accuracy\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(out.lines().filter(|l| l.starts_with("confused")).count() <= 3);
    let (code, out, _) = bcnn(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--svm", "--flip-avg"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("accuracy\t"));

    let img = data
        .join(fs::read_to_string(data.join("test.tsv")).unwrap().lines().next().unwrap().split('\t').next().unwrap());
    let desc = dir.path().join("d.btf");
    let (code, out, _) = bcnn(&["extract", "--ckpt", p(&ck), "--image", p(&img), "--out", p(&desc)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("dim\t64\n"), "{out}");
    let norm: f64 = out.lines().nth(1).unwrap().strip_prefix("norm\t").unwrap().parse().unwrap();
    assert!((norm - 1.0).abs() < 1e-5);
    assert_eq!(tensor_load(&desc).unwrap().dims(), &[64]);

    let inv = dir.path().join("inv.ppm");
    let (code, out, err) =
        bcnn(&["invert", "--ckpt", p(&ck), "--class", "1", "--max-iters", "5", "--size", "16", "--out", p(&inv)]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("# gamma=1e-8\tbeta=2\tlayers=t1,t2"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("posterior")).count(), 2);
    let img: Tensor<f64> = ppm_load(&inv).unwrap();
    assert_eq!(img.dims(), &[16, 16, 3]);

    let (code, _, _) = bcnn(&["invert", "--ckpt", p(&ck), "--class", "3", "--out", p(&inv)]);
    assert_eq!(code, EXIT_CONFIG);
    let (code, _, _) = bcnn(&["invert", "--ckpt", p(&ck), "--class", "0", "--gamma=-1", "--out", p(&inv)]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn texture_encoders_train_in_both_precisions() {
    for (enc, extra) in [
        ("netvlad", "k = 3\ndtype = f32\n"),
        ("netfv", "k = 2\nfreeze_backbone = true\n"),
        ("netbovw", "k = 5\ndtype = f32\nscales = 0.75,1\nmultiscale = average\n"),
        ("bilinear", "rank = 2\ndtype = f32\n"),
    ] {
        let cfg = format!(
            "backbone = 4p,8\ntap = t2\nencoder = {enc}\n{extra}epochs_head = 2\nepochs_finetune = 1\nbatch = 4\n"
        );
        let (_dir, data, ck) = trained(&cfg);
        let (code, out, err) = bcnn(&["eval", "--ckpt", p(&ck), "--data", p(&data), "--split", "val"]);
        assert_eq!(code, EXIT_OK, "{enc}: {err}");
        assert!(out.starts_with("accuracy\t"), "{enc}: {out}");
    }
}

#[test]
fn zero_iteration_inversion_returns_initial_image() {
    let (dir, _, ck) = trained(CONFIG);
    let a = dir.path().join("a.ppm");
    let b = dir.path().join("b.ppm");
    for (seed, path) in [("3", &a), ("3", &b)] {
        let (code, out, _) = bcnn(&[
            "invert",
            "--ckpt",
            p(&ck),
            "--class",
            "0",
            "--max-iters",
            "0",
            "--size",
            "8",
            "--seed",
            seed,
            "--out",
            p(path),
        ]);
        assert_eq!(code, EXIT_OK);
        assert_eq!(out.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 1, "{out}");
    }
    let img: Tensor<f64> = ppm_load(&a).unwrap();
    assert!(img.data().iter().all(|&v| (0.4 - 1.0 / 255.0..=0.6 + 1.0 / 255.0).contains(&v)));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn training_is_deterministic() {
    let (_d1, _, a) = trained(CONFIG);
    let (_d2, _, b) = trained(CONFIG);
    assert_eq!(checkpoint_load(&a).unwrap(), checkpoint_load(&b).unwrap());
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.bckp");
    let (code, _, err) = bcnn(&["eval", "--ckpt", p(&missing), "--data", p(dir.path())]);
    assert_eq!(code, EXIT_IO);
    assert!(err.starts_with("error:"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "encoder = netvlad\nk = 0\n").unwrap();
    let (code, _, _) = bcnn(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(&missing)]);
    assert_eq!(code, EXIT_CONFIG);

    let garbage = dir.path().join("garbage.bckp");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let (code, _, _) = bcnn(&["eval", "--ckpt", p(&garbage), "--data", p(dir.path())]);
    assert_eq!(code, EXIT_IO);

    assert_eq!(bcnn(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(bcnn(&["--help"]).0, EXIT_OK);
}

#[test]
fn kmeans_init_on_two_points() {
    let dir = TempDir::new().unwrap();
    let feats = dir.path().join("f.btf");
    tensor_save(&AnyTensor::F64(Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap()), &feats).unwrap();
    let out_path = dir.path().join("mu.btf");
    let (code, out, _) = bcnn(&["kmeans-init", "--features", p(&feats), "--k", "2", "--out", p(&out_path)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("gamma\t"));
    let mu: Tensor<f64> = tensor_load(&out_path).unwrap().to();
    let mut rows: Vec<Vec<f64>> = (0..2).map(|i| mu.row(i).to_vec()).collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(rows, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
    assert!(checkpoint_load(out_path.with_extension("bckp")).unwrap().contains_key("encoder/gamma"));

    let (code, _, _) = bcnn(&["kmeans-init", "--features", p(&feats), "--k", "3", "--out", p(&out_path)]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let (code, out, _) = bcnn(&["gradcheck", "--seed", "1"]);
    assert_eq!(code, EXIT_OK, "{out}");
    let (code, out, _) = bcnn(&["gradcheck", "--inject-fault"]);
    assert_eq!(code, 1, "{out}");
}

#[test]
fn binary_exit_status() {
    let st = Command::new(env!("CARGO_BIN_EXE_bcnn"))
        .args(["extract", "--ckpt", "/nonexistent/x.bckp", "--image", "x.ppm", "--out", "y"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(EXIT_IO));
    assert!(st.stdout.is_empty());
}
