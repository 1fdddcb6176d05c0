//! The `bcnn` command line. Results go to `out` as TSV, diagnostics to
//! `err`; the return value is the process exit code.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::encoders::kmeans_init;
use crate::error::{config_err, Error, Result};
use crate::gradsuite::{run_grad_suite, Fault};
use crate::invert::{invert_category, InversionConfig, LayerClassifierBank};
use crate::io::{
    checkpoint_load, checkpoint_save, ppm_load, ppm_save, synth_generate, tensor_load, tensor_save, AnyTensor,
    Checkpoint, Manifest, SyntheticTextureSpec, SPLITS,
};
use crate::model::{Input, Model};
use crate::tensor::Tensor;
use crate::train::{confusion_top_pairs, evaluate, fit_svms, train_two_step, Sample};
use crate::{DType, Scalar};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bcnn", version, about = "Orderless pooling encoders: training, evaluation, inversion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic texture dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed given in `--spec`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Two-step training, SVM fitting and (optionally) the inversion bank.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory with train.tsv and optionally val.tsv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy on a manifest split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        svm: bool,
        #[arg(long)]
        flip_avg: bool,
        #[arg(long, value_name = "N")]
        confusion: Option<usize>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write the normalized descriptor of one image.
    Extract {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Reconstruct an image the classifier bank assigns to a class.
    Invert {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 1e-8)]
        gamma: f64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Comma-separated taps; defaults to every tap in the bank.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-means codebook from a feature sample (rows of an N×d TensorFile).
    KmeansInit {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Format(_) => EXIT_IO,
        Error::Numeric(_) => EXIT_CHECK,
        Error::Shape(_) | Error::Config(_) | Error::Contract(_) | Error::Alignment(_) => EXIT_CONFIG,
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.cmd, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Cmd, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Cmd::Synth { spec, out: dir, seed } => {
            let mut s = SyntheticTextureSpec::parse(&read_text(&spec)?)?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            emit(out, format_args!("seed\t{}", s.seed))?;
            let manifests = synth_generate(&s, &dir)?;
            for (name, m) in SPLITS.iter().zip(&manifests) {
                emit(out, format_args!("{name}\t{}", m.len()))?;
            }
            Ok(EXIT_OK)
        }
        Cmd::Train { config, data, out: path, seed } => {
            let mut rc = RunConfig::parse(&read_text(&config)?)?;
            if let Some(seed) = seed {
                rc.train.seed = seed;
            }
            let train = Manifest::load(data.join("train.tsv"), None)?;
            let val_path = data.join("val.tsv");
            let val = if val_path.exists() { Some(Manifest::load(&val_path, None)?) } else { None };
            let seen = train.num_classes().max(val.as_ref().map_or(0, Manifest::num_classes));
            rc.resolve_classes(seen)?;
            if train.is_empty() {
                return Err(config_err!("training manifest is empty"));
            }
            emit(out, format_args!("seed\t{}", rc.train.seed))?;
            match rc.dtype {
                DType::F32 => train_cmd::<f32>(&rc, &train, val.as_ref(), &path, out, err),
                DType::F64 => train_cmd::<f64>(&rc, &train, val.as_ref(), &path, out, err),
            }
        }
        Cmd::Eval { ckpt, data, svm, flip_avg, confusion, split } => {
            let ck = checkpoint_load(&ckpt)?;
            let rc = RunConfig::load(&ck)?;
            let m = Manifest::load(data.join(format!("{split}.tsv")), None)?;
            if m.num_classes() > rc.model.classes {
                return Err(config_err!(
                    "data has labels up to {} but the checkpoint has {} classes",
                    m.num_classes() - 1,
                    rc.model.classes
                ));
            }
            let opts = EvalOpts { svm, flip_avg, confusion };
            match rc.dtype {
                DType::F32 => eval_cmd::<f32>(&rc, &ck, &m, opts, out),
                DType::F64 => eval_cmd::<f64>(&rc, &ck, &m, opts, out),
            }
        }
        Cmd::Extract { ckpt, image, out: path } => {
            let ck = checkpoint_load(&ckpt)?;
            let rc = RunConfig::load(&ck)?;
            match rc.dtype {
                DType::F32 => extract_cmd::<f32>(&rc, &ck, &image, &path, out),
                DType::F64 => extract_cmd::<f64>(&rc, &ck, &image, &path, out),
            }
        }
        Cmd::Gradcheck { seed, inject_fault } => {
            emit(out, format_args!("seed\t{seed}"))?;
            let fault = inject_fault.then_some(Fault::BilinearSign);
            if fault.is_some() {
                let _ = writeln!(err, "note: fault injected into the bilinear backward");
            }
            let report = run_grad_suite(seed, fault)?;
            write!(out, "{report}").map_err(stdout_err)?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK })
        }
        Cmd::Invert { ckpt, class, gamma, beta, max_iters, layers, size, seed, out: path } => {
            let ck = checkpoint_load(&ckpt)?;
            let rc = RunConfig::load(&ck)?;
            let icfg = InversionConfig { gamma, beta, layers, max_iters, height: size, width: size, seed };
            match rc.dtype {
                DType::F32 => invert_cmd::<f32>(&rc, &ck, class, icfg, &path, out),
                DType::F64 => invert_cmd::<f64>(&rc, &ck, class, icfg, &path, out),
            }
        }
        Cmd::KmeansInit { features, k, out: path, seed, iters } => {
            let feats: Tensor<f64> = tensor_load(&features)?.to();
            if feats.rank() != 2 {
                return Err(config_err!("features must be an N×d matrix, got dims {:?}", feats.dims()));
            }
            emit(out, format_args!("seed\t{seed}"))?;
            let cb = kmeans_init(&feats, k, seed, iters)?;
            tensor_save(&cb.mu().clone().into(), &path)?;
            let mut ck = Checkpoint::new();
            ck.insert("encoder/mu".into(), cb.mu().clone().into());
            ck.insert("encoder/w".into(), cb.w().clone().into());
            ck.insert("encoder/b".into(), cb.b().clone().into());
            ck.insert("encoder/gamma".into(), Tensor::scalar(cb.gamma()).into());
            checkpoint_save(&ck, path.with_extension("bckp"))?;
            emit(out, format_args!("gamma\t{:?}", cb.gamma()))?;
            Ok(EXIT_OK)
        }
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(stdout_err)
}

pub fn load_samples<T: Scalar>(m: &Manifest) -> Result<Vec<Sample<T>>> {
    m.entries.iter().map(|e| Ok((ppm_load(m.resolve(e))?, e.label))).collect()
}

fn train_cmd<T: Scalar>(
    rc: &RunConfig,
    train_m: &Manifest,
    val_m: Option<&Manifest>,
    path: &Path,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32>
where
    AnyTensor: From<Tensor<T>>,
{
    let train = load_samples::<T>(train_m)?;
    let val = match val_m {
        Some(m) => load_samples::<T>(m)?,
        None => Vec::new(),
    };
    let _ = writeln!(err, "training on {} images ({} validation)", train.len(), val.len());
    let mut model = Model::<T>::new(rc.model.clone(), rc.train.seed)?;
    emit(out, format_args!("epoch\tphase\ttrain_loss\tval_acc"))?;
    let mut failed = None;
    let report = train_two_step(&mut model, &train, &val, &rc.train, |e| {
        if let Err(x) = writeln!(out, "{e}") {
            failed.get_or_insert(x);
        }
    })?;
    if let Some(x) = failed {
        return Err(stdout_err(x));
    }
    fit_svms(&mut model, &train, rc.train.c_svm, rc.train.flip)?;
    if !rc.bank_taps.is_empty() {
        let _ = writeln!(err, "fitting classifier bank on {}", rc.bank_taps.join(","));
        model.bank = Some(LayerClassifierBank::fit(
            &model.backbone,
            &model.cfg.backbone,
            &rc.bank_taps,
            &train,
            rc.model.classes,
            rc.bank_epochs,
            rc.bank_l2,
        )?);
    }
    let mut ck = Checkpoint::new();
    model.to_checkpoint(&mut ck);
    rc.store(&mut ck);
    checkpoint_save(&ck, path)?;
    emit(out, format_args!("final_train_loss\t{:?}", report.loss_after_finetune))?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy)]
struct EvalOpts {
    svm: bool,
    flip_avg: bool,
    confusion: Option<usize>,
}

pub fn load_model<T: Scalar>(rc: &RunConfig, ck: &Checkpoint) -> Result<Model<T>> {
    Model::from_checkpoint(rc.model.clone(), ck)
}

fn eval_cmd<T: Scalar>(
    rc: &RunConfig,
    ck: &Checkpoint,
    m: &Manifest,
    opts: EvalOpts,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = load_model::<T>(rc, ck)?;
    if opts.svm && model.svms.is_empty() {
        return Err(config_err!("checkpoint has no SVMs"));
    }
    let data = load_samples::<T>(m)?;
    let ev = evaluate(&model, &data, opts.svm, opts.flip_avg)?;
    emit(out, format_args!("accuracy\t{}", ev.accuracy))?;
    if let Some(n) = opts.confusion {
        let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        for ((i, j), c) in confusion_top_pairs(&ev.predictions, &labels, n) {
            emit(out, format_args!("confused\t{i}\t{j}\t{c}"))?;
        }
    }
    Ok(EXIT_OK)
}

fn extract_cmd<T: Scalar>(
    rc: &RunConfig,
    ck: &Checkpoint,
    image: &Path,
    path: &Path,
    out: &mut dyn Write,
) -> Result<i32>
where
    AnyTensor: From<Tensor<T>>,
{
    let model = load_model::<T>(rc, ck)?;
    let img = ppm_load::<T>(image)?;
    let d = model.descriptor(Input::Image(&img))?;
    let norm = d.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    emit(out, format_args!("dim\t{}", d.len()))?;
    emit(out, format_args!("norm\t{norm:?}"))?;
    tensor_save(&d.into(), path)?;
    Ok(EXIT_OK)
}

fn invert_cmd<T: Scalar>(
    rc: &RunConfig,
    ck: &Checkpoint,
    class: usize,
    mut icfg: InversionConfig,
    path: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = load_model::<T>(rc, ck)?;
    let bank = model.bank.as_ref().ok_or_else(|| config_err!("checkpoint has no classifier bank (set bank_taps)"))?;
    if class >= bank.classes {
        return Err(Error::Contract(format!("class {class} out of range for {} classes", bank.classes)));
    }
    if icfg.layers.is_empty() {
        icfg.layers = bank.taps();
    }
    icfg.validate()?;
    emit(out, format_args!("seed\t{}", icfg.seed))?;
    emit(out, format_args!("# gamma={:e}\tbeta={}\tlayers={}", icfg.gamma, icfg.beta, icfg.layers.join(",")))?;
    let res = invert_category(&model.backbone, &model.cfg.backbone, bank, class, &icfg)?;
    emit(out, format_args!("iter\tobjective"))?;
    for (i, f) in &res.trace {
        emit(out, format_args!("{i}\t{f:?}"))?;
    }
    for (tap, p) in &res.posteriors {
        emit(out, format_args!("posterior\t{tap}\t{p:?}"))?;
    }
    ppm_save(&res.image, path)?;
    Ok(EXIT_OK)
}
