//! `key = value` run configuration shared by the training commands.

use std::fmt::Write as _;

use crate::encoders::{EncoderKind, MultiScaleMode};
use crate::error::{config_err, Error, Result};
use crate::io::{Checkpoint, KeyValues};
use crate::model::ModelConfig;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use crate::DType;

/// Codewords used when `k` is not given.
pub fn default_k(encoder: EncoderKind) -> usize {
    match encoder {
        EncoderKind::NetBovw => 256,
        _ => 64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Class count; `None` takes it from the training manifest.
    pub classes: Option<usize>,
    pub train: TrainConfig,
    /// Taps of the per-layer classifier bank used for inversion; empty
    /// trains no bank.
    pub bank_taps: Vec<String>,
    /// Bound-optimization steps per bank classifier.
    pub bank_epochs: usize,
    pub bank_l2: f64,
    pub dtype: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            classes: None,
            train: TrainConfig::default(),
            bank_taps: Vec::new(),
            bank_epochs: 30,
            bank_l2: 1e-6,
            dtype: DType::F64,
        }
    }
}

impl RunConfig {
    /// Parse and validate. The class count may still be open afterwards;
    /// [`RunConfig::resolve_classes`] closes it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = RunConfig::default();
        let m = &mut c.model;
        kv.take("backbone", &mut m.backbone)?;
        kv.take("tap", &mut m.tap)?;
        kv.take("encoder", &mut m.encoder)?;
        let mut k = None::<usize>;
        if let Some((v, line)) = kv.take_str("k") {
            k = Some(v.parse().map_err(|e| config_err!("line {line}: `k`: {e}"))?);
        }
        m.k = k.unwrap_or_else(|| default_k(m.encoder));
        if let Some((v, line)) = kv.take_str("gamma") {
            m.gamma = match v.as_str() {
                "auto" => None,
                s => Some(s.parse().map_err(|e| config_err!("line {line}: `gamma`: {e}"))?),
            };
        }
        if let Some((v, line)) = kv.take_str("rank") {
            m.rank = match v.as_str() {
                "full" => None,
                s => Some(s.parse().map_err(|e| config_err!("line {line}: `rank`: {e}"))?),
            };
        }
        kv.take_list("scales", &mut m.scales)?;
        kv.take("multiscale", &mut m.multiscale)?;
        if let Some((v, line)) = kv.take_str("classes") {
            c.classes = Some(v.parse().map_err(|e| config_err!("line {line}: `classes`: {e}"))?);
        }
        let t = &mut c.train;
        kv.take("lr", &mut t.lr)?;
        kv.take("head_l2", &mut t.head_l2)?;
        kv.take("momentum", &mut t.momentum)?;
        kv.take("epochs_head", &mut t.epochs_head)?;
        kv.take("epochs_finetune", &mut t.epochs_finetune)?;
        kv.take("batch", &mut t.batch)?;
        kv.take("c_svm", &mut t.c_svm)?;
        kv.take("flip", &mut t.flip)?;
        kv.take("patience", &mut t.patience)?;
        kv.take("clip", &mut t.clip)?;
        kv.take("freeze_backbone", &mut t.freeze_backbone)?;
        kv.take("seed", &mut t.seed)?;
        kv.take_list("bank_taps", &mut c.bank_taps)?;
        kv.take("bank_epochs", &mut c.bank_epochs)?;
        kv.take("bank_l2", &mut c.bank_l2)?;
        kv.take("dtype", &mut c.dtype)?;
        kv.finish()?;
        if let Some(k) = c.classes {
            c.model.classes = k;
        }
        c.sync_taps();
        c.validate()?;
        Ok(c)
    }

    /// Backbone taps cover the encoded tap and every bank tap.
    fn sync_taps(&mut self) {
        let b = &mut self.model.backbone;
        b.taps.clear();
        for t in std::iter::once(&self.model.tap).chain(&self.bank_taps) {
            if !b.taps.contains(t) {
                b.taps.push(t.clone());
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut m = self.model.clone();
        m.classes = self.classes.unwrap_or(2);
        m.validate()?;
        self.train.validate()?;
        for t in &self.bank_taps {
            self.model.backbone.channels(t)?;
        }
        if !(self.bank_l2 > 0.0 && self.bank_l2.is_finite()) {
            return Err(config_err!("bank_l2 must be positive, got {}", self.bank_l2));
        }
        Ok(())
    }

    /// Fix the class count from the data when the config leaves it open.
    pub fn resolve_classes(&mut self, from_data: usize) -> Result<()> {
        let k = self.classes.unwrap_or(from_data);
        if k < from_data {
            return Err(config_err!("config has {k} classes but the data has labels up to {}", from_data - 1));
        }
        self.classes = Some(k);
        self.model.classes = k;
        self.model.validate()
    }

    /// Text that [`RunConfig::parse`] reads back to the same value.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let list = |v: &[String]| v.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "backbone = {}", m.backbone);
        let _ = writeln!(s, "tap = {}", m.tap);
        let _ = writeln!(s, "encoder = {}", m.encoder);
        let _ = writeln!(s, "k = {}", m.k);
        match m.gamma {
            Some(g) => writeln!(s, "gamma = {g:?}"),
            None => writeln!(s, "gamma = auto"),
        }
        .ok();
        match m.rank {
            Some(r) => writeln!(s, "rank = {r}"),
            None => writeln!(s, "rank = full"),
        }
        .ok();
        let scales: Vec<String> = m.scales.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "scales = {}", scales.join(","));
        let _ = writeln!(
            s,
            "multiscale = {}",
            match m.multiscale {
                MultiScaleMode::Union => "union",
                MultiScaleMode::Average => "average",
            }
        );
        if let Some(k) = self.classes {
            let _ = writeln!(s, "classes = {k}");
        }
        let _ = writeln!(s, "lr = {:?}", t.lr);
        let _ = writeln!(s, "head_l2 = {:?}", t.head_l2);
        let _ = writeln!(s, "momentum = {:?}", t.momentum);
        let _ = writeln!(s, "epochs_head = {}", t.epochs_head);
        let _ = writeln!(s, "epochs_finetune = {}", t.epochs_finetune);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "c_svm = {:?}", t.c_svm);
        let _ = writeln!(s, "flip = {}", t.flip);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "clip = {:?}", t.clip);
        let _ = writeln!(s, "freeze_backbone = {}", t.freeze_backbone);
        let _ = writeln!(s, "seed = {}", t.seed);
        if !self.bank_taps.is_empty() {
            let _ = writeln!(s, "bank_taps = {}", list(&self.bank_taps));
        }
        let _ = writeln!(s, "bank_epochs = {}", self.bank_epochs);
        let _ = writeln!(s, "bank_l2 = {:?}", self.bank_l2);
        let _ = writeln!(
            s,
            "dtype = {}",
            match self.dtype {
                DType::F32 => "f32",
                DType::F64 => "f64",
            }
        );
        s
    }
}

/// Checkpoint entry holding the run configuration text.
pub const CONFIG_KEY: &str = "meta/config";

impl RunConfig {
    /// Store the configuration text in a checkpoint, one byte per entry.
    pub fn store(&self, ck: &mut Checkpoint) {
        let bytes: Vec<f64> = self.to_text().bytes().map(f64::from).collect();
        ck.insert(CONFIG_KEY.into(), Tensor::vector(bytes).expect("config text is nonempty").into());
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let t = ck.get(CONFIG_KEY).ok_or_else(|| config_err!("checkpoint lacks `{CONFIG_KEY}`"))?;
        let bytes: Vec<u8> = t
            .to::<f64>()
            .data()
            .iter()
            .map(|&b| if (0.0..=255.0).contains(&b) && b.fract() == 0.0 { Ok(b as u8) } else { Err(()) })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("`{CONFIG_KEY}` is not a byte string")))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("`{CONFIG_KEY}` is not UTF-8")))?;
        let cfg = RunConfig::parse(&text)?;
        if cfg.classes.is_none() {
            return Err(config_err!("checkpoint configuration has no class count"));
        }
        Ok(cfg)
    }
}
