//! Small VGG-style convolutional feature extractor with named taps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, NodeId};
use crate::encoders::LocationFeatures;
use crate::error::{config_err, shape_err, Result};
use crate::io::{AnyTensor, Checkpoint};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

pub const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub out_channels: usize,
    pub pool: bool,
}

/// Stages are conv 3×3 (pad 1) → relu → optional 2×2 max-pool. Stage `i`
/// (from 0) is exposed under the tap name `t{i+1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub taps: Vec<String>,
    pub input_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::from_channels(&[16, 32, 64, 64], 3, &["t1", "t2", "t3", "t4"])
    }
}

impl BackboneConfig {
    /// Pool after every stage except the last.
    pub fn from_channels(channels: &[usize], pooled: usize, taps: &[&str]) -> Self {
        BackboneConfig {
            stages: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| StageConfig { out_channels: c, pool: i < pooled })
                .collect(),
            taps: taps.iter().map(|s| s.to_string()).collect(),
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(config_err!("backbone needs at least one stage"));
        }
        if self.input_channels == 0 || self.stages.iter().any(|s| s.out_channels == 0) {
            return Err(config_err!("backbone channel counts must be positive"));
        }
        if self.taps.is_empty() {
            return Err(config_err!("backbone needs at least one tap"));
        }
        for t in &self.taps {
            self.stage_of(t)?;
        }
        Ok(())
    }

    pub fn tap_name(stage: usize) -> String {
        format!("t{}", stage + 1)
    }

    pub fn stage_of(&self, tap: &str) -> Result<usize> {
        tap.strip_prefix('t')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1 && n <= self.stages.len())
            .map(|n| n - 1)
            .ok_or_else(|| config_err!("unknown tap `{tap}` for a {}-stage backbone", self.stages.len()))
    }

    pub fn channels(&self, tap: &str) -> Result<usize> {
        Ok(self.stages[self.stage_of(tap)?].out_channels)
    }

    /// Input pixels per tap location along one axis.
    pub fn downsampling(&self, tap: &str) -> Result<usize> {
        let s = self.stage_of(tap)?;
        Ok(1 << self.stages[..=s].iter().filter(|st| st.pool).count())
    }

    /// Receptive-field side of one tap location, in input pixels.
    pub fn receptive_field(&self, tap: &str) -> Result<usize> {
        let s = self.stage_of(tap)?;
        let (mut rf, mut jump) = (1, 1);
        for st in &self.stages[..=s] {
            rf += (KERNEL - 1) * jump;
            if st.pool {
                rf += jump;
                jump *= 2;
            }
        }
        Ok(rf)
    }

    /// Smallest input side for which every stage up to the deepest tap is
    /// defined.
    pub fn min_input_side(&self) -> usize {
        let last = self.taps.iter().filter_map(|t| self.stage_of(t).ok()).max().unwrap_or(0);
        1 << self.stages[..=last].iter().filter(|s| s.pool).count()
    }

    /// Deepest configured tap.
    pub fn last_tap(&self) -> Option<&str> {
        self.taps.iter().max_by_key(|t| self.stage_of(t).unwrap_or(0)).map(String::as_str)
    }

    /// Output extents at `tap` for an H×W input.
    pub fn tap_extent(&self, tap: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stage_of(tap)?;
        let (mut h, mut w) = (h, w);
        for st in &self.stages[..=s] {
            if st.pool {
                if h < 2 || w < 2 {
                    return Err(shape_err!("image too small for the backbone's pooling stages"));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok((h, w))
    }
}

impl fmt::Display for BackboneConfig {
    /// `16p,32p,64` form: channel counts, `p` marks a pooled stage.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.stages.iter().map(|s| format!("{}{}", s.out_channels, if s.pool { "p" } else { "" })).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for BackboneConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let stages = s
            .split(',')
            .map(str::trim)
            .map(|part| {
                let (num, pool) = match part.strip_suffix('p') {
                    Some(n) => (n, true),
                    None => (part, false),
                };
                num.parse()
                    .map(|c| StageConfig { out_channels: c, pool })
                    .map_err(|_| format!("bad stage `{part}` (expected e.g. 32p or 64)"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let last = BackboneConfig::tap_name(stages.len().saturating_sub(1));
        Ok(BackboneConfig { stages, taps: vec![last], input_channels: 3 })
    }
}

/// Convolution weights (3×3×Cin×Cout) and biases (Cout) per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn zeros(cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.input_channels;
        let (mut weights, mut biases) = (Vec::new(), Vec::new());
        for st in &cfg.stages {
            weights.push(Tensor::zeros(&[KERNEL, KERNEL, cin, st.out_channels])?);
            biases.push(Tensor::zeros(&[st.out_channels])?);
            cin = st.out_channels;
        }
        Ok(BackboneParams { weights, biases })
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint)
    where
        AnyTensor: From<Tensor<T>>,
    {
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            ck.insert(format!("backbone/{i}/w"), w.clone().into());
            ck.insert(format!("backbone/{i}/b"), b.clone().into());
        }
    }

    pub fn from_checkpoint(cfg: &BackboneConfig, ck: &Checkpoint) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        for i in 0..cfg.stages.len() {
            for (key, slot) in [("w", &mut p.weights[i]), ("b", &mut p.biases[i])] {
                let name = format!("backbone/{i}/{key}");
                let t = ck.get(&name).ok_or_else(|| config_err!("checkpoint lacks `{name}`"))?;
                if t.dims() != slot.dims() {
                    return Err(config_err!("`{name}` has dims {:?}, config expects {:?}", t.dims(), slot.dims()));
                }
                *slot = t.to();
            }
        }
        Ok(p)
    }

    pub fn checksum(&self) -> f64 {
        self.weights.iter().chain(&self.biases).flat_map(|t| t.data()).map(|v| v.as_f64()).sum()
    }
}

/// He-style init: weights N(0, 2/fan_in), zero biases.
pub fn backbone_init<T: Scalar>(cfg: &BackboneConfig, seed: u64) -> Result<BackboneParams<T>> {
    let mut p = BackboneParams::zeros(cfg)?;
    let mut rng = Rng::stream(seed, 0xBB);
    for w in &mut p.weights {
        let fan_in = w.dims()[0] * w.dims()[1] * w.dims()[2];
        let std = (2.0 / fan_in as f64).sqrt();
        let n = w.len();
        w.data_mut().copy_from_slice(&rng.normal_vec::<T>(n, std));
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub tap: String,
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn h(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn w(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn c(&self) -> usize {
        self.values.dims()[2]
    }
}

pub fn flatten_locations<T: Scalar>(fm: &FeatureMap<T>) -> LocationFeatures<T> {
    let (l, c) = (fm.h() * fm.w(), fm.c());
    LocationFeatures::new(fm.values.reshape(&[l, c]).expect("H·W·C elements")).expect("rank 2")
}

pub fn unflatten_locations<T: Scalar>(f: &LocationFeatures<T>, h: usize, w: usize, tap: &str) -> Result<FeatureMap<T>> {
    if h * w != f.locations() {
        return Err(shape_err!("{h}×{w} does not cover {} locations", f.locations()));
    }
    Ok(FeatureMap { tap: tap.to_string(), values: f.tensor().reshape(&[h, w, f.channels()])? })
}

/// Parameter nodes for one forward pass.
#[derive(Debug, Clone)]
pub struct BackboneNodes {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

pub fn backbone_nodes<T: Scalar>(g: &mut Graph<T>, p: &BackboneParams<T>, trainable: bool) -> BackboneNodes {
    let mut add = |t: &Tensor<T>| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
    BackboneNodes { weights: p.weights.iter().map(&mut add).collect(), biases: p.biases.iter().map(&mut add).collect() }
}

/// Grey level subtracted from every input pixel before the first stage.
pub const INPUT_MEAN: f64 = 0.5;

/// Run the stages needed for the configured taps, returning their
/// H×W×C nodes.
pub fn backbone_graph<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    nodes: &BackboneNodes,
    image: NodeId,
) -> Result<BTreeMap<String, NodeId>> {
    cfg.validate()?;
    let dims = g.value(image).dims().to_vec();
    match dims[..] {
        [h, w, c] if c == cfg.input_channels => {
            if h.min(w) < cfg.min_input_side() {
                return Err(shape_err!(
                    "image {h}×{w} smaller than the backbone minimum side {}",
                    cfg.min_input_side()
                ));
            }
        }
        _ => return Err(shape_err!("backbone expects H×W×{} input, got {dims:?}", cfg.input_channels)),
    }
    let last = cfg.taps.iter().map(|t| cfg.stage_of(t)).collect::<Result<Vec<_>>>()?.into_iter().max().unwrap_or(0);
    let mean = g.constant(Tensor::full(&dims, T::c(INPUT_MEAN))?);
    let mut x = g.sub(image, mean)?;
    let mut taps = BTreeMap::new();
    for (i, st) in cfg.stages.iter().enumerate().take(last + 1) {
        let y = g.conv2d(x, nodes.weights[i], nodes.biases[i])?;
        x = g.relu(y);
        if st.pool {
            x = g.max_pool2(x)?;
        }
        let name = BackboneConfig::tap_name(i);
        if cfg.taps.contains(&name) {
            taps.insert(name, x);
        }
    }
    Ok(taps)
}

pub fn backbone_forward<T: Scalar>(
    p: &BackboneParams<T>,
    cfg: &BackboneConfig,
    image: &Tensor<T>,
) -> Result<BTreeMap<String, FeatureMap<T>>> {
    let mut g = Graph::new();
    let nodes = backbone_nodes(&mut g, p, false);
    let x = g.constant(image.clone());
    let taps = backbone_graph(&mut g, cfg, &nodes, x)?;
    Ok(taps.into_iter().map(|(tap, id)| (tap.clone(), FeatureMap { tap, values: g.value(id).clone() })).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn small() -> BackboneConfig {
        BackboneConfig::from_channels(&[4, 6, 5], 2, &["t1", "t2", "t3"])
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        Tensor::new(vec![h, w, 3], Rng::new(seed).uniform_vec(h * w * 3, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = backbone_init::<f64>(&small(), 1).unwrap();
        assert_eq!(a, backbone_init(&small(), 1).unwrap());
        assert_ne!(a, backbone_init(&small(), 2).unwrap());
        let empty = BackboneConfig { stages: vec![], taps: vec!["t1".into()], input_channels: 3 };
        assert!(matches!(backbone_init::<f64>(&empty, 0), Err(crate::Error::Config(_))));
        let no_tap = BackboneConfig { taps: vec![], ..small() };
        assert!(no_tap.validate().is_err());
    }

    #[test]
    fn config_arithmetic() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.downsampling("t4").unwrap(), 8);
        assert_eq!(cfg.receptive_field("t1").unwrap(), 4);
        // 3 → pool 4 → 8 → pool 10 → 18 → pool 22 → 38
        assert_eq!(cfg.receptive_field("t4").unwrap(), 38);
        assert_eq!(cfg.min_input_side(), 8);
        assert!(cfg.stage_of("t5").is_err());
        let parsed: BackboneConfig = "16p,32p,64p,64".parse().unwrap();
        assert_eq!(parsed.stages, cfg.stages);
        assert_eq!(parsed.to_string(), "16p,32p,64p,64");
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let p = BackboneParams::<f64>::zeros(&small()).unwrap();
        for fm in backbone_forward(&p, &small(), &image(8, 8, 0)).unwrap().values() {
            assert!(fm.values.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn doubling_input_doubles_taps() {
        let cfg = small();
        let p = backbone_init::<f64>(&cfg, 3).unwrap();
        let a = backbone_forward(&p, &cfg, &image(8, 12, 1)).unwrap();
        let b = backbone_forward(&p, &cfg, &image(16, 24, 1)).unwrap();
        for tap in &cfg.taps {
            assert_eq!((2 * a[tap].h(), 2 * a[tap].w()), (b[tap].h(), b[tap].w()));
            assert_eq!((a[tap].h(), a[tap].w()), cfg.tap_extent(tap, 8, 12).unwrap());
        }
    }

    #[test]
    fn tiny_image_rejected() {
        let cfg = small();
        let p = backbone_init::<f64>(&cfg, 3).unwrap();
        assert!(matches!(backbone_forward(&p, &cfg, &image(1, 1, 0)), Err(crate::Error::Shape(_))));
        assert!(matches!(backbone_forward(&p, &cfg, &Tensor::zeros(&[8, 8, 1]).unwrap()), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn flatten_round_trip() {
        let fm = FeatureMap { tap: "t1".into(), values: Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap() };
        let f = flatten_locations(&fm);
        assert_eq!(f.tensor().dims(), &[4, 1]);
        assert_eq!(f.tensor().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unflatten_locations(&f, 2, 2, "t1").unwrap(), fm);
        let one = FeatureMap { tap: "t1".into(), values: Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap() };
        assert_eq!(flatten_locations(&one).locations(), 1);
    }

    #[test]
    fn translation_equivariance() {
        let cfg = small();
        let p = backbone_init::<f64>(&cfg, 9).unwrap();
        let (h, w, s) = (48, 48, 8);
        let base = image(h + s, w + s, 5);
        // crop at (0,0) and at (s,s): the second is the first shifted by s
        let crop = |oy: usize, ox: usize| {
            Tensor::from_fn(&[h, w, 3], |i| {
                let (y, x, c) = (i / (w * 3), (i / 3) % w, i % 3);
                base.at(&[y + oy, x + ox, c])
            })
            .unwrap()
        };
        let a = backbone_forward(&p, &cfg, &crop(0, 0)).unwrap();
        let b = backbone_forward(&p, &cfg, &crop(s, s)).unwrap();
        let fm_a = &a["t3"];
        let fm_b = &b["t3"];
        let shift = s / cfg.downsampling("t3").unwrap();
        // border locations see zero padding; compare the interior only
        let margin = cfg.receptive_field("t3").unwrap() / cfg.downsampling("t3").unwrap() + 1;
        let mut compared = 0;
        for y in margin..fm_b.h() - margin {
            for x in margin..fm_b.w() - margin {
                for c in 0..fm_b.c() {
                    let va = fm_a.values.at(&[y + shift, x + shift, c]);
                    let vb = fm_b.values.at(&[y, x, c]);
                    assert!((va - vb).abs() <= 1e-10);
                    compared += 1;
                }
            }
        }
        assert!(compared > 0);
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let cfg = BackboneConfig::from_channels(&[3, 2], 1, &["t2"]);
        let p = backbone_init::<f64>(&cfg, 4).unwrap();
        let img = image(6, 6, 2);
        let mut rng = Rng::new(77);
        let probe = Tensor::new(vec![3, 3, 2], rng.normal_vec(18, 1.0)).unwrap();
        let r = finite_diff_check(
            |g, x| {
                let nodes = backbone_nodes(g, &p, false);
                let taps = backbone_graph(g, &cfg, &nodes, x)?;
                let c = g.constant(probe.clone());
                let m = g.mul(taps["t2"], c)?;
                g.sum_all(m)
            },
            &img,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let w0 = p.weights[0].clone();
        let r = finite_diff_check(
            |g, w| {
                let mut nodes = backbone_nodes(g, &p, false);
                nodes.weights[0] = w;
                let x = g.constant(img.clone());
                let taps = backbone_graph(g, &cfg, &nodes, x)?;
                let c = g.constant(probe.clone());
                let m = g.mul(taps["t2"], c)?;
                g.sum_all(m)
            },
            &w0,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small();
        let p = backbone_init::<f64>(&cfg, 3).unwrap();
        let mut ck = Checkpoint::new();
        p.to_checkpoint(&mut ck);
        assert_eq!(BackboneParams::from_checkpoint(&cfg, &ck).unwrap(), p);
        let other = BackboneConfig::from_channels(&[4, 7, 5], 2, &["t3"]);
        assert!(BackboneParams::<f64>::from_checkpoint(&other, &ck).is_err());
    }
}
