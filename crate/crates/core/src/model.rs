//! The full classification pipeline: backbone tap, orderless encoder,
//! normalization and classifier heads.

use crate::autograd::{Graph, NodeId};
use crate::backbone::{
    backbone_forward, backbone_graph, backbone_init, backbone_nodes, BackboneConfig, BackboneNodes, BackboneParams,
};
use crate::encoders::{
    codebook_nodes, kmeans_init, normalize_descriptor, soft_assign_node, Codebook, CodebookMode, CodebookNodes,
    EncoderKind, MultiScaleMode, MultiScaleOptions, ProjectionInit, ProjectionMatrix,
};
use crate::error::{config_err, shape_err, Result};
use crate::heads::{head_logits, HeadNodes, LinearSvm, SoftmaxHead};
use crate::invert::LayerClassifierBank;
use crate::io::{resize_bilinear, AnyTensor, Checkpoint};
use crate::rng::Rng;
use crate::tensor::{ReduceMode, Tensor};
use crate::Scalar;

/// Architecture of a classification model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Backbone tap whose features are encoded.
    pub tap: String,
    pub encoder: EncoderKind,
    /// Codewords for NetVLAD/NetFV/NetBoVW.
    pub k: usize,
    /// Soft-assignment sharpness; `None` uses the k-means heuristic.
    pub gamma: Option<f64>,
    /// One-sided projection rank for the bilinear encoder.
    pub rank: Option<usize>,
    pub scales: Vec<f64>,
    pub multiscale: MultiScaleMode,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            tap: "t4".into(),
            encoder: EncoderKind::Bilinear,
            k: 64,
            gamma: None,
            rank: None,
            scales: vec![1.0],
            multiscale: MultiScaleMode::Union,
            classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let c = self.backbone.channels(&self.tap)?;
        if self.classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.classes));
        }
        if self.encoder.uses_codebook() && self.k == 0 {
            return Err(config_err!("encoder {} needs k ≥ 1", self.encoder));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(config_err!("gamma must be positive, got {g}"));
            }
        }
        if let Some(r) = self.rank {
            if self.encoder != EncoderKind::Bilinear {
                return Err(config_err!("projection rank applies to the bilinear encoder only"));
            }
            if r == 0 || r > c {
                return Err(config_err!("projection rank {r} must lie in 1..={c}"));
            }
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(config_err!("scales must be a nonempty list of positive factors"));
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> usize {
        self.backbone.channels(&self.tap).unwrap_or(0)
    }

    /// Pooled matrix extents before flattening.
    pub fn descriptor_shape(&self) -> (usize, usize) {
        self.encoder.descriptor_shape(self.tap_channels(), self.k, self.rank)
    }

    pub fn descriptor_dim(&self) -> usize {
        let (m, n) = self.descriptor_shape();
        m * n
    }

    pub fn scale_options(&self) -> MultiScaleOptions {
        let rf = self.backbone.receptive_field(&self.tap).unwrap_or(1);
        MultiScaleOptions {
            scales: self.scales.clone(),
            mode: self.multiscale,
            min_side: rf.max(self.backbone.min_input_side()),
        }
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub backbone: bool,
    pub encoder: bool,
    pub head: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable { backbone: false, encoder: false, head: false };
    pub const HEAD: Trainable = Trainable { backbone: false, encoder: false, head: true };
    pub const ALL: Trainable = Trainable { backbone: true, encoder: true, head: true };
}

/// Graph handles of every model parameter.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    pub backbone: BackboneNodes,
    pub codebook: Option<CodebookNodes>,
    pub projection: Option<NodeId>,
    pub head: HeadNodes,
    /// Trainable leaves, in the order of [`Model::params_mut`].
    pub params: Vec<NodeId>,
}

/// What a forward pass starts from.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a, T> {
    Image(&'a Tensor<T>),
    /// Precomputed tap maps, one per admissible scale.
    Taps(&'a [Tensor<T>]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub backbone: BackboneParams<T>,
    pub codebook: Option<Codebook<T>>,
    pub projection: Option<ProjectionMatrix<T>>,
    pub head: SoftmaxHead<T>,
    pub svms: Vec<LinearSvm>,
    pub bank: Option<LayerClassifierBank<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with a seeded backbone and zero head. Encoders with a
    /// codebook or projection still need [`Model::init_encoder`].
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let backbone = backbone_init(&cfg.backbone, seed)?;
        let head = SoftmaxHead::zeros(cfg.descriptor_dim(), cfg.classes)?;
        Ok(Model { cfg, backbone, codebook: None, projection: None, head, svms: Vec::new(), bank: None })
    }

    pub fn needs_encoder_init(&self) -> bool {
        (self.cfg.encoder.uses_codebook() && self.codebook.is_none())
            || (self.cfg.rank.is_some() && self.projection.is_none())
    }

    /// Initialize the codebook (k-means on tap features) or the projection
    /// (PCA of tap features) from a sample of images.
    pub fn init_encoder(&mut self, images: &[&Tensor<T>], seed: u64) -> Result<()> {
        if !self.needs_encoder_init() {
            return Ok(());
        }
        let sample = self.location_sample(images, 20_000, seed)?;
        if self.cfg.encoder.uses_codebook() {
            let mut cb = kmeans_init(&sample, self.cfg.k, seed, 25)?;
            if let Some(g) = self.cfg.gamma {
                cb = Codebook::from_centers(cb.mu().clone(), T::c(g))?;
            }
            self.codebook = Some(cb.untie());
        }
        if let Some(r) = self.cfg.rank {
            self.projection = Some(ProjectionMatrix::pca(&sample, r)?);
        }
        Ok(())
    }

    /// Up to `max` tap-feature rows drawn evenly from `images`.
    pub fn location_sample(&self, images: &[&Tensor<T>], max: usize, seed: u64) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(config_err!("encoder initialization needs at least one image"));
        }
        let mut rows: Vec<Vec<T>> = Vec::new();
        for img in images {
            for fm in self.tap_maps(img)? {
                let c = fm.dims()[2];
                rows.extend(fm.data().chunks(c).map(<[T]>::to_vec));
            }
        }
        if rows.len() > max {
            let mut rng = Rng::stream(seed, 0x5A);
            rng.shuffle(&mut rows);
            rows.truncate(max);
        }
        let c = rows[0].len();
        Tensor::new(vec![rows.len(), c], rows.concat())
    }

    /// Tap maps of every admissible scale, backbone frozen.
    pub fn tap_maps(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = Vec::new();
        for (h, w) in self.scaled_sizes(image)? {
            let img = resize_bilinear(image, h, w)?;
            let mut taps = backbone_forward(&self.backbone, &self.tap_config(), &img)?;
            out.push(taps.remove(&self.cfg.tap).expect("configured tap").values);
        }
        Ok(out)
    }

    fn tap_config(&self) -> BackboneConfig {
        BackboneConfig { taps: vec![self.cfg.tap.clone()], ..self.cfg.backbone.clone() }
    }

    fn scaled_sizes(&self, image: &Tensor<T>) -> Result<Vec<(usize, usize)>> {
        let (h, w) = match image.dims() {
            &[h, w, _] => (h, w),
            d => return Err(shape_err!("expected an H×W×3 image, got {d:?}")),
        };
        let opts = self.cfg.scale_options();
        let sizes = opts.admissible(h, w);
        if sizes.is_empty() {
            return Err(config_err!(
                "no admissible scale among {:?} for a {h}×{w} image (min side {})",
                opts.scales,
                opts.min_side
            ));
        }
        Ok(sizes)
    }

    /// Place every parameter in `g`.
    pub fn nodes(&self, g: &mut Graph<T>, tr: Trainable) -> Result<ModelNodes> {
        let mut params = Vec::new();
        let backbone = backbone_nodes(g, &self.backbone, tr.backbone);
        if tr.backbone {
            params.extend(&backbone.weights);
            params.extend(&backbone.biases);
        }
        let codebook = match &self.codebook {
            Some(cb) => {
                let n = codebook_nodes(g, cb, tr.encoder)?;
                if tr.encoder {
                    params.push(n.mu);
                    if cb.mode() == CodebookMode::Untied {
                        params.extend([n.w, n.b]);
                    }
                }
                Some(n)
            }
            None if self.cfg.encoder.uses_codebook() => {
                return Err(config_err!("encoder {} has no codebook; initialize it first", self.cfg.encoder))
            }
            None => None,
        };
        let projection = match (&self.projection, self.cfg.rank) {
            (Some(p), _) => {
                let id = if tr.encoder { g.param(p.matrix().clone()) } else { g.constant(p.matrix().clone()) };
                if tr.encoder {
                    params.push(id);
                }
                Some(id)
            }
            (None, Some(_)) => return Err(config_err!("projection not initialized")),
            (None, None) => None,
        };
        let head = self.head.nodes(g, tr.head);
        if tr.head {
            params.extend([head.w, head.bias]);
        }
        Ok(ModelNodes { backbone, codebook, projection, head, params })
    }

    /// Mutable parameter tensors matching `ModelNodes::params` for `tr`.
    pub fn params_mut(&mut self, tr: Trainable) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        if tr.backbone {
            out.extend(self.backbone.weights.iter_mut());
            out.extend(self.backbone.biases.iter_mut());
        }
        if tr.encoder {
            if let Some(cb) = self.codebook.as_mut() {
                out.extend(cb.params_mut());
            }
            if let Some(p) = self.projection.as_mut() {
                out.push(p.matrix_mut());
            }
        }
        if tr.head {
            out.extend([&mut self.head.w, &mut self.head.bias]);
        }
        out
    }

    /// Restore derived quantities after in-place parameter updates.
    pub fn refresh(&mut self) {
        if let Some(cb) = self.codebook.as_mut() {
            cb.refresh();
        }
    }

    /// Pre-normalization pooled matrix of one H×W×C tap map.
    pub fn pool_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, fmap: NodeId) -> Result<NodeId> {
        let dims = g.value(fmap).dims().to_vec();
        let [h, w, c] = dims[..] else {
            return Err(shape_err!("tap map must be H×W×C, got {dims:?}"));
        };
        let f = g.reshape(fmap, &[h * w, c])?;
        match self.cfg.encoder {
            EncoderKind::Bilinear => {
                let a = match nodes.projection {
                    Some(p) => g.matmul(f, p, false, false)?,
                    None => f,
                };
                g.matmul(a, f, true, false)
            }
            EncoderKind::NetVlad | EncoderKind::NetFv => {
                let cb = nodes.codebook.expect("checked in nodes()");
                let a = soft_assign_node(g, f, cb)?;
                g.residual_aggregate(f, a, cb.mu, self.cfg.encoder == EncoderKind::NetFv)
            }
            EncoderKind::NetBovw => {
                let cb = nodes.codebook.expect("checked in nodes()");
                let a = soft_assign_node(g, f, cb)?;
                let s = g.reduce(a, &[0], ReduceMode::Sum)?;
                g.reshape(s, &[1, self.cfg.k])
            }
            EncoderKind::FcBaseline => {
                let m = g.reduce(f, &[0], ReduceMode::Mean)?;
                g.reshape(m, &[1, c])
            }
        }
    }

    /// Combine per-scale pooled matrices into the final 1×D descriptor.
    pub fn finish_graph(&self, g: &mut Graph<T>, pooled: &[NodeId]) -> Result<NodeId> {
        let inv = T::c(1.0 / pooled.len() as f64);
        let sum = |g: &mut Graph<T>, items: &[NodeId]| -> Result<NodeId> {
            let mut acc = items[0];
            for &p in &items[1..] {
                acc = g.add(acc, p)?;
            }
            Ok(acc)
        };
        let d = self.cfg.descriptor_dim();
        if self.cfg.encoder == EncoderKind::FcBaseline {
            let s = sum(g, pooled)?;
            let m = g.scale(s, inv);
            return g.reshape(m, &[1, d]);
        }
        match self.cfg.multiscale {
            MultiScaleMode::Union => {
                let s = sum(g, pooled)?;
                normalize_descriptor(g, s)
            }
            MultiScaleMode::Average => {
                let each = pooled.iter().map(|&p| normalize_descriptor(g, p)).collect::<Result<Vec<_>>>()?;
                let s = sum(g, &each)?;
                let m = g.scale(s, inv);
                Ok(g.l2_normalize(m))
            }
        }
    }

    /// Tap map nodes for every admissible scale of `input`.
    pub fn tap_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, input: Input<'_, T>) -> Result<Vec<NodeId>> {
        match input {
            Input::Taps(maps) => {
                if maps.is_empty() {
                    return Err(shape_err!("no tap maps given"));
                }
                Ok(maps.iter().map(|m| g.constant(m.clone())).collect())
            }
            Input::Image(image) => {
                let cfg = self.tap_config();
                let mut out = Vec::new();
                for (h, w) in self.scaled_sizes(image)? {
                    let x = g.constant(resize_bilinear(image, h, w)?);
                    let taps = backbone_graph(g, &cfg, &nodes.backbone, x)?;
                    out.push(taps[&self.cfg.tap]);
                }
                Ok(out)
            }
        }
    }

    /// Descriptor node (1×D) of `input`.
    pub fn descriptor_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, input: Input<'_, T>) -> Result<NodeId> {
        let taps = self.tap_graph(g, nodes, input)?;
        let pooled = taps.into_iter().map(|t| self.pool_graph(g, nodes, t)).collect::<Result<Vec<_>>>()?;
        self.finish_graph(g, &pooled)
    }

    /// Descriptor and logits nodes.
    pub fn forward_graph(&self, g: &mut Graph<T>, nodes: &ModelNodes, input: Input<'_, T>) -> Result<(NodeId, NodeId)> {
        let d = self.descriptor_graph(g, nodes, input)?;
        let z = head_logits(g, nodes.head, d)?;
        Ok((d, z))
    }

    /// Flattened descriptor (D entries).
    pub fn descriptor(&self, input: Input<'_, T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let nodes = self.nodes(&mut g, Trainable::NONE)?;
        let d = self.descriptor_graph(&mut g, &nodes, input)?;
        g.value(d).reshape(&[self.cfg.descriptor_dim()])
    }

    /// Softmax-head class scores.
    pub fn logits(&self, input: Input<'_, T>) -> Result<Tensor<T>> {
        self.head.logits(&self.descriptor(input)?)
    }

    /// Calibrated one-vs-all SVM scores of a descriptor.
    pub fn svm_scores(&self, desc: &Tensor<T>) -> Result<Vec<f64>> {
        if self.svms.is_empty() {
            return Err(config_err!("model has no SVM classifiers"));
        }
        let x: Vec<f64> = desc.data().iter().map(|v| v.as_f64()).collect();
        Ok(self.svms.iter().map(|s| s.score(&x)).collect())
    }

    /// All parameters under stable names.
    pub fn to_checkpoint(&self, ck: &mut Checkpoint)
    where
        AnyTensor: From<Tensor<T>>,
    {
        self.backbone.to_checkpoint(ck);
        if let Some(cb) = &self.codebook {
            ck.insert("encoder/mu".into(), cb.mu().clone().into());
            ck.insert("encoder/w".into(), cb.w().clone().into());
            ck.insert("encoder/b".into(), cb.b().clone().into());
            ck.insert("encoder/gamma".into(), Tensor::scalar(cb.gamma()).into());
            let tied = if cb.mode() == CodebookMode::Tied { 1.0 } else { 0.0 };
            ck.insert("encoder/tied".into(), Tensor::scalar(T::c(tied)).into());
        }
        if let Some(p) = &self.projection {
            ck.insert("encoder/projection".into(), p.matrix().clone().into());
        }
        ck.insert("head/w".into(), self.head.w.clone().into());
        ck.insert("head/b".into(), self.head.bias.clone().into());
        if !self.svms.is_empty() {
            let d = self.svms[0].w.len();
            let w: Vec<f64> = self.svms.iter().flat_map(|s| s.w.iter().copied()).collect();
            let b: Vec<f64> = self.svms.iter().map(|s| s.b).collect();
            let cal: Vec<f64> = self.svms.iter().flat_map(|s| [s.calibration.0, s.calibration.1]).collect();
            let k = self.svms.len();
            ck.insert("svm/w".into(), Tensor::new(vec![k, d], w).expect("k×d").into());
            ck.insert("svm/b".into(), Tensor::new(vec![k], b).expect("k").into());
            ck.insert("svm/calibration".into(), Tensor::new(vec![k, 2], cal).expect("k×2").into());
        }
        if let Some(bank) = &self.bank {
            bank.to_checkpoint(ck);
        }
    }

    /// Rebuild a model of architecture `cfg` from checkpoint tensors.
    pub fn from_checkpoint(cfg: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str, dims: Option<&[usize]>| -> Result<Tensor<T>> {
            let t = ck.get(name).ok_or_else(|| config_err!("checkpoint lacks `{name}`"))?;
            if let Some(d) = dims {
                if t.dims() != d {
                    return Err(config_err!("`{name}` has dims {:?}, config expects {d:?}", t.dims()));
                }
            }
            Ok(t.to())
        };
        let backbone = BackboneParams::from_checkpoint(&cfg.backbone, ck)?;
        let c = cfg.tap_channels();
        let codebook = if cfg.encoder.uses_codebook() {
            let mu = get("encoder/mu", Some(&[cfg.k, c]))?;
            let gamma = get("encoder/gamma", Some(&[1]))?.data()[0];
            let tied = get("encoder/tied", Some(&[1]))?.data()[0] != T::zero();
            Some(if tied {
                Codebook::from_centers(mu, gamma)?
            } else {
                Codebook::untied(mu, gamma, get("encoder/w", Some(&[cfg.k, c]))?, get("encoder/b", Some(&[cfg.k]))?)?
            })
        } else {
            None
        };
        let projection = match cfg.rank {
            Some(r) => Some(ProjectionMatrix::new(get("encoder/projection", Some(&[c, r]))?, ProjectionInit::Pca)?),
            None => None,
        };
        let d = cfg.descriptor_dim();
        let head =
            SoftmaxHead { w: get("head/w", Some(&[d, cfg.classes]))?, bias: get("head/b", Some(&[cfg.classes]))? };
        let svms = match ck.get("svm/w") {
            None => Vec::new(),
            Some(_) => {
                let w: Tensor<f64> = get("svm/w", None)?.cast();
                let b: Tensor<f64> = get("svm/b", None)?.cast();
                let cal: Tensor<f64> = get("svm/calibration", None)?.cast();
                if w.dims() != [cfg.classes, d] || b.len() != cfg.classes || cal.len() != 2 * cfg.classes {
                    return Err(config_err!("svm tensors do not match {} classes × {d} dims", cfg.classes));
                }
                (0..cfg.classes)
                    .map(|k| LinearSvm {
                        w: w.row(k).to_vec(),
                        b: b.data()[k],
                        calibration: (cal.data()[2 * k], cal.data()[2 * k + 1]),
                    })
                    .collect()
            }
        };
        let bank = LayerClassifierBank::from_checkpoint(ck)?;
        Ok(Model { cfg, backbone, codebook, projection, head, svms, bank })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{bilinear_pool, l2_normalize, multiscale_pool, signed_sqrt, LocationFeatures};
    use crate::gradcheck::finite_diff_check;

    fn cfg(encoder: EncoderKind) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::from_channels(&[4, 6], 1, &["t2"]),
            tap: "t2".into(),
            encoder,
            k: 3,
            classes: 3,
            ..Default::default()
        }
    }

    fn image(seed: u64) -> Tensor<f64> {
        Tensor::new(vec![12, 12, 3], Rng::new(seed).uniform_vec(432, 0.0, 1.0)).unwrap()
    }

    fn ready(c: ModelConfig) -> Model<f64> {
        let mut m = Model::new(c, 1).unwrap();
        let imgs = [image(1), image(2)];
        m.init_encoder(&imgs.iter().collect::<Vec<_>>(), 3).unwrap();
        m
    }

    #[test]
    fn descriptor_dims_and_norm() {
        for enc in [EncoderKind::Bilinear, EncoderKind::NetVlad, EncoderKind::NetFv, EncoderKind::NetBovw] {
            let m = ready(cfg(enc));
            let d = m.descriptor(Input::Image(&image(5))).unwrap();
            assert_eq!(d.len(), m.cfg.descriptor_dim());
            assert!((d.norm2() - 1.0).abs() < 1e-9, "{enc}");
        }
        let m = ready(ModelConfig { rank: Some(2), ..cfg(EncoderKind::Bilinear) });
        assert_eq!(m.descriptor(Input::Image(&image(5))).unwrap().len(), 2 * 6);
    }

    #[test]
    fn taps_and_image_paths_agree() {
        let m = ready(cfg(EncoderKind::NetVlad));
        let img = image(7);
        let taps = m.tap_maps(&img).unwrap();
        let a = m.descriptor(Input::Image(&img)).unwrap();
        let b = m.descriptor(Input::Taps(&taps)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn multiscale_graph_matches_tensor_version() {
        let c = ModelConfig { scales: vec![1.0, 2.0], ..cfg(EncoderKind::Bilinear) };
        let m = ready(c);
        let img = image(4);
        let want = multiscale_pool(&img, &m.cfg.scale_options(), |x| {
            let fm = &backbone_forward(&m.backbone, &m.cfg.backbone, x)?["t2"];
            let f = crate::backbone::flatten_locations(fm);
            bilinear_pool(&f, &f)
        })
        .unwrap();
        let got = m.descriptor(Input::Image(&img)).unwrap();
        assert!(got.max_abs_diff(&want.vec).unwrap() < 1e-12);
    }

    #[test]
    fn bilinear_descriptor_matches_encoder_module() {
        let m = ready(cfg(EncoderKind::Bilinear));
        let img = image(9);
        let fm = &backbone_forward(&m.backbone, &m.cfg.backbone, &img).unwrap()["t2"];
        let f = LocationFeatures::new(fm.values.reshape(&[fm.h() * fm.w(), fm.c()]).unwrap()).unwrap();
        let want = l2_normalize(&signed_sqrt(&bilinear_pool(&f, &f).unwrap()));
        let got = m.descriptor(Input::Image(&img)).unwrap();
        assert!(got.max_abs_diff(&want.reshape(&[36]).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        for enc in [EncoderKind::Bilinear, EncoderKind::NetFv, EncoderKind::FcBaseline] {
            let mut m = ready(cfg(enc));
            m.head.w.data_mut()[0] = 0.5;
            let mut ck = Checkpoint::new();
            m.to_checkpoint(&mut ck);
            let back = Model::<f64>::from_checkpoint(m.cfg.clone(), &ck).unwrap();
            assert_eq!(back, m);
        }
        let m = ready(cfg(EncoderKind::Bilinear));
        let mut ck = Checkpoint::new();
        m.to_checkpoint(&mut ck);
        assert!(Model::<f64>::from_checkpoint(cfg(EncoderKind::NetVlad), &ck).is_err());
    }

    #[test]
    fn params_align_with_nodes() {
        for enc in [EncoderKind::Bilinear, EncoderKind::NetVlad] {
            let mut m = ready(ModelConfig { rank: (enc == EncoderKind::Bilinear).then_some(3), ..cfg(enc) });
            let mut g = Graph::new();
            let nodes = m.nodes(&mut g, Trainable::ALL).unwrap();
            let values: Vec<Tensor<f64>> = nodes.params.iter().map(|&n| g.value(n).clone()).collect();
            let params = m.params_mut(Trainable::ALL);
            assert_eq!(params.len(), values.len());
            for (p, v) in params.iter().zip(&values) {
                assert_eq!(**p, *v);
            }
        }
    }

    #[test]
    fn end_to_end_gradient_wrt_codebook() {
        let m = ready(cfg(EncoderKind::NetVlad));
        let img = image(3);
        let taps = m.tap_maps(&img).unwrap();
        let mu0 = m.codebook.as_ref().unwrap().mu().clone();
        let mut head = m.head.clone();
        head.w = Tensor::new(vec![m.cfg.descriptor_dim(), 3], Rng::new(4).normal_vec(m.cfg.descriptor_dim() * 3, 1.0))
            .unwrap();
        let m = Model { head, ..m };
        let r = finite_diff_check(
            |g, mu| {
                let mut nodes = m.nodes(g, Trainable::NONE)?;
                let cb = nodes.codebook.as_mut().unwrap();
                cb.mu = mu;
                let (_, z) = m.forward_graph(g, &nodes, Input::Taps(&taps))?;
                g.softmax_nll(z, 1)
            },
            &mu0,
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
