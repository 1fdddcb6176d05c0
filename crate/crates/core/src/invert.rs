//! Category pre-images: optimize an input image so that per-layer bilinear
//! classifiers assign a target class, under a total-variation prior.

use std::collections::BTreeMap;

use crate::autograd::{Graph, NodeId};
use crate::backbone::{backbone_forward, backbone_graph, backbone_nodes, BackboneConfig, BackboneParams, FeatureMap};
use crate::encoders::{normalize_descriptor, BilinearDescriptor};
use crate::error::{config_err, Error, Result};
use crate::heads::{fit_bound, softmax_loss, SoftmaxHead};
use crate::io::{AnyTensor, Checkpoint};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    /// Weight of the TV prior.
    pub gamma: f64,
    /// TV exponent.
    pub beta: f64,
    pub layers: Vec<String>,
    pub max_iters: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig { gamma: 1e-8, beta: 2.0, layers: Vec::new(), max_iters: 200, height: 64, width: 64, seed: 0 }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(config_err!("inversion gamma must be ≥ 0, got {}", self.gamma));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(config_err!("inversion beta must be > 0, got {}", self.beta));
        }
        if self.layers.is_empty() {
            return Err(config_err!("inversion needs at least one layer"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(config_err!("inversion image extents must be positive"));
        }
        Ok(())
    }
}

/// One softmax classifier per backbone tap over that tap's mean-pooled,
/// normalized bilinear descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerClassifierBank<T> {
    pub heads: BTreeMap<String, SoftmaxHead<T>>,
    pub classes: usize,
}

impl<T: Scalar> LayerClassifierBank<T> {
    pub fn taps(&self) -> Vec<String> {
        self.heads.keys().cloned().collect()
    }

    pub fn to_checkpoint(&self, ck: &mut Checkpoint)
    where
        AnyTensor: From<Tensor<T>>,
    {
        for (tap, h) in &self.heads {
            ck.insert(format!("bank/{tap}/w"), h.w.clone().into());
            ck.insert(format!("bank/{tap}/b"), h.bias.clone().into());
        }
    }

    /// `None` when the checkpoint holds no bank.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Option<Self>> {
        let mut heads = BTreeMap::new();
        for (name, t) in ck.range("bank/".to_string()..) {
            let Some(rest) = name.strip_prefix("bank/") else { break };
            let Some(tap) = rest.strip_suffix("/w") else { continue };
            let b = ck
                .get(&format!("bank/{tap}/b"))
                .ok_or_else(|| config_err!("checkpoint bank for `{tap}` lacks a bias"))?;
            heads.insert(tap.to_string(), SoftmaxHead { w: t.to(), bias: b.to() });
        }
        let Some(first) = heads.values().next() else { return Ok(None) };
        let classes = first.classes();
        if heads.values().any(|h| h.classes() != classes || h.bias.len() != classes) {
            return Err(config_err!("bank classifiers disagree on the class count"));
        }
        Ok(Some(LayerClassifierBank { heads, classes }))
    }

    /// Fit each tap's classifier to its cached descriptors with `iters`
    /// bound-optimization steps at weight decay `l2`.
    pub fn fit(
        backbone: &BackboneParams<T>,
        cfg: &BackboneConfig,
        taps: &[String],
        data: &[(Tensor<T>, usize)],
        classes: usize,
        iters: usize,
        l2: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(config_err!("bank training needs data"));
        }
        let tap_cfg = BackboneConfig { taps: taps.to_vec(), ..cfg.clone() };
        tap_cfg.validate()?;
        let mut descs: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
        for (img, _) in data {
            let maps = backbone_forward(backbone, &tap_cfg, img)?;
            for (tap, d) in aggregate_bilinear_per_layer(&maps)? {
                descs.entry(tap).or_default().push(d.vec.data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
            }
        }
        let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
        let mut heads = BTreeMap::new();
        for (tap, xs) in descs {
            let mut head = SoftmaxHead::<f64>::zeros(xs[0].len(), classes)?;
            fit_bound(&mut head, &xs, &labels, l2, iters, |_, _, _| Ok(()))?;
            heads.insert(tap, SoftmaxHead { w: head.w.cast(), bias: head.bias.cast() });
        }
        Ok(LayerClassifierBank { heads, classes })
    }
}

/// Mean-pooled bilinear descriptor node of an H×W×C map, signed-sqrt and
/// ℓ2 normalized (1×C²).
pub fn mean_bilinear_node<T: Scalar>(g: &mut Graph<T>, fmap: NodeId) -> Result<NodeId> {
    let dims = g.value(fmap).dims().to_vec();
    let [h, w, c] = dims[..] else {
        return Err(Error::Shape(format!("expected an H×W×C map, got {dims:?}")));
    };
    let f = g.reshape(fmap, &[h * w, c])?;
    let x = g.matmul(f, f, true, false)?;
    let mean = g.scale(x, T::c(1.0 / (h * w) as f64));
    normalize_descriptor(g, mean)
}

/// Per-tap `(1/N) Σ_j f_j f_jᵀ`, normalized.
pub fn aggregate_bilinear_per_layer<T: Scalar>(
    taps: &BTreeMap<String, FeatureMap<T>>,
) -> Result<BTreeMap<String, BilinearDescriptor<T>>> {
    if taps.is_empty() {
        return Err(config_err!("no taps to aggregate"));
    }
    let mut out = BTreeMap::new();
    for (name, fm) in taps {
        let mut g = Graph::new();
        let x = g.constant(fm.values.clone());
        let d = mean_bilinear_node(&mut g, x)?;
        let c = fm.c();
        out.insert(name.clone(), BilinearDescriptor::from_matrix(g.value(d).reshape(&[c, c])?, true)?);
    }
    Ok(out)
}

/// TV_β prior of an H×W×C image.
pub fn tv_prior<T: Scalar>(image: &Tensor<T>, beta: T) -> Result<T> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let t = g.tv_prior(x, beta)?;
    Ok(g.value(t).data()[0])
}

/// Loss node `Σ_layers NLL(target) + γ·TV_β(x)` and the per-layer NLL nodes.
pub fn inversion_objective<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    backbone: &BackboneParams<T>,
    bcfg: &BackboneConfig,
    bank: &LayerClassifierBank<T>,
    target: usize,
    cfg: &InversionConfig,
) -> Result<(NodeId, Vec<NodeId>)> {
    cfg.validate()?;
    if target >= bank.classes {
        return Err(Error::Contract(format!("class {target} out of range for {} classes", bank.classes)));
    }
    for l in &cfg.layers {
        if !bank.heads.contains_key(l) {
            return Err(config_err!("no classifier for layer `{l}`"));
        }
    }
    let tap_cfg = BackboneConfig { taps: cfg.layers.clone(), ..bcfg.clone() };
    let nodes = backbone_nodes(g, backbone, false);
    let taps = backbone_graph(g, &tap_cfg, &nodes, x)?;
    let mut nlls = Vec::new();
    for l in &cfg.layers {
        let d = mean_bilinear_node(g, taps[l])?;
        let h = bank.heads[l].nodes(g, false);
        nlls.push(softmax_loss(g, h, d, target)?);
    }
    let mut total = nlls[0];
    for &n in &nlls[1..] {
        total = g.add(total, n)?;
    }
    let tv = g.tv_prior(x, T::c(cfg.beta))?;
    let prior = g.scale(tv, T::c(cfg.gamma));
    Ok((g.add(total, prior)?, nlls))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult<T> {
    pub image: Tensor<T>,
    /// `(iteration, objective)` of the initial point and every accepted step.
    pub trace: Vec<(usize, f64)>,
    /// Target-class posterior at each configured layer for the final image.
    pub posteriors: Vec<(String, f64)>,
}

const ARMIJO_SIGMA: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;
/// Largest pixel change of the first trial step.
const FIRST_STEP: f64 = 0.05;

/// Projected gradient descent with Armijo backtracking, pixels clamped to
/// [0,1], started from seeded uniform noise in [0.4, 0.6].
pub fn invert_category<T: Scalar>(
    backbone: &BackboneParams<T>,
    bcfg: &BackboneConfig,
    bank: &LayerClassifierBank<T>,
    target: usize,
    cfg: &InversionConfig,
) -> Result<InversionResult<T>> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.seed, 0x1E);
    let n = cfg.height * cfg.width * 3;
    let mut x = Tensor::new(vec![cfg.height, cfg.width, 3], rng.uniform_vec(n, 0.4, 0.6))?;
    let eval = |img: &Tensor<T>, want_grad: bool| -> Result<(f64, Option<Tensor<T>>, Vec<f64>)> {
        let mut g = Graph::new();
        let xn = if want_grad { g.param(img.clone()) } else { g.constant(img.clone()) };
        let (loss, nlls) = inversion_objective(&mut g, xn, backbone, bcfg, bank, target, cfg)?;
        let f = g.value(loss).data()[0].as_f64();
        if !f.is_finite() {
            return Err(Error::Numeric(format!("inversion objective became {f}")));
        }
        let posts = nlls.iter().map(|&id| (-g.value(id).data()[0].as_f64()).exp()).collect();
        let grad = if want_grad {
            g.backward(loss)?;
            Some(g.take_grad(xn))
        } else {
            None
        };
        Ok((f, grad, posts))
    };
    let (mut f, _, mut posts) = eval(&x, false)?;
    let mut trace = vec![(0, f)];
    let mut step: Option<f64> = None;
    for it in 1..=cfg.max_iters {
        let (_, grad, _) = eval(&x, true)?;
        let grad = grad.expect("requested");
        let gmax = grad.max_abs().as_f64();
        if gmax == 0.0 {
            break;
        }
        let mut t = step.unwrap_or(FIRST_STEP / gmax);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = x.zip_map(&grad, "invert", |p, d| (p - T::c(t) * d).max(T::zero()).min(T::one()))?;
            let moved = x.sub(&cand)?;
            let decrease = grad.dot(&moved)?.as_f64();
            let (fc, _, pc) = eval(&cand, false)?;
            if decrease > 0.0 && fc <= f - ARMIJO_SIGMA * decrease {
                accepted = Some((cand, fc, pc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc, pc)) = accepted else { break };
        x = cand;
        f = fc;
        posts = pc;
        trace.push((it, f));
        step = Some(2.0 * t);
    }
    let posteriors = cfg.layers.iter().cloned().zip(posts).collect();
    Ok(InversionResult { image: x, trace, posteriors })
}
