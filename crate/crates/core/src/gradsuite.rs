//! The full finite-difference suite behind `bcnn gradcheck`.

use std::collections::BTreeMap;
use std::fmt;

use crate::autograd::{Graph, NodeId};
use crate::backbone::{backbone_graph, backbone_init, backbone_nodes, BackboneConfig, BackboneNodes};
use crate::encoders::{
    bilinear_backward, codebook_nodes, normalize_descriptor, soft_assign_node, Codebook, CodebookNodes,
};
use crate::error::Result;
use crate::gradcheck::{compare_central, finite_diff_check, GradCheckReport, Probe};
use crate::heads::{softmax_loss, SoftmaxHead};
use crate::invert::{inversion_objective, InversionConfig, LayerClassifierBank};
use crate::rng::Rng;
use crate::tensor::{matmul_ex, ReduceMode, Tensor};

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
pub const SEEDS: u64 = 10;

/// Deliberate defects for checking that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negate dℓ/dA in the closed-form bilinear backward.
    BilinearSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "op\tmax_rel_err\tchecked\tskipped\tstatus")?;
        for r in &self.rows {
            let status = if r.passed { "ok" } else { "FAIL" };
            writeln!(f, "{}\t{:.3e}\t{}\t{}\t{status}", r.name, r.max_rel_err, r.checked, r.skipped)?;
        }
        Ok(())
    }
}

fn rand(rng: &mut Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), rng.uniform_vec(n, lo, hi)).expect("dims match")
}

/// `Σ r ⊙ y` for a fixed random `r`, so every output entry contributes.
fn weigh(g: &mut Graph<f64>, y: NodeId, rng: &mut Rng) -> Result<NodeId> {
    let dims = g.value(y).dims().to_vec();
    let r = g.constant(rand(rng, &dims, -1.0, 1.0));
    let p = g.mul(y, r)?;
    g.sum_all(p)
}

type Case = fn(&mut Rng, Option<Fault>) -> Result<GradCheckReport>;

fn graph_case(
    x0: Tensor<f64>,
    rng: &mut Rng,
    build: impl Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    let seed = rng.next_u64();
    finite_diff_check(
        |g, x| {
            let y = build(g, x)?;
            weigh(g, y, &mut Rng::new(seed))
        },
        &x0,
        STEP,
        TOLERANCE,
    )
}

fn codebook(rng: &mut Rng, k: usize, d: usize) -> Codebook<f64> {
    let mu = rand(rng, &[k, d], -1.0, 1.0);
    let cb = Codebook::from_centers(mu, 1.5).expect("valid centers");
    let w = cb.w().map(|v| v * 0.9);
    Codebook::untied(cb.mu().clone(), 1.5, w, cb.b().clone()).expect("valid codebook")
}

/// A texture encoder over features `x` (L×d), normalized like the model does.
fn texture(g: &mut Graph<f64>, x: NodeId, cb: CodebookNodes, kind: u8) -> Result<NodeId> {
    let a = soft_assign_node(g, x, cb)?;
    let pooled = match kind {
        0 => g.residual_aggregate(x, a, cb.mu, false)?,
        1 => g.residual_aggregate(x, a, cb.mu, true)?,
        _ => g.reduce(a, &[0], ReduceMode::Sum)?,
    };
    normalize_descriptor(g, pooled)
}

fn texture_case(rng: &mut Rng, kind: u8) -> Result<GradCheckReport> {
    let cb = codebook(rng, 3, 4);
    let x0 = rand(rng, &[6, 4], -1.0, 1.0);
    let by_x = graph_case(x0.clone(), rng, |g, x| {
        let nodes = codebook_nodes(g, &cb, false)?;
        texture(g, x, nodes, kind)
    })?;
    // centers, with assignment weights tied to them
    let by_mu = graph_case(cb.mu().clone(), rng, |g, mu| {
        let x = g.constant(x0.clone());
        let w = g.scale(mu, 2.0 * cb.gamma());
        let sq = g.mul(mu, mu)?;
        let n = g.reduce(sq, &[1], ReduceMode::Sum)?;
        let b = g.scale(n, -cb.gamma());
        texture(g, x, CodebookNodes { w, b, mu }, kind)
    })?;
    let by_w = graph_case(cb.w().clone(), rng, |g, w| {
        let x = g.constant(x0.clone());
        let nodes = codebook_nodes(g, &cb, false)?;
        texture(g, x, CodebookNodes { w, ..nodes }, kind)
    })?;
    let by_b = graph_case(cb.b().clone(), rng, |g, b| {
        let x = g.constant(x0.clone());
        let nodes = codebook_nodes(g, &cb, false)?;
        texture(g, x, CodebookNodes { b, ..nodes }, kind)
    })?;
    Ok(merge(&[by_x, by_mu, by_w, by_b]))
}

fn merge(parts: &[GradCheckReport]) -> GradCheckReport {
    let max_rel_err = parts.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    GradCheckReport {
        max_rel_err,
        checked: parts.iter().map(|r| r.checked).sum(),
        skipped: parts.iter().map(|r| r.skipped).sum(),
        passed: parts.iter().all(|r| r.passed),
        note: None,
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig::from_channels(&[3, 4], 1, &["t1", "t2"])
}

fn backbone_case(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = tiny_backbone();
    let params = backbone_init(&cfg, rng.next_u64())?;
    let img = rand(rng, &[8, 8, 3], 0.0, 1.0);
    let out = |g: &mut Graph<f64>, nodes: &BackboneNodes, x: NodeId| -> Result<NodeId> {
        Ok(backbone_graph(g, &cfg, nodes, x)?["t2"])
    };
    let by_image = graph_case(img.clone(), rng, |g, x| {
        let nodes = backbone_nodes(g, &params, false);
        let taps = backbone_graph(g, &cfg, &nodes, x)?;
        let t1 = g.reduce(taps["t1"], &[0, 1], ReduceMode::Mean)?;
        let t2 = g.reduce(taps["t2"], &[0, 1], ReduceMode::Mean)?;
        let t1 = g.reshape(t1, &[1, 3])?;
        let t2 = g.reshape(t2, &[1, 4])?;
        let p = g.matmul(t1, t2, true, false)?;
        g.reshape(p, &[12])
    })?;
    let mut parts = vec![by_image];
    for stage in 0..cfg.stages.len() {
        for bias in [false, true] {
            let x0 = if bias { params.biases[stage].clone() } else { params.weights[stage].clone() };
            parts.push(graph_case(x0, rng, |g, p| {
                let mut nodes = backbone_nodes(g, &params, false);
                if bias {
                    nodes.biases[stage] = p;
                } else {
                    nodes.weights[stage] = p;
                }
                let x = g.constant(img.clone());
                out(g, &nodes, x)
            })?);
        }
    }
    Ok(merge(&parts))
}

fn random_bank(rng: &mut Rng, cfg: &BackboneConfig, classes: usize) -> Result<LayerClassifierBank<f64>> {
    let mut heads = BTreeMap::new();
    for tap in &cfg.taps {
        let c = cfg.channels(tap)?;
        let d = c * c;
        heads.insert(
            tap.clone(),
            SoftmaxHead { w: rand(rng, &[d, classes], -2.0, 2.0), bias: rand(rng, &[classes], -0.5, 0.5) },
        );
    }
    Ok(LayerClassifierBank { heads, classes })
}

fn case_matmul(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let b = rand(rng, &[4, 2], -1.0, 1.0);
    let c = rand(rng, &[3, 5], -1.0, 1.0);
    let x0 = rand(rng, &[3, 4], -1.0, 1.0);
    let plain = graph_case(x0.clone(), rng, |g, x| {
        let b = g.constant(b.clone());
        g.matmul(x, b, false, false)
    })?;
    let transposed = graph_case(x0, rng, |g, x| {
        let c = g.constant(c.clone());
        g.matmul(x, c, true, false)
    })?;
    Ok(merge(&[plain, transposed]))
}

fn case_relu(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    graph_case(rand(rng, &[12], -1.0, 1.0), rng, |g, x| Ok(g.relu(x)))
}

fn case_softmax(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let label = rng.below(5);
    let rows = graph_case(rand(rng, &[3, 5], -2.0, 2.0), rng, |g, x| g.softmax(x, 1))?;
    let nll = finite_diff_check(|g, x| g.softmax_nll(x, label), &rand(rng, &[1, 5], -2.0, 2.0), STEP, TOLERANCE)?;
    Ok(merge(&[rows, nll]))
}

fn case_signed_sqrt(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    graph_case(rand(rng, &[12], -1.0, 1.0), rng, |g, x| Ok(g.signed_sqrt(x)))
}

fn case_l2(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    graph_case(rand(rng, &[1, 9], -1.0, 1.0), rng, |g, x| Ok(g.l2_normalize(x)))
}

fn case_soft_assign(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let cb = codebook(rng, 3, 4);
    graph_case(rand(rng, &[5, 4], -1.0, 1.0), rng, |g, x| {
        let nodes = codebook_nodes(g, &cb, false)?;
        soft_assign_node(g, x, nodes)
    })
}

/// The closed-form bilinear backward against central differences of
/// `Σ r ⊙ AᵀB`, in both arguments.
fn case_bilinear_closed_form(rng: &mut Rng, fault: Option<Fault>) -> Result<GradCheckReport> {
    let a = rand(rng, &[5, 3], -1.0, 1.0);
    let b = rand(rng, &[5, 4], -1.0, 1.0);
    let r = rand(rng, &[3, 4], -1.0, 1.0);
    let (mut da, db) = bilinear_backward(&a, &b, &r)?;
    if fault == Some(Fault::BilinearSign) {
        da = da.scale(-1.0);
    }
    let value = |a: &Tensor<f64>, b: &Tensor<f64>| -> Result<Probe> {
        let x = matmul_ex(a, b, true, false)?;
        Ok(Probe { value: x.dot(&r)?, pattern: 0 })
    };
    let wrt_a = compare_central(|t| value(t, &b), &da, &a, STEP, TOLERANCE)?;
    let wrt_b = compare_central(|t| value(&a, t), &db, &b, STEP, TOLERANCE)?;
    Ok(merge(&[wrt_a, wrt_b]))
}

fn case_bilinear(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let p = rand(rng, &[4, 2], -1.0, 1.0);
    let full = graph_case(rand(rng, &[6, 4], -1.0, 1.0), rng, |g, x| {
        let pooled = g.matmul(x, x, true, false)?;
        normalize_descriptor(g, pooled)
    })?;
    // one-sided projection, checked in both the features and the projection
    let x0 = rand(rng, &[6, 4], -1.0, 1.0);
    let by_x = graph_case(x0.clone(), rng, |g, x| {
        let p = g.constant(p.clone());
        let a = g.matmul(x, p, false, false)?;
        let pooled = g.matmul(a, x, true, false)?;
        normalize_descriptor(g, pooled)
    })?;
    let by_p = graph_case(p.clone(), rng, |g, p| {
        let x = g.constant(x0.clone());
        let a = g.matmul(x, p, false, false)?;
        let pooled = g.matmul(a, x, true, false)?;
        normalize_descriptor(g, pooled)
    })?;
    Ok(merge(&[full, by_x, by_p]))
}

fn case_netvlad(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    texture_case(rng, 0)
}

fn case_netfv(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    texture_case(rng, 1)
}

fn case_netbovw(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    texture_case(rng, 2)
}

fn case_backbone(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    backbone_case(rng)
}

fn case_head(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let head = SoftmaxHead { w: rand(rng, &[6, 3], -1.0, 1.0), bias: rand(rng, &[3], -1.0, 1.0) };
    let label = rng.below(3);
    let d0 = rand(rng, &[1, 6], -1.0, 1.0);
    let by_d = finite_diff_check(
        |g, d| {
            let h = head.nodes(g, false);
            softmax_loss(g, h, d, label)
        },
        &d0,
        STEP,
        TOLERANCE,
    )?;
    let by_w = finite_diff_check(
        |g, w| {
            let h = head.nodes(g, false);
            let d = g.constant(d0.clone());
            softmax_loss(g, crate::heads::HeadNodes { w, ..h }, d, label)
        },
        &head.w,
        STEP,
        TOLERANCE,
    )?;
    Ok(merge(&[by_d, by_w]))
}

fn case_tv(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let x0 = rand(rng, &[5, 6, 3], 0.0, 1.0);
    let quadratic = finite_diff_check(|g, x| g.tv_prior(x, 2.0), &x0, STEP, TOLERANCE)?;
    let fractional = finite_diff_check(|g, x| g.tv_prior(x, 1.5), &x0, STEP, TOLERANCE)?;
    Ok(merge(&[quadratic, fractional]))
}

fn case_inversion(rng: &mut Rng, _: Option<Fault>) -> Result<GradCheckReport> {
    let bcfg = tiny_backbone();
    let params = backbone_init(&bcfg, rng.next_u64())?;
    let bank = random_bank(rng, &bcfg, 3)?;
    let target = rng.below(3);
    let cfg = InversionConfig { gamma: 0.05, layers: bcfg.taps.clone(), height: 8, width: 8, ..Default::default() };
    finite_diff_check(
        |g, x| Ok(inversion_objective(g, x, &params, &bcfg, &bank, target, &cfg)?.0),
        &rand(rng, &[8, 8, 3], 0.0, 1.0),
        STEP,
        TOLERANCE,
    )
}

pub const CASES: &[(&str, Case)] = &[
    ("matmul", case_matmul),
    ("relu", case_relu),
    ("softmax", case_softmax),
    ("signed_sqrt", case_signed_sqrt),
    ("l2_normalize", case_l2),
    ("soft_assign", case_soft_assign),
    ("bilinear_closed_form", case_bilinear_closed_form),
    ("bilinear", case_bilinear),
    ("netvlad", case_netvlad),
    ("netfv", case_netfv),
    ("netbovw", case_netbovw),
    ("backbone", case_backbone),
    ("softmax_head", case_head),
    ("tv_prior", case_tv),
    ("inversion_objective", case_inversion),
];

/// Run every case over seeds `seed..seed + SEEDS`.
pub fn run_grad_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    for (ci, &(name, case)) in CASES.iter().enumerate() {
        let mut parts = Vec::new();
        for s in seed..seed + SEEDS {
            let mut rng = Rng::stream(s, 0x6C00 + ci as u64);
            parts.push(case(&mut rng, fault)?);
        }
        let m = merge(&parts);
        rows.push(SuiteRow {
            name,
            max_rel_err: m.max_rel_err,
            checked: m.checked,
            skipped: m.skipped,
            passed: m.passed,
        });
    }
    Ok(SuiteReport { rows })
}
