//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::Instant;

use bcnn::config::RunConfig;
use bcnn::encoders::{
    bilinear_backward, bilinear_pool, hard_vlad_encode, kronecker_projection, netbovw_encode, netfv_encode,
    netvlad_encode, Codebook, LocationFeatures,
};
use bcnn::gradsuite::run_grad_suite;
use bcnn::invert::{invert_category, tv_prior, InversionConfig, LayerClassifierBank};
use bcnn::io::{
    checkpoint_from_bytes, checkpoint_to_bytes, ppm_decode, ppm_encode, tensor_from_bytes, tensor_to_bytes, AnyTensor,
    Checkpoint, SyntheticTextureSpec,
};
use bcnn::model::{Input, Model};
use bcnn::train::{evaluate, fit_svms, train_two_step, Sample};
use bcnn::{Graph, Rng, Tensor};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Outcome {
    let o = Outcome { name, passed, detail };
    println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = a.max_abs().max(b.max_abs()).max(1e-300);
    a.max_abs_diff(b).unwrap() / scale
}

fn random_features(rng: &mut Rng, l: usize, c: usize) -> LocationFeatures<f64> {
    LocationFeatures::new(Tensor::new(vec![l, c], rng.normal_vec(l * c, 1.0)).unwrap()).unwrap()
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let report = run_grad_suite(0, None).expect("suite runs");
    let secs = t.elapsed().as_secs_f64();
    let worst = report.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failing: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    outcome(
        "gradient suite",
        report.passed() && secs <= 120.0,
        format!("{} ops, worst rel err {worst:.2e}, failing {failing:?}, {secs:.1}s", report.rows.len()),
    )
}

fn closed_form_bilinear() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let (l, m, n) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(5));
        let a = Tensor::new(vec![l, m], rng.normal_vec(l * m, 1.0)).unwrap();
        let b = Tensor::new(vec![l, n], rng.normal_vec(l * n, 1.0)).unwrap();
        let r = Tensor::new(vec![m, n], rng.normal_vec(m * n, 1.0)).unwrap();
        // loss Σ (AᵀB ⊙ R) has dℓ/dx = R
        let mut g = Graph::new();
        let (an, bn) = (g.param(a.clone()), g.param(b.clone()));
        let x = g.matmul(an, bn, true, false).unwrap();
        let rn = g.constant(r.clone());
        let p = g.mul(x, rn).unwrap();
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        let (da, db) = bilinear_backward(&a, &b, &r).unwrap();
        let err = |u: &Tensor<f64>, v: &Tensor<f64>| u.max_abs_diff(v).unwrap() / u.max_abs().max(1.0);
        worst = worst.max(err(&da, &g.take_grad(an))).max(err(&db, &g.take_grad(bn)));
    }
    outcome("closed-form bilinear gradients", worst <= 1e-12, format!("100 instances, max err {worst:.2e}"))
}

fn orderlessness() -> Outcome {
    let mut worst = [0.0f64; 4];
    for seed in 0..50 {
        let mut rng = Rng::new(1000 + seed);
        let (l, c, k) = (2 + rng.below(30), 1 + rng.below(6), 1 + rng.below(5));
        let f = random_features(&mut rng, l, c);
        let mu = Tensor::new(vec![k, c], rng.normal_vec(k * c, 1.0)).unwrap();
        let cb = Codebook::from_centers(mu, rng.uniform_in(0.1, 2.0)).unwrap();
        let mut perm: Vec<usize> = (0..l).collect();
        rng.shuffle(&mut perm);
        let p = f.permuted(&perm).unwrap();
        let pairs = [
            (bilinear_pool(&f, &f).unwrap(), bilinear_pool(&p, &p).unwrap()),
            (netvlad_encode(&f, &cb).unwrap(), netvlad_encode(&p, &cb).unwrap()),
            (netfv_encode(&f, &cb).unwrap(), netfv_encode(&p, &cb).unwrap()),
            (netbovw_encode(&f, &cb).unwrap(), netbovw_encode(&p, &cb).unwrap()),
        ];
        for (w, (a, b)) in worst.iter_mut().zip(&pairs) {
            *w = w.max(rel_diff(a, b));
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    outcome(
        "orderlessness",
        max <= 1e-12,
        format!(
            "50 trials, rel err bilinear {:.1e} netvlad {:.1e} netfv {:.1e} netbovw {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn soft_to_hard() -> Outcome {
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut rng = Rng::new(77);
    while instances < 50 {
        let (k, c) = (2 + rng.below(4), 1 + rng.below(4));
        let mu = Tensor::new(vec![k, c], rng.normal_vec(k * c, 1.0)).unwrap();
        // keep only locations whose two nearest centres differ by ≥ 0.01 in d²
        let mut rows = Vec::new();
        while rows.len() < 20 * c {
            let x = rng.normal_vec::<f64>(c, 1.0);
            let mut d2: Vec<f64> =
                (0..k).map(|j| x.iter().zip(mu.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()).collect();
            d2.sort_by(f64::total_cmp);
            if d2[1] - d2[0] >= 0.01 {
                rows.extend(x);
            }
        }
        let f = LocationFeatures::new(Tensor::new(vec![20, c], rows).unwrap()).unwrap();
        let cb = Codebook::from_centers(mu, 1e4).unwrap();
        let soft = netvlad_encode(&f, &cb).unwrap();
        let hard = hard_vlad_encode(&f, &cb).unwrap();
        worst = worst.max(soft.max_abs_diff(&hard).unwrap());
        instances += 1;
    }
    outcome("soft-to-hard limit", worst <= 1e-6, format!("{instances} instances at gamma 1e4, max abs err {worst:.2e}"))
}

/// Benchmark data: 8 classes of 64×64 textures, 100/20/50 per class.
fn benchmark(seed: u64) -> [Vec<Sample<f32>>; 3] {
    let spec = SyntheticTextureSpec::new(8, 64, [100, 20, 50], seed).unwrap();
    [spec.split(0), spec.split(1), spec.split(2)]
}

const FINETUNE: &str = "flip = false\nepochs_head = 30\nepochs_finetune = 15\npatience = 15\nlr = 0.001\n";
const HEAD_ONLY: &str = "flip = false\nepochs_head = 30\nepochs_finetune = 0\n";

struct Run {
    accuracy: f64,
    model: Model<f32>,
}

fn train_run(cfg: &str, seed: u64, data: &[Vec<Sample<f32>>; 3]) -> Run {
    let mut rc = RunConfig::parse(cfg).unwrap();
    rc.train.seed = seed;
    rc.resolve_classes(8).unwrap();
    let mut model = Model::new(rc.model.clone(), seed).unwrap();
    train_two_step(&mut model, &data[0], &data[1], &rc.train, |_| {}).unwrap();
    let accuracy = evaluate(&model, &data[2], false, false).unwrap().accuracy;
    Run { accuracy, model }
}

struct Trend {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Trend {
    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn gap_points(&self) -> f64 {
        100.0 * (Self::mean(&self.a) - Self::mean(&self.b))
    }

    fn describe(&self, a: &str, b: &str) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
        format!(
            "{a} {:.3} ({}) vs {b} {:.3} ({}), gap {:+.1} points",
            Self::mean(&self.a),
            fmt(&self.a),
            Self::mean(&self.b),
            fmt(&self.b),
            self.gap_points()
        )
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn trends(kept: &mut Option<Model<f32>>) -> Vec<Outcome> {
    let t0 = Instant::now();
    let data: Vec<_> = SEEDS.iter().map(|&s| benchmark(s)).collect();
    let mut bil = Trend { a: vec![], b: vec![] };
    for (i, &s) in SEEDS.iter().enumerate() {
        let run = train_run(&format!("backbone = 8\ntap = t1\nencoder = bilinear\n{FINETUNE}"), s, &data[i]);
        bil.a.push(run.accuracy);
        if i == 0 {
            *kept = Some(run.model);
        }
        bil.b.push(
            train_run(&format!("backbone = 8\ntap = t1\nencoder = fc-baseline\n{FINETUNE}"), s, &data[i]).accuracy,
        );
    }
    let bil_secs = t0.elapsed().as_secs_f64();

    let mut vlad = Trend { a: vec![], b: vec![] };
    for (i, &s) in SEEDS.iter().enumerate() {
        let base = "backbone = 4\ntap = t1\nencoder = netvlad\nk = 4\n";
        vlad.a.push(train_run(&format!("{base}{FINETUNE}"), s, &data[i]).accuracy);
        vlad.b.push(train_run(&format!("{base}{HEAD_ONLY}"), s, &data[i]).accuracy);
    }

    let mut rank = Trend { a: vec![], b: vec![] };
    for (i, &s) in SEEDS.iter().enumerate() {
        let base = format!("backbone = 16\ntap = t1\nencoder = bilinear\n{FINETUNE}");
        rank.a.push(train_run(&format!("{base}rank = full\n"), s, &data[i]).accuracy);
        rank.b.push(train_run(&format!("{base}rank = 2\n"), s, &data[i]).accuracy);
    }
    let total = t0.elapsed().as_secs_f64();
    vec![
        outcome(
            "bilinear beats fc baseline",
            bil.gap_points() >= 5.0 && total <= 1200.0,
            format!("{}; pair {bil_secs:.0}s, benchmark total {total:.0}s", bil.describe("bilinear", "fc")),
        ),
        outcome(
            "trainable netvlad beats frozen k-means",
            vlad.gap_points() >= 2.0,
            vlad.describe("fine-tuned", "frozen"),
        ),
        outcome("rank C/8 projection stays close", rank.gap_points() <= 2.0, rank.describe("full", "rank 2 of 16")),
    ]
}

fn svm_calibration(model: Option<Model<f32>>) -> Outcome {
    let mut model = model.expect("benchmark model");
    let data = benchmark(SEEDS[0]);
    fit_svms(&mut model, &data[0], 1.0, false).unwrap();
    let scores: Vec<Vec<f64>> = data[0]
        .iter()
        .map(|(img, _)| model.svm_scores(&model.descriptor(Input::Image(img)).unwrap()).unwrap())
        .collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    };
    let mut worst = 0.0f64;
    for k in 0..8 {
        let pos: Vec<f64> = scores.iter().zip(&data[0]).filter(|(_, (_, l))| *l == k).map(|(s, _)| s[k]).collect();
        let neg: Vec<f64> = scores.iter().zip(&data[0]).filter(|(_, (_, l))| *l != k).map(|(s, _)| s[k]).collect();
        worst = worst.max((median(pos) - 1.0).abs()).max((median(neg) + 1.0).abs());
    }
    outcome("svm calibration", worst <= 1e-9, format!("8 classes, max |median − target| {worst:.2e}"))
}

fn inversion() -> Outcome {
    let t0 = Instant::now();
    let spec = SyntheticTextureSpec::new(8, 64, [100, 20, 50], SEEDS[0]).unwrap();
    let train: Vec<Sample<f64>> = spec.split(0);
    let mut rc = RunConfig::parse(&format!("backbone = 8p,16\ntap = t1\nbank_taps = t1,t2\n{HEAD_ONLY}")).unwrap();
    rc.resolve_classes(8).unwrap();
    let mut model = Model::<f64>::new(rc.model.clone(), SEEDS[0]).unwrap();
    train_two_step(&mut model, &train, &[], &rc.train, |_| {}).unwrap();
    let bank = LayerClassifierBank::fit(
        &model.backbone,
        &model.cfg.backbone,
        &rc.bank_taps,
        &train,
        8,
        rc.bank_epochs,
        rc.bank_l2,
    )
    .unwrap();
    let mut min_post = 1.0f64;
    let mut monotone = true;
    for target in 0..8 {
        let cfg = InversionConfig { layers: rc.bank_taps.clone(), max_iters: 100, ..Default::default() };
        let r = invert_category(&model.backbone, &model.cfg.backbone, &bank, target, &cfg).unwrap();
        monotone &= r.trace.windows(2).all(|w| w[1].1 <= w[0].1);
        min_post = r.posteriors.iter().map(|(_, p)| *p).fold(min_post, f64::min);
    }
    let tv_const = tv_prior(&Tensor::full(&[16, 16, 3], 0.37f64).unwrap(), 2.0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        "category inversion",
        min_post >= 0.9 && monotone && tv_const == 0.0 && secs <= 300.0,
        format!(
            "8 classes × layers t1,t2: min posterior {min_post:.4}, traces non-increasing {monotone}, tv(const) {tv_const}, {secs:.1}s"
        ),
    )
}

fn bits(t: &AnyTensor) -> Vec<u64> {
    match t {
        AnyTensor::F32(t) => t.data().iter().map(|v| v.to_bits() as u64).collect(),
        AnyTensor::F64(t) => t.data().iter().map(|v| v.to_bits()).collect(),
    }
}

fn random_any(rng: &mut Rng) -> AnyTensor {
    let rank = 1 + rng.below(3);
    let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5)).collect();
    let n = dims.iter().product();
    // raw bit patterns, including NaN payloads and infinities
    if rng.below(2) == 0 {
        AnyTensor::F32(Tensor::new(dims, (0..n).map(|_| f32::from_bits(rng.next_u64() as u32)).collect()).unwrap())
    } else {
        AnyTensor::F64(Tensor::new(dims, (0..n).map(|_| f64::from_bits(rng.next_u64())).collect()).unwrap())
    }
}

fn serialization() -> Outcome {
    let mut rng = Rng::new(4242);
    let mut exact = true;
    for _ in 0..100 {
        let t = random_any(&mut rng);
        let back = tensor_from_bytes(&tensor_to_bytes(&t)).unwrap();
        exact &= back.dims() == t.dims() && back.dtype() == t.dtype() && bits(&back) == bits(&t);
        let mut ck = Checkpoint::new();
        for i in 0..1 + rng.below(5) {
            ck.insert(format!("group{}/p{i}", rng.below(3)), random_any(&mut rng));
        }
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ck)).unwrap();
        exact &= back.len() == ck.len()
            && back.iter().zip(&ck).all(|((ka, a), (kb, b))| ka == kb && a.dims() == b.dims() && bits(a) == bits(b));
    }
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (1 + rng.below(20), 1 + rng.below(20));
        let img = Tensor::new(vec![h, w, 3], rng.uniform_vec::<f64>(h * w * 3, 0.0, 1.0)).unwrap();
        let back: Tensor<f64> = ppm_decode(&ppm_encode(&img).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&img).unwrap());
    }
    outcome(
        "serialization",
        exact && worst <= 1.0 / 510.0,
        format!(
            "100 tensor and checkpoint trials bit-exact {exact}, ppm max err {worst:.5} (bound {:.5})",
            1.0 / 510.0
        ),
    )
}

fn projection_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(31);
    for _ in 0..100 {
        let (l, d, n) = (3 + rng.below(2), 3 + rng.below(2), 3 + rng.below(2));
        let r = 1 + rng.below(d);
        let f = Tensor::new(vec![l, d], rng.normal_vec(l * d, 1.0)).unwrap();
        let g = Tensor::new(vec![l, n], rng.normal_vec(l * n, 1.0)).unwrap();
        let p = Tensor::new(vec![d, r], rng.normal_vec(d * r, 1.0)).unwrap();
        // left: project F then pool; right: pool then apply P ⊗ I
        let fp = naive_matmul(&f, &p);
        let lhs = naive_matmul(&transpose(&fp), &g);
        let full = naive_matmul(&transpose(&f), &g).reshape(&[1, d * n]).unwrap();
        let rhs = naive_matmul(&full, &kronecker_projection(&p, n).unwrap()).reshape(&[r, n]).unwrap();
        worst = worst.max(lhs.max_abs_diff(&rhs).unwrap() / lhs.max_abs().max(1.0));
    }
    outcome("projection equivalence", worst <= 1e-10, format!("100 instances, max err {worst:.2e}"))
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k) = a.shape2().unwrap();
    let (_, n) = b.shape2().unwrap();
    Tensor::from_fn(&[m, n], |o| (0..k).map(|t| a.at(&[o / n, t]) * b.at(&[t, o % n])).sum()).unwrap()
}

fn transpose(a: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = a.shape2().unwrap();
    Tensor::from_fn(&[n, m], |o| a.at(&[o % m, o / m])).unwrap()
}

fn main() {
    let t0 = Instant::now();
    let mut kept = None;
    // quick checks first; the training benchmark dominates the runtime
    let mut results = vec![
        gradient_suite(),
        closed_form_bilinear(),
        orderlessness(),
        soft_to_hard(),
        serialization(),
        projection_equivalence(),
        inversion(),
    ];
    results.extend(trends(&mut kept));
    results.push(svm_calibration(kept));
    let failed: Vec<&str> = results.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!(
        "acceptance: {}/{} passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
