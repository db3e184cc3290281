//! Self-check suite run by `cmc verify`: loss against the brute-force
//! oracle, finite-difference gradients, patch geometry and the schedule.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{BinaryOp, BnMode, BatchNormState, Graph, Reduction, UnaryOp, Var};
use crate::data;
use crate::encoders::{self, Binder, EncoderSpec};
use crate::error::Result;
use crate::gradcheck;
use crate::loss::{self, EmbeddingSet, LossReduction};
use crate::modality::Modality;
use crate::oracle;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::train;

pub const ORACLE_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, cases: usize, max_deviation: f64, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            cases,
            max_deviation,
            tolerance,
            passed: max_deviation <= tolerance,
            detail,
        }
    }
}

pub fn normal_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(r))
}

/// Values with magnitude in `[0.1, 1]`, away from the ReLU kink.
fn kinkless(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.random_range(0.1..1.0);
        if r.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// A random embedding set with `B ≤ 4`, `M ≤ 3`, `N ≤ 2`, `D ≤ 8` and at
/// least two scenes and two views.
pub fn random_embedding_set(r: &mut Rng) -> EmbeddingSet {
    loop {
        let b = r.random_range(2..=4);
        let m = r.random_range(1..=3);
        let n = r.random_range(1..=2);
        if m * n < 2 {
            continue;
        }
        let d = r.random_range(1..=8);
        let tau = r.random_range(0.05..2.0);
        let z = normal_tensor(r, &[b, m * n, d]);
        if z.data().chunks(d).any(|row| row.iter().map(|v| v * v).sum::<f64>() < 1e-6) {
            continue;
        }
        let labels = (0..m * n).map(|v| v / n).collect();
        return EmbeddingSet::new(z, labels, m, tau).expect("valid instance");
    }
}

/// `(max |loss − oracle|, instances)` over `count` random instances.
pub fn oracle_agreement(seed: u64, count: usize) -> Result<f64> {
    let mut r = rng::stream(seed, &[0x0AC1E]);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let e = random_embedding_set(&mut r);
        let a = loss::fullgraph_cmc_loss(&e)?;
        let b = oracle::loss_oracle(&e)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of a differentiable operation.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: CaseFn,
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// Tiny two-level model used for the end-to-end checks.
fn tiny_spec(modalities: Vec<Modality>) -> EncoderSpec {
    EncoderSpec {
        modalities,
        widths: vec![2, 3],
        kernel: 3,
        proj_hidden: 4,
        proj_out: 3,
        decoder: Default::default(),
    }
}

/// Random biases and batchnorm shifts, so they are exercised and no
/// projected row collapses to zero.
fn jitter_offsets(weights: &mut encoders::ModelWeights, r: &mut Rng) {
    for (name, t) in weights.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") {
            *t = Tensor::from_fn(t.shape(), |_| r.random_range(0.1..0.5));
        }
    }
}

/// Checks every trainable parameter of a real model against differences.
fn model_case(
    name: &'static str,
    weights: encoders::ModelWeights,
    f: impl Fn(&mut Graph, &mut Binder) -> Result<Var> + 'static,
) -> OpCase {
    let names: Vec<String> = weights
        .params
        .keys()
        .filter(|k| encoders::is_trainable(k))
        .cloned()
        .collect();
    let inputs = names.iter().map(|k| weights.params[k].clone()).collect();
    case(name, inputs, move |g, v| {
        let mut b = Binder::new(&weights);
        for (k, &var) in names.iter().zip(v) {
            b.bind(k, var);
        }
        f(g, &mut b)
    })
}

/// One random instance of every differentiable operation, including the
/// end-to-end contrastive and segmentation losses.
pub fn op_cases(r: &mut Rng) -> Vec<OpCase> {
    let (m, k, n) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=3));
    let mut cases = vec![
        case("matmul", vec![normal_tensor(r, &[m, k]), normal_tensor(r, &[k, n])], |g, v| g.matmul(v[0], v[1])),
        case("transpose", vec![normal_tensor(r, &[m, n])], |g, v| g.transpose(v[0])),
        case("add", vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[m, n])], |g, v| g.binary(BinaryOp::Add, v[0], v[1])),
        case("sub", vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[1])], |g, v| g.binary(BinaryOp::Sub, v[0], v[1])),
        case("mul", vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[m, n])], |g, v| g.binary(BinaryOp::Mul, v[0], v[1])),
        case("scale", vec![normal_tensor(r, &[m, n])], |g, v| g.scale(v[0], -1.7)),
        case("exp", vec![normal_tensor(r, &[m, n])], |g, v| g.unary(UnaryOp::Exp, v[0])),
        case(
            "log",
            vec![Tensor::from_fn(&[m, n], |_| r.random_range(0.5..2.0))],
            |g, v| g.unary(UnaryOp::Log, v[0]),
        ),
        case("relu", vec![kinkless(r, &[m, n])], |g, v| g.unary(UnaryOp::Relu, v[0])),
        case("sigmoid", vec![normal_tensor(r, &[m, n])], |g, v| g.unary(UnaryOp::Sigmoid, v[0])),
        case("sum", vec![normal_tensor(r, &[m, n])], |g, v| g.reduce(Reduction::Sum, v[0], 1)),
        case("mean", vec![normal_tensor(r, &[m, n])], |g, v| g.reduce(Reduction::Mean, v[0], 0)),
        case("logsumexp", vec![normal_tensor(r, &[m, n + 1])], |g, v| g.reduce(Reduction::LogSumExp, v[0], 1)),
        case("sum_all", vec![normal_tensor(r, &[m, n])], |g, v| g.sum_all(v[0])),
        case("mean_all", vec![normal_tensor(r, &[m, n])], |g, v| g.mean_all(v[0])),
        case("reshape", vec![normal_tensor(r, &[m, n])], move |g, v| g.reshape(v[0], &[n, m])),
        {
            let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..m * n)).collect();
            case("gather", vec![normal_tensor(r, &[m, n])], move |g, v| g.gather(v[0], idx.clone(), &[5]))
        },
        case("concat", vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[k, n])], |g, v| g.concat(&[v[0], v[1]])),
    ];
    let (c, o, e) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(4..=5));
    let (stride, pad) = if e == 5 { (2, 1) } else { (1, r.random_range(0..=1)) };
    cases.push(case(
        "conv2d",
        vec![normal_tensor(r, &[2, c, e, e]), normal_tensor(r, &[o, c, 3, 3])],
        move |g, v| g.conv2d(v[0], v[1], stride, pad),
    ));
    cases.push(case(
        "conv2d_padded",
        vec![normal_tensor(r, &[1, c, 4, 4]), normal_tensor(r, &[o, c, 3, 3])],
        |g, v| g.conv2d_padded(v[0], v[1], 2, 0, 1),
    ));
    cases.push(case(
        "channel_bias",
        vec![normal_tensor(r, &[2, c, 3, 3]), normal_tensor(r, &[c])],
        |g, v| g.channel_bias(v[0], v[1]),
    ));
    cases.push(case("row_bias", vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[n])], |g, v| g.row_bias(v[0], v[1])));
    cases.push(case(
        "linear",
        vec![normal_tensor(r, &[m, k]), normal_tensor(r, &[k, n]), normal_tensor(r, &[n])],
        |g, v| g.linear(v[0], v[1], v[2]),
    ));
    let rows = r.random_range(2..=4);
    cases.push(case(
        "batchnorm",
        vec![normal_tensor(r, &[rows, n]), normal_tensor(r, &[n]), normal_tensor(r, &[n])],
        move |g, v| {
            let mut state = BatchNormState::new(n);
            g.batchnorm(v[0], v[1], v[2], BnMode::Train, &mut state)
        },
    ));
    cases.push(case("global_avg_pool", vec![normal_tensor(r, &[2, c, 3, 3])], |g, v| g.global_avg_pool(v[0])));
    cases.push(case("upsample_nearest", vec![normal_tensor(r, &[1, c, 2, 3])], |g, v| g.upsample_nearest(v[0], 2)));
    cases.push(case("normalize_rows", vec![normal_tensor(r, &[m, n + 1])], |g, v| g.normalize_rows(v[0])));
    let targets = Tensor::from_fn(&[m, n], |_| if r.random::<bool>() { 1.0 } else { 0.0 });
    cases.push(case("bce_with_logits", vec![normal_tensor(r, &[m, n])], move |g, v| {
        g.bce_with_logits(v[0], &targets)
    }));
    cases.push(case("cosine_similarity", vec![normal_tensor(r, &[k + 1]), normal_tensor(r, &[k + 1])], |g, v| {
        loss::cosine_similarity_var(g, v[0], v[1])
    }));
    let pairs = r.random_range(1..=3);
    let tau = r.random_range(0.1..1.0);
    cases.push(case("pairwise_loss", vec![normal_tensor(r, &[2 * pairs, 3])], move |g, v| {
        let partner: Vec<usize> = (0..2 * pairs).map(|i| i ^ 1).collect();
        loss::pairwise_loss_var(g, v[0], &partner, tau)
    }));
    let e = random_embedding_set(r);
    let (eb, ev, ed, et) = (e.batch(), e.views(), e.dim(), e.temperature());
    let reduction = if r.random::<bool>() { LossReduction::Sum } else { LossReduction::Mean };
    cases.push(case("fullgraph_loss", vec![e.z().clone().reshape(&[eb * ev, ed]).expect("shape")], move |g, v| {
        loss::fullgraph_loss_var(g, v[0], eb, ev, et, reduction)
    }));

    // end to end through the real encoder, projection head and loss
    let seed = r.random::<u64>();
    let spec = tiny_spec(vec![Modality::Sar, Modality::Gt]);
    let mut weights = encoders::init_weights(&spec, seed).expect("valid spec");
    jitter_offsets(&mut weights, r);
    // 8×8 keeps at least 8 rows in the deepest encoder batchnorm
    let sar = normal_tensor(r, &[2, 3, 8, 8]);
    let gt = Tensor::from_fn(&[2, 1, 8, 8], |_| if r.random::<bool>() { 1.0 } else { 0.0 });
    cases.push(model_case("contrastive_end_to_end", weights, move |g, b| {
        let mut parts = Vec::new();
        for (m, x) in [(Modality::Sar, &sar), (Modality::Gt, &gt)] {
            let x = g.constant(x.clone())?;
            let h = encoders::features_var(g, b, m, x, BnMode::Train)?;
            parts.push(encoders::project_var(g, b, m, h, BnMode::Train)?);
        }
        let z = g.concat(&parts)?;
        // rows (modality, scene) → (scene, view)
        let index = [0usize, 2, 1, 3].iter().flat_map(|&row| (0..3).map(move |k| row * 3 + k)).collect();
        let z = g.gather(z, index, &[4, 3])?;
        loss::fullgraph_loss_var(g, z, 2, 2, 0.5, LossReduction::Sum)
    }));
    let spec = tiny_spec(vec![Modality::Sar]);
    let mut weights = encoders::init_segmentation(&spec, seed).expect("valid spec");
    jitter_offsets(&mut weights, r);
    let x = normal_tensor(r, &[2, 3, 8, 8]);
    let y = Tensor::from_fn(&[2, 1, 8, 8], |_| if r.random::<bool>() { 1.0 } else { 0.0 });
    cases.push(model_case("segmentation_end_to_end", weights, move |g, b| {
        let xv = g.constant(x.clone())?;
        let logits = encoders::segment_logits_var(g, b, xv, BnMode::Train)?;
        g.bce_with_logits(logits, &y)
    }));
    cases
}

/// Worst relative gradient error per op over `rounds` random instances.
pub fn gradient_suite(seed: u64, rounds: usize) -> Result<Vec<(String, usize, f64)>> {
    let mut out: Vec<(String, usize, f64)> = Vec::new();
    for round in 0..rounds {
        let mut r = rng::stream(seed, &[0x96AD, round as u64]);
        for c in op_cases(&mut r) {
            let report = gradcheck::check_gradients(&c.inputs, FD_STEP, &c.f)?;
            match out.iter_mut().find(|(n, _, _)| n == c.name) {
                Some(entry) => {
                    entry.1 += 1;
                    entry.2 = entry.2.max(report.max_rel_error);
                }
                None => out.push((c.name.to_string(), 1, report.max_rel_error)),
            }
        }
    }
    Ok(out)
}

fn hand_case() -> Result<f64> {
    // two scenes, two views, unit vectors: same-scene cos 1, cross-scene 0
    let z = Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0])?;
    let e = EmbeddingSet::new(z, vec![0, 1], 2, 1.0)?;
    let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
    Ok((loss::fullgraph_cmc_loss(&e)? - expected).abs())
}

fn pairwise_degenerate() -> Result<f64> {
    let z = Tensor::new(vec![2, 3], vec![0.2, -1.0, 0.5, 0.9, 0.1, -0.3])?;
    let mut worst = loss::pairwise_loss(&z, &[1, 0], 0.3)?.abs();
    for n in 1..=4usize {
        let z = Tensor::ones(&[2 * n, 4]);
        let partner: Vec<usize> = (0..2 * n).map(|i| i ^ 1).collect();
        let l = loss::pairwise_loss(&z, &partner, 0.7)?;
        worst = worst.max((l - 2.0 * n as f64 * ((2 * n - 1) as f64).ln()).abs());
    }
    Ok(worst)
}

fn merge_roundtrip() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (extent, s, r) in [(64, 32, 16), (70, 32, 16), (900, 300, 150), (33, 8, 5)] {
        let grid = data::make_grid(extent, s, r)?;
        let map = Tensor::from_fn(&[1, extent, extent], |i| ((i * 7919) % 1000) as f64 / 999.0);
        let preds: Vec<_> = grid
            .offsets
            .iter()
            .map(|&(y, x)| Ok(((y, x), crate::raster::crop(&map, y, x, s, s)?)))
            .collect::<Result<_>>()?;
        let merged = data::merge(&preds, &grid)?;
        for (a, b) in merged.data().iter().zip(map.data()) {
            worst = worst.max((a - b).abs());
        }
        if grid.coverage().contains(&0) {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

fn schedule_boundaries() -> Result<f64> {
    let (base, w, e) = (0.1, 10, 500);
    let mut worst = (train::lr_schedule(w - 1, base, w, e)? - base).abs();
    for epoch in [0, 4, 9] {
        let expect = base * (epoch + 1) as f64 / w as f64;
        worst = worst.max((train::lr_schedule(epoch, base, w, e)? - expect).abs());
    }
    for epoch in [10, 11, 250, 499] {
        let p = (epoch - w) as f64 / (e - w) as f64;
        let expect = 0.5 * base * (1.0 + (std::f64::consts::PI * p).cos());
        worst = worst.max((train::lr_schedule(epoch, base, w, e)? - expect).abs());
    }
    let mut prev = f64::INFINITY;
    for epoch in w..e {
        let lr = train::lr_schedule(epoch, base, w, e)?;
        if lr > prev {
            worst = f64::INFINITY;
        }
        prev = lr;
    }
    Ok(worst)
}

/// Runs every check. `rounds` random instances per gradient case.
pub fn run_all(seed: u64, rounds: usize) -> Result<Vec<Check>> {
    let mut out = vec![
        Check::new("loss_oracle", 200, oracle_agreement(seed, 200)?, ORACLE_TOL, "full-graph loss vs nested-loop oracle".into()),
        Check::new("hand_case", 1, hand_case()?, 1e-5, "B=2, V=2, tau=1 closed form".into()),
        Check::new("pairwise_degenerate", 5, pairwise_degenerate()?, ORACLE_TOL, "single pair and uniform similarity".into()),
    ];
    for (name, cases, err) in gradient_suite(seed, rounds)? {
        out.push(Check::new(&format!("grad:{name}"), cases, err, GRAD_TOL, "relative error vs central differences".into()));
    }
    out.push(Check::new("merge_roundtrip", 4, merge_roundtrip()?, 0.0, "extract then merge of a per-pixel map".into()));
    out.push(Check::new("schedule", 500, schedule_boundaries()?, 1e-12, "warm-up boundary, spot values, monotone decay".into()));
    Ok(out)
}
