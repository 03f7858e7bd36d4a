//! Finite-difference gradient suites on micro configurations, shared by the
//! unit tests and the command-line checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assigner::AssignmentResult;
use crate::association::{self, affinity, asso_loss, AppearanceSide, AssoTarget};
use crate::decoder::{BoxCoder, ModelConfig, Prediction};
use crate::encoding::rng_for;
use crate::loss::group_loss;
use crate::numcore::{finite_difference, relative_error, Graph, ParamStore, Tensor, Var};
use crate::simworld::{generate_scene, GroundTruthTarget, SimConfig};
use crate::tracker::{build_clip, init_model, TrainConfig};
use crate::Result;

pub const OP_TOLERANCE: f64 = 1e-5;
pub const CLIP_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Gradients below this norm on both sides count as agreeing zeros.
pub const ZERO_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    /// `suite/case/parameter`.
    pub name: String,
    pub rel_error: f64,
    pub tolerance: f64,
    /// L2 norm of the analytic gradient.
    pub norm: f64,
    pub numeric_norm: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error < self.tolerance || (self.norm < ZERO_FLOOR && self.numeric_norm < ZERO_FLOOR)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Distorts the analytic gradient of the named check before comparing;
    /// lets callers confirm that a broken gradient is caught.
    pub corrupt: Option<String>,
}

fn compare(name: String, mut analytic: Vec<f64>, numeric: &[f64], tolerance: f64, opts: &GradCheckOptions) -> CheckResult {
    if opts.corrupt.as_deref() == Some(name.as_str()) {
        for v in &mut analytic {
            *v = *v * 1.5 + 1e-3;
        }
    }
    CheckResult {
        rel_error: relative_error(&analytic, numeric),
        norm: analytic.iter().map(|v| v * v).sum::<f64>().sqrt(),
        numeric_norm: numeric.iter().map(|v| v * v).sum::<f64>().sqrt(),
        name,
        tolerance,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

pub type OpBuilder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Every differentiable op with its input shapes.
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpBuilder)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, v| g.mul(v[0], v[1])),
        ("add_row", vec![vec![3, 4], vec![4]], |g, v| g.add_row(v[0], v[1])),
        ("mul_row", vec![vec![3, 4], vec![4]], |g, v| g.mul_row(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |g, v| g.scale(v[0], -1.7)),
        ("add_scalar", vec![vec![3, 4]], |g, v| g.add_scalar(v[0], 0.3)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("matmul_t", vec![vec![3, 4], vec![5, 4]], |g, v| g.matmul_t(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0])),
        ("relu", vec![vec![3, 4]], |g, v| g.relu(v[0])),
        ("sigmoid", vec![vec![3, 4]], |g, v| g.sigmoid(v[0])),
        ("exp", vec![vec![3, 4]], |g, v| g.exp(v[0])),
        ("sin", vec![vec![3, 4]], |g, v| g.sin(v[0])),
        ("log", vec![vec![3, 4]], |g, v| {
            let e = g.exp(v[0])?;
            g.log(e)
        }),
        ("abs", vec![vec![3, 4]], |g, v| g.abs(v[0])),
        ("softmax0", vec![vec![3, 4]], |g, v| g.softmax(v[0], 0)),
        ("softmax1", vec![vec![3, 4]], |g, v| g.softmax(v[0], 1)),
        ("log_softmax", vec![vec![3, 4]], |g, v| g.log_softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("concat0", vec![vec![2, 4], vec![3, 4]], |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![3, 2], vec![3, 4]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 4]], |g, v| g.slice(v[0], 1, 1, 2)),
        ("gather_rows", vec![vec![3, 4]], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
        ("gather_elems", vec![vec![3, 4]], |g, v| g.gather_elems(v[0], &[5, 5, 11, 0])),
        ("reshape", vec![vec![3, 4]], |g, v| g.reshape(v[0], vec![4, 3])),
        ("sum", vec![vec![3, 4]], |g, v| g.sum(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("sum_axis", vec![vec![3, 4]], |g, v| g.sum_axis(v[0], 0)),
        ("focal", vec![vec![3, 4]], |g, v| {
            let t = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            g.focal(v[0], t, 0.25, 2.0)
        }),
    ]
}

/// Each op reduced to a scalar through a random weighting, so no gradient
/// is trivially uniform.
pub fn op_suite(seeds: u64, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for (op, shapes, build) in op_cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut store = ParamStore::new();
            let names: Vec<String> = (0..shapes.len()).map(|i| format!("in{i}")).collect();
            for (n, s) in names.iter().zip(&shapes) {
                store.insert(n.clone(), rand_tensor(&mut rng, s))?;
            }
            let mut probe = Graph::new();
            let vars: Vec<Var> = names.iter().map(|n| probe.param(&store, n)).collect::<Result<_>>()?;
            let y = build(&mut probe, &vars)?;
            let weights = rand_tensor(&mut rng, probe.shape(y));
            for n in &names {
                let (a, num) = finite_difference(&mut store, n, STEP, |g, s| {
                    let vars: Vec<Var> = names.iter().map(|n| g.param(s, n)).collect::<Result<_>>()?;
                    let y = build(g, &vars)?;
                    let w = g.constant(weights.clone());
                    let prod = g.mul(y, w)?;
                    g.sum(prod)
                })?;
                out.push(compare(format!("ops/{op}/{n}/seed{seed}"), a, &num, OP_TOLERANCE, opts));
            }
        }
    }
    Ok(out)
}

/// Affinity and association loss with the appearance FFN on either side.
pub fn association_suite(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    const C: usize = 6;
    let target = AssoTarget {
        columns: vec![Some(1), Some(0), None, Some(2)],
    };
    let mut out = Vec::new();
    for side in [AppearanceSide::Object, AppearanceSide::Track] {
        let mut store = ParamStore::new();
        association::init_params(&mut store, C, &mut rng_for(6, "asso"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        store.insert("in.objects", rand_tensor(&mut rng, &[4, C]))?;
        store.insert("in.tracks", rand_tensor(&mut rng, &[3, C]))?;
        let names: Vec<String> = store.canonical().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let (a, n) = finite_difference(&mut store, &name, STEP, |g, st| {
                let o = g.param(st, "in.objects")?;
                let t = g.param(st, "in.tracks")?;
                let af = affinity(g, st, o, t, side)?;
                asso_loss(g, &af, &target)
            })?;
            out.push(compare(format!("association/{side:?}/{name}"), a, &n, OP_TOLERANCE, opts));
        }
    }
    Ok(out)
}

/// Focal plus box L1 of one query group, with and without background rows.
pub fn loss_suite(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let sim = SimConfig::default();
    let coder = BoxCoder::from_sim(&sim);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    store.insert("in.logits", rand_tensor(&mut rng, &[5, 3]))?;
    store.insert("in.code", rand_tensor(&mut rng, &[5, 10]))?;
    let gts: Vec<GroundTruthTarget> = (0..3)
        .map(|i| GroundTruthTarget {
            id: i,
            class_id: i as usize % 3,
            center: [rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(0.0..2.0)],
            size: [rng.random_range(1.0..5.0), rng.random_range(1.0..3.0), rng.random_range(1.0..2.0)],
            yaw: rng.random_range(-3.0..3.0),
            velocity: [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
        })
        .collect();
    let assign = AssignmentResult {
        pairs: vec![(0, 0), (1, 2), (2, 3)],
        ..AssignmentResult::default()
    };
    let mut out = Vec::new();
    for negatives in [true, false] {
        for name in ["in.logits", "in.code"] {
            let (a, n) = finite_difference(&mut store, name, STEP, |g, st| {
                let pred = Prediction {
                    logits: g.param(st, "in.logits")?,
                    box_code: g.param(st, "in.code")?,
                };
                group_loss(g, &pred, 1..5, &assign, &gts, negatives, &coder)
            })?;
            out.push(compare(format!("loss/negatives={negatives}/{name}"), a, &n, OP_TOLERANCE, opts));
        }
    }
    Ok(out)
}

/// Two tokens, two object queries, two frames with one persisting target.
pub fn micro_configs() -> (ModelConfig, SimConfig) {
    let m = ModelConfig {
        channels: 6,
        layers: 2,
        heads: 1,
        ffn_hidden: 4,
        num_object_queries: 2,
        num_classes: 2,
    };
    let s = SimConfig {
        grid: [2, 1],
        channels: 6,
        num_classes: 2,
        num_frames: 2,
        initial_targets: [1, 1],
        max_targets: 1,
        birth_rate: 0.0,
        death_rate: 0.0,
        ..SimConfig::default()
    };
    (m, s)
}

/// Initial micro model; zero-initialised biases are nudged off zero so no
/// relu sits exactly on its hinge.
pub fn micro_store(m: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_model(&mut store, m, &mut rng_for(seed, "init"))?;
    for p in ["asso.ffn.b2", "asso.mlp.b1"] {
        for (k, v) in store.get_mut(p)?.data_mut().iter_mut().enumerate() {
            *v = 0.01 * (k as f64 + 1.0);
        }
    }
    Ok(store)
}

/// Every parameter of the full two-frame clip loss on a micro scene.
pub fn clip_suite(m: &ModelConfig, s: &SimConfig, cfg: &TrainConfig, seed: u64, opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let coder = BoxCoder::from_sim(s);
    let scene = generate_scene(s, seed)?;
    let mut store = micro_store(m, seed)?;
    let names: Vec<String> = store.canonical().map(|(n, _)| n.to_string()).collect();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let (a, n) = finite_difference(&mut store, &name, STEP, |g, st| {
            let c = build_clip(st, m, &coder, cfg, &scene.frames, &scene.tokens)?;
            *g = c.graph;
            Ok(c.total)
        })?;
        out.push(compare(format!("clip/{name}"), a, &n, CLIP_TOLERANCE, opts));
    }
    Ok(out)
}

/// All suites in order: ops, association, loss, clip.
pub fn run_all(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let (m, s) = micro_configs();
    let mut out = op_suite(3, opts)?;
    out.extend(association_suite(opts)?);
    out.extend(loss_suite(opts)?);
    out.extend(clip_suite(&m, &s, &TrainConfig::default(), 5, opts)?);
    Ok(out)
}
