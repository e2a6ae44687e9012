//! Named finite-difference sweeps over the differentiable surface.
//!
//! Every tape primitive gets its own fixture (small random tensors, a scalar
//! reduction, one backward pass for the analytic gradients), and one extra
//! component runs the composed gated-fusion + decoder loss end to end. The
//! suite backs the `gradcheck` command and the release gate on gradient
//! correctness: all components must stay under the caller's tolerance.
//!
//! An injected-bug mode corrupts the analytic gradients of a single
//! well-known component ([`INJECTED_BUG_COMPONENT`]) so the surrounding
//! tooling can prove the sweep actually detects wrong gradients and reports
//! the offending parameter, rather than passing vacuously.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::model::{
    ModelConfig, ModelError, SpeechModel, Vocabulary, GATE_PARAM, GATE_TEMPERATURE,
};
use crate::numerics::{
    finite_difference_check, kernels, FdReport, NumericsError, ParameterSet, Tape, Tensor, Var,
};
use crate::rng::rng_for;

type Result<T> = std::result::Result<T, NumericsError>;

/// Perturbation half-width used by the reference sweep.
pub const DEFAULT_H: f64 = 1e-5;
/// Probe budget per component used by the reference sweep.
pub const DEFAULT_PROBES: usize = 64;
/// Relative-error tolerance every component must satisfy.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Component whose analytic gradients are corrupted in injected-bug mode.
pub const INJECTED_BUG_COMPONENT: &str = "matmul";

/// Settings for one suite run.
#[derive(Debug, Clone, Copy)]
pub struct SweepSettings {
    /// Central-difference half-width.
    pub h: f64,
    /// Coordinates probed per component (capped at the component's total).
    pub probes: usize,
    /// Probe-selection seed.
    pub seed: u64,
    /// Corrupt [`INJECTED_BUG_COMPONENT`] to prove the sweep can fail.
    pub inject_bug: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            probes: DEFAULT_PROBES,
            seed: 0xfd0c,
            inject_bug: false,
        }
    }
}

/// Result of sweeping one named component.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub component: &'static str,
    pub report: FdReport,
}

/// A graph builder returns the scalar loss plus the tape leaf of every
/// trainable parameter, so the runner can harvest analytic gradients from
/// the same graph it later differentiates numerically.
type Graph = Box<dyn Fn(&mut Tape, &ParameterSet) -> Result<(Var, Vec<(String, Var)>)>>;

struct Component {
    name: &'static str,
    params: ParameterSet,
    graph: Graph,
}

/// Structural model errors cannot occur on these fixed fixtures; only the
/// numeric kind is a real runtime condition worth propagating.
fn demote(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => panic!("malformed diagnostic fixture: {other}"),
    }
}

fn fixture_rng(index: u64) -> ChaCha8Rng {
    rng_for(0xd1a6, &[index])
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::randn(vec![rows, cols], 1.0, rng)
}

fn rand_target(rng: &mut ChaCha8Rng, len: usize) -> Arc<Vec<f64>> {
    Arc::new(Tensor::randn(vec![len], 1.0, rng).values().to_vec())
}

fn params_of(entries: Vec<(&'static str, Tensor)>) -> ParameterSet {
    let mut params = ParameterSet::new();
    for (name, tensor) in entries {
        params
            .insert(name, tensor)
            .expect("unique fixture parameter names");
    }
    params
}

/// Leaf every parameter of the set, in iteration order.
fn leaf_all(tape: &mut Tape, params: &ParameterSet, names: &[&'static str]) -> Vec<(String, Var)> {
    names
        .iter()
        .map(|name| {
            let t = params.get(name).expect("fixture parameter exists");
            (name.to_string(), tape.leaf(t))
        })
        .collect()
}

/// A two-matrix component: leaf both, combine, reduce against a fixed target.
fn binary_component(
    name: &'static str,
    index: u64,
    combine: impl Fn(&mut Tape, Var, Var) -> Result<Var> + 'static,
) -> Component {
    let mut rng = fixture_rng(index);
    let params = params_of(vec![
        ("lhs", randn(&mut rng, 3, 4)),
        ("rhs", randn(&mut rng, 3, 4)),
    ]);
    let target = rand_target(&mut rng, 12);
    Component {
        name,
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["lhs", "rhs"]);
            let out = combine(tape, leaves[0].1, leaves[1].1)?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

/// A one-matrix component: leaf it, transform, reduce against a fixed target.
fn unary_component(
    name: &'static str,
    index: u64,
    rows: usize,
    cols: usize,
    out_len: usize,
    transform: impl Fn(&mut Tape, Var) -> Result<Var> + 'static,
) -> Component {
    let mut rng = fixture_rng(index);
    let params = params_of(vec![("x", randn(&mut rng, rows, cols))]);
    let target = rand_target(&mut rng, out_len);
    Component {
        name,
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["x"]);
            let out = transform(tape, leaves[0].1)?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn matmul_component() -> Component {
    let mut rng = fixture_rng(1);
    let params = params_of(vec![
        ("lhs", randn(&mut rng, 3, 4)),
        ("rhs", randn(&mut rng, 4, 5)),
    ]);
    let target = rand_target(&mut rng, 15);
    Component {
        name: "matmul",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["lhs", "rhs"]);
            let out = tape.matmul(leaves[0].1, leaves[1].1)?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn add_row_component() -> Component {
    let mut rng = fixture_rng(5);
    let params = params_of(vec![
        ("mat", randn(&mut rng, 3, 4)),
        ("row", randn(&mut rng, 1, 4)),
    ]);
    let target = rand_target(&mut rng, 12);
    Component {
        name: "add_row",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["mat", "row"]);
            let out = tape.add_row(leaves[0].1, leaves[1].1)?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

/// ReLU is kinked at zero: push every coordinate at least 0.25 away so a
/// 1e-5 perturbation can never cross the kink.
fn relu_component() -> Component {
    let mut rng = fixture_rng(7);
    let mut x = randn(&mut rng, 3, 4);
    for v in x.values_mut() {
        *v += 0.25 * v.signum();
    }
    let params = params_of(vec![("x", x)]);
    let target = rand_target(&mut rng, 12);
    Component {
        name: "relu",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["x"]);
            let out = tape.relu(leaves[0].1);
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn concat_cols_component() -> Component {
    let mut rng = fixture_rng(11);
    let params = params_of(vec![
        ("left", randn(&mut rng, 3, 2)),
        ("right", randn(&mut rng, 3, 3)),
    ]);
    let target = rand_target(&mut rng, 15);
    Component {
        name: "concat_cols",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["left", "right"]);
            let out = tape.concat_cols(&[leaves[0].1, leaves[1].1])?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn layer_norm_component() -> Component {
    let mut rng = fixture_rng(14);
    let params = params_of(vec![
        ("x", randn(&mut rng, 3, 6)),
        ("gain", randn(&mut rng, 1, 6)),
        ("bias", randn(&mut rng, 1, 6)),
    ]);
    let target = rand_target(&mut rng, 18);
    Component {
        name: "layer_norm",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["x", "gain", "bias"]);
            let out = tape.layer_norm(leaves[0].1, leaves[1].1, leaves[2].1, 1e-5)?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn cross_entropy_component() -> Component {
    let mut rng = fixture_rng(17);
    let params = params_of(vec![("logits", randn(&mut rng, 5, 7))]);
    // Row 2 targets the ignore id, exercising the masked branch.
    let targets = vec![1usize, 3, 6, 0, 2];
    Component {
        name: "cross_entropy",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["logits"]);
            let loss = tape.cross_entropy(leaves[0].1, &targets, Some(6))?;
            Ok((loss, leaves))
        }),
    }
}

fn kl_to_teacher_component() -> Component {
    let mut rng = fixture_rng(18);
    let params = params_of(vec![("logits", randn(&mut rng, 4, 6))]);
    let raw = randn(&mut rng, 4, 6);
    let mut probs = vec![0.0; 24];
    kernels::softmax_rows(raw.values(), 4, 6, 1.0, false, &mut probs);
    let teacher = Arc::new(probs);
    Component {
        name: "kl_to_teacher",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["logits"]);
            let loss = tape.kl_to_teacher(leaves[0].1, Arc::clone(&teacher), 2.0)?;
            Ok((loss, leaves))
        }),
    }
}

fn mse_to_component() -> Component {
    let mut rng = fixture_rng(19);
    let params = params_of(vec![("x", randn(&mut rng, 3, 5))]);
    let target = rand_target(&mut rng, 15);
    Component {
        name: "mse_to",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["x"]);
            let loss = tape.mse_to(leaves[0].1, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

fn lin_comb_component() -> Component {
    let mut rng = fixture_rng(20);
    let params = params_of(vec![("coeffs", Tensor::randn(vec![3], 1.0, &mut rng))]);
    let mats: Vec<Arc<Vec<f64>>> = (0..3)
        .map(|_| Arc::new(randn(&mut rng, 2, 4).values().to_vec()))
        .collect();
    let target = rand_target(&mut rng, 8);
    Component {
        name: "lin_comb",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["coeffs"]);
            let out = tape.lin_comb(leaves[0].1, mats.clone(), vec![2, 4])?;
            let loss = tape.mse_to(out, Arc::clone(&target))?;
            Ok((loss, leaves))
        }),
    }
}

/// Split a `[3, 1]` parameter into three scalar nodes (via `row`), square
/// each so the reduction under test sees distinct gradients per part.
fn squared_scalars(tape: &mut Tape, xs: Var) -> Result<Vec<Var>> {
    (0..3)
        .map(|i| {
            let r = tape.row(xs, i)?;
            tape.mul(r, r)
        })
        .collect()
}

fn mean_scalars_component() -> Component {
    let mut rng = fixture_rng(21);
    let params = params_of(vec![("xs", randn(&mut rng, 3, 1))]);
    Component {
        name: "mean_scalars",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["xs"]);
            let parts = squared_scalars(tape, leaves[0].1)?;
            let loss = tape.mean_scalars(&parts)?;
            Ok((loss, leaves))
        }),
    }
}

fn weighted_sum_component() -> Component {
    let mut rng = fixture_rng(22);
    let params = params_of(vec![("xs", randn(&mut rng, 3, 1))]);
    Component {
        name: "weighted_sum",
        params,
        graph: Box::new(move |tape, params| {
            let leaves = leaf_all(tape, params, &["xs"]);
            let parts = squared_scalars(tape, leaves[0].1)?;
            let weighted: Vec<(Var, f64)> = parts
                .iter()
                .zip([0.5, -1.5, 2.0])
                .map(|(&p, c)| (p, c))
                .collect();
            let loss = tape.weighted_sum(&weighted)?;
            Ok((loss, leaves))
        }),
    }
}

/// The full trainable surface in one graph: normalized encoder stacks fused
/// by the gate row, decoded teacher-forced, averaged over two samples.
fn gate_fusion_decoder_component() -> Component {
    let tags: Vec<String> = ["<|A|>", "<|B|>"].iter().map(|s| s.to_string()).collect();
    let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(&tags, &[], &words).expect("diagnostic vocabulary");
    let config = ModelConfig {
        gate_temperature: Some(GATE_TEMPERATURE),
        decoder_seed: 9,
        ..ModelConfig::default()
    };
    let mut model = SpeechModel::build(vocab, &config).expect("diagnostic model");
    model.register_task("A").expect("register task A");
    model.register_task("B").expect("register task B");

    let cfg = model.encoder.config();
    let stacks: Vec<_> = [(4usize, 31u64), (5, 32)]
        .iter()
        .map(|&(t, s)| {
            let mut rng = rng_for(0xd1a6, &[s]);
            let features = Tensor::randn(vec![t, cfg.input_width()], 1.0, &mut rng);
            model.stack_for(&features).expect("normalized stack")
        })
        .collect();
    let target_of = |words: &[&str]| -> Vec<usize> {
        let mut ids = vec![
            model.tag_id("A").expect("tag id"),
            model.vocab.bos_id(),
        ];
        for w in words {
            ids.push(model.vocab.id(w).expect("word id"));
        }
        ids.push(model.vocab.eos_id());
        ids
    };
    let targets = [target_of(&["w1", "w2", "w3"]), target_of(&["w4", "w5"])];

    let vocab = model.vocab.clone();
    let decoder = model.decoder.clone();
    let gate = model.gate.clone().expect("gated model");
    Component {
        name: "gate_fusion_decoder",
        params: model.params,
        graph: Box::new(move |tape, params| {
            let dec = decoder.leaf_params(tape, params).map_err(demote)?;
            let w = tape.leaf(params.get(GATE_PARAM)?);
            let mut parts = Vec::new();
            for (stack, target) in stacks.iter().zip(&targets) {
                let fused = gate.fuse_on_tape(tape, w, "A", stack).map_err(demote)?.fused;
                let (_, loss) = decoder
                    .teacher_forced_on_tape(tape, &dec, fused, target, vocab.pad_id())
                    .map_err(demote)?;
                parts.push(loss);
            }
            let loss = tape.mean_scalars(&parts)?;
            let mut leaves: Vec<(String, Var)> =
                dec.iter().map(|(name, var)| (name.to_string(), var)).collect();
            leaves.push((GATE_PARAM.to_string(), w));
            Ok((loss, leaves))
        }),
    }
}

fn components() -> Vec<Component> {
    vec![
        matmul_component(),
        binary_component("add", 2, |t, a, b| t.add(a, b)),
        binary_component("sub", 3, |t, a, b| t.sub(a, b)),
        binary_component("mul", 4, |t, a, b| t.mul(a, b)),
        add_row_component(),
        unary_component("scale", 6, 3, 4, 12, |t, x| Ok(t.scale(x, -1.7))),
        relu_component(),
        unary_component("gelu", 8, 3, 4, 12, |t, x| Ok(t.gelu(x))),
        unary_component("transpose", 9, 3, 4, 12, |t, x| t.transpose(x)),
        unary_component("slice_cols", 10, 3, 6, 9, |t, x| t.slice_cols(x, 1, 4)),
        concat_cols_component(),
        unary_component("row", 12, 4, 5, 5, |t, x| t.row(x, 2)),
        unary_component("gather_rows", 13, 4, 3, 12, |t, x| {
            t.gather_rows(x, &[2, 0, 2, 1])
        }),
        layer_norm_component(),
        unary_component("softmax_rows", 15, 4, 5, 20, |t, x| {
            t.softmax_rows(x, 0.8, false)
        }),
        unary_component("softmax_rows_causal", 16, 4, 4, 16, |t, x| {
            t.softmax_rows(x, 1.3, true)
        }),
        cross_entropy_component(),
        kl_to_teacher_component(),
        mse_to_component(),
        lin_comb_component(),
        mean_scalars_component(),
        weighted_sum_component(),
        gate_fusion_decoder_component(),
    ]
}

/// Names of every component the suite sweeps, in execution order.
pub fn component_names() -> Vec<&'static str> {
    components().into_iter().map(|c| c.name).collect()
}

/// Run the full sweep. Each component reports its own probe count and worst
/// coordinate; the caller decides the tolerance (see [`DEFAULT_TOLERANCE`]).
pub fn run_gradient_suite(settings: &SweepSettings) -> Result<Vec<ComponentReport>> {
    components()
        .into_iter()
        .map(|mut component| {
            let corrupt = settings.inject_bug && component.name == INJECTED_BUG_COMPONENT;
            let report = run_component(&mut component, settings, corrupt)?;
            Ok(ComponentReport {
                component: component.name,
                report,
            })
        })
        .collect()
}

fn run_component(
    component: &mut Component,
    settings: &SweepSettings,
    corrupt: bool,
) -> Result<FdReport> {
    // One backward pass for the analytic gradients of every leaf.
    let mut tape = Tape::new();
    let (loss, leaves) = (component.graph)(&mut tape, &component.params)?;
    tape.backward(loss)?;
    let mut analytic = BTreeMap::new();
    for (name, var) in leaves {
        let numel = component.params.get(&name)?.numel();
        let grad = tape
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; numel]);
        analytic.insert(name, grad);
    }
    if corrupt {
        // Corrupt every coordinate so any probe of this component fails.
        for grad in analytic.values_mut() {
            for g in grad.iter_mut() {
                *g = *g * 1.1 + 0.05;
            }
        }
    }

    let graph = &component.graph;
    let mut loss_fn = |params: &ParameterSet| -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = graph(&mut tape, params)?;
        Ok(tape.scalar(loss))
    };
    finite_difference_check(
        &mut component.params,
        &mut loss_fn,
        &analytic,
        settings.h,
        settings.probes,
        settings.seed,
    )
}
