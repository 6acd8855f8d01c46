//! Oracle suites: finite-difference gradients, brute-force CRF, EMA
//! closed forms and residual gate identities.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::crf::{self, oracle, token_nll_from_scores, Crf, CrfWeights};
use crate::encoders::BiLstm;
use crate::error::{Error, Result};
use crate::model::{Head, Model, ModelConfig};
use crate::moving_average::{ema_scan, ema_scan_op, MultiHeadEma};
use crate::numerics::{finite_diff_check_many, GradCheckOptions, Tape, Tensor, Unary, Var};
use crate::params::{Bound, ParamStore};
use crate::pipeline::corpus::{Sentence, Vocab};
use crate::reduced_bias::{GateState, ResidualMode};
use crate::rhema::{gated_output, laplace_attention, relative_bias, AttnFn, GateInputs, RhemaConfig, SiluVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Crf,
    Ema,
    Gate,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Crf, Suite::Ema, Suite::Gate];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Crf => "crf",
            Suite::Ema => "ema",
            Suite::Gate => "gate",
        }
    }

    /// `all` or one suite name.
    pub fn parse_list(s: &str) -> Result<Vec<Suite>> {
        match s {
            "all" => Ok(Suite::ALL.to_vec()),
            _ => Suite::ALL
                .iter()
                .find(|x| x.name() == s)
                .map(|x| vec![*x])
                .ok_or_else(|| Error::Config(format!("unknown suite {s:?} (expected all, grad, crf, ema or gate)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub suite: &'static str,
    pub name: String,
    pub metric: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub millis: f64,
    pub note: String,
    /// Inputs of the failing case, enough to rerun it.
    pub replay: Option<Value>,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Multiplies analytic gradients before comparison; 1 in normal use.
    pub grad_fault_scale: f64,
    pub crf_instances: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            grad_fault_scale: 1.0,
            crf_instances: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub cases: Vec<CaseResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:<48} {:>11} {:>9} {:>9}  result", "suite", "case", "metric", "tol", "ms")?;
        for c in &self.cases {
            writeln!(
                f,
                "{:<6} {:<48} {:>11.3e} {:>9.1e} {:>9.1}  {}{}",
                c.suite,
                c.name,
                c.metric,
                c.tolerance,
                c.millis,
                if c.passed { "PASS" } else { "FAIL" },
                if c.note.is_empty() { String::new() } else { format!("  ({})", c.note) }
            )?;
        }
        let failed = self.failures().count();
        write!(f, "{} cases, {} failed", self.cases.len(), failed)
    }
}

pub fn run(suites: &[Suite], opts: &VerifyOptions) -> VerifyReport {
    let mut cases = Vec::new();
    for s in suites {
        cases.extend(match s {
            Suite::Grad => grad_suite(opts),
            Suite::Crf => crf_suite(opts),
            Suite::Ema => ema_suite(opts),
            Suite::Gate => gate_suite(opts),
        });
    }
    VerifyReport { cases }
}

fn tensor_json(t: &Tensor) -> Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

fn finish(
    suite: Suite,
    name: impl Into<String>,
    start: Instant,
    tolerance: f64,
    outcome: Result<(f64, Option<Value>)>,
    replay: impl FnOnce() -> Value,
) -> CaseResult {
    let millis = start.elapsed().as_secs_f64() * 1e3;
    let (metric, note, extra) = match outcome {
        Ok((m, extra)) => (m, String::new(), extra),
        Err(e) => (f64::NAN, e.to_string(), None),
    };
    let passed = metric <= tolerance;
    CaseResult {
        suite: suite.name(),
        name: name.into(),
        metric,
        tolerance,
        passed,
        millis,
        note,
        replay: (!passed).then(|| extra.unwrap_or_else(replay)),
    }
}

/// Run independent closures on scoped threads, keeping input order.
fn parallel<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>) -> Vec<T> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs.into_iter().map(|j| scope.spawn(j)).collect();
        handles.into_iter().map(|h| h.join().expect("verify worker panicked")).collect()
    })
}

// ---------------------------------------------------------------- grad

type Fwd = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

struct GradCase {
    name: String,
    inputs: Vec<Tensor>,
    f: Fwd,
    tolerance: f64,
}

/// `Σ out ⊙ R` with a fixed random `R`, turning any output into a scalar.
fn readout(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let r = Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed));
    let rv = t.constant(r)?;
    let p = t.mul(out, rv)?;
    t.sum(p)
}

fn op_case(
    name: &str,
    shapes: &[&[usize]],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    GradCase {
        name: format!("op {name}"),
        inputs: shapes.iter().map(|s| Tensor::uniform(s, 1.0, rng)).collect(),
        f: Box::new(move |t, v| {
            let out = f(t, v)?;
            readout(t, out)
        }),
        tolerance: 1e-6,
    }
}

fn unary_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let ops = [
        ("sigmoid", Unary::Sigmoid),
        ("tanh", Unary::Tanh),
        ("silu (derivative form)", Unary::SiluDeriv),
        ("silu (standard)", Unary::SiluStandard),
        ("erf", Unary::Erf),
        ("softplus", Unary::Softplus),
        ("exp", Unary::Exp),
        ("ln", Unary::Ln),
    ];
    ops.into_iter()
        .map(|(name, u)| {
            op_case(name, &[&[3, 4]], rng, move |t, v| {
                let x = if u == Unary::Ln { t.offset(v[0], 2.0)? } else { v[0] };
                t.unary(x, u)
            })
        })
        .collect()
}

fn tape_op_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = vec![
        op_case("matmul", &[&[3, 4], &[4, 2]], rng, |t, v| t.matmul(v[0], v[1])),
        op_case("transpose", &[&[3, 4]], rng, |t, v| t.transpose(v[0])),
        op_case("add", &[&[3, 4], &[3, 4]], rng, |t, v| t.add(v[0], v[1])),
        op_case("sub", &[&[3, 4], &[3, 4]], rng, |t, v| t.sub(v[0], v[1])),
        op_case("mul", &[&[3, 4], &[3, 4]], rng, |t, v| t.mul(v[0], v[1])),
        op_case("add_row", &[&[3, 4], &[4]], rng, |t, v| t.add_row(v[0], v[1])),
        op_case("mul_row", &[&[3, 4], &[4]], rng, |t, v| t.mul_row(v[0], v[1])),
        op_case("scale", &[&[3, 4]], rng, |t, v| t.scale(v[0], -1.7)),
        op_case("offset", &[&[3, 4]], rng, |t, v| t.offset(v[0], 0.3)),
        op_case("one_minus", &[&[3, 4]], rng, |t, v| t.one_minus(v[0])),
        op_case("softmax (masked)", &[&[3, 4]], rng, |t, v| {
            let mask = [true, false, true, true, true, true, false, false, false, true, true, true];
            t.softmax_lastdim(v[0], Some(&mask))
        }),
        op_case("logsumexp axis 0", &[&[3, 4]], rng, |t, v| t.logsumexp(v[0], 0)),
        op_case("logsumexp axis 1", &[&[3, 4]], rng, |t, v| t.logsumexp(v[0], 1)),
        op_case("sum", &[&[3, 4]], rng, |t, v| t.sum(v[0])),
        op_case("mean", &[&[3, 4]], rng, |t, v| t.mean(v[0])),
        op_case("add_all", &[&[2, 3], &[2, 3], &[2, 3]], rng, |t, v| t.add_all(v)),
        op_case("normalize_rows", &[&[3, 4]], rng, |t, v| t.normalize_rows(v[0], 1e-5)),
        op_case("normalize_cols (masked)", &[&[4, 3]], rng, |t, v| {
            t.normalize_cols(v[0], &[true, true, true, false], 1e-5)
        }),
        op_case("concat_cols", &[&[3, 2], &[3, 4]], rng, |t, v| t.concat_cols(v[0], v[1])),
        op_case("slice_cols", &[&[3, 5]], rng, |t, v| t.slice_cols(v[0], 1, 4)),
        op_case("row and stack_rows", &[&[3, 4]], rng, |t, v| {
            let a = t.row(v[0], 2)?;
            let b = t.row(v[0], 0)?;
            t.stack_rows(&[a, b, a])
        }),
        op_case("gather_rows", &[&[5, 3]], rng, |t, v| t.gather_rows(v[0], &[1, 0, 3, 1, 4], None)),
        op_case("repeat_each", &[&[2, 3]], rng, |t, v| t.repeat_each(v[0], 2)),
    ];
    cases.extend(unary_cases(rng));
    cases
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();

    let mut alpha = op_case("ema_scan (chunk resets)", &[&[7, 3], &[3], &[3]], rng, |t, v| {
        let a = t.sigmoid(v[1])?;
        ema_scan_op(t, v[0], a, v[2], Some(3))
    });
    alpha.name = "layer ema_scan (chunk resets)".into();
    cases.push(alpha);

    let mut c = op_case("relative_bias", &[&[7]], rng, |t, v| relative_bias(t, v[0], 6, 3));
    c.name = "layer relative_bias".into();
    cases.push(c);

    for normalize in [false, true] {
        let name = if normalize { "layer reduced laplace attention" } else { "layer laplace attention" };
        let mut c = op_case(name, &[&[4, 4], &[1], &[1]], rng, move |t, v| {
            let sigma = t.softplus(v[2])?;
            let mask = [true, true, false, false, true, true, true, false, true, true, true, true, false, false, true, true];
            laplace_attention(t, v[0], Some(&mask), v[1], sigma, normalize)
        });
        c.name = name.into();
        cases.push(c);
    }

    let silu_case = |silu: SiluVariant, rng: &mut ChaCha8Rng| {
        let mut c = op_case(
            "",
            &[&[3, 4], &[3, 4], &[3, 6], &[3, 6], &[3, 4], &[4, 4], &[6, 4], &[4]],
            rng,
            move |t, v| {
                let gamma = t.sigmoid(v[3])?;
                let phi = t.sigmoid(v[4])?;
                gated_output(t, v[0], v[1], v[2], &GateInputs { gamma, phi }, v[5], v[6], v[7], silu)
            },
        );
        c.name = format!("layer gated output ({silu} silu)");
        c
    };
    cases.push(silu_case(SiluVariant::Derivative, rng));
    cases.push(silu_case(SiluVariant::Standard, rng));

    let ema = MultiHeadEma::new("ema", 4, 2).expect("valid widths");
    let mut store = ParamStore::new();
    ema.init(&mut store);
    cases.push(param_case("layer multi-head EMA", &store, vec![Tensor::uniform(&[6, 4], 1.0, rng)], move |t, p, x| {
        let y = ema.forward(t, p, x[0], Some(4))?;
        readout(t, y)
    }));

    let lstm = BiLstm::new("lstm", 3, 4);
    let mut store = ParamStore::new();
    lstm.init(&mut store, rng);
    cases.push(param_case("layer BiLSTM", &store, vec![Tensor::uniform(&[5, 3], 1.0, rng)], move |t, p, x| {
        let y = lstm.forward(t, p, x[0], 4)?;
        readout(t, y)
    }));

    let gate = GateState {
        g_f: vec![0.3, -0.2, 0.5],
        g_x: vec![-0.1, 0.4, 0.2],
        ..GateState::new("rb", ResidualMode::Dynamic, 3)
    };
    let mut store = ParamStore::new();
    gate.init(&mut store);
    for (name, t) in [("rb.w_alpha", &[3, 3][..]), ("rb.w_beta", &[3, 3]), ("rb.b_alpha", &[3]), ("rb.b_beta", &[3])] {
        store.set(name, Tensor::uniform(t, 1.0, rng)).expect("shape");
    }
    let inputs = vec![Tensor::uniform(&[4, 3], 1.0, rng), Tensor::uniform(&[4, 3], 1.0, rng)];
    cases.push(param_case("layer dynamic residual gate", &store, inputs, move |t, p, x| {
        let site = gate.combine(t, p, x[0], x[1])?;
        readout(t, site.out)
    }));

    let c = 3;
    let crf = Crf::new("crf", c);
    let mut store = ParamStore::new();
    crf.init(&mut store);
    for name in ["crf.trans", "crf.start", "crf.end"] {
        let shape = store.get(name).expect("init").shape().to_vec();
        store.set(name, Tensor::uniform(&shape, 1.0, rng)).expect("shape");
    }
    let crf2 = crf.clone();
    cases.push(param_case("layer CRF log partition", &store, vec![Tensor::uniform(&[4, c], 1.0, rng)], move |t, p, x| {
        crf.log_partition(t, p, x[0])
    }));
    cases.push(param_case("layer CRF NLL", &store, vec![Tensor::uniform(&[4, c], 1.0, rng)], move |t, p, x| {
        crf2.nll(t, p, x[0], &[0, 2, 1, 1])
    }));
    let mut tok = op_case("", &[&[4, 3]], rng, |t, v| token_nll_from_scores(t, v[0], &[2, 0, 1, 1]));
    tok.name = "layer token NLL".into();
    tok.f = Box::new(|t, v| token_nll_from_scores(t, v[0], &[2, 0, 1, 1]));
    cases.push(tok);
    cases
}

/// Case over explicit inputs followed by every parameter in `store`.
fn param_case(
    name: &str,
    store: &ParamStore,
    mut inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> GradCase {
    let k = inputs.len();
    let names: Vec<String> = store.names().map(String::from).collect();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    GradCase {
        name: name.into(),
        inputs,
        f: Box::new(move |t, v| {
            let p = Bound::from_pairs(names.iter().cloned().zip(v[k..].iter().copied()));
            f(t, &p, &v[..k])
        }),
        tolerance: 1e-6,
    }
}

/// Vocabulary with three tags (`O`, `B-X`, `I-X`) and a few tokens.
fn probe_vocab() -> Vocab {
    let s = Sentence {
        tokens: ["a", "b", "c", "d", "e"].iter().map(|t| t.to_string()).collect(),
        tags: ["B-X", "I-X", "O", "O", "B-X"].iter().map(|t| t.to_string()).collect(),
    };
    Vocab::build([&s], [&s])
}

/// The configuration used for full-model gradient checks.
pub fn probe_model_config(attn_fn: AttnFn, residual: ResidualMode) -> ModelConfig {
    ModelConfig {
        encoder: RhemaConfig {
            d_model: 8,
            z_dim: 8,
            v_dim: 16,
            n_ema_head: 2,
            chunk_size: 2,
            attn_fn,
            residual,
            static_alpha: 0.8,
            static_beta: 1.2,
            ..Default::default()
        },
        h_lstm: 5,
        head: Head::Crf,
        strict_bio: false,
    }
}

fn full_model_case(attn_fn: AttnFn, residual: ResidualMode, seed: u64) -> Result<GradCase> {
    let mut model = Model::new(probe_model_config(attn_fn, residual), probe_vocab(), seed, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xcafe);
    let caches: Vec<_> = model
        .gate_caches()
        .into_iter()
        .map(|(n, f, x)| {
            let f = f.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
            let x = x.iter().map(|_| rng.gen_range(-0.5..0.5)).collect();
            (n, f, x)
        })
        .collect();
    model.set_gate_caches(&caches)?;
    // Move dynamic gate weights off zero so their gradients are exercised.
    let gate_names: Vec<String> = model.store.names().filter(|n| n.contains(".rb_")).map(String::from).collect();
    for name in gate_names {
        let shape = model.store.get(&name).expect("listed").shape().to_vec();
        model.store.set(&name, Tensor::uniform(&shape, 0.5, &mut rng))?;
    }
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(2..model.vocab.len())).collect();
    let tags: Vec<usize> = (0..5).map(|_| rng.gen_range(0..model.n_classes())).collect();
    let store = model.store.clone();
    let mut case = param_case(
        &format!("model {attn_fn} / {residual}"),
        &store,
        Vec::new(),
        move |t, p, _| Ok(model.sentence_loss(t, p, &ids, &tags)?.0),
    );
    case.tolerance = 1e-4;
    Ok(case)
}

fn run_grad_case(case: &GradCase, opts: &VerifyOptions) -> CaseResult {
    let start = Instant::now();
    let gopts = GradCheckOptions {
        analytic_scale: opts.grad_fault_scale,
        ..Default::default()
    };
    let outcome = finite_diff_check_many(&case.f, &case.inputs, gopts).map(|r| {
        let extra = json!({
            "worst_input": r.worst.0,
            "worst_component": r.worst.1,
            "analytic": r.analytic,
            "numeric": r.numeric,
        });
        (r.max_rel_err, Some(extra))
    });
    let mut res = finish(Suite::Grad, case.name.clone(), start, case.tolerance, outcome, || json!({}));
    if let Some(Value::Object(map)) = res.replay.as_mut() {
        map.insert("case".into(), json!(case.name));
        map.insert("inputs".into(), Value::Array(case.inputs.iter().map(tensor_json).collect()));
    }
    res
}

pub fn grad_suite(opts: &VerifyOptions) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = tape_op_cases(&mut rng);
    cases.extend(layer_cases(&mut rng));
    let mut errors = Vec::new();
    for attn_fn in [AttnFn::Softmax, AttnFn::Laplace, AttnFn::ReducedLaplace] {
        for residual in [ResidualMode::Classic, ResidualMode::Static, ResidualMode::Dynamic] {
            match full_model_case(attn_fn, residual, opts.seed + 17) {
                Ok(c) => cases.push(c),
                Err(e) => errors.push(finish(
                    Suite::Grad,
                    format!("model {attn_fn} / {residual}"),
                    Instant::now(),
                    1e-4,
                    Err(e),
                    || json!({}),
                )),
            }
        }
    }
    let jobs: Vec<Box<dyn FnOnce() -> CaseResult + Send + '_>> = cases
        .iter()
        .map(|c| Box::new(move || run_grad_case(c, opts)) as Box<dyn FnOnce() -> CaseResult + Send>)
        .collect();
    let mut out = parallel(jobs);
    out.extend(errors);
    out
}

// ----------------------------------------------------------------- crf

/// Random emissions and weights; integer-valued when `ties` so equal path
/// scores actually occur.
fn crf_instance(rng: &mut ChaCha8Rng, ties: bool) -> (Tensor, CrfWeights) {
    let n = rng.gen_range(1..=6);
    let c = rng.gen_range(1..=4);
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| if ties { rng.gen_range(-2i32..=2) as f64 } else { rng.gen_range(-3.0..3.0) })
            .collect()
    };
    let e = Tensor::matrix(n, c, draw(n * c)).expect("sized");
    let w = CrfWeights {
        trans: Tensor::matrix(c, c, draw(c * c)).expect("sized"),
        start: draw(c),
        end: draw(c),
    };
    (e, w)
}

fn crf_json(e: &Tensor, w: &CrfWeights) -> Value {
    json!({
        "emissions": tensor_json(e),
        "trans": tensor_json(&w.trans),
        "start": w.start,
        "end": w.end,
    })
}

pub fn crf_suite(opts: &VerifyOptions) -> Vec<CaseResult> {
    let suite_start = Instant::now();
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let instances: Vec<(Tensor, CrfWeights)> = (0..opts.crf_instances)
        .map(|i| crf_instance(&mut rng, i % 4 == 3))
        .collect();

    let start = Instant::now();
    let mut worst = (0.0f64, None);
    let outcome = instances.iter().try_for_each(|(e, w)| {
        let d = (crf::log_partition(e, w)? - oracle::log_partition(e, w)?).abs();
        if !(d <= worst.0) {
            worst = (d, Some(crf_json(e, w)));
        }
        Ok(())
    });
    out.push(finish(
        Suite::Crf,
        format!("log partition vs enumeration ({} instances)", instances.len()),
        start,
        1e-8,
        outcome.map(|_| (worst.0, worst.1.clone())),
        || json!({}),
    ));

    let start = Instant::now();
    let mut first_bad = None;
    let outcome = instances.iter().try_fold(0usize, |bad, (e, w)| {
        let (path, score) = crf::viterbi(e, w)?;
        let (best, best_score) = oracle::best_path(e, w)?;
        let ok = path == best && (score - best_score).abs() <= 1e-9;
        if !ok && first_bad.is_none() {
            first_bad = Some(json!({ "instance": crf_json(e, w), "viterbi": path, "exhaustive": best }));
        }
        Ok(bad + usize::from(!ok))
    });
    out.push(finish(
        Suite::Crf,
        format!("viterbi vs exhaustive argmax ({} instances)", instances.len()),
        start,
        0.0,
        outcome.map(|bad| (bad as f64, first_bad.clone())),
        || json!({}),
    ));

    let start = Instant::now();
    let mut worst = (0.0f64, None);
    let outcome = instances.iter().try_for_each(|(e, w)| {
        let d = (oracle::total_probability(e, w)? - 1.0).abs();
        if !(d <= worst.0) {
            worst = (d, Some(crf_json(e, w)));
        }
        Ok(())
    });
    out.push(finish(
        Suite::Crf,
        "path probabilities sum to one",
        start,
        1e-9,
        outcome.map(|_| (worst.0, worst.1.clone())),
        || json!({}),
    ));

    out.push(nll_shift_case(&instances));
    out.push(emission_grad_case(&instances));

    let secs = suite_start.elapsed().as_secs_f64();
    out.push(CaseResult {
        suite: Suite::Crf.name(),
        name: "suite runtime (seconds)".into(),
        metric: secs,
        tolerance: 5.0,
        passed: secs < 5.0,
        millis: secs * 1e3,
        note: String::new(),
        replay: None,
    });
    out
}

fn crf_nll(e: &Tensor, w: &CrfWeights, tags: &[usize]) -> Result<(f64, Tensor)> {
    let c = w.n_classes();
    let crf = Crf::new("crf", c);
    let mut tape = Tape::new();
    let ev = tape.param(e.clone())?;
    let t = tape.constant(w.trans.clone())?;
    let s = tape.constant(Tensor::vector(w.start.clone()))?;
    let en = tape.constant(Tensor::vector(w.end.clone()))?;
    let p = Bound::from_pairs([("crf.trans", t), ("crf.start", s), ("crf.end", en)]);
    let loss = crf.nll(&mut tape, &p, ev, tags)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), tape.grad_tensor(ev)))
}

fn gold_for(e: &Tensor, w: &CrfWeights) -> Vec<usize> {
    (0..e.rows()).map(|i| (i * 7 + 3) % w.n_classes()).collect()
}

fn nll_shift_case(instances: &[(Tensor, CrfWeights)]) -> CaseResult {
    let start = Instant::now();
    let mut worst = (0.0f64, None);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let outcome = instances.iter().try_for_each(|(e, w)| {
        let tags = gold_for(e, w);
        let (base, _) = crf_nll(e, w, &tags)?;
        let mut shifted = e.clone();
        let c = e.cols();
        for i in 0..e.rows() {
            let k = rng.gen_range(-50.0..50.0);
            for v in &mut shifted.data_mut()[i * c..(i + 1) * c] {
                *v += k;
            }
        }
        let (moved, _) = crf_nll(&shifted, w, &tags)?;
        let d = (moved - base).abs();
        if !(d <= worst.0) {
            worst = (d, Some(json!({ "instance": crf_json(e, w), "shifted": tensor_json(&shifted), "tags": tags })));
        }
        Ok(())
    });
    finish(
        Suite::Crf,
        "NLL invariant to per-position emission shifts",
        start,
        1e-9,
        outcome.map(|_| (worst.0, worst.1.clone())),
        || json!({}),
    )
}

fn emission_grad_case(instances: &[(Tensor, CrfWeights)]) -> CaseResult {
    let start = Instant::now();
    let mut worst = (0.0f64, None);
    let outcome = instances.iter().try_for_each(|(e, w)| {
        let tags = gold_for(e, w);
        let (_, g) = crf_nll(e, w, &tags)?;
        for i in 0..g.rows() {
            let d = g.row(i).iter().sum::<f64>().abs();
            if !(d <= worst.0) {
                worst = (d, Some(json!({ "instance": crf_json(e, w), "tags": tags, "row": i })));
            }
        }
        Ok(())
    });
    finish(
        Suite::Crf,
        "NLL emission-gradient rows sum to zero",
        start,
        1e-9,
        outcome.map(|_| (worst.0, worst.1.clone())),
        || json!({}),
    )
}

// ----------------------------------------------------------------- ema

pub fn ema_suite(opts: &VerifyOptions) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut out = Vec::new();

    let start = Instant::now();
    let mut worst = (0.0f64, None);
    let outcome = (1..=64usize).try_for_each(|t_len| {
        let x = Tensor::uniform(&[t_len, 3], 5.0, &mut rng);
        let alpha: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..=1.0)).collect();
        let h0: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let h = ema_scan(&x, &alpha, &h0)?;
        for t in 0..t_len {
            for j in 0..3 {
                let a = alpha[j];
                let mut closed = (1.0 - a).powi(t as i32 + 1) * h0[j];
                for k in 0..=t {
                    closed += a * (1.0 - a).powi((t - k) as i32) * x.at(k, j);
                }
                let d = (closed - h.at(t, j)).abs();
                if !(d <= worst.0) {
                    worst = (d, Some(json!({ "x": tensor_json(&x), "alpha": alpha, "h0": h0, "t": t, "col": j })));
                }
            }
        }
        Ok(())
    });
    out.push(finish(
        Suite::Ema,
        "scan equals closed-form weighted sum (t <= 64)",
        start,
        1e-12,
        outcome.map(|_| (worst.0, worst.1.clone())),
        || json!({}),
    ));

    let start = Instant::now();
    let x = Tensor::uniform(&[20, 4], 3.0, &mut rng);
    let outcome = ema_scan(&x, &[1.0; 4], &[7.0; 4]).map(|h| {
        let same = h.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        (if same { 0.0 } else { h.max_abs_diff(&x).max(f64::MIN_POSITIVE) }, None)
    });
    out.push(finish(Suite::Ema, "alpha = 1 is the identity (bitwise)", start, 0.0, outcome, || {
        json!({ "x": tensor_json(&x) })
    }));

    let start = Instant::now();
    let x = Tensor::uniform(&[17, 6], 2.0, &mut rng);
    let outcome = (|| {
        let layer = MultiHeadEma::new("ema", 6, 1)?;
        let mut store = ParamStore::new();
        layer.init(&mut store);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape)?;
        let xv = tape.constant(x.clone())?;
        let y = layer.forward(&mut tape, &p, xv, None)?;
        let a = layer.decays(&store)[0];
        let oracle = ema_scan(&x, &[a; 6], &[0.0; 6])?;
        Ok((tape.value(y).max_abs_diff(&oracle), None))
    })();
    out.push(finish(
        Suite::Ema,
        "single-head identity projection equals scan",
        start,
        1e-12,
        outcome,
        || json!({ "x": tensor_json(&x) }),
    ));
    out
}

// ---------------------------------------------------------------- gate

fn bitwise_gap(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()) {
        0.0
    } else if a.shape() == b.shape() {
        a.max_abs_diff(b).max(f64::MIN_POSITIVE)
    } else {
        f64::INFINITY
    }
}

fn forced_output(phi: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mut c = |shape: &[usize]| tape_const(shape, rng);
    let parts: Vec<Tensor> = [&[4, 8][..], &[4, 8], &[4, 16], &[8, 8], &[16, 8], &[8]]
        .iter()
        .map(|s| c(s))
        .collect();
    let v: Vec<Var> = parts.iter().map(|t| tape.constant(t.clone())).collect::<Result<_>>()?;
    let gates = GateInputs {
        gamma: tape.constant(Tensor::full(&[4, 16], 0.6))?,
        phi: tape.constant(Tensor::full(&[4, 8], phi))?,
    };
    let y = gated_output(&mut tape, v[0], v[1], v[2], &gates, v[3], v[4], v[5], SiluVariant::Derivative)?;
    // Ŷ from the same ops with the gate removed
    let g = tape.mul(gates.gamma, v[2])?;
    let a = tape.matmul(v[1], v[3])?;
    let b = tape.matmul(g, v[4])?;
    let pre = tape.add(a, b)?;
    let pre = tape.add_row(pre, v[5])?;
    let y_hat = tape.silu_deriv(pre)?;
    Ok((tape.value(y).clone(), tape.value(y_hat).clone(), parts[0].clone()))
}

fn tape_const(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn residual(state: &GateState, store: &ParamStore, x: &Tensor, f: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape)?;
    let xv = tape.constant(x.clone())?;
    let fv = tape.constant(f.clone())?;
    let site = state.combine(&mut tape, &p, xv, fv)?;
    Ok(tape.value(site.out).clone())
}

pub fn gate_suite(opts: &VerifyOptions) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(3));
    let mut out = Vec::new();

    for (phi, which) in [(1.0, "output gate forced to 1 yields the candidate"), (0.0, "output gate forced to 0 yields the input")] {
        let start = Instant::now();
        let outcome = forced_output(phi, &mut rng).map(|(y, y_hat, x)| {
            let target = if phi == 1.0 { y_hat } else { x };
            (bitwise_gap(&y, &target), None)
        });
        out.push(finish(Suite::Gate, which, start, 0.0, outcome, || json!({ "phi": phi })));
    }

    let x = Tensor::uniform(&[5, 6], 2.0, &mut rng);
    let f = Tensor::uniform(&[5, 6], 2.0, &mut rng);
    let replay = || json!({ "x": tensor_json(&x), "branch": tensor_json(&f) });

    let start = Instant::now();
    let classic = GateState::new("rb", ResidualMode::Classic, 6);
    let outcome = residual(&classic, &ParamStore::new(), &x, &f).map(|y| {
        let sum = Tensor::new(x.shape().to_vec(), x.data().iter().zip(f.data()).map(|(a, b)| b + a).collect())
            .expect("same shape");
        (bitwise_gap(&y, &sum), None)
    });
    out.push(finish(Suite::Gate, "classic residual is branch + input", start, 0.0, outcome, replay));

    let start = Instant::now();
    let stat = GateState::new("rb", ResidualMode::Static, 6).with_static(1.0, 1.0);
    let outcome = (|| {
        let a = residual(&classic, &ParamStore::new(), &x, &f)?;
        let b = residual(&stat, &ParamStore::new(), &x, &f)?;
        Ok((bitwise_gap(&a, &b), None))
    })();
    out.push(finish(Suite::Gate, "static residual with unit weights equals classic", start, 0.0, outcome, replay));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let report = run(&Suite::ALL, &VerifyOptions::default());
        assert!(report.all_passed(), "{report}");
        assert!(report.cases.iter().any(|c| c.name.starts_with("model reduced_laplace / dynamic")));
        assert_eq!(report.cases.iter().filter(|c| c.name.starts_with("model ")).count(), 9);
    }

    #[test]
    fn injected_gradient_fault_is_caught() {
        let opts = VerifyOptions {
            grad_fault_scale: 0.9,
            ..Default::default()
        };
        let report = run(&[Suite::Grad], &opts);
        assert!(!report.all_passed());
        let bad = report.failures().next().unwrap();
        let replay = bad.replay.as_ref().unwrap();
        assert!(replay.get("inputs").is_some() && replay.get("case").is_some());
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!(Suite::parse_list("all").unwrap().len(), 4);
        assert_eq!(Suite::parse_list("crf").unwrap(), [Suite::Crf]);
        assert!(Suite::parse_list("nope").is_err());
    }
}
