use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use lazykv::bench::{run_bench, BenchConfig};
use lazykv::engine::{EngineParams, Session};
use lazykv::kvcache::MemoryStats;
use lazykv::lazydetect::{select_layers, DetectParams};
use lazykv::model::{random_init, ModelConfig};
use lazykv::modelfile::{self, LoadedModel};
use lazykv::offline::{load_corpus, preselect, FrequencyTable};
use lazykv::policy::{make_policy, PolicyFile, Provenance, Strategy};
use lazykv::theory::{verify_theory, TrialLimits};

use crate::{
    AnalyzeArgs, BenchArgs, Command, Flavor, GenModelArgs, MakePolicyArgs, PreselectArgs, RunArgs,
    StrategyKind, VerifyArgs, WindowArgs,
};

pub enum Outcome {
    Success,
    VerificationFailed,
}

/// Caps rayon's pool at `LAZYKV_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("LAZYKV_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("LAZYKV_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        bail!("LAZYKV_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

pub fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::GenModel(a) => gen_model(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::VerifyTheory(a) => verify(a),
        Command::Analyze(a) => analyze(a),
        Command::Preselect(a) => preselect_cmd(a),
        Command::MakePolicy(a) => make_policy_cmd(a),
    }
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = std::io::stdout().lock();
            if let Err(e) = writeln!(out, "{text}") {
                // A closed pipe (e.g. `| head`) is not a failure of the command.
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<LoadedModel> {
    modelfile::load(path).with_context(|| format!("loading model {}", path.display()))
}

/// A JSON array file, or an inline comma-separated list.
fn read_tokens(arg: &str) -> Result<Vec<u32>> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        return serde_json::from_str(&text).with_context(|| format!("{arg} is not a JSON array of token ids"));
    }
    arg.split(',')
        .map(|t| t.trim().parse::<u32>().with_context(|| format!("bad token id {t:?}")))
        .collect()
}

fn detect_params(w: &WindowArgs, layers: usize) -> Result<DetectParams> {
    let d = DetectParams {
        w_last: w.w_last,
        w_sink: w.w_sink,
        w_recent: w.w_recent,
        keep_full: w.p_layers.unwrap_or_else(|| layers.div_ceil(2)),
    };
    d.validate(layers)?;
    Ok(d)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[derive(Serialize)]
struct GenModelReport {
    path: String,
    fingerprint: String,
    config: ModelConfig,
    seed: u64,
    scale: f64,
}

fn gen_model(a: GenModelArgs) -> Result<Outcome> {
    let (l, h, d, dk, v) = (a.layers, a.heads, a.dim, a.dk, a.vocab);
    let config = match a.flavor {
        Flavor::Practical => ModelConfig::practical(l, h, d, dk, v),
        Flavor::Theory => ModelConfig::theory(l, h, d, dk, v),
    };
    if !(a.scale.is_finite() && a.scale >= 0.0) {
        bail!("--scale must be finite and non-negative");
    }
    let weights = random_init(&config, a.seed, a.scale)?;
    let fingerprint = modelfile::save(&a.out, &weights, a.seed, a.scale)
        .with_context(|| format!("writing {}", a.out.display()))?;
    emit(
        &GenModelReport {
            path: a.out.display().to_string(),
            fingerprint,
            config,
            seed: a.seed,
            scale: a.scale,
        },
        None,
    )?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct RunReport {
    fingerprint: String,
    mode: &'static str,
    prompt_len: usize,
    params: DetectParams,
    lazy_layers: Vec<usize>,
    /// Absent in static mode.
    per_layer_ratios: Option<Vec<f64>>,
    pop_order: Option<Vec<usize>>,
    peak_rows: usize,
    memory: MemoryStats,
    full_cache_peak: usize,
    prefill_ms: f64,
    identification_ms: f64,
    decode_ms_per_step: Vec<f64>,
    tokens: Vec<u32>,
}

fn run(a: RunArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let layers = model.weights.config.layers;
    let detect = detect_params(&a.windows, layers)?;
    let prompt = read_tokens(&a.tokens)?;
    let (params, mode) = match &a.policy {
        Some(p) => {
            let policy = PolicyFile::load(p).with_context(|| format!("loading policy {}", p.display()))?;
            policy.check_fingerprint(&model.fingerprint)?;
            let detect = DetectParams {
                w_sink: policy.w_sink,
                w_recent: policy.w_recent,
                ..detect
            };
            (EngineParams::fixed(detect, policy), "static")
        }
        None => (EngineParams::online(detect), "online"),
    };
    let mut session = Session::new(&model.weights, params)?;
    let generation = session.generate_greedy(&prompt, a.max_new)?;
    let report = generation.prefill.report.as_ref();
    let memory = session.memory();
    let out = RunReport {
        fingerprint: model.fingerprint.clone(),
        mode,
        prompt_len: prompt.len(),
        params: detect,
        lazy_layers: session.lazy_layers(),
        per_layer_ratios: report.map(|r| r.ratios.clone()),
        pop_order: report.map(|r| r.pop_order.clone()),
        peak_rows: memory.peak_total_rows,
        memory,
        full_cache_peak: session.full_cache_peak(),
        prefill_ms: ms(generation.prefill.timing.total),
        identification_ms: ms(generation.prefill.timing.identification),
        decode_ms_per_step: session.decode_times().iter().copied().map(ms).collect(),
        tokens: generation.tokens,
    };
    if let Some(path) = &a.emit_policy {
        let provenance = if mode == "online" { Provenance::Online } else { Provenance::Manual };
        let mut policy = session.to_policy(&model.fingerprint, provenance);
        policy.w_sink = out.params.w_sink;
        policy.w_recent = out.params.w_recent;
        policy.save(path).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&out, a.report.as_deref())?;
    Ok(Outcome::Success)
}

fn bench(a: BenchArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let cfg = BenchConfig {
        lengths: a.lengths,
        detect: detect_params(&a.windows, model.weights.config.layers)?,
        warmup: a.warmup,
        steps: a.steps,
        repeats: a.repeats,
        rounds: a.rounds,
        seed: a.seed,
    };
    let report = run_bench(&model.weights, &cfg)?;
    emit(&report, a.report.as_deref())?;
    Ok(Outcome::Success)
}

fn verify(a: VerifyArgs) -> Result<Outcome> {
    if a.max_layers == 0 || a.max_heads == 0 || a.max_dim < 2 || a.max_tokens == 0 {
        bail!("verify-theory limits must allow at least 1 layer, 1 head, dim 2 and 1 token");
    }
    if !(a.max_b > 0.05 && a.max_b.is_finite()) {
        bail!("--max-b must exceed 0.05");
    }
    let limits = TrialLimits {
        max_layers: a.max_layers,
        max_heads: a.max_heads,
        max_dim: a.max_dim,
        max_tokens: a.max_tokens,
        max_b: a.max_b,
    };
    let report = verify_theory(a.trials, a.lemma_trials, &limits, a.seed)?;
    emit(&report, a.report.as_deref())?;
    if report.passed {
        Ok(Outcome::Success)
    } else {
        eprintln!("verification failed: {} violations", report.violations);
        Ok(Outcome::VerificationFailed)
    }
}

#[derive(Serialize)]
struct PrefillSweep {
    w_last: usize,
    ratios: Vec<f64>,
    lazy_layers: Vec<usize>,
}

#[derive(Serialize)]
struct DecodeStepRatios {
    position: usize,
    ratios: Vec<f64>,
    lazy_layers: Vec<usize>,
}

#[derive(Serialize)]
struct AnalyzeReport {
    fingerprint: String,
    prompt_len: usize,
    keep_full: usize,
    w_sink: usize,
    w_recent: usize,
    prefill: Vec<PrefillSweep>,
    decode: Vec<DecodeStepRatios>,
    /// `consistency[layer][step]`: layer lazy at that decode step.
    consistency: Vec<Vec<bool>>,
    /// Per layer: fraction of decode steps agreeing with the first sweep's
    /// prefill decision.
    agreement: Vec<f64>,
}

fn analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let w = &model.weights;
    let layers = w.config.layers;
    let prompt = read_tokens(&a.tokens)?;
    let keep_full = a.p_layers.unwrap_or_else(|| layers.div_ceil(2));
    if a.w_last.is_empty() {
        bail!("--w-last needs at least one value");
    }
    let base = DetectParams {
        w_last: a.w_last[0],
        w_sink: a.w_sink,
        w_recent: a.w_recent,
        keep_full,
    };
    base.validate(layers)?;

    // Identification runs with every layer kept full so that decoding sees
    // complete caches; the split is then derived from the ratios.
    let mut prefill = Vec::new();
    let mut decode_session = None;
    for &w_last in &a.w_last {
        let observe = DetectParams {
            w_last,
            keep_full: layers,
            ..base
        };
        let mut s = Session::new(w, EngineParams::online(observe))?;
        let out = s.prefill(&prompt)?;
        let ratios = out.report.expect("online").ratios;
        prefill.push(PrefillSweep {
            w_last,
            lazy_layers: select_layers(&ratios, keep_full)?.lazy,
            ratios,
        });
        decode_session.get_or_insert((s, out.logits));
    }
    let (mut session, mut logits) = decode_session.expect("one sweep");
    let mut decode = Vec::with_capacity(a.steps);
    for _ in 0..a.steps {
        let next = lazykv::engine::argmax(&logits);
        let position = session.tokens().len();
        let (l, ratios) = session.decode_step_with_ratios(next)?;
        logits = l;
        decode.push(DecodeStepRatios {
            position,
            lazy_layers: select_layers(&ratios, keep_full)?.lazy,
            ratios,
        });
    }
    let consistency: Vec<Vec<bool>> = (0..layers)
        .map(|l| decode.iter().map(|d| d.lazy_layers.contains(&l)).collect())
        .collect();
    let reference = &prefill[0].lazy_layers;
    let agreement = consistency
        .iter()
        .enumerate()
        .map(|(l, steps)| {
            if steps.is_empty() {
                return 1.0;
            }
            let lazy = reference.contains(&l);
            steps.iter().filter(|&&s| s == lazy).count() as f64 / steps.len() as f64
        })
        .collect();
    emit(
        &AnalyzeReport {
            fingerprint: model.fingerprint.clone(),
            prompt_len: prompt.len(),
            keep_full,
            w_sink: a.w_sink,
            w_recent: a.w_recent,
            prefill,
            decode,
            consistency,
            agreement,
        },
        a.report.as_deref(),
    )?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct PreselectReport {
    table: FrequencyTable,
    policy: PolicyFile,
    warnings: Vec<String>,
}

fn preselect_cmd(a: PreselectArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let detect = detect_params(&a.windows, model.weights.config.layers)?;
    let corpus = load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let sel = preselect(&model.weights, &corpus, &detect, &model.fingerprint)?;
    sel.policy.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for w in &sel.warnings {
        eprintln!("warning: {w}");
    }
    emit(
        &PreselectReport {
            table: sel.table,
            policy: sel.policy,
            warnings: sel.warnings,
        },
        a.report.as_deref(),
    )?;
    Ok(Outcome::Success)
}

fn parse_range(arg: &str) -> Result<std::ops::Range<usize>> {
    let (a, b) = arg
        .split_once("..")
        .with_context(|| format!("range must look like a..b, got {arg:?}"))?;
    let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
    if a > b {
        bail!("empty range {arg}");
    }
    Ok(a..b)
}

fn make_policy_cmd(a: MakePolicyArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let config = &model.weights.config;
    let detect = detect_params(&a.windows, config.layers)?;
    let strategy = match a.strategy {
        StrategyKind::Pyramid => Strategy::Pyramid {
            mean_recent: a.mean_recent.unwrap_or(detect.w_recent),
        },
        StrategyKind::Random => Strategy::Random {
            range: match &a.range {
                Some(r) => parse_range(r)?,
                None => 0..config.layers,
            },
        },
        StrategyKind::Manual => Strategy::Manual(a.layers),
    };
    let policy = make_policy(&strategy, config, &detect, a.seed, &model.fingerprint)?;
    policy.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    emit(&policy, None)?;
    Ok(Outcome::Success)
}
