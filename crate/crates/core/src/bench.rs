//! Desk-scale throughput and overhead measurements.
//!
//! For each prompt length, one prefill with identification disabled gives
//! the all-Full baseline, and one online prefill gives the hybrid; a fully
//! streaming variant is derived from the baseline by converting every
//! layer. Decode latency is the median per-step time after warm-up steps,
//! collected in interleaved rounds and summarised by the median over rounds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::{EngineParams, Session};
use crate::error::{input, Result};
use crate::lazydetect::DetectParams;
use crate::model::Weights;
use crate::policy::{PolicyFile, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub detect: DetectParams,
    /// Untimed decode steps before measuring.
    pub warmup: usize,
    /// Timed decode steps per round.
    pub steps: usize,
    /// Prefills per length (identification overhead samples).
    pub repeats: usize,
    /// Interleaved decode timing rounds.
    pub rounds: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self, layers: usize) -> Result<()> {
        self.detect.validate(layers)?;
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return input("bench lengths must be nonempty and positive");
        }
        if self.steps == 0 || self.repeats == 0 || self.rounds == 0 {
            return input("bench needs at least one step, repeat and round");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeVariant {
    pub lazy_layers: Vec<usize>,
    /// Cached rows summed over layers right after prefill.
    pub cached_rows: usize,
    /// Largest total cached rows observed at any point.
    pub peak_rows: usize,
    /// Median per-step latency of each timing round.
    pub repeat_ms: Vec<f64>,
    pub median_ms: f64,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Per repeat: identification time / (prefill time - identification time).
    pub instrumented: Vec<f64>,
    pub instrumented_median: f64,
    /// Per repeat: online prefill time / baseline prefill time.
    pub wallclock_ratio: Vec<f64>,
    pub wallclock_ratio_median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthResult {
    pub tokens: usize,
    pub full: DecodeVariant,
    pub hybrid: DecodeVariant,
    pub streaming: DecodeVariant,
    /// Hybrid tokens/sec over baseline tokens/sec.
    pub throughput_ratio: f64,
    pub row_ratio: f64,
    pub analytic_row_ratio: f64,
    pub overhead: Overhead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub results: Vec<LengthResult>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Total rows a hybrid with `keep_full` full layers caches for an `n`-token
/// prompt, over the all-Full count.
pub fn analytic_row_ratio(layers: usize, keep_full: usize, n: usize, sink: usize, recent: usize) -> f64 {
    let window = n.min(sink + recent);
    (keep_full * n + (layers - keep_full) * window) as f64 / (layers * n) as f64
}

fn cached_rows(s: &Session<'_>) -> usize {
    s.caches().iter().map(|c| c.len()).sum()
}

fn time_decode(base: &Session<'_>, cfg: &BenchConfig, feed: &[u32]) -> Result<f64> {
    let mut s = base.clone();
    let mut times = Vec::with_capacity(cfg.steps);
    for (i, &t) in feed.iter().enumerate() {
        let t0 = Instant::now();
        s.decode_step(t)?;
        if i >= cfg.warmup {
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(median(&times))
}

fn variant(session: &Session<'_>, repeat_ms: Vec<f64>) -> DecodeVariant {
    let median_ms = median(&repeat_ms);
    DecodeVariant {
        lazy_layers: session.lazy_layers(),
        cached_rows: cached_rows(session),
        peak_rows: session.memory().peak_total_rows,
        tokens_per_sec: 1e3 / median_ms,
        repeat_ms,
        median_ms,
    }
}

/// Random prompt of `n` tokens for the benchmark at `seed`.
pub fn random_prompt(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// Prefilled sessions for one prompt length, ready for decode timing.
struct Prepared<'w> {
    tokens: usize,
    /// Full, hybrid, streaming.
    sessions: [Session<'w>; 3],
    feed: Vec<u32>,
    overhead: Overhead,
}

fn prepare_length<'w>(weights: &'w Weights, cfg: &BenchConfig, n: usize) -> Result<Prepared<'w>> {
    let c = &weights.config;
    let d = cfg.detect;
    let prompt = random_prompt(n, c.vocab, cfg.seed ^ n as u64);
    let feed = random_prompt(cfg.warmup + cfg.steps, c.vocab, cfg.seed.wrapping_add(1) ^ n as u64);
    let no_lazy = PolicyFile::new("", Vec::new(), d.w_sink, d.w_recent, Provenance::Manual);

    let mut full = None;
    let mut hybrid = None;
    let mut instrumented = Vec::new();
    let mut wallclock_ratio = Vec::new();
    for _ in 0..cfg.repeats {
        let mut base = Session::new(weights, EngineParams::fixed(d, no_lazy.clone()))?;
        let t0 = Instant::now();
        base.prefill(&prompt)?;
        let base_time = t0.elapsed().as_secs_f64();

        let mut online = Session::new(weights, EngineParams::online(d))?;
        let t0 = Instant::now();
        let out = online.prefill(&prompt)?;
        let online_time = t0.elapsed().as_secs_f64();

        instrumented.push(out.timing.relative_overhead());
        wallclock_ratio.push(if base_time > 0.0 { online_time / base_time } else { 1.0 });
        full.get_or_insert(base);
        hybrid.get_or_insert(online);
    }
    let full = full.expect("repeats >= 1");
    let hybrid = hybrid.expect("repeats >= 1");
    let mut streaming = full.clone();
    let all: Vec<usize> = (0..c.layers).collect();
    streaming.convert_layers(&all, d.w_sink, d.w_recent)?;
    Ok(Prepared {
        tokens: n,
        sessions: [full, hybrid, streaming],
        feed,
        overhead: Overhead {
            instrumented_median: median(&instrumented),
            instrumented,
            wallclock_ratio_median: median(&wallclock_ratio),
            wallclock_ratio,
        },
    })
}

/// Prefills every length first, then times decoding in rounds that visit
/// every length and variant once, so slow drift in the host spreads evenly
/// across the points instead of masquerading as a trend in `N`.
pub fn run_bench(weights: &Weights, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate(weights.config.layers)?;
    let c = &weights.config;
    let d = cfg.detect;
    let prepared = cfg
        .lengths
        .iter()
        .map(|&n| {
            log::info!("bench: prefilling {n} tokens");
            prepare_length(weights, cfg, n)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut times = vec![[Vec::new(), Vec::new(), Vec::new()]; prepared.len()];
    for _ in 0..cfg.rounds {
        for (p, t) in prepared.iter().zip(times.iter_mut()) {
            for (s, out) in p.sessions.iter().zip(t.iter_mut()) {
                out.push(time_decode(s, cfg, &p.feed)?);
            }
        }
    }

    let results = prepared
        .into_iter()
        .zip(times)
        .map(|(p, [tf, th, ts])| {
            let [full, hybrid, streaming] = &p.sessions;
            let (full, hybrid, streaming) = (variant(full, tf), variant(hybrid, th), variant(streaming, ts));
            LengthResult {
                tokens: p.tokens,
                throughput_ratio: hybrid.tokens_per_sec / full.tokens_per_sec,
                row_ratio: hybrid.cached_rows as f64 / full.cached_rows as f64,
                analytic_row_ratio: analytic_row_ratio(c.layers, d.keep_full, p.tokens, d.w_sink, d.w_recent),
                full,
                hybrid,
                streaming,
                overhead: p.overhead,
            }
        })
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        results,
    })
}

/// Least-squares line through `(x, y)` points with a two-sided 95%
/// confidence interval on the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_ci_low: f64,
    pub slope_ci_high: f64,
    pub mean_y: f64,
    /// Fitted change across the x range relative to the mean of y.
    pub relative_change: f64,
}

impl LineFit {
    pub fn ci_contains_zero(&self) -> bool {
        self.slope_ci_low <= 0.0 && 0.0 <= self.slope_ci_high
    }
}

pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit> {
    let n = points.len();
    if n < 3 {
        return input("line fit needs at least 3 points");
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return input("line fit needs distinct x values");
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = (sse / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0)
        .map_err(|e| crate::LazyKvError::Input(e.to_string()))?
        .inverse_cdf(0.975);
    let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    Ok(LineFit {
        slope,
        intercept,
        slope_ci_low: slope - t * se,
        slope_ci_high: slope + t * se,
        mean_y: my,
        relative_change: slope * (hi - lo) / my,
    })
}
