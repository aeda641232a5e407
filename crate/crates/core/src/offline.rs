//! Corpus-level pre-selection of lazy layers.
//!
//! Every sample (question followed by answer) goes through the engine's
//! online prefill; each layer's count is the number of samples that marked
//! it lazy. The `L - P` most frequently lazy layers form a static policy.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{EngineParams, Session};
use crate::error::{input, Result};
use crate::lazydetect::DetectParams;
use crate::model::Weights;
use crate::policy::{PolicyFile, Provenance};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
}

impl CorpusSample {
    pub fn tokens(&self) -> Vec<u32> {
        let mut t = self.question.clone();
        t.extend_from_slice(&self.answer);
        t
    }

    pub fn len(&self) -> usize {
        self.question.len() + self.answer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a JSON-lines corpus; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusSample>> {
    parse_corpus(&fs::read_to_string(path)?)
}

pub fn parse_corpus(text: &str) -> Result<Vec<CorpusSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: CorpusSample = serde_json::from_str(line)
            .map_err(|e| crate::LazyKvError::Input(format!("corpus line {}: {e}", i + 1)))?;
        if sample.is_empty() {
            return input(format!("corpus line {} has no tokens", i + 1));
        }
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTable {
    /// `counts[l]`: samples in which layer `l` was lazy.
    pub counts: Vec<usize>,
    pub samples: usize,
}

impl FrequencyTable {
    /// The `n` layers with the highest counts, deeper layers winning ties;
    /// returned sorted.
    pub fn top_layers(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.counts.len()).collect();
        order.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(b.cmp(&a)));
        let mut top = order[..n.min(order.len())].to_vec();
        top.sort_unstable();
        top
    }
}

#[derive(Debug, Clone)]
pub struct Preselection {
    pub table: FrequencyTable,
    pub policy: PolicyFile,
    pub warnings: Vec<String>,
}

pub fn preselect(
    weights: &Weights,
    corpus: &[CorpusSample],
    params: &DetectParams,
    fingerprint: &str,
) -> Result<Preselection> {
    if corpus.is_empty() {
        return input("preselect needs a nonempty corpus");
    }
    let layers = weights.config.layers;
    params.validate(layers)?;

    let lazy_sets: Vec<Vec<usize>> = corpus
        .par_iter()
        .map(|sample| {
            let mut session = Session::new(weights, EngineParams::online(*params))?;
            let out = session.prefill(&sample.tokens())?;
            Ok(out.report.expect("online prefill reports").lazy_layers)
        })
        .collect::<Result<_>>()?;

    let mut counts = vec![0; layers];
    for set in &lazy_sets {
        for &l in set {
            counts[l] += 1;
        }
    }
    let table = FrequencyTable {
        counts,
        samples: corpus.len(),
    };

    let window = params.w_sink + params.w_recent;
    let short = corpus.iter().filter(|s| s.len() <= window).count();
    let mut warnings = Vec::new();
    if short > 0 {
        let msg = format!(
            "{short} of {} samples fit inside the streaming window ({window} tokens); \
             their lazy ratios are all 1 and their selections come from tie-breaking alone",
            corpus.len()
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let lazy = table.top_layers(layers - params.keep_full);
    let policy = PolicyFile::new(fingerprint, lazy, params.w_sink, params.w_recent, Provenance::Preselect);
    Ok(Preselection {
        table,
        policy,
        warnings,
    })
}
