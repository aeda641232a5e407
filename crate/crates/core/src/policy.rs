//! Persisted per-layer attention policies and the ablation strategies that
//! generate them.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::kvcache::CachePolicy;
use crate::lazydetect::DetectParams;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Online,
    Preselect,
    Pyramid,
    Random,
    Manual,
}

/// Which layers stream, and with what window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyFile {
    /// Hex SHA-256 of the model file the policy was made for.
    pub fingerprint: String,
    pub lazy_layers: Vec<usize>,
    pub w_sink: usize,
    pub w_recent: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Per-layer recent windows overriding `w_recent` (pyramid schedules).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_windows: Option<Vec<usize>>,
}

impl PolicyFile {
    pub fn new(
        fingerprint: impl Into<String>,
        mut lazy_layers: Vec<usize>,
        w_sink: usize,
        w_recent: usize,
        provenance: Provenance,
    ) -> Self {
        lazy_layers.sort_unstable();
        Self {
            fingerprint: fingerprint.into(),
            lazy_layers,
            w_sink,
            w_recent,
            provenance,
            seed: None,
            layer_windows: None,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        let mut seen = vec![false; layers];
        for &l in &self.lazy_layers {
            if l >= layers {
                return input(format!("policy names layer {l} but the model has {layers}"));
            }
            if std::mem::replace(&mut seen[l], true) {
                return input(format!("policy lists layer {l} twice"));
            }
        }
        if self.w_recent == 0 {
            return input("policy w_recent must be >= 1");
        }
        if let Some(w) = &self.layer_windows {
            if w.len() != layers || w.iter().any(|&x| x == 0) {
                return input("layer_windows must give a window >= 1 for every layer");
            }
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.fingerprint != model_fingerprint {
            return input(format!(
                "policy was made for model {} but the loaded model is {}",
                self.fingerprint, model_fingerprint
            ));
        }
        Ok(())
    }

    pub fn is_lazy(&self, layer: usize) -> bool {
        self.lazy_layers.binary_search(&layer).is_ok()
    }

    /// Cache policy for `layer`.
    pub fn layer_policy(&self, layer: usize) -> CachePolicy {
        if !self.is_lazy(layer) {
            return CachePolicy::Full;
        }
        let recent = self
            .layer_windows
            .as_ref()
            .map_or(self.w_recent, |w| w[layer]);
        CachePolicy::Streaming {
            sink: self.w_sink,
            recent,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut p: PolicyFile = serde_json::from_slice(&fs::read(path)?)?;
        p.lazy_layers.sort_unstable();
        Ok(p)
    }
}

/// Hand-designed layer-replacement strategies used as ablations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    /// Every layer streams; windows shrink linearly with depth while
    /// averaging `mean_recent`.
    Pyramid { mean_recent: usize },
    /// `L - P` layers drawn uniformly without replacement from `range`.
    Random { range: Range<usize> },
    Manual(Vec<usize>),
}

pub fn make_policy(
    strategy: &Strategy,
    config: &ModelConfig,
    params: &DetectParams,
    seed: u64,
    fingerprint: &str,
) -> Result<PolicyFile> {
    let layers = config.layers;
    let policy = match strategy {
        Strategy::Pyramid { mean_recent } => {
            let windows = pyramid_windows(layers, *mean_recent)?;
            let mut p = PolicyFile::new(
                fingerprint,
                (0..layers).collect(),
                params.w_sink,
                *mean_recent,
                Provenance::Pyramid,
            );
            p.layer_windows = Some(windows);
            p
        }
        Strategy::Random { range } => {
            params.validate(layers)?;
            let want = layers - params.keep_full;
            if range.end > layers || range.len() < want {
                return input(format!(
                    "range {range:?} cannot supply {want} distinct layers of {layers}"
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = sample(&mut rng, range.len(), want)
                .into_iter()
                .map(|i| range.start + i)
                .collect();
            let mut p = PolicyFile::new(fingerprint, picked, params.w_sink, params.w_recent, Provenance::Random);
            p.seed = Some(seed);
            p
        }
        Strategy::Manual(list) => {
            PolicyFile::new(fingerprint, list.clone(), params.w_sink, params.w_recent, Provenance::Manual)
        }
    };
    policy.validate(layers)?;
    Ok(policy)
}

/// Linear depth schedule from `2·mean` down to `mean/2`, rescaled so the
/// windows sum to exactly `layers·mean` (largest-remainder rounding, earlier
/// layers win ties) with every window at least 1.
pub fn pyramid_windows(layers: usize, mean: usize) -> Result<Vec<usize>> {
    if mean == 0 {
        return input("pyramid mean window must be >= 1");
    }
    if layers == 0 {
        return Ok(Vec::new());
    }
    let m = mean as f64;
    let raw: Vec<f64> = (0..layers)
        .map(|i| {
            if layers == 1 {
                m
            } else {
                2.0 * m + (0.5 * m - 2.0 * m) * i as f64 / (layers - 1) as f64
            }
        })
        .collect();
    let target = layers * mean;
    let factor = target as f64 / raw.iter().sum::<f64>();
    let scaled: Vec<f64> = raw.iter().map(|r| r * factor).collect();
    let mut windows: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let mut short = target - windows.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..layers).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if short == 0 {
            break;
        }
        windows[i] += 1;
        short -= 1;
    }
    // Lift zero windows, paying from the widest layer.
    while let Some(z) = windows.iter().position(|&w| w == 0) {
        let widest = (0..layers).max_by(|&a, &b| windows[a].cmp(&windows[b]).then(b.cmp(&a))).unwrap();
        windows[widest] -= 1;
        windows[z] += 1;
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(keep_full: usize) -> DetectParams {
        DetectParams {
            w_last: 8,
            w_sink: 2,
            w_recent: 16,
            keep_full,
        }
    }

    #[test]
    fn pyramid_small_schedule() {
        // 16, 12, 8, 4 rescaled by 32/40 -> 12.8, 9.6, 6.4, 3.2 -> 13, 10, 6, 3
        assert_eq!(pyramid_windows(4, 8).unwrap(), vec![13, 10, 6, 3]);
        assert_eq!(pyramid_windows(1, 5).unwrap(), vec![5]);
        for (l, m) in [(3, 1), (7, 3), (32, 1020), (5, 2)] {
            let w = pyramid_windows(l, m).unwrap();
            assert_eq!(w.iter().sum::<usize>(), l * m);
            assert!(w.iter().all(|&x| x >= 1));
            assert!(w.windows(2).all(|p| p[0] >= p[1]), "{w:?}");
        }
    }

    #[test]
    fn random_policy_is_reproducible() {
        let cfg = ModelConfig::practical(8, 1, 4, 2, 5);
        let s = Strategy::Random { range: 0..8 };
        let a = make_policy(&s, &cfg, &params(4), 11, "fp").unwrap();
        let b = make_policy(&s, &cfg, &params(4), 11, "fp").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.lazy_layers.len(), 4);
        assert_eq!(a.seed, Some(11));
        let narrow = Strategy::Random { range: 0..3 };
        assert!(make_policy(&narrow, &cfg, &params(4), 11, "fp").is_err());
        let upper = Strategy::Random { range: 4..8 };
        let c = make_policy(&upper, &cfg, &params(4), 3, "fp").unwrap();
        assert_eq!(c.lazy_layers, vec![4, 5, 6, 7]);
    }

    #[test]
    fn manual_policy_and_layer_policies() {
        let cfg = ModelConfig::practical(4, 1, 4, 2, 5);
        let p = make_policy(&Strategy::Manual(vec![2, 0]), &cfg, &params(2), 0, "fp").unwrap();
        assert_eq!(p.lazy_layers, vec![0, 2]);
        assert_eq!(p.layer_policy(0), CachePolicy::Streaming { sink: 2, recent: 16 });
        assert_eq!(p.layer_policy(1), CachePolicy::Full);
        assert!(make_policy(&Strategy::Manual(vec![4]), &cfg, &params(2), 0, "fp").is_err());
        assert!(make_policy(&Strategy::Manual(vec![1, 1]), &cfg, &params(2), 0, "fp").is_err());

        let pyr = make_policy(&Strategy::Pyramid { mean_recent: 8 }, &cfg, &params(2), 0, "fp").unwrap();
        assert_eq!(pyr.lazy_layers, vec![0, 1, 2, 3]);
        assert_eq!(pyr.layer_policy(3), CachePolicy::Streaming { sink: 2, recent: 3 });
    }

    #[test]
    fn json_shape_and_fingerprint_check() {
        let p = PolicyFile::new("abc", vec![3, 1], 4, 1020, Provenance::Online);
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["lazy_layers"], serde_json::json!([1, 3]));
        assert_eq!(v["provenance"], "online");
        assert!(v.get("seed").is_none());
        assert!(p.check_fingerprint("abc").is_ok());
        assert!(matches!(p.check_fingerprint("abd"), Err(crate::LazyKvError::Input(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        assert_eq!(PolicyFile::load(&path).unwrap(), p);
    }
}
