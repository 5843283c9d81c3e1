//! Trains and scores the memory ablation ladder.

use serde::Serialize;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalOptions};
use crate::memory::MemoryConfig;
use crate::metrics::{FeatureExtractor, MetricReport};
use crate::train::Trainer;

/// Scores of one variant trained with one seed.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRun {
    pub seed: u64,
    pub trained: MetricReport,
    /// The same variant and seed before any training step.
    pub untrained: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: Vec<AblationRun>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    fn median_of(&self, f: impl Fn(&AblationRun) -> f64) -> f64 {
        median(self.runs.iter().map(f).collect())
    }

    pub fn median_fid(&self) -> f64 {
        self.median_of(|r| r.trained.fid)
    }

    pub fn median_untrained_fid(&self) -> f64 {
        self.median_of(|r| r.untrained.fid)
    }

    pub fn median_is(&self) -> f64 {
        self.median_of(|r| r.trained.is_mean)
    }

    pub fn median_rp(&self) -> f64 {
        self.median_of(|r| r.trained.rp_mean)
    }

    /// Whether training beat initialisation on FID for every seed.
    pub fn trained_beats_untrained(&self) -> bool {
        self.runs.iter().all(|r| r.trained.fid < r.untrained.fid)
    }
}

/// Trains each ladder variant once per seed on the same data order and
/// evaluates the result. `progress` receives `(variant, seed)` before each run.
pub fn ablation_run(
    base: &TrainConfig,
    seeds: &[u64],
    extractor: &dyn FeatureExtractor,
    eval: &EvalOptions,
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Contract("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, memory) in MemoryConfig::ladder() {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            progress(name, seed);
            let mut cfg = base.clone();
            cfg.model.memory = memory;
            cfg.seed = seed;
            let opts = EvalOptions {
                data_seed: cfg.data_seed,
                seed,
                ..*eval
            };
            let mut t = Trainer::new(cfg)?;
            let untrained = evaluate(&t.model, &t.store, extractor, &opts)?.report;
            t.run(|_, _| Ok(()))?;
            let trained = evaluate(&t.model, &t.store, extractor, &opts)?.report;
            runs.push(AblationRun { seed, trained, untrained });
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            runs,
        });
    }
    Ok(rows)
}

/// Markdown table with one row per variant, in ladder order.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | FID (median) | untrained FID (median) | IS (median) | R-precision (median) |\n");
    s.push_str("|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.3} | {:.3} | {:.3} | {:.3} |\n",
            r.variant,
            r.median_fid(),
            r.median_untrained_fid(),
            r.median_is(),
            r.median_rp()
        ));
    }
    s
}
