//! Runnable experiments: the four pipelines, the single-stage commands the
//! `genrep` binary exposes, and SVG plots of their CSV outputs.
//!
//! Directory-producing runs record the resolved configuration in `run.cfg`
//! and list every artifact they wrote in `outputs.txt`. All randomness is
//! derived from `RunConfig::seed` through labeled streams, so a run is
//! reproducible byte for byte under the same configuration.

mod commands;
mod pipelines;
pub mod plot;

pub use commands::{
    eval, gen_data, finetune, load_backbone, load_decoder, load_generator, load_segmentation, pretrain, pseudo_label,
    distill, save_params, train_generator, train_proj, EvalSplit,
};
pub use pipelines::{
    build_datasets, fig3a_curve, fig4_purity, fig5_sweep, layermatch_config, pretrain_backbone, table1_distill,
    CurveReport, Datasets, MetricsRow, PurityRow, SweepReport, PurityReport, Table1Report,
};

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::dataio::RunConfig;
use crate::error::{Error, Result};

/// Environment variable capping the number of concurrently running cells.
pub const THREADS_ENV: &str = "GENREP_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Fig3aCurve,
    Table1Distill,
    Fig5Sweep,
    Fig4Purity,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::Fig3aCurve, Pipeline::Table1Distill, Pipeline::Fig5Sweep, Pipeline::Fig4Purity];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Fig3aCurve => "fig3a-curve",
            Pipeline::Table1Distill => "table1-distill",
            Pipeline::Fig5Sweep => "fig5-sweep",
            Pipeline::Fig4Purity => "fig4-purity",
        }
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub pipeline: Pipeline,
    pub config: RunConfig,
    pub out: PathBuf,
}

/// Runs a pipeline and returns the paths it produced.
pub fn run(plan: &ExperimentPlan) -> Result<Vec<PathBuf>> {
    let (cfg, out) = (&plan.config, &plan.out);
    Ok(match plan.pipeline {
        Pipeline::Fig3aCurve => fig3a_curve(cfg, out)?.files,
        Pipeline::Table1Distill => table1_distill(cfg, out)?.files,
        Pipeline::Fig5Sweep => fig5_sweep(cfg, out)?.files,
        Pipeline::Fig4Purity => fig4_purity(cfg, out)?.files,
    })
}

/// Artifact bookkeeping for one output directory.
pub(crate) struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub(crate) fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Path of a new artifact; any stale file of that name is removed so
    /// append-mode writers start fresh.
    pub(crate) fn fresh(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if p.exists() {
            std::fs::remove_file(&p)?;
        }
        self.files.push(name.to_owned());
        Ok(p)
    }

    pub(crate) fn finish(mut self, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
        std::fs::write(self.dir.join("run.cfg"), cfg.to_text())?;
        self.files.push("run.cfg".into());
        let mut listing = self.files.join("\n");
        listing.push('\n');
        std::fs::write(self.dir.join("outputs.txt"), listing)?;
        self.files.push("outputs.txt".into());
        Ok(self.files.iter().map(|f| self.dir.join(f)).collect())
    }
}

/// Cell parallelism from [`THREADS_ENV`]; 1 when unset or invalid.
pub fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `threads` workers. Results keep input
/// order and the first error (by index) is returned.
pub(crate) fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// Seeds of a multi-seed run: `seed, seed + 1, ...`.
pub(crate) fn run_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.seeds as u64).map(|s| cfg.seed.wrapping_add(s)).collect()
}
