//! Phase orchestration for the `train` subcommand: corpora, checkpoints
//! between phases, and one JSON report per phase.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Result};
use m4sc_core::numerics::derive_seed;
use m4sc_core::semantic::{gen_dataset, gen_mixed, FrozenGroups, TaskInstruction, TaskKind};
use m4sc_core::training::{train_phase, M4scSystem, Phase, TrainReport};

use crate::config::{DataConfig, ExperimentConfig};
use crate::io;

/// Training and held-out corpora for every phase.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub captions: Vec<TaskInstruction>,
    pub mixed: Vec<TaskInstruction>,
    pub eval_captions: Vec<TaskInstruction>,
    pub eval_mixed: Vec<TaskInstruction>,
}

impl Corpora {
    pub fn generate(d: &DataConfig) -> Self {
        Self {
            captions: gen_dataset(TaskKind::Caption, d.caption_samples, derive_seed(d.seed, 0)),
            mixed: gen_mixed(d.mixed_samples, derive_seed(d.seed, 1)),
            eval_captions: gen_dataset(TaskKind::Caption, d.eval_samples, derive_seed(d.seed, 2)),
            eval_mixed: gen_mixed(d.eval_samples, derive_seed(d.seed, 3)),
        }
    }

    /// `(train, eval)` for a phase: alignment uses captions only.
    pub fn for_phase(&self, phase: Phase) -> (&[TaskInstruction], &[TaskInstruction]) {
        match phase {
            Phase::Align => (&self.captions, &self.eval_captions),
            _ => (&self.mixed, &self.eval_mixed),
        }
    }
}

/// Phases in the order `train --phase all` runs them.
pub fn phases_for(arg: &str) -> Result<Vec<Phase>> {
    if arg == "all" {
        return Ok(Phase::ALL.to_vec());
    }
    Ok(vec![arg.parse()?])
}

/// Newest checkpoint of a phase before `phase`, if any exists on disk.
pub fn previous_checkpoint(cfg: &ExperimentConfig, phase: Phase) -> Option<(Phase, PathBuf)> {
    Phase::ALL
        .iter()
        .rev()
        .filter(|p| **p < phase)
        .map(|&p| (p, cfg.checkpoint_path(p)))
        .find(|(_, path)| path.exists())
}

/// Newest checkpoint of any phase.
pub fn latest_checkpoint(cfg: &ExperimentConfig) -> Option<(Phase, PathBuf)> {
    Phase::ALL
        .iter()
        .rev()
        .map(|&p| (p, cfg.checkpoint_path(p)))
        .find(|(_, path)| path.exists())
}

/// The system a phase starts from: the previous phase's checkpoint, or a
/// fresh system (frozen unless pretraining) when none exists.
pub fn starting_system(cfg: &ExperimentConfig, phase: Phase) -> Result<M4scSystem> {
    if phase != Phase::Pretrain {
        if let Some((_, path)) = previous_checkpoint(cfg, phase) {
            let sys = io::load_checkpoint(&path)?;
            if sys.config != cfg.system {
                bail!(
                    "checkpoint {} was trained with different system settings",
                    path.display()
                );
            }
            return Ok(sys);
        }
    }
    let mut sys = M4scSystem::new(cfg.system.clone())?;
    if phase != Phase::Pretrain {
        sys.model.frozen = FrozenGroups::all();
    }
    Ok(sys)
}

/// Runs `phases` in order, saving `<out>/checkpoints/<phase>.m4ck` and
/// `<out>/reports/<phase>.json` after each.
pub fn run(
    cfg: &ExperimentConfig,
    phases: &[Phase],
    corpora: &Corpora,
    mut progress: impl FnMut(&TrainReport),
) -> Result<Vec<TrainReport>> {
    let Some(&first) = phases.first() else {
        return Ok(Vec::new());
    };
    let mut sys = starting_system(cfg, first)?;
    let mut reports = Vec::new();
    for &phase in phases {
        let pc = cfg.train.phase(phase);
        let (train, eval) = corpora.for_phase(phase);
        let t = Instant::now();
        let mut report = train_phase(&mut sys, train, eval, &pc)?;
        report.wall_clock_secs = t.elapsed().as_secs_f64();
        io::save_checkpoint(&cfg.checkpoint_path(phase), &sys)?;
        io::write_json(&cfg.output_dir.join("reports").join(format!("{phase}.json")), &report)?;
        progress(&report);
        reports.push(report);
    }
    Ok(reports)
}
