use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{Phase, PhaseConfig, Trainable};
use super::system::{sample_backward, LossMode, M4scSystem, SystemGrads};
use crate::channel::{ChannelFamily, ChannelParams};
use crate::numerics::{derive_seed, AdamW, AdamWConfig, CosineSchedule, Matrix, Rng};
use crate::semantic::{FrozenGroups, TaskInstruction, ToySemanticModel};
use crate::{error::config, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrPoint {
    pub family: ChannelFamily,
    pub snr_db: f64,
    pub accuracy: f64,
    pub semantic_mse: f64,
}

/// Outcome of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub steps: u64,
    /// Phase seed and system seed.
    pub seeds: Vec<u64>,
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
    /// Held-out accuracy per task name, plus `"all"`.
    pub accuracy: BTreeMap<String, f64>,
    pub accuracy_vs_snr: Vec<SnrPoint>,
    /// Set when the phase ran without the phases that normally precede it.
    pub cold_start: bool,
    /// Filled in by callers that own a clock.
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// Mean of the first and last `window` losses.
    pub fn smoothed_start_end(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.loss_curve.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.loss_curve[..w]), mean(&self.loss_curve[n - w..])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub semantic_mse: f64,
    pub per_task: BTreeMap<String, f64>,
    pub samples: usize,
}

/// Exact-match accuracy and semantic MSE averaged over `seeds` channel
/// realizations. Without a channel the semantics skip the coder entirely.
pub fn evaluate(
    sys: &M4scSystem,
    corpus: &[TaskInstruction],
    channel: Option<&ChannelParams>,
    seeds: &[u64],
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("evaluation corpus is empty"));
    }
    let runs: Vec<Option<u64>> = match channel {
        Some(p) if seeds.is_empty() => vec![Some(p.seed)],
        Some(_) => seeds.iter().map(|&s| Some(s)).collect(),
        None => vec![None],
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut mse = 0.0;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for run in &runs {
        for (i, sample) in corpus.iter().enumerate() {
            let params = match (channel, run) {
                (Some(p), Some(s)) => Some(p.with_seed(derive_seed(*s, i as u64))),
                _ => None,
            };
            let pred = sys.predict(sample, params.as_ref())?;
            let ok = pred.answer == sample.answer_token()?;
            hits += ok as usize;
            total += 1;
            mse += pred.semantic_mse;
            let key = sample.task().map_or("other", |t| t.as_str()).to_string();
            let e = per.entry(key).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    Ok(EvalReport {
        accuracy: hits as f64 / total as f64,
        semantic_mse: mse / total as f64,
        per_task: per.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        samples: corpus.len(),
    })
}

/// Corpus indices for one step, a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, batch: usize, corpus_len: usize) -> Vec<usize> {
    let mut rng = Rng::new(derive_seed(seed, step));
    (0..batch).map(|_| rng.below(corpus_len)).collect()
}

/// Bit-level fingerprint of a set of matrices (FNV-1a over shapes and values).
pub fn fingerprint(mats: &[&Matrix]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for m in mats {
        eat(&(m.rows() as u64).to_le_bytes());
        eat(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            eat(&v.to_bits().to_le_bytes());
        }
    }
    h
}

pub fn model_fingerprint(model: &ToySemanticModel) -> u64 {
    fingerprint(&model.params())
}

fn step_update(
    sys: &mut M4scSystem,
    grads: &SystemGrads,
    train: Trainable,
    opt: &mut AdamW,
    lr: f64,
    clip: f64,
) -> Result<()> {
    let mut g: Vec<&Matrix> = Vec::new();
    if train.embedding {
        g.push(&grads.model.embedding);
    }
    if train.encoder {
        g.extend(grads.model.encoder_matrices());
    }
    if train.head {
        g.extend(grads.model.head_matrices());
    }
    if train.kan {
        g.extend(grads.kan.matrices());
    }
    if train.lora {
        if let Some(l) = &grads.lora {
            g.extend(l.matrices());
        }
    }
    if train.coder {
        g.extend(grads.coder.matrices());
    }
    let norm = libm::sqrt(g.iter().map(|m| m.sum_squares()).sum::<f64>());
    let factor = if norm > clip { clip / norm } else { 1.0 };
    let clipped: Vec<Matrix> = g.iter().map(|m| m.scaled(factor)).collect();
    let clipped: Vec<&Matrix> = clipped.iter().collect();

    let M4scSystem {
        kan,
        model,
        lora,
        coder,
        ..
    } = sys;
    let ToySemanticModel {
        embedding,
        encoder,
        head,
        ..
    } = model;
    let mut p: Vec<&mut Matrix> = Vec::new();
    if train.embedding {
        p.push(embedding);
    }
    if train.encoder {
        for l in encoder.iter_mut() {
            p.push(&mut l.weight);
            p.push(&mut l.bias);
        }
    }
    if train.head {
        p.push(&mut head.weight);
        p.push(&mut head.bias);
    }
    if train.kan {
        p.extend(kan.params_mut());
    }
    if train.lora {
        if let Some(l) = lora {
            p.extend(l.params_mut());
        }
    }
    if train.coder {
        p.extend(coder.params_mut());
    }
    opt.step(&mut p, &clipped, lr)
}

fn run_phase(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
    cold_start: bool,
) -> Result<TrainReport> {
    let train = cfg.trainable();
    let mut loss_curve = Vec::with_capacity(cfg.steps as usize);
    if cfg.steps > 0 {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("training corpus is empty"));
        }
        let schedule = CosineSchedule::with_default_warmup(cfg.lr, cfg.steps, cfg.min_lr)?;
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let mut grads = SystemGrads::zeros_like(sys);
        let inv_b = 1.0 / cfg.batch_size as f64;
        for step in 0..cfg.steps {
            grads.clear();
            let step_seed = derive_seed(cfg.seed, step);
            let mut rng = Rng::new(step_seed);
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(corpus.len())).collect();
            let channel = if cfg.phase == Phase::Joint {
                let snr = rng.uniform_range(cfg.snr_range.0, cfg.snr_range.1);
                let family = cfg.families[rng.below(cfg.families.len())];
                Some(ChannelParams::new(family, snr, 0))
            } else {
                None
            };
            let mut batch_loss = 0.0;
            for (i, &k) in idx.iter().enumerate() {
                let mode = match (cfg.phase, channel) {
                    (Phase::Pretrain, _) => LossMode::Pretrain,
                    (Phase::Align, _) => LossMode::Align { lambda: cfg.lambda },
                    (Phase::Finetune, _) => LossMode::Finetune,
                    (Phase::Joint, Some(p)) => LossMode::Joint {
                        params: p.with_seed(derive_seed(step_seed, 1000 + i as u64)),
                        lambda: cfg.lambda,
                    },
                    (Phase::Joint, None) => unreachable!(),
                };
                batch_loss += sample_backward(sys, &corpus[k], mode, &mut grads)?.0;
            }
            for m in grads_all(&mut grads) {
                m.scale(inv_b);
            }
            loss_curve.push(batch_loss * inv_b);
            step_update(sys, &grads, train, &mut opt, schedule.lr(step).max(f64::MIN_POSITIVE), cfg.clip_norm)?;
        }
    }

    let mut accuracy = BTreeMap::new();
    let mut accuracy_vs_snr = Vec::new();
    if !eval.is_empty() {
        let channel = (cfg.phase == Phase::Joint).then(ChannelParams::noiseless);
        let r = evaluate(sys, eval, channel.as_ref(), &[])?;
        accuracy = r.per_task;
        accuracy.insert("all".to_string(), r.accuracy);
        if cfg.phase == Phase::Joint {
            let seeds: Vec<u64> = (0..cfg.eval_seeds as u64).map(|s| derive_seed(cfg.seed ^ 0xe7a1, s)).collect();
            let (lo, hi) = cfg.snr_range;
            // the noiseless family is already covered by `accuracy`
            for &family in cfg.families.iter().filter(|f| **f != ChannelFamily::None) {
                for k in 0..4 {
                    let snr = lo + (hi - lo) * k as f64 / 3.0;
                    let r = evaluate(sys, eval, Some(&ChannelParams::new(family, snr, 0)), &seeds)?;
                    accuracy_vs_snr.push(SnrPoint {
                        family,
                        snr_db: snr,
                        accuracy: r.accuracy,
                        semantic_mse: r.semantic_mse,
                    });
                }
            }
        }
    }
    Ok(TrainReport {
        phase: cfg.phase,
        steps: cfg.steps,
        seeds: vec![cfg.seed, sys.config.seed],
        loss_curve,
        accuracy,
        accuracy_vs_snr,
        cold_start,
        wall_clock_secs: 0.0,
    })
}

fn grads_all(g: &mut SystemGrads) -> Vec<&mut Matrix> {
    let mut v = g.kan.matrices_mut();
    v.extend(g.model.all_mut());
    if let Some(l) = &mut g.lora {
        v.extend(l.matrices_mut());
    }
    v.extend(g.coder.matrices_mut());
    v
}

fn expect_phase(cfg: &PhaseConfig, phase: Phase) -> Result<()> {
    if cfg.phase != phase {
        return Err(config(alloc::format!("expected a {phase} config, got {}", cfg.phase)));
    }
    cfg.validate()
}

/// Trains the semantic model's base weights with scenes rendered as text
/// anchors, then freezes them.
pub fn pretrain(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    expect_phase(cfg, Phase::Pretrain)?;
    if sys.lora.is_some() {
        return Err(config("pretraining must run before adapters are attached"));
    }
    sys.model.frozen = FrozenGroups::default();
    let mut report = run_phase(sys, corpus, eval, cfg, false)?;
    sys.model.frozen = FrozenGroups::all();
    sys.stages.pretrained = true;
    if !eval.is_empty() {
        // report accuracy with the anchors the model was trained on
        report.accuracy = anchor_accuracy(sys, eval)?;
    }
    Ok(report)
}

fn anchor_accuracy(sys: &M4scSystem, eval: &[TaskInstruction]) -> Result<BTreeMap<String, f64>> {
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut scratch = SystemGrads::zeros_like(sys);
    for s in eval {
        let (_, ok) = sample_backward(sys, s, LossMode::Pretrain, &mut scratch)?;
        let key = s.task().map_or("other", |t| t.as_str()).to_string();
        for k in [key, "all".to_string()] {
            let e = per.entry(k).or_default();
            e.0 += ok as usize;
            e.1 += 1;
        }
    }
    Ok(per.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect())
}

/// Phase 1: only the projector trains, against a frozen semantic model.
pub fn phase1_align(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    expect_phase(cfg, Phase::Align)?;
    if !sys.model.frozen.is_fully_frozen() {
        return Err(config("align phase requires a fully frozen semantic model"));
    }
    let cold = !sys.stages.pretrained;
    let report = run_phase(sys, corpus, eval, cfg, cold)?;
    sys.stages.aligned = true;
    Ok(report)
}

/// Phase 2: projector and LoRA adapters on mixed-task batches.
pub fn phase2_finetune(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    expect_phase(cfg, Phase::Finetune)?;
    let lora = cfg.lora.ok_or_else(|| config("finetune phase needs a LoRA configuration"))?;
    sys.ensure_lora(&lora)?;
    let cold = !sys.stages.aligned;
    if cfg.full_unfreeze {
        sys.model.frozen = FrozenGroups::default();
    }
    let report = run_phase(sys, corpus, eval, cfg, cold);
    sys.model.frozen = FrozenGroups::all();
    let report = report?;
    sys.stages.finetuned = true;
    Ok(report)
}

/// Phase 3: projector, channel coder and adapters through a random channel per batch.
pub fn phase3_joint(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    expect_phase(cfg, Phase::Joint)?;
    if let Some(l) = &cfg.lora {
        sys.ensure_lora(l)?;
    }
    let cold = !(sys.stages.aligned && sys.stages.finetuned);
    let report = run_phase(sys, corpus, eval, cfg, cold)?;
    sys.stages.joint = true;
    Ok(report)
}

/// Dispatches on `cfg.phase`.
pub fn train_phase(
    sys: &mut M4scSystem,
    corpus: &[TaskInstruction],
    eval: &[TaskInstruction],
    cfg: &PhaseConfig,
) -> Result<TrainReport> {
    match cfg.phase {
        Phase::Pretrain => pretrain(sys, corpus, eval, cfg),
        Phase::Align => phase1_align(sys, corpus, eval, cfg),
        Phase::Finetune => phase2_finetune(sys, corpus, eval, cfg),
        Phase::Joint => phase3_joint(sys, corpus, eval, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::{gen_dataset, gen_mixed, TaskKind};
    use crate::training::config::SystemConfig;

    fn tiny_system() -> M4scSystem {
        M4scSystem::new(SystemConfig {
            dim: 8,
            channel_dim: 4,
            feature_dim: 6,
            kan_hidden: 4,
            ..SystemConfig::default()
        })
        .unwrap()
    }

    fn short(phase: Phase, steps: u64) -> PhaseConfig {
        PhaseConfig {
            steps,
            batch_size: 4,
            ..PhaseConfig::for_phase(phase)
        }
    }

    #[test]
    fn align_rejects_unfrozen_model() {
        let mut sys = tiny_system();
        let corpus = gen_dataset(TaskKind::Caption, 8, 0);
        assert!(matches!(
            phase1_align(&mut sys, &corpus, &[], &short(Phase::Align, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_steps_leave_projector_unchanged() {
        let mut sys = tiny_system();
        sys.model.frozen = FrozenGroups::all();
        let before = sys.kan.clone();
        let corpus = gen_dataset(TaskKind::Caption, 8, 0);
        let r = phase1_align(&mut sys, &corpus, &[], &short(Phase::Align, 0)).unwrap();
        assert_eq!(sys.kan, before);
        assert!(r.loss_curve.is_empty());
        assert!(r.cold_start);
    }

    #[test]
    fn freeze_contracts_hold_per_phase() {
        let mut sys = tiny_system();
        let corpus = gen_mixed(30, 1);
        pretrain(&mut sys, &corpus, &[], &short(Phase::Pretrain, 3)).unwrap();

        let model = model_fingerprint(&sys.model);
        let coder = fingerprint(&sys.coder.params());
        let kan = fingerprint(&sys.kan.params());
        phase1_align(&mut sys, &corpus, &[], &short(Phase::Align, 3)).unwrap();
        assert_eq!(model_fingerprint(&sys.model), model);
        assert_eq!(fingerprint(&sys.coder.params()), coder);
        assert_ne!(fingerprint(&sys.kan.params()), kan);

        phase2_finetune(&mut sys, &corpus, &[], &short(Phase::Finetune, 3)).unwrap();
        assert_eq!(model_fingerprint(&sys.model), model);
        assert_eq!(fingerprint(&sys.coder.params()), coder);
        let lora = fingerprint(&sys.lora.as_ref().unwrap().params());

        let r = phase3_joint(&mut sys, &corpus, &[], &short(Phase::Joint, 3)).unwrap();
        assert_eq!(model_fingerprint(&sys.model), model);
        assert_ne!(fingerprint(&sys.coder.params()), coder);
        assert_ne!(fingerprint(&sys.lora.as_ref().unwrap().params()), lora);
        assert!(!r.cold_start);
    }

    #[test]
    fn finetune_needs_lora_and_joint_needs_families() {
        let mut sys = tiny_system();
        let corpus = gen_mixed(6, 1);
        let mut ft = short(Phase::Finetune, 1);
        ft.lora = None;
        assert!(matches!(phase2_finetune(&mut sys, &corpus, &[], &ft), Err(Error::Config(_))));
        let mut j = short(Phase::Joint, 1);
        j.families.clear();
        assert!(matches!(phase3_joint(&mut sys, &corpus, &[], &j), Err(Error::Config(_))));
        assert!(phase3_joint(&mut sys, &corpus, &[], &short(Phase::Align, 1)).is_err());
    }

    #[test]
    fn cold_start_joint_runs_and_is_flagged() {
        let mut sys = tiny_system();
        let corpus = gen_mixed(6, 2);
        let r = phase3_joint(&mut sys, &corpus, &corpus, &short(Phase::Joint, 2)).unwrap();
        assert!(r.cold_start);
        assert_eq!(r.accuracy_vs_snr.len(), 8);
    }

    #[test]
    fn coder_gradients_flow_on_first_joint_step() {
        let sys = tiny_system();
        let corpus = gen_mixed(6, 3);
        let mut g = SystemGrads::zeros_like(&sys);
        let mode = LossMode::Joint {
            params: ChannelParams::new(ChannelFamily::Awgn, 5.0, 1),
            lambda: 0.1,
        };
        for s in &corpus {
            sample_backward(&sys, s, mode, &mut g).unwrap();
        }
        for m in g.coder.matrices() {
            assert!(m.frobenius_norm() > 0.0);
        }
    }

    #[test]
    fn schedule_and_training_are_deterministic() {
        assert_eq!(batch_indices(5, 3, 8, 100), batch_indices(5, 3, 8, 100));
        assert_ne!(batch_indices(5, 3, 8, 100), batch_indices(6, 3, 8, 100));
        let corpus = gen_mixed(12, 4);
        let run = || {
            let mut sys = tiny_system();
            pretrain(&mut sys, &corpus, &[], &short(Phase::Pretrain, 4)).unwrap();
            phase1_align(&mut sys, &corpus, &[], &short(Phase::Align, 4)).unwrap();
            phase3_joint(&mut sys, &corpus, &[], &short(Phase::Joint, 4)).unwrap();
            sys
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_is_reproducible_and_none_matches_clean_coding() {
        let sys = tiny_system();
        let corpus = gen_mixed(9, 5);
        let p = ChannelParams::new(ChannelFamily::Rayleigh, 3.0, 0);
        let a = evaluate(&sys, &corpus, Some(&p), &[1, 2]).unwrap();
        let b = evaluate(&sys, &corpus, Some(&p), &[1, 2]).unwrap();
        assert_eq!(a, b);
        let n1 = evaluate(&sys, &corpus, Some(&ChannelParams::noiseless()), &[1]).unwrap();
        let n2 = evaluate(&sys, &corpus, Some(&ChannelParams::noiseless()), &[9, 10]).unwrap();
        assert_eq!(n1.accuracy, n2.accuracy);
        assert_eq!(n1.semantic_mse, n2.semantic_mse);
    }

    /// Labels drawn independently of the inputs: any predictor scores 1/V on average.
    #[test]
    fn untrained_system_is_at_chance() {
        let sys = tiny_system();
        let mut rng = Rng::new(77);
        let mut corpus = gen_mixed(3000, 6);
        for s in &mut corpus {
            s.output = crate::semantic::VOCAB[rng.below(crate::semantic::VOCAB_SIZE)].to_string();
        }
        let r = evaluate(&sys, &corpus, None, &[]).unwrap();
        let v = crate::semantic::VOCAB_SIZE as f64;
        assert!((r.accuracy - 1.0 / v).abs() <= 3.0 / (corpus.len() as f64).sqrt(), "{}", r.accuracy);
    }
}
