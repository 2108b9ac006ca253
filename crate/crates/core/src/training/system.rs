use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::config::{LoraConfig, SystemConfig};
use crate::channel::{ChannelCoder, ChannelParams, CoderGrads};
use crate::kan::{KanGrads, KanNetwork};
use crate::numerics::{argmax, derive_seed, Matrix, Rng};
use crate::semantic::{
    anchor_words, apply_lora, cross_entropy, LoraGrads, LoraSet, ModelGrads, ModelView, SemanticTensor,
    TaskInstruction, ToySemanticModel, VisionEncoder, VOCAB_SIZE,
};
use crate::{Error, Result};

/// Which training stages have been applied to a system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub pretrained: bool,
    pub aligned: bool,
    pub finetuned: bool,
    pub joint: bool,
}

/// Vision featurizer, projector, semantic model, adapters and channel coder.
#[derive(Clone, Debug, PartialEq)]
pub struct M4scSystem {
    pub config: SystemConfig,
    pub vision: VisionEncoder,
    pub kan: KanNetwork,
    pub model: ToySemanticModel,
    pub lora: Option<LoraSet>,
    pub coder: ChannelCoder,
    pub stages: Stages,
}

/// Prediction for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub answer: usize,
    /// MSE between transmitted-and-decoded and clean semantics (0 without a channel).
    pub semantic_mse: f64,
}

impl M4scSystem {
    pub fn new(config: SystemConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let vision = VisionEncoder::new(config.feature_dim, derive_seed(s, 0));
        let kan = KanNetwork::new(&config.kan_dims(), config.spline, &mut Rng::new(derive_seed(s, 1)))?;
        let model = ToySemanticModel::new(
            VOCAB_SIZE,
            config.dim,
            config.encoder_layers,
            &mut Rng::new(derive_seed(s, 2)),
        );
        let coder = ChannelCoder::new(config.dim, config.channel_dim, &mut Rng::new(derive_seed(s, 3)));
        Ok(Self {
            config,
            vision,
            kan,
            model,
            lora: None,
            coder,
            stages: Stages::default(),
        })
    }

    /// Adds adapters on every encoder layer and the head unless already present.
    pub fn ensure_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        if self.lora.is_none() {
            let mut rng = Rng::new(derive_seed(self.config.seed, 4));
            self.lora = Some(LoraSet::for_all_layers(&self.model, cfg.rank, cfg.alpha, &mut rng)?);
        }
        Ok(())
    }

    pub fn view(&self) -> Result<ModelView<'_>> {
        match &self.lora {
            Some(l) => apply_lora(&self.model, l, true),
            None => Ok(self.model.view()),
        }
    }

    /// Projected vision tokens for the sample's scene (`0 × D` without one).
    pub fn project(&self, sample: &TaskInstruction) -> Result<SemanticTensor> {
        match &sample.input_image {
            Some(scene) => {
                let v = self.vision.encode(scene)?;
                let (p, _) = self.kan.forward_rows(v.values())?;
                SemanticTensor::new(p)
            }
            None => Ok(SemanticTensor::empty(self.config.dim)),
        }
    }

    /// Fused and encoded semantic tokens for one sample.
    pub fn semantic(&self, sample: &TaskInstruction) -> Result<SemanticTensor> {
        let view = self.view()?;
        let text = view.embed_text(&sample.text_tokens()?)?;
        view.fuse_and_encode(&self.project(sample)?, &text)
    }

    /// Answer distribution, optionally after channel coding over `channel`.
    pub fn predict(&self, sample: &TaskInstruction, channel: Option<&ChannelParams>) -> Result<Prediction> {
        let view = self.view()?;
        let sem = self.semantic(sample)?;
        let (received, semantic_mse) = match channel {
            Some(p) => {
                let (r, _) = self.coder.roundtrip_traced(&sem, p)?;
                let mse = r.values().mse(sem.values())?;
                (r, mse)
            }
            None => (sem, 0.0),
        };
        let probs = view.decode(&received)?;
        Ok(Prediction {
            answer: argmax(&probs),
            probs,
            semantic_mse,
        })
    }
}

/// Gradient buffers for every parameter group.
#[derive(Clone, Debug)]
pub struct SystemGrads {
    pub kan: KanGrads,
    pub model: ModelGrads,
    pub lora: Option<LoraGrads>,
    pub coder: CoderGrads,
}

impl SystemGrads {
    pub fn zeros_like(sys: &M4scSystem) -> Self {
        Self {
            kan: KanGrads::zeros_like(&sys.kan),
            model: ModelGrads::zeros_like(&sys.model),
            lora: sys.lora.as_ref().map(LoraGrads::zeros_like),
            coder: CoderGrads::zeros_like(&sys.coder),
        }
    }

    pub fn clear(&mut self) {
        for m in self.all_mut() {
            m.fill(0.0);
        }
    }

    fn all_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.kan.matrices_mut();
        v.extend(self.model.all_mut());
        if let Some(l) = &mut self.lora {
            v.extend(l.matrices_mut());
        }
        v.extend(self.coder.matrices_mut());
        v
    }
}

/// How a sample's loss is formed.
#[derive(Clone, Copy, Debug)]
pub enum LossMode {
    /// Scenes replaced by their text anchors; gradients reach the embedding table.
    Pretrain,
    /// Cross-entropy plus `λ·MSE(projected, anchors)`.
    Align { lambda: f64 },
    /// Cross-entropy only.
    Finetune,
    /// Cross-entropy after the channel plus `λ·MSE(received, clean)`.
    Joint { params: ChannelParams, lambda: f64 },
}

/// Loss and correctness for one sample; gradients are accumulated into `grads`.
pub fn sample_backward(
    sys: &M4scSystem,
    sample: &TaskInstruction,
    mode: LossMode,
    grads: &mut SystemGrads,
) -> Result<(f64, bool)> {
    let view = sys.view()?;
    let answer = sample.answer_token()?;
    let text_ids = sample.text_tokens()?;
    let text = view.embed_text(&text_ids)?;

    // vision side
    let mut kan_traces = Vec::new();
    let mut anchors_rows: Option<Vec<Vec<usize>>> = None;
    let mut projected = SemanticTensor::empty(sys.config.dim);
    let mut align_target = None;
    if let Some(scene) = &sample.input_image {
        match mode {
            LossMode::Pretrain => {
                let rows = anchor_words(scene)?;
                projected = crate::semantic::scene_anchors(&sys.model, scene)?;
                anchors_rows = Some(rows);
            }
            _ => {
                let v = sys.vision.encode(scene)?;
                let (p, traces) = sys.kan.forward_rows(v.values())?;
                kan_traces = traces;
                projected = SemanticTensor::new(p)?;
                if let LossMode::Align { .. } = mode {
                    align_target = Some(crate::semantic::scene_anchors(&sys.model, scene)?);
                }
            }
        }
    }
    let tv = projected.tokens();
    let fused = projected.concat(&text)?;
    let (sem, etrace) = view.encode_traced(&fused)?;

    let mut loss = 0.0;
    let (received, ctrace) = match mode {
        LossMode::Joint { params, .. } => {
            let (r, t) = sys.coder.roundtrip_traced(&sem, &params)?;
            (r, Some(t))
        }
        _ => (sem.clone(), None),
    };
    let (probs, dtrace) = view.decode_traced(&received)?;
    let (ce, dlogits) = cross_entropy(&probs, answer);
    loss += ce;
    let correct = argmax(&probs) == answer;

    let mut dreceived = view.decode_backward(&dtrace, &dlogits, &mut grads.model, grads.lora.as_mut())?;
    let dsem = match (mode, ctrace) {
        (LossMode::Joint { lambda, .. }, Some(ct)) => {
            let n = sem.values().len() as f64;
            loss += lambda * received.values().mse(sem.values())?;
            let mut dmse = received.values().clone();
            for (d, s) in dmse.as_mut_slice().iter_mut().zip(sem.values().as_slice()) {
                *d = 2.0 * lambda * (*d - s) / n;
            }
            dreceived.add_assign(&dmse)?;
            let mut dsem = sys.coder.backward(&ct, &dreceived, &mut grads.coder)?;
            dsem.add_assign(&dmse.scaled(-1.0))?;
            dsem
        }
        _ => dreceived,
    };
    let dfused = view.encode_backward(&etrace, &dsem, &mut grads.model, grads.lora.as_mut())?;

    // text embedding rows
    for (r, &id) in text_ids.iter().enumerate() {
        for (g, d) in grads.model.embedding.row_mut(id).iter_mut().zip(dfused.row(tv + r)) {
            *g += d;
        }
    }

    if let Some(rows) = anchors_rows {
        for (r, ids) in rows.iter().enumerate() {
            let w = 1.0 / ids.len() as f64;
            for &id in ids {
                for (g, d) in grads.model.embedding.row_mut(id).iter_mut().zip(dfused.row(r)) {
                    *g += w * d;
                }
            }
        }
    } else if tv > 0 {
        let mut dproj = dfused.slice_rows(0, tv);
        if let (LossMode::Align { lambda }, Some(target)) = (mode, &align_target) {
            let n = projected.values().len() as f64;
            loss += lambda * projected.values().mse(target.values())?;
            for ((d, p), t) in dproj
                .as_mut_slice()
                .iter_mut()
                .zip(projected.values().as_slice())
                .zip(target.values().as_slice())
            {
                *d += 2.0 * lambda * (p - t) / n;
            }
        }
        for (r, trace) in kan_traces.iter().enumerate() {
            sys.kan.backward(trace, dproj.row(r), &mut grads.kan)?;
        }
    }
    if !loss.is_finite() {
        return Err(Error::State("training loss is not finite"));
    }
    Ok((loss, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelFamily;
    use crate::numerics::grad_check;
    use crate::semantic::{gen_dataset, TaskKind};
    use crate::training::config::SystemConfig;
    use alloc::vec;

    fn small() -> M4scSystem {
        let cfg = SystemConfig {
            dim: 6,
            channel_dim: 4,
            feature_dim: 5,
            kan_hidden: 3,
            seed: 3,
            ..SystemConfig::default()
        };
        let mut sys = M4scSystem::new(cfg).unwrap();
        sys.ensure_lora(&LoraConfig { rank: 2, alpha: 2.0 }).unwrap();
        let mut rng = Rng::new(99);
        for a in &mut sys.lora.as_mut().unwrap().adapters {
            a.up = Matrix::gaussian(a.up.rows(), a.up.cols(), 0.3, &mut rng);
        }
        sys
    }

    fn flatten(ms: &[&Matrix]) -> Vec<f64> {
        ms.iter().flat_map(|m| m.as_slice().to_vec()).collect()
    }

    fn load(ms: Vec<&mut Matrix>, p: &[f64]) {
        let mut off = 0;
        for m in ms {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&p[off..off + n]);
            off += n;
        }
    }

    fn loss_of(sys: &M4scSystem, s: &TaskInstruction, mode: LossMode) -> f64 {
        let mut g = SystemGrads::zeros_like(sys);
        sample_backward(sys, s, mode, &mut g).unwrap().0
    }

    /// End-to-end gradients for every trainable group under each loss mode.
    #[test]
    fn system_gradients_match_central_differences() {
        let samples = [
            gen_dataset(TaskKind::Caption, 1, 1).remove(0),
            gen_dataset(TaskKind::Vqa, 1, 2).remove(0),
            gen_dataset(TaskKind::Textclass, 1, 3).remove(0),
        ];
        let modes = [
            LossMode::Pretrain,
            LossMode::Align { lambda: 0.5 },
            LossMode::Finetune,
            LossMode::Joint {
                params: ChannelParams::new(ChannelFamily::Rayleigh, 6.0, 5),
                lambda: 0.5,
            },
        ];
        let sys = small();
        for s in &samples {
            for mode in modes {
                let mut g = SystemGrads::zeros_like(&sys);
                sample_backward(&sys, s, mode, &mut g).unwrap();

                let mut probe = sys.clone();
                let p0 = flatten(&sys.kan.params());
                let err = grad_check(
                    |p| {
                        load(probe.kan.params_mut(), p);
                        loss_of(&probe, s, mode)
                    },
                    &p0,
                    &flatten(&g.kan.matrices()),
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{mode:?} kan {err}");

                let mut probe = sys.clone();
                let p0 = flatten(&sys.lora.as_ref().unwrap().params());
                let err = grad_check(
                    |p| {
                        load(probe.lora.as_mut().unwrap().params_mut(), p);
                        loss_of(&probe, s, mode)
                    },
                    &p0,
                    &flatten(&g.lora.as_ref().unwrap().matrices()),
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{mode:?} lora {err}");

                // anchors read the frozen embedding table and count as constants
                if let LossMode::Align { .. } = mode {
                    continue;
                }
                let mut probe = sys.clone();
                let p0 = flatten(&sys.model.params());
                let mut gm = g.model.clone();
                let analytic: Vec<f64> = gm.all_mut().iter().flat_map(|m| m.as_slice().to_vec()).collect();
                let err = grad_check(
                    |p| {
                        let mut ms = vec![&mut probe.model.embedding];
                        for l in &mut probe.model.encoder {
                            ms.push(&mut l.weight);
                            ms.push(&mut l.bias);
                        }
                        ms.push(&mut probe.model.head.weight);
                        ms.push(&mut probe.model.head.bias);
                        load(ms, p);
                        loss_of(&probe, s, mode)
                    },
                    &p0,
                    &analytic,
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-5, "{mode:?} model {err}");

                if let LossMode::Joint { .. } = mode {
                    let mut probe = sys.clone();
                    let p0 = flatten(&sys.coder.params());
                    let err = grad_check(
                        |p| {
                            load(probe.coder.params_mut(), p);
                            loss_of(&probe, s, mode)
                        },
                        &p0,
                        &flatten(&g.coder.matrices()),
                        1e-6,
                    )
                    .unwrap();
                    assert!(err < 1e-5, "coder {err}");
                }
            }
        }
    }

    #[test]
    fn none_channel_equals_skipping_transmit() {
        let sys = small();
        let s = gen_dataset(TaskKind::Vqa, 1, 8).remove(0);
        let p = sys.predict(&s, Some(&ChannelParams::noiseless())).unwrap();
        let sem = sys.semantic(&s).unwrap();
        let enc = sys.coder.encode(&sem).unwrap();
        let dec = sys.coder.decode(&enc.symbols, enc.scale).unwrap();
        assert_eq!(p.probs, sys.view().unwrap().decode(&dec).unwrap());
    }
}
