use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::SemanticTensor;
use crate::numerics::{softmax_in_place, Matrix, Rng};
use crate::{error::config, Error, Result};

/// Affine map `x·W + b` applied row-wise; `W` is `in × out`, `b` is `1 × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseLayer {
    pub fn new(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Matrix::gaussian(n_in, n_out, 1.0 / libm::sqrt(n_in as f64), rng),
            bias: Matrix::zeros(1, n_out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl DenseGrads {
    fn zeros_like(l: &DenseLayer) -> Self {
        Self {
            weight: Matrix::zeros(l.in_dim(), l.out_dim()),
            bias: Matrix::zeros(1, l.out_dim()),
        }
    }
}

/// Addresses a linear layer of the semantic model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerId {
    Encoder(usize),
    Head,
}

/// Parameter groups whose weights must not change during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrozenGroups {
    pub embedding: bool,
    pub encoder: bool,
    pub head: bool,
}

impl FrozenGroups {
    pub fn all() -> Self {
        Self {
            embedding: true,
            encoder: true,
            head: true,
        }
    }

    pub fn is_fully_frozen(&self) -> bool {
        self.embedding && self.encoder && self.head
    }
}

/// Small stand-in for the language model: an embedding table, a row-wise
/// `tanh` feed-forward encoder stack and a mean-pool + linear + softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySemanticModel {
    pub embedding: Matrix,
    pub encoder: Vec<DenseLayer>,
    pub head: DenseLayer,
    pub frozen: FrozenGroups,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub embedding: Matrix,
    pub encoder: Vec<DenseGrads>,
    pub head: DenseGrads,
}

impl ModelGrads {
    pub fn zeros_like(m: &ToySemanticModel) -> Self {
        Self {
            embedding: Matrix::zeros(m.embedding.rows(), m.embedding.cols()),
            encoder: m.encoder.iter().map(DenseGrads::zeros_like).collect(),
            head: DenseGrads::zeros_like(&m.head),
        }
    }

    pub fn embedding_mut(&mut self) -> &mut Matrix {
        &mut self.embedding
    }

    pub fn encoder_matrices(&self) -> Vec<&Matrix> {
        self.encoder.iter().flat_map(|g| [&g.weight, &g.bias]).collect()
    }

    pub fn head_matrices(&self) -> Vec<&Matrix> {
        alloc::vec![&self.head.weight, &self.head.bias]
    }

    pub fn all_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = alloc::vec![&mut self.embedding];
        for g in &mut self.encoder {
            v.push(&mut g.weight);
            v.push(&mut g.bias);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }
}

impl ToySemanticModel {
    /// Embeddings `N(0, 1)`, dense weights `N(0, 1/n_in)`, zero biases.
    pub fn new(vocab: usize, dim: usize, encoder_layers: usize, rng: &mut Rng) -> Self {
        Self {
            embedding: Matrix::gaussian(vocab, dim, 1.0, rng),
            encoder: (0..encoder_layers).map(|_| DenseLayer::new(dim, dim, rng)).collect(),
            head: DenseLayer::new(dim, vocab, rng),
            frozen: FrozenGroups::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn layer(&self, id: LayerId) -> Option<&DenseLayer> {
        match id {
            LayerId::Encoder(i) => self.encoder.get(i),
            LayerId::Head => Some(&self.head),
        }
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids: Vec<LayerId> = (0..self.encoder.len()).map(LayerId::Encoder).collect();
        ids.push(LayerId::Head);
        ids
    }

    pub fn embedding_params_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.embedding]
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.encoder
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn head_params_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.head.weight, &mut self.head.bias]
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut v = alloc::vec![&self.embedding];
        for l in &self.encoder {
            v.push(&l.weight);
            v.push(&l.bias);
        }
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    /// One embedding row per token id.
    pub fn embed_text(&self, ids: &[usize]) -> Result<SemanticTensor> {
        let mut out = Matrix::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::Vocabulary(alloc::format!("#{id}")));
            }
            out.row_mut(r).copy_from_slice(self.embedding.row(id));
        }
        Ok(SemanticTensor::from_matrix_unchecked(out))
    }

    pub fn view(&self) -> ModelView<'_> {
        ModelView {
            model: self,
            lora: None,
        }
    }
}

/// Low-rank update `(α/r)·A·B` added to one frozen weight.
///
/// `A` (`down`) is `d × r`, `B` (`up`) is `r × d'`. `B` starts at zero so a
/// fresh adapter leaves the layer unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LayerId,
    pub rank: usize,
    pub down: Matrix,
    pub up: Matrix,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(model: &ToySemanticModel, target: LayerId, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let layer = model
            .layer(target)
            .ok_or_else(|| config("LoRA target layer does not exist"))?;
        let (d, d_out) = (layer.in_dim(), layer.out_dim());
        if rank == 0 || rank > d.min(d_out) {
            return Err(config("LoRA rank must lie in 1..=min(d, d')"));
        }
        Ok(Self {
            target,
            rank,
            down: Matrix::gaussian(d, rank, 1.0 / libm::sqrt(d as f64), rng),
            up: Matrix::zeros(rank, d_out),
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·A·B`, the dense update this adapter represents.
    pub fn delta_weight(&self) -> Result<Matrix> {
        Ok(self.down.matmul(&self.up)?.scaled(self.scale()))
    }
}

/// Adapters for a model, at most one per layer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraGrads {
    pub down: Vec<Matrix>,
    pub up: Vec<Matrix>,
}

impl LoraGrads {
    pub fn zeros_like(set: &LoraSet) -> Self {
        Self {
            down: set
                .adapters
                .iter()
                .map(|a| Matrix::zeros(a.down.rows(), a.down.cols()))
                .collect(),
            up: set
                .adapters
                .iter()
                .map(|a| Matrix::zeros(a.up.rows(), a.up.cols()))
                .collect(),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        self.down.iter().zip(&self.up).flat_map(|(d, u)| [d, u]).collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.down
            .iter_mut()
            .zip(self.up.iter_mut())
            .flat_map(|(d, u)| [d, u])
            .collect()
    }
}

impl LoraSet {
    pub fn single(adapter: LoraAdapter) -> Self {
        Self {
            adapters: alloc::vec![adapter],
        }
    }

    /// One adapter on every encoder layer and on the head.
    pub fn for_all_layers(model: &ToySemanticModel, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let adapters = model
            .layer_ids()
            .into_iter()
            .map(|id| LoraAdapter::new(model, id, rank, alpha, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { adapters })
    }

    pub fn position(&self, id: LayerId) -> Option<usize> {
        self.adapters.iter().position(|a| a.target == id)
    }

    pub fn get(&self, id: LayerId) -> Option<&LoraAdapter> {
        self.position(id).map(|i| &self.adapters[i])
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.adapters.iter_mut().for_each(|a| a.alpha = alpha);
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.adapters.iter().flat_map(|a| [&a.down, &a.up]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.adapters
            .iter_mut()
            .flat_map(|a| [&mut a.down, &mut a.up])
            .collect()
    }

    fn validate(&self, model: &ToySemanticModel) -> Result<()> {
        for (i, a) in self.adapters.iter().enumerate() {
            let layer = model
                .layer(a.target)
                .ok_or_else(|| config("LoRA target layer does not exist"))?;
            if a.rank == 0 || a.rank > layer.in_dim().min(layer.out_dim()) {
                return Err(config("LoRA rank must lie in 1..=min(d, d')"));
            }
            if a.down.shape() != (layer.in_dim(), a.rank) || a.up.shape() != (a.rank, layer.out_dim()) {
                return Err(Error::Shape {
                    op: "apply_lora",
                    left: a.down.shape(),
                    right: a.up.shape(),
                });
            }
            if self.adapters[..i].iter().any(|b| b.target == a.target) {
                return Err(config("two LoRA adapters target the same layer"));
            }
        }
        Ok(())
    }
}

/// Model as seen by forward passes, optionally with LoRA adapters applied.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub model: &'a ToySemanticModel,
    pub lora: Option<&'a LoraSet>,
}

/// Wraps `model` so that forward passes use `W + (α/r)·A·B` on every adapted
/// layer. With `enabled == false` the view is the frozen model itself.
pub fn apply_lora<'a>(model: &'a ToySemanticModel, adapters: &'a LoraSet, enabled: bool) -> Result<ModelView<'a>> {
    adapters.validate(model)?;
    Ok(ModelView {
        model,
        lora: enabled.then_some(adapters),
    })
}

#[derive(Clone, Debug)]
pub struct LinearTrace {
    input: Matrix,
    lora_mid: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    layers: Vec<(LinearTrace, Matrix)>,
}

#[derive(Clone, Debug)]
pub struct DecodeTrace {
    tokens: usize,
    head: LinearTrace,
    pub probs: Vec<f64>,
}

fn linear(layer: &DenseLayer, adapter: Option<&LoraAdapter>, x: &Matrix) -> Result<(Matrix, LinearTrace)> {
    let mut y = x.matmul(&layer.weight)?;
    y.add_row_broadcast(layer.bias.as_slice())?;
    let mut lora_mid = None;
    if let Some(a) = adapter {
        if a.alpha != 0.0 {
            let mid = x.matmul(&a.down)?;
            let delta = mid.matmul(&a.up)?;
            let s = a.scale();
            for (yv, &d) in y.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                let d = s * d;
                // adding an exact zero could still flip -0.0 to +0.0
                if d != 0.0 {
                    *yv += d;
                }
            }
            lora_mid = Some(mid);
        }
    }
    Ok((
        y,
        LinearTrace {
            input: x.clone(),
            lora_mid,
        },
    ))
}

fn linear_backward(
    layer: &DenseLayer,
    adapter: Option<&LoraAdapter>,
    trace: &LinearTrace,
    dy: &Matrix,
    grads: &mut DenseGrads,
    lora: Option<(&mut Matrix, &mut Matrix)>,
) -> Result<Matrix> {
    grads.weight.add_assign(&trace.input.t_matmul(dy)?)?;
    for (b, g) in grads.bias.as_mut_slice().iter_mut().zip(dy.column_sums()) {
        *b += g;
    }
    let mut dx = dy.matmul_t(&layer.weight)?;
    if let (Some(a), Some(mid), Some((gd, gu))) = (adapter, trace.lora_mid.as_ref(), lora) {
        let s = a.scale();
        gu.add_assign(&mid.t_matmul(dy)?.scaled(s))?;
        let dmid = dy.matmul_t(&a.up)?.scaled(s);
        gd.add_assign(&trace.input.t_matmul(&dmid)?)?;
        dx.add_assign(&dmid.matmul_t(&a.down)?)?;
    }
    Ok(dx)
}

impl<'a> ModelView<'a> {
    fn adapter(&self, id: LayerId) -> Option<&'a LoraAdapter> {
        self.lora.and_then(|s| s.get(id))
    }

    fn lora_slot<'g>(&self, id: LayerId, grads: Option<&'g mut LoraGrads>) -> Option<(&'g mut Matrix, &'g mut Matrix)> {
        let idx = self.lora?.position(id)?;
        let g = grads?;
        Some((&mut g.down[idx], &mut g.up[idx]))
    }

    pub fn embed_text(&self, ids: &[usize]) -> Result<SemanticTensor> {
        self.model.embed_text(ids)
    }

    /// Applies the encoder stack to every row.
    pub fn encode(&self, input: &SemanticTensor) -> Result<SemanticTensor> {
        Ok(self.encode_traced(input)?.0)
    }

    pub fn encode_traced(&self, input: &SemanticTensor) -> Result<(SemanticTensor, EncoderTrace)> {
        if input.dim() != self.model.dim() {
            return Err(Error::Shape {
                op: "semantic_encode",
                left: input.values().shape(),
                right: (self.model.dim(), self.model.dim()),
            });
        }
        let mut h = input.values().clone();
        let mut layers = Vec::with_capacity(self.model.encoder.len());
        for (i, layer) in self.model.encoder.iter().enumerate() {
            let (pre, lt) = linear(layer, self.adapter(LayerId::Encoder(i)), &h)?;
            h = pre.map(libm::tanh);
            layers.push((lt, h.clone()));
        }
        Ok((SemanticTensor::new(h)?, EncoderTrace { layers }))
    }

    /// Vision tokens first, then text tokens, through the encoder stack.
    pub fn fuse_and_encode(&self, vision: &SemanticTensor, text: &SemanticTensor) -> Result<SemanticTensor> {
        if vision.dim() != text.dim() {
            return Err(Error::Shape {
                op: "fuse_and_encode",
                left: vision.values().shape(),
                right: text.values().shape(),
            });
        }
        self.encode(&vision.concat(text)?)
    }

    /// Mean-pooled tokens through the head and a softmax.
    pub fn decode(&self, semantic: &SemanticTensor) -> Result<Vec<f64>> {
        Ok(self.decode_traced(semantic)?.0)
    }

    pub fn decode_traced(&self, semantic: &SemanticTensor) -> Result<(Vec<f64>, DecodeTrace)> {
        if semantic.tokens() == 0 {
            return Err(Error::EmptyInput("decode needs at least one token"));
        }
        if semantic.dim() != self.model.head.in_dim() {
            return Err(Error::Shape {
                op: "decode",
                left: semantic.values().shape(),
                right: self.model.head.weight.shape(),
            });
        }
        let t = semantic.tokens() as f64;
        let pooled: Vec<f64> = semantic.values().column_sums().iter().map(|v| v / t).collect();
        let (logits, head) = linear(&self.model.head, self.adapter(LayerId::Head), &Matrix::row_vector(&pooled))?;
        let mut probs = logits.into_vec();
        softmax_in_place(&mut probs);
        Ok((
            probs.clone(),
            DecodeTrace {
                tokens: semantic.tokens(),
                head,
                probs,
            },
        ))
    }

    /// Backpropagates `∂L/∂logits` through the head and mean-pool; returns `∂L/∂semantic`.
    pub fn decode_backward(
        &self,
        trace: &DecodeTrace,
        dlogits: &[f64],
        grads: &mut ModelGrads,
        lora: Option<&mut LoraGrads>,
    ) -> Result<Matrix> {
        let dy = Matrix::row_vector(dlogits);
        let slot = self.lora_slot(LayerId::Head, lora);
        let dpooled = linear_backward(
            &self.model.head,
            self.adapter(LayerId::Head),
            &trace.head,
            &dy,
            &mut grads.head,
            slot,
        )?;
        let mut out = Matrix::zeros(trace.tokens, dpooled.cols());
        let inv = 1.0 / trace.tokens as f64;
        for r in 0..trace.tokens {
            for (o, g) in out.row_mut(r).iter_mut().zip(dpooled.as_slice()) {
                *o = g * inv;
            }
        }
        Ok(out)
    }

    /// Backpropagates `∂L/∂output` through the encoder stack; returns `∂L/∂input`.
    pub fn encode_backward(
        &self,
        trace: &EncoderTrace,
        doutput: &Matrix,
        grads: &mut ModelGrads,
        mut lora: Option<&mut LoraGrads>,
    ) -> Result<Matrix> {
        if trace.layers.len() != self.model.encoder.len() {
            return Err(Error::State("encoder trace does not match the model"));
        }
        let mut g = doutput.clone();
        for (i, (lt, out)) in trace.layers.iter().enumerate().rev() {
            let mut dpre = g;
            for (d, &h) in dpre.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= 1.0 - h * h;
            }
            let slot = self.lora_slot(LayerId::Encoder(i), lora.as_deref_mut());
            g = linear_backward(
                &self.model.encoder[i],
                self.adapter(LayerId::Encoder(i)),
                lt,
                &dpre,
                &mut grads.encoder[i],
                slot,
            )?;
        }
        Ok(g)
    }
}

/// Answer distribution for `semantic` under `view`.
pub fn decode(view: &ModelView<'_>, semantic: &SemanticTensor) -> Result<Vec<f64>> {
    view.decode(semantic)
}

/// Cross-entropy `-ln p[answer]` and its gradient with respect to the logits.
pub fn cross_entropy(probs: &[f64], answer: usize) -> (f64, Vec<f64>) {
    let loss = -libm::log(probs[answer].max(1e-300));
    let mut d = probs.to_vec();
    d[answer] -= 1.0;
    (loss, d)
}
