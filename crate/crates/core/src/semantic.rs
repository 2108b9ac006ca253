//! Toy stand-ins for the multimodal language model: a fixed vision
//! featurizer, a small trainable encoder/decoder, LoRA adapters and a
//! synthetic instruction dataset over a closed vocabulary.

mod dataset;
mod model;
mod scene;
mod tensor;
pub mod vocab;

pub use dataset::{anchor_words, gen_dataset, gen_mixed, scene_anchors, TaskInstruction, TaskKind};
pub use model::{
    apply_lora, cross_entropy, decode, DecodeTrace, DenseGrads, DenseLayer, EncoderTrace, FrozenGroups, LayerId,
    LinearTrace, LoraAdapter, LoraGrads, LoraSet, ModelGrads, ModelView, ToySemanticModel,
};
pub use scene::{vision_encode, SceneObject, ToyScene, VisionEncoder, MAX_OBJECTS, RAW_FEATURES};
pub use tensor::SemanticTensor;
pub use vocab::{token_id, token_str, tokenize, VOCAB, VOCAB_SIZE};
