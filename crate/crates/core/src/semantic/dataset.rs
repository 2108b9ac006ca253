use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use super::model::ToySemanticModel;
use super::scene::{ToyScene, MAX_OBJECTS};
use super::tensor::SemanticTensor;
use super::vocab::{token_id, tokenize, ADVERBS, COUNTS, LABELS, NEGATIVE_WORDS, NOUNS, POSITIVE_WORDS};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::{error::config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Caption,
    Vqa,
    Textclass,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Caption, TaskKind::Vqa, TaskKind::Textclass];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption",
            TaskKind::Vqa => "vqa",
            TaskKind::Textclass => "textclass",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            TaskKind::Caption => "caption the image",
            TaskKind::Vqa => "what is in the image",
            TaskKind::Textclass => "classify sentiment",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| config(format!("unknown task {s:?}")))
    }
}

/// One Instruction / Input / Output / Metadata training record.
///
/// The model's text input is the instruction followed by `input_text`; the
/// answer is the first word of `output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstruction {
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_image: Option<ToyScene>,
    pub input_text: String,
    pub output: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl TaskInstruction {
    pub fn validate(&self) -> Result<()> {
        if self.instruction.trim().is_empty() {
            return Err(config("instruction must not be empty"));
        }
        if self.output.trim().is_empty() {
            return Err(config("output must not be empty"));
        }
        if let Some(scene) = &self.input_image {
            scene.validate()?;
        }
        Ok(())
    }

    pub fn task(&self) -> Option<TaskKind> {
        self.metadata.get("task").and_then(|t| t.parse().ok())
    }

    pub fn answer_word(&self) -> Result<&str> {
        self.output
            .split_whitespace()
            .next()
            .ok_or(Error::EmptyInput("output has no answer token"))
    }

    pub fn answer_token(&self) -> Result<usize> {
        token_id(self.answer_word()?)
    }

    pub fn text_tokens(&self) -> Result<Vec<usize>> {
        let mut ids = tokenize(&self.instruction)?;
        ids.extend(tokenize(&self.input_text)?);
        Ok(ids)
    }
}

/// `n` samples of `task`, fully determined by `(task, n, seed)`.
pub fn gen_dataset(task: TaskKind, n: usize, seed: u64) -> Vec<TaskInstruction> {
    (0..n)
        .map(|i| {
            let s = derive_seed(seed, i as u64);
            match task {
                TaskKind::Caption => caption_sample(s),
                TaskKind::Vqa => vqa_sample(s),
                TaskKind::Textclass => textclass_sample(s),
            }
        })
        .collect()
}

/// Equal share of each task, interleaved caption, vqa, textclass.
pub fn gen_mixed(n: usize, seed: u64) -> Vec<TaskInstruction> {
    let per = n.div_ceil(3);
    let sets: Vec<Vec<TaskInstruction>> = TaskKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &t)| gen_dataset(t, per, derive_seed(seed, 1000 + k as u64)))
        .collect();
    let mut out = Vec::with_capacity(n);
    'outer: for i in 0..per {
        for set in &sets {
            if out.len() == n {
                break 'outer;
            }
            out.push(set[i].clone());
        }
    }
    out
}

fn meta(task: TaskKind, extra: &[(&str, String)]) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("task".to_string(), task.as_str().to_string());
    for (k, v) in extra {
        m.insert(k.to_string(), v.clone());
    }
    m
}

fn describe(scene: &ToyScene) -> String {
    let parts: Vec<String> = scene
        .objects
        .iter()
        .map(|o| format!("{} {} {}", o.size_word(), o.color_word(), o.shape_word()))
        .collect();
    parts.join(" ")
}

fn caption_sample(seed: u64) -> TaskInstruction {
    // resample until one shape is strictly most frequent
    let mut attempt = 0u64;
    let (scene, shape) = loop {
        let scene = ToyScene::random(derive_seed(seed, attempt));
        if let Some(s) = scene.plurality_shape() {
            break (scene, s);
        }
        attempt += 1;
    };
    let shape_word = super::vocab::SHAPES[shape as usize];
    TaskInstruction {
        instruction: TaskKind::Caption.instruction().to_string(),
        output: format!("{shape_word} {}", describe(&scene)),
        input_text: String::new(),
        metadata: meta(
            TaskKind::Caption,
            &[("objects", scene.objects.len().to_string())],
        ),
        input_image: Some(scene),
    }
}

fn vqa_sample(seed: u64) -> TaskInstruction {
    let mut rng = Rng::new(seed);
    let kind = rng.below(4);
    let (scene, question, answer) = if kind == 0 {
        let n = 1 + rng.below(MAX_OBJECTS);
        let scene = ToyScene::random_with_count(n, &mut rng, seed);
        let answer = scene.count_word();
        (scene, "how many objects", answer)
    } else {
        let scene = ToyScene::random_with_count(1, &mut rng, seed);
        let o = &scene.objects[0];
        let (q, a) = match kind {
            1 => ("what color is the object", o.color_word()),
            2 => ("what shape is the object", o.shape_word()),
            _ => ("what size is the object", o.size_word()),
        };
        (scene, q, a)
    };
    let qtype = ["count", "color", "shape", "size"][kind];
    TaskInstruction {
        instruction: TaskKind::Vqa.instruction().to_string(),
        input_text: question.to_string(),
        output: answer.to_string(),
        metadata: meta(TaskKind::Vqa, &[("question", qtype.to_string())]),
        input_image: Some(scene),
    }
}

fn textclass_sample(seed: u64) -> TaskInstruction {
    let mut rng = Rng::new(seed);
    let positive = rng.bernoulli(0.5);
    let words: &[&str] = if positive { &POSITIVE_WORDS } else { &NEGATIVE_WORDS };
    let adj = |rng: &mut Rng| words[rng.below(words.len())];
    let noun = NOUNS[rng.below(NOUNS.len())];
    let text = match rng.below(3) {
        0 => {
            let adv = ADVERBS[rng.below(ADVERBS.len())];
            format!("this {noun} was {adv} {}", adj(&mut rng))
        }
        1 => format!("a {} {noun}", adj(&mut rng)),
        _ => {
            let a = adj(&mut rng);
            let b = adj(&mut rng);
            format!("the {noun} was {a} and {b}")
        }
    };
    let label = if positive { LABELS[0] } else { LABELS[1] };
    TaskInstruction {
        instruction: TaskKind::Textclass.instruction().to_string(),
        input_image: None,
        input_text: text,
        output: label.to_string(),
        metadata: meta(TaskKind::Textclass, &[]),
    }
}

/// Text-space stand-in for a scene, used as the projector's target: each
/// object maps to the mean embedding of its size, color and shape words and
/// the global token maps to the embedding of the count word.
///
/// Row order matches the vision featurizer (objects, then global).
pub fn scene_anchors(model: &ToySemanticModel, scene: &ToyScene) -> Result<SemanticTensor> {
    scene.validate()?;
    let d = model.dim();
    let mut out = Matrix::zeros(scene.objects.len() + 1, d);
    for (r, ids) in anchor_words(scene)?.iter().enumerate() {
        let w = 1.0 / ids.len() as f64;
        let row = out.row_mut(r);
        for &id in ids {
            for (o, e) in row.iter_mut().zip(model.embedding.row(id)) {
                *o += w * e;
            }
        }
    }
    SemanticTensor::new(out)
}

/// Word ids averaged into each anchor row of [`scene_anchors`].
pub fn anchor_words(scene: &ToyScene) -> Result<Vec<Vec<usize>>> {
    let mut rows = Vec::with_capacity(scene.objects.len() + 1);
    for o in &scene.objects {
        rows.push(vec![
            token_id(o.size_word())?,
            token_id(o.color_word())?,
            token_id(o.shape_word())?,
        ]);
    }
    rows.push(vec![token_id(COUNTS[scene.objects.len() - 1])?]);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::vocab::VOCAB_SIZE;

    #[test]
    fn generation_is_deterministic() {
        for t in TaskKind::ALL {
            assert_eq!(gen_dataset(t, 5, 42), gen_dataset(t, 5, 42));
            assert_ne!(gen_dataset(t, 5, 42), gen_dataset(t, 5, 43));
        }
    }

    #[test]
    fn count_question_on_three_objects() {
        let s = gen_dataset(TaskKind::Vqa, 400, 7)
            .into_iter()
            .find(|s| s.input_text == "how many objects" && s.input_image.as_ref().unwrap().objects.len() == 3)
            .unwrap();
        assert_eq!(s.output, "3");
    }

    #[test]
    fn textclass_labels_are_balanced() {
        let data = gen_dataset(TaskKind::Textclass, 1000, 3);
        let pos = data.iter().filter(|s| s.output == "positive").count();
        assert!((450..=550).contains(&pos), "{pos}");
        assert!(data.iter().all(|s| s.input_image.is_none()));
    }

    #[test]
    fn every_sample_is_well_formed() {
        for t in TaskKind::ALL {
            for s in gen_dataset(t, 200, 11) {
                s.validate().unwrap();
                assert_eq!(s.task(), Some(t));
                assert_eq!(s.instruction, t.instruction());
                s.text_tokens().unwrap();
                assert!(s.answer_token().unwrap() < VOCAB_SIZE);
                tokenize(&s.output).unwrap();
            }
        }
    }

    #[test]
    fn caption_answer_is_plurality_and_lists_objects() {
        for s in gen_dataset(TaskKind::Caption, 100, 5) {
            let scene = s.input_image.as_ref().unwrap();
            let words: Vec<&str> = s.output.split_whitespace().collect();
            assert_eq!(words.len(), 1 + 3 * scene.objects.len());
            let shape = scene.plurality_shape().unwrap();
            assert_eq!(words[0], super::super::vocab::SHAPES[shape as usize]);
        }
    }

    #[test]
    fn attribute_questions_use_single_object_scenes() {
        for s in gen_dataset(TaskKind::Vqa, 200, 9) {
            let scene = s.input_image.as_ref().unwrap();
            if s.input_text.starts_with("what") {
                assert_eq!(scene.objects.len(), 1);
                let o = &scene.objects[0];
                assert!([o.color_word(), o.shape_word(), o.size_word()].contains(&s.output.as_str()));
            }
        }
    }

    #[test]
    fn mixed_corpus_interleaves_tasks() {
        let data = gen_mixed(10, 1);
        assert_eq!(data.len(), 10);
        assert_eq!(data[0].task(), Some(TaskKind::Caption));
        assert_eq!(data[1].task(), Some(TaskKind::Vqa));
        assert_eq!(data[2].task(), Some(TaskKind::Textclass));
    }

    #[test]
    fn anchors_average_word_embeddings() {
        let model = ToySemanticModel::new(VOCAB_SIZE, 4, 2, &mut Rng::new(0));
        let scene = ToyScene::random_with_count(2, &mut Rng::new(3), 0);
        let a = scene_anchors(&model, &scene).unwrap();
        assert_eq!(a.tokens(), 3);
        let o = &scene.objects[1];
        let ids = [o.size_word(), o.color_word(), o.shape_word()].map(|w| token_id(w).unwrap());
        for j in 0..4 {
            let mean = ids.iter().map(|&i| model.embedding.get(i, j)).sum::<f64>() / 3.0;
            assert!((a.row(1)[j] - mean).abs() < 1e-15);
        }
        assert_eq!(a.row(2), model.embedding.row(token_id("2").unwrap()));
    }

    #[test]
    fn task_names_parse() {
        for t in TaskKind::ALL {
            assert_eq!(t.as_str().parse::<TaskKind>().unwrap(), t);
        }
        assert!("summary".parse::<TaskKind>().is_err());
    }
}
