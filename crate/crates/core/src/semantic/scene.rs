use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tensor::SemanticTensor;
use super::vocab::{COLORS, COUNTS, SHAPES, SIZES};
use crate::numerics::{Matrix, Rng};
use crate::{error::config, Result};

pub const MAX_OBJECTS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: u8,
    pub color: u8,
    pub size: u8,
    pub position: [f64; 2],
}

impl SceneObject {
    pub fn random(rng: &mut Rng) -> Self {
        Self {
            shape: rng.below(SHAPES.len()) as u8,
            color: rng.below(COLORS.len()) as u8,
            size: rng.below(SIZES.len()) as u8,
            position: [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)],
        }
    }

    pub fn shape_word(&self) -> &'static str {
        SHAPES[self.shape as usize]
    }

    pub fn color_word(&self) -> &'static str {
        COLORS[self.color as usize]
    }

    pub fn size_word(&self) -> &'static str {
        SIZES[self.size as usize]
    }
}

/// Structured synthetic scene standing in for an image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyScene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl ToyScene {
    /// 1 to 6 objects with uniform attributes and positions in [-1, 1]².
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = 1 + rng.below(MAX_OBJECTS);
        Self::random_with_count(n, &mut rng, seed)
    }

    pub fn random_with_count(n: usize, rng: &mut Rng, seed: u64) -> Self {
        Self {
            objects: (0..n).map(|_| SceneObject::random(rng)).collect(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(config("scene must hold between 1 and 6 objects"));
        }
        for o in &self.objects {
            if o.shape as usize >= SHAPES.len()
                || o.color as usize >= COLORS.len()
                || o.size as usize >= SIZES.len()
            {
                return Err(config("scene object attribute outside the vocabulary"));
            }
            if !o.position.iter().all(|p| p.is_finite()) {
                return Err(config("scene object position is not finite"));
            }
        }
        Ok(())
    }

    pub fn count_word(&self) -> &'static str {
        COUNTS[self.objects.len() - 1]
    }

    /// Shape id held by strictly more objects than any other, if one exists.
    pub fn plurality_shape(&self) -> Option<u8> {
        let mut counts = [0usize; SHAPES.len()];
        for o in &self.objects {
            counts[o.shape as usize] += 1;
        }
        let max = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == max);
        let (best, _) = winners.next()?;
        if winners.next().is_some() {
            None
        } else {
            Some(best as u8)
        }
    }
}

// raw token layout: shape | color | size | position | count | global flag
const SHAPE_OFF: usize = 0;
const COLOR_OFF: usize = SHAPE_OFF + SHAPES.len();
const SIZE_OFF: usize = COLOR_OFF + COLORS.len();
const POS_OFF: usize = SIZE_OFF + SIZES.len();
const COUNT_OFF: usize = POS_OFF + 2;
const GLOBAL_OFF: usize = COUNT_OFF + COUNTS.len();
pub const RAW_FEATURES: usize = GLOBAL_OFF + 1;

/// Fixed (never trained) scene featurizer.
///
/// Each object becomes a one-hot attribute vector plus its position; the final
/// global token carries the object count and the mean position. Raw vectors
/// are multiplied by a seeded Gaussian projection with entries `N(0, 1/3)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoder {
    projection: Matrix,
    seed: u64,
}

impl VisionEncoder {
    pub fn new(feature_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        Self {
            projection: Matrix::gaussian(RAW_FEATURES, feature_dim, 1.0 / libm::sqrt(3.0), &mut rng),
            seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn raw(scene: &ToyScene) -> Matrix {
        let n = scene.objects.len();
        let mut raw = Matrix::zeros(n + 1, RAW_FEATURES);
        let mut mean = [0.0; 2];
        for (i, o) in scene.objects.iter().enumerate() {
            let r = raw.row_mut(i);
            r[SHAPE_OFF + o.shape as usize] = 1.0;
            r[COLOR_OFF + o.color as usize] = 1.0;
            r[SIZE_OFF + o.size as usize] = 1.0;
            r[POS_OFF] = o.position[0];
            r[POS_OFF + 1] = o.position[1];
            mean[0] += o.position[0] / n as f64;
            mean[1] += o.position[1] / n as f64;
        }
        let g = raw.row_mut(n);
        g[POS_OFF] = mean[0];
        g[POS_OFF + 1] = mean[1];
        g[COUNT_OFF + n - 1] = 1.0;
        g[GLOBAL_OFF] = 1.0;
        raw
    }

    /// One token per object, then one global token.
    pub fn encode(&self, scene: &ToyScene) -> Result<SemanticTensor> {
        scene.validate()?;
        SemanticTensor::new(Self::raw(scene).matmul(&self.projection)?)
    }
}

pub fn vision_encode(encoder: &VisionEncoder, scene: &ToyScene) -> Result<SemanticTensor> {
    encoder.encode(scene)
}
