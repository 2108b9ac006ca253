//! `M4CK` checkpoint blob, little-endian like the `KAN1` format it embeds.
//!
//! ```text
//! "M4CK" | version u32
//! dim, channel_dim, feature_dim, kan_hidden, encoder_layers   u32 × 5
//! spline order, intervals u32 × 2 | grid min, max f64 × 2 | seed u64
//! stage bits u8 (pretrained, aligned, finetuned, joint) | frozen bits u8 (embedding, encoder, head)
//! vision projection seed u64
//! KAN1 blob
//! matrices: embedding, encoder (weight, bias) × layers, head weight, head bias
//! adapter count u32 (0 = none); per adapter: target u8 (0 encoder, 1 head), layer u32,
//!   rank u32, alpha f64, down matrix, up matrix
//! coder matrices: enc weight, enc bias, dec weight, dec bias
//! CRC-32 of all preceding bytes
//! ```
//!
//! A matrix is `rows u32 | cols u32 | f64 × rows·cols`.

use alloc::format;
use alloc::vec::Vec;

use super::config::SystemConfig;
use super::system::{M4scSystem, Stages};
use crate::channel::ChannelCoder;
use crate::kan::{put_f64, put_u32, KanNetwork, Reader, SplineConfig};
use crate::numerics::Matrix;
use crate::semantic::{DenseLayer, FrozenGroups, LayerId, LoraAdapter, LoraSet, ToySemanticModel, VisionEncoder};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M4CK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows() as u32);
    put_u32(out, m.cols() as u32);
    for &v in m.as_slice() {
        put_f64(out, v);
    }
}

fn read_matrix(r: &mut Reader<'_>, remaining: usize) -> Result<Matrix> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.saturating_mul(8) <= remaining)
        .ok_or_else(|| Error::Decode("matrix larger than checkpoint".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64()?);
    }
    Matrix::from_vec(rows, cols, data)
}

fn bits(flags: &[bool]) -> u8 {
    flags.iter().enumerate().fold(0, |acc, (i, &b)| acc | ((b as u8) << i))
}

impl M4scSystem {
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let c = &self.config;
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        for v in [c.dim, c.channel_dim, c.feature_dim, c.kan_hidden, c.encoder_layers] {
            put_u32(&mut out, v as u32);
        }
        put_u32(&mut out, c.spline.order as u32);
        put_u32(&mut out, c.spline.intervals as u32);
        put_f64(&mut out, c.spline.grid_min);
        put_f64(&mut out, c.spline.grid_max);
        put_u64(&mut out, c.seed);
        let s = self.stages;
        out.push(bits(&[s.pretrained, s.aligned, s.finetuned, s.joint]));
        let f = self.model.frozen;
        out.push(bits(&[f.embedding, f.encoder, f.head]));
        put_u64(&mut out, self.vision.seed());
        self.kan.write_bytes(&mut out);
        for m in self.model.params() {
            put_matrix(&mut out, m);
        }
        let adapters = self.lora.as_ref().map_or(&[][..], |l| &l.adapters[..]);
        put_u32(&mut out, adapters.len() as u32);
        for a in adapters {
            let (kind, idx) = match a.target {
                LayerId::Encoder(i) => (0u8, i as u32),
                LayerId::Head => (1, 0),
            };
            out.push(kind);
            put_u32(&mut out, idx);
            put_u32(&mut out, a.rank as u32);
            put_f64(&mut out, a.alpha);
            put_matrix(&mut out, &a.down);
            put_matrix(&mut out, &a.up);
        }
        for m in self.coder.params() {
            put_matrix(&mut out, m);
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Decode("checkpoint too short".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Decode("checkpoint checksum mismatch".into()));
        }
        let total = body.len();
        let mut r = Reader::new(body);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Decode("missing M4CK magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let spline = SplineConfig {
            order: r.u32()? as usize,
            intervals: r.u32()? as usize,
            grid_min: r.f64()?,
            grid_max: r.f64()?,
        };
        let config = SystemConfig {
            dim: dims[0],
            channel_dim: dims[1],
            feature_dim: dims[2],
            kan_hidden: dims[3],
            encoder_layers: dims[4],
            spline,
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Decode(format!("bad system config: {e}")))?;
        let sb = r.u8()?;
        let stages = Stages {
            pretrained: sb & 1 != 0,
            aligned: sb & 2 != 0,
            finetuned: sb & 4 != 0,
            joint: sb & 8 != 0,
        };
        let fb = r.u8()?;
        let frozen = FrozenGroups {
            embedding: fb & 1 != 0,
            encoder: fb & 2 != 0,
            head: fb & 4 != 0,
        };
        let vision = VisionEncoder::new(config.feature_dim, r.u64()?);
        let kan = KanNetwork::read_bytes(&mut r)?;
        if kan.input_dim() != config.feature_dim || kan.output_dim() != config.dim {
            return Err(Error::Decode("projector does not match the system dimensions".into()));
        }
        let next = |r: &mut Reader<'_>| read_matrix(r, total - r.position());
        let embedding = next(&mut r)?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for _ in 0..config.encoder_layers {
            let weight = next(&mut r)?;
            let bias = next(&mut r)?;
            encoder.push(DenseLayer { weight, bias });
        }
        let head = DenseLayer {
            weight: next(&mut r)?,
            bias: next(&mut r)?,
        };
        let model = ToySemanticModel {
            embedding,
            encoder,
            head,
            frozen,
        };
        check_model(&model, &config)?;
        let count = r.u32()? as usize;
        let mut adapters = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let target = match r.u8()? {
                0 => LayerId::Encoder(r.u32()? as usize),
                1 => {
                    r.u32()?;
                    LayerId::Head
                }
                k => return Err(Error::Decode(format!("unknown adapter target {k}"))),
            };
            let rank = r.u32()? as usize;
            let alpha = r.f64()?;
            let down = next(&mut r)?;
            let up = next(&mut r)?;
            adapters.push(LoraAdapter {
                target,
                rank,
                down,
                up,
                alpha,
            });
        }
        let lora = if count == 0 {
            None
        } else {
            let set = LoraSet { adapters };
            crate::semantic::apply_lora(&model, &set, true).map_err(|e| Error::Decode(format!("bad adapters: {e}")))?;
            Some(set)
        };
        let coder = ChannelCoder {
            enc_weight: next(&mut r)?,
            enc_bias: next(&mut r)?,
            dec_weight: next(&mut r)?,
            dec_bias: next(&mut r)?,
        };
        if coder.enc_weight.shape() != (config.dim, config.channel_dim)
            || coder.enc_bias.shape() != (1, config.channel_dim)
            || coder.dec_weight.shape() != (config.channel_dim, config.dim)
            || coder.dec_bias.shape() != (1, config.dim)
        {
            return Err(Error::Decode("channel coder does not match the system dimensions".into()));
        }
        r.finish()?;
        Ok(Self {
            config,
            vision,
            kan,
            model,
            lora,
            coder,
            stages,
        })
    }
}

fn check_model(m: &ToySemanticModel, c: &SystemConfig) -> Result<()> {
    let d = c.dim;
    let ok = m.embedding.cols() == d
        && m.embedding.rows() == crate::semantic::VOCAB_SIZE
        && m.encoder
            .iter()
            .all(|l| l.weight.shape() == (d, d) && l.bias.shape() == (1, d))
        && m.head.weight.shape() == (d, m.embedding.rows())
        && m.head.bias.shape() == (1, m.embedding.rows());
    if ok {
        Ok(())
    } else {
        Err(Error::Decode("semantic model does not match the system dimensions".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::config::LoraConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut sys = M4scSystem::new(SystemConfig {
            dim: 8,
            channel_dim: 4,
            feature_dim: 5,
            kan_hidden: 3,
            ..SystemConfig::default()
        })
        .unwrap();
        let bytes = sys.to_checkpoint();
        assert_eq!(M4scSystem::from_checkpoint(&bytes).unwrap(), sys);

        sys.ensure_lora(&LoraConfig::default()).unwrap();
        sys.stages.aligned = true;
        sys.model.frozen = FrozenGroups::all();
        let bytes = sys.to_checkpoint();
        let back = M4scSystem::from_checkpoint(&bytes).unwrap();
        assert_eq!(back, sys);
        assert_eq!(back.to_checkpoint(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let sys = M4scSystem::new(SystemConfig {
            dim: 4,
            channel_dim: 2,
            feature_dim: 3,
            kan_hidden: 2,
            ..SystemConfig::default()
        })
        .unwrap();
        let bytes = sys.to_checkpoint();
        for i in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(M4scSystem::from_checkpoint(&bad).is_err());
        }
        assert!(M4scSystem::from_checkpoint(&bytes[..10]).is_err());
    }
}
