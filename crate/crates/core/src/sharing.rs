//! Multi-user shared transmission: token comparison, public/private
//! partitioning, frame encoding, broadcast transmission and reconstruction.
//!
//! # Frame layout
//!
//! Little-endian throughout, symbols and scales as `f32`:
//!
//! ```text
//! "M4SC"                          magic
//! version                         u8
//! num_users                       u16
//! D_ch                            u16
//! group_count                     u32
//! public scale                    f32
//! public block                    f32 × group_count·D_ch
//! per user:
//!   token_count                   u32
//!   scale                         f32
//!   index map, one per token      u32 token index, u8 kind (0 public, 1 private), u32 slot
//!   private block                 f32 × private_count·D_ch
//! CRC-32 of all preceding bytes   u32
//! ```
//!
//! Everything except the two symbol blocks is side information.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::channel::{transmit, ChannelCoder, ChannelParams};
use crate::kan::{put_u32, Reader};
use crate::numerics::{dot, Matrix};
use crate::semantic::SemanticTensor;
use crate::{error::config, Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"M4SC";
pub const FRAME_VERSION: u8 = 1;
/// Bytes in the fixed header, including the public scale.
pub const HEADER_BYTES: usize = 4 + 1 + 2 + 2 + 4 + 4;
/// Bytes per index-map entry.
pub const ENTRY_BYTES: usize = 4 + 1 + 4;
const USER_HEADER_BYTES: usize = 4 + 4;
const CRC_BYTES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparatorConfig {
    pub cosine_threshold: f64,
    pub mean_tol: f64,
    pub var_tol: f64,
}

impl Default for ComparatorConfig {
    fn default() -> Self {
        Self {
            cosine_threshold: 0.9,
            mean_tol: 0.1,
            var_tol: 0.1,
        }
    }
}

impl ComparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cosine_threshold > 0.0 && self.cosine_threshold <= 1.0) {
            return Err(config("cosine threshold must lie in (0, 1]"));
        }
        if !(self.mean_tol >= 0.0 && self.var_tol >= 0.0) {
            return Err(config("statistics tolerances must be non-negative"));
        }
        Ok(())
    }

    /// Cosine and mean/variance gate between a token and a group centroid.
    pub fn matches(&self, token: &[f64], centroid: &[f64]) -> bool {
        let (m1, v1) = mean_var(token);
        let (m2, v2) = mean_var(centroid);
        cosine(token, centroid) >= self.cosine_threshold
            && (m1 - m2).abs() <= self.mean_tol
            && (v1 - v2).abs() <= self.var_tol
    }
}

/// Cosine similarity; two zero vectors count as identical, one zero vector as orthogonal.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot(a, b) / (na * nb)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicGroup {
    /// `(user, token index)` pairs in insertion order.
    pub members: Vec<(usize, usize)>,
    pub centroid: Vec<f64>,
}

impl PublicGroup {
    pub fn distinct_users(&self) -> usize {
        self.members.iter().map(|m| m.0).collect::<BTreeSet<_>>().len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub dim: usize,
    pub token_counts: Vec<usize>,
    pub public_groups: Vec<PublicGroup>,
    /// Per user, `(token index, vector)` in ascending token order.
    pub private: Vec<Vec<(usize, Vec<f64>)>>,
}

impl Partition {
    pub fn users(&self) -> usize {
        self.token_counts.len()
    }

    pub fn public_tokens(&self) -> usize {
        self.public_groups.iter().map(|g| g.members.len()).sum()
    }

    pub fn private_tokens(&self) -> usize {
        self.private.iter().map(Vec::len).sum()
    }
}

struct Candidate {
    members: Vec<(usize, usize)>,
    sum: Vec<f64>,
    centroid: Vec<f64>,
}

/// Greedy first-fit clustering of all users' tokens, visited user by user
/// and token by token. Groups that end up spanning two or more users become
/// public with the element-wise mean as centroid; every other token stays private.
pub fn compare_and_partition(tensors: &[SemanticTensor], cfg: &ComparatorConfig) -> Result<Partition> {
    cfg.validate()?;
    let first = tensors.first().ok_or(Error::EmptyInput("no users to compare"))?;
    let dim = first.dim();
    for t in tensors {
        if t.dim() != dim {
            return Err(Error::Shape {
                op: "compare_and_partition",
                left: first.values().shape(),
                right: t.values().shape(),
            });
        }
    }
    let mut candidates: Vec<Candidate> = Vec::new();
    for (u, tensor) in tensors.iter().enumerate() {
        for t in 0..tensor.tokens() {
            let v = tensor.row(t);
            match candidates.iter_mut().find(|c| cfg.matches(v, &c.centroid)) {
                Some(c) => {
                    c.members.push((u, t));
                    let n = c.members.len() as f64;
                    for ((s, x), m) in c.sum.iter_mut().zip(v).zip(c.centroid.iter_mut()) {
                        *s += x;
                        *m = *s / n;
                    }
                }
                None => candidates.push(Candidate {
                    members: vec![(u, t)],
                    sum: v.to_vec(),
                    centroid: v.to_vec(),
                }),
            }
        }
    }
    let mut public_groups = Vec::new();
    let mut private: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); tensors.len()];
    for c in candidates {
        let group = PublicGroup {
            members: c.members,
            centroid: c.centroid,
        };
        if group.distinct_users() >= 2 {
            public_groups.push(group);
        } else {
            for &(u, t) in &group.members {
                private[u].push((t, tensors[u].row(t).to_vec()));
            }
        }
    }
    for p in &mut private {
        p.sort_by_key(|e| e.0);
    }
    Ok(Partition {
        dim,
        token_counts: tensors.iter().map(SemanticTensor::tokens).collect(),
        public_groups,
        private,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotKind {
    Public = 0,
    Private = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub token: u32,
    pub kind: SlotKind,
    pub slot: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserBlock {
    pub token_count: u32,
    pub scale: f64,
    pub index: Vec<IndexEntry>,
    /// `private_count × D_ch`.
    pub symbols: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub version: u8,
    pub channel_dim: usize,
    pub public_scale: f64,
    /// `group_count × D_ch`.
    pub public: Matrix,
    pub users: Vec<UserBlock>,
}

fn quantize(m: Matrix) -> Matrix {
    m.map(|v| v as f32 as f64)
}

fn encode_block(coder: &ChannelCoder, rows: Vec<&[f64]>, dim: usize) -> Result<(Matrix, f64)> {
    let mut m = Matrix::zeros(0, dim);
    for r in rows {
        m.push_row(r)?;
    }
    let enc = coder.encode(&SemanticTensor::new(m)?)?;
    Ok((quantize(enc.symbols), enc.scale as f32 as f64))
}

/// Channel-encodes the public centroids once and each user's private tokens
/// separately. Symbols and scales are rounded to `f32` wire precision.
pub fn build_frame(partition: &Partition, coder: &ChannelCoder) -> Result<Frame> {
    if partition.dim != coder.dim() {
        return Err(Error::Shape {
            op: "build_frame",
            left: (0, partition.dim),
            right: coder.enc_weight.shape(),
        });
    }
    if partition.users() > u16::MAX as usize || coder.channel_dim() > u16::MAX as usize {
        return Err(config("frame header fields overflow u16"));
    }
    let (public, public_scale) = encode_block(
        coder,
        partition.public_groups.iter().map(|g| g.centroid.as_slice()).collect(),
        partition.dim,
    )?;
    let mut users = Vec::with_capacity(partition.users());
    for (u, &count) in partition.token_counts.iter().enumerate() {
        let mut index = vec![None; count];
        for (gid, g) in partition.public_groups.iter().enumerate() {
            for &(mu, t) in &g.members {
                if mu == u {
                    index[t] = Some((SlotKind::Public, gid));
                }
            }
        }
        for (slot, (t, _)) in partition.private[u].iter().enumerate() {
            index[*t] = Some((SlotKind::Private, slot));
        }
        let index = index
            .into_iter()
            .enumerate()
            .map(|(t, e)| {
                let (kind, slot) = e.ok_or(Error::State("partition does not cover every token"))?;
                Ok(IndexEntry {
                    token: t as u32,
                    kind,
                    slot: slot as u32,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (symbols, scale) = encode_block(
            coder,
            partition.private[u].iter().map(|(_, v)| v.as_slice()).collect(),
            partition.dim,
        )?;
        users.push(UserBlock {
            token_count: count as u32,
            scale,
            index,
            symbols,
        });
    }
    Ok(Frame {
        version: FRAME_VERSION,
        channel_dim: coder.channel_dim(),
        public_scale,
        public,
        users,
    })
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Decode(m) => Error::Corrupt(m),
        other => other,
    }
}

impl Frame {
    pub fn group_count(&self) -> usize {
        self.public.rows()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(FRAME_MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(self.users.len() as u16).to_le_bytes());
        out.extend_from_slice(&(self.channel_dim as u16).to_le_bytes());
        put_u32(&mut out, self.group_count() as u32);
        put_f32(&mut out, self.public_scale);
        for &v in self.public.as_slice() {
            put_f32(&mut out, v);
        }
        for u in &self.users {
            put_u32(&mut out, u.token_count);
            put_f32(&mut out, u.scale);
            for e in &u.index {
                put_u32(&mut out, e.token);
                out.push(e.kind as u8);
                put_u32(&mut out, e.slot);
            }
            for &v in u.symbols.as_slice() {
                put_f32(&mut out, v);
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    /// Serialized length in bytes.
    pub fn byte_len(&self) -> usize {
        4 * self.payload_symbols() + self.side_info_bytes()
    }

    pub fn payload_symbols(&self) -> usize {
        self.public.len() + self.users.iter().map(|u| u.symbols.len()).sum::<usize>()
    }

    /// Header, scales, index maps and checksum.
    pub fn side_info_bytes(&self) -> usize {
        side_info_bytes(self.users.iter().map(|u| u.token_count as usize))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES + CRC_BYTES {
            return Err(Error::Corrupt(format!("frame of {} bytes is too short", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - CRC_BYTES);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        Self::parse(body).map_err(corrupt)
    }

    fn parse(body: &[u8]) -> Result<Self> {
        let mut r = Reader::new(body);
        if r.take(4)? != FRAME_MAGIC {
            return Err(Error::Corrupt("missing M4SC magic".into()));
        }
        let version = r.u8()?;
        if version != FRAME_VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let num_users = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let d_ch = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let groups = r.u32()? as usize;
        let public_scale = read_f32(&mut r)?;
        let public = read_block(&mut r, groups, d_ch, body.len())?;
        let mut users = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let token_count = r.u32()?;
            let scale = read_f32(&mut r)?;
            if (token_count as usize).saturating_mul(ENTRY_BYTES) > body.len() - r.position() {
                return Err(Error::Corrupt("index map longer than frame".into()));
            }
            let mut index = Vec::with_capacity(token_count as usize);
            let mut private = 0usize;
            for _ in 0..token_count {
                let token = r.u32()?;
                let kind = match r.u8()? {
                    0 => SlotKind::Public,
                    1 => {
                        private += 1;
                        SlotKind::Private
                    }
                    k => return Err(Error::Corrupt(format!("unknown slot kind {k}"))),
                };
                let slot = r.u32()?;
                index.push(IndexEntry { token, kind, slot });
            }
            let symbols = read_block(&mut r, private, d_ch, body.len())?;
            users.push(UserBlock {
                token_count,
                scale,
                index,
                symbols,
            });
        }
        r.finish()?;
        Ok(Frame {
            version,
            channel_dim: d_ch,
            public_scale,
            public,
            users,
        })
    }
}

/// Side information of a frame carrying users with the given token counts.
pub fn side_info_bytes(token_counts: impl IntoIterator<Item = usize>) -> usize {
    HEADER_BYTES
        + CRC_BYTES
        + token_counts
            .into_iter()
            .map(|t| USER_HEADER_BYTES + ENTRY_BYTES * t)
            .sum::<usize>()
}

fn read_f32(r: &mut Reader<'_>) -> Result<f64> {
    Ok(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64)
}

fn read_block(r: &mut Reader<'_>, rows: usize, cols: usize, total: usize) -> Result<Matrix> {
    let n = rows
        .checked_mul(cols)
        .filter(|n| n.saturating_mul(4) <= total - r.position())
        .ok_or_else(|| Error::Corrupt("symbol block longer than frame".into()))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(read_f32(r)?);
    }
    Matrix::from_vec(rows, cols, data)
}

/// Sends the public block once over `public_params` (every user sees the same
/// realization) and each private block over that user's channel. Index maps
/// and scales pass unchanged.
pub fn transmit_frame(frame: &Frame, public_params: &ChannelParams, private_params: &[ChannelParams]) -> Result<Frame> {
    if private_params.len() != frame.users.len() {
        return Err(config(format!(
            "{} private channels for {} users",
            private_params.len(),
            frame.users.len()
        )));
    }
    let mut out = frame.clone();
    out.public = transmit(public_params, &frame.public)?;
    for (u, p) in out.users.iter_mut().zip(private_params) {
        u.symbols = transmit(p, &u.symbols)?;
    }
    Ok(out)
}

/// Rebuilds `user`'s `T_u × D` tensor from the received frame.
pub fn reconstruct(frame: &Frame, coder: &ChannelCoder, user: usize) -> Result<SemanticTensor> {
    let block = frame
        .users
        .get(user)
        .ok_or_else(|| config(format!("user {user} is not in the frame")))?;
    let public = coder.decode(&frame.public, frame.public_scale)?;
    let private = coder.decode(&block.symbols, block.scale)?;
    let t = block.token_count as usize;
    let mut out = Matrix::zeros(t, coder.dim());
    let mut seen = vec![false; t];
    for e in &block.index {
        let tok = e.token as usize;
        if tok >= t || seen[tok] {
            return Err(Error::Corrupt(format!("index map overlap at token {tok}")));
        }
        seen[tok] = true;
        let src = match e.kind {
            SlotKind::Public => &public,
            SlotKind::Private => &private,
        };
        let slot = e.slot as usize;
        if slot >= src.tokens() {
            return Err(Error::Corrupt(format!("slot {slot} out of range for token {tok}")));
        }
        out.row_mut(tok).copy_from_slice(src.row(slot));
    }
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::Corrupt(format!("index map gap at token {gap}")));
    }
    SemanticTensor::new(out)
}

/// Payload symbols and side-information bytes for a partition, next to the
/// no-sharing baseline that sends every token on its user's channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolAccount {
    pub public_symbols: usize,
    pub private_symbols: Vec<usize>,
    pub side_info_bytes: usize,
    pub baseline_symbols: usize,
    pub baseline_side_info_bytes: usize,
}

impl SymbolAccount {
    pub fn payload_symbols(&self) -> usize {
        self.public_symbols + self.private_symbols.iter().sum::<usize>()
    }

    /// Payload at 4 bytes per symbol plus side information.
    pub fn total_bytes(&self) -> usize {
        4 * self.payload_symbols() + self.side_info_bytes
    }

    pub fn baseline_total_bytes(&self) -> usize {
        4 * self.baseline_symbols + self.baseline_side_info_bytes
    }

    /// `1 − payload / baseline`; zero when there is nothing to send.
    pub fn savings_ratio(&self) -> f64 {
        if self.baseline_symbols == 0 {
            return 0.0;
        }
        1.0 - self.payload_symbols() as f64 / self.baseline_symbols as f64
    }

    pub fn total_savings_ratio(&self) -> f64 {
        if self.baseline_total_bytes() == 0 {
            return 0.0;
        }
        1.0 - self.total_bytes() as f64 / self.baseline_total_bytes() as f64
    }
}

/// The baseline sends the same frame with every token private, so both
/// sides carry identical side information.
pub fn account(partition: &Partition, channel_dim: usize) -> SymbolAccount {
    let side = side_info_bytes(partition.token_counts.iter().copied());
    SymbolAccount {
        public_symbols: partition.public_groups.len() * channel_dim,
        private_symbols: partition.private.iter().map(|p| p.len() * channel_dim).collect(),
        side_info_bytes: side,
        baseline_symbols: partition.token_counts.iter().sum::<usize>() * channel_dim,
        baseline_side_info_bytes: side,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelFamily;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn random_tensor(t: usize, d: usize, rng: &mut Rng) -> SemanticTensor {
        SemanticTensor::new(Matrix::gaussian(t, d, 1.0, rng)).unwrap()
    }

    fn strict() -> ComparatorConfig {
        ComparatorConfig {
            cosine_threshold: 0.99,
            ..ComparatorConfig::default()
        }
    }

    #[test]
    fn single_user_is_all_private() {
        let x = random_tensor(5, 4, &mut Rng::new(0));
        let mut dup = x.values().clone();
        dup.push_row(x.row(0)).unwrap();
        let p = compare_and_partition(&[SemanticTensor::new(dup).unwrap()], &strict()).unwrap();
        assert!(p.public_groups.is_empty());
        assert_eq!(p.private[0].len(), 6);
    }

    #[test]
    fn identical_users_are_all_public() {
        let x = random_tensor(6, 8, &mut Rng::new(1));
        let p = compare_and_partition(&[x.clone(), x.clone()], &strict()).unwrap();
        assert_eq!(p.private_tokens(), 0);
        assert_eq!(p.public_tokens(), 12);
        for g in &p.public_groups {
            assert_eq!(g.members.len(), 2);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = Rng::new(2);
        let a = random_tensor(2, 3, &mut rng);
        let b = random_tensor(2, 4, &mut rng);
        assert!(matches!(
            compare_and_partition(&[a.clone(), b], &ComparatorConfig::default()),
            Err(Error::Shape { .. })
        ));
        let mut cfg = ComparatorConfig {
            cosine_threshold: 0.0,
            ..ComparatorConfig::default()
        };
        assert!(compare_and_partition(core::slice::from_ref(&a), &cfg).is_err());
        cfg.cosine_threshold = 0.5;
        cfg.var_tol = -1.0;
        assert!(compare_and_partition(&[a], &cfg).is_err());
        assert!(compare_and_partition(&[], &ComparatorConfig::default()).is_err());
    }

    /// All cross-user pairs passing the comparator, by exhaustive search.
    fn matching_pairs(tensors: &[SemanticTensor], cfg: &ComparatorConfig) -> Vec<((usize, usize), (usize, usize))> {
        let mut out = Vec::new();
        for (u, a) in tensors.iter().enumerate() {
            for (v, b) in tensors.iter().enumerate().skip(u + 1) {
                for i in 0..a.tokens() {
                    for j in 0..b.tokens() {
                        if cfg.matches(a.row(i), b.row(j)) {
                            out.push(((u, i), (v, j)));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn one_verbatim_shared_token_matches_pairwise_oracle() {
        let cfg = ComparatorConfig::default();
        for seed in 0..20u64 {
            let mut rng = Rng::new(seed);
            let t = 2 + rng.below(7);
            let users: Vec<SemanticTensor> = (0..3).map(|_| random_tensor(t, 16, &mut rng)).collect();
            let (i, j) = (rng.below(t), rng.below(t));
            let mut u2 = users[2].values().clone();
            u2.row_mut(j).copy_from_slice(users[1].row(i));
            let users = vec![users[0].clone(), users[1].clone(), SemanticTensor::new(u2).unwrap()];

            let pairs = matching_pairs(&users, &cfg);
            assert_eq!(pairs, vec![((1, i), (2, j))], "seed {seed}");
            let p = compare_and_partition(&users, &cfg).unwrap();
            assert_eq!(p.public_groups.len(), 1);
            assert_eq!(p.public_groups[0].members, vec![(1, i), (2, j)]);
            assert_eq!(p.public_groups[0].centroid, users[1].row(i));
        }
    }

    #[test]
    fn merged_centroid_splits_the_difference() {
        let mut rng = Rng::new(3);
        let a = random_tensor(4, 8, &mut rng);
        let delta: Vec<f64> = (0..8).map(|_| 1e-3 * rng.gaussian()).collect();
        let mut b = a.values().clone();
        for r in 0..4 {
            for (x, d) in b.row_mut(r).iter_mut().zip(&delta) {
                *x += d;
            }
        }
        let b = SemanticTensor::new(b).unwrap();
        let p = compare_and_partition(&[a.clone(), b.clone()], &ComparatorConfig::default()).unwrap();
        assert_eq!(p.public_groups.len(), 4);
        let coder = ChannelCoder::identity(8);
        let frame = build_frame(&p, &coder).unwrap();
        for user in 0..2 {
            let rec = reconstruct(&frame, &coder, user).unwrap();
            for r in 0..4 {
                for k in 0..8 {
                    let err = rec.row(r)[k] - a.row(r)[k];
                    // f32 wire rounding on top of the δ/2 merge error
                    assert!((err - delta[k] / 2.0).abs() < 1e-6 * (1.0 + a.row(r)[k].abs()));
                }
            }
        }
        assert_eq!(reconstruct(&frame, &coder, 0).unwrap(), reconstruct(&frame, &coder, 1).unwrap());
    }

    fn overlapping_users(seed: u64, users: usize, t: usize, d: usize, p: f64) -> Vec<SemanticTensor> {
        let mut rng = Rng::new(seed);
        let pool = Matrix::gaussian(t, d, 1.0, &mut rng);
        (0..users)
            .map(|_| {
                let mut m = Matrix::gaussian(t, d, 1.0, &mut rng);
                for r in 0..t {
                    if rng.bernoulli(p) {
                        m.row_mut(r).copy_from_slice(pool.row(r));
                    }
                }
                SemanticTensor::new(m).unwrap()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_is_total(seed: u64, users in 1usize..5, t in 0usize..8, p in 0.0f64..1.0) {
            let tensors = overlapping_users(seed, users, t, 6, p);
            let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
            prop_assert_eq!(part.public_tokens() + part.private_tokens(), users * t);
            let mut seen = BTreeSet::new();
            for g in &part.public_groups {
                prop_assert!(g.distinct_users() >= 2);
                for &m in &g.members {
                    prop_assert!(seen.insert(m));
                }
            }
            for (u, list) in part.private.iter().enumerate() {
                for (tok, v) in list {
                    prop_assert!(seen.insert((u, *tok)));
                    prop_assert_eq!(v.as_slice(), tensors[u].row(*tok));
                }
            }
            prop_assert_eq!(seen.len(), users * t);
        }

        #[test]
        fn partition_is_deterministic(seed: u64, users in 1usize..5, t in 1usize..8) {
            let tensors = overlapping_users(seed, users, t, 6, 0.5);
            let cfg = ComparatorConfig::default();
            prop_assert_eq!(
                compare_and_partition(&tensors, &cfg).unwrap(),
                compare_and_partition(&tensors, &cfg).unwrap()
            );
        }

        #[test]
        fn user_permutation_only_relabels(seed: u64, t in 1usize..8) {
            let tensors = overlapping_users(seed, 3, t, 16, 0.5);
            let cfg = ComparatorConfig::default();
            let canon = |part: &Partition, perm: &[usize]| {
                let mut groups: Vec<Vec<(usize, usize)>> = part
                    .public_groups
                    .iter()
                    .map(|g| {
                        let mut m: Vec<_> = g.members.iter().map(|&(u, t)| (perm[u], t)).collect();
                        m.sort();
                        m
                    })
                    .collect();
                groups.sort();
                groups
            };
            let a = compare_and_partition(&tensors, &cfg).unwrap();
            let permuted = vec![tensors[2].clone(), tensors[0].clone(), tensors[1].clone()];
            let b = compare_and_partition(&permuted, &cfg).unwrap();
            prop_assert_eq!(canon(&a, &[0, 1, 2]), canon(&b, &[2, 0, 1]));
        }

        #[test]
        fn raising_tau_never_adds_public_tokens(seed: u64, users in 2usize..5, t in 1usize..8, lo in 0.5f64..1.0, bump in 0.0f64..0.5) {
            let tensors = overlapping_users(seed, users, t, 16, 0.5);
            let hi = (lo + bump).min(1.0);
            let mk = |tau| ComparatorConfig { cosine_threshold: tau, mean_tol: 10.0, var_tol: 10.0 };
            let a = compare_and_partition(&tensors, &mk(lo)).unwrap();
            let b = compare_and_partition(&tensors, &mk(hi)).unwrap();
            prop_assert!(b.public_tokens() <= a.public_tokens(), "tau {} -> {}: {} -> {}", lo, hi, a.public_tokens(), b.public_tokens());
        }

        #[test]
        fn payload_never_exceeds_baseline(seed: u64, users in 1usize..6, t in 0usize..8, p in 0.0f64..1.0) {
            let tensors = overlapping_users(seed, users, t, 6, p);
            let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
            let acc = account(&part, 3);
            prop_assert!(acc.payload_symbols() <= acc.baseline_symbols);
            prop_assert_eq!(acc.payload_symbols() < acc.baseline_symbols, !part.public_groups.is_empty());
            prop_assert_eq!(acc.total_bytes() < acc.baseline_total_bytes(), !part.public_groups.is_empty());
        }

        #[test]
        fn frame_round_trip_and_crc(seed: u64, users in 1usize..5, t in 0usize..7, p in 0.0f64..1.0) {
            let tensors = overlapping_users(seed, users, t, 6, p);
            let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
            let coder = ChannelCoder::new(6, 3, &mut Rng::new(seed ^ 1));
            let frame = build_frame(&part, &coder).unwrap();
            let bytes = frame.to_bytes();
            prop_assert_eq!(bytes.len(), frame.byte_len());
            let back = Frame::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &frame);
            prop_assert_eq!(back.to_bytes(), bytes.clone());
            let mut rng = Rng::new(seed);
            let i = rng.below(bytes.len());
            let mut bad = bytes.clone();
            bad[i] ^= 1 + rng.below(255) as u8;
            prop_assert!(matches!(Frame::from_bytes(&bad), Err(Error::Corrupt(_))));
        }
    }

    /// First-fit with a moving centroid is not monotone in τ for arbitrary
    /// inputs: at a low threshold early tokens can pull a centroid away from a
    /// later token that would otherwise have merged.
    #[test]
    fn tau_monotonicity_needs_separated_tokens() {
        let tensors = overlapping_users(13799893005952335154, 4, 1, 4, 0.5);
        let mk = |tau| ComparatorConfig {
            cosine_threshold: tau,
            mean_tol: 10.0,
            var_tol: 10.0,
        };
        let lo = compare_and_partition(&tensors, &mk(0.05)).unwrap();
        let hi = compare_and_partition(&tensors, &mk(0.05 + 0.18536009757373922)).unwrap();
        assert!(hi.public_tokens() > lo.public_tokens());
    }

    #[test]
    fn identical_users_save_factor_u_on_payload() {
        let x = random_tensor(5, 8, &mut Rng::new(4));
        for u in [2usize, 4, 8] {
            let part = compare_and_partition(&vec![x.clone(); u], &strict()).unwrap();
            let acc = account(&part, 4);
            assert_eq!(acc.payload_symbols(), 5 * 4);
            assert_eq!(acc.baseline_symbols, u * 5 * 4);
            assert_eq!(acc.savings_ratio(), 1.0 - 1.0 / u as f64);
        }
    }

    #[test]
    fn no_sharing_costs_baseline_plus_side_info() {
        let mut rng = Rng::new(5);
        let users: Vec<_> = (0..3).map(|_| random_tensor(4, 16, &mut rng)).collect();
        let part = compare_and_partition(&users, &ComparatorConfig::default()).unwrap();
        let acc = account(&part, 4);
        assert_eq!(acc.payload_symbols(), acc.baseline_symbols);
        assert_eq!(acc.total_bytes(), 4 * acc.baseline_symbols + acc.side_info_bytes);
        assert_eq!(acc.savings_ratio(), 0.0);
    }

    /// Four users, each pool row shared verbatim by a chosen pair of users.
    #[test]
    fn pairwise_overlap_matches_token_count() {
        let mut rng = Rng::new(6);
        let (t, d, dch) = (8, 16, 4);
        let mut users: Vec<Matrix> = (0..4).map(|_| Matrix::gaussian(t, d, 1.0, &mut rng)).collect();
        let mut shared_rows = 0;
        for r in 0..t {
            if rng.bernoulli(0.5) {
                let a = rng.below(4);
                let b = (a + 1 + rng.below(3)) % 4;
                let v = Matrix::gaussian(1, d, 1.0, &mut rng);
                users[a].row_mut(r).copy_from_slice(v.row(0));
                users[b].row_mut(r).copy_from_slice(v.row(0));
                shared_rows += 1;
            }
        }
        let tensors: Vec<_> = users.into_iter().map(|m| SemanticTensor::new(m).unwrap()).collect();
        let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
        let acc = account(&part, dch);
        // each shared row: two tokens become one group
        let expected_tokens = 4 * t - shared_rows;
        assert_eq!(acc.payload_symbols(), expected_tokens * dch);
        let expected = shared_rows as f64 / (4 * t) as f64;
        assert!((acc.savings_ratio() - expected).abs() < 1e-15);
    }

    #[test]
    fn frame_counts_match_account() {
        let tensors = overlapping_users(7, 4, 6, 8, 0.5);
        let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
        let coder = ChannelCoder::new(8, 4, &mut Rng::new(0));
        let frame = build_frame(&part, &coder).unwrap();
        let acc = account(&part, 4);
        assert_eq!(frame.public.len(), acc.public_symbols);
        for (u, b) in frame.users.iter().enumerate() {
            assert_eq!(b.symbols.len(), acc.private_symbols[u]);
        }
        assert_eq!(frame.to_bytes().len() - 4 * frame.payload_symbols(), acc.side_info_bytes);
    }

    #[test]
    fn empty_public_set_has_no_rows() {
        let x = random_tensor(3, 4, &mut Rng::new(8));
        let part = compare_and_partition(&[x], &ComparatorConfig::default()).unwrap();
        let frame = build_frame(&part, &ChannelCoder::identity(4)).unwrap();
        assert_eq!(frame.public.rows(), 0);
        assert_eq!(frame.public.cols(), 4);
    }

    #[test]
    fn golden_bytes() {
        let a = SemanticTensor::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap()).unwrap();
        let b = SemanticTensor::new(Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        let part = compare_and_partition(&[a, b], &ComparatorConfig::default()).unwrap();
        let frame = build_frame(&part, &ChannelCoder::identity(2)).unwrap();
        let bytes = frame.to_bytes();
        let mut expected: Vec<u8> = Vec::new();
        expected.extend_from_slice(b"M4SC");
        expected.push(1);
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        // public block: centroid [1, 0] normalised to unit power
        let s = (0.5f64).sqrt();
        expected.extend_from_slice(&(s as f32).to_le_bytes());
        expected.extend_from_slice(&((1.0 / s) as f32).to_le_bytes());
        expected.extend_from_slice(&0f32.to_le_bytes());
        // user 0: token 0 public, token 1 private slot 0 with vector [0, 2]
        expected.extend_from_slice(&2u32.to_le_bytes());
        let s0 = (2.0f64).sqrt();
        expected.extend_from_slice(&(s0 as f32).to_le_bytes());
        for (tok, kind, slot) in [(0u32, 0u8, 0u32), (1, 1, 0)] {
            expected.extend_from_slice(&tok.to_le_bytes());
            expected.push(kind);
            expected.extend_from_slice(&slot.to_le_bytes());
        }
        expected.extend_from_slice(&0f32.to_le_bytes());
        expected.extend_from_slice(&((2.0 / s0) as f32).to_le_bytes());
        // user 1: token 0 public, no private block
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1f32.to_le_bytes());
        expected.extend_from_slice(&0u32.to_le_bytes());
        expected.push(0);
        expected.extend_from_slice(&0u32.to_le_bytes());
        let crc = crc32fast::hash(&expected);
        expected.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(Frame::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn noiseless_transmission_is_bit_exact() {
        let tensors = overlapping_users(9, 3, 5, 8, 0.5);
        let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
        let frame = build_frame(&part, &ChannelCoder::new(8, 4, &mut Rng::new(1))).unwrap();
        let none = ChannelParams::noiseless();
        assert_eq!(transmit_frame(&frame, &none, &[none; 3]).unwrap(), frame);
    }

    #[test]
    fn public_block_is_broadcast_private_blocks_are_independent() {
        let tensors = overlapping_users(10, 3, 6, 8, 0.6);
        let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
        assert!(!part.public_groups.is_empty());
        let coder = ChannelCoder::identity(8);
        let frame = build_frame(&part, &coder).unwrap();
        let public = ChannelParams::new(ChannelFamily::Awgn, 10.0, 100);
        let private: Vec<_> = (0..3).map(|u| ChannelParams::new(ChannelFamily::Awgn, 10.0, 200 + u)).collect();
        let rx = transmit_frame(&frame, &public, &private).unwrap();
        assert_ne!(rx.public, frame.public);
        let recs: Vec<_> = (0..3).map(|u| reconstruct(&rx, &coder, u).unwrap()).collect();
        for g in &part.public_groups {
            let (u0, t0) = g.members[0];
            for &(u, t) in &g.members[1..] {
                assert_eq!(recs[u].row(t), recs[u0].row(t0));
            }
        }
        // same clean private vectors through different user channels
        let mut same = frame.clone();
        for u in &mut same.users {
            u.symbols = frame.users[0].symbols.clone();
        }
        let rx = transmit_frame(&same, &public, &private).unwrap();
        if !rx.users[0].symbols.is_empty() {
            assert_ne!(rx.users[0].symbols, rx.users[1].symbols);
        }
    }

    #[test]
    fn all_private_reconstruction_equals_single_user_pipeline() {
        let mut rng = Rng::new(11);
        let users: Vec<_> = (0..3).map(|_| random_tensor(4, 8, &mut rng)).collect();
        let cfg = ComparatorConfig {
            cosine_threshold: 1.0,
            mean_tol: 0.0,
            var_tol: 0.0,
        };
        let part = compare_and_partition(&users, &cfg).unwrap();
        assert!(part.public_groups.is_empty());
        let coder = ChannelCoder::new(8, 6, &mut rng);
        let frame = build_frame(&part, &coder).unwrap();
        for (u, x) in users.iter().enumerate() {
            let enc = coder.encode(x).unwrap();
            let direct = coder
                .decode(&enc.symbols.map(|v| v as f32 as f64), enc.scale as f32 as f64)
                .unwrap();
            assert_eq!(reconstruct(&frame, &coder, u).unwrap(), direct);
        }
    }

    #[test]
    fn index_map_faults_are_corruption() {
        let tensors = overlapping_users(12, 2, 4, 8, 0.0);
        let part = compare_and_partition(&tensors, &ComparatorConfig::default()).unwrap();
        let coder = ChannelCoder::identity(8);
        let frame = build_frame(&part, &coder).unwrap();
        let mut overlap = frame.clone();
        overlap.users[0].index[1].token = 0;
        assert!(matches!(reconstruct(&overlap, &coder, 0), Err(Error::Corrupt(_))));
        let mut gap = frame.clone();
        gap.users[0].index.pop();
        assert!(matches!(reconstruct(&gap, &coder, 0), Err(Error::Corrupt(_))));
        let mut slot = frame.clone();
        slot.users[0].index[0].slot = 99;
        assert!(matches!(reconstruct(&slot, &coder, 0), Err(Error::Corrupt(_))));
        assert!(reconstruct(&frame, &coder, 5).is_err());
    }
}
