//! Sharing runs and the users / overlap / tau / SNR sweeps.
//!
//! A sharing run gives each of `U` users `T` raw Gaussian input rows. Row `i`
//! of a user is, with probability `p`, row `i` of a shared pool and otherwise
//! a fresh draw, so overlap is controlled by construction. The rows pass
//! through the semantic encoder stack, the users are partitioned into public
//! groups and private tokens, and the frame is sent over the channel. A
//! user's accuracy is whether the answer decoded from its reconstructed
//! tokens matches the answer decoded from its clean tokens.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, ensure, Result};
use m4sc_core::channel::{ChannelFamily, ChannelParams};
use m4sc_core::numerics::{argmax, derive_seed, Matrix, Rng};
use m4sc_core::semantic::{SemanticTensor, TaskInstruction};
use m4sc_core::sharing::{
    account, build_frame, compare_and_partition, reconstruct, side_info_bytes, transmit_frame, ComparatorConfig,
    Frame, SymbolAccount,
};
use m4sc_core::training::{evaluate, M4scSystem};

use crate::config::ExperimentConfig;
use crate::metrics::MetricsRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Users,
    Snr,
    Overlap,
    Tau,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Users => "users",
            SweepParam::Snr => "snr",
            SweepParam::Overlap => "overlap",
            SweepParam::Tau => "tau",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "users" => SweepParam::Users,
            "snr" => SweepParam::Snr,
            "overlap" => SweepParam::Overlap,
            "tau" => SweepParam::Tau,
            _ => bail!("unknown sweep parameter {s:?} (users, snr, overlap, tau)"),
        })
    }
}

/// One sharing experiment.
#[derive(Clone, Debug)]
pub struct SharingSpec {
    pub users: usize,
    pub tokens: usize,
    pub overlap: f64,
    pub comparator: ComparatorConfig,
    pub channel: ChannelParams,
    pub seed: u64,
}

/// Which users hold pool row `i` verbatim.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Overlap {
    pub holders: Vec<Vec<usize>>,
}

impl Overlap {
    /// Counting oracle: one public group per pool row held by at least two
    /// users, every other token private.
    pub fn expected_payload(&self, users: usize, tokens: usize, channel_dim: usize) -> usize {
        let shared: Vec<usize> = self.holders.iter().map(Vec::len).filter(|&n| n >= 2).collect();
        let private = users * tokens - shared.iter().sum::<usize>();
        (shared.len() + private) * channel_dim
    }
}

#[derive(Clone, Debug)]
pub struct SharingOutcome {
    pub account: SymbolAccount,
    pub frame: Frame,
    pub overlap: Overlap,
    pub accuracy: f64,
    pub semantic_mse: f64,
}

/// Raw input rows for every user. Users are drawn in order from one stream,
/// so the first `k` users are identical across runs that differ only in `U`.
pub fn user_inputs(users: usize, tokens: usize, dim: usize, overlap: f64, seed: u64) -> (Vec<Matrix>, Overlap) {
    let mut rng = Rng::new(seed);
    let pool = Matrix::gaussian(tokens, dim, 1.0, &mut rng);
    let mut holders = vec![Vec::new(); tokens];
    let mut inputs = Vec::with_capacity(users);
    for u in 0..users {
        let mut urng = Rng::new(derive_seed(seed, 1 + u as u64));
        let mut m = Matrix::gaussian(tokens, dim, 1.0, &mut urng);
        for (i, h) in holders.iter_mut().enumerate() {
            if urng.bernoulli(overlap) {
                m.row_mut(i).copy_from_slice(pool.row(i));
                h.push(u);
            }
        }
        inputs.push(m);
    }
    (inputs, Overlap { holders })
}

pub fn run_sharing(sys: &M4scSystem, spec: &SharingSpec) -> Result<SharingOutcome> {
    ensure!(spec.users >= 1 && spec.tokens >= 1, "a sharing run needs at least one user and token");
    let view = sys.view()?;
    let (inputs, overlap) = user_inputs(spec.users, spec.tokens, sys.config.dim, spec.overlap, spec.seed);
    let clean: Vec<SemanticTensor> = inputs
        .into_iter()
        .map(|m| view.encode(&SemanticTensor::new(m)?))
        .collect::<m4sc_core::Result<_>>()?;
    let partition = compare_and_partition(&clean, &spec.comparator)?;
    let frame = build_frame(&partition, &sys.coder)?;
    let acct = account(&partition, sys.config.channel_dim);
    ensure!(
        acct.payload_symbols() == frame.payload_symbols() && acct.side_info_bytes == frame.side_info_bytes(),
        "accounting disagrees with the frame"
    );
    ensure!(
        frame.byte_len() == 4 * acct.payload_symbols() + acct.side_info_bytes,
        "frame size is not payload plus side information"
    );
    let public = spec.channel.with_seed(derive_seed(spec.seed, 0x9b));
    let private: Vec<ChannelParams> = (0..spec.users)
        .map(|u| spec.channel.with_seed(derive_seed(spec.seed, 0x100 + u as u64)))
        .collect();
    let received = transmit_frame(&frame, &public, &private)?;
    let mut hits = 0usize;
    let mut mse = 0.0;
    for (u, c) in clean.iter().enumerate() {
        let r = reconstruct(&received, &sys.coder, u)?;
        mse += r.values().mse(c.values())?;
        hits += (argmax(&view.decode(&r)?) == argmax(&view.decode(c)?)) as usize;
    }
    Ok(SharingOutcome {
        account: acct,
        frame,
        overlap,
        accuracy: hits as f64 / spec.users as f64,
        semantic_mse: mse / spec.users as f64,
    })
}

fn snr_field(p: &ChannelParams) -> Option<f64> {
    (p.family != ChannelFamily::None).then_some(p.snr_db)
}

pub fn sharing_row(run_id: String, spec: &SharingSpec, out: &SharingOutcome) -> MetricsRow {
    MetricsRow {
        run_id,
        users: spec.users,
        overlap: spec.overlap,
        snr_db: snr_field(&spec.channel),
        channel: spec.channel.family.to_string(),
        payload_symbols: out.account.payload_symbols(),
        baseline_symbols: out.account.baseline_symbols,
        sideinfo_bytes: out.account.side_info_bytes,
        savings_ratio: out.account.savings_ratio(),
        accuracy: out.accuracy,
        semantic_mse: out.semantic_mse,
        seed: spec.seed,
    }
}

fn base_spec(cfg: &ExperimentConfig) -> SharingSpec {
    SharingSpec {
        users: cfg.users,
        tokens: cfg.tokens,
        overlap: cfg.overlap,
        comparator: cfg.comparator,
        channel: cfg.channel.params(0),
        seed: 0,
    }
}

/// Seed of sweep repetition `s`, shared by every point of a sweep.
pub fn repetition_seed(cfg: &ExperimentConfig, s: usize) -> u64 {
    derive_seed(cfg.seed, s as u64)
}

/// Single run at the configured `U`, `p` and channel.
pub fn simulate(sys: &M4scSystem, cfg: &ExperimentConfig) -> Result<(MetricsRow, SharingOutcome)> {
    let spec = SharingSpec {
        seed: repetition_seed(cfg, 0),
        ..base_spec(cfg)
    };
    let out = run_sharing(sys, &spec)?;
    Ok((sharing_row("simulate".into(), &spec, &out), out))
}

pub fn run_users_sweep(sys: &M4scSystem, cfg: &ExperimentConfig, user_counts: &[usize]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &u in user_counts {
        for s in 0..cfg.seeds {
            let spec = SharingSpec {
                users: u,
                seed: repetition_seed(cfg, s),
                ..base_spec(cfg)
            };
            let out = run_sharing(sys, &spec)?;
            rows.push(sharing_row(format!("users-u{u}-s{s}"), &spec, &out));
        }
    }
    Ok(rows)
}

pub fn run_overlap_sweep(sys: &M4scSystem, cfg: &ExperimentConfig, overlaps: &[f64]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &p in overlaps {
        for s in 0..cfg.seeds {
            let spec = SharingSpec {
                overlap: p,
                seed: repetition_seed(cfg, s),
                ..base_spec(cfg)
            };
            let out = run_sharing(sys, &spec)?;
            rows.push(sharing_row(format!("overlap-p{p}-s{s}"), &spec, &out));
        }
    }
    Ok(rows)
}

pub fn run_tau_sweep(sys: &M4scSystem, cfg: &ExperimentConfig, taus: &[f64]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &tau in taus {
        for s in 0..cfg.seeds {
            let spec = SharingSpec {
                comparator: cfg.comparator_with_tau(tau),
                seed: repetition_seed(cfg, s),
                ..base_spec(cfg)
            };
            let out = run_sharing(sys, &spec)?;
            rows.push(sharing_row(format!("tau-t{tau}-s{s}"), &spec, &out));
        }
    }
    Ok(rows)
}

/// Task accuracy and semantic MSE per family and SNR, one row per channel
/// seed. Each sample travels alone, so payload equals baseline.
pub fn run_snr_sweep(
    sys: &M4scSystem,
    cfg: &ExperimentConfig,
    corpus: &[TaskInstruction],
    snrs: &[f64],
) -> Result<Vec<MetricsRow>> {
    ensure!(!corpus.is_empty(), "SNR sweep needs a non-empty evaluation corpus");
    let mut tokens = Vec::with_capacity(corpus.len());
    for s in corpus {
        tokens.push(s.text_tokens()?.len() + s.input_image.as_ref().map_or(0, |sc| sc.objects.len() + 1));
    }
    let symbols = tokens.iter().sum::<usize>() * sys.config.channel_dim;
    let side: usize = tokens.iter().map(|&t| side_info_bytes([t])).sum();
    let mut rows = Vec::new();
    for &family in &cfg.sweep.families {
        let points: Vec<f64> = if family == ChannelFamily::None {
            vec![f64::INFINITY]
        } else {
            snrs.to_vec()
        };
        for snr in points {
            for s in 0..cfg.eval_seeds {
                let seed = repetition_seed(cfg, s);
                let params = ChannelParams {
                    h_min: cfg.channel.h_min,
                    ..ChannelParams::new(family, snr, seed)
                };
                let r = evaluate(sys, corpus, Some(&params), &[seed])?;
                let snr_db = snr_field(&params);
                rows.push(MetricsRow {
                    run_id: match snr_db {
                        Some(v) => format!("snr-{family}-{v}-s{s}"),
                        None => format!("snr-{family}-s{s}"),
                    },
                    users: 1,
                    overlap: 0.0,
                    snr_db,
                    channel: family.to_string(),
                    payload_symbols: symbols,
                    baseline_symbols: symbols,
                    sideinfo_bytes: side,
                    savings_ratio: 0.0,
                    accuracy: r.accuracy,
                    semantic_mse: r.semantic_mse,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean of `f` over rows grouped by `key`, in first-seen key order.
pub fn mean_by<K: PartialEq + Clone>(rows: &[MetricsRow], key: impl Fn(&MetricsRow) -> K, f: impl Fn(&MetricsRow) -> f64) -> Vec<(K, f64)> {
    let mut groups: Vec<(K, f64, usize)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => {
                g.1 += f(r);
                g.2 += 1;
            }
            None => groups.push((k, f(r), 1)),
        }
    }
    groups.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect()
}
