//! Linear channel coding and real-valued physical channels.
//!
//! Symbols are real, one per coded feature. Every encoded tensor is scaled to
//! unit mean power; the scale factor travels with the symbols so the decoder
//! can undo it. SNR is per real symbol: noise std `σ = 10^(−snr_db/20)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numerics::{Matrix, Rng};
use crate::semantic::SemanticTensor;
use crate::{error::config, Error, Result};

pub const DEFAULT_H_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelFamily {
    None,
    Awgn,
    Rayleigh,
}

impl ChannelFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelFamily::None => "none",
            ChannelFamily::Awgn => "awgn",
            ChannelFamily::Rayleigh => "rayleigh",
        }
    }
}

impl fmt::Display for ChannelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ChannelFamily::None),
            "awgn" => Ok(ChannelFamily::Awgn),
            "rayleigh" => Ok(ChannelFamily::Rayleigh),
            _ => Err(config(format!("unknown channel family {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub family: ChannelFamily,
    pub snr_db: f64,
    pub seed: u64,
    pub h_min: f64,
}

impl ChannelParams {
    pub fn new(family: ChannelFamily, snr_db: f64, seed: u64) -> Self {
        Self {
            family,
            snr_db,
            seed,
            h_min: DEFAULT_H_MIN,
        }
    }

    pub fn noiseless() -> Self {
        Self::new(ChannelFamily::None, f64::INFINITY, 0)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_min > 0.0) {
            return Err(config("h_min must be positive"));
        }
        if self.family != ChannelFamily::None && self.snr_db.is_nan() {
            return Err(config("snr_db is NaN"));
        }
        Ok(())
    }
}

/// Noise standard deviation for unit signal power.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    libm::pow(10.0, -snr_db / 20.0)
}

/// Channel-encoded symbols and the power-normalisation factor applied to them.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub symbols: Matrix,
    pub scale: f64,
}

/// Per-token multiplicative factor a channel applied to the signal part
/// (`h / max(h, h_min)` for fading, 1 otherwise). Noise is additive and does
/// not enter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Realization {
    pub gains: Vec<f64>,
}

/// Affine encoder `D → D_ch` and decoder `D_ch → D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelCoder {
    pub enc_weight: Matrix,
    pub enc_bias: Matrix,
    pub dec_weight: Matrix,
    pub dec_bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoderGrads {
    pub enc_weight: Matrix,
    pub enc_bias: Matrix,
    pub dec_weight: Matrix,
    pub dec_bias: Matrix,
}

impl CoderGrads {
    pub fn zeros_like(c: &ChannelCoder) -> Self {
        Self {
            enc_weight: Matrix::zeros(c.dim(), c.channel_dim()),
            enc_bias: Matrix::zeros(1, c.channel_dim()),
            dec_weight: Matrix::zeros(c.channel_dim(), c.dim()),
            dec_bias: Matrix::zeros(1, c.dim()),
        }
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        vec![&self.enc_weight, &self.enc_bias, &self.dec_weight, &self.dec_bias]
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.dec_weight,
            &mut self.dec_bias,
        ]
    }
}

/// Quantities saved by [`ChannelCoder::roundtrip_traced`].
#[derive(Clone, Debug)]
pub struct CodecTrace {
    input: Matrix,
    pre: Matrix,
    scale: f64,
    normalized: bool,
    gains: Vec<f64>,
    equalized: Matrix,
}

impl ChannelCoder {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn new(dim: usize, channel_dim: usize, rng: &mut Rng) -> Self {
        // tied start: with N(0, 1/D) entries the decoder `Eᵀ` is close to a
        // left inverse, so an untrained coder approximately projects
        let enc_weight = Matrix::gaussian(dim, channel_dim, 1.0 / libm::sqrt(dim as f64), rng);
        Self {
            dec_weight: enc_weight.transpose(),
            enc_weight,
            enc_bias: Matrix::zeros(1, channel_dim),
            dec_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            enc_weight: Matrix::identity(dim),
            enc_bias: Matrix::zeros(1, dim),
            dec_weight: Matrix::identity(dim),
            dec_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.enc_weight.rows()
    }

    pub fn channel_dim(&self) -> usize {
        self.enc_weight.cols()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.enc_weight, &self.enc_bias, &self.dec_weight, &self.dec_bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.enc_weight,
            &mut self.enc_bias,
            &mut self.dec_weight,
            &mut self.dec_bias,
        ]
    }

    fn affine_encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() {
            return Err(Error::Shape {
                op: "channel_encode",
                left: x.shape(),
                right: self.enc_weight.shape(),
            });
        }
        let mut z = x.matmul(&self.enc_weight)?;
        z.add_row_broadcast(self.enc_bias.as_slice())?;
        Ok(z)
    }

    pub fn encode(&self, semantic: &SemanticTensor) -> Result<Encoded> {
        let z = self.affine_encode(semantic.values())?;
        let (symbols, scale, _) = normalize(z);
        Ok(Encoded { symbols, scale })
    }

    pub fn decode(&self, received: &Matrix, scale: f64) -> Result<SemanticTensor> {
        if received.cols() != self.channel_dim() {
            return Err(Error::Shape {
                op: "channel_decode",
                left: received.shape(),
                right: self.dec_weight.shape(),
            });
        }
        let mut out = received.scaled(scale).matmul(&self.dec_weight)?;
        out.add_row_broadcast(self.dec_bias.as_slice())?;
        SemanticTensor::new(out)
    }

    /// Encode, transmit and decode in one pass, keeping what the backward pass needs.
    pub fn roundtrip_traced(&self, semantic: &SemanticTensor, params: &ChannelParams) -> Result<(SemanticTensor, CodecTrace)> {
        let z = self.affine_encode(semantic.values())?;
        let (symbols, scale, normalized) = normalize(z.clone());
        let (received, real) = transmit_with_realization(params, &symbols)?;
        let decoded = self.decode(&received, scale)?;
        Ok((
            decoded,
            CodecTrace {
                input: semantic.values().clone(),
                pre: z,
                scale,
                normalized,
                gains: real.gains,
                equalized: received,
            },
        ))
    }

    /// Accumulates coder gradients and returns `∂L/∂semantic` for the
    /// traced round trip, holding the channel realization fixed.
    pub fn backward(&self, trace: &CodecTrace, doutput: &Matrix, grads: &mut CoderGrads) -> Result<Matrix> {
        let s = trace.scale;
        let u = trace.equalized.scaled(s);
        grads.dec_weight.add_assign(&u.t_matmul(doutput)?)?;
        add_col_sums(&mut grads.dec_bias, doutput);
        let du = doutput.matmul_t(&self.dec_weight)?;

        // u = x̂·s: both x̂ and s receive gradient
        let mut ds = 0.0;
        let mut de = du.scaled(s);
        for (d, &x) in du.as_slice().iter().zip(trace.equalized.as_slice()) {
            ds += d * x;
        }
        let cols = de.cols();
        for (t, &g) in trace.gains.iter().enumerate() {
            for v in &mut de.as_mut_slice()[t * cols..(t + 1) * cols] {
                *v *= g;
            }
        }

        let dz = if trace.normalized {
            // e = z/s with s = sqrt(Σz²/N)
            let n = trace.pre.len() as f64;
            let mut dls = ds;
            for (d, &z) in de.as_slice().iter().zip(trace.pre.as_slice()) {
                dls -= d * z / (s * s);
            }
            let mut dz = de.scaled(1.0 / s);
            for (v, &z) in dz.as_mut_slice().iter_mut().zip(trace.pre.as_slice()) {
                *v += dls * z / (n * s);
            }
            dz
        } else {
            de
        };
        grads.enc_weight.add_assign(&trace.input.t_matmul(&dz)?)?;
        add_col_sums(&mut grads.enc_bias, &dz);
        dz.matmul_t(&self.enc_weight)
    }
}

fn add_col_sums(dst: &mut Matrix, m: &Matrix) {
    for (b, g) in dst.as_mut_slice().iter_mut().zip(m.column_sums()) {
        *b += g;
    }
}

/// Scales `z` to unit mean power. All-zero and empty tensors are returned
/// unchanged with scale 1.
fn normalize(z: Matrix) -> (Matrix, f64, bool) {
    if z.is_empty() {
        return (z, 1.0, false);
    }
    let power = z.sum_squares() / z.len() as f64;
    if power == 0.0 {
        return (z, 1.0, false);
    }
    let s = libm::sqrt(power);
    (z.scaled(1.0 / s), s, true)
}

pub fn channel_encode(coder: &ChannelCoder, semantic: &SemanticTensor) -> Result<Encoded> {
    coder.encode(semantic)
}

pub fn channel_decode(coder: &ChannelCoder, received: &Matrix, scale: f64) -> Result<SemanticTensor> {
    coder.decode(received, scale)
}

/// Passes `symbols` (one token per row) through the channel. The noise is a
/// pure function of `params.seed`.
pub fn transmit(params: &ChannelParams, symbols: &Matrix) -> Result<Matrix> {
    Ok(transmit_with_realization(params, symbols)?.0)
}

pub fn transmit_with_realization(params: &ChannelParams, symbols: &Matrix) -> Result<(Matrix, Realization)> {
    params.validate()?;
    if !symbols.is_finite() {
        return Err(config("channel input is not finite"));
    }
    let tokens = symbols.rows();
    match params.family {
        ChannelFamily::None => Ok((
            symbols.clone(),
            Realization {
                gains: vec![1.0; tokens],
            },
        )),
        ChannelFamily::Awgn => {
            let sigma = snr_to_sigma(params.snr_db);
            let mut rng = Rng::new(params.seed);
            let mut y = symbols.clone();
            for v in y.as_mut_slice() {
                *v += sigma * rng.gaussian();
            }
            Ok((
                y,
                Realization {
                    gains: vec![1.0; tokens],
                },
            ))
        }
        ChannelFamily::Rayleigh => {
            let sigma = snr_to_sigma(params.snr_db);
            let mut rng = Rng::new(params.seed);
            let mut y = symbols.clone();
            let mut gains = Vec::with_capacity(tokens);
            for t in 0..tokens {
                let h = rayleigh_gain(&mut rng);
                let eq = h.max(params.h_min);
                for v in y.row_mut(t) {
                    *v = (h * *v + sigma * rng.gaussian()) / eq;
                }
                gains.push(h / eq);
            }
            Ok((y, Realization { gains }))
        }
    }
}

/// Rayleigh magnitude with `E[h²] = 1`.
pub fn rayleigh_gain(rng: &mut Rng) -> f64 {
    let a = rng.gaussian();
    let b = rng.gaussian();
    libm::sqrt((a * a + b * b) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn tensor(rows: usize, cols: usize, seed: u64) -> SemanticTensor {
        SemanticTensor::new(Matrix::gaussian(rows, cols, 1.0, &mut Rng::new(seed))).unwrap()
    }

    #[test]
    fn sigma_convention() {
        assert_eq!(snr_to_sigma(0.0), 1.0);
        assert!((snr_to_sigma(20.0) - 0.1).abs() < 1e-15);
        assert!((snr_to_sigma(3.0) - 0.707_945_784_384_138).abs() < 1e-12);
    }

    #[test]
    fn identity_coder_keeps_unit_power_input() {
        let mut x = Matrix::filled(3, 4, 1.0);
        x.set(1, 2, -1.0);
        let enc = ChannelCoder::identity(4).encode(&SemanticTensor::new(x.clone()).unwrap()).unwrap();
        assert_eq!(enc.symbols, x);
        assert_eq!(enc.scale, 1.0);
    }

    #[test]
    fn encoded_power_is_one() {
        let mut rng = Rng::new(1);
        for seed in 0..20 {
            let coder = ChannelCoder::new(8, 4, &mut rng);
            let enc = coder.encode(&tensor(1 + seed as usize % 7, 8, seed)).unwrap();
            let p = enc.symbols.sum_squares() / enc.symbols.len() as f64;
            assert!((p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn all_zero_tensor_passes_through() {
        let coder = ChannelCoder::identity(3);
        let enc = coder.encode(&SemanticTensor::new(Matrix::zeros(2, 3)).unwrap()).unwrap();
        assert_eq!(enc.symbols, Matrix::zeros(2, 3));
        assert_eq!(enc.scale, 1.0);
        let enc = coder.encode(&SemanticTensor::empty(3)).unwrap();
        assert_eq!(enc.symbols.rows(), 0);
    }

    #[test]
    fn affine_map_matches_loop_oracle() {
        let coder = ChannelCoder::new(5, 3, &mut Rng::new(2));
        let mut coder = coder;
        coder.enc_bias = Matrix::gaussian(1, 3, 1.0, &mut Rng::new(3));
        let x = tensor(4, 5, 4);
        let enc = coder.encode(&x).unwrap();
        let mut z = [[0.0; 3]; 4];
        let mut power = 0.0;
        for (t, zt) in z.iter_mut().enumerate() {
            for (j, zj) in zt.iter_mut().enumerate() {
                let mut s = coder.enc_bias.get(0, j);
                for i in 0..5 {
                    s += x.row(t)[i] * coder.enc_weight.get(i, j);
                }
                *zj = s;
                power += s * s;
            }
        }
        let scale = (power / 12.0).sqrt();
        assert!((enc.scale - scale).abs() < 1e-12);
        for t in 0..4 {
            for j in 0..3 {
                assert!((enc.symbols.get(t, j) - z[t][j] / scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_roundtrip_restores_input() {
        let coder = ChannelCoder::identity(6);
        let x = tensor(5, 6, 7);
        let enc = coder.encode(&x).unwrap();
        let rx = transmit(&ChannelParams::noiseless(), &enc.symbols).unwrap();
        let y = coder.decode(&rx, enc.scale).unwrap();
        for (a, b) in y.values().as_slice().iter().zip(x.values().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_coder_shapes() {
        let coder = ChannelCoder::new(8, 3, &mut Rng::new(0));
        let enc = coder.encode(&tensor(4, 8, 1)).unwrap();
        assert_eq!(enc.symbols.shape(), (4, 3));
        assert_eq!(coder.decode(&enc.symbols, enc.scale).unwrap().values().shape(), (4, 8));
        assert!(matches!(coder.decode(&Matrix::zeros(4, 8), 1.0), Err(Error::Shape { .. })));
        assert!(matches!(coder.encode(&tensor(4, 3, 1)), Err(Error::Shape { .. })));
    }

    #[test]
    fn none_is_bit_identical() {
        let x = Matrix::gaussian(10, 4, 1.0, &mut Rng::new(5));
        let p = ChannelParams::new(ChannelFamily::None, -30.0, 9);
        assert_eq!(transmit(&p, &x).unwrap(), x);
    }

    #[test]
    fn high_snr_awgn_is_nearly_clean() {
        let x = Matrix::gaussian(100, 100, 1.0, &mut Rng::new(6));
        let y = transmit(&ChannelParams::new(ChannelFamily::Awgn, 100.0, 1), &x).unwrap();
        let max = y
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-4, "{max}");
    }

    #[test]
    fn awgn_noise_statistics() {
        for (snr, seed) in [(0.0, 11u64), (7.0, 12)] {
            let x = Matrix::zeros(1000, 100);
            let y = transmit(&ChannelParams::new(ChannelFamily::Awgn, snr, seed), &x).unwrap();
            let n = y.len() as f64;
            let sigma = snr_to_sigma(snr);
            let mean = y.as_slice().iter().sum::<f64>() / n;
            let var = y.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
            assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "var {var}");
        }
    }

    #[test]
    fn rayleigh_power_gain_is_unit() {
        let mut rng = Rng::new(13);
        let m = (0..100_000).map(|_| rayleigh_gain(&mut rng).powi(2)).sum::<f64>() / 1e5;
        assert!((m - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn rayleigh_equalizes_noise_free_signal() {
        let x = Matrix::gaussian(50, 4, 1.0, &mut Rng::new(14));
        let p = ChannelParams::new(ChannelFamily::Rayleigh, 300.0, 3);
        let (y, real) = transmit_with_realization(&p, &x).unwrap();
        for t in 0..50 {
            for (a, b) in y.row(t).iter().zip(x.row(t)) {
                assert!((a - real.gains[t] * b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transmit_is_pure_in_seed() {
        let x = Matrix::gaussian(5, 5, 1.0, &mut Rng::new(0));
        for fam in [ChannelFamily::Awgn, ChannelFamily::Rayleigh] {
            let p = ChannelParams::new(fam, 5.0, 77);
            assert_eq!(transmit(&p, &x).unwrap(), transmit(&p, &x).unwrap());
            assert_ne!(transmit(&p, &x).unwrap(), transmit(&p.with_seed(78), &x).unwrap());
        }
    }

    #[test]
    fn invalid_params() {
        let mut p = ChannelParams::new(ChannelFamily::Awgn, 5.0, 0);
        p.h_min = 0.0;
        assert!(transmit(&p, &Matrix::zeros(1, 1)).is_err());
        assert!("fading".parse::<ChannelFamily>().is_err());
    }

    #[test]
    fn degradation_is_monotone_in_snr() {
        let coder = ChannelCoder::identity(8);
        let snrs = [0.0, 5.0, 10.0, 15.0, 20.0];
        for fam in [ChannelFamily::Awgn, ChannelFamily::Rayleigh] {
            let mut mse = [0.0; 5];
            for seed in 0..20u64 {
                let x = tensor(6, 8, 100 + seed);
                let enc = coder.encode(&x).unwrap();
                for (k, &snr) in snrs.iter().enumerate() {
                    let rx = transmit(&ChannelParams::new(fam, snr, seed), &enc.symbols).unwrap();
                    let y = coder.decode(&rx, enc.scale).unwrap();
                    mse[k] += y.values().mse(x.values()).unwrap() / 20.0;
                }
            }
            for k in 1..5 {
                assert!(mse[k] <= mse[k - 1], "{fam}: {mse:?}");
            }
        }
    }

    /// Loss = Σ w ⊙ roundtrip(x) with fixed weights; the channel realization is
    /// fixed by the seed so the loss is a smooth function of the parameters.
    #[test]
    fn coder_gradients_match_central_differences() {
        let families = [ChannelFamily::None, ChannelFamily::Awgn, ChannelFamily::Rayleigh];
        for seed in 0..12u64 {
            let mut rng = Rng::new(900 + seed);
            let d = 2 + rng.below(5);
            let dch = 1 + rng.below(d);
            let t = 1 + rng.below(4);
            let mut coder = ChannelCoder::new(d, dch, &mut rng);
            coder.enc_bias = Matrix::gaussian(1, dch, 0.3, &mut rng);
            coder.dec_bias = Matrix::gaussian(1, d, 0.3, &mut rng);
            let x = SemanticTensor::new(Matrix::gaussian(t, d, 1.0, &mut rng)).unwrap();
            let w = Matrix::gaussian(t, d, 1.0, &mut rng);
            let params = ChannelParams::new(families[seed as usize % 3], 5.0, seed);

            let loss = |c: &ChannelCoder, x: &SemanticTensor| -> f64 {
                let (y, _) = c.roundtrip_traced(x, &params).unwrap();
                y.values().as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
            };

            let (_, trace) = coder.roundtrip_traced(&x, &params).unwrap();
            let mut g = CoderGrads::zeros_like(&coder);
            let dx = coder.backward(&trace, &w, &mut g).unwrap();

            let p0: Vec<f64> = coder.params().iter().flat_map(|m| m.as_slice().to_vec()).collect();
            let analytic: Vec<f64> = g.matrices().iter().flat_map(|m| m.as_slice().to_vec()).collect();
            let mut probe = coder.clone();
            let err = grad_check(
                |p| {
                    let mut off = 0;
                    for m in probe.params_mut() {
                        let n = m.len();
                        m.as_mut_slice().copy_from_slice(&p[off..off + n]);
                        off += n;
                    }
                    loss(&probe, &x)
                },
                &p0,
                &analytic,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: params {err}");

            let x0 = x.values().as_slice().to_vec();
            let err_x = grad_check(
                |v| loss(&coder, &SemanticTensor::new(Matrix::from_vec(t, d, v.to_vec()).unwrap()).unwrap()),
                &x0,
                dx.as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(err_x < 1e-5, "seed {seed}: input {err_x}");
        }
    }
}
