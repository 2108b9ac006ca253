//! Cross-modal projector built from spline-edge (Kolmogorov-Arnold) layers.
//!
//! Every edge carries its own activation `w_b·silu(x) + w_s·Σ_j c_j·B_j(x)`
//! over a shared cubic B-spline basis; each output node sums the activations
//! of all its incoming edges. Forward and backward passes are analytic.

mod basis;
mod codec;
mod fit;
mod layer;
mod network;

pub use basis::{basis_eval, BSplineBasis, LocalBasis, MAX_ORDER};
pub use codec::KAN_MAGIC;
pub(crate) use codec::{put_f64, put_u32, Reader};
pub use fit::{dataset_mse, fit_function, FitConfig};
pub use layer::{edge_activate, silu, KanEdge, KanLayer, KanLayerGrads, LayerCache};
pub use network::{kan_backward, kan_forward, KanGrads, KanNetwork, KanTrace, SplineConfig};
