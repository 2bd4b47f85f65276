//! Exact and anchored self-attention, stripe/window geometry, and anchor
//! computation.
//!
//! Exact attention materializes the full `N×N` map `softmax(sim(Q,K))·V`.
//! Anchored attention routes the similarity comparison through a reduced set
//! of `N_a` anchor tokens and evaluates strictly right-to-left,
//! `Mₑ·(M_d·V)`, so the largest intermediate is `N×N_a` and the multiply-add
//! count drops from `O(N²d)` to `O(N·N_a·d)`.

mod block;
pub mod geometry;
pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PoolMode, Tensor};

pub use block::{
    anchored_stripe_attention, window_attention, StripeParamNodes, StripeProbe, WindowParamNodes,
};
pub use geometry::{merge, partition, PartitionGeom, PartitionPlan};

/// Logit added to masked pairs in shifted-window attention.
pub const MASK_LOGIT: f64 = -1.0e4;

/// How query/key similarity is scored. Both variants share the `1/√d`
/// softmax temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMeasure {
    /// `Q·Kᵀ/√d`
    Dot,
    /// `−‖qᵢ−kⱼ‖²/√d`
    NegativeSqEuclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StripeDirection {
    Horizontal,
    Vertical,
}

/// A stripe partition: full-width bands of `width` rows (horizontal) or
/// full-height bands of `width` columns (vertical), optionally cyclically
/// shifted before cutting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeSpec {
    pub direction: StripeDirection,
    pub width: usize,
    pub shift: usize,
}

impl Default for StripeSpec {
    fn default() -> Self {
        StripeSpec {
            direction: StripeDirection::Horizontal,
            width: 4,
            shift: 2,
        }
    }
}

impl StripeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("stripe width must be >= 1".into()));
        }
        if self.shift >= self.width {
            return Err(Error::Config(format!(
                "stripe shift {} must be < width {}",
                self.shift, self.width
            )));
        }
        Ok(())
    }
}

/// A non-overlapping `size×size` tile partition, optionally shifted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub size: usize,
    pub shift: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { size: 8, shift: 4 }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        if self.shift >= self.size {
            return Err(Error::Config(format!(
                "window shift {} must be < size {}",
                self.shift, self.size
            )));
        }
        Ok(())
    }
}

/// Anchor construction: pool the stripe's feature grid by `down_factor`
/// along both axes (clamped to the stripe extent), then apply a learnable
/// linear projection. The projection weights live in the model's parameter
/// set (`...anchor.w` / `...anchor.b`); this struct is the serializable
/// geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub pool: PoolMode,
    pub down_factor: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            pool: PoolMode::Avg,
            down_factor: 4,
        }
    }
}

impl AnchorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.down_factor == 0 {
            return Err(Error::Config("anchor down factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Per-axis pooling factors inside a stripe of extent `(h, w)`.
    pub fn axis_factors(&self, h: usize, w: usize) -> (usize, usize) {
        (self.down_factor.min(h), self.down_factor.min(w))
    }
}

/// One partition cell: its token rows and the flat spatial indices (into the
/// padded, rolled map) they came from. Across all groups of one partition
/// every spatial index appears exactly once.
#[derive(Clone, Debug)]
pub struct TokenGroup<T> {
    pub tokens: Tensor<T>,
    pub index_map: Vec<usize>,
    /// Spatial extent of the group's own grid (`tokens` rows are row-major
    /// over it).
    pub height: usize,
    pub width: usize,
}
