//! Orderless pooling encoders: bilinear pooling, the soft-assignment texture
//! encoders (NetVLAD, NetFV, NetBoVW) with their hard-assignment reference,
//! descriptor normalization, dimensionality reduction, spatial alignment and
//! multi-scale aggregation.

mod bilinear;
mod codebook;
mod multiscale;
mod normalize;
mod projection;
mod spatial;
mod texture;

pub use bilinear::{bilinear_backward, bilinear_pool, BilinearDescriptor};
pub use codebook::{
    codebook_nodes, gamma_heuristic, kmeans, kmeans_init, soft_assign, soft_assign_node, Codebook, CodebookMode,
    CodebookNodes, KMeans,
};
pub use multiscale::{multiscale_pool, MultiScaleMode, MultiScaleOptions, MAX_SCALED_PIXELS};
pub use normalize::{l2_normalize, normalize_descriptor, signed_sqrt};
pub use projection::{kronecker_projection, project_full, project_one_feature, ProjectionInit, ProjectionMatrix};
pub use spatial::align_spatial;
pub use texture::{hard_vlad_encode, netbovw_encode, netfv_encode, netvlad_encode};

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Per-location features: one row per spatial location (row-major over
/// H, W), one column per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationFeatures<T> {
    data: Tensor<T>,
}

impl<T: Scalar> LocationFeatures<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        data.shape2()?;
        Ok(LocationFeatures { data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        Self::new(Tensor::matrix(rows)?)
    }

    pub fn locations(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    /// Rows reordered so that row `i` of the result is row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let (l, c) = (self.locations(), self.channels());
        if perm.len() != l {
            return Err(shape_err!("permutation of length {} for {l} locations", perm.len()));
        }
        let mut out = Vec::with_capacity(l * c);
        for &p in perm {
            out.extend_from_slice(self.data.row(p));
        }
        Self::new(Tensor::new(vec![l, c], out)?)
    }
}

/// Which orderless encoder sits between the backbone tap and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Bilinear,
    NetVlad,
    NetFv,
    NetBovw,
    /// Global average pooling followed directly by the linear head.
    FcBaseline,
}

impl EncoderKind {
    pub fn uses_codebook(self) -> bool {
        matches!(self, EncoderKind::NetVlad | EncoderKind::NetFv | EncoderKind::NetBovw)
    }

    /// Pooled descriptor extents (rows, cols) for `c` input channels,
    /// `k` codewords and an optional one-sided projection rank.
    pub fn descriptor_shape(self, c: usize, k: usize, rank: Option<usize>) -> (usize, usize) {
        match self {
            EncoderKind::Bilinear => (rank.unwrap_or(c), c),
            EncoderKind::NetVlad => (k, c),
            EncoderKind::NetFv => (k, 2 * c),
            EncoderKind::NetBovw => (1, k),
            EncoderKind::FcBaseline => (1, c),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Bilinear => "bilinear",
            EncoderKind::NetVlad => "netvlad",
            EncoderKind::NetFv => "netfv",
            EncoderKind::NetBovw => "netbovw",
            EncoderKind::FcBaseline => "fc-baseline",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilinear" => Ok(EncoderKind::Bilinear),
            "netvlad" => Ok(EncoderKind::NetVlad),
            "netfv" => Ok(EncoderKind::NetFv),
            "netbovw" => Ok(EncoderKind::NetBovw),
            "fc-baseline" => Ok(EncoderKind::FcBaseline),
            other => {
                Err(format!("unknown encoder `{other}` (expected bilinear, netvlad, netfv, netbovw or fc-baseline)"))
            }
        }
    }
}
