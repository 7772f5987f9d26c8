//! Pure operators on codes: the feature-map-inversion modifier, random
//! energy reallocation, channel-sum style descriptors and Gram matrices.
//!
//! Nothing here mutates its input.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::code::Code;
use crate::error::{Error, Result};
use crate::layer::LayerId;

/// Relative tolerance on `Σ v = 1` accepted by [`RealloVector::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Channels whose total is below `DEGENERATE_RATIO × grand total` are left
/// at zero by [`random_reallocate`].
pub const DEGENERATE_RATIO: f64 = 1e-12;

/// A point on the probability simplex giving each channel's energy share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealloVector {
    v: Vec<f64>,
    seed: Option<u64>,
}

impl RealloVector {
    pub fn new(v: Vec<f64>, seed: Option<u64>) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::InvalidConfig("reallocation vector is empty".into()));
        }
        if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidConfig(
                "reallocation vector has negative or non-finite entries".into(),
            ));
        }
        let sum: f64 = v.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "reallocation vector sums to {sum}, not 1"
            )));
        }
        Ok(Self { v, seed })
    }

    /// The code's own normalised channel totals; reallocating with this
    /// vector leaves the code unchanged.
    pub fn from_channel_totals(code: &Code) -> Result<Self> {
        let totals = channel_totals(code.values());
        let grand: f64 = totals.iter().sum();
        if grand <= 0.0 {
            return Err(Error::InvalidConfig("code has no energy to normalise".into()));
        }
        Self::new(totals.iter().map(|t| t / grand).collect(), None)
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Per-channel energy of a code, `Φ(X)·1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleDescriptor {
    pub layer: LayerId,
    pub sums: Vec<f64>,
    /// `M·N` of the code the sums were taken over.
    pub spatial_size: usize,
}

impl StyleDescriptor {
    /// Sums divided by the spatial size they were taken over.
    pub fn normalized(&self) -> Vec<f64> {
        let n = self.spatial_size.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }
}

/// Inner products of flattened channels, `F Fᵀ` with `F` of shape `C × MN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GramJson", try_from = "GramJson")]
pub struct GramDescriptor {
    pub layer: LayerId,
    pub matrix: Array2<f64>,
    pub spatial_size: usize,
}

#[derive(Serialize, Deserialize)]
struct GramJson {
    layer: LayerId,
    matrix: Vec<Vec<f64>>,
    spatial_size: usize,
}

impl From<GramDescriptor> for GramJson {
    fn from(g: GramDescriptor) -> Self {
        Self {
            layer: g.layer,
            matrix: g.matrix.outer_iter().map(|r| r.to_vec()).collect(),
            spatial_size: g.spatial_size,
        }
    }
}

impl TryFrom<GramJson> for GramDescriptor {
    type Error = String;

    fn try_from(g: GramJson) -> std::result::Result<Self, String> {
        let c = g.matrix.len();
        if g.matrix.iter().any(|r| r.len() != c) {
            return Err("gram matrix is not square".into());
        }
        let flat = g.matrix.into_iter().flatten().collect();
        Ok(Self {
            layer: g.layer,
            matrix: Array2::from_shape_vec((c, c), flat).map_err(|e| e.to_string())?,
            spatial_size: g.spatial_size,
        })
    }
}

/// Result of [`random_reallocate`]: the new code plus the channels that were
/// too weak to rescale and were left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Reallocation {
    pub code: Code,
    pub degenerate: Vec<usize>,
}

pub(crate) fn channel_totals(values: &Array3<f64>) -> Vec<f64> {
    values.outer_iter().map(|c| c.sum()).collect()
}

/// Sum over the channel axis, shape `1 × M × N`.
pub fn channel_sum_map(code: &Code) -> Array3<f64> {
    code.values().sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Puts the channel-sum map into channel `l` and zeroes every other channel.
pub fn fmi_modify(code: &Code, l: usize) -> Result<Code> {
    let (c, m, n) = code.shape();
    if l >= c {
        return Err(Error::ChannelOutOfRange {
            layer: code.layer().to_string(),
            index: l,
            channels: c,
        });
    }
    let mut out = Array3::zeros((c, m, n));
    out.index_axis_mut(Axis(0), l).assign(&code.values().sum_axis(Axis(0)));
    Ok(code.derived(out, &format!("fmi[{l}]")))
}

/// Flat Dirichlet sample: normalised i.i.d. unit exponentials.
pub fn sample_simplex(channels: usize, seed: u64) -> Result<RealloVector> {
    if channels < 1 {
        return Err(Error::InvalidConfig("simplex dimension must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..channels)
        .map(|_| {
            let e: f64 = Exp1.sample(&mut rng);
            e
        })
        .collect();
    let total: f64 = draws.iter().sum();
    Ok(RealloVector {
        v: draws.into_iter().map(|d| d / total).collect(),
        seed: Some(seed),
    })
}

/// Rescales each channel so its total becomes `v_c` times the grand total.
///
/// Channels whose total is below `DEGENERATE_RATIO × grand total` cannot be
/// rescaled; they stay zero and their share of the energy is dropped.
pub fn random_reallocate(code: &Code, v: &RealloVector) -> Result<Reallocation> {
    let c = code.channels();
    if v.len() != c {
        return Err(Error::LengthMismatch {
            expected: c,
            actual: v.len(),
        });
    }
    let totals = channel_totals(code.values());
    let grand: f64 = totals.iter().sum();
    let eps = DEGENERATE_RATIO * grand;
    let mut out = Array3::zeros(code.shape());
    let mut degenerate = Vec::new();
    for (ch, (mut dst, src)) in out.outer_iter_mut().zip(code.values().outer_iter()).enumerate() {
        let total = totals[ch];
        if total <= 0.0 || total < eps {
            degenerate.push(ch);
            continue;
        }
        let scale = v.values()[ch] * grand / total;
        dst.zip_mut_with(&src, |d, &s| *d = s * scale);
    }
    if !degenerate.is_empty() {
        let dropped: f64 = degenerate.iter().map(|&ch| v.values()[ch]).sum();
        log::warn!(
            "{}: {} degenerate channel(s) left at zero, dropping {:.3e} of the energy",
            code.layer(),
            degenerate.len(),
            dropped
        );
    }
    let tag = match v.seed() {
        Some(s) => format!("realloc[{s}]"),
        None => "realloc".to_string(),
    };
    Ok(Reallocation {
        code: code.derived(out, &tag),
        degenerate,
    })
}

pub fn style_descriptor(code: &Code) -> StyleDescriptor {
    StyleDescriptor {
        layer: code.layer(),
        sums: channel_totals(code.values()),
        spatial_size: code.spatial_size(),
    }
}

pub fn gram_descriptor(code: &Code) -> GramDescriptor {
    let (c, m, n) = code.shape();
    let flat = code
        .values()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, m * n))
        .unwrap();
    GramDescriptor {
        layer: code.layer(),
        matrix: flat.dot(&flat.t()),
        spatial_size: m * n,
    }
}
