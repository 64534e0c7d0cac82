//! Structured erasure of the input-embedding matrix.
//!
//! Three kinds of partial view are supported, all acting on the composed
//! `L x d` matrix (so every embedding type is erased together):
//!
//! - **token**: `floor(ratio * L_eligible)` whole rows, sampled without replacement;
//! - **feature**: `floor(ratio * d)` whole columns, sampled without replacement;
//! - **span**: one contiguous run of `l = floor(ratio * L)` rows starting at a
//!   uniformly drawn `s in {0, ..., L - l}`.
//!
//! With `protect_cls` the classification token at row 0 is never erased.
//! Masks are applied as an elementwise product with a constant 0/1 matrix so
//! the graph routes zero gradient to erased entries.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Absorbs binary rounding in `ratio * extent` (e.g. `0.29 * 100`) before flooring.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum CutoffKind {
    None,
    Token,
    Feature,
    Span,
}

impl CutoffKind {
    pub const ALL_ERASING: [CutoffKind; 3] = [CutoffKind::Token, CutoffKind::Feature, CutoffKind::Span];

    pub fn as_str(self) -> &'static str {
        match self {
            CutoffKind::None => "none",
            CutoffKind::Token => "token",
            CutoffKind::Feature => "feature",
            CutoffKind::Span => "span",
        }
    }
}

impl fmt::Display for CutoffKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CutoffKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(CutoffKind::None),
            "token" => Ok(CutoffKind::Token),
            "feature" => Ok(CutoffKind::Feature),
            "span" => Ok(CutoffKind::Span),
            other => Err(Error::Config(format!("unknown cutoff kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    pub kind: CutoffKind,
    /// Fraction of the eligible extent to erase, in `[0, 1)`.
    pub cutoff_ratio: f64,
    /// Augmented views per example.
    pub n_samples: usize,
    pub protect_cls: bool,
}

impl Default for CutoffSpec {
    fn default() -> Self {
        CutoffSpec {
            kind: CutoffKind::None,
            cutoff_ratio: 0.0,
            n_samples: 1,
            protect_cls: true,
        }
    }
}

impl CutoffSpec {
    pub fn new(kind: CutoffKind, cutoff_ratio: f64, n_samples: usize, protect_cls: bool) -> Result<Self> {
        let spec = CutoffSpec {
            kind,
            cutoff_ratio,
            n_samples,
            protect_cls,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cutoff_ratio) {
            return Err(Error::Config(format!(
                "cutoff ratio {} outside [0, 1)",
                self.cutoff_ratio
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("cutoff needs at least one view".into()));
        }
        Ok(())
    }

    /// `floor(ratio * extent)`.
    pub fn count(&self, extent: usize) -> usize {
        let c = (self.cutoff_ratio * extent as f64 + COUNT_SLACK).floor() as usize;
        c.min(extent)
    }

    fn first_eligible(&self) -> usize {
        usize::from(self.protect_cls)
    }
}

/// A realized erasure. Index sets are sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CutoffMask {
    pub kind: CutoffKind,
    pub zeroed_rows: Vec<usize>,
    pub zeroed_cols: Vec<usize>,
    /// `(start, length)` for span masks.
    pub span: Option<(usize, usize)>,
}

impl CutoffMask {
    /// The identity mask: erases nothing.
    pub fn empty(kind: CutoffKind) -> Self {
        CutoffMask {
            kind,
            zeroed_rows: Vec::new(),
            zeroed_cols: Vec::new(),
            span: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed_rows.is_empty() && self.zeroed_cols.is_empty()
    }

    /// Dense `len x width` 0/1 keep-matrix.
    pub fn keep_matrix(&self, len: usize, width: usize) -> Result<Tensor> {
        if let Some(&r) = self.zeroed_rows.iter().find(|&&r| r >= len) {
            return Err(Error::MaskOutOfRange { index: r, extent: len });
        }
        if let Some(&c) = self.zeroed_cols.iter().find(|&&c| c >= width) {
            return Err(Error::MaskOutOfRange { index: c, extent: width });
        }
        let mut keep = Tensor::ones(&[len, width]);
        let data = keep.data_mut();
        for &r in &self.zeroed_rows {
            data[r * width..(r + 1) * width].fill(0.0);
        }
        for &c in &self.zeroed_cols {
            for r in 0..len {
                data[r * width + c] = 0.0;
            }
        }
        Ok(keep)
    }
}

fn sample_distinct<R: Rng + ?Sized>(rng: &mut R, offset: usize, extent: usize, count: usize) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = index::sample(rng, extent, count)
        .into_iter()
        .map(|i| i + offset)
        .collect();
    picked.sort_unstable();
    picked
}

/// Token cutoff over a sequence of length `len`.
pub fn sample_token_mask<R: Rng + ?Sized>(len: usize, spec: &CutoffSpec, rng: &mut R) -> CutoffMask {
    let first = spec.first_eligible().min(len);
    let eligible = len - first;
    let count = spec.count(eligible);
    CutoffMask {
        kind: CutoffKind::Token,
        zeroed_rows: sample_distinct(rng, first, eligible, count),
        zeroed_cols: Vec::new(),
        span: None,
    }
}

/// Feature cutoff over an embedding of width `width`.
pub fn sample_feature_mask<R: Rng + ?Sized>(width: usize, spec: &CutoffSpec, rng: &mut R) -> CutoffMask {
    CutoffMask {
        kind: CutoffKind::Feature,
        zeroed_rows: Vec::new(),
        zeroed_cols: sample_distinct(rng, 0, width, spec.count(width)),
        span: None,
    }
}

/// Span cutoff: `l = floor(ratio * len)`, start uniform over
/// `{first, ..., len - l}` where `first` is 1 when the CLS row is protected.
pub fn sample_span_mask<R: Rng + ?Sized>(len: usize, spec: &CutoffSpec, rng: &mut R) -> CutoffMask {
    let first = spec.first_eligible().min(len);
    let l = spec.count(len).min(len - first);
    if l == 0 {
        return CutoffMask::empty(CutoffKind::Span);
    }
    let start = rng.gen_range(first..=len - l);
    CutoffMask {
        kind: CutoffKind::Span,
        zeroed_rows: (start..start + l).collect(),
        zeroed_cols: Vec::new(),
        span: Some((start, l)),
    }
}

/// Draws one mask of the spec's kind for an `len x width` matrix.
pub fn sample_mask<R: Rng + ?Sized>(len: usize, width: usize, spec: &CutoffSpec, rng: &mut R) -> CutoffMask {
    match spec.kind {
        CutoffKind::None => CutoffMask::empty(CutoffKind::None),
        CutoffKind::Token => sample_token_mask(len, spec, rng),
        CutoffKind::Feature => sample_feature_mask(width, spec, rng),
        CutoffKind::Span => sample_span_mask(len, spec, rng),
    }
}

/// Erases the masked entries of `w` inside the graph. Unmasked entries are
/// multiplied by exactly 1.0 and so are bit-identical to the input.
pub fn apply_mask(g: &mut Graph, w: Var, mask: &CutoffMask) -> Result<Var> {
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 {
        return Err(Error::Format(format!("cutoff expects an L x d matrix, got {shape:?}")));
    }
    let keep = mask.keep_matrix(shape[0], shape[1])?;
    let keep = g.constant(&keep)?;
    Ok(g.mul(w, keep)?)
}

/// Same as [`apply_mask`] on a plain tensor.
pub fn apply_mask_tensor(w: &Tensor, mask: &CutoffMask) -> Result<Tensor> {
    let shape = w.shape();
    if shape.len() != 2 {
        return Err(Error::Format(format!("cutoff expects an L x d matrix, got {shape:?}")));
    }
    let keep = mask.keep_matrix(shape[0], shape[1])?;
    let data = w.data().iter().zip(keep.data()).map(|(a, k)| a * k).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// `n_samples` independent masks for an `len x width` input, drawn in order
/// from `rng`.
pub fn sample_views<R: Rng + ?Sized>(len: usize, width: usize, spec: &CutoffSpec, rng: &mut R) -> Vec<CutoffMask> {
    (0..spec.n_samples)
        .map(|_| sample_mask(len, width, spec, rng))
        .collect()
}

/// Builds `n_samples` augmented views of `w` inside the graph.
pub fn make_views<R: Rng + ?Sized>(
    g: &mut Graph,
    w: Var,
    spec: &CutoffSpec,
    rng: &mut R,
) -> Result<Vec<(CutoffMask, Var)>> {
    spec.validate()?;
    let shape = g.shape(w).to_vec();
    if shape.len() != 2 {
        return Err(Error::Format(format!("cutoff expects an L x d matrix, got {shape:?}")));
    }
    sample_views(shape[0], shape[1], spec, rng)
        .into_iter()
        .map(|m| {
            let v = apply_mask(g, w, &m)?;
            Ok((m, v))
        })
        .collect()
}
