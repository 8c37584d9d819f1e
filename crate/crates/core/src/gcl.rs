//! Geometric consensus: simulate multi-view observation by exact 90-degree
//! rotations, predict per view, inverse-transform, and aggregate.
//!
//! Only quarter-turn view sets (K in {1, 2, 4}) are supported; those
//! rotations are pure index permutations on square grids, so every
//! round trip is lossless.

use crate::error::{Error, Result};
use crate::maps::ProbMap;
use crate::numerics::{Tape, Tensor, Value};
use crate::vlm::{similarity_value, text_rows_value, AdapterOverlay, FrozenModel, TextEmbeddings};

/// Evenly spaced rotation views; view k observes at angle 2*pi*k/K, so
/// view K is always the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSet {
    count: usize,
}

impl ViewSet {
    pub fn new(count: usize) -> Result<ViewSet> {
        if matches!(count, 1 | 2 | 4) {
            Ok(ViewSet { count })
        } else {
            Err(Error::UnsupportedViewCount(count))
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Quarter turns for view k (1-based): 2*pi*k/K as multiples of pi/2.
    pub fn quarter_turns(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.count {
            return Err(Error::ConfigError(format!(
                "view {k} outside 1..={}",
                self.count
            )));
        }
        Ok((4 * k / self.count) % 4)
    }
}

/// How per-view maps combine into the consensus target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    /// Elementwise mean (the default consensus).
    Mean,
    /// Elementwise maximum (the pseudo-label ablation strategy).
    Max,
}

/// Row permutation realizing a counterclockwise quarter-turn rotation on a
/// square side x side grid flattened row-major: out[i] = in[perm[i]].
fn rotation_perm(side: usize, quarters: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let src = match quarters % 4 {
                0 => (i, j),
                1 => (j, side - 1 - i),
                2 => (side - 1 - i, side - 1 - j),
                3 => (side - 1 - j, i),
                _ => unreachable!(),
            };
            perm.push(src.0 * side + src.1);
        }
    }
    perm
}

fn grid_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(Error::ShapeMismatch(format!(
            "rotation expects a [h x w x c] tensor, got {:?}",
            x.shape()
        ))),
    }
}

fn rotate_quarters(x: &Tensor, quarters: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(x)?;
    if h != w {
        return Err(Error::NonSquareInput {
            height: h,
            width: w,
        });
    }
    if quarters.is_multiple_of(4) {
        return Ok(x.clone());
    }
    let perm = rotation_perm(h, quarters);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for &cell in &perm {
        out.extend_from_slice(&src[cell * c..(cell + 1) * c]);
    }
    Ok(Tensor::new(vec![h, w, c], out))
}

fn quarters_for(k: usize, views: usize) -> Result<usize> {
    ViewSet::new(views)?.quarter_turns(k)
}

/// Rotates a square [h x w x c] tensor counterclockwise by 2*pi*k/K.
/// The rotation is a permutation of entries; k = K is the identity.
pub fn rotate(x: &Tensor, k: usize, views: usize) -> Result<Tensor> {
    rotate_quarters(x, quarters_for(k, views)?)
}

/// Exact inverse of [`rotate`] with the same arguments.
pub fn inverse_rotate(x: &Tensor, k: usize, views: usize) -> Result<Tensor> {
    let q = quarters_for(k, views)?;
    rotate_quarters(x, (4 - q) % 4)
}

/// Geometric consensus target plus the per-view maps (already returned to
/// the original orientation) that produced it.
#[derive(Debug, Clone)]
pub struct GeoConsensus {
    pub target: ProbMap,
    pub per_view: Vec<ProbMap>,
}

/// Per-view predictions as tape values, inverse-rotated to the original
/// orientation. `identity_features` are the unrotated view's features,
/// shared with the semantic branch.
pub(crate) struct TrackedViews {
    pub maps: Vec<Value>,
    pub identity_features: Value,
}

pub(crate) fn tracked_views(
    model: &FrozenModel,
    tape: &Tape,
    img: &Tensor,
    text: &TextEmbeddings,
    views: ViewSet,
    overlay: Option<&AdapterOverlay>,
    softmax_views: bool,
) -> Result<TrackedViews> {
    let side = model.config().grid_side();
    let text_rows = text_rows_value(text);
    let mut maps = Vec::with_capacity(views.count());
    let mut identity_features = None;
    for k in 1..=views.count() {
        let q = views.quarter_turns(k)?;
        let rotated = rotate_quarters(img, q)?;
        let features = model.features_value(tape, &rotated, overlay)?;
        let mut map = similarity_value(tape, &features, &text_rows)?;
        if softmax_views {
            map = tape.softmax_rows(&map, 1.0)?;
        }
        if q != 0 {
            map = tape.permute_rows(&map, rotation_perm(side, (4 - q) % 4))?;
        } else {
            identity_features = Some(features);
        }
        maps.push(map);
    }
    let identity_features =
        identity_features.ok_or_else(|| Error::Internal("no identity view in set".into()))?;
    Ok(TrackedViews {
        maps,
        identity_features,
    })
}

/// Combines same-shape view maps into a consensus target.
/// The mean reduces in ascending view order for bit reproducibility.
pub fn aggregate_views(per_view: &[ProbMap], aggregation: Aggregation) -> Result<ProbMap> {
    match aggregation {
        Aggregation::Mean => ProbMap::mean(per_view),
        Aggregation::Max => ProbMap::max(per_view),
    }
}

/// Pseudo-label ablation target: elementwise maximum over views.
pub fn gcl_target_pl(per_view: &[ProbMap]) -> Result<ProbMap> {
    aggregate_views(per_view, Aggregation::Max)
}

/// Frozen-model geometric consensus at grid resolution.
pub fn gcl_target(
    model: &FrozenModel,
    img: &Tensor,
    text: &TextEmbeddings,
    views: ViewSet,
    aggregation: Aggregation,
    softmax_views: bool,
) -> Result<GeoConsensus> {
    let tape = Tape::new();
    let tracked = tracked_views(model, &tape, img, text, views, None, softmax_views)?;
    let side = model.config().grid_side();
    let per_view: Vec<ProbMap> = tracked
        .maps
        .iter()
        .map(|v| ProbMap::from_flat(side, side, text.count(), tape.detach(v)))
        .collect::<Result<_>>()?;
    let target = aggregate_views(&per_view, aggregation)?;
    Ok(GeoConsensus { target, per_view })
}
