//! Capture options, head masks, and the trace bundle a forward pass fills.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numcore::Tensor;
use crate::tasks::SegmentMap;

/// Which sequence positions the per-position captures keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapturePositions {
    All,
    /// Keep only the forerunner row (requires a segment map).
    ForerunnerOnly,
}

/// What a forward pass should record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub residuals: bool,
    pub attention: bool,
    pub head_contributions: bool,
    pub mlp_contributions: bool,
    pub positions: CapturePositions,
}

impl CaptureOptions {
    pub fn none() -> Self {
        CaptureOptions {
            residuals: false,
            attention: false,
            head_contributions: false,
            mlp_contributions: false,
            positions: CapturePositions::All,
        }
    }

    pub fn full() -> Self {
        CaptureOptions {
            residuals: true,
            attention: true,
            head_contributions: true,
            mlp_contributions: true,
            positions: CapturePositions::All,
        }
    }

    /// Residual streams only, stored at the forerunner position. The probe
    /// dataset builder uses this to keep memory flat.
    pub fn forerunner_residuals() -> Self {
        CaptureOptions {
            residuals: true,
            attention: false,
            head_contributions: false,
            mlp_contributions: false,
            positions: CapturePositions::ForerunnerOnly,
        }
    }

    pub fn any(&self) -> bool {
        self.residuals || self.attention || self.head_contributions || self.mlp_contributions
    }
}

/// Set of (layer, head) pairs whose residual-stream contributions are
/// zeroed during the forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    masked: BTreeSet<(usize, usize)>,
}

impl HeadMask {
    pub fn empty() -> Self {
        HeadMask::default()
    }

    pub fn from_pairs(
        pairs: &[(usize, usize)],
        n_layers: usize,
        n_heads: usize,
    ) -> Result<Self, ModelError> {
        let mut masked = BTreeSet::new();
        for &(layer, head) in pairs {
            if layer >= n_layers || head >= n_heads {
                return Err(ModelError::HeadOutOfRange {
                    layer,
                    head,
                    n_layers,
                    n_heads,
                });
            }
            masked.insert((layer, head));
        }
        Ok(HeadMask { masked })
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.masked.contains(&(layer, head))
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.masked.iter().copied()
    }

    pub fn union(&self, other: &HeadMask) -> HeadMask {
        HeadMask {
            masked: self.masked.union(&other.masked).copied().collect(),
        }
    }

    pub fn intersects(&self, other: &HeadMask) -> bool {
        self.masked.intersection(&other.masked).next().is_some()
    }
}

/// Per-position storage for one captured quantity: either all rows of the
/// sequence or just the forerunner row.
#[derive(Debug, Clone)]
pub struct PositionRows {
    rows: Tensor<f64>,
    captured: CapturedRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CapturedRows {
    All,
    Single(usize),
}

impl PositionRows {
    fn new(rows: Tensor<f64>, captured: CapturedRows) -> Self {
        PositionRows { rows, captured }
    }

    /// The captured row for an absolute sequence position.
    pub fn at(&self, pos: usize) -> Result<&[f64], ModelError> {
        match self.captured {
            CapturedRows::All => {
                if pos >= self.rows.shape()[0] {
                    return Err(ModelError::NotCaptured("position beyond sequence"));
                }
                Ok(self.rows.row(pos))
            }
            CapturedRows::Single(p) if p == pos => Ok(self.rows.row(0)),
            CapturedRows::Single(_) => Err(ModelError::NotCaptured(
                "only the forerunner row was captured",
            )),
        }
    }

    pub fn full(&self) -> Result<&Tensor<f64>, ModelError> {
        match self.captured {
            CapturedRows::All => Ok(&self.rows),
            CapturedRows::Single(_) => Err(ModelError::NotCaptured(
                "only the forerunner row was captured",
            )),
        }
    }
}

/// Everything a forward pass can expose to the analyses: residual streams
/// h_l at every layer boundary, per-head attention matrices, per-head and
/// MLP contributions to the residual stream, and the episode segmentation.
#[derive(Debug, Clone)]
pub struct TraceBundle {
    pub seq_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub segment_map: Option<SegmentMap>,
    /// n_layers + 1 entries: boundary 0 is the embedding output, boundary
    /// l+1 the stream after layer l.
    residuals: Option<Vec<PositionRows>>,
    /// [layer][head], None for masked heads (their pattern is not computed).
    attention: Option<Vec<Vec<Option<Tensor<f64>>>>>,
    /// [layer][head] additive residual contribution; exactly zero rows for
    /// masked heads.
    head_contributions: Option<Vec<Vec<PositionRows>>>,
    /// [layer] MLP additive residual contribution.
    mlp_contributions: Option<Vec<PositionRows>>,
}

impl TraceBundle {
    pub(super) fn new(
        seq_len: usize,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        segment_map: Option<SegmentMap>,
    ) -> Self {
        TraceBundle {
            seq_len,
            n_layers,
            n_heads,
            d_model,
            segment_map,
            residuals: None,
            attention: None,
            head_contributions: None,
            mlp_contributions: None,
        }
    }

    pub(super) fn init_storage(&mut self, capture: &CaptureOptions) {
        if capture.residuals {
            self.residuals = Some(Vec::with_capacity(self.n_layers + 1));
        }
        if capture.attention {
            self.attention = Some(Vec::with_capacity(self.n_layers));
        }
        if capture.head_contributions {
            self.head_contributions = Some(Vec::with_capacity(self.n_layers));
        }
        if capture.mlp_contributions {
            self.mlp_contributions = Some(Vec::with_capacity(self.n_layers));
        }
    }

    fn position_rows(full: &Tensor<f64>, keep: Option<usize>) -> PositionRows {
        match keep {
            None => PositionRows::new(full.clone(), CapturedRows::All),
            Some(p) => {
                let row = full.row(p).to_vec();
                PositionRows::new(
                    Tensor::from_vec(vec![1, full.shape()[1]], row).expect("row shape"),
                    CapturedRows::Single(p),
                )
            }
        }
    }

    pub(super) fn push_residual(&mut self, full: &Tensor<f64>, keep: Option<usize>) {
        if let Some(store) = &mut self.residuals {
            store.push(Self::position_rows(full, keep));
        }
    }

    pub(super) fn push_attention_layer(&mut self, layer: Vec<Option<Tensor<f64>>>) {
        if let Some(store) = &mut self.attention {
            store.push(layer);
        }
    }

    pub(super) fn push_contribution_layer(
        &mut self,
        layer: Vec<(Tensor<f64>, Option<usize>)>,
    ) {
        if let Some(store) = &mut self.head_contributions {
            store.push(
                layer
                    .into_iter()
                    .map(|(t, keep)| Self::position_rows(&t, keep))
                    .collect(),
            );
        }
    }

    pub(super) fn push_mlp_contribution(&mut self, full: &Tensor<f64>, keep: Option<usize>) {
        if let Some(store) = &mut self.mlp_contributions {
            store.push(Self::position_rows(full, keep));
        }
    }

    /// Bare trace carrying only attention matrices; test fixture.
    #[cfg(test)]
    pub(crate) fn synthetic_attention(
        seq_len: usize,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        segment_map: SegmentMap,
        attention: Vec<Vec<Option<Tensor<f64>>>>,
    ) -> Self {
        TraceBundle {
            seq_len,
            n_layers,
            n_heads,
            d_model,
            segment_map: Some(segment_map),
            residuals: None,
            attention: Some(attention),
            head_contributions: None,
            mlp_contributions: None,
        }
    }

    /// Forerunner index from the segment map.
    pub fn forerunner(&self) -> Result<usize, ModelError> {
        self.segment_map
            .as_ref()
            .map(|m| m.forerunner)
            .ok_or(ModelError::NotCaptured("segment map"))
    }

    /// Residual stream h at a layer boundary (0..=n_layers) and position.
    pub fn residual(&self, boundary: usize, pos: usize) -> Result<&[f64], ModelError> {
        let store = self
            .residuals
            .as_ref()
            .ok_or(ModelError::NotCaptured("residual streams"))?;
        store
            .get(boundary)
            .ok_or(ModelError::NotCaptured("layer boundary out of range"))?
            .at(pos)
    }

    pub fn n_boundaries(&self) -> usize {
        self.n_layers + 1
    }

    /// Post-softmax attention matrix of one head; None if the head was
    /// masked.
    pub fn attention(&self, layer: usize, head: usize) -> Result<Option<&Tensor<f64>>, ModelError> {
        let store = self
            .attention
            .as_ref()
            .ok_or(ModelError::NotCaptured("attention"))?;
        Ok(store[layer][head].as_ref())
    }

    /// One head's additive residual-stream contribution at a position: its
    /// slice of the attention output pushed through its slice of the output
    /// projection. Exactly zero for masked heads.
    pub fn head_contribution(
        &self,
        layer: usize,
        head: usize,
        pos: usize,
    ) -> Result<&[f64], ModelError> {
        let store = self
            .head_contributions
            .as_ref()
            .ok_or(ModelError::NotCaptured("head contributions"))?;
        store[layer][head].at(pos)
    }

    pub fn mlp_contribution(&self, layer: usize, pos: usize) -> Result<&[f64], ModelError> {
        let store = self
            .mlp_contributions
            .as_ref()
            .ok_or(ModelError::NotCaptured("mlp contributions"))?;
        store[layer].at(pos)
    }

    /// Max relative error of the residual recomposition
    /// h_{l+1} = h_l + sum_h o_{l,h} + mlp_l across all layers and captured
    /// positions.
    pub fn recomposition_error(&self) -> Result<f64, ModelError> {
        let mut worst: f64 = 0.0;
        let positions: Vec<usize> = match self.residuals.as_ref().and_then(|r| r.first()) {
            Some(rows) if rows.full().is_ok() => (0..self.seq_len).collect(),
            _ => vec![self.forerunner()?],
        };
        for layer in 0..self.n_layers {
            for &pos in &positions {
                let base = self.residual(layer, pos)?;
                let next = self.residual(layer + 1, pos)?;
                let mlp = self.mlp_contribution(layer, pos)?;
                let mut recomposed = base.to_vec();
                for head in 0..self.n_heads {
                    let o = self.head_contribution(layer, head, pos)?;
                    for (r, &v) in recomposed.iter_mut().zip(o) {
                        *r += v;
                    }
                }
                for (r, &v) in recomposed.iter_mut().zip(mlp) {
                    *r += v;
                }
                let norm: f64 = next.iter().map(|v| v * v).sum::<f64>().sqrt();
                let diff: f64 = recomposed
                    .iter()
                    .zip(next)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(diff / norm.max(1e-12));
            }
        }
        Ok(worst)
    }
}
