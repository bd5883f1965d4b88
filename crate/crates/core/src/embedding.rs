//! Turning raw clip features into the token grid the attention blocks
//! consume: per-location linear projection, factorized spatial and temporal
//! positional embeddings, and a classification token at flat index 0.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-location features of one clip, shape `[frames, height, width, channels]`.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    features: Tensor,
}

impl ClipFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 4 {
            return Err(Error::Dimension {
                op: "clip_features",
                lhs: features.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok(ClipFeatures { features })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[3]
    }
}

/// Embedding parameters.
#[derive(Debug, Clone)]
pub struct EmbedParams {
    /// `[channels, embed_dim]`
    pub proj_weight: Tensor,
    /// `[embed_dim]`
    pub proj_bias: Tensor,
    /// `[height * width, embed_dim]`, shared across frames.
    pub spatial_pe: Tensor,
    /// `[frames, embed_dim]`, shared across positions within a frame.
    pub temporal_pe: Tensor,
    /// `[embed_dim]`
    pub cls_token: Tensor,
    /// `[embed_dim]`
    pub cls_pe: Tensor,
}

/// The token matrix consumed by attention blocks, with its grid geometry.
/// Row 0 is the classification token; grid token `(t, s)` lives at row
/// `1 + t * height * width + s`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    frames: usize,
    height: usize,
    width: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, frames: usize, height: usize, width: usize) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] != frames * height * width + 1 {
            return Err(Error::Dimension {
                op: "token_grid",
                lhs: tokens.shape().to_vec(),
                rhs: vec![frames * height * width + 1],
            });
        }
        Ok(TokenGrid {
            tokens,
            frames,
            height,
            width,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Number of grid tokens, excluding the classification token.
    pub fn grid_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub const CLS_INDEX: usize = 0;

    /// Token-matrix row of grid position `(frame, spatial)` where
    /// `spatial = y * width + x`.
    pub fn flat_index(&self, frame: usize, spatial: usize) -> usize {
        debug_assert!(frame < self.frames && spatial < self.height * self.width);
        1 + frame * self.height * self.width + spatial
    }
}

/// Projects clip features to embedding width: reshape to
/// `[frames * height * width, channels]`, multiply by the projection weight,
/// add the bias. Returns `[frames, height * width, embed_dim]`.
pub fn project(tape: &mut Tape, clip: &ClipFeatures, params: &EmbedParams) -> Result<Tensor> {
    if clip.channels() != params.proj_weight.shape()[0] {
        return Err(Error::Dimension {
            op: "project",
            lhs: clip.features().shape().to_vec(),
            rhs: params.proj_weight.shape().to_vec(),
        });
    }
    let locations = clip.frames() * clip.height() * clip.width();
    let flat = tape.reshape(clip.features(), vec![locations, clip.channels()])?;
    let projected = tape.matmul(&flat, &params.proj_weight)?;
    let biased = tape.add_row_vec(&projected, &params.proj_bias)?;
    let d = params.proj_weight.shape()[1];
    tape.reshape(&biased, vec![clip.frames(), clip.height() * clip.width(), d])
}

/// Assembles the token grid from projected features: adds the spatial
/// embedding of each position and the temporal embedding of each frame,
/// then prepends the classification token plus its own embedding.
pub fn assemble(
    tape: &mut Tape,
    projected: &Tensor,
    params: &EmbedParams,
    height: usize,
    width: usize,
) -> Result<TokenGrid> {
    if projected.rank() != 3 || projected.shape()[1] != height * width {
        return Err(Error::Dimension {
            op: "assemble",
            lhs: projected.shape().to_vec(),
            rhs: vec![height * width],
        });
    }
    let frames = projected.shape()[0];
    let spatial = height * width;
    let d = projected.shape()[2];
    if params.spatial_pe.shape() != [spatial, d] {
        return Err(Error::Dimension {
            op: "assemble",
            lhs: params.spatial_pe.shape().to_vec(),
            rhs: vec![spatial, d],
        });
    }
    if params.temporal_pe.shape() != [frames, d] {
        return Err(Error::Dimension {
            op: "assemble",
            lhs: params.temporal_pe.shape().to_vec(),
            rhs: vec![frames, d],
        });
    }

    let n = frames * spatial;
    let grid = tape.reshape(projected, vec![n, d])?;
    let spatial_idx: Vec<usize> = (0..n).map(|r| r % spatial).collect();
    let temporal_idx: Vec<usize> = (0..n).map(|r| r / spatial).collect();
    let spatial_rows = tape.select_rows(&params.spatial_pe, &spatial_idx)?;
    let temporal_rows = tape.select_rows(&params.temporal_pe, &temporal_idx)?;
    let with_spatial = tape.add(&grid, &spatial_rows)?;
    let with_both = tape.add(&with_spatial, &temporal_rows)?;

    let cls_tok = tape.reshape(&params.cls_token, vec![1, d])?;
    let cls_pe = tape.reshape(&params.cls_pe, vec![1, d])?;
    let cls = tape.add(&cls_tok, &cls_pe)?;

    let tokens = tape.concat_rows(&[&cls, &with_both])?;
    TokenGrid::new(tokens, frames, height, width)
}
