use std::ops::Range;

use crate::error::{ensure, Error, Result};

/// Token layout of a frame-blocked sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLayout {
    /// Patch tokens plus register tokens.
    pub tokens_per_frame: usize,
    pub num_frames: usize,
}

impl FrameLayout {
    pub fn new(tokens_per_frame: usize, num_frames: usize) -> Self {
        Self { tokens_per_frame, num_frames }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens_per_frame * self.num_frames
    }

    pub fn frame_of(&self, token: usize) -> usize {
        token / self.tokens_per_frame
    }

    pub fn token_range(&self, frame: usize) -> Range<usize> {
        frame * self.tokens_per_frame..(frame + 1) * self.tokens_per_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskKind {
    /// Frames 0 and 1 see each other; every later frame sees itself and
    /// everything before it.
    CausalFull2,
    Full,
    /// A fully connected prefix followed by causal frames.
    Mixed,
}

/// Frame-granular inter-frame attention pattern. Expanded to token level on
/// demand; attention inside a frame is always all-to-all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    prefix_frames: usize,
    layout: FrameLayout,
}

impl AttentionMask {
    pub fn build(kind: MaskKind, layout: FrameLayout, prefix_frames: Option<usize>) -> Result<Self> {
        let prefix_frames = match kind {
            MaskKind::Mixed => {
                let p = prefix_frames
                    .ok_or_else(|| Error::Config("mixed mask requires prefix_frames".into()))?;
                ensure!(
                    p <= layout.num_frames,
                    Config,
                    "prefix_frames {} exceeds {} frames",
                    p,
                    layout.num_frames
                );
                p
            }
            _ => 0,
        };
        Ok(Self { kind, prefix_frames, layout })
    }

    pub fn causal_full2(layout: FrameLayout) -> Self {
        Self { kind: MaskKind::CausalFull2, prefix_frames: 0, layout }
    }

    pub fn full(layout: FrameLayout) -> Self {
        Self { kind: MaskKind::Full, prefix_frames: 0, layout }
    }

    pub fn mixed(layout: FrameLayout, prefix_frames: usize) -> Result<Self> {
        Self::build(MaskKind::Mixed, layout, Some(prefix_frames))
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn prefix_frames(&self) -> usize {
        self.prefix_frames
    }

    pub fn layout(&self) -> FrameLayout {
        self.layout
    }

    /// Whether query frame `i` may attend to key frame `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self.kind {
            MaskKind::Full => true,
            MaskKind::CausalFull2 => j <= i || (i < 2 && j < 2),
            MaskKind::Mixed => {
                let p = self.prefix_frames;
                if i < p {
                    j < p
                } else {
                    j <= i
                }
            }
        }
    }

    pub fn frame_matrix(&self) -> Vec<Vec<bool>> {
        let n = self.layout.num_frames;
        (0..n).map(|i| (0..n).map(|j| self.allows(i, j)).collect()).collect()
    }

    /// Row-major token mask for queries in `query_frames` against keys in
    /// `key_frames`.
    pub fn token_mask(&self, query_frames: Range<usize>, key_frames: Range<usize>) -> Vec<bool> {
        let t = self.layout.tokens_per_frame;
        let cols = key_frames.len() * t;
        let mut out = Vec::with_capacity(query_frames.len() * t * cols);
        for i in query_frames {
            let row: Vec<bool> = key_frames
                .clone()
                .flat_map(|j| std::iter::repeat_n(self.allows(i, j), t))
                .collect();
            for _ in 0..t {
                out.extend_from_slice(&row);
            }
        }
        out
    }
}
