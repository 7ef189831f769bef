use rand::seq::SliceRandom;
use rand::Rng;

use super::config::visible_len;

/// Random split of stride positions into visible and masked sets. The class
/// token (position `n_strides`) is always visible and in neither set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub permutation: Vec<usize>,
    /// Ascending.
    pub visible: Vec<usize>,
    /// Ascending.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn n_strides(&self) -> usize {
        self.permutation.len()
    }

    /// Encoder input rows: visible strides then the class token.
    pub fn encoder_rows(&self) -> Vec<usize> {
        let mut rows = self.visible.clone();
        rows.push(self.n_strides());
        rows
    }

    /// For each original position, its row in `[encoder rows, masked rows]`.
    pub fn unshuffle(&self) -> Vec<usize> {
        let n = self.n_strides();
        let mut pos = vec![0; n + 1];
        for (i, &v) in self.visible.iter().enumerate() {
            pos[v] = i;
        }
        pos[n] = self.visible.len();
        for (j, &m) in self.masked.iter().enumerate() {
            pos[m] = self.visible.len() + 1 + j;
        }
        pos
    }

    /// A plan with every stride visible.
    pub fn all_visible(n_strides: usize) -> Self {
        Self {
            permutation: (0..n_strides).collect(),
            visible: (0..n_strides).collect(),
            masked: Vec::new(),
        }
    }
}

/// Draw a plan for a sequence of `seq_len` tokens (strides plus class token).
pub fn make_mask<R: Rng + ?Sized>(seq_len: usize, ratio: f64, rng: &mut R) -> MaskPlan {
    let n = seq_len.saturating_sub(1);
    let keep = (visible_len(seq_len, ratio) - 1).min(n);
    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(rng);
    let mut visible = permutation[..keep].to_vec();
    let mut masked = permutation[keep..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    MaskPlan {
        permutation,
        visible,
        masked,
    }
}
