//! Seeded synthetic batches.

use ndarray::Array2;

use super::model::{Lcg, SEQ, VOCAB};
use crate::artifact::TensorArtifact;
use crate::contract::names;
use crate::kernels::IGNORE_INDEX;

pub const PAD_ID: i64 = 0;
/// Probability that a supervised label is replaced by the ignore index.
const IGNORE_RATE: f64 = 0.2;
/// Shared prompt length of preference pairs.
const PROMPT_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBatch {
    pub input_ids: Array2<i64>,
    pub attention_mask: Array2<i64>,
    pub labels: Array2<i64>,
    pub position_ids: Array2<i64>,
}

impl ToyBatch {
    /// `groups` independent sequences; `paired` doubles them into
    /// chosen rows followed by rejected rows sharing each prompt.
    pub fn generate(seed: u64, groups: usize, paired: bool) -> Self {
        let mut g = Lcg::new(seed ^ 0x9E37_79B9_7F4A_7C15);
        let rows = if paired { 2 * groups } else { groups };
        let mut ids = Array2::<i64>::zeros((rows, SEQ));
        let mut mask = Array2::<i64>::ones((rows, SEQ));
        let mut labels = Array2::<i64>::zeros((rows, SEQ));
        let token = |g: &mut Lcg| 1 + g.below(VOCAB as u64 - 1) as i64;

        for r in 0..rows {
            let group = r % groups;
            for t in 0..SEQ {
                ids[[r, t]] = if paired && r >= groups && t < PROMPT_LEN { ids[[group, t]] } else { token(&mut g) };
            }
            let padded = groups >= 2 && group % 2 == 1;
            let len = if padded { SEQ - 1 } else { SEQ };
            for t in 0..SEQ {
                labels[[r, t]] = if t == 0 || t >= len || (paired && t < PROMPT_LEN) {
                    IGNORE_INDEX
                } else if g.uniform() < IGNORE_RATE {
                    IGNORE_INDEX
                } else {
                    ids[[r, t]]
                };
            }
            labels[[r, len - 1]] = ids[[r, len - 1]];
            for t in len..SEQ {
                ids[[r, t]] = PAD_ID;
                mask[[r, t]] = 0;
            }
        }
        let position_ids = Array2::from_shape_fn((rows, SEQ), |(_, t)| t as i64);
        Self { input_ids: ids, attention_mask: mask, labels, position_ids }
    }

    pub fn rows(&self) -> usize {
        self.input_ids.nrows()
    }

    pub fn mask_f64(&self) -> Array2<f64> {
        self.attention_mask.mapv(|m| m as f64)
    }

    pub fn artifacts(&self) -> Vec<TensorArtifact> {
        let t = |name: &str, a: &Array2<i64>| {
            TensorArtifact::i64(name, vec![a.nrows(), a.ncols()], a.as_slice().expect("contiguous"))
        };
        vec![
            t(names::INPUT_IDS, &self.input_ids),
            t(names::ATTENTION_MASK, &self.attention_mask),
            t(names::LABELS, &self.labels),
            t(names::POSITION_IDS, &self.position_ids),
        ]
    }

    /// Index of the last attended token of each row.
    pub fn last_token_index(&self, row: usize) -> usize {
        (0..SEQ).rev().find(|&t| self.attention_mask[[row, t]] != 0).unwrap_or(0)
    }
}
