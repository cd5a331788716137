//! Three-axis rotary position embeddings.
//!
//! The head dimension is split into three even slices that rotate by the
//! column, row and prefix index of a token. Spatial coordinates are divided
//! by a resolution scale before rotation so a grid sampled at twice the
//! density lines up with the coarse grid.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

pub const ROPE_BASE: f64 = 10_000.0;

/// Where a token sits: grid column, grid row, prefix index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenPosition {
    pub x: u32,
    pub y: u32,
    pub t: u32,
}

impl TokenPosition {
    pub fn grid(x: u32, y: u32) -> Self {
        TokenPosition { x, y, t: 0 }
    }

    pub fn prefix(t: u32) -> Self {
        TokenPosition { x: 0, y: 0, t }
    }
}

/// Lengths of the x, y and t slices of one attention head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RopeSplit {
    pub x: usize,
    pub y: usize,
    pub t: usize,
}

impl RopeSplit {
    /// 3/8, 3/8 and the remaining quarter of `head_dim`, each rounded down
    /// to an even length.
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        let spatial = (3 * head_dim / 8) & !1;
        Self::new(spatial, spatial, head_dim.saturating_sub(2 * spatial))
    }

    pub fn new(x: usize, y: usize, t: usize) -> Result<Self> {
        if !x.is_multiple_of(2) || !y.is_multiple_of(2) || !t.is_multiple_of(2) {
            return Err(Error::Config(format!("rope slices must be even, got ({}, {}, {})", x, y, t)));
        }
        Ok(RopeSplit { x, y, t })
    }

    pub fn head_dim(&self) -> usize {
        self.x + self.y + self.t
    }
}

/// Per-row cosines and sines for adjacent channel pairs, laid out
/// `[rows, head_dim / 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub rows: usize,
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(split: RopeSplit, positions: &[TokenPosition], scale: f64) -> Result<Self> {
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Config(format!("rope scale must be positive, got {}", scale)));
        }
        let angles = Self::angles(split, positions, scale);
        let half = split.head_dim() / 2;
        Ok(RopeTable {
            rows: positions.len(),
            half,
            cos: angles.iter().map(|&a| math::cos(a)).collect(),
            sin: angles.iter().map(|&a| math::sin(a)).collect(),
        })
    }

    /// The sub-table for rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> RopeTable {
        let h = self.half;
        RopeTable {
            rows: end - start,
            half: h,
            cos: self.cos[start * h..end * h].to_vec(),
            sin: self.sin[start * h..end * h].to_vec(),
        }
    }

    /// Rotation angle of every (row, pair).
    pub fn angles(split: RopeSplit, positions: &[TokenPosition], scale: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(positions.len() * split.head_dim() / 2);
        for p in positions {
            let coords = [
                (p.x as f64 / scale, split.x),
                (p.y as f64 / scale, split.y),
                (p.t as f64, split.t),
            ];
            for (pos, len) in coords {
                for i in 0..len / 2 {
                    let freq = math::pow(ROPE_BASE, -((2 * i) as f64) / len as f64);
                    out.push(pos * freq);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{forward, Op};
    use crate::tensor::Tensor;
    use alloc::rc::Rc;
    use alloc::vec;

    #[test]
    fn default_split() {
        assert_eq!(RopeSplit::for_head_dim(64).unwrap(), RopeSplit { x: 24, y: 24, t: 16 });
        assert_eq!(RopeSplit::for_head_dim(16).unwrap().head_dim(), 16);
        assert!(RopeSplit::new(3, 3, 2).is_err());
    }

    #[test]
    fn origin_is_the_identity() {
        let split = RopeSplit::for_head_dim(16).unwrap();
        let table = RopeTable::new(split, &[TokenPosition::grid(0, 0)], 1.0).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16], |i| i as f64 - 7.5).unwrap();
        let y = forward(&Op::Rope(Rc::new(table)), &[&x]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn scale_rescales_spatial_positions() {
        let split = RopeSplit::for_head_dim(32).unwrap();
        let fine = [TokenPosition { x: 6, y: 4, t: 0 }, TokenPosition { x: 0, y: 0, t: 3 }];
        let coarse = [TokenPosition { x: 3, y: 2, t: 0 }, TokenPosition { x: 0, y: 0, t: 3 }];
        assert_eq!(RopeTable::angles(split, &fine, 2.0), RopeTable::angles(split, &coarse, 1.0));
    }

    #[test]
    fn rotation_preserves_pair_norms() {
        let split = RopeSplit::for_head_dim(16).unwrap();
        let pos = vec![TokenPosition { x: 5, y: 1, t: 2 }, TokenPosition::grid(3, 7)];
        let table = RopeTable::new(split, &pos, 1.0).unwrap();
        let x = Tensor::from_fn(&[2, 16], |i| ((i * 7919) % 13) as f64 - 6.0).unwrap();
        let y = forward(&Op::Rope(Rc::new(table)), &[&x]).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = a[0] * a[0] + a[1] * a[1];
            let nb = b[0] * b[0] + b[1] * b[1];
            assert!((na - nb).abs() < 1e-12);
        }
    }
}
