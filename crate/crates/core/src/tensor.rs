//! Dense row-major `channels x positions` feature maps.
//!
//! The desk-scale analogue of a `c x h x w` activation: spatial structure is
//! flattened to a single position axis, which is all the losses and distance
//! metrics ever look at.

use crate::error::{DmrError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    positions: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, positions: usize) -> Self {
        FeatureMap {
            channels,
            positions,
            data: vec![0.0; channels * positions],
        }
    }

    pub fn from_vec(channels: usize, positions: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * positions {
            return Err(DmrError::InvalidInput(format!(
                "feature map {}x{} needs {} values, got {}",
                channels,
                positions,
                channels * positions,
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            positions,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, c: usize, s: usize) -> f64 {
        debug_assert!(c < self.channels && s < self.positions);
        self.data[c * self.positions + s]
    }

    #[inline]
    pub fn set(&mut self, c: usize, s: usize, v: f64) {
        debug_assert!(c < self.channels && s < self.positions);
        self.data[c * self.positions + s] = v;
    }

    /// Row slice for one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.positions..(c + 1) * self.positions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Mean over all elements. Errors on an empty map.
    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(DmrError::InvalidInput("mean of empty feature map".into()));
        }
        Ok(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let m = FeatureMap::from_vec(2, 3, vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0]).unwrap();
        assert_eq!(m.get(0, 2), 2.0);
        assert_eq!(m.get(1, 0), 10.0);
        assert_eq!(m.channel(1), &[10.0, 11.0, 12.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(FeatureMap::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn mean_matches_hand_sum() {
        let m = FeatureMap::from_vec(1, 4, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        assert_eq!(m.mean().unwrap(), 3.0);
    }
}
