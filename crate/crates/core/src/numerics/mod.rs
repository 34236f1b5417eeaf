//! Dense math, the two trainable layers, Adam and a finite-difference checker.

mod adam;
mod gradcheck;
mod gru;
mod linear;
mod mat;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_difference_grad, relative_error};
pub use gru::{gru_backward, gru_forward, GateParams, GruCache, GruParams};
pub use linear::{linear_backward, linear_forward, LinearCache, LinearParams};
pub use mat::{dot, norm, sigmoid, Mat};
pub use rng::RngStream;

/// Named flat views over the blocks of a parameter set.
///
/// Block order is fixed per type; Adam state, checkpoints and the gradient
/// checker all rely on it.
pub trait Parameters {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn scalar_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// All scalars concatenated in block order.
    fn flatten(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    /// Inverse of [`Parameters::flatten`]. Panics on length mismatch.
    fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat parameter length");
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
    }

    fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}
