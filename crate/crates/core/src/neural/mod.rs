//! Toy-scale forward passes of the tracker's feature blocks and its losses.
//!
//! Blocks consume `N x d` feature matrices and are deterministic given
//! seeded [`BlockWeights`]. Losses come with analytic gradients with respect
//! to keypoint coordinates.

pub mod blocks;
pub mod losses;
pub mod ops;
pub mod triplane;
pub mod weights;

pub use blocks::{
    keypoint_projection_forward, lowrank_fusion, lowrank_fusion_with_pooling, shape_filter_decode,
    shape_filter_inputs, temporal_encode, wsa_forward,
};
pub use losses::{
    loss_aux, loss_aux_with_grad, loss_matching, loss_matching_grad, loss_mvc, loss_mvc_with_grad,
    loss_pose, rotation_loss, rotation_loss_grad, translation_loss_with_grad, LossTerms,
    LossWeights, MatchingLoss, PoseLoss,
};
pub use ops::FeatureMatrix;
pub use triplane::{triplane_sample, FeaturePlane, PlaneAxis, TriplaneFeatures, TriplaneSample};
pub use weights::{BlockWeights, NeuralConfig};
