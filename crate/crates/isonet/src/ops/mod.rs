//! Forward and backward implementations of every operator the architectures
//! use: convolutions, the spatial rearrangements (S2D/D2S/S2B/B2S),
//! resampling, squeeze-excite, batch norm, activations, and the classifier
//! pieces.
//!
//! All operators are pure functions; backward variants take the saved forward
//! inputs explicitly. Heavy kernels may parallelize internally, but every
//! output element is owned by exactly one worker and accumulated in a fixed
//! order, so results are bit-identical regardless of thread count.

mod activation;
mod conv;
mod dense;
mod norm;
mod rearrange;
mod resample;
mod se;

pub use activation::{
    hard_sigmoid, hard_sigmoid_grad, hard_swish, hard_swish_backward, relu, relu_backward,
    softmax_cross_entropy, softmax_cross_entropy_backward, CrossEntropySaved,
};
pub use conv::{conv2d, conv2d_backward, conv_output_len, ConvGrads, ConvParams, Padding};
pub use dense::{
    fully_connected, fully_connected_backward, global_avg_pool, global_avg_pool_backward, FcGrads,
};
pub use norm::{batch_norm, batch_norm_backward, BnGrads, BnMode, BnSaved, BnStats};
pub use rearrange::{
    batch_to_space, depth_to_space, space_to_batch, space_to_depth, BlockRearrange,
    RearrangeDirection,
};
pub use resample::{upsample, upsample_backward, UpsampleMode};
pub use se::{squeeze_excite, squeeze_excite_backward, SeGrads, SeSaved, SqueezeExciteParams};
