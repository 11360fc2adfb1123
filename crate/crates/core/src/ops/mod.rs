//! Forward and backward operators used by the networks.

mod activation;
mod conv;
mod norm;
mod pool;
mod upsample;

#[cfg(test)]
pub(crate) mod testing;

pub use activation::{argmax_channels, relu, relu_backward, softmax_backward, softmax_over_channels};
pub use conv::{classifier_1x1, classifier_params, conv2d, conv2d_backward, ConvParams, Filter, FilterGrad};
pub use norm::{
    batchnorm, batchnorm_backward, BatchNormGrad, BatchNormOutput, BatchNormParams, Mode,
    DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward, PoolParams};
pub use upsample::{
    bilinear_upsample, bilinear_upsample_backward, resize_bilinear, resize_shorter_side,
    shorter_side_extent,
};
