//! Forward and backward passes of the primitive layers.

pub mod activation;
pub mod batchnorm;
pub mod conv3d;
pub mod conv4d;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, BatchNormParams, BnCache, BnGrads, Mode,
};
pub use conv3d::{conv3d_backward, conv3d_forward, conv3d_macs, Conv3dParams, ConvGrads};
pub use conv4d::{
    conv4d_backward, conv4d_forward_decomposed, conv4d_forward_direct, conv4d_macs, Conv4dParams,
    KernelForm,
};
pub use linear::{fully_connected, fully_connected_backward, LinearGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool3d, maxpool3d_backward, PoolWindow,
};
