pub mod activ;
pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod resize;
pub mod sampler;
pub mod softmax;
pub mod spectral;
