pub mod autodiff;
pub mod decomp;
pub mod matrix;
pub mod rng;
pub mod softmax;
