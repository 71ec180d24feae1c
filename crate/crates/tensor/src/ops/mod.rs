mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

pub use conv::conv2d_output_extent;
