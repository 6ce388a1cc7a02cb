mod conv;
mod elementwise;
mod linalg;
mod reduce;
mod shape;
mod spatial;

pub use conv::{ConvOpts, PadMode};
pub use reduce::softmax_row;
pub use spatial::resize_bilinear_planes;
