mod arith;
mod conv;
mod linalg;
mod norm;
mod pool;
mod reduce;
mod shape;
mod unary;

pub use conv::Conv3dGeometry;
pub use norm::BatchNormStats;
pub use pool::PoolGeometry;
