pub mod exprfield;
pub mod flow;
pub mod grid;
pub mod inverse;
pub mod jacobi;
pub mod phase;
pub mod random;
pub mod surface;
pub mod xray;
