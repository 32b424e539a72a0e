pub mod data;
pub mod hessian;
pub mod linalg;
pub mod net;
pub mod shift;
pub mod train;
