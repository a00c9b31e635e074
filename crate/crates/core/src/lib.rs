pub mod jet;
pub mod lagrangian;
pub mod nelson;
pub mod noether;
pub mod quadrature;
pub mod sde;
pub mod variational;
pub mod stochastic;
