//! Kolmogorov-Arnold network ODEs: KAN layers, adaptive ODE integration, adjoint
//! training, benchmark problems and symbolic extraction.

pub mod experiments;
pub mod io;
pub mod kan;
pub mod odeint;
pub mod problems;
pub mod symbolic;
pub mod training;
