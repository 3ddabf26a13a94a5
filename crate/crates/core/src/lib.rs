//! Learned SR1 (L-SR1): a learned second-order optimizer built from a
//! limited-memory buffer of generated rank-one vectors, meta-trained through
//! unrolled inner optimization with a secant penalty, plus the classical
//! baselines and performance-profile machinery used to evaluate it.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod lsr1;
pub mod metatrain;
pub mod model;
pub mod objectives;
pub mod eval;
pub mod linalg;
pub mod rng;
