pub mod accountant;
pub mod attacks;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod learner;
pub mod protocol;
pub mod rng;
pub mod secure_agg;
pub mod special;
pub mod vector;
pub mod verify;
