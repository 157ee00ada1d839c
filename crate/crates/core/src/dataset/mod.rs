//! Sequence input and output: TUM-layout datasets, synthetic scenes and trajectories.

pub mod synthetic;
pub mod trajectory;
pub mod tum;
