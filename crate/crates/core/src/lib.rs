//! Adaptive meta-learned behavioural similarity (AMBS) for pixel-based
//! soft actor-critic, together with an exact tabular bisimulation oracle.

pub mod diffcore;
pub mod ot;
pub mod bisim;
pub mod augment;
pub mod envs;
pub mod replay;
pub mod nets;
pub mod losses;
pub mod agent;
