//! Open billiards outside finitely many strictly convex obstacles in R^3.

pub mod billiard;
pub mod chain;
pub mod cli;
pub mod geometry;
pub mod ikawa;
pub mod io;
pub mod numerics;
pub mod orbits;
pub mod parametrix;
pub mod symbolic;
pub mod trapped;
