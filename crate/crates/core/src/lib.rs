//! P1 finite elements on the unit square and an accelerated block-coordinate
//! dual solver for box-constrained elliptic optimal control with an L1 cost.

pub mod fem;
pub mod oracle;
pub mod primal;
pub mod prox;
pub mod solver;
pub mod sparse;
