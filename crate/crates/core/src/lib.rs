#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod dynamics;
pub mod qp;
pub mod miqp;
pub mod neighbor;
pub mod imputation;
pub mod planner;
pub mod sim;
pub mod io;
