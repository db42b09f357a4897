//! Two-stage goal-attainment tuning of design parameters across several
//! operating conditions.
//!
//! Each operating condition (a [`model::Scenario`]) is an ODE system with a
//! Bolza cost `J_i(theta) = phi_i(x(tf), theta, tf) + integral of psi_i`.
//! Stage 1 ([`pipeline::run_stage1`]) tunes `theta` for each scenario on its
//! own and records the achieved cost as that scenario's goal `J_i*`. Stage 2
//! ([`pipeline::run_goal_attainment`]) looks for one `theta` for all
//! scenarios by minimizing attainment levels `gamma_i` subject to
//! `J_i(theta) - gamma_i * w_i <= J_i*`.
//!
//! Both stages run on the in-crate SQP solver ([`sqp`]) with
//! finite-difference derivatives of simulated costs.

pub mod cost;
pub mod dynamics;
pub mod expr;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod qp;
pub mod sqp;
