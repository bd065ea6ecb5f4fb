//! Multilevel Monte Carlo estimation and minimisation of the conditional
//! value-at-risk of a stochastic model output.
//!
//! For a design `z` the crate estimates the parametric expectations
//! `Φ(θ) = E[θ + (Q - θ)⁺/(1 - τ)]` and `Ψ_k(θ) = -E[(Q - θ)⁺ ∂Q/∂z_k]/(1 - τ)`
//! on an interval of `θ` values with a multilevel estimator ([`estimator`]),
//! bounds the error of their θ-derivatives ([`errors`]), adapts the hierarchy
//! until that bound meets a tolerance ([`cmlmc`]) and uses the result inside
//! an alternating θ-minimisation / z-gradient loop ([`amgd`]).
//!
//! Two models ship with the crate: a stochastic FitzHugh–Nagumo oscillator
//! ([`fhn`]) and a steady advection–diffusion pollutant problem
//! ([`pollutant`]). [`model::LinearGaussian`] has closed-form answers and is
//! used throughout the tests.
//!
//! Sampling is driven by counter-based seeds ([`rng`]), so every result is a
//! function of the master seed alone. With the default `parallel` feature the
//! independent work runs on rayon; without it everything is sequential and
//! produces the same numbers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amgd;
pub mod cmlmc;
pub mod config;
pub mod error;
pub mod errors;
pub mod estimator;
pub mod exec;
pub mod experiments;
pub mod fhn;
pub mod kde;
pub mod model;
pub mod pollutant;
pub mod rng;
pub mod spline;
pub mod stats;
