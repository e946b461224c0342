//! Construction and numerical validation of small-amplitude quasi-periodic
//! solutions for completely resonant, reversible, coupled cubic Schrödinger
//! systems on the 2-torus.
//!
//! The crate is organised along the pipeline:
//!
//! * [`lattice`]: exact classification of Fourier sites into tangential,
//!   first/second-type resonant and generic classes;
//! * [`polyvf`]: sparse polynomial vector fields over the mode variables;
//! * [`birkhoff`]: the cubic partial Birkhoff normal form and the resulting
//!   frequency data;
//! * [`melnikov`]: non-degeneracy, gap and Melnikov checks plus Monte-Carlo
//!   measure scans;
//! * [`simulate`]: split-step pseudospectral integration and validation of
//!   the first-order quasi-periodic ansatz.

pub mod lattice;
pub mod melnikov;
pub mod birkhoff;
pub mod polyvf;
pub mod simulate;

pub use num_complex::Complex64;
