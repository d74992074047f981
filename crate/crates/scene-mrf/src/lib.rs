//! Differentiable Markov random field inference for scene-graph grounding.
//!
//! A grounding problem asks: given a query graph whose nodes are object
//! categories and whose edges are relations, and a pool of candidate boxes in
//! an image, which box does each query node refer to?  This crate casts the
//! problem as MAP / marginal inference in a pairwise Markov random field
//! (a *Scene-MRF*) whose unary and pairwise energies are produced by small
//! neural networks, and trains those networks by differentiating exact
//! negative log-likelihood computed with belief propagation on spanning
//! trees of the query.
//!
//! Module tour:
//!
//! - [`autodiff`]: a minimal reverse-mode tape over dense `f64` tensors.
//! - [`graph`]: query graphs, candidate sets, and the Scene-MRF itself.
//! - [`spanning`]: random spanning trees, tree checks, components.
//! - [`bp`]: exact belief propagation on trees and damped loopy BP.
//! - [`map`]: MAP inference (MPLP, tree max-product, annealed refinement)
//!   plus brute-force enumeration oracles.
//! - [`posenc`]: Fourier positional encodings of boxes with closed-form
//!   shift and envelope identities.
//! - [`model`]: the energy networks, losses, Adam, and checkpoints.
//! - [`world`]: a synthetic benchmark world with geometric relations, and
//!   recall metrics.
//! - [`oracle`]: randomized cross-check suites used by tests and the CLI.

pub mod autodiff;
pub mod bp;
pub mod dataset;
pub mod graph;
pub mod map;
pub mod model;
pub mod oracle;
pub mod posenc;
pub mod spanning;
pub mod util;
pub mod world;
