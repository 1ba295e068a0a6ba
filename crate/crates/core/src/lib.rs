//! Reversible, transferable adversarial examples at desk scale.
//!
//! The pipeline has two attack phases and a reversible embedding:
//!
//! 1. [`whitebox`]: a momentum iterative attack with diverse inputs,
//!    translation-invariant gradient smoothing and a stepwise-adaptive
//!    sensitivity mask. The perturbation is projected each iteration onto a
//!    shared-channel lattice ([`quantize`]).
//! 2. [`blackbox`]: a query-only refinement over square pixel blocks that
//!    remembers which blocks paid off and periodically grows them.
//! 3. [`stego`]: the stage matrix is Huffman coded, encrypted and embedded in
//!    the adversarial image, from which the original image can be recovered.
//!
//! [`tensor`] and [`zoo`] provide the autodiff and the small classifiers the
//! attacks run against; [`metrics`] and [`wire`] back the `rae` binary.

pub mod blackbox;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod quantize;
pub mod raster;
pub mod stego;
pub mod tensor;
pub mod whitebox;
pub mod wire;
pub mod zoo;
