//! Simulation and classical post-processing for an entanglement-based
//! (BBM92) QKD link over a short free-space channel.
//!
//! The crate follows a session from photon pairs to a secure key:
//!
//! * [`quantum_model`]: the noisy polarization pair state and its
//!   coincidence probabilities, correlations and CHSH value.
//! * [`atmosphere`]: aerosol (Beer-Lambert) channel transmission and the
//!   scaling of rates between channel lengths.
//! * [`acquisition`]: detector model, Monte-Carlo time-tag generation and
//!   tag-file I/O.
//! * [`coincidence`]: cross-correlation offset search and coincidence
//!   matching.
//! * [`sifting`]: basis reconciliation, QBER and visibility estimation.
//! * [`postprocess`]: LDPC error correction, verification and Toeplitz
//!   privacy amplification.
//! * [`runner`]: configuration files and the end-to-end pipeline.

pub mod acquisition;
pub mod atmosphere;
pub mod coincidence;
pub mod postprocess;
pub mod quantum_model;
pub mod report;
pub mod runner;
pub mod seed;
pub mod sifting;

pub use report::KeyRateReport;

// Guide chapters compile and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantum-model.md")]
    mod quantum_model {}
    #[doc = include_str!("../../../book/src/atmosphere.md")]
    mod atmosphere {}
    #[doc = include_str!("../../../book/src/acquisition.md")]
    mod acquisition {}
    #[doc = include_str!("../../../book/src/coincidence.md")]
    mod coincidence {}
    #[doc = include_str!("../../../book/src/sifting.md")]
    mod sifting {}
    #[doc = include_str!("../../../book/src/postprocess.md")]
    mod postprocess {}
    #[doc = include_str!("../../../book/src/runner.md")]
    mod runner {}
}
