//! Secure multi-party computation laboratory.
//!
//! * [`infotheory`]: exact entropies over small finite alphabets.
//! * [`transcript`]: one-shot protocol engine and exact accuracy/security/randomness analysis.
//! * [`oneshot`]: the XOR chain, modular sum and three-party multiplication protocols.
//! * [`polarsrc`]: source polar transform, construction and successive cancellation decoding.
//! * [`asp`]: the polar three-party XOR protocol over correlated sources, its Fano bound and MAP attacks.
//! * [`netrun`]: the same protocols run over a TCP mesh with round barriers.
//! * [`cli`]: the `smclab` command-line driver.

pub mod asp;
pub mod cli;
pub mod infotheory;
pub mod netrun;
pub mod oneshot;
pub mod polarsrc;
pub mod rng;
pub mod transcript;
