//! Function identification for overparameterized quadratic networks, with
//! an explore-then-commit bandit, proxy-to-gold transfer and networks of
//! composed quadratic modules built on top.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod error;
pub mod identify;
pub mod linalg;
pub mod module_net;
pub mod qnn;
pub mod rng;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/bandit.md")]
    mod bandit {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/modules.md")]
    mod modules {}
}
