//! Doc-test shims for the book.
//!
//! Each chapter of `book/` is included here as a doc comment, so
//! `cargo test --doc` compiles and runs every Rust code block in the
//! guide. A chapter edit that breaks an API, or an API change that
//! breaks a chapter, fails the test suite instead of shipping a stale
//! book. The module only exists while rustdoc collects doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/forward-model.md")]
mod forward_model {}

#[doc = include_str!("../../../book/src/equivalent-modes.md")]
mod equivalent_modes {}

#[doc = include_str!("../../../book/src/dataset.md")]
mod dataset {}

#[doc = include_str!("../../../book/src/surrogate.md")]
mod surrogate {}

#[doc = include_str!("../../../book/src/latent-likelihood.md")]
mod latent_likelihood {}

#[doc = include_str!("../../../book/src/smc.md")]
mod smc {}

#[doc = include_str!("../../../book/src/evaluation.md")]
mod evaluation {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
mod reproducibility {}
