//! Runs every code block in the book as a doctest, one module per chapter,
//! so `cargo test` keeps the guide in sync with the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
