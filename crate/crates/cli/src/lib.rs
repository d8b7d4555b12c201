//! File formats and output conventions shared by the `adqp` binary and its
//! integration tests.
//!
//! The binary itself lives in `src/main.rs`; this library holds the versioned
//! on-disk schemas ([`format`]), output provenance helpers ([`meta`]), and the
//! analysis report structure ([`report`]) so that external consumers can parse
//! the tool's artifacts without scraping text.

pub mod format;
pub mod meta;
pub mod report;
