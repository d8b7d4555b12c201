//! Output provenance: every artifact the tool writes carries the tool
//! version, the seed in effect, and a content hash of the problem file it was
//! derived from, so results can be traced back to their exact inputs.

use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex characters of the SHA-256 digest kept in headers; 48 bits is plenty to
/// tell desk-scale inputs apart while staying readable.
pub const HASH_PREFIX_LEN: usize = 12;

/// Truncated SHA-256 of the input bytes, lower-case hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(HASH_PREFIX_LEN);
    for byte in digest.iter().take(HASH_PREFIX_LEN.div_ceil(2)) {
        use std::fmt::Write;
        write!(out, "{byte:02x}").unwrap();
    }
    out.truncate(HASH_PREFIX_LEN);
    out
}

/// `#`-prefixed metadata block placed at the top of every CSV output.
pub fn csv_metadata(seed: u64, problem_hash: &str) -> String {
    format!(
        "# tool_version: {TOOL_VERSION}\n# seed: {seed}\n# problem_hash: {problem_hash}\n"
    )
}
