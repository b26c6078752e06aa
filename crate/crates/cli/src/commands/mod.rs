//! One module per subcommand. Each appends its checks to the manifest as
//! soon as they are known, so an early error still leaves partial results.

pub mod dsm;
pub mod gaussian;
pub mod oracle;
pub mod score_norm;
pub mod stylized;
