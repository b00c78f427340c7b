//! Tagged-pointer object bounds sandbox.

pub mod checks;
pub mod corpus;
pub mod heap;
pub mod instrument;
pub mod ir;
pub mod memory;
pub mod oracle;
pub mod stats;
pub mod tagging;
pub mod vm;
