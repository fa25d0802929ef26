//! Reading problems from disk and writing reports.

pub mod bundle;
pub mod report;
pub mod smooth;
pub mod table;
