//! Library half of the `bfdecomp` binary, split out so the HTTP routes and
//! check suites can be tested in-process.

pub mod check;
pub mod serve;
