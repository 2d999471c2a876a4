//! Operator front end for icat: the `icat` command, peer daemons, the
//! benchmark harness and fault-injection tools.

pub mod app;
pub mod bench;
pub mod serve;
pub mod tools;
