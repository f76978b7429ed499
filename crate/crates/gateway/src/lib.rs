//! HTTP gateway and command-line tools around `unlearn-core`.

pub mod budget;
pub mod cli;
pub mod config;
pub mod server;
