//! HTTP server and client glue for the `meshgate` binary.

pub mod client;
pub mod server;

pub use client::HttpGateway;
