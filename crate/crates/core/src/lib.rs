//! Secure gateway, QoS scheduler, data streaming node and enclave profiles
//! for running interactive, time-sensitive workflows on a batch-oriented
//! HPC facility.

pub mod auth;
pub mod clock;
pub mod dsn;
pub mod facility;
pub mod gateway;
pub mod ids;
pub mod policy;
pub mod profiles;
pub mod scheduler;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/gateway.md")]
    mod gateway {}
    #[doc = include_str!("../../../book/src/scheduler.md")]
    mod scheduler {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/profiles.md")]
    mod profiles {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
