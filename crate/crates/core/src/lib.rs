pub mod alloc;
pub mod arena;
pub mod backoff;
pub mod bench;
pub mod chunk;
pub mod coalesce;
pub mod config;
pub mod queue;
pub mod selftest;
