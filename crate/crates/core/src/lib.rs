pub mod agent;
pub mod bench;
pub mod client;
pub mod crypto;
mod fsutil;
pub mod store;
pub mod sync;
pub mod wire;
