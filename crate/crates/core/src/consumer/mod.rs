//! Consumer side: value encryption and integrity, and deciding how much
//! remote memory to buy.

mod client;
mod secure;
mod valuation;

pub use client::{
    load_producer_table, save_producer_table, KvTransport, LocalTransport, MetadataEntry, ProducerTableEntry,
    SecureClient, TcpTransport,
};
pub use secure::{digest, open, seal, seal_with_iv, Digest16, SecretKey, SecurityMode, HASH_LEN, IV_LEN};
pub use valuation::{purchase_decision, value_of_memory, ConsumerProfile, MissRatioCurve};
