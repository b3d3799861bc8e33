use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types serialize infallibly");
    hex::encode(Sha256::digest(&bytes))
}
