//! Value sealing: encrypt with a per-client key and a fresh IV, then hash
//! what the producer will store.

use aes::Aes128;
use cbc::cipher::block_padding::Pkcs7;
use cbc::cipher::{BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IV_LEN: usize = 16;
pub const HASH_LEN: usize = 16;
pub const COUNTER_KEY_LEN: usize = 8;

type Enc = cbc::Encryptor<Aes128>;
type Dec = cbc::Decryptor<Aes128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SecurityMode {
    Full,
    IntegrityOnly,
    Plain,
}

impl SecurityMode {
    /// Local metadata bytes counted per entry: counter key plus hash in
    /// full mode, the hash alone in integrity-only mode. The producer index
    /// is not counted.
    pub fn metadata_overhead(self) -> usize {
        match self {
            SecurityMode::Full => COUNTER_KEY_LEN + HASH_LEN,
            SecurityMode::IntegrityOnly => HASH_LEN,
            SecurityMode::Plain => 0,
        }
    }
}

impl std::str::FromStr for SecurityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SecurityMode::Full),
            "integrity" | "integrity-only" => Ok(SecurityMode::IntegrityOnly),
            "plain" => Ok(SecurityMode::Plain),
            _ => Err(Error::invalid(format!("unknown security mode {s:?}"))),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub [u8; 16]);

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    pub fn random() -> Self {
        let mut k = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut k);
        SecretKey(k)
    }
}

pub type Digest16 = [u8; HASH_LEN];

pub fn digest(data: &[u8]) -> Digest16 {
    let full = Sha256::digest(data);
    let mut h = [0u8; HASH_LEN];
    h.copy_from_slice(&full[..HASH_LEN]);
    h
}

/// IV followed by the CBC ciphertext of the padded value.
pub fn seal(key: &SecretKey, plaintext: &[u8]) -> Vec<u8> {
    let mut iv = [0u8; IV_LEN];
    rand::thread_rng().fill_bytes(&mut iv);
    seal_with_iv(key, &iv, plaintext)
}

pub fn seal_with_iv(key: &SecretKey, iv: &[u8; IV_LEN], plaintext: &[u8]) -> Vec<u8> {
    let ct = Enc::new(&key.0.into(), iv.into()).encrypt_padded_vec_mut::<Pkcs7>(plaintext);
    let mut out = Vec::with_capacity(IV_LEN + ct.len());
    out.extend_from_slice(iv);
    out.extend_from_slice(&ct);
    out
}

pub fn open(key: &SecretKey, sealed: &[u8]) -> Result<Vec<u8>> {
    if sealed.len() < IV_LEN + 16 || (sealed.len() - IV_LEN) % 16 != 0 {
        return Err(Error::IntegrityViolation("sealed value has an impossible length".into()));
    }
    let (iv, ct) = sealed.split_at(IV_LEN);
    let iv: [u8; IV_LEN] = iv.try_into().expect("16 bytes");
    Dec::new(&key.0.into(), &iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(ct)
        .map_err(|_| Error::IntegrityViolation("bad padding".into()))
}
