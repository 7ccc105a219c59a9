//! Signatures, encryption, time-lock puzzles and threshold protocols.

pub mod committee;
pub mod dtc;
pub mod pkc;
pub mod tlp;

pub use dtc::{DtcError, DtcParams, GroupKey, KeyShare};
pub use pkc::{pkc_decrypt, pkc_encrypt, pkc_keygen, pkc_sign, pkc_verify, KeyPair, PublicKey, SecretKey, Signature};
pub use tlp::{ConcretePuzzle, IdealPuzzle, TlpOracle, TlpPuzzle, TlpState};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("decryption failed")]
    DecryptFailure,
    #[error("malformed {0}")]
    Malformed(&'static str),
}
