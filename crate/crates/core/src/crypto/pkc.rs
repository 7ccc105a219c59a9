//! Schnorr signatures and hybrid public-key encryption over ristretto255.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use curve25519_dalek::constants::RISTRETTO_BASEPOINT_POINT as G;
use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};

use super::CryptoError;

/// Compressed ristretto point used both as verification and encryption key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "hex_32")] pub [u8; 32]);

impl PublicKey {
    pub fn from_point(p: &RistrettoPoint) -> Self {
        PublicKey(p.compress().to_bytes())
    }

    pub fn point(&self) -> Option<RistrettoPoint> {
        CompressedRistretto(self.0).decompress()
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0
    }

    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", self.short())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Secret scalar. Not `Debug`-printable on purpose.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub(crate) Scalar);

impl SecretKey {
    pub fn from_scalar(s: Scalar) -> Self {
        SecretKey(s)
    }

    pub fn scalar(&self) -> Scalar {
        self.0
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Result<Self, CryptoError> {
        Option::<Scalar>::from(Scalar::from_canonical_bytes(bytes))
            .map(SecretKey)
            .ok_or(CryptoError::Malformed("secret key"))
    }

    pub fn public(&self) -> PublicKey {
        PublicKey::from_point(&(G * self.0))
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub pk: PublicKey,
    pub sk: SecretKey,
}

impl KeyPair {
    pub fn from_secret(sk: SecretKey) -> Self {
        KeyPair { pk: sk.public(), sk }
    }

    pub fn random<R: RngCore>(rng: &mut R) -> Self {
        let mut wide = [0u8; 64];
        rng.fill_bytes(&mut wide);
        Self::from_secret(SecretKey(Scalar::from_bytes_mod_order_wide(&wide)))
    }
}

/// Schnorr signature `(R, z)`, 64 bytes on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    #[serde(with = "hex_32")]
    pub r: [u8; 32],
    #[serde(with = "hex_32")]
    pub z: [u8; 32],
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; 64] {
        let mut out = [0u8; 64];
        out[..32].copy_from_slice(&self.r);
        out[32..].copy_from_slice(&self.z);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        if bytes.len() != 64 {
            return Err(CryptoError::Malformed("signature length"));
        }
        let mut r = [0u8; 32];
        let mut z = [0u8; 32];
        r.copy_from_slice(&bytes[..32]);
        z.copy_from_slice(&bytes[32..]);
        Ok(Signature { r, z })
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig:{}", hex::encode(&self.r[..4]))
    }
}

pub(crate) fn hash_to_scalar(parts: &[&[u8]]) -> Scalar {
    let mut h = Sha512::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    Scalar::from_hash(h)
}

/// Schnorr challenge `c = H(R || PK || msg)`.
pub(crate) fn challenge(r: &[u8; 32], pk: &PublicKey, msg: &[u8]) -> Scalar {
    hash_to_scalar(&[b"dot/schnorr", r, &pk.0, msg])
}

/// Deterministic key generation from an arbitrary seed.
pub fn pkc_keygen(seed: &[u8]) -> KeyPair {
    KeyPair::from_secret(SecretKey(hash_to_scalar(&[b"dot/keygen", seed])))
}

/// Signs with a nonce derived from `(sk, msg)`.
pub fn pkc_sign(sk: &SecretKey, msg: &[u8]) -> Signature {
    let pk = sk.public();
    let k = hash_to_scalar(&[b"dot/nonce", &sk.0.to_bytes(), msg]);
    let r = (G * k).compress().to_bytes();
    let c = challenge(&r, &pk, msg);
    let z = k + c * sk.0;
    Signature { r, z: z.to_bytes() }
}

pub fn pkc_verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Some(y) = pk.point() else { return false };
    let Some(r) = CompressedRistretto(sig.r).decompress() else {
        return false;
    };
    let Some(z) = Option::<Scalar>::from(Scalar::from_canonical_bytes(sig.z)) else {
        return false;
    };
    let c = challenge(&sig.r, pk, msg);
    G * z == r + y * c
}

/// Ephemeral-DH hybrid encryption: `eph_pk (32) || chacha20poly1305(body)`.
pub fn pkc_encrypt<R: RngCore>(pk: &PublicKey, msg: &[u8], rng: &mut R) -> Result<Vec<u8>, CryptoError> {
    let y = pk.point().ok_or(CryptoError::Malformed("public key"))?;
    let eph = KeyPair::random(rng);
    let shared = (y * eph.sk.0).compress().to_bytes();
    let cipher = ChaCha20Poly1305::new(&kdf(&shared, &eph.pk, pk).into());
    let body = cipher
        .encrypt(Nonce::from_slice(&[0u8; 12]), msg)
        .map_err(|_| CryptoError::Malformed("encryption"))?;
    let mut out = Vec::with_capacity(32 + body.len());
    out.extend_from_slice(&eph.pk.0);
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn pkc_decrypt(sk: &SecretKey, ct: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if ct.len() < 32 {
        return Err(CryptoError::DecryptFailure);
    }
    let mut eph_bytes = [0u8; 32];
    eph_bytes.copy_from_slice(&ct[..32]);
    let eph = PublicKey(eph_bytes);
    let e = eph.point().ok_or(CryptoError::DecryptFailure)?;
    let shared = (e * sk.0).compress().to_bytes();
    let cipher = ChaCha20Poly1305::new(&kdf(&shared, &eph, &sk.public()).into());
    cipher
        .decrypt(Nonce::from_slice(&[0u8; 12]), &ct[32..])
        .map_err(|_| CryptoError::DecryptFailure)
}

fn kdf(shared: &[u8; 32], eph: &PublicKey, recipient: &PublicKey) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dot/hybrid");
    h.update(shared);
    h.update(eph.0);
    h.update(recipient.0);
    h.finalize().into()
}

pub(crate) mod hex_32 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        bytes
            .try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}
