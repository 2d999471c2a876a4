//! Fixed-length digests and the configurable hash function behind them.

use std::fmt;
use std::str::FromStr;

use sha2::Digest as _;

/// Length of every digest in octets.
pub const DIGEST_LEN: usize = 32;

/// A 32-octet hash value. All authenticators, priorities and proofs are
/// expressed in this type.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    /// The designated authenticator of an empty subtree or missing link.
    pub const NIL: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn is_nil(&self) -> bool {
        *self == Self::NIL
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest> {
        <[u8; DIGEST_LEN]>::try_from(bytes).ok().map(Digest)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let bytes = hex::decode(s).ok()?;
        Digest::from_slice(&bytes)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash functions a catalog can be configured with. Both produce 32 octets;
/// the identifier is recorded in the catalog file so replicas agree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum HashAlg {
    #[default]
    Sha256,
    Sha512_256,
}

impl HashAlg {
    pub fn id(self) -> u8 {
        match self {
            HashAlg::Sha256 => 1,
            HashAlg::Sha512_256 => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<HashAlg> {
        match id {
            1 => Some(HashAlg::Sha256),
            2 => Some(HashAlg::Sha512_256),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HashAlg::Sha256 => "sha-256",
            HashAlg::Sha512_256 => "sha-512/256",
        }
    }

    /// Hashes the concatenation of `parts`.
    pub fn hash_parts(self, parts: &[&[u8]]) -> Digest {
        match self {
            HashAlg::Sha256 => {
                let mut h = sha2::Sha256::new();
                for p in parts {
                    h.update(p);
                }
                Digest(h.finalize().into())
            }
            HashAlg::Sha512_256 => {
                let mut h = sha2::Sha512_256::new();
                for p in parts {
                    h.update(p);
                }
                Digest(h.finalize().into())
            }
        }
    }

    pub fn hash(self, data: &[u8]) -> Digest {
        self.hash_parts(&[data])
    }
}

impl FromStr for HashAlg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sha-256" | "sha256" => Ok(HashAlg::Sha256),
            "sha-512/256" | "sha512_256" | "sha-512-256" => Ok(HashAlg::Sha512_256),
            other => Err(format!("unknown hash algorithm '{other}'")),
        }
    }
}

impl fmt::Display for HashAlg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        // FIPS 180-2 "abc"
        let d = HashAlg::Sha256.hash(b"abc");
        assert_eq!(
            d.to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn parts_equal_concatenation() {
        let alg = HashAlg::Sha512_256;
        assert_eq!(alg.hash_parts(&[b"ab", b"c"]), alg.hash(b"abc"));
    }

    #[test]
    fn names_round_trip() {
        for alg in [HashAlg::Sha256, HashAlg::Sha512_256] {
            assert_eq!(alg.name().parse::<HashAlg>().unwrap(), alg);
            assert_eq!(HashAlg::from_id(alg.id()), Some(alg));
        }
    }
}
