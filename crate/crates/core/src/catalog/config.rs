//! Node configuration file (TOML).
//!
//! ```toml
//! node_id = "origin-1"
//! listen = "127.0.0.1:7000"
//! catalog = "origin.icat"
//! page_size = 16384
//! skip_no = 0
//! hash = "sha256"
//! seed = 1
//! psk = "00112233"
//!
//! [policy]
//! quorum = 0.5
//! winning = 0.7
//! recover_quorum = 0.5
//! recover_winning = 0.7
//! reply_timeout = 5
//!
//! [[verifiers]]
//! id = "v1"
//! address = "127.0.0.1:7101"
//!
//! [[preservers]]
//! id = "v1"
//! address = "127.0.0.1:7101"
//! ```
//!
//! Relative paths are resolved against the directory of the file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use super::policy::{Fraction, PolicyConfig};
use crate::digest::HashAlg;
use crate::pad::PadConfig;
use crate::protocol::NodeId;
use crate::store::DEFAULT_PAGE_SIZE;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Peer {
    pub id: NodeId,
    pub address: String,
}

/// What a catalog needs to know about its peers.
#[derive(Debug, Clone)]
pub struct CatalogSettings {
    pub node_id: NodeId,
    pub verifiers: Vec<Peer>,
    pub preservers: Vec<Peer>,
    pub policy: PolicyConfig,
    /// Seed for picking a recovery holder.
    pub seed: u64,
}

impl CatalogSettings {
    pub fn new(node_id: NodeId) -> CatalogSettings {
        CatalogSettings {
            node_id,
            verifiers: Vec::new(),
            preservers: Vec::new(),
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }

    /// Preservers must also be verifiers.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let verifiers: HashSet<NodeId> = self.verifiers.iter().map(|p| p.id).collect();
        if verifiers.len() != self.verifiers.len() {
            return Err(ConfigError::Invalid("duplicate verifier id".into()));
        }
        if let Some(p) = self.preservers.iter().find(|p| !verifiers.contains(&p.id)) {
            return Err(ConfigError::Invalid(format!("preserver {} is not listed as a verifier", p.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeer {
    id: String,
    address: String,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    quorum: Option<Fraction>,
    winning: Option<Fraction>,
    recover_quorum: Option<Fraction>,
    recover_winning: Option<Fraction>,
    reply_timeout: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    node_id: String,
    listen: Option<String>,
    catalog: Option<PathBuf>,
    page_size: Option<usize>,
    skip_no: Option<u32>,
    hash: Option<String>,
    seed: Option<u64>,
    psk: Option<String>,
    #[serde(default)]
    policy: RawPolicy,
    #[serde(default)]
    verifiers: Vec<RawPeer>,
    #[serde(default)]
    preservers: Vec<RawPeer>,
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub node_name: String,
    pub listen: Option<String>,
    pub catalog: PathBuf,
    pub pad: PadConfig,
    pub psk: Option<Vec<u8>>,
    pub settings: CatalogSettings,
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<NodeConfig, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        NodeConfig::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<NodeConfig, ConfigError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let invalid = ConfigError::Invalid;
        let hash = match &raw.hash {
            Some(h) => h.parse::<HashAlg>().map_err(invalid)?,
            None => HashAlg::Sha256,
        };
        let pad = PadConfig { hash, skip_no: raw.skip_no.unwrap_or(0), page_size: raw.page_size.unwrap_or(DEFAULT_PAGE_SIZE) };
        let psk = raw
            .psk
            .as_deref()
            .map(|h| hex::decode(h).map_err(|e| ConfigError::Invalid(format!("psk: {e}"))))
            .transpose()?;
        let defaults = PolicyConfig::default();
        let reply_timeout = match raw.policy.reply_timeout {
            Some(t) if t.is_finite() && t > 0.0 => Duration::from_secs_f64(t),
            Some(t) => return Err(ConfigError::Invalid(format!("reply_timeout {t} must be positive"))),
            None => defaults.reply_timeout,
        };
        let policy = PolicyConfig {
            quorum: raw.policy.quorum.unwrap_or(defaults.quorum),
            winning: raw.policy.winning.unwrap_or(defaults.winning),
            recover_quorum: raw.policy.recover_quorum.unwrap_or(defaults.recover_quorum),
            recover_winning: raw.policy.recover_winning.unwrap_or(defaults.recover_winning),
            reply_timeout,
        };
        let peers = |list: Vec<RawPeer>| -> Vec<Peer> {
            list.into_iter().map(|p| Peer { id: NodeId::from_name(&p.id), address: p.address }).collect()
        };
        let settings = CatalogSettings {
            node_id: NodeId::from_name(&raw.node_id),
            verifiers: peers(raw.verifiers),
            preservers: peers(raw.preservers),
            policy,
            seed: raw.seed.unwrap_or(0),
        };
        settings.validate()?;
        let catalog = base.join(raw.catalog.unwrap_or_else(|| PathBuf::from(format!("{}.icat", raw.node_id))));
        Ok(NodeConfig { node_name: raw.node_id, listen: raw.listen, catalog, pad, psk, settings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
node_id = "origin"
listen = "127.0.0.1:7000"
catalog = "data/o.icat"
skip_no = 3
hash = "sha-512/256"
psk = "0a0b"

[policy]
quorum = "2/3"
winning = 0.75
reply_timeout = 1.5

[[verifiers]]
id = "v1"
address = "127.0.0.1:7101"

[[verifiers]]
id = "v2"
address = "127.0.0.1:7102"

[[preservers]]
id = "v2"
address = "127.0.0.1:7102"
"#;

    #[test]
    fn parses_sample() {
        let c = NodeConfig::parse(SAMPLE, Path::new("/etc/icat")).unwrap();
        assert_eq!(c.catalog, PathBuf::from("/etc/icat/data/o.icat"));
        assert_eq!(c.pad, PadConfig { hash: HashAlg::Sha512_256, skip_no: 3, page_size: DEFAULT_PAGE_SIZE });
        assert_eq!(c.psk, Some(vec![10, 11]));
        assert_eq!(c.settings.node_id, NodeId::from_name("origin"));
        assert_eq!(c.settings.verifiers.len(), 2);
        assert_eq!(c.settings.preservers[0].id, NodeId::from_name("v2"));
        let p = c.settings.policy;
        assert_eq!(p.quorum, Fraction::new(2, 3).unwrap());
        assert_eq!(p.winning, Fraction::new(3, 4).unwrap());
        assert_eq!(p.recover_winning, Fraction::new(7, 10).unwrap());
        assert_eq!(p.reply_timeout, Duration::from_millis(1500));
    }

    #[test]
    fn preservers_must_be_verifiers() {
        let text = SAMPLE.replace("id = \"v2\"\naddress = \"127.0.0.1:7102\"\n\n[[preservers]]", "id = \"v3\"\naddress = \"x\"\n\n[[preservers]]");
        let err = NodeConfig::parse(&text, Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("not listed as a verifier"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "node_id = \"o\"\nhash = \"md5\"",
            "node_id = \"o\"\n[policy]\nquorum = 1.5",
            "node_id = \"o\"\n[policy]\nreply_timeout = 0",
            "node_id = \"o\"\nbogus = 1",
            "listen = \"x\"",
        ] {
            assert!(NodeConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }
}
