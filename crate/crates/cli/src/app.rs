//! Command-line definition and dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use icat_core::catalog::{Catalog, CatalogError, NodeConfig};
use icat_core::digest::HashAlg;
use icat_core::protocol::{NodeId, TcpTransport, Transport};

use crate::bench::{self, BenchConfig, BenchError};
use crate::serve::{self, Daemon, Role, ServeError, ServeOptions};
use crate::tools;

#[derive(Debug, Parser)]
#[command(name = "icat", version, about = "Tamper-evident integrity catalog")]
pub struct Cli {
    /// Node configuration file (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Catalog file, overriding the configured one.
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    /// Seconds to wait for each peer reply.
    #[arg(long, global = true)]
    pub reply_timeout: Option<f64>,
    /// Hex pre-shared key for frame authentication.
    #[arg(long, global = true)]
    pub psk: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create an empty catalog.
    Init {
        #[arg(long)]
        page_size: Option<usize>,
        #[arg(long)]
        skip: Option<u32>,
        #[arg(long)]
        hash: Option<HashAlg>,
    },
    /// Add new keys. Takes KEY VALUE, or --file with one `key<TAB>value` per line.
    Put {
        key: Option<String>,
        value: Option<String>,
        #[arg(long, conflicts_with_all = ["key", "value"])]
        file: Option<PathBuf>,
    },
    /// Append to the value of an existing key.
    Amend { key: String, suffix: String },
    /// Verify the catalog with its peers, then look keys up.
    Get {
        #[arg(required = true)]
        keys: Vec<String>,
    },
    /// Verify, then list every version of a key.
    History { key: String },
    /// Seal the open epoch and send the token to the verifiers.
    Seal,
    /// Check the local catalog against the verifiers' tokens.
    Verify,
    /// Rebuild the catalog from the preservers.
    Recover,
    /// Run a peer daemon.
    Serve(ServeArgs),
    /// Insert/seal/search benchmark; CSV rows on stdout or --out.
    Bench(BenchArgs),
    /// Damage a catalog file on purpose.
    Corrupt {
        #[arg(long, required_unless_present = "truncate")]
        offset: Option<u64>,
        /// Bits to flip at --offset.
        #[arg(long, default_value = "0xff", value_parser = parse_mask)]
        mask: u8,
        #[arg(long, conflicts_with = "offset")]
        truncate: Option<u64>,
    },
    /// File size, block distribution per epoch and snapshot count.
    Stats,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, value_enum)]
    pub role: Role,
    /// Address to bind; 127.0.0.1:0 picks a free port.
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Origins to accept, one `<id> [update-address]` per line.
    #[arg(long)]
    pub origin_allowlist: Option<PathBuf>,
    /// Node id for verifier and preserver roles.
    #[arg(long)]
    pub id: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 50_000)]
    pub keys_per_snapshot: usize,
    #[arg(long, default_value_t = 10)]
    pub snapshots: u64,
    #[arg(long, default_value_t = 10_000)]
    pub searches: usize,
    #[arg(long, default_value_t = 0)]
    pub skip: u32,
    #[arg(long, default_value_t = icat_core::store::DEFAULT_PAGE_SIZE)]
    pub page_size: usize,
    #[arg(long, default_value = "sha-256")]
    pub hash: HashAlg,
    /// Newline-delimited identifiers; synthetic ones otherwise.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where the benchmark catalog is written.
    #[arg(long, default_value = "bench.icat")]
    pub db: PathBuf,
}

fn parse_mask(s: &str) -> std::result::Result<u8, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u8::from_str_radix(h, 16),
        None => s.parse(),
    };
    r.map_err(|e| e.to_string())
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    /// 2 integrity, 3 quorum, 4 i/o, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Catalog(e) => e.exit_code(),
            CliError::Io(_) | CliError::Serve(ServeError::Io(_)) | CliError::Bench(BenchError::Io(_)) => 4,
            CliError::Serve(ServeError::Pad(e)) | CliError::Bench(BenchError::Pad(e)) if e.is_integrity() => 2,
            CliError::Bench(BenchError::Search { .. }) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

struct Ctx<'a> {
    cli: &'a Cli,
}

impl Ctx<'_> {
    fn node_config(&self) -> Result<NodeConfig> {
        let path = self.cli.config.as_deref().ok_or_else(|| usage("this command needs --config"))?;
        let mut cfg = NodeConfig::load(path).map_err(CatalogError::from)?;
        if let Some(c) = &self.cli.catalog {
            cfg.catalog = c.clone();
        }
        if let Some(t) = self.cli.reply_timeout {
            if !(t.is_finite() && t > 0.0) {
                return Err(usage("--reply-timeout must be positive"));
            }
            cfg.settings.policy.reply_timeout = Duration::from_secs_f64(t);
        }
        if let Some(k) = &self.cli.psk {
            cfg.psk = Some(hex::decode(k).map_err(|e| usage(format!("--psk: {e}")))?);
        }
        Ok(cfg)
    }

    fn catalog_path(&self) -> Result<PathBuf> {
        match &self.cli.catalog {
            Some(p) => Ok(p.clone()),
            None => Ok(self.node_config()?.catalog),
        }
    }

    fn transport(cfg: &NodeConfig) -> Arc<dyn Transport> {
        Arc::new(TcpTransport::new(cfg.settings.policy.reply_timeout, cfg.psk.clone()))
    }

    fn open(&self) -> Result<Catalog> {
        let cfg = self.node_config()?;
        let transport = Self::transport(&cfg);
        Ok(Catalog::open(&cfg.catalog, cfg.settings, transport)?)
    }
}

fn lossy(b: &[u8]) -> std::borrow::Cow<'_, str> {
    String::from_utf8_lossy(b)
}

/// Runs one command, writing its normal output to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let ctx = Ctx { cli };
    match &cli.command {
        Command::Init { page_size, skip, hash } => {
            let cfg = ctx.node_config()?;
            let mut pad = cfg.pad;
            pad.page_size = page_size.unwrap_or(pad.page_size);
            pad.skip_no = skip.unwrap_or(pad.skip_no);
            pad.hash = hash.unwrap_or(pad.hash);
            if cfg.catalog.exists() {
                return Err(usage(format!("{} already exists", cfg.catalog.display())));
            }
            let transport = Ctx::transport(&cfg);
            Catalog::create(&cfg.catalog, pad, cfg.settings, transport)?;
            writeln!(out, "created {}", cfg.catalog.display())?;
        }
        Command::Put { key, value, file } => {
            let cat = ctx.open()?;
            let mut n = 0usize;
            match (key, value, file) {
                (Some(k), Some(v), None) => {
                    cat.put(k.as_bytes(), v.as_bytes())?;
                    n = 1;
                }
                (None, None, Some(f)) => {
                    for (i, line) in std::fs::read_to_string(f)?.lines().enumerate() {
                        if line.is_empty() {
                            continue;
                        }
                        let (k, v) = line
                            .split_once('\t')
                            .ok_or_else(|| usage(format!("{} line {}: expected key<TAB>value", f.display(), i + 1)))?;
                        cat.put(k.as_bytes(), v.as_bytes())?;
                        n += 1;
                    }
                }
                _ => return Err(usage("put needs KEY VALUE or --file")),
            }
            writeln!(out, "put {n}")?;
        }
        Command::Amend { key, suffix } => {
            ctx.open()?.amend(key.as_bytes(), suffix.as_bytes())?;
            writeln!(out, "amended")?;
        }
        Command::Get { keys } => {
            let cat = ctx.open()?;
            let vctx = cat.verify()?;
            // Every key is looked up; the worst failure decides the exit status.
            let mut worst: Option<CatalogError> = None;
            for k in keys {
                match cat.verified_get(&vctx, k.as_bytes()) {
                    Ok(Some((v, s))) => writeln!(out, "{k}\t{}\t{s}", lossy(&v))?,
                    Ok(None) => {
                        log::error!("{k}: not found at snapshot {}", vctx.snapshot_id);
                        if worst.is_none() {
                            worst = Some(CatalogError::KeyNotFound);
                        }
                    }
                    Err(e) => {
                        log::error!("{k}: {e}");
                        if worst.as_ref().is_none_or(|w| w.exit_code() < e.exit_code()) {
                            worst = Some(e);
                        }
                    }
                }
            }
            if let Some(e) = worst {
                return Err(e.into());
            }
        }
        Command::History { key } => {
            let cat = ctx.open()?;
            let vctx = cat.verify()?;
            let h = cat.history(&vctx, key.as_bytes())?;
            if h.is_empty() {
                return Err(CatalogError::KeyNotFound.into());
            }
            for e in h {
                writeln!(out, "{}\t{}\t{}", e.snapshot_id, e.timestamp, lossy(&e.value))?;
            }
        }
        Command::Seal => {
            let r = ctx.open()?.seal()?;
            writeln!(
                out,
                "sealed {} {} acks {}/{}",
                r.token.snapshot_id,
                r.token.authenticator.to_hex(),
                r.acks,
                r.verifiers
            )?;
        }
        Command::Verify => {
            let v = ctx.open()?.verify()?;
            writeln!(out, "verified {} {} pra {}", v.snapshot_id, v.la.to_hex(), v.pra.to_hex())?;
        }
        Command::Recover => {
            let cfg = ctx.node_config()?;
            let transport = Ctx::transport(&cfg);
            let cat = Catalog::open_for_recovery(&cfg.catalog, cfg.settings, transport)?;
            let r = cat.recover()?;
            for (id, why) in &r.failed {
                log::warn!("holder {id} failed: {why}");
            }
            writeln!(
                out,
                "recovered {} {} from {} replayed {} resets {}",
                r.token.snapshot_id,
                r.token.authenticator.to_hex(),
                r.holder,
                r.replayed,
                r.resets_acked
            )?;
        }
        Command::Serve(args) => {
            let daemon = start_daemon(&ctx, args)?;
            writeln!(out, "listening {}", daemon.local_addr())?;
            out.flush()?;
            daemon.wait();
        }
        Command::Bench(a) => {
            let cfg = BenchConfig {
                keys_per_snapshot: a.keys_per_snapshot,
                snapshot_count: a.snapshots,
                searches_per_snapshot: a.searches,
                skip_no: a.skip,
                page_size: a.page_size,
                hash: a.hash,
                input: a.input.clone(),
                seed: a.seed,
                catalog: a.db.clone(),
            };
            match &a.out {
                Some(p) => bench::run_csv(&cfg, std::fs::File::create(p)?)?,
                None => bench::run_csv(&cfg, &mut *out)?,
            };
        }
        Command::Corrupt { offset, mask, truncate } => {
            let path = ctx.catalog_path()?;
            match (offset, truncate) {
                (Some(o), None) => {
                    let (old, new) = tools::flip_octet(&path, *o, *mask)?;
                    writeln!(out, "offset {o}: {old:#04x} -> {new:#04x}")?;
                }
                (None, Some(len)) => {
                    tools::truncate(&path, *len)?;
                    writeln!(out, "truncated to {len}")?;
                }
                _ => return Err(usage("corrupt needs --offset or --truncate")),
            }
        }
        Command::Stats => {
            let path = ctx.catalog_path()?;
            let st = tools::stats(&path).map_err(CatalogError::from)?;
            write!(out, "{st}")?;
        }
    }
    Ok(())
}

fn start_daemon(ctx: &Ctx<'_>, args: &ServeArgs) -> Result<Daemon> {
    let cfg = match (&ctx.cli.config, args.role) {
        (Some(_), _) | (None, Role::Origin) => Some(ctx.node_config()?),
        (None, _) => None,
    };
    let id = match (&args.id, &cfg) {
        (Some(name), _) => NodeId::from_name(name),
        (None, Some(c)) => c.settings.node_id,
        (None, None) => return Err(usage("serve needs --id or --config")),
    };
    let listen = args
        .listen
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.listen.clone()))
        .ok_or_else(|| usage("serve needs --listen"))?;
    let data_dir = match (&args.data_dir, &cfg) {
        (Some(d), _) => d.clone(),
        (None, Some(c)) => c.catalog.parent().unwrap_or(Path::new(".")).join(format!("{}.d", c.node_name)),
        (None, None) => return Err(usage("serve needs --data-dir")),
    };
    let allowlist = args.origin_allowlist.as_deref().map(serve::read_allowlist).transpose()?;
    let psk = match (&ctx.cli.psk, &cfg) {
        (Some(k), _) => Some(hex::decode(k).map_err(|e| usage(format!("--psk: {e}")))?),
        (None, Some(c)) => c.psk.clone(),
        (None, None) => None,
    };
    let reply_timeout = match (ctx.cli.reply_timeout, &cfg) {
        (Some(t), _) if t.is_finite() && t > 0.0 => Duration::from_secs_f64(t),
        (Some(_), _) => return Err(usage("--reply-timeout must be positive")),
        (None, Some(c)) => c.settings.policy.reply_timeout,
        (None, None) => Duration::from_secs(5),
    };
    let (catalog, preservers) = match (&cfg, args.role) {
        (Some(c), Role::Origin) => {
            (Some(c.catalog.clone()), Some(c.settings.preservers.iter().map(|p| p.id).collect()))
        }
        _ => (None, None),
    };
    Ok(Daemon::start(ServeOptions {
        role: args.role,
        id,
        listen,
        data_dir,
        allowlist,
        psk,
        reply_timeout,
        catalog,
        preservers,
    })?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn masks() {
        assert_eq!(parse_mask("0xff"), Ok(255));
        assert_eq!(parse_mask("4"), Ok(4));
        assert!(parse_mask("0x100").is_err());
    }

    #[test]
    fn bench_defaults_are_desk_scale() {
        let cli = Cli::try_parse_from(["icat", "bench"]).unwrap();
        let Command::Bench(a) = cli.command else { panic!() };
        assert_eq!((a.keys_per_snapshot, a.searches, a.snapshots, a.skip), (50_000, 10_000, 10, 0));
    }
}
