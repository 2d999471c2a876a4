//! Peer protocol: frames, transports and the verifier, preserver and
//! origin roles.

pub mod message;
pub mod origin;
pub mod preserver;
pub mod tcp;
pub mod transport;
pub mod verifier;

pub use message::{Body, CatalogToken, DecodeError, NodeId, PeerMessage, Status};
pub use origin::OriginService;
pub use preserver::{pull_snapshots, Preserver, Stream, SyncError};
pub use tcp::{TcpServer, TcpTransport};
pub use transport::{call, request, Connection, FrameHandler, SimNetwork, Transport, TransportError};
pub use verifier::{TokenRegistry, Verifier};
