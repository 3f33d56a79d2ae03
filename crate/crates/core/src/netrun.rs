//! Networked execution of one-shot protocols: one party per process (or
//! thread), a full TCP mesh, and explicit barrier frames in place of a
//! synchronized clock.
//!
//! Channels are plain TCP connections that are *assumed* private. Nothing
//! here encrypts or authenticates traffic.
//!
//! Wire format, all integers little-endian:
//!
//! ```text
//! u32 length | u8 kind | u16 sender | u16 round | payload
//! ```
//!
//! `length` counts everything after itself. Kind 0 carries a message whose
//! payload is a tag byte (0: empty message, 1: value) optionally followed by
//! a u64 value; kind 1 is a round barrier with an empty payload. The first
//! frame on every connection is a barrier for round 0 identifying the
//! connecting party.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{
    draws_from_seed, EngineError, PartyId, PartyMachine, PartyRecord, ProtocolSpec,
    ProtocolTranscript, Time, Value,
};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Frames longer than this are rejected before allocation.
pub const MAX_FRAME_LEN: u32 = 1 << 16;

const HEADER_LEN: u32 = 5;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("party {peer} unreachable at {addr}: {source}")]
    Connect {
        peer: PartyId,
        addr: SocketAddr,
        source: io::Error,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("frame length {0} out of range")]
    FrameLength(u32),
    #[error("cross-talk: frame for round {got} from party {from} while in round {expected}")]
    CrossTalk {
        expected: Time,
        got: Time,
        from: PartyId,
    },
    #[error("barrier timeout in round {round} waiting for party {waiting_for}")]
    BarrierTimeout { round: Time, waiting_for: PartyId },
    #[error("party {party} stopped before round {round}")]
    Stalled { party: PartyId, round: Time },
    #[error("invalid peer table: {0}")]
    PeerTable(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    Data = 0,
    Barrier = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub kind: FrameKind,
    pub sender: u16,
    pub round: u16,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn data(sender: u16, round: u16, value: Option<Value>) -> Self {
        let payload = match value {
            None => vec![0],
            Some(v) => {
                let mut p = vec![1];
                p.extend_from_slice(&v.to_le_bytes());
                p
            }
        };
        Self {
            kind: FrameKind::Data,
            sender,
            round,
            payload,
        }
    }

    pub fn barrier(sender: u16, round: u16) -> Self {
        Self {
            kind: FrameKind::Barrier,
            sender,
            round,
            payload: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = HEADER_LEN + self.payload.len() as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, NetError> {
        let mut cursor = bytes;
        let frame = Self::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(NetError::Protocol(format!(
                "{} bytes after frame",
                cursor.len()
            )));
        }
        Ok(frame)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NetError> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len);
        if !(HEADER_LEN..=MAX_FRAME_LEN).contains(&len) {
            return Err(NetError::FrameLength(len));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => {
                NetError::Protocol(format!("truncated frame, declared length {len}"))
            }
            _ => NetError::Io(e),
        })?;
        let kind = match body[0] {
            0 => FrameKind::Data,
            1 => FrameKind::Barrier,
            k => return Err(NetError::Protocol(format!("unknown frame kind {k}"))),
        };
        Ok(Self {
            kind,
            sender: u16::from_le_bytes([body[1], body[2]]),
            round: u16::from_le_bytes([body[3], body[4]]),
            payload: body[5..].to_vec(),
        })
    }

    /// The message carried by a data frame.
    pub fn value(&self) -> Result<Option<Value>, NetError> {
        match (self.kind, self.payload.as_slice()) {
            (FrameKind::Data, [0]) => Ok(None),
            (FrameKind::Data, [1, rest @ ..]) if rest.len() == 8 => {
                Ok(Some(u64::from_le_bytes(rest.try_into().expect("8 bytes"))))
            }
            (FrameKind::Data, p) => Err(NetError::Protocol(format!(
                "malformed data payload of {} bytes",
                p.len()
            ))),
            (FrameKind::Barrier, _) => {
                Err(NetError::Protocol("barrier frame carries no value".into()))
            }
        }
    }
}

/// Where every party listens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerTable(pub BTreeMap<PartyId, SocketAddr>);

impl PeerTable {
    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let raw: BTreeMap<String, String> =
            serde_json::from_str(text).map_err(|e| NetError::PeerTable(e.to_string()))?;
        let mut table = BTreeMap::new();
        for (id, addr) in raw {
            let id: PartyId = id
                .parse()
                .map_err(|_| NetError::PeerTable(format!("party id `{id}` is not an integer")))?;
            let addr = addr.parse().map_err(|_| {
                NetError::PeerTable(format!("address `{addr}` for party {id} is invalid"))
            })?;
            table.insert(id, addr);
        }
        Ok(Self(table))
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let raw: BTreeMap<String, String> = self
            .0
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        serde_json::to_string_pretty(&raw).expect("peer table serializes")
    }

    /// Every party of a `parties`-party protocol has an address.
    pub fn check(&self, parties: usize, me: PartyId) -> Result<(), NetError> {
        if me >= parties {
            return Err(NetError::PeerTable(format!(
                "party id {me} outside 0..{parties}"
            )));
        }
        for p in (0..parties).filter(|&p| p != me) {
            if !self.0.contains_key(&p) {
                return Err(NetError::PeerTable(format!("no address for party {p}")));
            }
        }
        Ok(())
    }
}

/// Makes a party stop before the sends of `before_round`, keep its
/// connections open for `hold`, then drop them. Used to exercise the
/// timeout path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StallHook {
    pub before_round: Time,
    pub hold: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub barrier_timeout: Duration,
    pub connect_timeout: Duration,
    pub stall: Option<StallHook>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            stall: None,
        }
    }
}

struct Link {
    peer: PartyId,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

fn wire_id(p: PartyId) -> Result<u16, NetError> {
    u16::try_from(p)
        .map_err(|_| NetError::Protocol(format!("party id {p} does not fit the wire format")))
}

fn connect_with_retry(
    peer: PartyId,
    addr: SocketAddr,
    deadline: Instant,
) -> Result<TcpStream, NetError> {
    loop {
        match TcpStream::connect_timeout(&addr, Duration::from_millis(500)) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(NetError::Connect {
                    peer,
                    addr,
                    source: e,
                })
            }
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn link(peer: PartyId, stream: TcpStream, config: &NetConfig) -> Result<Link, NetError> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(config.barrier_timeout))?;
    Ok(Link {
        peer,
        reader: BufReader::new(stream.try_clone()?),
        writer: BufWriter::new(stream),
    })
}

/// Connects to lower ids, accepts higher ids; returns links sorted by peer.
fn establish_mesh(
    parties: usize,
    me: PartyId,
    listener: &TcpListener,
    peers: &PeerTable,
    config: &NetConfig,
) -> Result<Vec<Link>, NetError> {
    let deadline = Instant::now() + config.connect_timeout;
    let mut links = Vec::with_capacity(parties - 1);
    for peer in 0..me {
        let addr = peers.0[&peer];
        let stream = connect_with_retry(peer, addr, deadline)?;
        let mut l = link(peer, stream, config)?;
        l.writer
            .write_all(&WireFrame::barrier(wire_id(me)?, 0).encode())?;
        l.writer.flush()?;
        links.push(l);
    }
    listener.set_nonblocking(true)?;
    let mut pending: Vec<PartyId> = (me + 1..parties).collect();
    while !pending.is_empty() {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                stream.set_read_timeout(Some(config.connect_timeout))?;
                let mut reader = stream.try_clone()?;
                let hello = WireFrame::read_from(&mut reader)?;
                let from = hello.sender as PartyId;
                if hello.kind != FrameKind::Barrier || hello.round != 0 || !pending.contains(&from)
                {
                    return Err(NetError::Protocol(format!(
                        "unexpected hello from party {from} (kind {:?}, round {})",
                        hello.kind, hello.round
                    )));
                }
                pending.retain(|&p| p != from);
                links.push(link(from, stream, config)?);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    let peer = pending[0];
                    return Err(NetError::Connect {
                        peer,
                        addr: peers
                            .0
                            .get(&peer)
                            .copied()
                            .unwrap_or_else(|| listener.local_addr().expect("bound")),
                        source: io::Error::new(ErrorKind::TimedOut, "peer never connected"),
                    });
                }
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    links.sort_by_key(|l| l.peer);
    Ok(links)
}

fn read_round(link: &mut Link, round: Time) -> Result<Vec<(PartyId, Option<Value>)>, NetError> {
    let mut received = Vec::new();
    loop {
        let frame = WireFrame::read_from(&mut link.reader).map_err(|e| match e {
            NetError::Io(io)
                if matches!(
                    io.kind(),
                    ErrorKind::WouldBlock
                        | ErrorKind::TimedOut
                        | ErrorKind::UnexpectedEof
                        | ErrorKind::ConnectionReset
                ) =>
            {
                NetError::BarrierTimeout {
                    round,
                    waiting_for: link.peer,
                }
            }
            other => other,
        })?;
        if frame.sender as PartyId != link.peer {
            return Err(NetError::Protocol(format!(
                "frame claims sender {} on the link to party {}",
                frame.sender, link.peer
            )));
        }
        if frame.round as Time != round {
            return Err(NetError::CrossTalk {
                expected: round,
                got: frame.round as Time,
                from: link.peer,
            });
        }
        match frame.kind {
            FrameKind::Barrier => return Ok(received),
            FrameKind::Data => received.push((link.peer, frame.value()?)),
        }
    }
}

/// Runs party `me` of `spec` over TCP and returns what it saw. `listener`
/// must already be bound to this party's address in `peers`.
pub fn run_party(
    spec: &ProtocolSpec,
    me: PartyId,
    input: Value,
    seed: u64,
    listener: &TcpListener,
    peers: &PeerTable,
    config: &NetConfig,
) -> Result<PartyRecord, NetError> {
    spec.validate()?;
    let parties = spec.parties();
    peers.check(parties, me)?;
    if spec.horizon() > u16::MAX as Time {
        return Err(NetError::Protocol(format!(
            "horizon {} exceeds the wire round field",
            spec.horizon()
        )));
    }
    let mut machine = PartyMachine::new(spec, me, input, draws_from_seed(spec, me, seed))?;
    let mut links = establish_mesh(parties, me, listener, peers, config)?;
    let sender = wire_id(me)?;

    for t in 1..=spec.horizon() {
        if let Some(stall) = config.stall {
            if stall.before_round == t {
                thread::sleep(stall.hold);
                return Err(NetError::Stalled {
                    party: me,
                    round: t,
                });
            }
        }
        if t % 2 == 1 {
            machine.local_step(t)?;
            continue;
        }
        let outgoing = machine.outgoing(t)?;
        for l in links.iter_mut() {
            for e in outgoing.iter().filter(|e| e.to == l.peer) {
                l.writer
                    .write_all(&WireFrame::data(sender, t as u16, e.value).encode())?;
            }
            l.writer
                .write_all(&WireFrame::barrier(sender, t as u16).encode())?;
            l.writer.flush()?;
        }
        let mut inbox = Vec::new();
        for l in links.iter_mut() {
            inbox.extend(read_round(l, t)?);
        }
        machine.deliver(t, inbox)?;
    }
    Ok(machine.finish()?)
}

/// Binds `addr`, then [`run_party`].
pub fn run_party_at(
    spec: &ProtocolSpec,
    me: PartyId,
    input: Value,
    seed: u64,
    peers: &PeerTable,
    config: &NetConfig,
) -> Result<PartyRecord, NetError> {
    let addr = *peers
        .0
        .get(&me)
        .ok_or_else(|| NetError::PeerTable(format!("no listen address for party {me}")))?;
    let listener = TcpListener::bind(addr)?;
    run_party(spec, me, input, seed, &listener, peers, config)
}

/// Binds one ephemeral localhost port per party.
pub fn bind_localhost(parties: usize) -> Result<(Vec<TcpListener>, PeerTable), NetError> {
    let listeners = (0..parties)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<Result<Vec<_>, _>>()?;
    let table = listeners
        .iter()
        .enumerate()
        .map(|(i, l)| l.local_addr().map(|a| (i, a)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    Ok((listeners, PeerTable(table)))
}

/// Runs every party on its own thread over localhost TCP. Per-party
/// results are returned in party order.
pub fn run_threads(
    spec: &ProtocolSpec,
    inputs: &[Value],
    seeds: &[u64],
    configs: &[NetConfig],
) -> Result<Vec<Result<PartyRecord, NetError>>, NetError> {
    let parties = spec.parties();
    if inputs.len() != parties || seeds.len() != parties || configs.len() != parties {
        return Err(NetError::Protocol(format!(
            "need {parties} inputs, seeds and configs, got {}, {}, {}",
            inputs.len(),
            seeds.len(),
            configs.len()
        )));
    }
    let (listeners, peers) = bind_localhost(parties)?;
    let results = thread::scope(|scope| {
        let handles: Vec<_> = listeners
            .iter()
            .enumerate()
            .map(|(i, listener)| {
                let peers = &peers;
                scope.spawn(move || {
                    run_party(spec, i, inputs[i], seeds[i], listener, peers, &configs[i])
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("party thread panicked"))
            .collect()
    });
    Ok(results)
}

/// Networked run with default timeouts, assembled into a transcript.
pub fn run_networked(
    spec: &ProtocolSpec,
    inputs: &[Value],
    seeds: &[u64],
) -> Result<ProtocolTranscript, NetError> {
    let configs = vec![NetConfig::default(); spec.parties()];
    let records = run_threads(spec, inputs, seeds, &configs)?
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ProtocolTranscript::assemble(spec.name(), records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oneshot::{build_modm_sum, build_xor_chain, OutputDelivery};
    use crate::transcript::{execute, randomness_from_seeds};

    #[test]
    fn frame_layout() {
        let f = WireFrame::data(3, 4, Some(0x0102));
        let bytes = f.encode();
        assert_eq!(&bytes[..4], &14u32.to_le_bytes());
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..7], &[3, 0]);
        assert_eq!(&bytes[7..9], &[4, 0]);
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..], &0x0102u64.to_le_bytes());
        assert_eq!(WireFrame::decode(&bytes).unwrap(), f);
        assert_eq!(f.value().unwrap(), Some(0x0102));

        let b = WireFrame::barrier(1, 2).encode();
        assert_eq!(b, vec![5, 0, 0, 0, 1, 1, 0, 2, 0]);
        assert_eq!(WireFrame::data(0, 2, None).value().unwrap(), None);
    }

    #[test]
    fn malformed_frames() {
        assert!(matches!(
            WireFrame::decode(&[2, 0, 0, 0, 0, 0]),
            Err(NetError::FrameLength(2))
        ));
        let mut long = WireFrame::data(0, 2, Some(1)).encode();
        long.truncate(10);
        assert!(matches!(
            WireFrame::decode(&long),
            Err(NetError::Protocol(_))
        ));
        assert!(matches!(
            WireFrame::decode(&[5, 0, 0, 0, 7, 0, 0, 0, 0]),
            Err(NetError::Protocol(_))
        ));
        let mut extra = WireFrame::barrier(0, 0).encode();
        extra.push(0);
        assert!(WireFrame::decode(&extra).is_err());
        let bad_payload = WireFrame {
            kind: FrameKind::Data,
            sender: 0,
            round: 2,
            payload: vec![1, 2],
        };
        assert!(bad_payload.value().is_err());
    }

    #[test]
    fn peer_table_json() {
        let t = PeerTable::from_json(r#"{"0": "127.0.0.1:7000", "1": "127.0.0.1:7001"}"#).unwrap();
        assert_eq!(PeerTable::from_json(&t.to_json()).unwrap(), t);
        assert!(t.check(2, 0).is_ok());
        assert!(t.check(3, 0).is_err());
        assert!(PeerTable::from_json(r#"{"x": "127.0.0.1:1"}"#).is_err());
    }

    #[test]
    fn xor_chain_over_tcp_matches_execute() {
        let spec = build_xor_chain(3, OutputDelivery::ComputingPartyOnly)
            .unwrap()
            .spec;
        let inputs = [1, 0, 1];
        let seeds = [11, 12, 13];
        let net = run_networked(&spec, &inputs, &seeds).unwrap();
        let local = execute(&spec, &inputs, &randomness_from_seeds(&spec, &seeds)).unwrap();
        assert_eq!(net.to_json(), local.to_json());
        assert!(net.ledger_is_consistent());
    }

    #[test]
    fn modm_sum_over_tcp() {
        let spec = build_modm_sum(5, None, OutputDelivery::ComputingPartyOnly)
            .unwrap()
            .spec;
        let inputs = [1, 1, 0, 1, 1];
        let net = run_networked(&spec, &inputs, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(net.outputs[4], Some(4));
    }

    #[test]
    fn stalled_party_times_out_others() {
        let spec = build_xor_chain(3, OutputDelivery::BroadcastBack)
            .unwrap()
            .spec;
        let mut configs = vec![
            NetConfig {
                barrier_timeout: Duration::from_millis(300),
                ..NetConfig::default()
            };
            3
        ];
        // hangs past the others' timeout
        configs[1].stall = Some(StallHook {
            before_round: 4,
            hold: Duration::from_millis(1500),
        });
        let results = run_threads(&spec, &[0, 1, 1], &[1, 2, 3], &configs).unwrap();
        assert!(matches!(
            results[1],
            Err(NetError::Stalled { party: 1, round: 4 })
        ));
        for p in [0, 2] {
            match &results[p] {
                Err(NetError::BarrierTimeout {
                    round: 4,
                    waiting_for: 1,
                }) => {}
                other => panic!("party {p}: {other:?}"),
            }
        }

        // closes its sockets immediately
        configs[1].stall = Some(StallHook {
            before_round: 2,
            hold: Duration::ZERO,
        });
        let results = run_threads(&spec, &[0, 1, 1], &[1, 2, 3], &configs).unwrap();
        for p in [0, 2] {
            assert!(matches!(
                results[p],
                Err(NetError::BarrierTimeout {
                    round: 2,
                    waiting_for: 1
                })
            ));
        }
    }

    #[test]
    fn unreachable_peer() {
        let spec = build_xor_chain(3, OutputDelivery::ComputingPartyOnly)
            .unwrap()
            .spec;
        let (listeners, peers) = bind_localhost(3).unwrap();
        drop(listeners);
        let config = NetConfig {
            connect_timeout: Duration::from_millis(200),
            ..NetConfig::default()
        };
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let err = run_party(&spec, 2, 0, 1, &listener, &peers, &config).unwrap_err();
        assert!(matches!(err, NetError::Connect { peer: 0, .. }), "{err:?}");
    }
}
