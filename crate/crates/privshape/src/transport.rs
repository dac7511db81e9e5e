//! Line protocol for running the rounds over TCP.
//!
//! A message is one line: `KIND k=v;k=v\n`, with keys and values
//! percent-encoded. Kinds are HELLO, ASSIGN, CANDIDATES, REPORT, RESULT and
//! BYE. The server accepts a fixed number of clients, numbers them in
//! arrival order, and then drives the same [`Server`] state machine as an
//! in-process run. A BYE carrying `error` ends a connection abnormally.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use privshape_core::protocol::{
    Group, LengthRange, MatchMode, Report, ReportKind, ReportPayload, Request, RoundSummary, UserId, UserParams,
};
use privshape_core::{CandidateSet, DistanceMetric, PrivacyBudget, ProtocolConfig, Server, ShapeResult, SymbolSequence, UserAgent};

use crate::error::{Error, Result};

pub const MAX_LINE: usize = 64 * 1024;
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(30);

const ESCAPE: &AsciiSet = &CONTROLS.add(b'%').add(b';').add(b'=').add(b' ');

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Hello,
    Assign,
    Candidates,
    Report,
    Result,
    Bye,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        Self::Hello,
        Self::Assign,
        Self::Candidates,
        Self::Report,
        Self::Result,
        Self::Bye,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Hello => "HELLO",
            Self::Assign => "ASSIGN",
            Self::Candidates => "CANDIDATES",
            Self::Report => "REPORT",
            Self::Result => "RESULT",
            Self::Bye => "BYE",
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MessageKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Wire(format!("unknown message kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub fields: Vec<(String, String)>,
}

impl Message {
    pub fn new(kind: MessageKind) -> Self {
        Self { kind, fields: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Wire(format!("{} without {key:?}", self.kind)))
    }

    fn parse_field<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Wire(format!("{} field {key}={v:?} is malformed", self.kind)))
    }

    fn error(msg: impl ToString) -> Self {
        Self::new(MessageKind::Bye).with("error", msg)
    }
}

pub fn encode(msg: &Message) -> Result<String> {
    let mut line = format!("{} ", msg.kind);
    for (i, (k, v)) in msg.fields.iter().enumerate() {
        if i > 0 {
            line.push(';');
        }
        line.extend(utf8_percent_encode(k, ESCAPE));
        line.push('=');
        line.extend(utf8_percent_encode(v, ESCAPE));
    }
    line.push('\n');
    if line.len() > MAX_LINE {
        return Err(Error::Wire(format!("line of {} bytes exceeds {MAX_LINE}", line.len())));
    }
    Ok(line)
}

fn unescape(s: &str) -> Result<String> {
    percent_decode_str(s)
        .decode_utf8()
        .map(|c| c.into_owned())
        .map_err(|_| Error::Wire(format!("bad escape in {s:?}")))
}

pub fn decode(line: &str) -> Result<Message> {
    if line.len() > MAX_LINE {
        return Err(Error::Wire(format!("line of {} bytes exceeds {MAX_LINE}", line.len())));
    }
    let line = line.strip_suffix('\n').unwrap_or(line);
    let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
    let kind: MessageKind = kind.parse()?;
    let mut fields = Vec::new();
    if !rest.is_empty() {
        for pair in rest.split(';') {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Wire(format!("malformed pair {pair:?}")))?;
            if k.is_empty() {
                return Err(Error::Wire(format!("empty key in {pair:?}")));
            }
            fields.push((unescape(k)?, unescape(v)?));
        }
    }
    Ok(Message { kind, fields })
}

/// Read one message; `None` on a clean end of stream.
pub fn read_message<R: BufRead>(reader: &mut R) -> Result<Option<Message>> {
    let mut buf = Vec::new();
    reader.take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf)?;
    if buf.is_empty() {
        return Ok(None);
    }
    if buf.len() > MAX_LINE {
        return Err(Error::Wire(format!("line exceeds {MAX_LINE} bytes")));
    }
    if buf.last() != Some(&b'\n') {
        return Err(Error::Wire("connection closed mid-line".into()));
    }
    let line = String::from_utf8(buf).map_err(|_| Error::Wire("line is not UTF-8".into()))?;
    decode(&line).map(Some)
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<()> {
    writer.write_all(encode(msg)?.as_bytes())?;
    writer.flush()?;
    Ok(())
}

fn join_seqs<'a>(seqs: impl Iterator<Item = &'a SymbolSequence>) -> String {
    seqs.map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn split_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|x| x.parse().map_err(|_| Error::Wire(format!("bad {what} {x:?}"))))
        .collect()
}

fn parse_seqs(s: &str) -> Result<Vec<SymbolSequence>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| Ok(SymbolSequence::parse(x)?)).collect()
}

pub fn report_message(r: &Report) -> Message {
    Message::new(MessageKind::Report)
        .with("user", r.user)
        .with("round", r.round)
        .with("kind", r.kind())
        .with("payload", &r.payload)
}

pub fn report_from_message(m: &Message) -> Result<Report> {
    if m.kind != MessageKind::Report {
        return Err(Error::Wire(format!("expected REPORT, got {}", m.kind)));
    }
    let kind: ReportKind = m.require("kind")?.parse()?;
    Ok(Report {
        user: m.parse_field("user")?,
        round: m.parse_field("round")?,
        payload: ReportPayload::parse(kind, m.require("payload")?)?,
    })
}

pub fn request_message(round: usize, request: &Request) -> Message {
    let m = Message::new(MessageKind::Candidates).with("round", round);
    match request {
        Request::Length { range } => m.with("req", "length").with("low", range.low).with("high", range.high),
        Request::SubShape { target_len } => m.with("req", "subshape").with("target", target_len),
        Request::Select { level, candidates } => m
            .with("req", "select")
            .with("level", level)
            .with("cands", join_seqs(candidates.iter())),
        Request::Refine {
            candidates,
            num_classes,
        } => {
            let m = m.with("req", "refine").with("cands", join_seqs(candidates.iter()));
            match num_classes {
                Some(c) => m.with("classes", c),
                None => m,
            }
        }
    }
}

pub fn request_from_message(m: &Message) -> Result<(usize, Request)> {
    let round = m.parse_field("round")?;
    let request = match m.require("req")? {
        "length" => Request::Length {
            range: LengthRange::new(m.parse_field("low")?, m.parse_field("high")?)?,
        },
        "subshape" => Request::SubShape {
            target_len: m.parse_field("target")?,
        },
        "select" => Request::Select {
            level: m.parse_field("level")?,
            candidates: CandidateSet::new(parse_seqs(m.require("cands")?)?)?,
        },
        "refine" => Request::Refine {
            candidates: CandidateSet::new(parse_seqs(m.require("cands")?)?)?,
            num_classes: m.get("classes").map(|_| m.parse_field("classes")).transpose()?,
        },
        other => return Err(Error::Wire(format!("unknown request {other:?}"))),
    };
    Ok((round, request))
}

pub fn result_message(r: &ShapeResult) -> Message {
    let mut m = Message::new(MessageKind::Result)
        .with("shapes", join_seqs(r.shapes.iter()))
        .with("counts", r.counts.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
        .with("length", r.length);
    if let Some(labels) = &r.labels {
        m = m.with("labels", labels.iter().map(u32::to_string).collect::<Vec<_>>().join(","));
    }
    if !r.diagnostics.is_empty() {
        m = m.with("diag", r.diagnostics.join("\n"));
    }
    m
}

pub fn result_from_message(m: &Message) -> Result<ShapeResult> {
    Ok(ShapeResult {
        shapes: parse_seqs(m.require("shapes")?)?,
        counts: split_list(m.require("counts")?, "count")?,
        labels: m.get("labels").map(|l| split_list(l, "label")).transpose()?,
        length: m.parse_field("length")?,
        diagnostics: m
            .get("diag")
            .map(|d| d.split('\n').map(String::from).collect())
            .unwrap_or_default(),
    })
}

fn match_name(mode: MatchMode) -> &'static str {
    match mode {
        MatchMode::FullSequence => "full",
        MatchMode::Prefix => "prefix",
    }
}

fn assign_message(user: UserId, group: Group, seed: u64, p: &UserParams) -> Message {
    Message::new(MessageKind::Assign)
        .with("user", user)
        .with("group", group.name())
        .with("seed", seed)
        .with("epsilon", p.epsilon)
        .with("t", p.t)
        .with("metric", p.metric)
        .with("match", match_name(p.match_mode))
}

/// A user's view of its ASSIGN message.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub user: UserId,
    pub group: String,
    pub seed: u64,
    pub params: UserParams,
}

fn assignment_from_message(m: &Message) -> Result<Assignment> {
    if m.kind != MessageKind::Assign {
        return Err(Error::Wire(format!("expected ASSIGN, got {}", m.kind)));
    }
    let epsilon: f64 = m.parse_field("epsilon")?;
    let match_mode = match m.require("match")? {
        "full" => MatchMode::FullSequence,
        "prefix" => MatchMode::Prefix,
        other => return Err(Error::Wire(format!("unknown match mode {other:?}"))),
    };
    Ok(Assignment {
        user: m.parse_field("user")?,
        group: m.require("group")?.to_string(),
        seed: m.parse_field("seed")?,
        params: UserParams {
            epsilon: PrivacyBudget::new(epsilon)?,
            t: m.parse_field("t")?,
            metric: m.require("metric")?.parse::<DistanceMetric>()?,
            match_mode,
        },
    })
}

/// A framed, bidirectional connection.
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Connection {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        write_message(&mut self.writer, msg)
    }

    /// Send a raw line, for exercising the server's error paths.
    pub fn send_raw(&mut self, line: &str) -> Result<()> {
        self.writer.write_all(line.as_bytes())?;
        Ok(self.writer.flush()?)
    }

    pub fn recv(&mut self) -> Result<Option<Message>> {
        read_message(&mut self.reader)
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub users: usize,
    pub round_timeout: Duration,
}

impl ServeOptions {
    pub fn new(users: usize) -> Self {
        Self {
            users,
            round_timeout: DEFAULT_ROUND_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub result: ShapeResult,
    pub transcript: Vec<Report>,
    pub rounds: Vec<RoundSummary>,
}

enum Event {
    Message(Message),
    Bad(String),
    Closed,
}

struct Peer {
    writer: Option<TcpStream>,
}

impl Peer {
    fn send(&mut self, msg: &Message) {
        if let Some(w) = &mut self.writer {
            if write_message(w, msg).is_err() {
                self.writer = None;
            }
        }
    }

    fn close(&mut self, reason: &str) {
        self.send(&Message::error(reason));
        if let Some(w) = self.writer.take() {
            let _ = w.shutdown(Shutdown::Both);
        }
    }

    fn alive(&self) -> bool {
        self.writer.is_some()
    }
}

/// Run one protocol instance over `listener`. User ids follow the order in
/// which clients complete their HELLO.
pub fn serve(listener: &TcpListener, config: ProtocolConfig, opts: &ServeOptions) -> Result<ServeOutcome> {
    let mut server = Server::new(config.clone(), opts.users)?;
    let (tx, rx) = mpsc::channel::<(UserId, Event)>();
    let mut peers: Vec<Peer> = Vec::with_capacity(opts.users);

    while peers.len() < opts.users {
        let (stream, addr) = listener.accept()?;
        let mut conn = Connection::new(stream)?;
        match conn.recv() {
            Ok(Some(m)) if m.kind == MessageKind::Hello => {}
            Ok(_) | Err(_) => {
                let _ = conn.send(&Message::error("expected HELLO"));
                continue;
            }
        }
        let id = peers.len() as UserId;
        info!("user {id} connected from {addr}");
        let Connection { mut reader, writer } = conn;
        let tx = tx.clone();
        thread::spawn(move || loop {
            let event = match read_message(&mut reader) {
                Ok(Some(m)) => Event::Message(m),
                Ok(None) => Event::Closed,
                Err(Error::Io(_)) => Event::Closed,
                Err(e) => Event::Bad(e.to_string()),
            };
            let stop = !matches!(event, Event::Message(_));
            if tx.send((id, event)).is_err() || stop {
                break;
            }
        });
        peers.push(Peer { writer: Some(writer) });
    }
    drop(tx);

    let params = config.user_params();
    for (id, peer) in peers.iter_mut().enumerate() {
        let group = server.group_of(id as UserId).expect("every user has a group");
        peer.send(&assign_message(id as UserId, group, config.seed, &params));
    }

    let mut reported: BTreeSet<UserId> = BTreeSet::new();
    while let Some(round) = server.next_round()? {
        let msg = request_message(round.index, &round.request);
        let mut waiting: BTreeSet<UserId> = BTreeSet::new();
        for &u in &round.users {
            let peer = &mut peers[u as usize];
            peer.send(&msg);
            if peer.alive() {
                waiting.insert(u);
            }
        }
        let mut got: BTreeMap<UserId, Report> = BTreeMap::new();
        let deadline = Instant::now() + opts.round_timeout;
        while !waiting.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            let (id, event) = match rx.recv_timeout(left) {
                Ok(x) => x,
                Err(_) => {
                    warn!("round {}: {} users timed out", round.index, waiting.len());
                    break;
                }
            };
            let peer = &mut peers[id as usize];
            match event {
                Event::Closed => {
                    if waiting.remove(&id) {
                        warn!("round {}: user {id} disconnected before reporting", round.index);
                    }
                    peer.writer = None;
                }
                Event::Bad(e) => {
                    warn!("user {id}: {e}");
                    peer.close(&e);
                    waiting.remove(&id);
                }
                Event::Message(m) => {
                    let verdict = report_from_message(&m).and_then(|r| {
                        if r.user != id {
                            Err(Error::Wire(format!("connection {id} reported as user {}", r.user)))
                        } else if reported.contains(&id) {
                            Err(Error::Wire(format!("user {id} already reported")))
                        } else if !waiting.contains(&id) || r.round != round.index {
                            Err(Error::Wire(format!("user {id} is not in round {}", round.index)))
                        } else {
                            Ok(r)
                        }
                    });
                    match verdict {
                        Ok(r) => {
                            reported.insert(id);
                            waiting.remove(&id);
                            got.insert(id, r);
                        }
                        Err(e) => {
                            warn!("{e}");
                            peer.close(&e.to_string());
                            waiting.remove(&id);
                        }
                    }
                }
            }
        }
        let reports: Vec<Report> = round.users.iter().filter_map(|u| got.remove(u)).collect();
        server.submit(&reports)?;
    }

    let result = server.result().cloned().expect("server finished");
    let msg = result_message(&result);
    for peer in &mut peers {
        peer.send(&msg);
        peer.send(&Message::new(MessageKind::Bye));
        if let Some(w) = peer.writer.take() {
            let _ = w.shutdown(Shutdown::Write);
        }
    }
    Ok(ServeOutcome {
        result,
        transcript: server.transcript().to_vec(),
        rounds: server.rounds().to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub assignment: Assignment,
    pub result: ShapeResult,
}

/// Take part in one run as a single user holding `sequence`.
pub fn connect(addr: impl ToSocketAddrs, sequence: SymbolSequence, label: Option<u32>) -> Result<ClientOutcome> {
    let mut conn = Connection::connect(addr)?;
    conn.send(&Message::new(MessageKind::Hello))?;
    let first = conn
        .recv()?
        .ok_or_else(|| Error::Wire("server closed before ASSIGN".into()))?;
    if let Some(e) = first.get("error") {
        return Err(Error::Peer(e.to_string()));
    }
    let assignment = assignment_from_message(&first)?;
    let mut agent = UserAgent::new(assignment.user, sequence, label, assignment.seed);
    let mut result = None;
    loop {
        let msg = conn
            .recv()?
            .ok_or_else(|| Error::Wire("server closed without BYE".into()))?;
        match msg.kind {
            MessageKind::Candidates => {
                let (round, request) = request_from_message(&msg)?;
                let report = agent.respond(&assignment.params, round, &request)?;
                conn.send(&report_message(&report))?;
            }
            MessageKind::Result => result = Some(result_from_message(&msg)?),
            MessageKind::Bye => {
                if let Some(e) = msg.get("error") {
                    return Err(Error::Peer(e.to_string()));
                }
                let result = result.ok_or_else(|| Error::Wire("BYE before RESULT".into()))?;
                return Ok(ClientOutcome { assignment, result });
            }
            other => return Err(Error::Wire(format!("unexpected {other} from server"))),
        }
    }
}
