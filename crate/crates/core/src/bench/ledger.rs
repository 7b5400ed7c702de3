//! Per-round communication and metric ledger and its CSV form.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::federation::FederationResult;

pub const CSV_COLUMNS: [&str; 11] = [
    "run_id",
    "round",
    "client_id",
    "n_k",
    "w_k",
    "loss_u",
    "loss_g",
    "acc",
    "bytes_up",
    "bytes_down",
    "wall_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Participant {
    Client(usize),
    Server,
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Client(id) => write!(f, "{id}"),
            Participant::Server => f.write_str("SERVER"),
        }
    }
}

impl FromStr for Participant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "SERVER" {
            return Ok(Participant::Server);
        }
        s.parse()
            .map(Participant::Client)
            .map_err(|_| Error::InvalidArgument(format!("bad client id {s:?}")))
    }
}

impl Serialize for Participant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Participant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One ledger row. Byte columns follow link direction: `bytes_up` is
/// client-to-server traffic and `bytes_down` server-to-client traffic, so
/// the server row carries the totals of its clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub run_id: String,
    pub round: usize,
    pub client_id: Participant,
    pub n_k: usize,
    pub w_k: f64,
    pub loss_u: f64,
    pub loss_g: f64,
    pub acc: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub wall_ms: u64,
    #[serde(skip)]
    pub trainable_params: usize,
    #[serde(skip)]
    pub frozen_params: usize,
}

/// Client rows in id order, then the server row, for every round.
///
/// Client metrics are each client's own post-training validation scores;
/// server metrics are the aggregated adapters on the pooled validation set.
pub fn ledger_from_history(
    run_id: &str,
    result: &FederationResult,
    trainable_params: usize,
    frozen_params: usize,
) -> Vec<LedgerEntry> {
    let mut out = Vec::new();
    for record in &result.history {
        for c in &record.clients {
            out.push(LedgerEntry {
                run_id: run_id.to_string(),
                round: record.round,
                client_id: Participant::Client(c.client_id),
                n_k: c.n_k,
                w_k: c.weight,
                loss_u: c.metrics.loss_u,
                loss_g: c.metrics.loss_g,
                acc: c.metrics.accuracy,
                bytes_up: c.bytes_up,
                bytes_down: c.bytes_down,
                wall_ms: c.wall_ms,
                trainable_params,
                frozen_params,
            });
        }
        out.push(LedgerEntry {
            run_id: run_id.to_string(),
            round: record.round,
            client_id: Participant::Server,
            n_k: record.clients.iter().map(|c| c.n_k).sum(),
            w_k: record.clients.iter().map(|c| c.weight).sum(),
            loss_u: record.metrics.loss_u,
            loss_g: record.metrics.loss_g,
            acc: record.metrics.accuracy,
            bytes_up: record.clients.iter().map(|c| c.bytes_up).sum(),
            bytes_down: record.clients.iter().map(|c| c.bytes_down).sum(),
            wall_ms: record.server_wall_ms,
            trainable_params,
            frozen_params,
        });
    }
    out
}

pub fn write_ledger_csv<W: Write>(entries: &[LedgerEntry], sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(sink);
    w.write_record(CSV_COLUMNS)?;
    for e in entries {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn ledger_csv_string(entries: &[LedgerEntry]) -> Result<String> {
    let mut buf = Vec::new();
    write_ledger_csv(entries, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn read_ledger_csv<R: Read>(source: R) -> Result<Vec<LedgerEntry>> {
    let mut r = csv::Reader::from_reader(source);
    let headers = r.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::InvalidArgument(format!("unexpected ledger columns {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Per round: the server's uplink total equals the sum of client uploads,
/// its downlink total equals the sum of client downloads, and every client
/// downloads the same snapshot.
pub fn check_conservation(entries: &[LedgerEntry]) -> Result<()> {
    let mut rounds: Vec<usize> = entries.iter().map(|e| e.round).collect();
    rounds.dedup();
    for round in rounds {
        let rows: Vec<&LedgerEntry> = entries.iter().filter(|e| e.round == round).collect();
        let (servers, clients): (Vec<&LedgerEntry>, Vec<&LedgerEntry>) =
            rows.into_iter().partition(|e| e.client_id == Participant::Server);
        let [server] = servers.as_slice() else {
            return Err(Error::InvalidArgument(format!("round {round} has {} server rows", servers.len())));
        };
        let up: usize = clients.iter().map(|e| e.bytes_up).sum();
        let down: usize = clients.iter().map(|e| e.bytes_down).sum();
        if server.bytes_up != up || server.bytes_down != down {
            return Err(Error::InvalidArgument(format!(
                "round {round}: server rows ({}, {}) vs client sums ({up}, {down})",
                server.bytes_up, server.bytes_down
            )));
        }
        if let Some(first) = clients.first() {
            if clients.iter().any(|c| c.bytes_down != first.bytes_down) {
                return Err(Error::InvalidArgument(format!("round {round}: clients received different snapshots")));
            }
        }
    }
    Ok(())
}
