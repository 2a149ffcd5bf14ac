//! Simulated client/server traffic.
//!
//! Only embedding-width tensors cross the boundary: embeddings, completer
//! sources, and their gradients. Raw features and completed features stay
//! with their owning client and have no payload kind.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::losses::Node;

/// Bytes per transmitted real.
pub const BYTES_PER_REAL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Client(usize),
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    /// `E_i`, client → server.
    Embedding,
    /// Mean of source embeddings for `XCom_i`, server → client.
    SourceEmbedding,
    /// `Ẽ_i`, client → server.
    ReconEmbedding,
    /// Self-completed embedding, client → server.
    SelfEmbedding,
    /// Cut-layer gradient of `Ẽ_i` or the self-completed embedding, server → client.
    ReconGrad,
    /// Gradient of the completer source, client → server for redistribution.
    SourceGrad,
    /// Cut-layer gradient of `E_i`, server → client.
    EmbeddingGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub round: usize,
    pub from: Party,
    pub to: Party,
    pub payload: Payload,
    pub rows: usize,
    pub cols: usize,
}

impl Message {
    pub fn bytes(&self) -> usize {
        self.rows * self.cols * BYTES_PER_REAL
    }

    pub fn is_upload(&self) -> bool {
        self.to == Party::Server
    }
}

#[derive(Clone, Copy)]
enum NodeKind {
    Emb,
    Recon,
    SelfRecon,
}

impl NodeKind {
    fn node(self, i: usize) -> Node {
        match self {
            NodeKind::Emb => Node::Emb(i),
            NodeKind::Recon => Node::Recon(i),
            NodeKind::SelfRecon => Node::SelfRecon(i),
        }
    }
}

type Phase = &'static [(NodeKind, Payload, bool)];

const PHASES: [Phase; 6] = [
    &[(NodeKind::Emb, Payload::Embedding, true)],
    &[(NodeKind::Recon, Payload::SourceEmbedding, false)],
    &[
        (NodeKind::Recon, Payload::ReconEmbedding, true),
        (NodeKind::SelfRecon, Payload::SelfEmbedding, true),
    ],
    &[
        (NodeKind::Recon, Payload::ReconGrad, false),
        (NodeKind::SelfRecon, Payload::ReconGrad, false),
    ],
    &[(NodeKind::Recon, Payload::SourceGrad, true)],
    &[(NodeKind::Emb, Payload::EmbeddingGrad, false)],
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    pub messages: Vec<Message>,
}

impl Ledger {
    /// Appends the traffic of one loss evaluation, phase by phase and in client order.
    pub fn record_evaluation(
        &mut self,
        round: usize,
        node_rows: &BTreeMap<Node, usize>,
        embed_dim: usize,
    ) {
        let rows_of = |node: Node| node_rows.get(&node).copied().unwrap_or(0);
        let k = node_rows
            .keys()
            .map(|n| match *n {
                Node::Emb(i) | Node::Recon(i) | Node::SelfRaw(i) | Node::SelfRecon(i) => i + 1,
            })
            .max()
            .unwrap_or(0);
        for phase in PHASES {
            for i in 0..k {
                for &(kind, payload, upload) in phase {
                    let rows = rows_of(kind.node(i));
                    if rows == 0 {
                        continue;
                    }
                    let (from, to) = if upload {
                        (Party::Client(i), Party::Server)
                    } else {
                        (Party::Server, Party::Client(i))
                    };
                    self.messages.push(Message {
                        round,
                        from,
                        to,
                        payload,
                        rows,
                        cols: embed_dim,
                    });
                }
            }
        }
    }

    pub fn round(&self, round: usize) -> impl Iterator<Item = &Message> {
        self.messages.iter().filter(move |m| m.round == round)
    }

    /// `(bytes up, bytes down)` for a round.
    pub fn round_bytes(&self, round: usize) -> (usize, usize) {
        self.round(round).fold((0, 0), |(u, d), m| {
            if m.is_upload() {
                (u + m.bytes(), d)
            } else {
                (u, d + m.bytes())
            }
        })
    }

    pub fn bytes_of(&self, round: usize, payload: Payload) -> usize {
        self.round(round)
            .filter(|m| m.payload == payload)
            .map(Message::bytes)
            .sum()
    }
}
