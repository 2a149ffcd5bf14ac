//! Forward and backward evaluation of a list of loss terms.
//!
//! Every embedding a term needs is computed once per batch as a node:
//! real embeddings `E_i`, reconstructed embeddings `Ẽ_i`, and the two
//! stages of the self-input branch. Terms read node rows, node gradients
//! are accumulated, and nodes are then backpropagated in reverse
//! dependency order.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::VerticalDataset;
use crate::error::{Error, Result};
use crate::models::{merge_partial, ModelBundle};
use crate::numkit::{mse, softmax_cross_entropy, LayerCache, Matrix};

use super::terms::{full_set, ClientSet, Term, TermKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    /// `f_i(x_i)` on rows where client `i` is full.
    Emb(usize),
    /// `f_i(merge(x_i, XCom_i(mean of source embeddings)))`.
    Recon(usize),
    /// `f_i(x_i)` on rows where client `i` is partial.
    SelfRaw(usize),
    /// `f_i(merge(x_i, XCom_i(SelfRaw_i)))`.
    SelfRecon(usize),
}

struct Completion {
    xcom_cache: LayerCache,
    /// Row-major positions that take the completer output.
    adopt: Vec<bool>,
    /// Per local row, the clients whose embeddings fed the completer.
    sources: Vec<ClientSet>,
}

struct NodeData {
    rows: Vec<usize>,
    /// Batch row → local row.
    local: BTreeMap<usize, usize>,
    value: Matrix,
    bottom_cache: LayerCache,
    completion: Option<Completion>,
}

impl NodeData {
    fn gather(&self, rows: &[usize]) -> Result<Matrix> {
        let idx = self.locals(rows)?;
        Ok(self.value.select_rows(&idx))
    }

    fn locals(&self, rows: &[usize]) -> Result<Vec<usize>> {
        rows.iter()
            .map(|r| {
                self.local
                    .get(r)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("embedding node missing row {r}")))
            })
            .collect()
    }
}

/// Per-term result of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TermRecord {
    pub kind: TermKind,
    pub rows: usize,
    pub value: f64,
    pub weight: f64,
}

pub struct Evaluation {
    /// `Σ weight · value` over terms.
    pub total: f64,
    pub terms: Vec<TermRecord>,
    pub grad: Option<ModelBundle>,
    /// Rows computed per embedding node.
    pub node_rows: BTreeMap<Node, usize>,
}

/// Embeddings computed for a batch, scattered back to batch rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// Per-client `n × e` real embeddings; rows not computed are zero.
    pub real: Vec<Matrix>,
    pub real_available: Vec<Vec<bool>>,
    /// Per-client `n × e` reconstructed embeddings; rows not computed are zero.
    pub recon: Vec<Matrix>,
    pub recon_available: Vec<Vec<bool>>,
    /// Clients whose embeddings fed each reconstruction; empty where none was built.
    pub sources: Vec<Vec<ClientSet>>,
}

impl EmbeddingSet {
    pub fn n(&self) -> usize {
        self.real.first().map_or(0, Matrix::rows)
    }
}

/// Runs the forward part of the engine for `terms` and exposes the embeddings.
pub fn forward_embeddings(
    bundle: &ModelBundle,
    batch: &VerticalDataset,
    terms: &[Term],
) -> Result<EmbeddingSet> {
    check_shapes(bundle, batch)?;
    let graph = Graph::build(bundle, batch, terms)?;
    let (n, e, k) = (batch.n(), bundle.embed_dim(), batch.k());
    let mut set = EmbeddingSet {
        real: vec![Matrix::zeros(n, e); k],
        real_available: vec![vec![false; n]; k],
        recon: vec![Matrix::zeros(n, e); k],
        recon_available: vec![vec![false; n]; k],
        sources: vec![vec![ClientSet::EMPTY; n]; k],
    };
    for (node, data) in &graph.nodes {
        let (target, avail, client) = match *node {
            Node::Emb(i) => (&mut set.real[i], &mut set.real_available[i], i),
            Node::Recon(i) => (&mut set.recon[i], &mut set.recon_available[i], i),
            Node::SelfRaw(_) | Node::SelfRecon(_) => continue,
        };
        for (l, &r) in data.rows.iter().enumerate() {
            target.row_mut(r).copy_from_slice(data.value.row(l));
            avail[r] = true;
        }
        if let (Node::Recon(_), Some(c)) = (node, &data.completion) {
            for (&r, s) in data.rows.iter().zip(&c.sources) {
                set.sources[client][r] = *s;
            }
        }
    }
    Ok(set)
}

fn check_shapes(bundle: &ModelBundle, batch: &VerticalDataset) -> Result<()> {
    if batch.k() != bundle.k() {
        return Err(Error::validation(format!(
            "batch has {} clients, bundle has {}",
            batch.k(),
            bundle.k()
        )));
    }
    if batch.client_dims() != bundle.client_dims() {
        return Err(Error::validation(
            "batch feature widths differ from the bottom networks",
        ));
    }
    Ok(())
}

fn reads(kind: &TermKind, k: usize) -> Vec<Node> {
    match *kind {
        TermKind::Decision { real, recon } => real
            .iter()
            .map(Node::Emb)
            .chain(recon.iter().map(Node::Recon))
            .collect(),
        TermKind::SelfInput { client } => vec![Node::SelfRecon(client)],
        TermKind::Align1 { client } => vec![Node::Recon(client), Node::Emb(client)],
        TermKind::Align2 { .. } => (0..k).map(Node::Emb).collect(),
    }
}

/// Source clients for reconstructing `client` at `row`: everyone else on
/// aligned rows, the full clients otherwise.
fn recon_sources(batch: &VerticalDataset, client: usize, row: usize) -> Result<ClientSet> {
    let sources = if batch.aligned[row] {
        ClientSet::all(batch.k()).without(client)
    } else {
        full_set(batch, row).without(client)
    };
    if sources.is_empty() {
        return Err(Error::config(format!(
            "no source embedding to reconstruct client {client} at row {row}"
        )));
    }
    Ok(sources)
}

fn index(rows: &[usize]) -> BTreeMap<usize, usize> {
    rows.iter().enumerate().map(|(l, &r)| (r, l)).collect()
}

struct Graph<'a> {
    bundle: &'a ModelBundle,
    batch: &'a VerticalDataset,
    nodes: BTreeMap<Node, NodeData>,
}

impl<'a> Graph<'a> {
    fn build(bundle: &'a ModelBundle, batch: &'a VerticalDataset, terms: &[Term]) -> Result<Self> {
        let k = batch.k();
        let mut need: BTreeMap<Node, BTreeSet<usize>> = BTreeMap::new();
        for t in terms {
            for node in reads(&t.kind, k) {
                need.entry(node).or_default().extend(&t.rows);
            }
        }
        let mut recon_src: BTreeMap<usize, Vec<ClientSet>> = BTreeMap::new();
        for i in 0..k {
            if let Some(rows) = need.get(&Node::Recon(i)).cloned() {
                let srcs = rows
                    .iter()
                    .map(|&r| recon_sources(batch, i, r))
                    .collect::<Result<Vec<_>>>()?;
                for (&r, s) in rows.iter().zip(&srcs) {
                    for j in s.iter() {
                        need.entry(Node::Emb(j)).or_default().insert(r);
                    }
                }
                recon_src.insert(i, srcs);
            }
            if let Some(rows) = need.get(&Node::SelfRecon(i)).cloned() {
                need.entry(Node::SelfRaw(i)).or_default().extend(rows);
            }
        }
        for i in 0..k {
            if let Some(bad) = need
                .get(&Node::Emb(i))
                .and_then(|rows| rows.iter().find(|&&r| !batch.is_full(i, r)))
            {
                return Err(Error::validation(format!(
                    "term set asks for a raw embedding of partial client {i} at row {bad}"
                )));
            }
        }
        let mut graph = Graph {
            bundle,
            batch,
            nodes: BTreeMap::new(),
        };
        // BTreeMap order puts Emb and SelfRaw before the nodes that read them
        for (node, rows) in need {
            let rows: Vec<usize> = rows.into_iter().collect();
            let data = match node {
                Node::Emb(i) | Node::SelfRaw(i) => graph.plain(i, rows)?,
                Node::Recon(i) => {
                    let sources = recon_src.remove(&i).unwrap_or_default();
                    graph.reconstruct(i, rows, sources)?
                }
                Node::SelfRecon(i) => graph.self_reconstruct(i, rows)?,
            };
            graph.nodes.insert(node, data);
        }
        Ok(graph)
    }

    fn plain(&self, client: usize, rows: Vec<usize>) -> Result<NodeData> {
        let x = self.batch.blocks[client].select_rows(&rows);
        let (value, bottom_cache) = self.bundle.bottoms[client].forward(&x)?;
        Ok(NodeData {
            local: index(&rows),
            rows,
            value,
            bottom_cache,
            completion: None,
        })
    }

    fn complete(
        &self,
        client: usize,
        rows: Vec<usize>,
        source: Matrix,
        adopt: Vec<bool>,
        sources: Vec<ClientSet>,
    ) -> Result<NodeData> {
        let x = self.batch.blocks[client].select_rows(&rows);
        let (filled, xcom_cache) = self.bundle.xcoms[client].forward(&source)?;
        let merged = merge_partial(&x, &filled, &adopt)?;
        let (value, bottom_cache) = self.bundle.bottoms[client].forward(&merged)?;
        Ok(NodeData {
            local: index(&rows),
            rows,
            value,
            bottom_cache,
            completion: Some(Completion {
                xcom_cache,
                adopt,
                sources,
            }),
        })
    }

    fn reconstruct(
        &self,
        client: usize,
        rows: Vec<usize>,
        sources: Vec<ClientSet>,
    ) -> Result<NodeData> {
        let e = self.bundle.embed_dim();
        let d = self.batch.blocks[client].cols();
        let mut source = Matrix::zeros(rows.len(), e);
        let mut adopt = Vec::with_capacity(rows.len() * d);
        for (l, (&r, set)) in rows.iter().zip(&sources).enumerate() {
            let scale = 1.0 / set.len() as f64;
            for j in set.iter() {
                let node = &self.nodes[&Node::Emb(j)];
                let src = node.value.row(node.local[&r]);
                for (o, v) in source.row_mut(l).iter_mut().zip(src) {
                    *o += v * scale;
                }
            }
            if self.batch.aligned[r] {
                adopt.extend(std::iter::repeat_n(true, d));
            } else {
                adopt.extend_from_slice(self.batch.mask_row(client, r));
            }
        }
        self.complete(client, rows, source, adopt, sources)
    }

    fn self_reconstruct(&self, client: usize, rows: Vec<usize>) -> Result<NodeData> {
        let source = self.nodes[&Node::SelfRaw(client)].gather(&rows)?;
        let adopt = rows
            .iter()
            .flat_map(|&r| self.batch.mask_row(client, r).iter().copied())
            .collect();
        let sources = vec![ClientSet::single(client); rows.len()];
        self.complete(client, rows, source, adopt, sources)
    }

    fn mean_input(&self, nodes: &[Node], rows: &[usize]) -> Result<Matrix> {
        let mut acc = Matrix::zeros(rows.len(), self.bundle.embed_dim());
        for n in nodes {
            acc.add_assign(&self.nodes[n].gather(rows)?)?;
        }
        Ok(acc.scale(1.0 / nodes.len() as f64))
    }
}

/// Gradient buffers, one per node, shaped like the node values.
struct NodeGrads(BTreeMap<Node, Matrix>);

impl NodeGrads {
    fn new(graph: &Graph<'_>) -> Self {
        NodeGrads(
            graph
                .nodes
                .iter()
                .map(|(n, d)| (*n, Matrix::zeros(d.value.rows(), d.value.cols())))
                .collect(),
        )
    }

    fn scatter(
        &mut self,
        graph: &Graph<'_>,
        node: Node,
        rows: &[usize],
        grad: &Matrix,
        scale: f64,
    ) -> Result<()> {
        let locals = graph.nodes[&node].locals(rows)?;
        let buf = self.0.get_mut(&node).expect("node present");
        for (t, &l) in locals.iter().enumerate() {
            for (o, g) in buf.row_mut(l).iter_mut().zip(grad.row(t)) {
                *o += g * scale;
            }
        }
        Ok(())
    }
}

/// Evaluates `terms` on `batch`, optionally with the parameter gradient of
/// `Σ weight · value`.
pub fn evaluate(
    bundle: &ModelBundle,
    batch: &VerticalDataset,
    terms: &[Term],
    want_grad: bool,
) -> Result<Evaluation> {
    check_shapes(bundle, batch)?;
    let graph = Graph::build(bundle, batch, terms)?;
    let mut grads = want_grad.then(|| (bundle.zeros_like(), NodeGrads::new(&graph)));
    let mut records = Vec::with_capacity(terms.len());
    let mut total = 0.0;
    let k = batch.k();
    for term in terms.iter().filter(|t| !t.rows.is_empty()) {
        let rows = &term.rows;
        let value = match term.kind {
            TermKind::Decision { .. } | TermKind::SelfInput { .. } => {
                let parts = reads(&term.kind, k);
                let input = graph.mean_input(&parts, rows)?;
                let (logits, cache) = bundle.top.forward(&input)?;
                let labels: Vec<usize> = rows.iter().map(|&r| batch.labels[r]).collect();
                let (value, dlogits) = softmax_cross_entropy(&logits, &labels)?;
                if let Some((g, ng)) = grads.as_mut() {
                    let dinput =
                        bundle
                            .top
                            .backward(&cache, &dlogits.scale(term.weight), &mut g.top)?;
                    for p in &parts {
                        ng.scatter(&graph, *p, rows, &dinput, 1.0 / parts.len() as f64)?;
                    }
                }
                value
            }
            TermKind::Align1 { client } => {
                let a = graph.nodes[&Node::Recon(client)].gather(rows)?;
                let b = graph.nodes[&Node::Emb(client)].gather(rows)?;
                let (ha, ca) = bundle.top.forward(&a)?;
                let (hb, cb) = bundle.top.forward(&b)?;
                let (value, ga, gb) = mse(&ha, &hb)?;
                if let Some((g, ng)) = grads.as_mut() {
                    let da = bundle
                        .top
                        .backward(&ca, &ga.scale(term.weight), &mut g.top)?;
                    let db = bundle
                        .top
                        .backward(&cb, &gb.scale(term.weight), &mut g.top)?;
                    ng.scatter(&graph, Node::Recon(client), rows, &da, 1.0)?;
                    ng.scatter(&graph, Node::Emb(client), rows, &db, 1.0)?;
                }
                value
            }
            TermKind::Align2 { client } => {
                let all: Vec<Node> = (0..k).map(Node::Emb).collect();
                let a = graph.nodes[&Node::Emb(client)].gather(rows)?;
                let mean = graph.mean_input(&all, rows)?;
                let (ha, ca) = bundle.top.forward(&a)?;
                let (hm, cm) = bundle.top.forward(&mean)?;
                let (value, ga, gm) = mse(&ha, &hm)?;
                if let Some((g, ng)) = grads.as_mut() {
                    let da = bundle
                        .top
                        .backward(&ca, &ga.scale(term.weight), &mut g.top)?;
                    let dm = bundle
                        .top
                        .backward(&cm, &gm.scale(term.weight), &mut g.top)?;
                    ng.scatter(&graph, Node::Emb(client), rows, &da, 1.0)?;
                    for p in &all {
                        ng.scatter(&graph, *p, rows, &dm, 1.0 / k as f64)?;
                    }
                }
                value
            }
        };
        total += term.weight * value;
        records.push(TermRecord {
            kind: term.kind,
            rows: rows.len(),
            value,
            weight: term.weight,
        });
    }
    let grad = match grads {
        Some((g, ng)) => Some(backward(&graph, g, ng)?),
        None => None,
    };
    let node_rows = graph
        .nodes
        .iter()
        .map(|(n, d)| (*n, d.rows.len()))
        .collect();
    Ok(Evaluation {
        total,
        terms: records,
        grad,
        node_rows,
    })
}

fn backward(graph: &Graph<'_>, mut g: ModelBundle, mut ng: NodeGrads) -> Result<ModelBundle> {
    let bundle = graph.bundle;
    let k = bundle.k();
    let order = (0..k)
        .map(Node::SelfRecon)
        .chain((0..k).map(Node::SelfRaw))
        .chain((0..k).map(Node::Recon))
        .chain((0..k).map(Node::Emb));
    for node in order {
        let Some(data) = graph.nodes.get(&node) else {
            continue;
        };
        let upstream = ng.0.remove(&node).expect("node present");
        let client = match node {
            Node::Emb(i) | Node::Recon(i) | Node::SelfRaw(i) | Node::SelfRecon(i) => i,
        };
        let dx = bundle.bottoms[client].backward(
            &data.bottom_cache,
            &upstream,
            &mut g.bottoms[client],
        )?;
        let Some(c) = &data.completion else { continue };
        let masked: Vec<f64> = dx
            .data()
            .iter()
            .zip(&c.adopt)
            .map(|(&v, &a)| if a { v } else { 0.0 })
            .collect();
        let dfilled = Matrix::from_vec(dx.rows(), dx.cols(), masked)?;
        let dsource =
            bundle.xcoms[client].backward(&c.xcom_cache, &dfilled, &mut g.xcoms[client])?;
        if let Node::SelfRecon(i) = node {
            ng.scatter(graph, Node::SelfRaw(i), &data.rows, &dsource, 1.0)?;
            continue;
        }
        for (l, (&r, set)) in data.rows.iter().zip(&c.sources).enumerate() {
            let scale = 1.0 / set.len() as f64;
            let row = Matrix::from_vec(1, dsource.cols(), dsource.row(l).to_vec())?;
            for j in set.iter() {
                ng.scatter(graph, Node::Emb(j), &[r], &row, scale)?;
            }
        }
    }
    Ok(g)
}
