//! File formats: binary tensors, saved networks and JSON reports.
//!
//! Tensor file layout (little-endian):
//!
//! ```text
//! "TNSR" | version: u16 | order: u16
//! order × (name_len: u16 | name: UTF-8 | size: u64)
//! Π sizes × f64, row-major in header order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsl::{block_from_names, Expr, Program, Rank, Sketch};
use crate::error::{Error, Result};
use crate::network::{block_names, TensorNetwork};
use crate::search::{SearchConfig, SearchResult, Synthetic, Timings};
use crate::tensor::{Index, IndexId, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;

fn malformed<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Malformed(msg.into()))
}

pub fn write_tensor(mut w: impl Write, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let order = u16::try_from(t.order()).map_err(|_| Error::InvalidArgument("tensor order exceeds u16".into()))?;
    w.write_all(&order.to_le_bytes())?;
    for ix in t.indices() {
        let name = ix.name().as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("index name '{}' too long", ix.name())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(ix.size() as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).or_else(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => malformed(format!("file ends inside {what}")),
        _ => Err(e.into()),
    })
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut b = [0; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

/// Reads a tensor; index ids are the header positions.
pub fn read_tensor(mut r: impl Read) -> Result<Tensor> {
    let mut magic = [0; 4];
    read_exact(&mut r, &mut magic, "the magic number")?;
    if &magic != MAGIC {
        return malformed("not a tensor file (bad magic number)");
    }
    let version = read_u16(&mut r, "the header")?;
    if version != VERSION {
        return Err(Error::Unsupported(format!("tensor file version {version} (expected {VERSION})")));
    }
    let order = read_u16(&mut r, "the header")? as usize;
    let mut indices = Vec::with_capacity(order);
    let mut total: usize = 1;
    for i in 0..order {
        let len = read_u16(&mut r, "an index name length")? as usize;
        let mut name = vec![0; len];
        read_exact(&mut r, &mut name, "an index name")?;
        let name = String::from_utf8(name).or_else(|_| malformed(format!("index {i} name is not UTF-8")))?;
        if name.is_empty() {
            return malformed(format!("index {i} has an empty name"));
        }
        if indices.iter().any(|ix: &Index| ix.name() == name) {
            return malformed(format!("duplicate index name '{name}'"));
        }
        let mut size = [0; 8];
        read_exact(&mut r, &mut size, "an index size")?;
        let size = usize::try_from(u64::from_le_bytes(size)).or_else(|_| malformed("index size overflows"))?;
        if size == 0 {
            return malformed(format!("index '{name}' has size 0"));
        }
        total = total.checked_mul(size).ok_or_else(|| Error::Malformed("tensor size overflows".into()))?;
        indices.push(Index::new(i as IndexId, name, size)?);
    }
    let bytes = total.checked_mul(8).ok_or_else(|| Error::Malformed("tensor size overflows".into()))?;
    let mut payload = Vec::new();
    r.by_ref().take(bytes as u64).read_to_end(&mut payload)?;
    if payload.len() != bytes {
        return malformed(format!("payload has {} bytes, expected {bytes}", payload.len()));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return malformed("trailing bytes after the payload");
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(indices, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(BufReader::new(fs::File::open(path)?))
}

pub const TOPOLOGY_FILE: &str = "topology.txt";

/// Writes `node_<k>.tnsr` per node, `topology.txt` and `network.dot`.
/// Nodes are renumbered `0..n` in id order.
pub fn save_network(dir: impl AsRef<Path>, g: &TensorNetwork, eps: Option<f64>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let ids = g.node_ids();
    let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let mut text = String::from("# tnsynth network\n");
    if let Some(eps) = eps {
        text.push_str(&format!("eps {eps:e}\n"));
    }
    for (k, &id) in ids.iter().enumerate() {
        let t = g.node(id).expect("listed node");
        save_tensor(dir.join(format!("node_{k}.tnsr")), t)?;
        text.push_str(&format!("node {k} node_{k}.tnsr\n"));
    }
    for (node, ix) in g.free_edges() {
        text.push_str(&format!("free {} {} @ {}\n", ix.name(), ix.size(), pos[&node]));
    }
    let mut edges = g.edge_partitions();
    edges.sort_by_key(|x| x.0);
    for (p, e) in edges {
        text.push_str(&format!(
            "edge {}-{} {} rank {} partition {{{}}}\n",
            pos[&e.a],
            pos[&e.b],
            e.index.name(),
            e.index.size(),
            p.names(g.free_indices()).join(",")
        ));
    }
    fs::write(dir.join(TOPOLOGY_FILE), text)?;
    fs::write(dir.join("network.dot"), g.to_dot())?;
    Ok(())
}

/// A network read back from [`save_network`], with the error bound it
/// was saved with, if any.
pub struct SavedNetwork {
    pub network: TensorNetwork,
    pub eps: Option<f64>,
}

pub fn load_network(dir: impl AsRef<Path>) -> Result<SavedNetwork> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(TOPOLOGY_FILE))
        .map_err(|e| Error::Malformed(format!("{}: {e}", dir.join(TOPOLOGY_FILE).display())))?;
    let mut eps = None;
    let mut files: Vec<(usize, PathBuf)> = Vec::new();
    let mut free: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Malformed(format!("{TOPOLOGY_FILE} line {}: '{line}'", lineno + 1));
        match words.as_slice() {
            [] => {}
            ["eps", v] => eps = Some(v.parse().map_err(|_| bad())?),
            ["node", k, file] => files.push((k.parse().map_err(|_| bad())?, dir.join(file))),
            ["free", name, size, "@", _] => free.push((name.to_string(), size.parse().map_err(|_| bad())?)),
            ["edge", ..] => {}
            _ => return Err(bad()),
        }
    }
    files.sort();
    if files.iter().enumerate().any(|(i, (k, _))| i != *k) {
        return malformed("node numbers must be 0..n");
    }
    let free_ix: Vec<Index> = free
        .iter()
        .enumerate()
        .map(|(i, (name, size))| Index::new(i as IndexId, name.as_str(), *size))
        .collect::<Result<_>>()?;
    let mut ids: BTreeMap<String, IndexId> = free_ix.iter().map(|ix| (ix.name().to_string(), ix.id())).collect();
    let mut tensors = Vec::new();
    for (_, path) in files {
        let t = load_tensor(&path).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        let indices = t
            .indices()
            .iter()
            .map(|ix| {
                let next = ids.len() as IndexId;
                let id = *ids.entry(ix.name().to_string()).or_insert(next);
                Index::new(id, ix.name(), ix.size())
            })
            .collect::<Result<Vec<_>>>()?;
        tensors.push(t.with_indices(indices)?);
    }
    let network = TensorNetwork::from_nodes(free_ix, tensors).map_err(|e| Error::Malformed(format!("saved network is invalid: {e}")))?;
    Ok(SavedNetwork { network, eps })
}

/// Relative Frobenius distance between the contraction of `g` and `t`,
/// matching free indices by name.
pub fn relative_error_by_name(g: &TensorNetwork, t: &Tensor) -> Result<f64> {
    let mut names: Vec<&str> = g.free_indices().iter().map(Index::name).collect();
    let mut want: Vec<&str> = t.indices().iter().map(Index::name).collect();
    names.sort_unstable();
    want.sort_unstable();
    if names != want {
        return malformed(format!(
            "network indices {{{}}} do not match data indices {{{}}}",
            names.join(","),
            want.join(",")
        ));
    }
    let c = g.contract_all()?;
    let relabeled = c
        .indices()
        .iter()
        .map(|ix| {
            let target = t.indices().iter().find(|d| d.name() == ix.name()).expect("names match");
            if target.size() != ix.size() {
                return malformed(format!(
                    "index '{}' has size {} in the network and {} in the data",
                    ix.name(),
                    ix.size(),
                    target.size()
                ));
            }
            Ok(target.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let dist = t.distance(&c.with_indices(relabeled)?)?;
    let norm = t.frobenius_norm();
    Ok(if norm > 0.0 { dist / norm } else { dist })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: usize,
    pub indices: Vec<(String, usize)>,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeReport {
    pub a: usize,
    pub b: usize,
    pub bond: String,
    pub rank: usize,
    /// The smaller side of the partition the edge realizes.
    pub partition: Vec<String>,
}

/// Machine-readable outcome of a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: String,
    pub input: Option<String>,
    pub index_names: Vec<String>,
    pub shape: Vec<usize>,
    pub eps: f64,
    pub config: Option<SearchConfig>,
    pub achieved_rel_error: f64,
    pub compression_ratio: f64,
    pub tensor_size: usize,
    pub network_size: usize,
    pub predicted_cost: Option<usize>,
    pub nodes: Vec<NodeReport>,
    pub edges: Vec<EdgeReport>,
    pub program: String,
    pub timings: Timings,
    pub sketch_count: usize,
    pub executions: usize,
    pub network_dir: Option<String>,
}

impl Report {
    /// Describes `g` as an approximation of `t`.
    pub fn describe(method: &str, t: &Tensor, g: &TensorNetwork, eps: f64, rel_error: f64) -> Self {
        let ids = g.node_ids();
        let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let nodes = ids
            .iter()
            .enumerate()
            .map(|(k, &id)| {
                let n = g.node(id).expect("listed node");
                NodeReport {
                    id: k,
                    indices: n.indices().iter().map(|ix| (ix.name().to_string(), ix.size())).collect(),
                    size: n.len(),
                }
            })
            .collect();
        let mut parts = g.edge_partitions();
        parts.sort_by_key(|x| x.0);
        let edges = parts
            .into_iter()
            .map(|(p, e)| EdgeReport {
                a: pos[&e.a],
                b: pos[&e.b],
                bond: e.index.name().to_string(),
                rank: e.index.size(),
                partition: p.names(g.free_indices()),
            })
            .collect();
        Self {
            method: method.to_string(),
            input: None,
            index_names: t.indices().iter().map(|ix| ix.name().to_string()).collect(),
            shape: t.shape(),
            eps,
            config: None,
            achieved_rel_error: rel_error,
            compression_ratio: t.len() as f64 / g.size() as f64,
            tensor_size: t.len(),
            network_size: g.size(),
            predicted_cost: None,
            nodes,
            edges,
            program: crate::dsl::program_from_network(g).to_text(g.free_indices()),
            timings: Timings::default(),
            sketch_count: 0,
            executions: 0,
            network_dir: None,
        }
    }

    pub fn from_result(method: &str, t: &Tensor, r: &SearchResult, eps: f64) -> Self {
        Self {
            predicted_cost: Some(r.predicted_cost),
            timings: r.timings.clone(),
            sketch_count: r.sketch_count,
            executions: r.executions,
            ..Self::describe(method, t, &r.network, eps, r.achieved_rel_error)
        }
    }

    /// The report's topology as a sketch over `free`. Fails on index names
    /// `free` does not have.
    pub fn sketch(&self, free: &[Index]) -> Result<Sketch> {
        let exprs = self
            .edges
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let names: Vec<&str> = e.partition.iter().map(String::as_str).collect();
                Expr::new(block_from_names(&names, free)?, free.len(), Rank::Hole(i))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Program::new(exprs)?;
        if !s.is_valid() {
            return malformed("report edges do not form a tree");
        }
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("report: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEdge {
    pub partition: Vec<String>,
    pub rank: usize,
}

/// Description of a generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub dims: Vec<usize>,
    pub rank_min: usize,
    pub rank_max: usize,
    pub seed: u64,
    pub tensor_size: usize,
    pub network_size: usize,
    pub compression_ratio: f64,
    pub edges: Vec<TruthEdge>,
    pub program: String,
}

impl Truth {
    pub fn new(s: &Synthetic, rank_range: (usize, usize), seed: u64) -> Self {
        let free = s.tensor.indices();
        Self {
            dims: s.tensor.shape(),
            rank_min: rank_range.0,
            rank_max: rank_range.1,
            seed,
            tensor_size: s.tensor.len(),
            network_size: s.truth.size(),
            compression_ratio: s.ratio(),
            edges: s
                .program
                .exprs()
                .iter()
                .map(|e| TruthEdge {
                    partition: block_names(e.block(), free),
                    rank: match e.rank {
                        Rank::Fixed(r) => r,
                        Rank::Hole(_) => 0,
                    },
                })
                .collect(),
            program: s.program.to_text(free),
        }
    }
}
