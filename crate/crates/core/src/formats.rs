//! JSON network and CPT files.
//!
//! A network file is `{ "cardinalities": [...], "edges": [[parent, child], ...],
//! "cpts"?: <cpt file> }`. A CPT file lists one table per variable with its
//! parents and a flat row-major `probs` array. Rows are ordered by the
//! mixed-radix value of the parent states, parents ascending by index with
//! the first parent most significant.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CptSet;
use crate::network::Network;

pub const PARENT_ORDER: &str = "ascending-first-most-significant";

const KOLLER_JSON: &str = include_str!("../data/koller.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub var: usize,
    pub parents: Vec<usize>,
    pub cardinality: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptFile {
    pub parent_order: String,
    pub tables: Vec<TableEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    pub cardinalities: Vec<usize>,
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpts: Option<CptFile>,
}

fn json_error(path: Option<&Path>, e: serde_json::Error) -> Error {
    Error::Parse { path: path.map(Path::to_path_buf), line: Some(e.line()), msg: format!("{e}") }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl CptFile {
    pub fn from_cpts(net: &Network, cpts: &CptSet) -> Self {
        CptFile {
            parent_order: PARENT_ORDER.to_string(),
            tables: (0..net.num_vars())
                .map(|v| TableEntry {
                    var: v,
                    parents: net.parents(v).to_vec(),
                    cardinality: net.cardinality(v),
                    probs: cpts.table(v).to_vec(),
                })
                .collect(),
        }
    }

    fn check_order(&self) -> Result<()> {
        if self.parent_order != PARENT_ORDER {
            return Err(Error::parse(format!(
                "unsupported parent_order `{}` (expected `{PARENT_ORDER}`)",
                self.parent_order
            )));
        }
        Ok(())
    }

    /// The network implied by the tables' parents and cardinalities.
    pub fn network(&self) -> Result<Network> {
        self.check_order()?;
        let mut tables: Vec<&TableEntry> = self.tables.iter().collect();
        tables.sort_by_key(|t| t.var);
        if tables.iter().enumerate().any(|(i, t)| t.var != i) {
            return Err(Error::parse("tables must cover variables 0..n exactly once"));
        }
        let cards: Vec<usize> = tables.iter().map(|t| t.cardinality).collect();
        let edges: Vec<(usize, usize)> =
            tables.iter().flat_map(|t| t.parents.iter().map(move |&p| (p, t.var))).collect();
        Network::build(&cards, &edges)
    }

    /// Tables for `net`; parents and cardinalities must agree with it.
    pub fn to_cpts(&self, net: &Network) -> Result<CptSet> {
        self.check_order()?;
        if self.tables.len() != net.num_vars() {
            return Err(Error::ShapeMismatch(format!("{} tables for {} variables", self.tables.len(), net.num_vars())));
        }
        let mut probs = vec![Vec::new(); net.num_vars()];
        for t in &self.tables {
            if t.var >= net.num_vars() {
                return Err(Error::InvalidIndex { index: t.var, bound: net.num_vars() });
            }
            let mut parents = t.parents.clone();
            parents.sort_unstable();
            if parents != net.parents(t.var) || t.cardinality != net.cardinality(t.var) {
                return Err(Error::ShapeMismatch(format!(
                    "table for variable {} does not match the network structure",
                    t.var
                )));
            }
            if parents != t.parents {
                return Err(Error::parse(format!("parents of variable {} must be listed ascending", t.var)));
            }
            probs[t.var] = t.probs.clone();
        }
        CptSet::from_tables(net, probs)
    }
}

impl NetworkFile {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| json_error(path, e))
    }

    pub fn from_network(net: &Network, cpts: Option<&CptSet>) -> Self {
        NetworkFile {
            names: None,
            cardinalities: net.cardinalities().to_vec(),
            edges: net.edges().into_iter().map(|(p, c)| [p, c]).collect(),
            cpts: cpts.map(|c| CptFile::from_cpts(net, c)),
        }
    }

    pub fn network(&self) -> Result<Network> {
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        Network::build(&self.cardinalities, &edges)
    }

    pub fn resolve(&self) -> Result<(Network, Option<CptSet>)> {
        let net = self.network()?;
        let cpts = self.cpts.as_ref().map(|c| c.to_cpts(&net)).transpose()?;
        Ok((net, cpts))
    }
}

/// Loads a network file, with its CPTs when present.
pub fn load_network(path: &Path) -> Result<(Network, Option<CptSet>)> {
    NetworkFile::parse(&read_text(path)?, Some(path))?.resolve().map_err(|e| with_path(e, path))
}

pub fn save_network(path: &Path, net: &Network, cpts: Option<&CptSet>) -> Result<()> {
    write_json(path, &NetworkFile::from_network(net, cpts))
}

/// Loads a CPT file. A network file with a `cpts` section is accepted too.
pub fn load_cpts(path: &Path) -> Result<(Network, CptSet)> {
    let text = read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| json_error(Some(path), e))?;
    let file: CptFile = if value.get("tables").is_some() {
        serde_json::from_value(value).map_err(|e| json_error(Some(path), e))?
    } else {
        NetworkFile::parse(&text, Some(path))?
            .cpts
            .ok_or_else(|| with_path(Error::parse("file has no `cpts` section"), path))?
    };
    let net = file.network().map_err(|e| with_path(e, path))?;
    let cpts = file.to_cpts(&net).map_err(|e| with_path(e, path))?;
    Ok((net, cpts))
}

pub fn save_cpts(path: &Path, net: &Network, cpts: &CptSet) -> Result<()> {
    write_json(path, &CptFile::from_cpts(net, cpts))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Parse { path: None, line, msg } => Error::Parse { path: Some(path.to_path_buf()), line, msg },
        other => other,
    }
}

/// The five-variable student network (Intelligence, Difficulty, SAT, Grade,
/// Letter) with its reference CPTs.
pub fn koller_network() -> (Network, CptSet) {
    let (net, cpts) =
        NetworkFile::parse(KOLLER_JSON, None).and_then(|f| f.resolve()).expect("bundled network is valid");
    (net, cpts.expect("bundled network has CPTs"))
}

/// The bundled student network file, verbatim.
pub fn koller_json() -> &'static str {
    KOLLER_JSON
}
