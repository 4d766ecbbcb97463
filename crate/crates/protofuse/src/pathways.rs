//! Pathway tokenization: bulk expression vectors to variable-length tokens
//! through binary gene-membership masks.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::path::Path;

/// Ordered gene universe with name -> position lookup.
#[derive(Debug, Clone)]
pub struct GeneIndex {
    names: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl GeneIndex {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::argument("gene index must contain at least one gene"));
        }
        let mut lookup = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if lookup.insert(n.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate gene symbol '{n}'")));
            }
        }
        Ok(GeneIndex { names, lookup })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One pathway: a named set of member genes over the index.
#[derive(Debug, Clone)]
pub struct PathwayDefinition {
    pub name: String,
    /// Membership mask over the gene index.
    pub mask: Vec<bool>,
    /// Member positions in ascending gene-index order.
    pub member_positions: Vec<usize>,
}

impl PathwayDefinition {
    pub fn size(&self) -> usize {
        self.member_positions.len()
    }
}

/// The fixed collection of pathway prototypes.
#[derive(Debug, Clone)]
pub struct PathwayCollection {
    pathways: Vec<PathwayDefinition>,
    union_size: usize,
}

impl PathwayCollection {
    pub fn new(pathways: Vec<PathwayDefinition>) -> Result<Self> {
        if pathways.is_empty() {
            return Err(Error::data("pathway collection is empty"));
        }
        let n_g = pathways[0].mask.len();
        let mut union = vec![false; n_g];
        for p in &pathways {
            if p.member_positions.is_empty() {
                return Err(Error::data(format!("pathway '{}' has no members", p.name)));
            }
            for &pos in &p.member_positions {
                union[pos] = true;
            }
        }
        let union_size = union.iter().filter(|b| **b).count();
        Ok(PathwayCollection {
            pathways,
            union_size,
        })
    }

    pub fn len(&self) -> usize {
        self.pathways.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty()
    }

    pub fn pathway(&self, c: usize) -> &PathwayDefinition {
        &self.pathways[c]
    }

    pub fn pathways(&self) -> &[PathwayDefinition] {
        &self.pathways
    }

    /// Number of distinct genes appearing in at least one pathway.
    pub fn union_size(&self) -> usize {
        self.union_size
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pathways.iter().map(|p| p.size()).collect()
    }
}

/// Missing-gene policy when loading a GMT file against a gene index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GmtPolicy {
    /// Any gene absent from the index is an error.
    Strict,
    /// Absent genes are dropped; a pathway left empty is an error.
    DropMissing,
}

/// Parse GMT text: one pathway per line,
/// `NAME<TAB>DESCRIPTION<TAB>GENE1<TAB>GENE2...`, UTF-8, no quoting.
/// Duplicate symbols within a line are deduplicated with a warning.
pub fn parse_gmt(text: &str, origin: &str, index: &GeneIndex, policy: GmtPolicy) -> Result<PathwayCollection> {
    let mut pathways = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                message: format!(
                    "expected at least 3 tab-separated fields, found {}",
                    fields.len()
                ),
            });
        }
        let name = fields[0].to_string();
        if name.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: lineno + 1,
                message: "empty pathway name".into(),
            });
        }
        let mut mask = vec![false; index.len()];
        let mut seen_in_line: HashMap<&str, ()> = HashMap::new();
        for gene in &fields[2..] {
            if gene.is_empty() {
                continue;
            }
            if seen_in_line.insert(gene, ()).is_some() {
                eprintln!("warning: duplicate gene '{gene}' in pathway '{name}' ({origin}:{})", lineno + 1);
                continue;
            }
            match index.position(gene) {
                Some(pos) => mask[pos] = true,
                None => match policy {
                    GmtPolicy::Strict => {
                        return Err(Error::data(format!(
                            "gene '{gene}' in pathway '{name}' is not in the gene index"
                        )));
                    }
                    GmtPolicy::DropMissing => {}
                },
            }
        }
        let member_positions: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect();
        if member_positions.is_empty() {
            return Err(Error::data(format!(
                "pathway '{name}' has no genes present in the index"
            )));
        }
        pathways.push(PathwayDefinition {
            name,
            mask,
            member_positions,
        });
    }
    PathwayCollection::new(pathways)
}

/// Load a GMT file from disk. See [`parse_gmt`] for the format.
pub fn load_gmt(path: &Path, index: &GeneIndex, policy: GmtPolicy) -> Result<PathwayCollection> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_gmt(&text, &path.display().to_string(), index, policy)
}

/// Per-pathway densified expression tokens.
#[derive(Debug, Clone)]
pub struct PathwaySummary {
    tokens: Vec<Vec<f64>>,
}

impl PathwaySummary {
    /// Assemble a summary from pre-built tokens (standardized pipelines).
    pub fn from_tokens(tokens: Vec<Vec<f64>>) -> PathwaySummary {
        PathwaySummary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, c: usize) -> &[f64] {
        &self.tokens[c]
    }

    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }
}

/// Mask-and-densify: token c holds the expression values at the pathway's
/// member positions, in ascending gene-index order.
pub fn tokenize(expression: &[f64], collection: &PathwayCollection) -> Result<PathwaySummary> {
    let n_g = collection.pathway(0).mask.len();
    if expression.len() != n_g {
        return Err(Error::argument(format!(
            "expression length {} does not match gene index size {}",
            expression.len(),
            n_g
        )));
    }
    if expression.iter().any(|v| !v.is_finite()) {
        return Err(Error::argument("expression values must be finite"));
    }
    let tokens = collection
        .pathways()
        .iter()
        .map(|p| p.member_positions.iter().map(|&i| expression[i]).collect())
        .collect();
    Ok(PathwaySummary { tokens })
}
