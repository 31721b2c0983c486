//! Concept graph, code→concept mapping, and the filter-expanded code graph.
//!
//! File formats (tab-separated, one record per line, `#` comments allowed):
//!
//! * triples: `head_cui \t relation \t tail_cui`
//! * code map: `code_type \t code \t cui` with `code_type` in `diag|proc|med`

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexSet;

use crate::ehr::{CodeType, CodeVocab};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// Concept graph with ids interned in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    concepts: IndexSet<String>,
    relations: IndexSet<String>,
    triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Adds a triple by name; returns `false` if it was already present.
    pub fn add(&mut self, head: &str, relation: &str, tail: &str, seen: &mut HashSet<Triple>) -> bool {
        let t = Triple {
            head: self.concepts.insert_full(head.to_string()).0,
            relation: self.relations.insert_full(relation.to_string()).0,
            tail: self.concepts.insert_full(tail.to_string()).0,
        };
        if seen.insert(t) {
            self.triples.push(t);
            true
        } else {
            false
        }
    }

    pub fn from_triples<'a>(triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Self {
        let mut kg = KnowledgeGraph::default();
        let mut seen = HashSet::new();
        for (h, r, t) in triples {
            kg.add(h, r, t, &mut seen);
        }
        kg
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn concept_id(&self, cui: &str) -> Option<usize> {
        self.concepts.get_index_of(cui)
    }

    pub fn concept(&self, id: usize) -> Option<&str> {
        self.concepts.get_index(id).map(String::as_str)
    }

    pub fn relation(&self, id: usize) -> Option<&str> {
        self.relations.get_index(id).map(String::as_str)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.get_index_of(name)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(&self.concepts[t.head]);
            out.push('\t');
            out.push_str(&self.relations[t.relation]);
            out.push('\t');
            out.push_str(&self.concepts[t.tail]);
            out.push('\n');
        }
        out
    }
}

fn records(path: &Path) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').map(|c| c.trim().to_string()).collect()))
        .collect())
}

pub fn load_triples(path: &Path) -> Result<KnowledgeGraph> {
    let mut kg = KnowledgeGraph::default();
    let mut seen = HashSet::new();
    for (line, cols) in records(path)? {
        if cols.len() != 3 || cols.iter().any(String::is_empty) {
            return Err(Error::parse(
                path,
                line,
                format!("expected 3 non-empty tab-separated columns, got {}", cols.len()),
            ));
        }
        kg.add(&cols[0], &cols[1], &cols[2], &mut seen);
    }
    Ok(kg)
}

/// `(global code id, concept id)` pairs, deduplicated, first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeConceptMap {
    pub pairs: Vec<(usize, usize)>,
    /// Lines whose code is absent from the vocabulary.
    pub skipped_unknown_codes: usize,
}

impl CodeConceptMap {
    pub fn concepts_of(&self, code: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .filter(move |(c, _)| *c == code)
            .map(|&(_, u)| u)
    }
}

pub fn load_code_map(path: &Path, vocab: &CodeVocab, kg: &KnowledgeGraph) -> Result<CodeConceptMap> {
    let mut map = CodeConceptMap::default();
    let mut seen = HashSet::new();
    for (line, cols) in records(path)? {
        if cols.len() != 3 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 3 tab-separated columns, got {}", cols.len()),
            ));
        }
        let ty: CodeType = cols[0]
            .parse()
            .map_err(|e: Error| Error::parse(path, line, e.to_string()))?;
        let Some(id) = vocab.id(ty, &cols[1]) else {
            map.skipped_unknown_codes += 1;
            continue;
        };
        let concept = kg.concept_id(&cols[2]).ok_or_else(|| {
            Error::parse(path, line, format!("concept `{}` is not in the graph", cols[2]))
        })?;
        let pair = (vocab.global_id(ty, id), concept);
        if seen.insert(pair) {
            map.pairs.push(pair);
        }
    }
    Ok(map)
}

/// Each code-concept pair expanded once per filter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FilterGraph {
    pub num_filters: usize,
    /// `(code, filter, concept)`
    pub triples: Vec<(usize, usize, usize)>,
}

/// Neighbourhoods used by the aggregation layers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    /// concept → `(relation, tail)` for every triple with that head
    pub by_head: Vec<Vec<(usize, usize)>>,
    /// global code → `(filter, concept)` for every filter triple of that code
    pub by_code: Vec<Vec<(usize, usize)>>,
}

pub fn build_filter_graph(
    kg: &KnowledgeGraph,
    map: &CodeConceptMap,
    num_filters: usize,
    num_codes: usize,
) -> Result<(FilterGraph, NeighborIndex)> {
    if num_filters < 1 {
        return Err(Error::Config("number of filters must be at least 1".into()));
    }
    let mut triples = Vec::with_capacity(map.pairs.len() * num_filters);
    let mut by_code = vec![Vec::new(); num_codes];
    for &(code, concept) in &map.pairs {
        if code >= num_codes || concept >= kg.num_concepts() {
            return Err(Error::Data(format!(
                "mapping ({code}, {concept}) outside code/concept ranges"
            )));
        }
        for f in 0..num_filters {
            triples.push((code, f, concept));
            by_code[code].push((f, concept));
        }
    }
    let mut by_head = vec![Vec::new(); kg.num_concepts()];
    for t in kg.triples() {
        by_head[t.head].push((t.relation, t.tail));
    }
    Ok((
        FilterGraph {
            num_filters,
            triples,
        },
        NeighborIndex { by_head, by_code },
    ))
}
