//! Plain-text file formats.
//!
//! * edge list: `child<TAB>parent` per line
//! * split: `name<TAB>seen|unseen` per line
//! * labels: `image-id<TAB>class-name` per line
//! * meta / report headers: `key=value` per line
//!
//! Blank lines and lines starting with `#` are ignored on input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{ClassSplit, HierarchyDag, NodeId};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn two_fields<'a>(path: &Path, line: usize, l: &'a str) -> Result<(&'a str, &'a str)> {
    let mut it = l.split('\t');
    match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => Ok((a, b)),
        _ => Err(parse_err(path, line, "expected two tab-separated fields")),
    }
}

pub fn parse_edge_list(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    content_lines(text)
        .map(|(n, l)| {
            let (c, p) = two_fields(path, n, l)?;
            Ok((c.to_string(), p.to_string()))
        })
        .collect()
}

pub fn read_edge_list(path: &Path) -> Result<Vec<(String, String)>> {
    parse_edge_list(&fs::read_to_string(path)?, path)
}

pub fn write_edge_list(dag: &HierarchyDag, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (c, p) in dag.edges() {
        writeln!(out, "{c}\t{p}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn parse_split(text: &str, path: &Path, dag: &HierarchyDag) -> Result<ClassSplit> {
    let mut seen = BTreeSet::new();
    let mut unseen = BTreeSet::new();
    for (n, l) in content_lines(text) {
        let (name, kind) = two_fields(path, n, l)?;
        let id = dag.id(name)?;
        match kind {
            "seen" => seen.insert(id),
            "unseen" => unseen.insert(id),
            other => return Err(parse_err(path, n, format!("unknown split kind '{other}'"))),
        };
    }
    ClassSplit::new(dag, seen, unseen)
}

pub fn read_split(path: &Path, dag: &HierarchyDag) -> Result<ClassSplit> {
    parse_split(&fs::read_to_string(path)?, path, dag)
}

pub fn write_split(split: &ClassSplit, dag: &HierarchyDag, path: &Path) -> Result<()> {
    let mut out = String::new();
    for &c in &split.seen {
        writeln!(out, "{}\tseen", dag.name(c)).unwrap();
    }
    for &c in &split.unseen {
        writeln!(out, "{}\tunseen", dag.name(c)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_labels(path: &Path, dag: &HierarchyDag) -> Result<BTreeMap<u64, NodeId>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, l) in content_lines(&text) {
        let (img, name) = two_fields(path, n, l)?;
        let img: u64 = img
            .parse()
            .map_err(|_| parse_err(path, n, format!("bad image id '{img}'")))?;
        if out.insert(img, dag.id(name)?).is_some() {
            return Err(parse_err(path, n, format!("duplicate image id {img}")));
        }
    }
    Ok(out)
}

pub fn write_labels(
    labels: impl IntoIterator<Item = (u64, NodeId)>,
    dag: &HierarchyDag,
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    for (img, c) in labels {
        writeln!(out, "{img}\t{}", dag.name(c)).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Ordered `key=value` records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut kv = Self::default();
        for (n, l) in content_lines(text) {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| parse_err(path, n, "expected key=value"))?;
            kv.push(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}
