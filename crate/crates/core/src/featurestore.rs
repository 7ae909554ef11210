//! Image features, learnable class tables and the `HGRF` binary format.
//!
//! Arithmetic is `f64` throughout; files store `f32`. The file layout is
//!
//! ```text
//! b"HGRF" | version: u32 (=1) | rows: u32 | dim: u32
//! rows × ( owner: u64 | dim × f32 )
//! ```
//!
//! all little-endian, no padding.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::hierarchy::{HierarchyDag, NodeId};

const MAGIC: &[u8; 4] = b"HGRF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Rows of `dim` reals, each tagged with a unique owner id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    dim: usize,
    owners: Vec<u64>,
    data: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            owners: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, owner: u64, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if self.index.insert(owner, self.owners.len()).is_some() {
            return Err(Error::DuplicateOwner(owner));
        }
        self.owners.push(owner);
        self.data.extend_from_slice(v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.owners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owners.is_empty()
    }

    pub fn owners(&self) -> &[u64] {
        &self.owners
    }

    pub fn owner(&self, row: usize) -> u64 {
        self.owners[row]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.dim..(row + 1) * self.dim]
    }

    /// All rows, row-major.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, owner: u64) -> Option<&[f64]> {
        self.index.get(&owner).map(|&r| self.row(r))
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f64])> {
        self.owners.iter().copied().zip(self.data.chunks_exact(self.dim.max(1)))
    }

    /// Copy with every row scaled to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut out = self.clone();
        out.normalize_in_place()?;
        Ok(out)
    }

    pub fn normalize_in_place(&mut self) -> Result<()> {
        for r in 0..self.len() {
            let owner = self.owners[r];
            normalize(self.row_mut(r)).ok_or(Error::ZeroVector(owner))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (owner, v) in self.rows() {
            out.extend_from_slice(&owner.to_le_bytes());
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedFile("header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let rows = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        if dim == 0 {
            return Err(Error::DimMismatch {
                expected: 1,
                got: 0,
            });
        }
        let row_len = 8 + 4 * dim;
        let body = &bytes[HEADER_LEN..];
        let have = body.len() / row_len;
        if have < rows {
            return Err(Error::TruncatedFile(format!(
                "header declares {rows} rows, found {have}"
            )));
        }
        if body.len() != rows * row_len {
            return Err(Error::DimMismatch {
                expected: rows * row_len,
                got: body.len(),
            });
        }
        let mut m = Self::new(dim);
        let mut v = vec![0.0; dim];
        for chunk in body.chunks_exact(row_len) {
            let owner = u64::from_le_bytes(chunk[..8].try_into().unwrap());
            for (x, b) in v.iter_mut().zip(chunk[8..].chunks_exact(4)) {
                *x = f32::from_le_bytes(b.try_into().unwrap()) as f64;
            }
            m.push(owner, &v)?;
        }
        Ok(m)
    }
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    FeatureMatrix::from_bytes(&fs::read(path)?)
}

pub fn write_features(m: &FeatureMatrix, path: &Path) -> Result<()> {
    fs::write(path, m.to_bytes())?;
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit norm in place and returns the original norm, or `None`
/// for a zero vector.
pub fn normalize(v: &mut [f64]) -> Option<f64> {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(n)
}

/// Cosine similarity of two unit vectors, i.e. their dot product.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(dot(a, b))
}

/// Labelled image features; row `i` of `images` carries `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: FeatureMatrix,
    pub labels: Vec<NodeId>,
}

impl Dataset {
    pub fn new(dag: &HierarchyDag, images: FeatureMatrix, labels: Vec<NodeId>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for &l in &labels {
            if !dag.contains(l) {
                return Err(Error::UnknownNode(l.to_string()));
            }
            if l == dag.root() {
                return Err(Error::RootLabel(l));
            }
        }
        Ok(Self { images, labels })
    }

    /// Joins a feature matrix with an owner → label map.
    pub fn from_label_map(
        dag: &HierarchyDag,
        images: FeatureMatrix,
        labels: &BTreeMap<u64, NodeId>,
    ) -> Result<Self> {
        let labels = images
            .owners()
            .iter()
            .map(|o| {
                labels
                    .get(o)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("image {o} has no label")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(dag, images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.dim()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut images = FeatureMatrix::new(self.images.dim());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            images
                .push(self.images.owner(r), self.images.row(r))
                .expect("rows of a valid matrix");
            labels.push(self.labels[r]);
        }
        Self { images, labels }
    }

    pub fn filter(&self, keep: impl Fn(NodeId) -> bool) -> Self {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&rows)
    }
}

/// How a class's representation is read out of the learnable table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassEncoder {
    /// `T(c) = normalize(u_c)`.
    Table,
    /// `T(c) = normalize(Σ u_a)` over `c` and its non-root path ancestors.
    #[default]
    PathSum,
}

impl ClassEncoder {
    pub fn name(self) -> &'static str {
        match self {
            ClassEncoder::Table => "table",
            ClassEncoder::PathSum => "path-sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "path-sum" => Ok(Self::PathSum),
            _ => Err(Error::Config(format!("unknown class encoder '{s}'"))),
        }
    }
}

/// Learnable class table (one row per hierarchy node, owner = node id) and
/// the encoder that turns rows into class representations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub classes: FeatureMatrix,
    pub encoder: ClassEncoder,
}

impl FeatureStore {
    pub fn new(dag: &HierarchyDag, classes: FeatureMatrix, encoder: ClassEncoder) -> Result<Self> {
        if classes.len() != dag.node_count() {
            return Err(Error::Config(format!(
                "class table has {} rows, hierarchy has {} nodes",
                classes.len(),
                dag.node_count()
            )));
        }
        for (i, &o) in classes.owners().iter().enumerate() {
            if o != i as u64 {
                return Err(Error::Config(format!(
                    "class table row {i} belongs to owner {o}; rows must be in node-id order"
                )));
            }
        }
        Ok(Self { classes, encoder })
    }

    pub fn dim(&self) -> usize {
        self.classes.dim()
    }

    pub fn encode(&self, dag: &HierarchyDag) -> Result<ClassReps> {
        ClassReps::encode(dag, self)
    }
}

/// Unit class representations for every node, plus the pre-normalization
/// norms needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ClassReps {
    dim: usize,
    reps: Vec<f64>,
    norms: Vec<f64>,
    encoder: ClassEncoder,
}

impl ClassReps {
    pub fn encode(dag: &HierarchyDag, store: &FeatureStore) -> Result<Self> {
        let dim = store.dim();
        let n = dag.node_count();
        let mut reps = vec![0.0; n * dim];
        match store.encoder {
            ClassEncoder::Table => reps.copy_from_slice(&store.classes.data),
            ClassEncoder::PathSum => {
                for l in 0..=dag.max_depth() {
                    for &c in dag.nodes_at_depth(l)? {
                        let i = c.index();
                        let mut s = store.classes.row(i).to_vec();
                        if l >= 2 {
                            // path parent is one level up, so its sum is complete
                            let p = dag.ancestor_path(c)?[l - 1].index();
                            let src = &reps[p * dim..(p + 1) * dim];
                            s.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                        reps[i * dim..(i + 1) * dim].copy_from_slice(&s);
                    }
                }
            }
        }
        let mut norms = vec![0.0; n];
        for (i, (chunk, norm)) in reps.chunks_exact_mut(dim).zip(&mut norms).enumerate() {
            *norm = normalize(chunk).ok_or(Error::ZeroVector(i as u64))?;
        }
        Ok(Self {
            dim,
            reps,
            norms,
            encoder: store.encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rep(&self, c: NodeId) -> &[f64] {
        &self.reps[c.index() * self.dim..(c.index() + 1) * self.dim]
    }

    /// Pulls gradients w.r.t. unit representations back to table rows.
    pub fn backward(
        &self,
        dag: &HierarchyDag,
        d_reps: &BTreeMap<NodeId, Vec<f64>>,
    ) -> BTreeMap<NodeId, Vec<f64>> {
        let mut out: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for (&c, g) in d_reps {
            let t = self.rep(c);
            let proj = dot(t, g);
            let inv = 1.0 / self.norms[c.index()];
            let d_s: Vec<f64> = g.iter().zip(t).map(|(gi, ti)| (gi - ti * proj) * inv).collect();
            let mut add = |a: NodeId| {
                let e = out.entry(a).or_insert_with(|| vec![0.0; self.dim]);
                e.iter_mut().zip(&d_s).for_each(|(x, y)| *x += y);
            };
            match self.encoder {
                ClassEncoder::Table => add(c),
                ClassEncoder::PathSum => {
                    add(c);
                    if c != dag.root() {
                        for &a in dag.ancestor_path(c).expect("valid node").iter().skip(1) {
                            add(a);
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::LoadOptions;

    fn mat(rows: &[(u64, &[f64])]) -> FeatureMatrix {
        let mut m = FeatureMatrix::new(rows[0].1.len());
        for (o, v) in rows {
            m.push(*o, v).unwrap();
        }
        m
    }

    #[test]
    fn normalize_examples() {
        let m = mat(&[(0, &[3.0, 4.0])]).l2_normalize().unwrap();
        assert!((m.row(0)[0] - 0.6).abs() < 1e-15 && (m.row(0)[1] - 0.8).abs() < 1e-15);
        let m = mat(&[(0, &[1.0, 1.0, 1.0, 1.0])]).l2_normalize().unwrap();
        assert_eq!(m.row(0), &[0.5; 4]);
        let u = mat(&[(0, &[0.0, 1.0, 0.0])]);
        assert_eq!(u.l2_normalize().unwrap(), u);
        assert!(matches!(
            mat(&[(7, &[0.0, 0.0])]).l2_normalize(),
            Err(Error::ZeroVector(7))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[0.6, 0.8], &[0.8, 0.6]).unwrap() - 0.96).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_sim(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_duplicates_and_bad_dims() {
        let mut m = FeatureMatrix::new(2);
        m.push(1, &[1.0, 2.0]).unwrap();
        assert!(matches!(m.push(1, &[1.0, 2.0]), Err(Error::DuplicateOwner(1))));
        assert!(matches!(m.push(2, &[1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let m = mat(&[
            (10, &[0.5, -1.25, 3.0, 0.0]),
            (11, &[1.0, 2.0, 3.0, 4.0]),
            (3, &[-0.0, 1e-3, 7.5, -2.0]),
        ]);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), 16 + 3 * (8 + 16));
        let back = FeatureMatrix::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.owners(), &[10, 11, 3]);
        assert_eq!(back.row(0), &[0.5, -1.25, 3.0, 0.0]);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureMatrix::from_bytes(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad),
            Err(Error::VersionUnsupported(2))
        ));
        let mut bad = bytes.clone();
        bad[8] = 4; // claims 4 rows, has 3
        assert!(matches!(
            FeatureMatrix::from_bytes(&bad),
            Err(Error::TruncatedFile(_))
        ));
        assert!(matches!(
            FeatureMatrix::from_bytes(&bytes[..10]),
            Err(Error::TruncatedFile(_))
        ));
    }

    #[test]
    fn path_sum_encoding_and_backward() {
        let dag = HierarchyDag::load(&[("A", "R"), ("B", "A")], &LoadOptions::default()).unwrap();
        // ids: A=0, R=1, B=2
        let m = mat(&[(0, &[1.0, 0.0]), (1, &[0.0, 5.0]), (2, &[0.0, 1.0])]);
        let store = FeatureStore::new(&dag, m, ClassEncoder::PathSum).unwrap();
        let reps = store.encode(&dag).unwrap();
        let h = 0.5f64.sqrt();
        assert!((reps.rep(NodeId(2))[0] - h).abs() < 1e-15);
        assert_eq!(reps.rep(NodeId(0)), &[1.0, 0.0]);
        // root row is not added to descendants
        assert_eq!(reps.rep(NodeId(1)), &[0.0, 1.0]);

        let mut d = BTreeMap::new();
        d.insert(NodeId(2), vec![1.0, 0.0]);
        let g = reps.backward(&dag, &d);
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), vec![NodeId(0), NodeId(2)]);
        assert_eq!(g[&NodeId(0)], g[&NodeId(2)]);
    }

    #[test]
    fn store_requires_dense_rows() {
        let dag = HierarchyDag::load(&[("A", "R")], &LoadOptions::default()).unwrap();
        assert!(FeatureStore::new(&dag, mat(&[(0, &[1.0])]), ClassEncoder::Table).is_err());
        assert!(FeatureStore::new(&dag, mat(&[(1, &[1.0]), (0, &[1.0])]), ClassEncoder::Table).is_err());
    }
}
