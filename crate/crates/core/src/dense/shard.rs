//! Sharded serving index: round-robin partition, per-shard search,
//! merge and re-rank. Optionally quantized (SQ8) and graph-accelerated
//! (HNSW) per shard, and serializable to a self-describing binary
//! file.

use std::path::Path;

use super::hnsw::{build_hnsw, hnsw_search, HnswIndex};
use super::quant::{dequantize, quantize, SQ8Matrix};
use super::{exact_search, note_index_build, DenseError, VectorMatrix};
use crate::sparse::{sort_results, RetrievalResult};

const MAGIC: &[u8; 8] = b"SFDENSE1";
const FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnnParams {
    pub m: usize,
    pub ef_construction: usize,
}

impl Default for AnnParams {
    fn default() -> AnnParams {
        AnnParams {
            m: super::hnsw::DEFAULT_M,
            ef_construction: super::hnsw::DEFAULT_EF_CONSTRUCTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexBuildConfig {
    pub shards: usize,
    pub quantize: bool,
    /// None builds exact-only shards (no graph).
    pub ann: Option<AnnParams>,
    pub seed: u64,
}

impl Default for IndexBuildConfig {
    fn default() -> IndexBuildConfig {
        IndexBuildConfig {
            shards: 1,
            quantize: false,
            ann: Some(AnnParams::default()),
            seed: 0,
        }
    }
}

/// One shard: vectors (decoded if quantized), optional codes, optional
/// graph. Empty shards occur when n < shard count.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub matrix: VectorMatrix,
    pub quant: Option<SQ8Matrix>,
    pub graph: Option<HnswIndex>,
}

impl Shard {
    fn search(&self, q: &[f64], k: usize, ef_search: usize) -> Result<Vec<RetrievalResult>, DenseError> {
        if self.matrix.n() == 0 {
            return Ok(Vec::new());
        }
        match &self.graph {
            Some(g) => hnsw_search(g, &self.matrix, q, k, ef_search.max(k)),
            None => exact_search(&self.matrix, q, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedIndex {
    pub d: usize,
    pub quantized: bool,
    pub m: usize,
    pub ef_construction: usize,
    pub vocab_fingerprint: String,
    pub shards: Vec<Shard>,
}

impl ShardedIndex {
    /// Partition rows round-robin (row i goes to shard i mod S) and
    /// build each shard: quantize first if asked (the graph then
    /// indexes the decoded vectors, so served scores match storage),
    /// then the graph.
    pub fn build(
        matrix: &VectorMatrix,
        vocab_fingerprint: &str,
        config: &IndexBuildConfig,
    ) -> Result<ShardedIndex, DenseError> {
        assert!(config.shards >= 1, "shards must be >= 1");
        if matrix.n() == 0 {
            return Err(DenseError::EmptyMatrix);
        }
        matrix.validate()?;
        let s = config.shards;
        let mut parts: Vec<VectorMatrix> = (0..s).map(|_| VectorMatrix::new(matrix.d)).collect();
        for i in 0..matrix.n() {
            let part = &mut parts[i % s];
            part.ids.push(matrix.ids[i].clone());
            part.data.extend_from_slice(matrix.row(i));
        }

        let ann = config.ann;
        let mut shards = Vec::with_capacity(s);
        for (si, part) in parts.into_iter().enumerate() {
            if part.n() == 0 {
                shards.push(Shard {
                    matrix: part,
                    quant: None,
                    graph: None,
                });
                continue;
            }
            let (stored, codes) = if config.quantize {
                let q = quantize(&part)?;
                (dequantize(&q), Some(q))
            } else {
                (part, None)
            };
            let graph = match ann {
                Some(p) => Some(build_hnsw(
                    &stored,
                    p.m,
                    p.ef_construction,
                    config.seed.wrapping_add(si as u64),
                )?),
                None => None,
            };
            shards.push(Shard {
                matrix: stored,
                quant: codes,
                graph,
            });
        }
        note_index_build();
        let ann = ann.unwrap_or(AnnParams {
            m: 0,
            ef_construction: 0,
        });
        Ok(ShardedIndex {
            d: matrix.d,
            quantized: config.quantize,
            m: ann.m,
            ef_construction: ann.ef_construction,
            vocab_fingerprint: vocab_fingerprint.to_string(),
            shards,
        })
    }

    pub fn n_total(&self) -> usize {
        self.shards.iter().map(|s| s.matrix.n()).sum()
    }

    pub fn has_graph(&self) -> bool {
        self.shards.iter().any(|s| s.graph.is_some())
    }

    /// Query every shard for its top-k, merge, re-sort (score desc,
    /// id asc), truncate to k.
    pub fn search(
        &self,
        q: &[f64],
        k: usize,
        ef_search: usize,
    ) -> Result<Vec<RetrievalResult>, DenseError> {
        if k < 1 {
            return Err(DenseError::ZeroK);
        }
        if q.len() != self.d {
            return Err(DenseError::DimMismatch {
                expected: self.d,
                got: q.len(),
            });
        }
        let mut merged = Vec::new();
        for shard in &self.shards {
            merged.extend(shard.search(q, k, ef_search)?);
        }
        sort_results(&mut merged);
        merged.truncate(k);
        Ok(merged)
    }

    pub fn write_to(&self, path: &Path) -> Result<(), DenseError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FILE_VERSION);
        out.push(self.quantized as u8);
        out.push(self.has_graph() as u8);
        out.extend_from_slice(&[0, 0]);
        put_u32(&mut out, self.d as u32);
        put_u32(&mut out, self.shards.len() as u32);
        put_u32(&mut out, self.m as u32);
        put_u32(&mut out, self.ef_construction as u32);
        put_str(&mut out, &self.vocab_fingerprint);
        for shard in &self.shards {
            let n = shard.matrix.n();
            put_u64(&mut out, n as u64);
            for id in &shard.matrix.ids {
                put_str(&mut out, id);
            }
            match &shard.quant {
                Some(q) => {
                    for &x in &q.mins {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    for &x in &q.steps {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                    out.extend_from_slice(&q.codes);
                }
                None => {
                    for &x in &shard.matrix.data {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            match &shard.graph {
                Some(g) => {
                    out.push(1);
                    put_u32(&mut out, g.m as u32);
                    put_u32(&mut out, g.ef_construction as u32);
                    put_u32(&mut out, g.entry);
                    put_u32(&mut out, g.max_level as u32);
                    for &l in &g.levels {
                        put_u32(&mut out, l);
                    }
                    for adj_layers in &g.neighbors {
                        for adj in adj_layers {
                            put_u32(&mut out, adj.len() as u32);
                            for &nb in adj {
                                put_u32(&mut out, nb);
                            }
                        }
                    }
                }
                None => out.push(0),
            }
        }
        std::fs::write(path, out).map_err(|source| DenseError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_from(path: &Path) -> Result<ShardedIndex, DenseError> {
        let buf = std::fs::read(path).map_err(|source| DenseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cur = Cursor {
            buf: &buf,
            pos: 0,
            path: &path.display().to_string(),
        };
        if cur.take(8)? != MAGIC {
            return Err(cur.bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != FILE_VERSION {
            return Err(cur.bad(&format!("unsupported version {version}")));
        }
        let quantized = cur.u8()? != 0;
        let _has_graph = cur.u8()?;
        cur.take(2)?;
        let d = cur.u32()? as usize;
        let n_shards = cur.u32()? as usize;
        if d == 0 || n_shards == 0 {
            return Err(cur.bad("zero dimension or shard count"));
        }
        let m = cur.u32()? as usize;
        let ef_construction = cur.u32()? as usize;
        let vocab_fingerprint = cur.string()?;

        let mut shards = Vec::with_capacity(n_shards);
        for _ in 0..n_shards {
            let n = cur.u64()? as usize;
            let mut ids = Vec::with_capacity(n);
            for _ in 0..n {
                ids.push(cur.string()?);
            }
            let (matrix, quant) = if quantized && n > 0 {
                let mut mins = Vec::with_capacity(d);
                let mut steps = Vec::with_capacity(d);
                for _ in 0..d {
                    mins.push(cur.f64()?);
                }
                for _ in 0..d {
                    steps.push(cur.f64()?);
                }
                let codes = cur.take(n * d)?.to_vec();
                let q = SQ8Matrix {
                    d,
                    ids: ids.clone(),
                    mins,
                    steps,
                    codes,
                };
                (dequantize(&q), Some(q))
            } else {
                let mut data = Vec::with_capacity(n * d);
                for _ in 0..n * d {
                    data.push(cur.f32()?);
                }
                (VectorMatrix { d, ids, data }, None)
            };
            let graph = if cur.u8()? == 1 {
                let gm = cur.u32()? as usize;
                let gef = cur.u32()? as usize;
                let entry = cur.u32()?;
                let max_level = cur.u32()? as usize;
                let mut levels = Vec::with_capacity(n);
                for _ in 0..n {
                    levels.push(cur.u32()?);
                }
                let mut neighbors = Vec::with_capacity(n);
                for &l in &levels {
                    let mut layers = Vec::with_capacity(l as usize + 1);
                    for _ in 0..=l {
                        let cnt = cur.u32()? as usize;
                        if cnt > 2 * gm.max(1) {
                            return Err(cur.bad("neighbor list over cap"));
                        }
                        let mut adj = Vec::with_capacity(cnt);
                        for _ in 0..cnt {
                            let nb = cur.u32()?;
                            if nb as usize >= n {
                                return Err(cur.bad("edge to missing node"));
                            }
                            adj.push(nb);
                        }
                        layers.push(adj);
                    }
                    neighbors.push(layers);
                }
                if entry as usize >= n {
                    return Err(cur.bad("entry point out of range"));
                }
                Some(HnswIndex {
                    m: gm,
                    ef_construction: gef,
                    entry,
                    max_level,
                    levels,
                    neighbors,
                })
            } else {
                None
            };
            let shard = Shard {
                matrix,
                quant,
                graph,
            };
            shard.matrix.validate().map_err(|_| cur.bad("non-finite vectors"))?;
            shards.push(shard);
        }
        if cur.pos != buf.len() {
            return Err(cur.bad("trailing bytes"));
        }
        Ok(ShardedIndex {
            d,
            quantized,
            m,
            ef_construction,
            vocab_fingerprint,
            shards,
        })
    }
}

const VEC_MAGIC: &[u8; 8] = b"SFVECS01";

impl VectorMatrix {
    /// Raw encoded-corpus dump: ids plus row-major f32 data. Kept separate
    /// from the serving index so re-indexing never re-runs the encoder.
    pub fn write_to(&self, path: &Path) -> Result<(), DenseError> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(VEC_MAGIC);
        put_u32(&mut out, FILE_VERSION);
        put_u32(&mut out, self.d as u32);
        put_u64(&mut out, self.n() as u64);
        for id in &self.ids {
            put_str(&mut out, id);
        }
        for &x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|source| DenseError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read_from(path: &Path) -> Result<VectorMatrix, DenseError> {
        let buf = std::fs::read(path).map_err(|source| DenseError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cur = Cursor {
            buf: &buf,
            pos: 0,
            path: &path.display().to_string(),
        };
        if cur.take(8)? != VEC_MAGIC {
            return Err(cur.bad("bad magic"));
        }
        let version = cur.u32()?;
        if version != FILE_VERSION {
            return Err(cur.bad(&format!("unsupported version {version}")));
        }
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(cur.bad("zero dimension"));
        }
        let n = cur.u64()? as usize;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            ids.push(cur.string()?);
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(cur.f32()?);
        }
        if cur.pos != buf.len() {
            return Err(cur.bad("trailing bytes"));
        }
        let m = VectorMatrix { d, ids, data };
        m.validate()?;
        Ok(m)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn bad(&self, reason: &str) -> DenseError {
        DenseError::Format {
            path: self.path.to_string(),
            reason: format!("{reason} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DenseError> {
        if self.pos + n > self.buf.len() {
            return Err(self.bad("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DenseError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DenseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DenseError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DenseError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DenseError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DenseError> {
        let len = self.u32()? as usize;
        if len > 1 << 20 {
            return Err(self.bad("string too long"));
        }
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.bad("invalid utf-8"))
    }
}
