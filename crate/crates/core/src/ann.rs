//! Product-quantisation index with asymmetric distance scan, plus the exact
//! brute-force ranking it approximates.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{substream, Scalar};

const MAGIC: &[u8; 4] = b"LSPQ";
const FORMAT_VERSION: u16 = 1;

/// Results returned per search unless the caller asks otherwise.
pub const DEFAULT_K: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PqConfig {
    /// Subspaces; the vector width must divide evenly.
    pub subspaces: usize,
    /// Centroids per subspace, at most 256 so codes fit a byte.
    pub centroids: usize,
    pub iterations: usize,
    /// Codebooks are trained on at most this many vectors.
    pub training_sample: usize,
    pub seed: u64,
    /// Keep raw vectors and answer queries exactly.
    pub exact: bool,
    /// When non-zero, keep raw vectors and re-rank this many asymmetric
    /// distance candidates exactly.
    pub rerank: usize,
}

impl Default for PqConfig {
    fn default() -> Self {
        Self {
            subspaces: 8,
            centroids: 256,
            iterations: 20,
            training_sample: 32_768,
            seed: 0,
            exact: false,
            rerank: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T = f32> {
    pub id: u64,
    /// Squared L2 distance.
    pub distance: T,
}

/// Max-heap entry ordered by (distance, id), so the root is the worst kept.
struct Worst<T>(Neighbor<T>);

impl<T: Scalar> PartialEq for Worst<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Worst<T> {}
impl<T: Scalar> PartialOrd for Worst<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Worst<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

fn rank_order<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.distance
        .partial_cmp(&b.distance)
        .unwrap_or_else(|| a.distance.is_nan().cmp(&b.distance.is_nan()))
        .then(a.id.cmp(&b.id))
}

/// Keeps the `k` best of a stream of candidates.
struct TopK<T> {
    k: usize,
    heap: BinaryHeap<Worst<T>>,
}

impl<T: Scalar> TopK<T> {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn push(&mut self, n: Neighbor<T>) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() < self.k {
            self.heap.push(Worst(n));
        } else if let Some(top) = self.heap.peek() {
            if rank_order(&n, &top.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(Worst(n));
            }
        }
    }

    fn finish(self) -> Vec<Neighbor<T>> {
        let mut v: Vec<Neighbor<T>> = self.heap.into_iter().map(|w| w.0).collect();
        v.sort_by(rank_order);
        v
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Exact ranking of row-major `vectors` (one row per id) by squared L2
/// distance to `q`; ties go to the smaller id.
pub fn brute_force<T: Scalar>(ids: &[u64], vectors: &[T], q: &[T], k: usize) -> Result<Vec<Neighbor<T>>> {
    let d = q.len();
    if d == 0 || vectors.len() != ids.len() * d {
        return Err(Error::dim("brute_force", &[vectors.len()], &[ids.len(), d]));
    }
    let mut top = TopK::new(k);
    for (row, &id) in vectors.chunks_exact(d).zip(ids) {
        top.push(Neighbor {
            id,
            distance: sq_dist(row, q),
        });
    }
    Ok(top.finish())
}

/// Per-subspace centroid tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PqCodebook<T = f32> {
    dims: usize,
    subspaces: usize,
    centroids: usize,
    /// `subspaces × centroids × sub_dim`, row-major.
    table: Vec<T>,
}

impl<T: Scalar> PqCodebook<T> {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn subspaces(&self) -> usize {
        self.subspaces
    }

    pub fn centroids(&self) -> usize {
        self.centroids
    }

    pub fn sub_dim(&self) -> usize {
        self.dims / self.subspaces
    }

    pub fn centroid(&self, subspace: usize, c: usize) -> &[T] {
        let s = self.sub_dim();
        let start = (subspace * self.centroids + c) * s;
        &self.table[start..start + s]
    }

    /// Trains one k-means codebook per subspace on row-major `vectors`.
    pub fn train(vectors: &[T], dims: usize, config: &PqConfig) -> Result<Self> {
        let (m, k) = (config.subspaces, config.centroids);
        if dims == 0 || m == 0 || dims % m != 0 {
            return Err(Error::invalid(format!("width {dims} is not divisible into {m} subspaces")));
        }
        if k == 0 || k > 256 {
            return Err(Error::invalid(format!("{k} centroids do not fit a one-byte code")));
        }
        if vectors.len() % dims != 0 {
            return Err(Error::dim("train_codebook", &[vectors.len()], &[dims]));
        }
        let n = vectors.len() / dims;
        if n < k {
            return Err(Error::invalid(format!("{n} training vectors for {k} centroids")));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite training vector"));
        }
        let mut rng = substream(config.seed, "pq-sample");
        let sample: Vec<usize> = if n > config.training_sample.max(k) {
            rand::seq::index::sample(&mut rng, n, config.training_sample.max(k)).into_vec()
        } else {
            (0..n).collect()
        };
        let s = dims / m;
        let mut table = Vec::with_capacity(m * k * s);
        for sub in 0..m {
            let points: Vec<T> = sample
                .iter()
                .flat_map(|&i| vectors[i * dims + sub * s..i * dims + (sub + 1) * s].iter().copied())
                .collect();
            let mut rng = substream(config.seed, &format!("pq-subspace-{sub}"));
            table.extend(kmeans(&points, s, k, config.iterations, &mut rng));
        }
        Ok(Self {
            dims,
            subspaces: m,
            centroids: k,
            table,
        })
    }

    fn nearest(&self, sub: usize, x: &[T]) -> u8 {
        let mut best = (T::infinity(), 0usize);
        for c in 0..self.centroids {
            let d = sq_dist(x, self.centroid(sub, c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1 as u8
    }

    pub fn encode(&self, v: &[T]) -> Result<Vec<u8>> {
        if v.len() != self.dims {
            return Err(Error::dim("pq encode", &[v.len()], &[self.dims]));
        }
        let s = self.sub_dim();
        Ok((0..self.subspaces).map(|m| self.nearest(m, &v[m * s..(m + 1) * s])).collect())
    }

    pub fn decode(&self, code: &[u8]) -> Vec<T> {
        code.iter()
            .enumerate()
            .flat_map(|(m, &c)| self.centroid(m, c as usize).iter().copied())
            .collect()
    }

    /// Query-to-centroid squared distances, `subspaces × centroids`.
    pub fn distance_table(&self, q: &[T]) -> Result<Vec<T>> {
        if q.len() != self.dims {
            return Err(Error::dim("pq query", &[q.len()], &[self.dims]));
        }
        let s = self.sub_dim();
        let mut out = Vec::with_capacity(self.subspaces * self.centroids);
        for m in 0..self.subspaces {
            let qm = &q[m * s..(m + 1) * s];
            for c in 0..self.centroids {
                out.push(sq_dist(qm, self.centroid(m, c)));
            }
        }
        Ok(out)
    }

    /// Asymmetric distance computed directly, without a table.
    pub fn adc(&self, q: &[T], code: &[u8]) -> T {
        let s = self.sub_dim();
        let mut total = T::zero();
        for (m, &c) in code.iter().enumerate() {
            total += sq_dist(&q[m * s..(m + 1) * s], self.centroid(m, c as usize));
        }
        total
    }
}

/// Lloyd iterations from a k-means++ start. Empty clusters keep their
/// previous centre.
fn kmeans<T: Scalar>(points: &[T], s: usize, k: usize, iterations: usize, rng: &mut impl Rng) -> Vec<T> {
    let n = points.len() / s;
    let row = |i: usize| &points[i * s..(i + 1) * s];
    let mut centres: Vec<T> = Vec::with_capacity(k * s);
    centres.extend_from_slice(row(rng.random_range(0..n)));
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centres[..s]).to_f64_lossy()).collect();
    while centres.len() < k * s {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in closest.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centres.len();
        centres.extend_from_slice(row(pick));
        for (i, c) in closest.iter_mut().enumerate() {
            *c = c.min(sq_dist(row(i), &centres[start..start + s]).to_f64_lossy());
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iterations {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let x = row(i);
            let mut best = (T::infinity(), 0);
            for c in 0..k {
                let d = sq_dist(x, &centres[c * s..(c + 1) * s]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if *a != best.1 {
                *a = best.1;
                changed = true;
            }
        }
        let mut sums = vec![0.0f64; k * s];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (acc, &x) in sums[a * s..(a + 1) * s].iter_mut().zip(row(i)) {
                *acc += x.to_f64_lossy();
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..s {
                    centres[c * s + j] = T::of(sums[c * s + j] / counts[c] as f64);
                }
            }
        }
        if !changed {
            break;
        }
    }
    centres
}

/// Codes for every indexed item, scanned exhaustively at query time.
#[derive(Debug, Clone, PartialEq)]
pub struct PqIndex<T = f32> {
    codebook: PqCodebook<T>,
    ids: Vec<u64>,
    id_set: HashSet<u64>,
    codes: Vec<u8>,
    mode: SearchMode,
    raw: Option<Vec<T>>,
}

/// How `knn` answers a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    /// Asymmetric distance over the codes only.
    Adc,
    /// Brute force over the raw vectors.
    Exact,
    /// Asymmetric distance shortlist of this depth, re-ranked exactly.
    Refine(usize),
}

impl SearchMode {
    pub fn from_config(config: &PqConfig) -> Self {
        if config.exact {
            SearchMode::Exact
        } else if config.rerank > 0 {
            SearchMode::Refine(config.rerank)
        } else {
            SearchMode::Adc
        }
    }

    fn keeps_raw(self) -> bool {
        self != SearchMode::Adc
    }
}

impl<T: Scalar> PqIndex<T> {
    pub fn new(codebook: PqCodebook<T>, mode: SearchMode) -> Self {
        Self {
            codebook,
            ids: Vec::new(),
            id_set: HashSet::new(),
            codes: Vec::new(),
            mode,
            raw: mode.keeps_raw().then(Vec::new),
        }
    }

    /// Trains a codebook on `vectors` and adds them all.
    pub fn build(vectors: &[T], ids: &[u64], dims: usize, config: &PqConfig) -> Result<Self> {
        if vectors.len() != ids.len() * dims {
            return Err(Error::dim("pq build", &[vectors.len()], &[ids.len(), dims]));
        }
        let codebook = PqCodebook::train(vectors, dims, config)?;
        let mut index = Self::new(codebook, SearchMode::from_config(config));
        for (row, &id) in vectors.chunks_exact(dims).zip(ids) {
            index.add(id, row)?;
        }
        Ok(index)
    }

    pub fn add(&mut self, id: u64, v: &[T]) -> Result<()> {
        if self.id_set.contains(&id) {
            return Err(Error::invalid(format!("duplicate id {id}")));
        }
        let code = self.codebook.encode(v)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite vector for id {id}")));
        }
        self.codes.extend(code);
        self.ids.push(id);
        self.id_set.insert(id);
        if let Some(raw) = &mut self.raw {
            raw.extend_from_slice(v);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.codebook.dims
    }

    pub fn codebook(&self) -> &PqCodebook<T> {
        &self.codebook
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn mode(&self) -> SearchMode {
        self.mode
    }

    pub fn code(&self, item: usize) -> &[u8] {
        let m = self.codebook.subspaces;
        &self.codes[item * m..(item + 1) * m]
    }

    /// The `k` nearest items under the index's search mode.
    pub fn knn(&self, q: &[T], k: usize) -> Result<Vec<Neighbor<T>>> {
        if q.len() != self.dims() {
            return Err(Error::dim("knn", &[q.len()], &[self.dims()]));
        }
        match (self.mode, &self.raw) {
            (SearchMode::Exact, Some(raw)) => brute_force(&self.ids, raw, q, k),
            (SearchMode::Refine(depth), Some(raw)) => {
                let d = self.dims();
                let mut top = TopK::new(k);
                for (n, pos) in self.scan(q, depth.max(k))? {
                    top.push(Neighbor {
                        id: n.id,
                        distance: sq_dist(&raw[pos * d..(pos + 1) * d], q),
                    });
                }
                Ok(top.finish())
            }
            _ => self.knn_adc(q, k),
        }
    }

    /// Asymmetric-distance search regardless of mode.
    pub fn knn_adc(&self, q: &[T], k: usize) -> Result<Vec<Neighbor<T>>> {
        Ok(self.scan(q, k)?.into_iter().map(|(n, _)| n).collect())
    }

    /// The `k` best items by asymmetric distance, with storage positions.
    fn scan(&self, q: &[T], k: usize) -> Result<Vec<(Neighbor<T>, usize)>> {
        let table = self.codebook.distance_table(q)?;
        let (m, kc) = (self.codebook.subspaces, self.codebook.centroids);
        let mut top = TopK::new(k);
        for (code, &id) in self.codes.chunks_exact(m).zip(&self.ids) {
            let mut d = T::zero();
            for (sub, &c) in code.iter().enumerate() {
                d += table[sub * kc + c as usize];
            }
            top.push(Neighbor { id, distance: d });
        }
        let ranked = top.finish();
        if ranked.is_empty() {
            return Ok(Vec::new());
        }
        let wanted: std::collections::HashMap<u64, usize> = ranked.iter().enumerate().map(|(r, n)| (n.id, r)).collect();
        let mut pos = vec![0usize; ranked.len()];
        for (p, id) in self.ids.iter().enumerate() {
            if let Some(&r) = wanted.get(id) {
                pos[r] = p;
            }
        }
        Ok(ranked.into_iter().zip(pos).collect())
    }

    /// Layout, all little-endian:
    /// `"LSPQ"`, version u16, scalar width u8, mode u8 (0 codes only,
    /// 1 exact, 2 refine), refine depth u32, dims u32, subspaces u32,
    /// centroids u32, count u64, codebook scalars, ids u64 × count,
    /// codes u8 × count × subspaces, then raw scalars when the mode is
    /// not 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let cb = &self.codebook;
        let mut out = Vec::with_capacity(32 + cb.table.len() * T::WIDTH as usize + self.ids.len() * (8 + cb.subspaces));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::WIDTH);
        let (mode, depth) = match self.mode {
            SearchMode::Adc => (0u8, 0u32),
            SearchMode::Exact => (1, 0),
            SearchMode::Refine(d) => (2, d as u32),
        };
        out.push(mode);
        out.extend_from_slice(&depth.to_le_bytes());
        out.extend_from_slice(&(cb.dims as u32).to_le_bytes());
        out.extend_from_slice(&(cb.subspaces as u32).to_le_bytes());
        out.extend_from_slice(&(cb.centroids as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for &x in &cb.table {
            x.write_le(&mut out);
        }
        for &id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out.extend_from_slice(&self.codes);
        if let Some(raw) = &self.raw {
            for &x in raw {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a product-quantisation index".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported index version {version}")));
        }
        let width = r.take(1)?[0];
        if width != T::WIDTH {
            return Err(Error::Format(format!(
                "index stores {width}-byte scalars, expected {}",
                T::WIDTH
            )));
        }
        let mode_byte = r.take(1)?[0];
        let depth = r.u32()? as usize;
        let mode = match (mode_byte, depth) {
            (0, 0) => SearchMode::Adc,
            (1, 0) => SearchMode::Exact,
            (2, d) if d > 0 => SearchMode::Refine(d),
            (m, d) => return Err(Error::Format(format!("bad search mode {m} with depth {d}"))),
        };
        let dims = r.u32()? as usize;
        let subspaces = r.u32()? as usize;
        let centroids = r.u32()? as usize;
        let count = r.u64()? as usize;
        if subspaces == 0 || dims % subspaces != 0 || centroids == 0 || centroids > 256 {
            return Err(Error::Format(format!(
                "inconsistent header: dims {dims}, subspaces {subspaces}, centroids {centroids}"
            )));
        }
        let w = width as usize;
        let table = r.scalars::<T>(dims * centroids, w)?;
        let ids: Vec<u64> = (0..count).map(|_| r.u64()).collect::<Result<_>>()?;
        let codes = r.take(count * subspaces)?.to_vec();
        if codes.iter().any(|&c| c as usize >= centroids) {
            return Err(Error::Format("code refers to a missing centroid".into()));
        }
        let raw = if mode.keeps_raw() { Some(r.scalars::<T>(count * dims, w)?) } else { None };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let id_set: HashSet<u64> = ids.iter().copied().collect();
        if id_set.len() != ids.len() {
            return Err(Error::Format("duplicate ids".into()));
        }
        Ok(Self {
            codebook: PqCodebook {
                dims,
                subspaces,
                centroids,
                table,
            },
            ids,
            id_set,
            codes,
            mode,
            raw,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(format!("index {}", path.display())));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("index file truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalars<T: Scalar>(&mut self, n: usize, w: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(w).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        Ok(bytes.chunks_exact(w).map(T::read_le).collect())
    }
}
