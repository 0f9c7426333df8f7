//! On-disk hidden-state cache.
//!
//! Layout (all little-endian):
//!
//! ```text
//! header:  "IISC" | version u16 | fingerprint u64 | item_count u32
//!          | m u16 | m × layer index u16 | hidden_dim u32
//! records: item_id u64 | m × hidden_dim × f32 (layer-major)
//! ```
//!
//! Records are sorted by item id. A reader builds an id → offset index at
//! open time.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use rayon::prelude::*;

use crate::backbone::{FrozenEncoder, HiddenStateStack};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"IISC";
pub const CACHE_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub version: u16,
    pub encoder_fingerprint: u64,
    pub item_count: u32,
    pub kept_layers: Vec<u16>,
    pub hidden_dim: u32,
}

impl CacheHeader {
    pub fn byte_len(&self) -> u64 {
        header_size(self.kept_layers.len())
    }

    pub fn record_len(&self) -> u64 {
        record_size(self.kept_layers.len(), self.hidden_dim as usize)
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_u16::<LittleEndian>(self.version)?;
        w.write_u64::<LittleEndian>(self.encoder_fingerprint)?;
        w.write_u32::<LittleEndian>(self.item_count)?;
        w.write_u16::<LittleEndian>(self.kept_layers.len() as u16)?;
        for &l in &self.kept_layers {
            w.write_u16::<LittleEndian>(l)?;
        }
        w.write_u32::<LittleEndian>(self.hidden_dim)
    }

    /// Parses a header, reporting the offset of the first unreadable field.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let need = |off: usize, n: usize| -> Result<()> {
            if bytes.len() < off + n {
                Err(Error::format(bytes.len() as u64, format!("truncated header: need {} bytes", off + n)))
            } else {
                Ok(())
            }
        };
        need(0, 4)?;
        if &bytes[..4] != CACHE_MAGIC {
            return Err(Error::format(0, "bad magic"));
        }
        need(4, 2)?;
        let version = LittleEndian::read_u16(&bytes[4..6]);
        if version != CACHE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CACHE_VERSION,
            });
        }
        need(6, 16)?;
        let encoder_fingerprint = LittleEndian::read_u64(&bytes[6..14]);
        let item_count = LittleEndian::read_u32(&bytes[14..18]);
        let m = LittleEndian::read_u16(&bytes[18..20]) as usize;
        need(20, 2 * m + 4)?;
        let kept_layers: Vec<u16> = (0..m).map(|i| LittleEndian::read_u16(&bytes[20 + 2 * i..])).collect();
        let hidden_dim = LittleEndian::read_u32(&bytes[20 + 2 * m..]);
        if m == 0 {
            return Err(Error::format(18, "no kept layers"));
        }
        if let Some(i) = kept_layers.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::format(20 + 2 * (i as u64 + 1), "layer indices not strictly increasing"));
        }
        if hidden_dim == 0 {
            return Err(Error::format(20 + 2 * m as u64, "hidden_dim is zero"));
        }
        Ok(Self {
            version,
            encoder_fingerprint,
            item_count,
            kept_layers,
            hidden_dim,
        })
    }
}

pub fn header_size(kept_layers: usize) -> u64 {
    24 + 2 * kept_layers as u64
}

pub fn record_size(kept_layers: usize, hidden_dim: usize) -> u64 {
    8 + (kept_layers * hidden_dim * 4) as u64
}

/// Exact byte size of a cache file, without writing it.
pub fn cache_file_size(item_count: usize, kept_layers: usize, hidden_dim: usize) -> u64 {
    header_size(kept_layers) + item_count as u64 * record_size(kept_layers, hidden_dim)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheSummary {
    pub path: PathBuf,
    pub encoder_fingerprint: u64,
    pub item_count: usize,
    pub kept_layers: Vec<u16>,
    pub bytes: u64,
}

/// Writes stacks that already hold exactly `kept_layers`, sorted by item id.
pub fn write_cache(
    path: &Path,
    encoder_fingerprint: u64,
    kept_layers: &[u16],
    hidden_dim: usize,
    stacks: &[HiddenStateStack],
) -> Result<CacheSummary> {
    if kept_layers.is_empty() || kept_layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("kept layers must be strictly increasing, got {kept_layers:?}")));
    }
    let mut order: Vec<&HiddenStateStack> = stacks.iter().collect();
    order.sort_by_key(|s| s.item_id);
    if let Some(w) = order.windows(2).find(|w| w[0].item_id == w[1].item_id) {
        return Err(Error::Input(format!("duplicate item id {}", w[0].item_id)));
    }
    for s in &order {
        if s.layers != kept_layers || s.states.iter().any(|v| v.len() != hidden_dim) {
            return Err(Error::Contract(format!(
                "item {} does not match the cache layout (layers {:?}, hidden {hidden_dim})",
                s.item_id, kept_layers
            )));
        }
    }
    let header = CacheHeader {
        version: CACHE_VERSION,
        encoder_fingerprint,
        item_count: u32::try_from(order.len()).map_err(|_| Error::Input("too many items".into()))?,
        kept_layers: kept_layers.to_vec(),
        hidden_dim: hidden_dim as u32,
    };
    let file = File::create(path).map_err(|e| Error::path(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::path(path, e);
    header.write_to(&mut w).map_err(io)?;
    for s in &order {
        w.write_u64::<LittleEndian>(s.item_id).map_err(io)?;
        for state in &s.states {
            for &v in state {
                w.write_f32::<LittleEndian>(v).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;
    let bytes = fs::metadata(path).map_err(io)?.len();
    Ok(CacheSummary {
        path: path.to_path_buf(),
        encoder_fingerprint,
        item_count: order.len(),
        kept_layers: kept_layers.to_vec(),
        bytes,
    })
}

/// Encodes `items` with `encoder` and stores the `keep_layers` states.
pub fn build_cache(encoder: &FrozenEncoder, items: &[u64], keep_layers: &[u16], path: &Path) -> Result<CacheSummary> {
    if items.is_empty() {
        return Err(Error::Input("no items to cache".into()));
    }
    let max = encoder.config().layers as u16;
    if let Some(&bad) = keep_layers.iter().find(|&&l| l > max) {
        return Err(Error::Config(format!("layer {bad} exceeds encoder depth {max}")));
    }
    let mut ids = items.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let stacks = ids
        .par_iter()
        .map(|&id| encoder.encode_catalog_item(id)?.prune(keep_layers))
        .collect::<Result<Vec<_>>>()?;
    write_cache(path, encoder.fingerprint(), keep_layers, encoder.config().hidden_dim, &stacks)
}

/// Immutable view of a cache file with an id → record index.
#[derive(Debug)]
pub struct CacheReader {
    header: CacheHeader,
    bytes: Vec<u8>,
    index: HashMap<u64, usize>,
    ids: Vec<u64>,
}

impl CacheReader {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let header = CacheHeader::parse(&bytes)?;
        let start = header.byte_len();
        let rec = header.record_len();
        let expected = start + header.item_count as u64 * rec;
        if (bytes.len() as u64) < expected {
            let complete = (bytes.len() as u64).saturating_sub(start) / rec;
            return Err(Error::format(
                start + complete * rec,
                format!("truncated record {complete} of {}", header.item_count),
            ));
        }
        if bytes.len() as u64 > expected {
            return Err(Error::format(expected, "trailing bytes after last record"));
        }
        let mut index = HashMap::with_capacity(header.item_count as usize);
        let mut ids = Vec::with_capacity(header.item_count as usize);
        for i in 0..header.item_count as usize {
            let off = (start + i as u64 * rec) as usize;
            let id = LittleEndian::read_u64(&bytes[off..off + 8]);
            if index.insert(id, off).is_some() {
                return Err(Error::format(off as u64, format!("duplicate item id {id}")));
            }
            ids.push(id);
        }
        Ok(Self {
            header,
            bytes,
            index,
            ids,
        })
    }

    pub fn header(&self) -> &CacheHeader {
        &self.header
    }

    pub fn fingerprint(&self) -> u64 {
        self.header.encoder_fingerprint
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.index.contains_key(&item_id)
    }

    /// Fails with a staleness error unless the file was produced by the
    /// encoder with `expected` fingerprint.
    pub fn expect_fingerprint(&self, expected: u64) -> Result<()> {
        if self.header.encoder_fingerprint != expected {
            return Err(Error::Staleness(format!(
                "cache fingerprint {:016x} does not match encoder {:016x}; rebuild the cache",
                self.header.encoder_fingerprint, expected
            )));
        }
        Ok(())
    }

    fn decode(&self, off: usize) -> HiddenStateStack {
        let h = self.header.hidden_dim as usize;
        let item_id = LittleEndian::read_u64(&self.bytes[off..off + 8]);
        let mut p = off + 8;
        let states = (0..self.header.kept_layers.len())
            .map(|_| {
                let mut v = vec![0f32; h];
                LittleEndian::read_f32_into(&self.bytes[p..p + 4 * h], &mut v);
                p += 4 * h;
                v
            })
            .collect();
        HiddenStateStack {
            item_id,
            encoder_fingerprint: self.header.encoder_fingerprint,
            layers: self.header.kept_layers.clone(),
            states,
        }
    }

    pub fn read_item(&self, item_id: u64) -> Result<HiddenStateStack> {
        let off = *self
            .index
            .get(&item_id)
            .ok_or_else(|| Error::NotFound(format!("item {item_id} not in cache")))?;
        Ok(self.decode(off))
    }

    /// Stacks in file order.
    pub fn iter(&self) -> impl Iterator<Item = Result<HiddenStateStack>> + '_ {
        self.ids.iter().map(move |id| Ok(self.decode(self.index[id])))
    }
}

/// One-shot lookup that also checks the producing encoder.
pub fn read_item(path: &Path, item_id: u64, expected_fingerprint: Option<u64>) -> Result<HiddenStateStack> {
    let reader = CacheReader::open(path)?;
    if let Some(fp) = expected_fingerprint {
        reader.expect_fingerprint(fp)?;
    }
    reader.read_item(item_id)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheIssue {
    Magic,
    Version(u16),
    Header(String),
    LayerOrder,
    Count { header: u32, found: u64 },
    Size { expected: u64, found: u64 },
    Unsorted { record: u64 },
    NonFinite { item_id: u64 },
}

impl std::fmt::Display for CacheIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CacheIssue::Magic => write!(f, "magic: expected \"IISC\""),
            CacheIssue::Version(v) => write!(f, "version: found {v}, expected {CACHE_VERSION}"),
            CacheIssue::Header(m) => write!(f, "header: {m}"),
            CacheIssue::LayerOrder => write!(f, "layers: indices not strictly increasing"),
            CacheIssue::Count { header, found } => write!(f, "count: header says {header}, file holds {found}"),
            CacheIssue::Size { expected, found } => write!(f, "size: expected {expected} bytes, found {found}"),
            CacheIssue::Unsorted { record } => write!(f, "order: record {record} is not sorted by item id"),
            CacheIssue::NonFinite { item_id } => write!(f, "payload: non-finite value in item {item_id}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyReport {
    pub issues: Vec<CacheIssue>,
    pub records_checked: u64,
    pub records_sampled: u64,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Structural audit of a cache file. Collects every violation it can find
/// instead of stopping at the first; finiteness is checked on every 100th
/// record (at least one).
pub fn verify_cache(path: &Path) -> Result<VerifyReport> {
    let bytes = fs::read(path).map_err(|e| Error::path(path, e))?;
    Ok(verify_bytes(&bytes))
}

pub fn verify_bytes(bytes: &[u8]) -> VerifyReport {
    let mut report = VerifyReport::default();
    if bytes.len() < 24 {
        report.issues.push(CacheIssue::Header(format!("file too short ({} bytes)", bytes.len())));
        return report;
    }
    if &bytes[..4] != CACHE_MAGIC {
        report.issues.push(CacheIssue::Magic);
    }
    let version = LittleEndian::read_u16(&bytes[4..6]);
    if version != CACHE_VERSION {
        report.issues.push(CacheIssue::Version(version));
    }
    let item_count = LittleEndian::read_u32(&bytes[14..18]);
    let m = LittleEndian::read_u16(&bytes[18..20]) as usize;
    let hsize = header_size(m);
    if (bytes.len() as u64) < hsize {
        report.issues.push(CacheIssue::Header(format!("declares {m} layers but is only {} bytes", bytes.len())));
        return report;
    }
    let layers: Vec<u16> = (0..m).map(|i| LittleEndian::read_u16(&bytes[20 + 2 * i..])).collect();
    if m == 0 || layers.windows(2).any(|w| w[0] >= w[1]) {
        report.issues.push(CacheIssue::LayerOrder);
    }
    let h = LittleEndian::read_u32(&bytes[20 + 2 * m..]) as usize;
    if h == 0 {
        report.issues.push(CacheIssue::Header("hidden_dim is zero".into()));
        return report;
    }
    let rec = record_size(m, h);
    let body = bytes.len() as u64 - hsize;
    let expected = hsize + item_count as u64 * rec;
    if !body.is_multiple_of(rec) {
        report.issues.push(CacheIssue::Size {
            expected,
            found: bytes.len() as u64,
        });
    } else if body / rec != item_count as u64 {
        report.issues.push(CacheIssue::Count {
            header: item_count,
            found: body / rec,
        });
    }
    let records = body / rec;
    report.records_checked = records;
    let mut prev: Option<u64> = None;
    for r in 0..records {
        let off = (hsize + r * rec) as usize;
        let id = LittleEndian::read_u64(&bytes[off..off + 8]);
        if prev.is_some_and(|p| p >= id) {
            report.issues.push(CacheIssue::Unsorted { record: r });
        }
        prev = Some(id);
        if r % 100 == 0 {
            report.records_sampled += 1;
            let payload = &bytes[off + 8..off + rec as usize];
            if payload.chunks_exact(4).any(|c| !LittleEndian::read_f32(c).is_finite()) {
                report.issues.push(CacheIssue::NonFinite { item_id: id });
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_encoder, EncoderConfig, Modality};

    fn tiny() -> FrozenEncoder {
        build_encoder(EncoderConfig::new(Modality::Image, 3, 8, 11)).unwrap()
    }

    #[test]
    fn size_formula_example() {
        assert_eq!(cache_file_size(1000, 7, 64) - header_size(7), 1_800_000);
    }

    #[test]
    fn full_layer_cache_equals_encoder_output() {
        let enc = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let all: Vec<u16> = (0..=3).collect();
        let summary = build_cache(&enc, &[5, 1, 3], &all, &path).unwrap();
        assert_eq!(summary.bytes, cache_file_size(3, 4, 8));
        let reader = CacheReader::open(&path).unwrap();
        assert_eq!(reader.item_ids(), &[1, 3, 5]);
        for id in [1, 3, 5] {
            assert_eq!(reader.read_item(id).unwrap(), enc.encode_catalog_item(id).unwrap());
        }
    }

    #[test]
    fn missing_item_and_stale_fingerprint() {
        let enc = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        build_cache(&enc, &[2], &[0, 2], &path).unwrap();
        assert!(matches!(read_item(&path, 9, None), Err(Error::NotFound(_))));
        assert!(matches!(
            read_item(&path, 2, Some(enc.fingerprint() ^ 1)),
            Err(Error::Staleness(_))
        ));
        assert_eq!(read_item(&path, 2, Some(enc.fingerprint())).unwrap().layers, vec![0, 2]);
    }

    #[test]
    fn rejects_layer_beyond_depth() {
        let enc = tiny();
        let dir = tempfile::tempdir().unwrap();
        let err = build_cache(&enc, &[2], &[0, 4], &dir.path().join("c.bin")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn verify_flags_magic_and_count() {
        let enc = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        build_cache(&enc, &[1, 2, 3], &[0, 1, 3], &path).unwrap();
        assert!(verify_cache(&path).unwrap().is_clean());

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        assert!(verify_bytes(&bytes).issues.contains(&CacheIssue::Magic));

        let mut bytes = fs::read(&path).unwrap();
        bytes[14] = 4;
        assert!(verify_bytes(&bytes)
            .issues
            .contains(&CacheIssue::Count { header: 4, found: 3 }));
    }

    #[test]
    fn truncated_and_versioned_files() {
        let enc = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        build_cache(&enc, &[1, 2], &[0, 3], &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        let cut = bytes[..bytes.len() - 5].to_vec();
        match CacheReader::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, header_size(2) + record_size(2, 8)),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            CacheReader::from_bytes(v2),
            Err(Error::Version { found: 2, .. })
        ));
    }
}
