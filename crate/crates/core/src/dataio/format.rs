//! The MAAE embedding container.
//!
//! Little-endian, no alignment padding:
//!
//! ```text
//! "MAAE" | version u16 | C u32 | C × (u16 len, utf-8 class name)
//! | modality count u8 | per modality: id u8, D_m u32, (u16 len, utf-8 name)
//! | record count u64
//! | per record: (u16 len, utf-8 id) | label u32
//! |   per modality in table order: N_m u32, N_m·D_m × f32
//! ```

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{MaaError, Result};
use crate::numcore::Matrix;

pub const MAGIC: &[u8; 4] = b"MAAE";
pub const FORMAT_VERSION: u16 = 1;

/// Source modality of a token. Ids 0..=2 are the built-in global visual,
/// local visual and text modalities; 3..=255 are free for new ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityId(pub u8);

impl ModalityId {
    pub const GLOBAL: ModalityId = ModalityId(0);
    pub const LOCAL: ModalityId = ModalityId(1);
    pub const TEXT: ModalityId = ModalityId(2);

    pub fn default_name(self) -> String {
        match self.0 {
            0 => "global".into(),
            1 => "local".into(),
            2 => "text".into(),
            n => format!("modality{n}"),
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("G"),
            1 => f.write_str("L"),
            2 => f.write_str("T"),
            n => write!(f, "{n}"),
        }
    }
}

impl FromStr for ModalityId {
    type Err = MaaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "G" | "g" | "global" => Ok(ModalityId::GLOBAL),
            "L" | "l" | "local" => Ok(ModalityId::LOCAL),
            "T" | "t" | "text" => Ok(ModalityId::TEXT),
            other => other
                .parse::<u8>()
                .map(ModalityId)
                .map_err(|_| MaaError::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityInfo {
    pub id: ModalityId,
    pub dim: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub class_names: Vec<String>,
    pub modalities: Vec<ModalityInfo>,
    pub record_count: u64,
}

impl DatasetHeader {
    pub fn new(class_names: Vec<String>, modalities: Vec<ModalityInfo>) -> Self {
        DatasetHeader {
            version: FORMAT_VERSION,
            class_names,
            modalities,
            record_count: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn modality_index(&self, id: ModalityId) -> Option<usize> {
        self.modalities.iter().position(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(MaaError::Validation(format!(
                "need at least 2 classes, header has {}",
                self.class_names.len()
            )));
        }
        if self.modalities.is_empty() {
            return Err(MaaError::Validation("header has no modalities".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.id == m.id) {
                return Err(MaaError::Validation(format!(
                    "modality {} listed twice",
                    m.id
                )));
            }
            if m.dim == 0 {
                return Err(MaaError::Validation(format!("modality {} has D_m = 0", m.id)));
            }
        }
        Ok(())
    }
}

/// One sample: per-modality token matrices in header table order plus label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: usize,
    /// `tokens[i]` is `N_m × D_m` for `header.modalities[i]`; zero rows means
    /// the modality is absent for this sample.
    pub tokens: Vec<Matrix<f32>>,
}

impl EmbeddingRecord {
    pub fn token_count(&self) -> usize {
        self.tokens.iter().map(Matrix::rows).sum()
    }

    pub fn validate(&self, header: &DatasetHeader) -> Result<()> {
        if self.label >= header.num_classes() {
            return Err(MaaError::Validation(format!(
                "record `{}`: label {} out of range for {} classes",
                self.id,
                self.label,
                header.num_classes()
            )));
        }
        if self.tokens.len() != header.modalities.len() {
            return Err(MaaError::Validation(format!(
                "record `{}`: {} modality blocks, header lists {}",
                self.id,
                self.tokens.len(),
                header.modalities.len()
            )));
        }
        for (m, z) in header.modalities.iter().zip(&self.tokens) {
            if z.cols() != m.dim {
                return Err(MaaError::Validation(format!(
                    "record `{}`: modality {} has D_m = {}, header says {}",
                    self.id,
                    m.id,
                    z.cols(),
                    m.dim
                )));
            }
        }
        if self.token_count() == 0 {
            return Err(MaaError::Validation(format!(
                "record `{}` has no tokens in any modality",
                self.id
            )));
        }
        Ok(())
    }
}

/// Validates everything, then writes the file in one pass.
pub fn write_dataset(path: &Path, header: &DatasetHeader, records: &[EmbeddingRecord]) -> Result<()> {
    header.validate()?;
    for r in records {
        r.validate(header)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, header, records)?;
    w.flush()?;
    Ok(())
}

/// Serializes to any writer; `header.record_count` is replaced by `records.len()`.
pub fn write_to<W: Write>(w: &mut W, header: &DatasetHeader, records: &[EmbeddingRecord]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&header.version.to_le_bytes())?;
    w.write_all(&(header.class_names.len() as u32).to_le_bytes())?;
    for name in &header.class_names {
        write_str(w, name)?;
    }
    let count = u8::try_from(header.modalities.len())
        .map_err(|_| MaaError::Validation("more than 255 modalities".into()))?;
    w.write_all(&[count])?;
    for m in &header.modalities {
        w.write_all(&[m.id.0])?;
        w.write_all(&dim_u32(m.dim)?.to_le_bytes())?;
        write_str(w, &m.name)?;
    }
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        write_str(w, &r.id)?;
        w.write_all(&(r.label as u32).to_le_bytes())?;
        for z in &r.tokens {
            w.write_all(&dim_u32(z.rows())?.to_le_bytes())?;
            for v in z.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| MaaError::Validation(format!("{n} does not fit in u32")))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| MaaError::Validation(format!("string of {} bytes exceeds u16", s.len())))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

/// Opens a dataset; records are decoded lazily, one at a time.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, DatasetReader<BufReader<File>>)> {
    DatasetReader::new(BufReader::new(File::open(path)?))
}

/// Reads the whole file into memory.
pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<EmbeddingRecord>)> {
    let (header, reader) = read_dataset(path)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Streaming record decoder. Errors carry the byte offset where decoding failed.
pub struct DatasetReader<R> {
    inner: R,
    offset: u64,
    header: DatasetHeader,
    remaining: u64,
    failed: bool,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(inner: R) -> Result<(DatasetHeader, Self)> {
        let mut reader = DatasetReader {
            inner,
            offset: 0,
            header: DatasetHeader::new(Vec::new(), Vec::new()),
            remaining: 0,
            failed: false,
        };
        let header = reader.read_header()?;
        reader.header = header.clone();
        reader.remaining = header.record_count;
        Ok((header, reader))
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    fn read_header(&mut self) -> Result<DatasetHeader> {
        let mut magic = [0u8; 4];
        self.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(self.format_err(0, format!("bad magic {magic:?}")));
        }
        let at = self.offset;
        let version = u16::from_le_bytes(self.array("version")?);
        if version != FORMAT_VERSION {
            return Err(self.format_err(at, format!("unsupported version {version}")));
        }
        let classes = u32::from_le_bytes(self.array("class count")?) as usize;
        let mut class_names = Vec::with_capacity(classes.min(1 << 16));
        for _ in 0..classes {
            class_names.push(self.string("class name")?);
        }
        let [count] = self.array::<1>("modality count")?;
        let mut modalities = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let [id] = self.array::<1>("modality id")?;
            let dim = u32::from_le_bytes(self.array("modality dim")?) as usize;
            let name = self.string("modality name")?;
            modalities.push(ModalityInfo {
                id: ModalityId(id),
                dim,
                name,
            });
        }
        let at = self.offset;
        let record_count = u64::from_le_bytes(self.array("record count")?);
        let header = DatasetHeader {
            version,
            class_names,
            modalities,
            record_count,
        };
        header
            .validate()
            .map_err(|e| self.format_err(at, e.to_string()))?;
        Ok(header)
    }

    fn read_record(&mut self) -> Result<EmbeddingRecord> {
        let start = self.offset;
        let id = self.string("record id")?;
        let at = self.offset;
        let label = u32::from_le_bytes(self.array("label")?) as usize;
        if label >= self.header.num_classes() {
            return Err(self.format_err(at, format!("label {label} out of range")));
        }
        let mut tokens = Vec::with_capacity(self.header.modalities.len());
        for mi in 0..self.header.modalities.len() {
            let dim = self.header.modalities[mi].dim;
            let n = u32::from_le_bytes(self.array("token count")?) as usize;
            let mut raw = vec![0u8; n * dim * 4];
            self.fill(&mut raw, "token values")?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tokens.push(Matrix::from_vec(n, dim, data)?);
        }
        let record = EmbeddingRecord { id, label, tokens };
        if record.token_count() == 0 {
            return Err(self.format_err(start, format!("record `{}` has no tokens", record.id)));
        }
        Ok(record)
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => {
                Err(self.format_err(self.offset, format!("truncated while reading {what}")))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = u16::from_le_bytes(self.array(what)?) as usize;
        let at = self.offset;
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| self.format_err(at, format!("{what} is not utf-8")))
    }

    fn format_err(&self, offset: u64, detail: String) -> MaaError {
        MaaError::Format { offset, detail }
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<EmbeddingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 || self.failed {
            return None;
        }
        self.remaining -= 1;
        let r = self.read_record();
        self.failed = r.is_err();
        Some(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> DatasetHeader {
        DatasetHeader::new(
            vec!["bakery".into(), "cafe".into(), "pizzeria".into()],
            vec![
                ModalityInfo { id: ModalityId::GLOBAL, dim: 4, name: "global".into() },
                ModalityInfo { id: ModalityId::LOCAL, dim: 4, name: "local".into() },
                ModalityInfo { id: ModalityId::TEXT, dim: 3, name: "text".into() },
            ],
        )
    }

    fn tokens(n: usize, d: usize, seed: f32) -> Matrix<f32> {
        let data = (0..n * d).map(|i| seed + i as f32 * 0.25 - 1.0).collect();
        Matrix::from_vec(n, d, data).unwrap()
    }

    fn records() -> Vec<EmbeddingRecord> {
        vec![
            EmbeddingRecord {
                id: "a".into(),
                label: 0,
                tokens: vec![tokens(1, 4, 0.1), tokens(5, 4, 0.2), tokens(2, 3, 0.3)],
            },
            EmbeddingRecord {
                id: "b".into(),
                label: 2,
                tokens: vec![tokens(1, 4, 1.1), tokens(5, 4, -0.2), tokens(0, 3, 0.0)],
            },
            EmbeddingRecord {
                id: "c-ü".into(),
                label: 1,
                tokens: vec![tokens(1, 4, f32::MIN_POSITIVE), tokens(5, 4, 7.0), tokens(4, 3, -0.0)],
            },
        ]
    }

    fn roundtrip(records: &[EmbeddingRecord]) -> (DatasetHeader, Vec<EmbeddingRecord>) {
        let mut buf = Vec::new();
        write_to(&mut buf, &header(), records).unwrap();
        let (h, reader) = DatasetReader::new(buf.as_slice()).unwrap();
        (h, reader.collect::<Result<Vec<_>>>().unwrap())
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let (h, recs) = roundtrip(&[]);
        assert_eq!(h.class_names, header().class_names);
        assert_eq!(h.modalities, header().modalities);
        assert_eq!(h.record_count, 0);
        assert!(recs.is_empty());
    }

    #[test]
    fn records_roundtrip_bit_exact() {
        let original = records();
        let (_, back) = roundtrip(&original);
        assert_eq!(back.len(), 3);
        for (a, b) in original.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.label, b.label);
            for (x, y) in a.tokens.iter().zip(&b.tokens) {
                assert_eq!(x.shape(), y.shape());
                let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(xb, yb);
            }
        }
        assert_eq!(back[1].tokens[2].rows(), 0);
    }

    #[test]
    fn inconsistent_dim_rejected_before_write() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.maae");
        let mut recs = records();
        recs[1].tokens[0] = tokens(1, 5, 0.0);
        let err = write_dataset(&path, &header(), &recs).unwrap_err();
        assert!(matches!(err, MaaError::Validation(_)));
        assert!(!path.exists());
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_to(&mut buf, &header(), &records()).unwrap();
        for cut in [2, 7, 40, buf.len() - 1] {
            let slice = &buf[..cut];
            let err = match DatasetReader::new(slice) {
                Err(e) => e,
                Ok((_, reader)) => reader
                    .collect::<Result<Vec<_>>>()
                    .expect_err("truncated stream must fail"),
            };
            match err {
                MaaError::Format { offset, .. } => assert!(offset <= cut as u64),
                other => panic!("expected format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut buf = Vec::new();
        write_to(&mut buf, &header(), &[]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            DatasetReader::new(bad.as_slice()),
            Err(MaaError::Format { offset: 0, .. })
        ));
        let mut bad = buf;
        bad[4] = 9;
        assert!(matches!(
            DatasetReader::new(bad.as_slice()),
            Err(MaaError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn header_layout_is_byte_exact() {
        let h = DatasetHeader::new(
            vec!["a".into(), "bc".into()],
            vec![ModalityInfo { id: ModalityId(7), dim: 2, name: "x".into() }],
        );
        let rec = EmbeddingRecord {
            id: "r".into(),
            label: 1,
            tokens: vec![Matrix::from_vec(1, 2, vec![1.0f32, -2.0]).unwrap()],
        };
        let mut buf = Vec::new();
        write_to(&mut buf, &h, &[rec]).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"MAAE");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&[1, 0, b'a', 2, 0, b'b', b'c']);
        expected.push(1);
        expected.push(7);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&[1, 0, b'x']);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&[1, 0, b'r']);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn modality_id_parsing() {
        assert_eq!("G".parse::<ModalityId>().unwrap(), ModalityId::GLOBAL);
        assert_eq!("text".parse::<ModalityId>().unwrap(), ModalityId::TEXT);
        assert_eq!("17".parse::<ModalityId>().unwrap(), ModalityId(17));
        assert!("Q".parse::<ModalityId>().is_err());
    }
}
