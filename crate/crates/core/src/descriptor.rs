//! Identifiers, descriptors, and the descriptor file codecs.
//!
//! Descriptors are stored as `f32` so that the on-disk format round-trips
//! bit-exactly; all arithmetic on them is carried out in `f64`.
//!
//! Binary layout (little-endian):
//!
//! | bytes | field                          |
//! |-------|--------------------------------|
//! | 4     | magic `ASLD`                   |
//! | 4     | `u32` version (= 1)            |
//! | 4     | `u32` dim                      |
//! | 8     | `u64` count                    |
//! | ...   | count × (`u64` id, dim × `f32`) |

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: [u8; 4] = *b"ASLD";
pub const DESCRIPTOR_VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ImageId(pub u64);

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// An embedding vector tagged with the image it was computed from.
///
/// The norm is deliberately left free: it carries the "how much content"
/// signal used by the ratio filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    id: ImageId,
    vec: Vec<f32>,
}

impl Descriptor {
    pub fn new(id: ImageId, vec: Vec<f32>) -> Result<Self> {
        if let Some(index) = vec.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteComponent { id, index });
        }
        Ok(Self { id, vec })
    }

    /// Rounds an `f64` embedding to storage precision.
    pub fn from_f64(id: ImageId, vec: &[f64]) -> Result<Self> {
        Self::new(id, vec.iter().map(|&v| v as f32).collect())
    }

    pub fn id(&self) -> ImageId {
        self.id
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vec
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    /// `latter` is an edited copy of `former` (reference -> copy).
    EditedCopy,
    /// `latter` looks like `former` but is not its edited copy.
    HardNegativeDirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RelationLabel {
    pub kind: RelationKind,
    pub former: ImageId,
    pub latter: ImageId,
}

impl RelationLabel {
    pub fn new(kind: RelationKind, former: ImageId, latter: ImageId) -> Result<Self> {
        if former == latter {
            return Err(Error::config("label", format!("former and latter are both {former}")));
        }
        Ok(Self { kind, former, latter })
    }
}

/// A scored (query, reference) candidate. Higher score = more confident copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query: ImageId,
    pub reference: ImageId,
    pub score: f64,
}

pub fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

/// Euclidean norm.
pub fn norm<T: Copy + Into<f64>>(x: &[T]) -> f64 {
    x.iter()
        .map(|&v| {
            let v: f64 = v.into();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// `‖x_i‖ / ‖x_j‖`, the directed norm ratio `R(x_i -> x_j)`.
pub fn norm_ratio<T: Copy + Into<f64>>(x_i: &[T], x_j: &[T]) -> Result<f64> {
    let denom = norm(x_j);
    if denom == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    Ok(norm(x_i) / denom)
}

/// Cosine similarity. The product terms are commutative and summed in index
/// order, so `cosine_similarity(a, b) == cosine_similarity(b, a)` bit-for-bit.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Checks that all descriptors share `dim`. Offsets refer to where each record
/// would start in the binary format.
fn check_dims(dim: usize, descriptors: &[Descriptor]) -> Result<()> {
    let record = 8 + 4 * dim as u64;
    for (i, d) in descriptors.iter().enumerate() {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                offset: HEADER_LEN + i as u64 * record,
                expected: dim,
                found: d.dim(),
            });
        }
    }
    Ok(())
}

pub fn encode_descriptors(dim: usize, descriptors: &[Descriptor], out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(&DESCRIPTOR_MAGIC)?;
    out.write_all(&DESCRIPTOR_VERSION.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(descriptors.len() as u64).to_le_bytes())?;
    for d in descriptors {
        out.write_all(&d.id.0.to_le_bytes())?;
        for v in &d.vec {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_descriptors(path: &Path, dim: usize, descriptors: &[Descriptor]) -> Result<()> {
    check_dims(dim, descriptors)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    encode_descriptors(dim, descriptors, &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// A decoded descriptor file: the header dimension plus its records.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub descriptors: Vec<Descriptor>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        if end > self.bytes.len() {
            return Err(Error::TruncatedFile {
                offset: self.pos as u64,
                needed: (end - self.bytes.len()) as u64,
            });
        }
        let mut buf = [0u8; N];
        buf.copy_from_slice(&self.bytes[self.pos..end]);
        self.pos = end;
        Ok(buf)
    }
}

/// Decodes the binary format. When `expected_dim` is given, a different header
/// dimension is rejected.
pub fn decode_descriptors(bytes: &[u8], expected_dim: Option<usize>) -> Result<DescriptorSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take::<4>()?;
    if magic != DESCRIPTOR_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            expected: DESCRIPTOR_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(cur.take()?);
    if version != DESCRIPTOR_VERSION {
        return Err(Error::VersionMismatch {
            offset: 4,
            expected: DESCRIPTOR_VERSION,
            found: version,
        });
    }
    let dim = u32::from_le_bytes(cur.take()?) as usize;
    if let Some(expected) = expected_dim {
        if dim != expected {
            return Err(Error::DimensionMismatch {
                offset: 8,
                expected,
                found: dim,
            });
        }
    }
    let count = u64::from_le_bytes(cur.take()?);
    let mut descriptors = Vec::with_capacity(count.min(1 << 20) as usize);
    for _ in 0..count {
        let record_start = cur.pos as u64;
        let id = ImageId(u64::from_le_bytes(cur.take()?));
        let mut vec = Vec::with_capacity(dim);
        for _ in 0..dim {
            vec.push(f32::from_le_bytes(cur.take()?));
        }
        let d = Descriptor::new(id, vec).map_err(|e| match e {
            Error::NonFiniteComponent { id, index } => Error::parse(
                "<descriptors>",
                0,
                format!(
                    "non-finite component {index} of descriptor {id} at byte offset {}",
                    record_start + 8 + 4 * index as u64
                ),
            ),
            other => other,
        })?;
        descriptors.push(d);
    }
    Ok(DescriptorSet { dim, descriptors })
}

pub fn read_descriptors(path: &Path, expected_dim: Option<usize>) -> Result<DescriptorSet> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_descriptors(&bytes, expected_dim).map_err(|e| match e {
        Error::Parse { line, message, .. } => Error::parse(path, line, message),
        other => other,
    })
}

/// Debug-friendly CSV with header `id,v0,...,v{d-1}`. `f32` values are printed
/// in shortest round-trip form.
pub fn write_descriptors_csv(path: &Path, dim: usize, descriptors: &[Descriptor]) -> Result<()> {
    check_dims(dim, descriptors)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..dim).map(|i| format!("v{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for d in descriptors {
        let row: Vec<String> = std::iter::once(d.id.to_string())
            .chain(d.vec.iter().map(|v| v.to_string()))
            .collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_descriptors_csv(path: &Path) -> Result<DescriptorSet> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("id") {
        return Err(Error::parse(path, 1, "header must start with `id`"));
    }
    let dim = header.len() - 1;
    for (i, name) in header.iter().skip(1).enumerate() {
        if name != format!("v{i}") {
            return Err(Error::parse(path, 1, format!("expected column v{i}, found {name}")));
        }
    }
    let mut descriptors = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[0]
            .parse::<u64>()
            .map_err(|e| Error::parse(path, line, format!("bad id: {e}")))?;
        let vec = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, line, format!("bad component: {e}")))?;
        descriptors.push(Descriptor::new(ImageId(id), vec).map_err(|e| Error::parse(path, line, e.to_string()))?);
    }
    Ok(DescriptorSet { dim, descriptors })
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(id: u64, v: &[f32]) -> Descriptor {
        Descriptor::new(ImageId(id), v.to_vec()).unwrap()
    }

    #[test]
    fn norm_examples() {
        assert_eq!(norm(&[3.0f64, 4.0]), 5.0);
        assert_eq!(norm(&[0.0f64; 17]), 0.0);
        assert_eq!(norm(&[1.0f64, 1.0, 1.0, 1.0]), 2.0);
    }

    #[test]
    fn norm_ratio_examples() {
        assert_eq!(norm_ratio(&[0.0f64, 2.0], &[1.0, 0.0]).unwrap(), 2.0);
        let x = [0.3f64, -1.7, 2.2];
        assert_eq!(norm_ratio(&x, &x).unwrap(), 1.0);
        assert!(matches!(norm_ratio(&[1.0f64], &[0.0]), Err(Error::ZeroNormDenominator)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[2.0f64, 0.0], &[5.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[-3.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn non_finite_components_rejected() {
        let err = Descriptor::new(ImageId(3), vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteComponent { index: 1, .. }));
        assert!(Descriptor::new(ImageId(3), vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn codec_empty_keeps_dim() {
        let mut buf = Vec::new();
        encode_descriptors(12, &[], &mut buf).unwrap();
        let set = decode_descriptors(&buf, None).unwrap();
        assert_eq!(set.dim, 12);
        assert!(set.descriptors.is_empty());
    }

    #[test]
    fn codec_single_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.asld");
        let items = vec![d(7, &[1.5, -2.0])];
        write_descriptors(&path, 2, &items).unwrap();
        let set = read_descriptors(&path, Some(2)).unwrap();
        assert_eq!(set.descriptors, items);
        // 20-byte header + 8-byte id + 2 f32
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 36);
    }

    #[test]
    fn codec_errors_name_offsets() {
        let mut buf = Vec::new();
        encode_descriptors(2, &[d(1, &[1.0, 2.0])], &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_descriptors(&bad, None),
            Err(Error::BadMagic { offset: 0, .. })
        ));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_descriptors(&bad, None),
            Err(Error::VersionMismatch {
                offset: 4,
                found: 2,
                ..
            })
        ));

        assert!(matches!(
            decode_descriptors(&buf, Some(3)),
            Err(Error::DimensionMismatch {
                offset: 8,
                expected: 3,
                found: 2
            })
        ));

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            decode_descriptors(cut, None),
            Err(Error::TruncatedFile { offset: 32, needed: 3 })
        ));
    }

    #[test]
    fn write_rejects_mixed_dims() {
        let dir = tempfile::tempdir().unwrap();
        let items = vec![d(1, &[1.0, 2.0]), d(2, &[1.0])];
        let err = write_descriptors(&dir.path().join("x.asld"), 2, &items).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { offset: 36, .. }));
    }

    #[test]
    fn csv_fallback_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let items = vec![d(9, &[0.1, -3.25e-7, 1e30]), d(2, &[0.0, 1.0, -1.0])];
        write_descriptors_csv(&path, 3, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,v0,v1,v2\n"));
        assert_eq!(read_descriptors_csv(&path).unwrap().descriptors, items);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..16).prop_filter("nonzero", |v| norm(v) > 1e-6)
    }

    proptest! {
        #[test]
        fn ratio_reciprocity(a in nonzero_vec(), b in nonzero_vec()) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            prop_assume!(norm(a) > 1e-6 && norm(b) > 1e-6);
            let p = norm_ratio(a, b).unwrap() * norm_ratio(b, a).unwrap();
            prop_assert!((p - 1.0).abs() < 1e-9);
            if (norm(a) - norm(b)).abs() > 1e-9 {
                prop_assert!(norm_ratio(a, b).unwrap() != norm_ratio(b, a).unwrap());
            }
        }

        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in nonzero_vec(), b in nonzero_vec(), s in 0.01f64..100.0
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (&a[..n], &b[..n]);
            prop_assume!(norm(a) > 1e-6 && norm(b) > 1e-6);
            let ab = cosine_similarity(a, b).unwrap();
            prop_assert_eq!(ab.to_bits(), cosine_similarity(b, a).unwrap().to_bits());
            let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
            prop_assert!((cosine_similarity(&scaled, b).unwrap() - ab).abs() < 1e-9);
            prop_assert!(ab.abs() <= 1.0 + 1e-12);
        }

        #[test]
        fn binary_codec_bit_exact(
            rows in prop::collection::vec(
                (any::<u64>(), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 4)),
                0..8,
            )
        ) {
            let items: Vec<Descriptor> = rows
                .into_iter()
                .map(|(id, v)| Descriptor::new(ImageId(id), v).unwrap())
                .collect();
            let mut buf = Vec::new();
            encode_descriptors(4, &items, &mut buf).unwrap();
            let back = decode_descriptors(&buf, Some(4)).unwrap();
            prop_assert_eq!(back.descriptors.len(), items.len());
            for (x, y) in back.descriptors.iter().zip(&items) {
                prop_assert_eq!(x.id(), y.id());
                let xb: Vec<u32> = x.as_slice().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.as_slice().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }
}
