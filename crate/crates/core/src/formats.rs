//! IDX tensor files and the NBIN source-archive container.
//!
//! IDX is the big-endian tensor format MNIST-style datasets ship in:
//! `00 00 <dtype> <ndims>`, then `ndims` big-endian u32 sizes, then the
//! row-major payload. Only the two codes that occur in such distributions
//! are accepted: `0x08` (unsigned byte) and `0x0C` (big-endian signed
//! 32-bit). Files read through [`read_idx_file`] may be gzip-wrapped; the
//! `1f 8b` prefix is detected and decompressed transparently.
//!
//! NBIN is a deliberately small stand-in for the real NIST scan containers:
//! ASCII magic `NBIN1\n`, a big-endian u32 record count, then fixed-size
//! records of (writer id, partition id, label, reserved byte, 2048 bytes of
//! 1-bit 128x128 raster packed row-major, most significant bit first).

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use thiserror::Error;

use crate::preprocess::Digit28;

/// IDX element-type code for unsigned 8-bit data.
pub const IDX_DTYPE_U8: u8 = 0x08;
/// IDX element-type code for big-endian signed 32-bit data.
pub const IDX_DTYPE_I32: u8 = 0x0c;

const IDX_MAX_DIMS: usize = 4;

const NBIN_MAGIC: &[u8; 6] = b"NBIN1\n";

/// Side length of a source scan.
pub const SOURCE_SIDE: usize = 128;
/// Packed size of one source bitmap: 128*128 bits.
pub const SOURCE_BITMAP_BYTES: usize = SOURCE_SIDE * SOURCE_SIDE / 8;

/// Columns of the `[N,6]` metadata tensor, in order.
pub const METADATA_COLUMNS: [&str; 6] = [
    "class",
    "partition_id",
    "writer_id",
    "writer_local_index",
    "source_index",
    "duplicate_flag",
];

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("truncated stream")]
    Truncated,
    #[error("bad magic: expected {expected}, found {found}")]
    BadMagic { expected: String, found: String },
    #[error("unknown IDX dtype code 0x{0:02x}")]
    UnknownDtype(u8),
    #[error("IDX dimension count {0} exceeds the supported maximum of 4")]
    TooManyDims(u8),
    #[error("tensor size overflows addressable memory")]
    SizeOverflow,
    #[error("dims {dims:?} imply {expected} elements but buffer holds {actual}")]
    ElementCountMismatch {
        dims: Vec<u32>,
        expected: usize,
        actual: usize,
    },
    #[error("record {index}: label {label} outside 0-9")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("value {0} does not fit the metadata column type")]
    MetadataOverflow(i64),
    #[error("bundle sequences disagree in length: {images} images, {labels} labels, {metadata} metadata rows")]
    BundleLengthMismatch {
        images: usize,
        labels: usize,
        metadata: usize,
    },
    #[error("metadata class {meta} disagrees with label {label} at row {index}")]
    BundleClassMismatch { index: usize, meta: u8, label: u8 },
    #[error("tensor shape {dims:?} is not the expected {expected}")]
    UnexpectedShape { dims: Vec<u32>, expected: String },
}

fn map_eof(e: io::Error) -> FormatError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        FormatError::Truncated
    } else {
        FormatError::Io(e)
    }
}

/// Flat element buffer of an [`IdxTensor`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxData {
    U8(Vec<u8>),
    I32(Vec<i32>),
}

impl IdxData {
    pub fn len(&self) -> usize {
        match self {
            IdxData::U8(v) => v.len(),
            IdxData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            IdxData::U8(_) => IDX_DTYPE_U8,
            IdxData::I32(_) => IDX_DTYPE_I32,
        }
    }
}

/// An in-memory IDX tensor: dtype, dimensions, row-major payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    dims: Vec<u32>,
    data: IdxData,
}

impl IdxTensor {
    pub fn new(dims: Vec<u32>, data: IdxData) -> Result<Self, FormatError> {
        if dims.len() > IDX_MAX_DIMS {
            return Err(FormatError::TooManyDims(dims.len() as u8));
        }
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(FormatError::ElementCountMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_u8(dims: Vec<u32>, data: Vec<u8>) -> Result<Self, FormatError> {
        Self::new(dims, IdxData::U8(data))
    }

    pub fn from_i32(dims: Vec<u32>, data: Vec<i32>) -> Result<Self, FormatError> {
        Self::new(dims, IdxData::I32(data))
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &IdxData {
        &self.data
    }

    pub fn dtype_code(&self) -> u8 {
        self.data.dtype_code()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            IdxData::U8(v) => Some(v),
            IdxData::I32(_) => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match &self.data {
            IdxData::I32(v) => Some(v),
            IdxData::U8(_) => None,
        }
    }

    /// Slice `count` entries along the first dimension starting at `start`,
    /// clamped to the tensor's extent.
    pub fn slice_first_dim(&self, start: usize, count: usize) -> Result<Self, FormatError> {
        let n = *self.dims.first().unwrap_or(&0) as usize;
        let start = start.min(n);
        let count = count.min(n - start);
        let stride: usize = self.dims[1..]
            .iter()
            .map(|&d| d as usize)
            .product::<usize>()
            .max(1);
        let lo = start * stride;
        let hi = (start + count) * stride;
        let mut dims = self.dims.clone();
        dims[0] = count as u32;
        let data = match &self.data {
            IdxData::U8(v) => IdxData::U8(v[lo..hi].to_vec()),
            IdxData::I32(v) => IdxData::I32(v[lo..hi].to_vec()),
        };
        Self::new(dims, data)
    }
}

fn element_count(dims: &[u32]) -> Result<usize, FormatError> {
    let mut count: usize = 1;
    for &d in dims {
        count = count
            .checked_mul(d as usize)
            .ok_or(FormatError::SizeOverflow)?;
    }
    Ok(count)
}

fn read_u32_be(r: &mut impl Read) -> Result<u32, FormatError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(map_eof)?;
    Ok(u32::from_be_bytes(buf))
}

fn read_u16_be(r: &mut impl Read) -> Result<u16, FormatError> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf).map_err(map_eof)?;
    Ok(u16::from_be_bytes(buf))
}

/// Read one IDX tensor, consuming exactly the header plus payload bytes.
pub fn read_idx(r: &mut impl Read) -> Result<IdxTensor, FormatError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic[0] != 0 || magic[1] != 0 {
        return Err(FormatError::BadMagic {
            expected: "00 00 <dtype> <ndims>".to_string(),
            found: format!("{:02x} {:02x} {:02x} {:02x}", magic[0], magic[1], magic[2], magic[3]),
        });
    }
    let dtype = magic[2];
    let ndims = magic[3];
    if ndims as usize > IDX_MAX_DIMS {
        return Err(FormatError::TooManyDims(ndims));
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        dims.push(read_u32_be(r)?);
    }
    let count = element_count(&dims)?;
    let data = match dtype {
        IDX_DTYPE_U8 => {
            let mut buf = vec![0u8; count];
            r.read_exact(&mut buf).map_err(map_eof)?;
            IdxData::U8(buf)
        }
        IDX_DTYPE_I32 => {
            let byte_len = count.checked_mul(4).ok_or(FormatError::SizeOverflow)?;
            let mut buf = vec![0u8; byte_len];
            r.read_exact(&mut buf).map_err(map_eof)?;
            IdxData::I32(
                buf.chunks_exact(4)
                    .map(|c| i32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        other => return Err(FormatError::UnknownDtype(other)),
    };
    IdxTensor::new(dims, data)
}

/// Parse an IDX tensor from a byte slice.
pub fn read_idx_bytes(bytes: &[u8]) -> Result<IdxTensor, FormatError> {
    read_idx(&mut io::Cursor::new(bytes))
}

/// Write the canonical encoding of a tensor. The encoding is a pure
/// function of the tensor value; `read_idx` inverts it exactly.
pub fn write_idx(t: &IdxTensor, w: &mut impl Write) -> Result<(), FormatError> {
    w.write_all(&[0, 0, t.dtype_code(), t.dims().len() as u8])?;
    for &d in t.dims() {
        w.write_all(&d.to_be_bytes())?;
    }
    match t.data() {
        IdxData::U8(v) => w.write_all(v)?,
        IdxData::I32(v) => {
            for &x in v {
                w.write_all(&x.to_be_bytes())?;
            }
        }
    }
    Ok(())
}

/// Canonical encoding as a byte vector.
pub fn write_idx_bytes(t: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_idx(t, &mut out).expect("writing to Vec cannot fail");
    out
}

/// Read an IDX file, decompressing transparently when the gzip `1f 8b`
/// prefix is present.
pub fn read_idx_file(path: impl AsRef<Path>) -> Result<IdxTensor, FormatError> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut decoded)?;
        read_idx_bytes(&decoded)
    } else {
        read_idx_bytes(&raw)
    }
}

/// Write an IDX file; paths ending in `.gz` are gzip-compressed.
pub fn write_idx_file(path: impl AsRef<Path>, t: &IdxTensor) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = write_idx_bytes(t);
    if path.extension().map(|e| e == "gz").unwrap_or(false) {
        let file = fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// A 128x128 1-bit scan with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub writer_id: u32,
    pub partition_id: u16,
    pub label: u8,
    /// Position of the record in its archive; unique within one archive.
    pub source_index: u32,
    bitmap: Box<[u8; SOURCE_BITMAP_BYTES]>,
}

impl SourceImage {
    pub fn new(
        writer_id: u32,
        partition_id: u16,
        label: u8,
        source_index: u32,
        bitmap: Box<[u8; SOURCE_BITMAP_BYTES]>,
    ) -> Result<Self, FormatError> {
        if label > 9 {
            return Err(FormatError::LabelOutOfRange {
                index: source_index as usize,
                label,
            });
        }
        Ok(Self {
            writer_id,
            partition_id,
            label,
            source_index,
            bitmap,
        })
    }

    /// Packed row-major bitmap, MSB-first within each byte.
    pub fn bitmap_bytes(&self) -> &[u8; SOURCE_BITMAP_BYTES] {
        &self.bitmap
    }

    /// True when the pixel at (row, col) is ink.
    pub fn ink_at(&self, row: usize, col: usize) -> bool {
        debug_assert!(row < SOURCE_SIDE && col < SOURCE_SIDE);
        let bit = row * SOURCE_SIDE + col;
        self.bitmap[bit / 8] & (0x80 >> (bit % 8)) != 0
    }

    /// Pack an unpacked 0/1 raster (row-major, 128*128 entries).
    pub fn pack_bitmap(pixels: &[u8]) -> Box<[u8; SOURCE_BITMAP_BYTES]> {
        assert_eq!(pixels.len(), SOURCE_SIDE * SOURCE_SIDE);
        let mut packed = Box::new([0u8; SOURCE_BITMAP_BYTES]);
        for (i, &p) in pixels.iter().enumerate() {
            if p != 0 {
                packed[i / 8] |= 0x80 >> (i % 8);
            }
        }
        packed
    }
}

/// Read an NBIN archive. Records come back in archive order with
/// `source_index` assigned 0, 1, 2, ... in that order.
pub fn read_source_archive(r: &mut impl Read) -> Result<Vec<SourceImage>, FormatError> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if &magic != NBIN_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(NBIN_MAGIC).trim_end().to_string(),
            found: format!("{:02x?}", magic),
        });
    }
    let count = read_u32_be(r)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 20));
    for index in 0..count {
        let writer_id = read_u32_be(r)?;
        let partition_id = read_u16_be(r)?;
        let mut tail = [0u8; 2];
        r.read_exact(&mut tail).map_err(map_eof)?;
        let label = tail[0];
        if label > 9 {
            return Err(FormatError::LabelOutOfRange { index, label });
        }
        let mut bitmap = Box::new([0u8; SOURCE_BITMAP_BYTES]);
        r.read_exact(bitmap.as_mut_slice()).map_err(map_eof)?;
        records.push(SourceImage {
            writer_id,
            partition_id,
            label,
            source_index: index as u32,
            bitmap,
        });
    }
    Ok(records)
}

/// Read an NBIN archive from disk (gzip sniffed like IDX files).
pub fn read_source_archive_file(path: impl AsRef<Path>) -> Result<Vec<SourceImage>, FormatError> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut decoded = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut decoded)?;
        read_source_archive(&mut io::Cursor::new(&decoded))
    } else {
        read_source_archive(&mut io::Cursor::new(&raw))
    }
}

/// Write an NBIN archive. Records are written in slice order; their stored
/// `source_index` values are ignored (readers re-derive them from position).
pub fn write_source_archive(
    records: &[SourceImage],
    w: &mut impl Write,
) -> Result<(), FormatError> {
    w.write_all(NBIN_MAGIC)?;
    w.write_all(&(records.len() as u32).to_be_bytes())?;
    for rec in records {
        w.write_all(&rec.writer_id.to_be_bytes())?;
        w.write_all(&rec.partition_id.to_be_bytes())?;
        w.write_all(&[rec.label, 0])?;
        w.write_all(rec.bitmap.as_slice())?;
    }
    Ok(())
}

/// Per-digit provenance carried alongside every output image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DigitMeta {
    pub class: u8,
    pub partition_id: u16,
    pub writer_id: u32,
    /// Position of the digit among its writer's records, archive order.
    pub writer_local_index: u32,
    pub source_index: u32,
    /// Set when this digit's bitmap also occurred elsewhere in the archive
    /// (this is the kept, earliest copy).
    pub duplicate_flag: bool,
}

/// Aligned images, labels and metadata; the unit the recipe emits and the
/// matcher and evaluators consume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetBundle {
    images: Vec<Digit28>,
    labels: Vec<u8>,
    metadata: Vec<DigitMeta>,
}

impl DatasetBundle {
    pub fn new(
        images: Vec<Digit28>,
        labels: Vec<u8>,
        metadata: Vec<DigitMeta>,
    ) -> Result<Self, FormatError> {
        if images.len() != labels.len() || labels.len() != metadata.len() {
            return Err(FormatError::BundleLengthMismatch {
                images: images.len(),
                labels: labels.len(),
                metadata: metadata.len(),
            });
        }
        for (i, (m, &l)) in metadata.iter().zip(&labels).enumerate() {
            if m.class != l {
                return Err(FormatError::BundleClassMismatch {
                    index: i,
                    meta: m.class,
                    label: l,
                });
            }
        }
        Ok(Self {
            images,
            labels,
            metadata,
        })
    }

    /// Wrap bare images and labels, synthesizing placeholder metadata.
    /// Useful for datasets (like the original distribution) that ship
    /// without provenance.
    pub fn from_images_labels(images: Vec<Digit28>, labels: Vec<u8>) -> Result<Self, FormatError> {
        let metadata = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| DigitMeta {
                class: l,
                partition_id: 0,
                writer_id: 0,
                writer_local_index: 0,
                source_index: i as u32,
                duplicate_flag: false,
            })
            .collect();
        Self::new(images, labels, metadata)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Digit28] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn metadata(&self) -> &[DigitMeta] {
        &self.metadata
    }

    pub fn images_tensor(&self) -> IdxTensor {
        let mut data = Vec::with_capacity(self.images.len() * 784);
        for img in &self.images {
            data.extend_from_slice(img.as_bytes());
        }
        IdxTensor::from_u8(vec![self.images.len() as u32, 28, 28], data)
            .expect("bundle images always form a valid tensor")
    }

    pub fn labels_tensor(&self) -> IdxTensor {
        IdxTensor::from_u8(vec![self.labels.len() as u32], self.labels.clone())
            .expect("bundle labels always form a valid tensor")
    }

    pub fn metadata_tensor(&self) -> Result<IdxTensor, FormatError> {
        let mut data = Vec::with_capacity(self.metadata.len() * 6);
        for m in &self.metadata {
            data.push(i32::from(m.class));
            data.push(i32::from(m.partition_id));
            data.push(to_i32(i64::from(m.writer_id))?);
            data.push(to_i32(i64::from(m.writer_local_index))?);
            data.push(to_i32(i64::from(m.source_index))?);
            data.push(i32::from(m.duplicate_flag));
        }
        IdxTensor::from_i32(vec![self.metadata.len() as u32, 6], data)
    }

    /// Rebuild a bundle from its three tensors.
    pub fn from_tensors(
        images: &IdxTensor,
        labels: &IdxTensor,
        metadata: Option<&IdxTensor>,
    ) -> Result<Self, FormatError> {
        let image_data = expect_images(images)?;
        let n = images.dims()[0] as usize;
        let label_data = labels.as_u8().ok_or_else(|| FormatError::UnexpectedShape {
            dims: labels.dims().to_vec(),
            expected: "[N] u8".to_string(),
        })?;
        if labels.dims().len() != 1 || label_data.len() != n {
            return Err(FormatError::UnexpectedShape {
                dims: labels.dims().to_vec(),
                expected: format!("[{n}] u8"),
            });
        }
        let mut imgs = Vec::with_capacity(n);
        for chunk in image_data.chunks_exact(784) {
            imgs.push(Digit28::from_raw(chunk.try_into().expect("chunk is 784 bytes")));
        }
        match metadata {
            Some(meta) => {
                let rows = expect_metadata(meta, n)?;
                Self::new(imgs, label_data.to_vec(), rows)
            }
            None => Self::from_images_labels(imgs, label_data.to_vec()),
        }
    }

    /// Emit the three IDX files for this bundle under `dir` with the given
    /// stem, e.g. `train-images-idx3-ubyte`. Gzip when `gzip` is set.
    pub fn write_idx_files(
        &self,
        dir: impl AsRef<Path>,
        stem: &str,
        gzip: bool,
    ) -> Result<Vec<std::path::PathBuf>, FormatError> {
        let dir = dir.as_ref();
        let suffix = if gzip { ".gz" } else { "" };
        let paths = [
            dir.join(format!("{stem}-images-idx3-ubyte{suffix}")),
            dir.join(format!("{stem}-labels-idx1-ubyte{suffix}")),
            dir.join(format!("{stem}-metadata-idx2-int{suffix}")),
        ];
        write_idx_file(&paths[0], &self.images_tensor())?;
        write_idx_file(&paths[1], &self.labels_tensor())?;
        write_idx_file(&paths[2], &self.metadata_tensor()?)?;
        Ok(paths.to_vec())
    }
}

fn to_i32(v: i64) -> Result<i32, FormatError> {
    i32::try_from(v).map_err(|_| FormatError::MetadataOverflow(v))
}

fn expect_images(t: &IdxTensor) -> Result<&[u8], FormatError> {
    let ok = t.dims().len() == 3 && t.dims()[1] == 28 && t.dims()[2] == 28;
    match (ok, t.as_u8()) {
        (true, Some(data)) => Ok(data),
        _ => Err(FormatError::UnexpectedShape {
            dims: t.dims().to_vec(),
            expected: "[N,28,28] u8".to_string(),
        }),
    }
}

fn expect_metadata(t: &IdxTensor, n: usize) -> Result<Vec<DigitMeta>, FormatError> {
    let ok = t.dims().len() == 2 && t.dims()[0] as usize == n && t.dims()[1] == 6;
    let data = match (ok, t.as_i32()) {
        (true, Some(data)) => data,
        _ => {
            return Err(FormatError::UnexpectedShape {
                dims: t.dims().to_vec(),
                expected: format!("[{n},6] i32"),
            })
        }
    };
    let mut rows = Vec::with_capacity(n);
    for row in data.chunks_exact(6) {
        rows.push(DigitMeta {
            class: u8::try_from(row[0]).map_err(|_| FormatError::MetadataOverflow(row[0].into()))?,
            partition_id: u16::try_from(row[1])
                .map_err(|_| FormatError::MetadataOverflow(row[1].into()))?,
            writer_id: u32::try_from(row[2])
                .map_err(|_| FormatError::MetadataOverflow(row[2].into()))?,
            writer_local_index: u32::try_from(row[3])
                .map_err(|_| FormatError::MetadataOverflow(row[3].into()))?,
            source_index: u32::try_from(row[4])
                .map_err(|_| FormatError::MetadataOverflow(row[4].into()))?,
            duplicate_flag: row[5] != 0,
        });
    }
    Ok(rows)
}

/// Find bit-identical bitmaps. Each later occurrence is reported against the
/// first (kept) one, as `(later_source_index, earlier_source_index)`.
pub fn find_duplicate_bitmaps(records: &[SourceImage]) -> Vec<(u32, u32)> {
    let mut seen: HashMap<&[u8], u32> = HashMap::with_capacity(records.len());
    let mut dups = Vec::new();
    for rec in records {
        match seen.entry(rec.bitmap_bytes().as_slice()) {
            std::collections::hash_map::Entry::Occupied(e) => {
                dups.push((rec.source_index, *e.get()));
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(rec.source_index);
            }
        }
    }
    dups
}
