//! Seeded generators for synthetic scan data. Tests and demos need source
//! archives with realistic structure (writers, partitions, scrambled
//! order) without shipping real scans; everything here is deterministic
//! in the seed.

use crate::formats::{SourceImage, SOURCE_BITMAP_BYTES, SOURCE_SIDE};
use crate::rng::SplitMix64;

/// Random ink blob on the 128x128 grid: a union of two to four filled
/// ellipses near the center. Curved boundaries keep the downsampled
/// grays non-constant and smear the centroid's fractional part, which is
/// what the placement pipeline cares about. Never empty.
pub fn blob_bitmap(rng: &mut SplitMix64) -> Box<[u8; SOURCE_BITMAP_BYTES]> {
    let mut bitmap = Box::new([0u8; SOURCE_BITMAP_BYTES]);
    let ellipses = 2 + rng.next_below(3);
    for _ in 0..ellipses {
        let cx = 40 + rng.next_below(48) as i64;
        let cy = 40 + rng.next_below(48) as i64;
        let rx = (8 + rng.next_below(22)) as f64;
        let ry = (8 + rng.next_below(22)) as f64;
        let r0 = (cy as f64 - ry).floor().max(0.0) as usize;
        let r1 = ((cy as f64 + ry).ceil() as usize).min(SOURCE_SIDE - 1);
        let c0 = (cx as f64 - rx).floor().max(0.0) as usize;
        let c1 = ((cx as f64 + rx).ceil() as usize).min(SOURCE_SIDE - 1);
        for row in r0..=r1 {
            for col in c0..=c1 {
                let dx = (col as i64 - cx) as f64 / rx;
                let dy = (row as i64 - cy) as f64 / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let bit = row * SOURCE_SIDE + col;
                    bitmap[bit / 8] |= 0x80 >> (bit % 8);
                }
            }
        }
    }
    bitmap
}

/// Shape of a synthetic archive. Writers are numbered so the two
/// partitions never share one: test-partition writers count up from
/// `test_writer_base`, the rest from `train_writer_base`.
#[derive(Debug, Clone, Copy)]
pub struct ArchiveSpec {
    pub test_writers: u32,
    pub test_digits_per_writer: u32,
    pub train_writers: u32,
    pub train_digits_per_writer: u32,
    pub test_partition_id: u16,
    pub train_partition_id: u16,
    pub test_writer_base: u32,
    pub train_writer_base: u32,
    pub seed: u64,
}

impl Default for ArchiveSpec {
    fn default() -> Self {
        Self {
            test_writers: 20,
            test_digits_per_writer: 30,
            train_writers: 20,
            train_digits_per_writer: 50,
            test_partition_id: 4,
            train_partition_id: 1,
            test_writer_base: 0,
            train_writer_base: 1000,
            seed: 0,
        }
    }
}

/// Build a scrambled synthetic archive: every writer pens their quota of
/// random blobs with random labels, then the whole sequence is shuffled
/// so grouping by writer is nontrivial, as in the original scans.
/// `source_index` matches the final archive position.
pub fn synthetic_archive(spec: &ArchiveSpec) -> Vec<SourceImage> {
    let mut rng = SplitMix64::new(spec.seed);
    let mut records = Vec::new();
    let pen = |writer: u32, partition: u16, count: u32, rng: &mut SplitMix64| {
        (0..count)
            .map(|_| {
                let label = rng.next_below(10) as u8;
                (writer, partition, label, blob_bitmap(rng))
            })
            .collect::<Vec<_>>()
    };
    for w in 0..spec.test_writers {
        records.extend(pen(
            spec.test_writer_base + w,
            spec.test_partition_id,
            spec.test_digits_per_writer,
            &mut rng,
        ));
    }
    for w in 0..spec.train_writers {
        records.extend(pen(
            spec.train_writer_base + w,
            spec.train_partition_id,
            spec.train_digits_per_writer,
            &mut rng,
        ));
    }
    rng.shuffle(&mut records);
    records
        .into_iter()
        .enumerate()
        .map(|(i, (writer, partition, label, bitmap))| {
            SourceImage::new(writer, partition, label, i as u32, bitmap)
                .expect("labels come from next_below(10)")
        })
        .collect()
}
