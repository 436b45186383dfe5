//! Dataset assembly: turn a scrambled source archive into paired training
//! and test bundles.
//!
//! The recipe: group the test-partition records by writer, split the
//! writers into two halves, and let each half seed one output set. Both
//! sets are then completed from the training-partition records, scanned
//! in archive order from a configurable offset. Writer-seeded records
//! land at even output positions (in seeded-shuffle order) and completion
//! records at odd positions (in scan order); when either pool runs dry
//! the other fills the remaining slots. Duplicate bitmaps are dropped
//! before any counting, keeping the earliest copy.
//!
//! Planning is single-threaded because every ordering decision must be
//! reproducible; only the per-digit preprocessing fans out, and results
//! are gathered by plan position.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::{
    find_duplicate_bitmaps, DatasetBundle, DigitMeta, FormatError, SourceImage,
};
use crate::preprocess::{preprocess_digit, CropConfig, PreprocessError, ResampleConfig};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("archive exhausted filling the {set} set: needed {needed} more records, {available} available")]
    ArchiveExhausted {
        set: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("preprocessing failed on source record {source_index}: {source}")]
    Preprocess {
        source_index: u32,
        source: PreprocessError,
    },
    #[error("bad permutation: {0}")]
    BadPermutation(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("cannot read permutation file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse permutation file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Knobs of the assembly recipe. Completion offsets index into the
/// sequence of training-partition records in archive order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub writer_split_count: usize,
    pub train_completion_start: usize,
    pub test_completion_start: usize,
    pub target_size: usize,
    pub shuffle_seed: u64,
    /// JSON file with explicit seed orderings, overriding the seeded
    /// shuffle: `{"train": [...], "test": [...]}`.
    pub permutation_file: Option<PathBuf>,
    /// Partition whose records carry the writer split.
    pub test_partition_id: u16,
}

impl Default for RecipeConfig {
    fn default() -> Self {
        Self {
            writer_split_count: 250,
            train_completion_start: 0,
            test_completion_start: 35_000,
            target_size: 60_000,
            shuffle_seed: 0,
            permutation_file: None,
            test_partition_id: 4,
        }
    }
}

/// One writer's records; `positions` index the sequence the grouping ran
/// over and keep their original order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriterGroup {
    pub writer_id: u32,
    pub positions: Vec<usize>,
}

/// Group records by ascending writer id, preserving archive order within
/// each group.
pub fn unscramble_by_writer(records: &[SourceImage]) -> Vec<WriterGroup> {
    group_by_writer((0..records.len()).collect(), |i| records[i].writer_id)
}

fn group_by_writer(positions: Vec<usize>, writer_of: impl Fn(usize) -> u32) -> Vec<WriterGroup> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for p in positions {
        map.entry(writer_of(p)).or_default().push(p);
    }
    map.into_iter()
        .map(|(writer_id, positions)| WriterGroup {
            writer_id,
            positions,
        })
        .collect()
}

/// Split writer groups into the k lowest writer ids and the rest.
pub fn split_writers(
    groups: Vec<WriterGroup>,
    k: usize,
) -> Result<(Vec<WriterGroup>, Vec<WriterGroup>), AssembleError> {
    if k > groups.len() {
        return Err(AssembleError::InvalidConfig(format!(
            "writer split {k} exceeds the {} writers present",
            groups.len()
        )));
    }
    let mut first = groups;
    let second = first.split_off(k);
    Ok((first, second))
}

/// Bit-identical bitmap pairs as (later_source_index, kept_source_index).
pub fn find_duplicates(records: &[SourceImage]) -> Vec<(u32, u32)> {
    find_duplicate_bitmaps(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    /// (dropped_source_index, kept_source_index) pairs.
    pub duplicates_removed: Vec<(u32, u32)>,
    pub train_class_counts: [u64; 10],
    pub test_class_counts: [u64; 10],
    pub train_writer_histogram: BTreeMap<u32, u64>,
    pub test_writer_histogram: BTreeMap<u32, u64>,
}

#[derive(Debug, Deserialize)]
struct PermutationSpec {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn validate_permutation(perm: &[usize], n: usize, which: &str) -> Result<(), AssembleError> {
    if perm.len() != n {
        return Err(AssembleError::BadPermutation(format!(
            "{which} permutation has {} entries, {n} writer-seeded records",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(AssembleError::BadPermutation(format!(
                "{which} permutation is not a bijection on 0..{n}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Draw-by-need interleave: even slots prefer the shuffled writer seeds,
/// odd slots the completion scan; an empty pool hands its slots to the
/// other.
fn plan_set(
    seeds: &[usize],
    pool: &[usize],
    start: usize,
    target: usize,
    used: &mut [bool],
    set: &'static str,
) -> Result<Vec<usize>, AssembleError> {
    let mut plan = Vec::with_capacity(target);
    let mut next_seed = 0;
    let mut cursor = start;
    let take_completion = |cursor: &mut usize, used: &mut [bool]| -> Option<usize> {
        while *cursor < pool.len() && used[pool[*cursor]] {
            *cursor += 1;
        }
        let pos = *cursor < pool.len();
        pos.then(|| {
            let p = pool[*cursor];
            *cursor += 1;
            p
        })
    };
    for slot in 0..target {
        let seed_first = slot % 2 == 0;
        let pick = if seed_first && next_seed < seeds.len() {
            next_seed += 1;
            Some(seeds[next_seed - 1])
        } else {
            take_completion(&mut cursor, used).or_else(|| {
                (next_seed < seeds.len()).then(|| {
                    next_seed += 1;
                    seeds[next_seed - 1]
                })
            })
        };
        match pick {
            Some(p) => {
                used[p] = true;
                plan.push(p);
            }
            None => {
                return Err(AssembleError::ArchiveExhausted {
                    set,
                    needed: target - slot,
                    available: 0,
                })
            }
        }
    }
    if next_seed < seeds.len() {
        return Err(AssembleError::InvalidConfig(format!(
            "{} writer-seeded records do not fit the {target} {set} slots ({} left over); raise target_size",
            seeds.len(),
            seeds.len() - next_seed
        )));
    }
    Ok(plan)
}

/// Run the full recipe over an in-memory archive.
pub fn assemble(
    archive: &[SourceImage],
    cfg: &RecipeConfig,
    crop_cfg: &CropConfig,
    res_cfg: &ResampleConfig,
) -> Result<(DatasetBundle, DatasetBundle, AssemblyReport), AssembleError> {
    if cfg.target_size == 0 || cfg.writer_split_count == 0 {
        return Err(AssembleError::InvalidConfig(
            "target_size and writer_split_count must be positive".into(),
        ));
    }

    // Duplicates drop out everywhere before any counting; the earliest
    // copy stays and is flagged in the metadata.
    let mut drop = vec![false; archive.len()];
    let mut kept_of_pair = vec![false; archive.len()];
    {
        let mut seen: HashMap<&[u8], usize> = HashMap::with_capacity(archive.len());
        for (i, rec) in archive.iter().enumerate() {
            match seen.entry(rec.bitmap_bytes().as_slice()) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    drop[i] = true;
                    kept_of_pair[*e.get()] = true;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(i);
                }
            }
        }
    }
    let duplicates_removed = find_duplicate_bitmaps(archive);

    // Occurrence index of each record within its writer's output, for the
    // metadata. Counted over kept records only.
    let mut writer_local = vec![0u32; archive.len()];
    {
        let mut counts: HashMap<u32, u32> = HashMap::new();
        for (i, rec) in archive.iter().enumerate() {
            if drop[i] {
                continue;
            }
            let c = counts.entry(rec.writer_id).or_insert(0);
            writer_local[i] = *c;
            *c += 1;
        }
    }

    let test_positions: Vec<usize> = (0..archive.len())
        .filter(|&i| !drop[i] && archive[i].partition_id == cfg.test_partition_id)
        .collect();
    let groups = group_by_writer(test_positions, |i| archive[i].writer_id);
    let (first_half, second_half) = split_writers(groups, cfg.writer_split_count)?;
    let mut train_seeds: Vec<usize> = first_half.iter().flat_map(|g| g.positions.clone()).collect();
    let mut test_seeds: Vec<usize> = second_half.iter().flat_map(|g| g.positions.clone()).collect();

    match &cfg.permutation_file {
        Some(path) => {
            let spec = load_permutation(path)?;
            validate_permutation(&spec.train, train_seeds.len(), "train")?;
            validate_permutation(&spec.test, test_seeds.len(), "test")?;
            train_seeds = spec.train.iter().map(|&p| train_seeds[p]).collect();
            test_seeds = spec.test.iter().map(|&p| test_seeds[p]).collect();
        }
        None => {
            // one stream, halves in a fixed order, so the whole plan hangs
            // off a single seed
            let mut rng = SplitMix64::new(cfg.shuffle_seed);
            rng.shuffle(&mut train_seeds);
            rng.shuffle(&mut test_seeds);
        }
    }

    let pool: Vec<usize> = (0..archive.len())
        .filter(|&i| !drop[i] && archive[i].partition_id != cfg.test_partition_id)
        .collect();

    let mut used = vec![false; archive.len()];
    let train_plan = plan_set(
        &train_seeds,
        &pool,
        cfg.train_completion_start,
        cfg.target_size,
        &mut used,
        "train",
    )?;
    let test_plan = plan_set(
        &test_seeds,
        &pool,
        cfg.test_completion_start,
        cfg.target_size,
        &mut used,
        "test",
    )?;

    let mut report = AssemblyReport {
        duplicates_removed,
        train_class_counts: [0; 10],
        test_class_counts: [0; 10],
        train_writer_histogram: BTreeMap::new(),
        test_writer_histogram: BTreeMap::new(),
    };
    let train = realize(archive, &train_plan, crop_cfg, res_cfg, &kept_of_pair, &writer_local)?;
    let test = realize(archive, &test_plan, crop_cfg, res_cfg, &kept_of_pair, &writer_local)?;
    for m in train.metadata() {
        report.train_class_counts[m.class as usize] += 1;
        *report.train_writer_histogram.entry(m.writer_id).or_insert(0) += 1;
    }
    for m in test.metadata() {
        report.test_class_counts[m.class as usize] += 1;
        *report.test_writer_histogram.entry(m.writer_id).or_insert(0) += 1;
    }
    Ok((train, test, report))
}

/// Preprocess a planned sequence in parallel, then stitch the bundle in
/// plan order.
fn realize(
    archive: &[SourceImage],
    plan: &[usize],
    crop_cfg: &CropConfig,
    res_cfg: &ResampleConfig,
    kept_of_pair: &[bool],
    writer_local: &[u32],
) -> Result<DatasetBundle, AssembleError> {
    let images = plan
        .par_iter()
        .map(|&p| {
            preprocess_digit(&archive[p], crop_cfg, res_cfg).map_err(|source| {
                AssembleError::Preprocess {
                    source_index: archive[p].source_index,
                    source,
                }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<u8> = plan.iter().map(|&p| archive[p].label).collect();
    let metadata: Vec<DigitMeta> = plan
        .iter()
        .map(|&p| {
            let rec = &archive[p];
            DigitMeta {
                class: rec.label,
                partition_id: rec.partition_id,
                writer_id: rec.writer_id,
                writer_local_index: writer_local[p],
                source_index: rec.source_index,
                duplicate_flag: kept_of_pair[p],
            }
        })
        .collect();
    Ok(DatasetBundle::new(images, labels, metadata)?)
}

fn load_permutation(path: &Path) -> Result<PermutationSpec, AssembleError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::{SOURCE_BITMAP_BYTES, SOURCE_SIDE};
    use crate::synth::{blob_bitmap, synthetic_archive, ArchiveSpec};
    use std::collections::HashSet;
    use std::io::Write;

    fn plain_record(writer: u32, partition: u16, label: u8, idx: u32, fill: u8) -> SourceImage {
        // distinct solid rows so bitmaps differ unless `fill` repeats
        let mut pixels = vec![0u8; SOURCE_SIDE * SOURCE_SIDE];
        for c in 0..SOURCE_SIDE {
            for r in 0..3 {
                pixels[(fill as usize + r) * SOURCE_SIDE + c] = 1;
            }
        }
        SourceImage::new(writer, partition, label, idx, SourceImage::pack_bitmap(&pixels))
            .unwrap()
    }

    #[test]
    fn unscramble_matches_hand_example() {
        let recs = vec![
            plain_record(7, 4, 0, 0, 10),
            plain_record(3, 4, 1, 1, 20),
            plain_record(3, 4, 2, 2, 30),
            plain_record(7, 4, 3, 3, 40),
        ];
        let groups = unscramble_by_writer(&recs);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].writer_id, 3);
        assert_eq!(groups[0].positions, vec![1, 2]);
        assert_eq!(groups[1].writer_id, 7);
        assert_eq!(groups[1].positions, vec![0, 3]);
        assert!(unscramble_by_writer(&[]).is_empty());
    }

    #[test]
    fn unscramble_preserves_counts_and_order() {
        let archive = synthetic_archive(&ArchiveSpec {
            test_writers: 50,
            test_digits_per_writer: 8,
            train_writers: 0,
            ..ArchiveSpec::default()
        });
        let groups = unscramble_by_writer(&archive);
        assert_eq!(groups.len(), 50);
        assert_eq!(groups.iter().map(|g| g.positions.len()).sum::<usize>(), archive.len());
        for pair in groups.windows(2) {
            assert!(pair[0].writer_id < pair[1].writer_id);
        }
        for g in &groups {
            for w in g.positions.windows(2) {
                assert!(w[0] < w[1], "archive order within a group");
            }
            for &p in &g.positions {
                assert_eq!(archive[p].writer_id, g.writer_id);
            }
        }
    }

    #[test]
    fn split_writers_partitions_by_id() {
        let recs: Vec<SourceImage> = (0..6)
            .map(|i| plain_record(5 - i, 4, 0, i, (i * 9) as u8))
            .collect();
        let groups = unscramble_by_writer(&recs);
        let (lo, hi) = split_writers(groups.clone(), 3).unwrap();
        assert_eq!(lo.iter().map(|g| g.writer_id).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(hi.iter().map(|g| g.writer_id).collect::<Vec<_>>(), vec![3, 4, 5]);
        let total: usize = lo.iter().chain(&hi).map(|g| g.positions.len()).sum();
        assert_eq!(total, 6);

        let (all, none) = split_writers(groups.clone(), 6).unwrap();
        assert_eq!(all.len(), 6);
        assert!(none.is_empty());
        assert!(split_writers(groups, 7).is_err());
    }

    #[test]
    fn find_duplicates_reports_later_indices() {
        let mut recs = vec![
            plain_record(1, 4, 0, 0, 10),
            plain_record(2, 4, 1, 1, 20),
            plain_record(3, 4, 2, 2, 10), // same bitmap as record 0
        ];
        assert_eq!(find_duplicates(&recs), vec![(2, 0)]);
        recs.pop();
        assert!(find_duplicates(&recs).is_empty());
    }

    fn blob_record(
        writer: u32,
        partition: u16,
        idx: u32,
        rng: &mut SplitMix64,
    ) -> SourceImage {
        SourceImage::new(writer, partition, (idx % 10) as u8, idx, blob_bitmap(rng)).unwrap()
    }

    // 20 test-partition writers x 30 digits plus a 1000-record training
    // pool; split 10/10 gives 300 seeds per set.
    fn mini_archive() -> Vec<SourceImage> {
        synthetic_archive(&ArchiveSpec {
            test_writers: 20,
            test_digits_per_writer: 30,
            train_writers: 20,
            train_digits_per_writer: 50,
            seed: 99,
            ..ArchiveSpec::default()
        })
    }

    fn mini_config() -> RecipeConfig {
        RecipeConfig {
            writer_split_count: 10,
            train_completion_start: 0,
            test_completion_start: 400,
            target_size: 600,
            shuffle_seed: 42,
            ..RecipeConfig::default()
        }
    }

    #[test]
    fn assemble_mini_archive_invariants() {
        let archive = mini_archive();
        let (train, test, report) = assemble(
            &archive,
            &mini_config(),
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 600);
        assert!(report.duplicates_removed.is_empty());
        assert_eq!(report.train_class_counts.iter().sum::<u64>(), 600);
        assert_eq!(report.test_class_counts.iter().sum::<u64>(), 600);

        // no source record lands in both sets
        let train_src: HashSet<u32> = train.metadata().iter().map(|m| m.source_index).collect();
        let test_src: HashSet<u32> = test.metadata().iter().map(|m| m.source_index).collect();
        assert_eq!(train_src.len(), 600);
        assert_eq!(test_src.len(), 600);
        assert!(train_src.is_disjoint(&test_src));

        // 300 seeds fill exactly the even slots; writer halves are the 10
        // lowest vs 10 highest ids; odd slots come from the pool
        for (i, m) in train.metadata().iter().enumerate() {
            assert_eq!(m.class, train.labels()[i]);
            assert!(!m.duplicate_flag);
            if i % 2 == 0 {
                assert_eq!(m.partition_id, 4);
                assert!(m.writer_id < 10, "train seed from low writer ids");
                assert!(m.writer_local_index < 30);
            } else {
                assert_ne!(m.partition_id, 4);
            }
        }
        for (i, m) in test.metadata().iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(m.partition_id, 4);
                assert!((10..20).contains(&m.writer_id));
            } else {
                assert_ne!(m.partition_id, 4);
            }
        }

        // completion scans start where configured and stay ordered
        let train_completion: Vec<u32> = train
            .metadata()
            .iter()
            .filter(|m| m.partition_id != 4)
            .map(|m| m.source_index)
            .collect();
        for w in train_completion.windows(2) {
            assert!(w[0] < w[1], "train completion keeps archive order");
        }
        let pool: Vec<u32> = archive
            .iter()
            .filter(|r| r.partition_id != 4)
            .map(|r| r.source_index)
            .collect();
        assert_eq!(train_completion[0], pool[0]);
        let test_completion: Vec<u32> = test
            .metadata()
            .iter()
            .filter(|m| m.partition_id != 4)
            .map(|m| m.source_index)
            .collect();
        assert_eq!(test_completion[0], pool[400]);

        // every writer in the histogram, every count consistent
        assert_eq!(
            report.train_writer_histogram.values().sum::<u64>(),
            600
        );
        assert_eq!(report.test_writer_histogram.values().sum::<u64>(), 600);
    }

    #[test]
    fn assemble_is_deterministic() {
        let archive = mini_archive();
        let cfg = mini_config();
        let run = || {
            assemble(
                &archive,
                &cfg,
                &CropConfig::default(),
                &ResampleConfig::default(),
            )
            .unwrap()
        };
        let (train_a, test_a, report_a) = run();
        let (train_b, test_b, report_b) = run();
        assert_eq!(train_a, train_b);
        assert_eq!(test_a, test_b);
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn assemble_seed_changes_seed_order_only() {
        let archive = mini_archive();
        let mut cfg = mini_config();
        let (train_a, ..) = assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();
        cfg.shuffle_seed = 43;
        let (train_b, ..) = assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();
        assert_ne!(train_a, train_b, "different seed, different interleave");
        let evens =
            |b: &DatasetBundle| -> HashSet<u32> {
                b.metadata()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % 2 == 0)
                    .map(|(_, m)| m.source_index)
                    .collect()
            };
        assert_eq!(evens(&train_a), evens(&train_b), "same seed membership");
    }

    #[test]
    fn assemble_zero_completion_falls_back_to_seeds() {
        // all records in the test partition: odd slots fall back to seeds
        let archive = synthetic_archive(&ArchiveSpec {
            test_writers: 20,
            test_digits_per_writer: 40,
            train_writers: 0,
            seed: 7,
            ..ArchiveSpec::default()
        });
        let cfg = RecipeConfig {
            writer_split_count: 10,
            target_size: 400,
            shuffle_seed: 42,
            ..RecipeConfig::default()
        };
        let (train, test, _) = assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();
        assert_eq!(train.len(), 400);
        assert!(train.metadata().iter().all(|m| m.partition_id == 4));
        assert!(test.metadata().iter().all(|m| m.partition_id == 4));
    }

    #[test]
    fn assemble_errors_when_archive_runs_out() {
        let archive = synthetic_archive(&ArchiveSpec {
            test_writers: 4,
            test_digits_per_writer: 5,
            train_writers: 1,
            train_digits_per_writer: 5,
            seed: 3,
            ..ArchiveSpec::default()
        });
        let cfg = RecipeConfig {
            writer_split_count: 2,
            test_completion_start: 0,
            target_size: 100,
            ..RecipeConfig::default()
        };
        match assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        ) {
            Err(AssembleError::ArchiveExhausted { set: "train", .. }) => {}
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn assemble_rejects_oversized_seed_half() {
        // 300 seeds cannot fit 400 slots when completion claims the odds
        let archive = mini_archive();
        let cfg = RecipeConfig {
            writer_split_count: 10,
            train_completion_start: 0,
            test_completion_start: 400,
            target_size: 400,
            ..RecipeConfig::default()
        };
        match assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        ) {
            Err(AssembleError::InvalidConfig(msg)) => {
                assert!(msg.contains("left over"), "{msg}")
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn assemble_drops_duplicates_and_flags_kept_copies() {
        let mut rng = SplitMix64::new(11);
        let mut archive = Vec::new();
        // 6 test-partition writers x 10 digits, 80-record training pool
        for w in 0..6u32 {
            for _ in 0..10 {
                archive.push(blob_record(w, 4, archive.len() as u32, &mut rng));
            }
        }
        for _ in 0..80 {
            archive.push(blob_record(1000, 1, archive.len() as u32, &mut rng));
        }
        // plant duplicates: one inside the test partition, one in the pool
        let dup_a = SourceImage::new(
            5,
            4,
            archive[3].label,
            archive.len() as u32,
            Box::new(*archive[3].bitmap_bytes()),
        )
        .unwrap();
        archive.push(dup_a);
        let pool_first = archive.iter().position(|r| r.partition_id == 1).unwrap();
        let dup_b = SourceImage::new(
            1000,
            1,
            archive[pool_first].label,
            archive.len() as u32,
            Box::new(*archive[pool_first].bitmap_bytes()),
        )
        .unwrap();
        archive.push(dup_b);

        let cfg = RecipeConfig {
            writer_split_count: 3,
            train_completion_start: 0,
            test_completion_start: 40,
            target_size: 60,
            shuffle_seed: 5,
            ..RecipeConfig::default()
        };
        let (train, test, report) = assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();
        assert_eq!(report.duplicates_removed.len(), 2);
        let dropped: HashSet<u32> = report.duplicates_removed.iter().map(|&(d, _)| d).collect();
        let kept: HashSet<u32> = report.duplicates_removed.iter().map(|&(_, k)| k).collect();
        for m in train.metadata().iter().chain(test.metadata()) {
            assert!(!dropped.contains(&m.source_index), "duplicate escaped");
            assert_eq!(m.duplicate_flag, kept.contains(&m.source_index));
        }
    }

    #[test]
    fn assemble_permutation_file_overrides_shuffle() {
        let archive = mini_archive();
        let mut cfg = mini_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perm.json");
        // identity on train, reversal on test
        let ident: Vec<usize> = (0..300).collect();
        let rev: Vec<usize> = (0..300).rev().collect();
        let mut f = std::fs::File::create(&path).unwrap();
        write!(
            f,
            "{}",
            serde_json::json!({ "train": ident, "test": rev })
        )
        .unwrap();
        cfg.permutation_file = Some(path.clone());
        let (train, test, _) = assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        )
        .unwrap();

        // identity permutation keeps seeds in writer-sorted archive order
        let train_seed_meta: Vec<&DigitMeta> = train
            .metadata()
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .map(|(_, m)| m)
            .collect();
        for pair in train_seed_meta.windows(2) {
            let a = (pair[0].writer_id, pair[0].writer_local_index);
            let b = (pair[1].writer_id, pair[1].writer_local_index);
            assert!(a < b, "identity permutation preserves group order");
        }
        let test_seed_meta: Vec<&DigitMeta> = test
            .metadata()
            .iter()
            .enumerate()
            .filter(|(i, _)| i % 2 == 0)
            .map(|(_, m)| m)
            .collect();
        for pair in test_seed_meta.windows(2) {
            let a = (pair[0].writer_id, pair[0].writer_local_index);
            let b = (pair[1].writer_id, pair[1].writer_local_index);
            assert!(a > b, "reversal flips group order");
        }

        // malformed permutations are rejected
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"train": [0, 0], "test": []}"#).unwrap();
        cfg.permutation_file = Some(bad);
        assert!(matches!(
            assemble(
                &archive,
                &cfg,
                &CropConfig::default(),
                &ResampleConfig::default()
            ),
            Err(AssembleError::BadPermutation(_))
        ));
    }

    #[test]
    fn assemble_reports_preprocess_failures_with_source_index() {
        let mut rng = SplitMix64::new(21);
        let mut archive: Vec<SourceImage> = Vec::new();
        for w in 0..4u32 {
            let quota = if w == 1 { 3 } else { 4 };
            for _ in 0..quota {
                archive.push(blob_record(w, 4, archive.len() as u32, &mut rng));
            }
            if w == 1 {
                // a blank scan cannot be cropped
                archive.push(
                    SourceImage::new(
                        w,
                        4,
                        0,
                        archive.len() as u32,
                        Box::new([0u8; SOURCE_BITMAP_BYTES]),
                    )
                    .unwrap(),
                );
            }
        }
        let blank_index = archive
            .iter()
            .position(|r| r.bitmap_bytes().iter().all(|&b| b == 0))
            .unwrap() as u32;
        // writers 0 and 1 seed the train set exactly (8 records, blank
        // among them); writers 2 and 3 seed the test set
        let cfg = RecipeConfig {
            writer_split_count: 2,
            target_size: 8,
            ..RecipeConfig::default()
        };
        match assemble(
            &archive,
            &cfg,
            &CropConfig::default(),
            &ResampleConfig::default(),
        ) {
            Err(AssembleError::Preprocess { source_index, .. }) => {
                assert_eq!(source_index, blank_index)
            }
            other => panic!("expected preprocess failure, got {other:?}"),
        }
    }
}
