//! Corpus construction: ratio-based anatomy removal, train/test splits,
//! pair storage and the phantom generator.
//!
//! Every subject owns an independent deterministic RNG sub-stream, so
//! corpus building parallelizes per subject while staying byte-identical
//! for a fixed (subjects, policy, seed) triple.

pub mod phantom;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::{volume_fraction, FractionReference, LabelVolume, Shape3, VoxelError};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid removal policy: {0}")]
    InvalidPolicy(String),
    #[error("subject {subject}: no removal candidate at threshold {threshold:?}")]
    NoCandidates {
        subject: String,
        threshold: Option<f64>,
    },
    #[error("subject {subject}: all classes are protected; nothing can be removed")]
    AllProtected { subject: String },
    #[error("subject {subject}: non-protected classes reach only {reached:.3} of the {needed:.3} cumulative target")]
    CumulativeTargetUnreachable {
        subject: String,
        needed: f64,
        reached: f64,
    },
    #[error("invalid phantom spec: {0}")]
    InvalidPhantomSpec(String),
    #[error("phantom class {class}: {reason}")]
    PhantomPlacement { class: String, reason: String },
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("split fraction must be in (0,1), got {0}")]
    BadSplitFraction(f64),
    #[error("manifest {path}: unsupported schema version {got} (expected {expected})")]
    SchemaVersion {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("manifest is malformed: {path}: {message}")]
    ManifestParse { path: PathBuf, message: String },
    #[error("referenced file is missing: {path}")]
    MissingFile { path: PathBuf },
    #[error("checksum mismatch on {path}: manifest says {expected}, file is {got}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error("sidecar {path} is not valid JSON at line {line} column {column} (byte offset {offset}): {message}")]
    SidecarParse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("sidecar {path} declares unknown axis order {got:?}")]
    UnknownAxisOrder { path: PathBuf, got: String },
    #[error(transparent)]
    Voxel(#[from] VoxelError),
}

/// How anatomies are chosen for removal when synthesizing a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalMode {
    /// Candidates are the non-protected classes whose volume fraction
    /// reaches the threshold; a uniformly random non-empty subset of the
    /// candidates is erased.
    ThresholdCandidates,
    /// Non-protected classes are drawn uniformly without replacement
    /// until the cumulative removed fraction reaches the threshold.
    CumulativeTarget,
    /// Exactly one uniformly chosen non-protected class is erased.
    SingleAnatomy,
    /// Everything except the protected classes is erased.
    SkeletonOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalPolicy {
    pub thresholds: Vec<f64>,
    pub reference: FractionReference,
    pub protected_classes: BTreeSet<u8>,
    pub mode: RemovalMode,
    /// Repetitions per subject and threshold: the loss-aggregation scope.
    pub instances_per_subject: usize,
    pub seed: u64,
}

impl RemovalPolicy {
    pub fn threshold_candidates(thresholds: Vec<f64>, protected: &[u8], seed: u64) -> Self {
        RemovalPolicy {
            thresholds,
            reference: FractionReference::TotalForeground,
            protected_classes: protected.iter().copied().collect(),
            mode: RemovalMode::ThresholdCandidates,
            instances_per_subject: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.instances_per_subject == 0 {
            return Err(CorpusError::InvalidPolicy(
                "instances_per_subject must be at least 1".into(),
            ));
        }
        let needs_thresholds = matches!(
            self.mode,
            RemovalMode::ThresholdCandidates | RemovalMode::CumulativeTarget
        );
        if needs_thresholds && self.thresholds.is_empty() {
            return Err(CorpusError::InvalidPolicy(format!(
                "mode {:?} needs at least one threshold",
                self.mode
            )));
        }
        for &t in &self.thresholds {
            if !(t > 0.0 && t < 1.0) {
                return Err(CorpusError::InvalidPolicy(format!(
                    "threshold {t} outside (0,1)"
                )));
            }
        }
        Ok(())
    }

    /// Threshold tags for each variant a subject yields, in variant order.
    pub fn variant_thresholds(&self) -> Vec<Option<f64>> {
        match self.mode {
            RemovalMode::ThresholdCandidates | RemovalMode::CumulativeTarget => self
                .thresholds
                .iter()
                .flat_map(|&t| std::iter::repeat(Some(t)).take(self.instances_per_subject))
                .collect(),
            RemovalMode::SingleAnatomy | RemovalMode::SkeletonOnly => {
                vec![None; self.instances_per_subject]
            }
        }
    }
}

/// Output of one removal draw.
#[derive(Debug)]
pub struct Removal {
    pub result: LabelVolume,
    pub removed_classes: BTreeSet<u8>,
    /// Combined fraction of the removed classes against the policy reference.
    pub removed_fraction: f64,
}

fn non_protected_present(
    vol: &LabelVolume,
    policy: &RemovalPolicy,
) -> Vec<(u8, usize)> {
    vol.class_counts()
        .into_iter()
        .filter(|(c, _)| !policy.protected_classes.contains(c))
        .collect()
}

fn reference_count(vol: &LabelVolume, reference: FractionReference) -> usize {
    match reference {
        FractionReference::TotalForeground => vol.foreground_count(),
        FractionReference::LargestClass => vol.class_counts().values().copied().max().unwrap_or(0),
        FractionReference::WholeGrid => vol.num_voxels(),
    }
}

/// Non-protected classes whose volume fraction reaches `threshold`: the
/// candidate pool of [`RemovalMode::ThresholdCandidates`].
pub fn candidate_classes(vol: &LabelVolume, policy: &RemovalPolicy, threshold: f64) -> Vec<u8> {
    non_protected_present(vol, policy)
        .into_iter()
        .filter(|&(c, _)| volume_fraction(vol, c, policy.reference).unwrap_or(0.0) >= threshold)
        .map(|(c, _)| c)
        .collect()
}

/// Erases anatomies from `vol` according to the policy mode. Deterministic
/// for a fixed RNG state. `threshold` is required for the threshold-driven
/// modes and ignored otherwise.
pub fn remove_anatomies(
    vol: &LabelVolume,
    policy: &RemovalPolicy,
    threshold: Option<f64>,
    subject: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Removal, CorpusError> {
    policy.validate()?;
    let available = non_protected_present(vol, policy);
    if available.is_empty() {
        return Err(CorpusError::AllProtected {
            subject: subject.to_string(),
        });
    }
    let ref_count = reference_count(vol, policy.reference);
    if ref_count == 0 {
        return Err(CorpusError::NoCandidates {
            subject: subject.to_string(),
            threshold,
        });
    }

    let removed: BTreeSet<u8> = match policy.mode {
        RemovalMode::ThresholdCandidates => {
            let t = threshold.ok_or_else(|| {
                CorpusError::InvalidPolicy("threshold_candidates draw needs a threshold".into())
            })?;
            let candidates: Vec<u8> = available
                .iter()
                .filter(|(c, _)| {
                    volume_fraction(vol, *c, policy.reference).unwrap_or(0.0) >= t
                })
                .map(|&(c, _)| c)
                .collect();
            if candidates.is_empty() {
                return Err(CorpusError::NoCandidates {
                    subject: subject.to_string(),
                    threshold,
                });
            }
            // Uniformly random non-empty subset: independent coin flips,
            // rejecting the empty draw.
            loop {
                let subset: BTreeSet<u8> = candidates
                    .iter()
                    .copied()
                    .filter(|_| rng.gen_bool(0.5))
                    .collect();
                if !subset.is_empty() {
                    break subset;
                }
            }
        }
        RemovalMode::CumulativeTarget => {
            let t = threshold.ok_or_else(|| {
                CorpusError::InvalidPolicy("cumulative_target draw needs a threshold".into())
            })?;
            let mut pool: Vec<(u8, usize)> = available.clone();
            pool.shuffle(rng);
            let mut taken = BTreeSet::new();
            let mut removed_voxels = 0usize;
            for (c, count) in pool {
                taken.insert(c);
                removed_voxels += count;
                if removed_voxels as f64 / ref_count as f64 >= t {
                    break;
                }
            }
            let reached = removed_voxels as f64 / ref_count as f64;
            if reached < t {
                return Err(CorpusError::CumulativeTargetUnreachable {
                    subject: subject.to_string(),
                    needed: t,
                    reached,
                });
            }
            taken
        }
        RemovalMode::SingleAnatomy => {
            let (c, _) = available[rng.gen_range(0..available.len())];
            BTreeSet::from([c])
        }
        RemovalMode::SkeletonOnly => available.iter().map(|&(c, _)| c).collect(),
    };

    let removed_voxels: usize = available
        .iter()
        .filter(|(c, _)| removed.contains(c))
        .map(|&(_, n)| n)
        .sum();
    let result = vol.erase_classes(&removed.iter().copied().collect::<Vec<_>>());
    Ok(Removal {
        result,
        removed_classes: removed,
        removed_fraction: removed_voxels as f64 / ref_count as f64,
    })
}

/// One (incomplete, complete) record, in memory.
#[derive(Clone, Debug)]
pub struct CompletionPair {
    pub subject_id: String,
    pub variant_id: usize,
    pub threshold: Option<f64>,
    pub incomplete: LabelVolume,
    pub complete: LabelVolume,
    pub removed_classes: BTreeSet<u8>,
    pub removed_fraction: f64,
}

impl CompletionPair {
    /// Checks the structural pair invariants exhaustively: removal never
    /// adds voxels and the complete-minus-incomplete residual is exactly
    /// the union of the removed classes.
    pub fn verify_invariants(&self) -> Result<(), String> {
        if self.incomplete.shape() != self.complete.shape() {
            return Err("shape mismatch between incomplete and complete".into());
        }
        for (i, (&inc, &com)) in self
            .incomplete
            .data()
            .iter()
            .zip(self.complete.data())
            .enumerate()
        {
            let expected = if self.removed_classes.contains(&com) {
                0
            } else {
                com
            };
            if inc != expected {
                return Err(format!(
                    "voxel {i}: incomplete={inc} complete={com} removed={:?}",
                    self.removed_classes
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// A subject to feed into corpus building; `original_shape` records the
/// pre-resampling grid so evaluation can upscale back to native size.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub volume: LabelVolume,
    pub original_shape: Shape3,
}

impl Subject {
    pub fn new(id: impl Into<String>, volume: LabelVolume) -> Self {
        let original_shape = volume.shape();
        Subject {
            id: id.into(),
            volume,
            original_shape,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub subject_id: String,
    pub variant_id: usize,
    pub threshold: Option<f64>,
    pub removed_classes: Vec<u8>,
    pub removed_fraction: f64,
    pub incomplete_file: String,
    pub complete_file: String,
    pub incomplete_checksum: String,
    pub complete_checksum: String,
    pub shape: Shape3,
    pub original_shape: Shape3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub policy: RemovalPolicy,
    pub created_with_seed: u64,
    pub split: BTreeMap<String, Split>,
    pub skipped_subjects: BTreeMap<String, String>,
    pub class_table: BTreeMap<u8, String>,
    pub pairs: Vec<PairEntry>,
}

impl CorpusManifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &PairEntry> {
        self.pairs
            .iter()
            .filter(move |p| self.split.get(&p.subject_id) == Some(&split))
    }

    /// Channel count for one-hot encodings: background plus all classes.
    pub fn num_classes(&self) -> usize {
        self.class_table.keys().copied().max().unwrap_or(0) as usize + 1
    }

    pub fn checksum(&self) -> String {
        store::sha256_hex(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        text
    }
}

/// Seeded random train/test partition of subject ids.
pub fn split_subjects(
    ids: &[String],
    split_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<String, Split>, CorpusError> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(CorpusError::BadSplitFraction(split_fraction));
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    sorted.shuffle(&mut rng);
    let n = sorted.len();
    let train = ((split_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    Ok(sorted
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            (
                id.clone(),
                if i < train { Split::Train } else { Split::Test },
            )
        })
        .collect())
}

struct SubjectOutput {
    id: String,
    pairs: Vec<PairEntry>,
    skipped: Option<String>,
    class_table: BTreeMap<u8, String>,
}

/// Builds the corpus on disk under `out_dir` and returns the manifest.
///
/// For every subject and variant slot a pair is written to
/// `subjects/<id>/`; subjects whose removal draw finds no candidate are
/// skipped with a recorded reason. The split is drawn over the surviving
/// subjects.
pub fn build_corpus(
    subjects: &[Subject],
    policy: &RemovalPolicy,
    split_fraction: f64,
    out_dir: &Path,
) -> Result<CorpusManifest, CorpusError> {
    policy.validate()?;
    if subjects.len() < 2 {
        return Err(CorpusError::TooFewSubjects(subjects.len()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(CorpusError::BadSplitFraction(split_fraction));
    }
    let mut order: Vec<&Subject> = subjects.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in order.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(CorpusError::DuplicateSubject(pair[0].id.clone()));
        }
    }
    let variant_thresholds = policy.variant_thresholds();

    let outputs: Vec<Result<SubjectOutput, CorpusError>> = order
        .par_iter()
        .enumerate()
        .map(|(idx, subject)| {
            let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
            rng.set_stream(idx as u64 + 1);
            build_subject(subject, policy, &variant_thresholds, out_dir, &mut rng)
        })
        .collect();

    let mut pairs = Vec::new();
    let mut skipped = BTreeMap::new();
    let mut class_table = BTreeMap::new();
    let mut kept_ids = Vec::new();
    for output in outputs {
        let output = output?;
        class_table.extend(output.class_table);
        match output.skipped {
            Some(reason) => {
                skipped.insert(output.id, reason);
            }
            None => {
                kept_ids.push(output.id);
                pairs.extend(output.pairs);
            }
        }
    }
    if kept_ids.len() < 2 {
        return Err(CorpusError::TooFewSubjects(kept_ids.len()));
    }
    let split = split_subjects(&kept_ids, split_fraction, policy.seed)?;

    let manifest = CorpusManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        policy: policy.clone(),
        created_with_seed: policy.seed,
        split,
        skipped_subjects: skipped,
        class_table,
        pairs,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn build_subject(
    subject: &Subject,
    policy: &RemovalPolicy,
    variant_thresholds: &[Option<f64>],
    out_dir: &Path,
    rng: &mut ChaCha8Rng,
) -> Result<SubjectOutput, CorpusError> {
    let subject_dir = out_dir.join("subjects").join(&subject.id);
    let complete_rel = format!("subjects/{}/complete.vox", subject.id);
    let mut pairs = Vec::new();
    let mut removals = Vec::new();
    for (variant_id, &threshold) in variant_thresholds.iter().enumerate() {
        match remove_anatomies(&subject.volume, policy, threshold, &subject.id, rng) {
            Ok(removal) => removals.push((variant_id, threshold, removal)),
            Err(
                e @ (CorpusError::NoCandidates { .. }
                | CorpusError::AllProtected { .. }
                | CorpusError::CumulativeTargetUnreachable { .. }),
            ) => {
                // Mirror of the screening step: the whole subject is set
                // aside with the reason, nothing is written for it.
                return Ok(SubjectOutput {
                    id: subject.id.clone(),
                    pairs: Vec::new(),
                    skipped: Some(e.to_string()),
                    class_table: subject.volume.class_table().clone(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let complete_checksum = store::write_volume(&subject_dir.join("complete.vox"), &subject.volume)?;
    for (variant_id, threshold, removal) in removals {
        let rel = format!("subjects/{}/v{variant_id}_incomplete.vox", subject.id);
        let checksum = store::write_volume(&out_dir.join(&rel), &removal.result)?;
        pairs.push(PairEntry {
            subject_id: subject.id.clone(),
            variant_id,
            threshold,
            removed_classes: removal.removed_classes.iter().copied().collect(),
            removed_fraction: removal.removed_fraction,
            incomplete_file: rel,
            complete_file: complete_rel.clone(),
            incomplete_checksum: checksum,
            complete_checksum: complete_checksum.clone(),
            shape: subject.volume.shape(),
            original_shape: subject.original_shape,
        });
    }
    Ok(SubjectOutput {
        id: subject.id.clone(),
        pairs,
        skipped: None,
        class_table: subject.volume.class_table().clone(),
    })
}

pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(store::io_error(parent))?;
    }
    std::fs::write(path, manifest.to_json()).map_err(store::io_error(path))
}

/// Loads a manifest; with `verify` set, every referenced file must exist
/// and match its recorded checksum.
pub fn load_manifest(path: &Path, verify: bool) -> Result<CorpusManifest, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(store::io_error(path))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| CorpusError::ManifestParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(CorpusError::SchemaVersion {
            path: path.to_path_buf(),
            got: manifest.schema_version,
            expected: MANIFEST_SCHEMA_VERSION,
        });
    }
    if verify {
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &manifest.pairs {
            store::verify_file(&base.join(&entry.incomplete_file), &entry.incomplete_checksum)?;
            store::verify_file(&base.join(&entry.complete_file), &entry.complete_checksum)?;
        }
    }
    Ok(manifest)
}

/// Loads the two volumes of a manifest entry.
pub fn load_pair(manifest_dir: &Path, entry: &PairEntry) -> Result<CompletionPair, CorpusError> {
    let incomplete = store::read_volume(&manifest_dir.join(&entry.incomplete_file))?;
    let complete = store::read_volume(&manifest_dir.join(&entry.complete_file))?;
    Ok(CompletionPair {
        subject_id: entry.subject_id.clone(),
        variant_id: entry.variant_id,
        threshold: entry.threshold,
        incomplete,
        complete,
        removed_classes: entry.removed_classes.iter().copied().collect(),
        removed_fraction: entry.removed_fraction,
    })
}

/// Writes a pair's volumes under `dir` using the manifest naming scheme.
pub fn save_pair(pair: &CompletionPair, dir: &Path) -> Result<(String, String), CorpusError> {
    let complete_rel = format!("subjects/{}/complete.vox", pair.subject_id);
    let incomplete_rel = format!(
        "subjects/{}/v{}_incomplete.vox",
        pair.subject_id, pair.variant_id
    );
    let complete_checksum = store::write_volume(&dir.join(&complete_rel), &pair.complete)?;
    let incomplete_checksum = store::write_volume(&dir.join(&incomplete_rel), &pair.incomplete)?;
    Ok((incomplete_checksum, complete_checksum))
}
