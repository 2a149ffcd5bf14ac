//! Vertical datasets: column partitioning across clients, aligned/non-aligned
//! splits, feature masking, and imbalanced ownership.
//!
//! A sample is *aligned* when every client holds its full feature slice. A
//! non-aligned sample has one owning client with full features; every other
//! client is designated partial and loses `round(R_miss · d_i)` of its
//! features. Masked entries hold the sentinel `0.0`.

mod csv;
mod synthetic;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::csv::{
    load_csv, ColumnKind, CsvConfig, Normalization, Preprocessor, RawTable, TabularData,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng;

/// Value written into masked feature positions.
pub const SENTINEL: f64 = 0.0;

/// Rounding used for feature counts: ties go to the even neighbour.
pub fn round_count(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub overlap_ratio: f64,
    pub missing_rate: f64,
    /// Per-client fractions of the total data; `None` means round-robin ownership.
    pub imbalance: Option<Vec<f64>>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.overlap_ratio) {
            return Err(Error::config(format!(
                "overlap_ratio {} not in [0,1]",
                self.overlap_ratio
            )));
        }
        if !in_unit(self.missing_rate) {
            return Err(Error::config(format!(
                "missing_rate {} not in [0,1]",
                self.missing_rate
            )));
        }
        if let Some(f) = &self.imbalance {
            if f.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::config(format!(
                    "imbalance fractions {f:?} must lie in (0,1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerticalDataset {
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-client `n × d_i` feature blocks.
    pub blocks: Vec<Matrix>,
    pub aligned: Vec<bool>,
    /// Owning (full-feature) client of each non-aligned sample; `None` for aligned samples.
    pub owner: Vec<Option<usize>>,
    /// Per-client row-major `n × d_i` masks, `true` = absent.
    pub masks: Vec<Vec<bool>>,
}

impl VerticalDataset {
    /// Wraps per-client blocks as a fully aligned, unmasked dataset.
    pub fn aligned_from_blocks(
        blocks: Vec<Matrix>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        if blocks.is_empty() {
            return Err(Error::validation("dataset needs at least one client block"));
        }
        for b in &blocks {
            if b.rows() != n {
                return Err(Error::Dimension {
                    op: "VerticalDataset",
                    left: b.shape(),
                    right: (n, b.cols()),
                });
            }
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let masks = blocks
            .iter()
            .map(|b| vec![false; b.rows() * b.cols()])
            .collect();
        Ok(Self {
            labels,
            classes,
            blocks,
            aligned: vec![true; n],
            owner: vec![None; n],
            masks,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn client_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(Matrix::cols).collect()
    }

    pub fn mask_row(&self, client: usize, sample: usize) -> &[bool] {
        let d = self.blocks[client].cols();
        &self.masks[client][sample * d..(sample + 1) * d]
    }

    pub fn masked_count(&self, client: usize, sample: usize) -> usize {
        self.mask_row(client, sample).iter().filter(|&&m| m).count()
    }

    /// True when the client has no masked feature for this sample.
    pub fn is_full(&self, client: usize, sample: usize) -> bool {
        !self.mask_row(client, sample).contains(&true)
    }

    /// Clients holding full local features for the sample.
    pub fn full_clients(&self, sample: usize) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.is_full(i, sample)).collect()
    }

    pub fn aligned_count(&self) -> usize {
        self.aligned.iter().filter(|&&a| a).count()
    }

    pub fn any_masked(&self) -> bool {
        self.masks.iter().any(|m| m.contains(&true))
    }

    /// Copies the given rows (repeats allowed) into a new dataset.
    pub fn select(&self, rows: &[usize]) -> VerticalDataset {
        let blocks = self.blocks.iter().map(|b| b.select_rows(rows)).collect();
        let masks = self
            .masks
            .iter()
            .zip(&self.blocks)
            .map(|(m, b)| {
                let d = b.cols();
                rows.iter()
                    .flat_map(|&r| m[r * d..(r + 1) * d].iter().copied())
                    .collect()
            })
            .collect();
        VerticalDataset {
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            blocks,
            aligned: rows.iter().map(|&r| self.aligned[r]).collect(),
            owner: rows.iter().map(|&r| self.owner[r]).collect(),
            masks,
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.aligned.len() != n || self.owner.len() != n {
            return Err(Error::validation("per-sample vectors disagree on n"));
        }
        for (i, (b, m)) in self.blocks.iter().zip(&self.masks).enumerate() {
            if b.rows() != n || m.len() != n * b.cols() {
                return Err(Error::validation(format!(
                    "client {i} block or mask has the wrong size"
                )));
            }
            for (v, &masked) in b.data().iter().zip(m) {
                if masked && *v != SENTINEL {
                    return Err(Error::validation(format!(
                        "client {i} has a masked entry not equal to the sentinel"
                    )));
                }
            }
        }
        for s in 0..n {
            if self.aligned[s] {
                if self.owner[s].is_some() {
                    return Err(Error::validation(format!(
                        "aligned sample {s} has an owner"
                    )));
                }
                if (0..self.k()).any(|i| !self.is_full(i, s)) {
                    return Err(Error::validation(format!(
                        "aligned sample {s} has masked features"
                    )));
                }
            } else {
                match self.owner[s] {
                    Some(o) if o < self.k() => {
                        if !self.is_full(o, s) {
                            return Err(Error::validation(format!(
                                "owner of sample {s} has masked features"
                            )));
                        }
                    }
                    _ => {
                        return Err(Error::validation(format!(
                            "non-aligned sample {s} lacks a valid owner"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the masks, hex encoded.
    pub fn mask_checksum(&self) -> String {
        let mut h = Sha256::new();
        for m in &self.masks {
            h.update((m.len() as u64).to_le_bytes());
            let bytes: Vec<u8> = m.iter().map(|&b| b as u8).collect();
            h.update(&bytes);
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over labels, flags, masks, and feature bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        for (&a, o) in self.aligned.iter().zip(&self.owner) {
            h.update([a as u8]);
            h.update(o.map_or(u64::MAX, |v| v as u64).to_le_bytes());
        }
        for b in &self.blocks {
            h.update((b.cols() as u64).to_le_bytes());
            for v in b.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.update(self.mask_checksum().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn manifest(&self, split: &SplitSpec) -> DatasetManifest {
        DatasetManifest {
            n: self.n(),
            classes: self.classes,
            client_dims: self.client_dims(),
            aligned: self.aligned_count(),
            seed: split.seed,
            split: split.clone(),
            mask_checksum: self.mask_checksum(),
            data_checksum: self.checksum(),
        }
    }
}

/// JSON-serializable record of how a dataset was built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub classes: usize,
    pub client_dims: Vec<usize>,
    pub aligned: usize,
    pub seed: u64,
    pub split: SplitSpec,
    pub mask_checksum: String,
    pub data_checksum: String,
}

/// Client widths for contiguous partitioning: `round(f_i·m)` for all but the
/// last client, which takes the remainder.
pub fn partition_dims(m: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    let k = fractions.len();
    if k == 0 {
        return Err(Error::config("need at least one client"));
    }
    if k > m {
        return Err(Error::config(format!(
            "{k} clients cannot split {m} features"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::config(format!(
            "client fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut dims: Vec<usize> = fractions[..k - 1]
        .iter()
        .map(|&f| round_count(f * m as f64))
        .collect();
    let used: usize = dims.iter().sum();
    if dims.contains(&0) || used >= m {
        return Err(Error::config(format!(
            "fractions {fractions:?} leave a client without features (m={m})"
        )));
    }
    dims.push(m - used);
    Ok(dims)
}

pub fn even_fractions(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Splits feature columns into contiguous per-client blocks.
pub fn partition_vertical(
    features: &Matrix,
    k: usize,
    fractions: Option<&[f64]>,
) -> Result<Vec<Matrix>> {
    let even = even_fractions(k);
    let fractions = fractions.unwrap_or(&even);
    if fractions.len() != k {
        return Err(Error::config(format!(
            "{} fractions given for {k} clients",
            fractions.len()
        )));
    }
    let dims = partition_dims(features.cols(), fractions)?;
    features.split_cols(&dims)
}

/// Aligned flags and owners for `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPlan {
    pub aligned: Vec<bool>,
    pub owner: Vec<Option<usize>>,
}

impl AlignmentPlan {
    pub fn aligned_count(&self) -> usize {
        self.aligned.iter().filter(|&&a| a).count()
    }

    pub fn owned_by(&self, client: usize) -> usize {
        self.owner.iter().filter(|&&o| o == Some(client)).count()
    }
}

/// Flags `⌊ratio·n⌋` random samples as aligned and assigns the rest to owners
/// round-robin over `k` clients.
pub fn split_alignment(n: usize, k: usize, overlap_ratio: f64, seed: u64) -> Result<AlignmentPlan> {
    if !(0.0..=1.0).contains(&overlap_ratio) {
        return Err(Error::config(format!(
            "overlap_ratio {overlap_ratio} not in [0,1]"
        )));
    }
    if k == 0 {
        return Err(Error::config("need at least one client"));
    }
    let n_aligned = ((overlap_ratio * n as f64) + 1e-9).floor() as usize;
    let n_aligned = n_aligned.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split_alignment"));
    let mut aligned = vec![false; n];
    let mut owner = vec![None; n];
    for &s in &order[..n_aligned] {
        aligned[s] = true;
    }
    // ownership follows sample order so case counts do not depend on the shuffle
    let mut next = 0;
    for s in 0..n {
        if !aligned[s] {
            owner[s] = Some(next % k);
            next += 1;
        }
    }
    if k == 1 {
        // a single client owns everything; nothing can be non-aligned
        aligned.iter_mut().for_each(|a| *a = true);
        owner.iter_mut().for_each(|o| *o = None);
    }
    Ok(AlignmentPlan { aligned, owner })
}

/// Applies an alignment plan to an unmasked dataset.
pub fn apply_alignment(mut data: VerticalDataset, plan: &AlignmentPlan) -> Result<VerticalDataset> {
    if plan.aligned.len() != data.n() {
        return Err(Error::validation(
            "alignment plan size differs from dataset",
        ));
    }
    if data.any_masked() {
        return Err(Error::validation(
            "alignment must be applied before masking",
        ));
    }
    data.aligned = plan.aligned.clone();
    data.owner = plan.owner.clone();
    Ok(data)
}

/// Masks `round(R_miss·d_i)` uniformly drawn positions for every partial
/// client of every non-aligned sample. Aligned samples are untouched.
pub fn apply_missing(
    mut data: VerticalDataset,
    missing_rate: f64,
    seed: u64,
) -> Result<VerticalDataset> {
    if !(0.0..=1.0).contains(&missing_rate) {
        return Err(Error::config(format!(
            "missing_rate {missing_rate} not in [0,1]"
        )));
    }
    let mut rng = rng::stream(seed, "apply_missing");
    let k = data.k();
    for s in 0..data.n() {
        let Some(owner) = data.owner[s] else { continue };
        for i in (0..k).filter(|&i| i != owner) {
            let d = data.blocks[i].cols();
            let count = round_count(missing_rate * d as f64).min(d);
            let picks = rand::seq::index::sample(&mut rng, d, count);
            for j in picks.iter() {
                data.masks[i][s * d + j] = true;
                data.blocks[i].set(s, j, SENTINEL);
            }
        }
    }
    Ok(data)
}

/// Ownership counts produced by [`split_imbalance`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceReport {
    /// Aligned plus owned non-aligned samples, per client.
    pub usable: Vec<usize>,
    pub aligned: usize,
    /// Non-aligned samples no client could keep at the requested fractions.
    pub dropped: usize,
}

/// Re-assigns non-aligned ownership so client `i` can use `round(f_i·n)`
/// samples (its aligned samples plus the non-aligned samples it owns).
/// Non-aligned samples left without an owner are removed.
pub fn split_imbalance(
    data: &VerticalDataset,
    fractions: &[f64],
    seed: u64,
) -> Result<(VerticalDataset, ImbalanceReport)> {
    let k = data.k();
    if fractions.len() != k {
        return Err(Error::config(format!(
            "{} fractions for {k} clients",
            fractions.len()
        )));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::config(format!(
            "imbalance fractions {fractions:?} must lie in (0,1]"
        )));
    }
    if data.any_masked() {
        return Err(Error::validation(
            "imbalance must be applied before masking",
        ));
    }
    let n = data.n();
    let aligned = data.aligned_count();
    let non_aligned: Vec<usize> = (0..n).filter(|&s| !data.aligned[s]).collect();
    let mut own = Vec::with_capacity(k);
    for (i, &f) in fractions.iter().enumerate() {
        let usable = round_count(f * n as f64);
        if usable < aligned {
            return Err(Error::validation(format!(
                "client {i} fraction {f} gives {usable} samples, fewer than the {aligned} aligned ones"
            )));
        }
        own.push(usable - aligned);
    }
    let owned: usize = own.iter().sum();
    if owned > non_aligned.len() {
        return Err(Error::validation(format!(
            "fractions {fractions:?} need {owned} non-aligned samples but only {} exist",
            non_aligned.len()
        )));
    }
    let mut order = non_aligned;
    order.shuffle(&mut rng::stream(seed, "split_imbalance"));
    let mut owner = data.owner.clone();
    let mut keep = vec![true; n];
    let mut cursor = 0;
    for (i, &count) in own.iter().enumerate() {
        for &s in &order[cursor..cursor + count] {
            owner[s] = Some(i);
        }
        cursor += count;
    }
    for &s in &order[cursor..] {
        keep[s] = false;
    }
    let rows: Vec<usize> = (0..n).filter(|&s| keep[s]).collect();
    let mut out = data.clone();
    out.owner = owner;
    let out = out.select(&rows);
    let usable = (0..k).map(|i| aligned + own[i]).collect();
    Ok((
        out,
        ImbalanceReport {
            usable,
            aligned,
            dropped: order.len() - cursor,
        },
    ))
}

/// Partition, align, optionally imbalance, then mask.
pub fn build_vertical(
    features: &Matrix,
    labels: Vec<usize>,
    classes: usize,
    fractions: &[f64],
    split: &SplitSpec,
) -> Result<VerticalDataset> {
    split.validate()?;
    let blocks = partition_vertical(features, fractions.len(), Some(fractions))?;
    let data = VerticalDataset::aligned_from_blocks(blocks, labels, classes)?;
    let plan = split_alignment(
        data.n(),
        data.k(),
        split.overlap_ratio,
        rng::derive_seed(split.seed, "align"),
    )?;
    let mut data = apply_alignment(data, &plan)?;
    if let Some(f) = &split.imbalance {
        data = split_imbalance(&data, f, rng::derive_seed(split.seed, "imbalance"))?.0;
    }
    let data = apply_missing(
        data,
        split.missing_rate,
        rng::derive_seed(split.seed, "missing"),
    )?;
    data.validate()?;
    Ok(data)
}
