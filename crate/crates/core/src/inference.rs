//! Prediction by one client alone, by one client completing its own gaps,
//! or by all clients together.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SENTINEL;
use crate::error::{Error, Result};
use crate::losses::ClientSet;
use crate::models::{merge_partial, Checkpoint, ClientView, ModelBundle};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Independent,
    IndependentWithMissing,
    Collaborative,
}

/// Feature blocks with row-major masks; `true` marks an absent entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub blocks: Vec<Matrix>,
    pub masks: Vec<Vec<bool>>,
}

impl Samples {
    /// Fully observed blocks.
    pub fn observed(blocks: Vec<Matrix>) -> Self {
        let masks = blocks.iter().map(|b| vec![false; b.data().len()]).collect();
        Self { blocks, masks }
    }

    pub fn rows(&self) -> usize {
        self.blocks.first().map_or(0, Matrix::rows)
    }

    fn check(&self) -> Result<()> {
        if self.blocks.len() != self.masks.len() {
            return Err(Error::validation("one mask per block required"));
        }
        let n = self.rows();
        for (b, m) in self.blocks.iter().zip(&self.masks) {
            if b.rows() != n || m.len() != b.data().len() {
                return Err(Error::Dimension {
                    op: "inference samples",
                    left: b.shape(),
                    right: (m.len(), n),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub mode: InferenceMode,
    /// Acting client for the independent modes.
    pub client: Option<usize>,
    /// One block for the independent modes, one per client for collaborative.
    pub samples: Samples,
}

impl InferenceRequest {
    pub fn run(&self, bundle: &ModelBundle) -> Result<Vec<usize>> {
        self.samples.check()?;
        match self.mode {
            InferenceMode::Collaborative => {
                if self.client.is_some() {
                    return Err(Error::validation(
                        "collaborative inference takes no client index",
                    ));
                }
                infer_collaborative(bundle, &self.samples.blocks, &self.samples.masks)
            }
            mode => {
                let client = self.client.ok_or_else(|| {
                    Error::validation("independent inference needs a client index")
                })?;
                let [block] = self.samples.blocks.as_slice() else {
                    return Err(Error::validation(
                        "independent inference takes exactly one block",
                    ));
                };
                let mask = &self.samples.masks[0];
                if mode == InferenceMode::Independent {
                    infer_independent(bundle, client, block, mask)
                } else {
                    infer_independent_with_missing(bundle, client, block, mask)
                }
            }
        }
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

fn sentinel_filled(block: &Matrix, mask: &[bool]) -> Matrix {
    let mut out = block.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        if m {
            *v = SENTINEL;
        }
    }
    out
}

fn check_block(view: &ClientView<'_>, block: &Matrix, mask: &[bool]) -> Result<()> {
    if block.cols() != view.bottom.in_dim() || mask.len() != block.data().len() {
        return Err(Error::Dimension {
            op: "client block",
            left: block.shape(),
            right: (mask.len(), view.bottom.in_dim()),
        });
    }
    Ok(())
}

/// `h(f_i(x_i))` through the client's own view only.
pub fn independent_logits(view: &ClientView<'_>, block: &Matrix) -> Result<Matrix> {
    view.top.predict(&view.bottom.predict(block)?)
}

/// `h(f_i(merge(x_i, XCom_i(f_i(x_i)), mask)))` with masked entries sentinel-filled.
pub fn self_completed_logits(
    view: &ClientView<'_>,
    block: &Matrix,
    mask: &[bool],
) -> Result<Matrix> {
    let filled = sentinel_filled(block, mask);
    let source = view.bottom.predict(&filled)?;
    let completed = view.xcom.predict(&source)?;
    let merged = merge_partial(&filled, &completed, mask)?;
    independent_logits(view, &merged)
}

/// Mode 1: client `i` predicts from its own fully observed features.
pub fn infer_independent(
    bundle: &ModelBundle,
    client: usize,
    block: &Matrix,
    mask: &[bool],
) -> Result<Vec<usize>> {
    let view = bundle.client_view(client)?;
    check_block(&view, block, mask)?;
    if mask.iter().any(|&m| m) {
        return Err(Error::validation(
            "masked features in independent inference; use independent_with_missing",
        ));
    }
    Ok(argmax_rows(&independent_logits(&view, block)?))
}

/// Mode 2: client `i` fills its masked features from its own embedding, then predicts.
pub fn infer_independent_with_missing(
    bundle: &ModelBundle,
    client: usize,
    block: &Matrix,
    mask: &[bool],
) -> Result<Vec<usize>> {
    let view = bundle.client_view(client)?;
    check_block(&view, block, mask)?;
    Ok(argmax_rows(&self_completed_logits(&view, block, mask)?))
}

/// Mode 3 logits. Full clients send `E_i`; partial clients send `Ẽ_i`
/// completed from the mean of the full clients' embeddings. Rows with no
/// full client complete every partial client from its own embedding.
pub fn collaborative_logits(
    bundle: &ModelBundle,
    blocks: &[Matrix],
    masks: &[Vec<bool>],
) -> Result<Matrix> {
    let k = bundle.k();
    if blocks.len() != k || masks.len() != k {
        return Err(Error::validation(format!(
            "collaborative inference needs {k} blocks and masks"
        )));
    }
    Samples {
        blocks: blocks.to_vec(),
        masks: masks.to_vec(),
    }
    .check()?;
    let n = blocks[0].rows();
    let mut groups: BTreeMap<ClientSet, Vec<usize>> = BTreeMap::new();
    for s in 0..n {
        let mut full = ClientSet::EMPTY;
        let mut any = false;
        for i in 0..k {
            let d = blocks[i].cols();
            let row = &masks[i][s * d..(s + 1) * d];
            if row.iter().all(|&m| !m) {
                full = full.with(i);
            }
            any |= row.iter().any(|&m| !m);
        }
        if !any {
            return Err(Error::validation(format!(
                "sample {s} has no observed features in any client"
            )));
        }
        groups.entry(full).or_default().push(s);
    }
    let mut logits = Matrix::zeros(n, bundle.classes());
    for (full, rows) in groups {
        let sub: Vec<Matrix> = blocks.iter().map(|b| b.select_rows(&rows)).collect();
        let sub_masks: Vec<Vec<bool>> = (0..k)
            .map(|i| {
                let d = blocks[i].cols();
                rows.iter()
                    .flat_map(|&s| masks[i][s * d..(s + 1) * d].iter().copied())
                    .collect()
            })
            .collect();
        let real: BTreeMap<usize, Matrix> = full
            .iter()
            .map(|i| Ok((i, bundle.bottoms[i].predict(&sub[i])?)))
            .collect::<Result<_>>()?;
        let source = if real.is_empty() {
            None
        } else {
            let refs: Vec<&Matrix> = real.values().collect();
            Some(crate::models::avg_embeddings(&refs)?)
        };
        let mut contributed = Vec::with_capacity(k);
        for i in 0..k {
            if let Some(e) = real.get(&i) {
                contributed.push(e.clone());
                continue;
            }
            let filled = sentinel_filled(&sub[i], &sub_masks[i]);
            let src = match &source {
                Some(s) => s.clone(),
                None => bundle.bottoms[i].predict(&filled)?,
            };
            let completed = bundle.xcoms[i].predict(&src)?;
            let merged = merge_partial(&filled, &completed, &sub_masks[i])?;
            contributed.push(bundle.bottoms[i].predict(&merged)?);
        }
        let refs: Vec<&Matrix> = contributed.iter().collect();
        let out = bundle.top.predict(&crate::models::avg_embeddings(&refs)?)?;
        for (j, &s) in rows.iter().enumerate() {
            logits.row_mut(s).copy_from_slice(out.row(j));
        }
    }
    Ok(logits)
}

pub fn infer_collaborative(
    bundle: &ModelBundle,
    blocks: &[Matrix],
    masks: &[Vec<bool>],
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&collaborative_logits(bundle, blocks, masks)?))
}

/// Fraction of exact matches.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::validation("accuracy of an empty set"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Batch prediction job: a checkpoint, a feature CSV, and the mode to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSpec {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub mode: InferenceMode,
    #[serde(default)]
    pub client: Option<usize>,
    /// Defaults to `predictions.csv` in the output directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn parse_mask(raw: &str) -> Result<bool> {
    match raw.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" | "" => Ok(false),
        other => Err(Error::validation(format!(
            "mask value `{other}` is not 0/1"
        ))),
    }
}

/// Reads feature columns in file order, plus optional `mask_*` columns in
/// the same order. Empty or `nan` feature cells count as masked.
pub fn read_samples_csv<R: std::io::Read>(reader: R, widths: &[usize]) -> Result<Samples> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let (mask_cols, feat_cols): (Vec<usize>, Vec<usize>) =
        (0..header.len()).partition(|&c| header[c].starts_with("mask_"));
    let width: usize = widths.iter().sum();
    if feat_cols.len() != width {
        return Err(Error::validation(format!(
            "input has {} feature columns, model expects {width}",
            feat_cols.len()
        )));
    }
    if !mask_cols.is_empty() && mask_cols.len() != width {
        return Err(Error::validation(format!(
            "{} mask columns for {width} features",
            mask_cols.len()
        )));
    }
    let mut values = Vec::new();
    let mut masked = Vec::new();
    let mut rows = 0;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        for (j, &c) in feat_cols.iter().enumerate() {
            let raw = record[c].trim();
            let mut absent = raw.is_empty() || raw.eq_ignore_ascii_case("nan");
            if let Some(&mc) = mask_cols.get(j) {
                absent |= parse_mask(&record[mc])?;
            }
            let v = if absent {
                SENTINEL
            } else {
                raw.parse::<f64>().map_err(|_| {
                    Error::validation(format!(
                        "row {line}: `{raw}` in `{}` is not a number",
                        &header[c]
                    ))
                })?
            };
            values.push(v);
            masked.push(absent);
        }
        rows += 1;
    }
    let mut blocks = Vec::with_capacity(widths.len());
    let mut masks = Vec::with_capacity(widths.len());
    let mut start = 0;
    for &w in widths {
        blocks.push(Matrix::from_vec(
            rows,
            w,
            columns(&values, width, start, w),
        )?);
        masks.push(columns(&masked, width, start, w));
        start += w;
    }
    Ok(Samples { blocks, masks })
}

fn columns<T: Copy>(src: &[T], stride: usize, start: usize, w: usize) -> Vec<T> {
    src.chunks(stride)
        .flat_map(|row| row[start..start + w].iter().copied())
        .collect()
}

pub fn write_predictions(predictions: &[usize], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row", "prediction"])?;
    for (row, p) in predictions.iter().enumerate() {
        w.write_record([row.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs a batch prediction job and returns the written predictions path.
pub fn run_batch(spec: &InferSpec, out_dir: &Path) -> Result<PathBuf> {
    let bundle = Checkpoint::load(&spec.checkpoint)?.to_bundle()?;
    let widths = match spec.mode {
        InferenceMode::Collaborative => bundle.client_dims(),
        _ => {
            let i = spec
                .client
                .ok_or_else(|| Error::config("independent inference needs `client`"))?;
            let dims = bundle.client_dims();
            vec![*dims.get(i).ok_or_else(|| {
                Error::config(format!(
                    "client {i} out of range for {} clients",
                    dims.len()
                ))
            })?]
        }
    };
    let file = std::fs::File::open(&spec.input).map_err(|e| Error::io(&spec.input, e))?;
    let samples = read_samples_csv(file, &widths)?;
    let predictions = InferenceRequest {
        mode: spec.mode,
        client: spec.client,
        samples,
    }
    .run(&bundle)?;
    let path = spec
        .output
        .clone()
        .unwrap_or_else(|| out_dir.join("predictions.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_predictions(&predictions, &path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchConfig;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn arch() -> ArchConfig {
        ArchConfig {
            embed_dim: 5,
            bottom_hidden: vec![6],
            top_hidden: vec![4],
            xcom_hidden: Some(vec![6]),
        }
    }

    fn block(n: usize, d: usize, seed: u64) -> Matrix {
        let mut r = rng::stream(seed, "test/block");
        Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect(),
        )
        .unwrap()
    }

    fn random_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
        let mut r = rng::stream(seed, "test/mask");
        (0..len).map(|_| r.random::<f64>() < rate).collect()
    }

    #[test]
    fn masked_input_rejected_in_mode_one() {
        let b = ModelBundle::new(&arch(), &[3, 2], 3, 0).unwrap();
        let x = block(4, 3, 1);
        let mut mask = vec![false; 12];
        mask[5] = true;
        let err = infer_independent(&b, 0, &x, &mask).unwrap_err();
        assert!(err.to_string().contains("independent_with_missing"));
    }

    #[test]
    fn independent_mode_reads_only_own_client() {
        let b = ModelBundle::new(&arch(), &[3, 2, 4], 3, 0).unwrap();
        let x = block(10, 3, 2);
        let mask = vec![false; 30];
        let clean = infer_independent(&b, 0, &x, &mask).unwrap();
        let clean2 = infer_independent_with_missing(&b, 0, &x, &mask).unwrap();
        let mut poisoned = b.clone();
        for i in 1..3 {
            let mut p = Vec::new();
            poisoned.bottoms[i].flatten_into(&mut p);
            p.iter_mut().for_each(|v| *v = f64::NAN);
            poisoned.bottoms[i].load_from(&p).unwrap();
            let mut p = Vec::new();
            poisoned.xcoms[i].flatten_into(&mut p);
            p.iter_mut().for_each(|v| *v = f64::NAN);
            poisoned.xcoms[i].load_from(&p).unwrap();
        }
        assert_eq!(infer_independent(&poisoned, 0, &x, &mask).unwrap(), clean);
        assert_eq!(
            infer_independent_with_missing(&poisoned, 0, &x, &mask).unwrap(),
            clean2
        );
        let view = poisoned.client_view(0).unwrap();
        assert!(independent_logits(&view, &x).unwrap().is_finite());
    }

    #[test]
    fn empty_mask_makes_mode_two_equal_mode_one() {
        let b = ModelBundle::new(&arch(), &[3, 2], 3, 4).unwrap();
        let x = block(12, 2, 3);
        let view = b.client_view(1).unwrap();
        let a = independent_logits(&view, &x).unwrap();
        let c = self_completed_logits(&view, &x, &[false; 24]).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn full_mask_gives_valid_classes() {
        let b = ModelBundle::new(&arch(), &[3, 2], 4, 5).unwrap();
        let x = block(9, 3, 4);
        let pred = infer_independent_with_missing(&b, 0, &x, &[true; 27]).unwrap();
        assert_eq!(pred.len(), 9);
        assert!(pred.iter().all(|&p| p < 4));
    }

    #[test]
    fn single_client_modes_agree() {
        let b = ModelBundle::new(&arch(), &[4], 3, 6).unwrap();
        let x = block(15, 4, 5);
        let mask = vec![false; 60];
        let solo = infer_independent(&b, 0, &x, &mask).unwrap();
        let joint = infer_collaborative(&b, &[x], &[mask]).unwrap();
        assert_eq!(solo, joint);
    }

    #[test]
    fn all_full_collaborative_averages_embeddings() {
        let b = ModelBundle::new(&arch(), &[3, 2], 3, 7).unwrap();
        let xa = block(8, 3, 6);
        let xb = block(8, 2, 7);
        let ea = b.bottoms[0].predict(&xa).unwrap();
        let eb = b.bottoms[1].predict(&xb).unwrap();
        let want = argmax_rows(&b.top.predict(&ea.add(&eb).unwrap().scale(0.5)).unwrap());
        let got = infer_collaborative(&b, &[xa, xb], &[vec![false; 24], vec![false; 16]]).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn identical_embeddings_reduce_to_one_client() {
        let mut b = ModelBundle::new(&arch(), &[3, 3], 3, 8).unwrap();
        b.bottoms[1] = b.bottoms[0].clone();
        let x = block(10, 3, 8);
        let mask = vec![false; 30];
        let joint = infer_collaborative(&b, &[x.clone(), x.clone()], &[mask.clone(), mask.clone()])
            .unwrap();
        assert_eq!(joint, infer_independent(&b, 0, &x, &mask).unwrap());
    }

    #[test]
    fn collaborative_is_permutation_invariant() {
        let dims = [3, 2, 4];
        let b = ModelBundle::new(&arch(), &dims, 3, 9).unwrap();
        let n = 20;
        let blocks: Vec<Matrix> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| block(n, d, 10 + i as u64))
            .collect();
        let masks: Vec<Vec<bool>> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut m = random_mask(n * d, 0.3, 20 + i as u64);
                // keep client i full on every third row
                for s in (i..n).step_by(3) {
                    m[s * d..(s + 1) * d].iter_mut().for_each(|v| *v = false);
                }
                m
            })
            .collect();
        let base = infer_collaborative(&b, &blocks, &masks).unwrap();
        let base_logits = collaborative_logits(&b, &blocks, &masks).unwrap();
        let mut r = rng::stream(0, "test/perm");
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..3).collect();
            for i in (1..3).rev() {
                perm.swap(i, r.random_range(0..=i));
            }
            let pb = ModelBundle {
                bottoms: perm.iter().map(|&i| b.bottoms[i].clone()).collect(),
                xcoms: perm.iter().map(|&i| b.xcoms[i].clone()).collect(),
                top: b.top.clone(),
            };
            let blocks_p: Vec<Matrix> = perm.iter().map(|&i| blocks[i].clone()).collect();
            let masks_p: Vec<Vec<bool>> = perm.iter().map(|&i| masks[i].clone()).collect();
            assert_eq!(infer_collaborative(&pb, &blocks_p, &masks_p).unwrap(), base);
            let lp = collaborative_logits(&pb, &blocks_p, &masks_p).unwrap();
            for (x, y) in lp.data().iter().zip(base_logits.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_features_anywhere_is_rejected() {
        let b = ModelBundle::new(&arch(), &[3, 2], 3, 0).unwrap();
        let err = infer_collaborative(
            &b,
            &[block(2, 3, 0), block(2, 2, 1)],
            &[vec![true; 6], vec![true; 4]],
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn accuracy_oracle() {
        assert_eq!(evaluate_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!(evaluate_accuracy(&[], &[]).is_err());
        assert!(evaluate_accuracy(&[1], &[1, 2]).is_err());
        let mut r = rng::stream(1, "test/acc");
        let p: Vec<usize> = (0..500).map(|_| r.random_range(0..4)).collect();
        let y: Vec<usize> = (0..500).map(|_| r.random_range(0..4)).collect();
        let mut hits = 0;
        for i in 0..500 {
            if p[i] == y[i] {
                hits += 1;
            }
        }
        assert_eq!(evaluate_accuracy(&p, &y).unwrap(), hits as f64 / 500.0);
    }

    #[test]
    fn csv_samples_split_into_client_blocks() {
        let text = "a,b,c,mask_a,mask_b,mask_c\n1,2,3,0,1,0\n4,,6,0,0,0\n";
        let s = read_samples_csv(text.as_bytes(), &[1, 2]).unwrap();
        assert_eq!(s.blocks[0].data(), &[1.0, 4.0]);
        assert_eq!(s.blocks[1].data(), &[SENTINEL, 3.0, SENTINEL, 6.0]);
        assert_eq!(s.masks[0], vec![false, false]);
        assert_eq!(s.masks[1], vec![true, false, true, false]);
    }

    #[test]
    fn csv_width_and_values_are_checked() {
        assert!(matches!(
            read_samples_csv("a,b\n1,2\n".as_bytes(), &[3]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            read_samples_csv("a,mask_a,mask_b\n1,0,0\n".as_bytes(), &[1]),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            read_samples_csv("a\nx\n".as_bytes(), &[1]),
            Err(Error::Validation(_))
        ));
        let s = read_samples_csv("a\nNaN\n".as_bytes(), &[1]).unwrap();
        assert_eq!(s.masks[0], vec![true]);
    }
}
