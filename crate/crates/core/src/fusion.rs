//! Modality blocks, ablation masks, design-matrix assembly, and scaling.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Feature block kinds. The first four are fuseable mask modalities in
/// fixed assembly order; `Emb` tags pooled-embedding blocks, which feed the
/// MLP directly and never enter the mask-based fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Seq,
    Struct,
    Rmsd,
    Bio,
    Emb,
}

pub const ALL_MODALITIES: [Modality; 4] =
    [Modality::Seq, Modality::Struct, Modality::Rmsd, Modality::Bio];

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Seq => "seq",
            Modality::Struct => "struct",
            Modality::Rmsd => "rmsd",
            Modality::Bio => "bio",
            Modality::Emb => "emb",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "seq" => Some(Modality::Seq),
            "struct" => Some(Modality::Struct),
            "rmsd" => Some(Modality::Rmsd),
            "bio" => Some(Modality::Bio),
            _ => None,
        }
    }

    /// Whether the modality's columns are continuous (and thus standardized).
    pub fn is_continuous(self) -> bool {
        !matches!(self, Modality::Seq)
    }
}

/// A set of enabled modalities; at least one must be set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityMask {
    pub seq: bool,
    #[serde(rename = "struct")]
    pub struct_: bool,
    pub rmsd: bool,
    pub bio: bool,
}

impl ModalityMask {
    pub fn of(modalities: &[Modality]) -> ModalityMask {
        let mut mask =
            ModalityMask { seq: false, struct_: false, rmsd: false, bio: false };
        for m in modalities {
            mask.set(*m);
        }
        mask
    }

    pub fn all() -> ModalityMask {
        ModalityMask::of(&ALL_MODALITIES)
    }

    fn set(&mut self, m: Modality) {
        match m {
            Modality::Seq => self.seq = true,
            Modality::Struct => self.struct_ = true,
            Modality::Rmsd => self.rmsd = true,
            Modality::Bio => self.bio = true,
            Modality::Emb => {}
        }
    }

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Seq => self.seq,
            Modality::Struct => self.struct_,
            Modality::Rmsd => self.rmsd,
            Modality::Bio => self.bio,
            Modality::Emb => false,
        }
    }

    pub fn enabled(&self) -> Vec<Modality> {
        ALL_MODALITIES.iter().copied().filter(|m| self.contains(*m)).collect()
    }

    pub fn is_subset_of(&self, other: &ModalityMask) -> bool {
        ALL_MODALITIES.iter().all(|&m| !self.contains(m) || other.contains(m))
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled().is_empty() {
            return Err(CoreError::config("modality mask must enable at least one modality"));
        }
        Ok(())
    }

    /// Parse a comma-separated list such as `seq,struct,bio`.
    pub fn parse(s: &str) -> Result<ModalityMask> {
        let mut mask = ModalityMask { seq: false, struct_: false, rmsd: false, bio: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = Modality::parse(part)
                .ok_or_else(|| CoreError::config(format!("unknown modality `{part}`")))?;
            mask.set(m);
        }
        mask.validate()?;
        Ok(mask)
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.enabled().iter().map(|m| m.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

/// A column-labeled numeric matrix for one modality, row-aligned to a
/// signature list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub modality: Modality,
    pub labels: Vec<String>,
    pub data: Array2<f64>,
}

impl FeatureBlock {
    pub fn new(modality: Modality, labels: Vec<String>, data: Array2<f64>) -> Result<FeatureBlock> {
        if labels.len() != data.ncols() {
            return Err(CoreError::dimension(format!(
                "{} labels for {} columns",
                labels.len(),
                data.ncols()
            )));
        }
        Ok(FeatureBlock { modality, labels, data })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Write as `<stem>.bin` (little-endian f64, row-major) plus a
    /// `<stem>.json` sidecar carrying shape, modality, and column labels.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let sidecar = BlockSidecar {
            modality: self.modality,
            rows: self.rows(),
            cols: self.cols(),
            labels: self.labels.clone(),
        };
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in self.data.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<FeatureBlock> {
        let sidecar_path = dir.join(format!("{stem}.json"));
        let bin_path = dir.join(format!("{stem}.bin"));
        if !sidecar_path.exists() || !bin_path.exists() {
            return Err(CoreError::MissingArtifact(format!(
                "feature block `{stem}` in {}",
                dir.display()
            )));
        }
        let sidecar: BlockSidecar = serde_json::from_slice(&fs::read(&sidecar_path)?)?;
        let mut file = fs::File::open(&bin_path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let expected = sidecar.rows * sidecar.cols * 8;
        if bytes.len() != expected {
            return Err(CoreError::dimension(format!(
                "block `{stem}`: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let data = Array2::from_shape_vec((sidecar.rows, sidecar.cols), values)
            .map_err(|e| CoreError::dimension(e.to_string()))?;
        FeatureBlock::new(sidecar.modality, sidecar.labels, data)
    }
}

#[derive(Serialize, Deserialize)]
struct BlockSidecar {
    modality: Modality,
    rows: usize,
    cols: usize,
    labels: Vec<String>,
}

/// Label of one design-matrix column: its modality and index within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub modality: Modality,
    pub index: usize,
    pub name: String,
}

/// Horizontally concatenated feature blocks with column provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub data: Array2<f64>,
    pub columns: Vec<ColumnLabel>,
    pub scaler: Option<Scaler>,
}

impl DesignMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    /// Flags marking columns that belong to continuous modalities.
    pub fn continuous_columns(&self) -> Vec<bool> {
        self.columns.iter().map(|c| c.modality.is_continuous()).collect()
    }
}

/// Concatenate the enabled blocks in fixed modality order.
///
/// All enabled blocks must agree on row count and row order, and the result
/// must be fully finite (impute upstream).
pub fn assemble(blocks: &[&FeatureBlock], mask: &ModalityMask) -> Result<DesignMatrix> {
    mask.validate()?;
    let mut picked: Vec<&FeatureBlock> = Vec::new();
    for modality in ALL_MODALITIES {
        if !mask.contains(modality) {
            continue;
        }
        let block = blocks
            .iter()
            .find(|b| b.modality == modality)
            .ok_or_else(|| {
                CoreError::MissingArtifact(format!(
                    "feature block for enabled modality `{}`",
                    modality.as_str()
                ))
            })?;
        picked.push(block);
    }

    let rows = picked[0].rows();
    for b in &picked {
        if b.rows() != rows {
            return Err(CoreError::dimension(format!(
                "block `{}` has {} rows, expected {rows}",
                b.modality.as_str(),
                b.rows()
            )));
        }
    }

    let total_cols: usize = picked.iter().map(|b| b.cols()).sum();
    let mut data = Array2::zeros((rows, total_cols));
    let mut columns = Vec::with_capacity(total_cols);
    let mut offset = 0;
    for b in &picked {
        data.slice_mut(ndarray::s![.., offset..offset + b.cols()]).assign(&b.data);
        for (i, name) in b.labels.iter().enumerate() {
            columns.push(ColumnLabel { modality: b.modality, index: i, name: name.clone() });
        }
        offset += b.cols();
    }

    if data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("assembled design matrix contains non-finite entries"));
    }
    Ok(DesignMatrix { data, columns, scaler: None })
}

/// Per-column standardization parameters fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub continuous: Vec<bool>,
}

impl Scaler {
    /// Fit mean and population standard deviation on the given rows,
    /// restricted to continuous columns.
    pub fn fit(x: ArrayView2<f64>, continuous: &[bool]) -> Result<Scaler> {
        if continuous.len() != x.ncols() {
            return Err(CoreError::dimension("continuous flags must match column count"));
        }
        let n = x.nrows() as f64;
        if x.nrows() == 0 {
            return Err(CoreError::config("cannot fit a scaler on zero rows"));
        }
        let mut mean = vec![0.0; x.ncols()];
        let mut std = vec![0.0; x.ncols()];
        for (j, col) in x.columns().into_iter().enumerate() {
            if !continuous[j] {
                continue;
            }
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = var.sqrt();
        }
        Ok(Scaler { mean, std, continuous: continuous.to_vec() })
    }

    /// Z-score continuous columns in place. Columns whose training std was
    /// zero map to zero; one-hot columns pass through untouched.
    pub fn apply(&self, x: &mut Array2<f64>) -> Result<()> {
        if x.ncols() != self.continuous.len() {
            return Err(CoreError::dimension("matrix does not match fitted scaler width"));
        }
        for (j, mut col) in x.columns_mut().into_iter().enumerate() {
            if !self.continuous[j] {
                continue;
            }
            let (m, s) = (self.mean[j], self.std[j]);
            if s == 0.0 {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(())
    }
}

/// Fit a scaler on `x_train`, then standardize both matrices in place.
pub fn fit_apply_scaler(
    x_train: &mut Array2<f64>,
    x_other: &mut Array2<f64>,
    continuous: &[bool],
) -> Result<Scaler> {
    let scaler = Scaler::fit(x_train.view(), continuous)?;
    scaler.apply(x_train)?;
    scaler.apply(x_other)?;
    Ok(scaler)
}

/// Persist a design matrix next to its column manifest.
pub fn save_design_matrix(dm: &DesignMatrix, dir: &Path, stem: &str) -> Result<()> {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        rows: usize,
        cols: usize,
        columns: &'a [ColumnLabel],
        scaler: &'a Option<Scaler>,
    }
    fs::create_dir_all(dir)?;
    let sidecar =
        Sidecar { rows: dm.rows(), cols: dm.cols(), columns: &dm.columns, scaler: &dm.scaler };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&sidecar)?)?;
    let mut out = fs::File::create(dir.join(format!("{stem}.bin")))?;
    for v in dm.data.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn block(modality: Modality, cols: usize, rows: usize, fill: f64) -> FeatureBlock {
        let labels = (0..cols).map(|i| format!("{}:{i}", modality.as_str())).collect();
        FeatureBlock::new(modality, labels, Array2::from_elem((rows, cols), fill)).unwrap()
    }

    #[test]
    fn mask_parse_and_display() {
        let mask = ModalityMask::parse("bio, seq").unwrap();
        assert!(mask.seq && mask.bio && !mask.struct_ && !mask.rmsd);
        assert_eq!(mask.to_string(), "seq+bio");
        assert!(ModalityMask::parse("").is_err());
        assert!(ModalityMask::parse("seq,wat").is_err());
    }

    #[test]
    fn single_block_assembly_is_identity() {
        let seq = block(Modality::Seq, 4, 3, 1.0);
        let dm = assemble(&[&seq], &ModalityMask::of(&[Modality::Seq])).unwrap();
        assert_eq!(dm.data, seq.data);
        assert_eq!(dm.cols(), 4);
    }

    #[test]
    fn concatenation_dims_add_up() {
        let seq = block(Modality::Seq, 6394, 2, 0.0);
        let st = block(Modality::Struct, 2432, 2, 0.0);
        let dm =
            assemble(&[&seq, &st], &ModalityMask::of(&[Modality::Seq, Modality::Struct])).unwrap();
        assert_eq!(dm.cols(), 8826);
    }

    #[test]
    fn rmsd_only_has_two_columns() {
        let rmsd = block(Modality::Rmsd, 2, 5, 1.5);
        let dm = assemble(&[&rmsd], &ModalityMask::of(&[Modality::Rmsd])).unwrap();
        assert_eq!(dm.cols(), 2);
    }

    #[test]
    fn row_mismatch_rejected() {
        let seq = block(Modality::Seq, 3, 2, 0.0);
        let st = block(Modality::Struct, 3, 4, 0.0);
        assert!(
            assemble(&[&seq, &st], &ModalityMask::of(&[Modality::Seq, Modality::Struct])).is_err()
        );
    }

    #[test]
    fn missing_enabled_block_rejected() {
        let seq = block(Modality::Seq, 3, 2, 0.0);
        assert!(
            assemble(&[&seq], &ModalityMask::of(&[Modality::Seq, Modality::Bio])).is_err()
        );
    }

    #[test]
    fn submask_columns_are_ordered_subsequence() {
        let seq = block(Modality::Seq, 3, 2, 0.0);
        let st = block(Modality::Struct, 2, 2, 0.0);
        let bio = block(Modality::Bio, 4, 2, 0.0);
        let small = assemble(&[&seq, &bio], &ModalityMask::of(&[Modality::Seq, Modality::Bio]))
            .unwrap();
        let big = assemble(
            &[&seq, &st, &bio],
            &ModalityMask::of(&[Modality::Seq, Modality::Struct, Modality::Bio]),
        )
        .unwrap();
        let mut big_iter = big.columns.iter();
        for c in &small.columns {
            assert!(big_iter.any(|b| b == c), "column {c:?} missing or out of order");
        }
    }

    #[test]
    fn scaler_zscores_train_to_unit() {
        let mut train = array![[1.0, 10.0], [3.0, 10.0]];
        let mut other = array![[2.0, 7.0]];
        let scaler = fit_apply_scaler(&mut train, &mut other, &[true, true]).unwrap();
        assert_eq!(train, array![[-1.0, 0.0], [1.0, 0.0]]);
        // Constant column maps everything, including new data, to zero.
        assert_eq!(other, array![[0.0, 0.0]]);
        assert_eq!(scaler.std[1], 0.0);
    }

    #[test]
    fn one_hot_columns_untouched() {
        let mut train = array![[1.0, 5.0], [0.0, 9.0]];
        let mut other = array![[1.0, 7.0]];
        fit_apply_scaler(&mut train, &mut other, &[false, true]).unwrap();
        assert_eq!(train.column(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(other[(0, 0)], 1.0);
        // Scaled train column has mean 0 and population std 1.
        let col = train.column(1);
        let mean: f64 = col.sum() / 2.0;
        let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0;
        assert!(mean.abs() <= 1e-9);
        assert!((var.sqrt() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn non_finite_assembly_rejected() {
        let mut data = Array2::zeros((2, 2));
        data[(0, 0)] = f64::NAN;
        let b = FeatureBlock::new(
            Modality::Bio,
            vec!["a".to_string(), "b".to_string()],
            data,
        )
        .unwrap();
        assert!(assemble(&[&b], &ModalityMask::of(&[Modality::Bio])).is_err());
    }

    #[test]
    fn block_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = block(Modality::Struct, 5, 4, 2.25);
        b.save(dir.path(), "struct").unwrap();
        let back = FeatureBlock::load(dir.path(), "struct").unwrap();
        assert_eq!(b, back);
        assert!(FeatureBlock::load(dir.path(), "nope").is_err());
    }
}
