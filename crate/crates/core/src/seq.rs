//! Fixed-length aligned sequence features and pooled embedding ingestion.
//!
//! VH and VL chains are placed on a fixed 152-position frame. When a
//! position map (an externally computed numbering assignment) is available
//! it dictates placement; otherwise residues are left-justified and the
//! tail padded with gaps. The one-hot encoding carries an explicit 21st
//! gap symbol so positional information survives alignment.

use std::collections::BTreeMap;
use std::io::Read;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::{amino_index, Orientation, AMINO_ACIDS};
use crate::error::{CoreError, Result};

/// Fixed aligned length for both VH and VL.
pub const ALIGNED_LEN: usize = 152;
/// Alphabet size including the gap symbol.
pub const N_SYMBOLS: usize = 21;
/// Symbol index of the gap.
pub const GAP: u8 = 20;

/// Which chain a matrix or structure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChainId {
    VH,
    VL,
}

impl ChainId {
    pub fn parse(s: &str) -> Option<ChainId> {
        match s {
            "VH" => Some(ChainId::VH),
            "VL" => Some(ChainId::VL),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChainId::VH => "VH",
            ChainId::VL => "VL",
        }
    }
}

/// A chain placed on the fixed 152-position frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedChain {
    /// Symbol index per position, `GAP` where unoccupied.
    symbols: [u8; ALIGNED_LEN],
    source_len: usize,
}

impl AlignedChain {
    pub fn symbols(&self) -> &[u8; ALIGNED_LEN] {
        &self.symbols
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn gap_count(&self) -> usize {
        self.symbols.iter().filter(|&&s| s == GAP).count()
    }
}

/// Injective, order-preserving residue → frame-position assignment.
///
/// Residue indices and frame positions are both 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionMap {
    pub assignments: Vec<(usize, usize)>,
}

impl PositionMap {
    pub fn new(assignments: Vec<(usize, usize)>) -> Result<PositionMap> {
        let mut prev: Option<(usize, usize)> = None;
        for &(res, pos) in &assignments {
            if res < 1 || pos < 1 || pos > ALIGNED_LEN {
                return Err(CoreError::config(format!(
                    "position map entry ({res},{pos}) out of bounds"
                )));
            }
            if let Some((pres, ppos)) = prev {
                if res <= pres || pos <= ppos {
                    return Err(CoreError::config(format!(
                        "position map must be strictly increasing, ({res},{pos}) after ({pres},{ppos})"
                    )));
                }
            }
            prev = Some((res, pos));
        }
        Ok(PositionMap { assignments })
    }

    /// Parse a two-column whitespace- or comma-separated integer file.
    pub fn parse<R: Read>(r: R) -> Result<PositionMap> {
        let content = std::io::read_to_string(r)?;
        let mut assignments = Vec::new();
        for (i, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> =
                line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
            if fields.len() != 2 {
                return Err(CoreError::parse(i + 1, "expected two integer columns"));
            }
            let res = fields[0]
                .parse::<usize>()
                .map_err(|_| CoreError::parse(i + 1, "bad residue index"))?;
            let pos = fields[1]
                .parse::<usize>()
                .map_err(|_| CoreError::parse(i + 1, "bad frame position"))?;
            assignments.push((res, pos));
        }
        PositionMap::new(assignments)
    }
}

/// Place a sequence on the fixed frame.
///
/// With a map, residue `i` goes to its assigned position and every other
/// slot is a gap; the map must cover each residue exactly once. Without a
/// map, residues are left-justified.
pub fn align_chain(seq: &str, map: Option<&PositionMap>) -> Result<AlignedChain> {
    let n = seq.chars().count();
    if n == 0 {
        return Err(CoreError::config("cannot align an empty sequence"));
    }
    if n > ALIGNED_LEN {
        return Err(CoreError::config(format!(
            "sequence length {n} exceeds the aligned frame of {ALIGNED_LEN}"
        )));
    }
    let mut indices = Vec::with_capacity(n);
    for c in seq.chars() {
        match amino_index(c) {
            Some(i) => indices.push(i as u8),
            None => {
                return Err(CoreError::config(format!("invalid amino-acid letter `{c}`")));
            }
        }
    }

    let mut symbols = [GAP; ALIGNED_LEN];
    match map {
        None => {
            symbols[..n].copy_from_slice(&indices);
        }
        Some(map) => {
            if map.assignments.len() != n {
                return Err(CoreError::config(format!(
                    "position map covers {} residues but sequence has {n}",
                    map.assignments.len()
                )));
            }
            for &(res, pos) in &map.assignments {
                if res > n {
                    return Err(CoreError::config(format!(
                        "position map refers to residue {res} beyond sequence length {n}"
                    )));
                }
                symbols[pos - 1] = indices[res - 1];
            }
        }
    }
    Ok(AlignedChain { symbols, source_len: n })
}

/// Linker vocabulary frozen at featurization time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkerVocab {
    ids: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl LinkerVocab {
    /// Build from observed linker ids: sorted, deduplicated.
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> LinkerVocab {
        let mut ids: Vec<String> = ids.into_iter().collect();
        ids.sort();
        ids.dedup();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        LinkerVocab { ids, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self.ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, linker_id: &str) -> Option<usize> {
        self.index.get(linker_id).copied()
    }
}

/// Dimension of the one-hot feature vector for a given vocabulary size.
pub fn one_hot_dim(vocab_len: usize) -> usize {
    2 * ALIGNED_LEN * N_SYMBOLS + 2 + vocab_len
}

/// One-hot encoding of a construct.
///
/// Layout: `[VH 152×21] ++ [VL 152×21] ++ [orientation ×2] ++ [linker ×|vocab|]`.
/// The VH/VL block order is fixed regardless of orientation; the construct
/// orientation is carried by its own categorical block.
pub fn one_hot_features(
    vh: &AlignedChain,
    vl: &AlignedChain,
    orientation: Orientation,
    linker_id: &str,
    vocab: &LinkerVocab,
) -> Result<Vec<f64>> {
    let linker_pos = vocab
        .position(linker_id)
        .ok_or_else(|| CoreError::config(format!("linker `{linker_id}` not in vocabulary")))?;

    let mut out = vec![0.0; one_hot_dim(vocab.len())];
    for (p, &s) in vh.symbols.iter().enumerate() {
        out[p * N_SYMBOLS + s as usize] = 1.0;
    }
    let vl_base = ALIGNED_LEN * N_SYMBOLS;
    for (p, &s) in vl.symbols.iter().enumerate() {
        out[vl_base + p * N_SYMBOLS + s as usize] = 1.0;
    }
    let orient_base = 2 * ALIGNED_LEN * N_SYMBOLS;
    match orientation {
        Orientation::VhVl => out[orient_base] = 1.0,
        Orientation::VlVh => out[orient_base + 1] = 1.0,
    }
    out[orient_base + 2 + linker_pos] = 1.0;
    Ok(out)
}

/// Human-readable labels matching [`one_hot_features`] column order.
pub fn one_hot_labels(vocab: &LinkerVocab) -> Vec<String> {
    let mut labels = Vec::with_capacity(one_hot_dim(vocab.len()));
    for chain in ["VH", "VL"] {
        for pos in 1..=ALIGNED_LEN {
            for s in 0..N_SYMBOLS {
                let sym = if s == GAP as usize { '-' } else { AMINO_ACIDS[s] };
                labels.push(format!("{chain}:{pos:03}:{sym}"));
            }
        }
    }
    labels.push("orient:VH_VL".to_string());
    labels.push("orient:VL_VH".to_string());
    for id in vocab.ids() {
        labels.push(format!("linker:{id}"));
    }
    labels
}

/// A residue-level embedding matrix for one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub chain: ChainId,
    pub values: Array2<f64>,
}

impl EmbeddingMatrix {
    pub fn new(chain: ChainId, values: Array2<f64>) -> Result<EmbeddingMatrix> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(CoreError::config("embedding matrix must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::numerical("embedding matrix contains non-finite values"));
        }
        Ok(EmbeddingMatrix { chain, values })
    }

    /// Parse the text format: a `chain_id,rows,cols` header followed by
    /// one comma-separated row of values per line.
    pub fn parse<R: Read>(r: R) -> Result<EmbeddingMatrix> {
        let content = std::io::read_to_string(r)?;
        let mut lines = content.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| CoreError::parse(1, "empty embedding file"))?;
        let parts: Vec<&str> = header.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(CoreError::parse(1, "expected header `chain_id,rows,cols`"));
        }
        let chain = ChainId::parse(parts[0])
            .ok_or_else(|| CoreError::parse(1, format!("unknown chain id `{}`", parts[0])))?;
        let rows: usize =
            parts[1].parse().map_err(|_| CoreError::parse(1, "bad row count"))?;
        let cols: usize =
            parts[2].parse().map_err(|_| CoreError::parse(1, "bad column count"))?;

        let mut values = Array2::zeros((rows, cols));
        let mut filled = 0usize;
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if filled >= rows {
                return Err(CoreError::parse(lineno + 1, "more rows than declared"));
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CoreError::parse(lineno + 1, "bad embedding value"))?;
            if row.len() != cols {
                return Err(CoreError::parse(
                    lineno + 1,
                    format!("expected {cols} values, got {}", row.len()),
                ));
            }
            for (j, v) in row.into_iter().enumerate() {
                values[(filled, j)] = v;
            }
            filled += 1;
        }
        if filled != rows {
            return Err(CoreError::config(format!(
                "embedding file declared {rows} rows but contains {filled}"
            )));
        }
        EmbeddingMatrix::new(chain, values)
    }

    pub fn write<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{},{},{}", self.chain.as_str(), self.values.nrows(), self.values.ncols())?;
        for row in self.values.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Column-wise arithmetic mean over residues.
pub fn pool_embedding(m: &EmbeddingMatrix) -> Result<Vec<f64>> {
    let rows = m.values.nrows();
    if rows == 0 {
        return Err(CoreError::config("cannot pool an empty embedding"));
    }
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numerical("embedding contains non-finite values"));
    }
    Ok(m.values
        .columns()
        .into_iter()
        .map(|col| col.sum() / rows as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    #[test]
    fn exact_fit_has_no_gaps() {
        let seq: String = std::iter::repeat('A').take(ALIGNED_LEN).collect();
        let chain = align_chain(&seq, None).unwrap();
        assert_eq!(chain.gap_count(), 0);
        assert_eq!(chain.source_len(), ALIGNED_LEN);
    }

    #[test]
    fn mapped_alignment_places_gaps() {
        let map = PositionMap::new(vec![(1, 1), (2, 5), (3, 6)]).unwrap();
        let chain = align_chain("ACD", Some(&map)).unwrap();
        let s = chain.symbols();
        assert_eq!(s[0], 0); // A
        assert_eq!(s[4], 1); // C
        assert_eq!(s[5], 2); // D
        for p in [1, 2, 3].into_iter().chain(6..ALIGNED_LEN) {
            assert_eq!(s[p], GAP, "expected gap at {p}");
        }
    }

    #[test]
    fn duplicate_map_position_rejected() {
        assert!(PositionMap::new(vec![(1, 3), (2, 3)]).is_err());
        assert!(PositionMap::new(vec![(1, 5), (2, 4)]).is_err());
    }

    #[test]
    fn too_long_sequence_rejected() {
        let seq: String = std::iter::repeat('A').take(ALIGNED_LEN + 1).collect();
        assert!(align_chain(&seq, None).is_err());
    }

    #[test]
    fn one_hot_dimension_and_block_sums() {
        let vocab = LinkerVocab::from_ids((0..8).map(|i| format!("L{i}")));
        assert_eq!(one_hot_dim(vocab.len()), 6394);
        let vh = align_chain("ACDEF", None).unwrap();
        let vl = align_chain("GHIKL", None).unwrap();
        let v = one_hot_features(&vh, &vl, Orientation::VhVl, "L3", &vocab).unwrap();
        assert_eq!(v.len(), 6394);
        for block in 0..(2 * ALIGNED_LEN) {
            let sum: f64 = v[block * N_SYMBOLS..(block + 1) * N_SYMBOLS].iter().sum();
            assert_eq!(sum, 1.0, "block {block} must be one-hot");
        }
        assert_eq!(&v[6384..6386], &[1.0, 0.0]);
        let v2 = one_hot_features(&vh, &vl, Orientation::VlVh, "L3", &vocab).unwrap();
        assert_eq!(&v2[6384..6386], &[0.0, 1.0]);
        assert_eq!(one_hot_labels(&vocab).len(), v.len());
    }

    #[test]
    fn all_gap_positions_hit_gap_channel() {
        let vocab = LinkerVocab::from_ids(["L0".to_string()]);
        let vh = align_chain("A", None).unwrap();
        let vl = align_chain("C", None).unwrap();
        let v = one_hot_features(&vh, &vl, Orientation::VhVl, "L0", &vocab).unwrap();
        // Position 2 of VH onward is all gaps.
        for p in 1..ALIGNED_LEN {
            assert_eq!(v[p * N_SYMBOLS + GAP as usize], 1.0);
        }
    }

    #[test]
    fn unknown_linker_rejected() {
        let vocab = LinkerVocab::from_ids(["L0".to_string()]);
        let vh = align_chain("A", None).unwrap();
        let vl = align_chain("C", None).unwrap();
        assert!(one_hot_features(&vh, &vl, Orientation::VhVl, "Lx", &vocab).is_err());
    }

    #[test]
    fn pooling_means_columns() {
        let m = EmbeddingMatrix::new(ChainId::VH, array![[1.0, 3.0], [3.0, 5.0]]).unwrap();
        assert_eq!(pool_embedding(&m).unwrap(), vec![2.0, 4.0]);
        let single = EmbeddingMatrix::new(ChainId::VL, array![[7.0, -2.0]]).unwrap();
        assert_eq!(pool_embedding(&single).unwrap(), vec![7.0, -2.0]);
    }

    #[test]
    fn pooling_matches_column_sum_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let values = Array2::from_shape_fn((100, 48), |_| rng.random_range(-1.0..1.0));
        let m = EmbeddingMatrix::new(ChainId::VH, values.clone()).unwrap();
        let pooled = pool_embedding(&m).unwrap();
        for j in 0..48 {
            let mut total = 0.0;
            for i in 0..100 {
                total += values[(i, j)];
            }
            assert!((pooled[j] - total / 100.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let m = EmbeddingMatrix::new(
            ChainId::VH,
            array![[1.0, 2.0], [5.0, -1.0], [0.5, 0.25]],
        )
        .unwrap();
        let permuted = EmbeddingMatrix::new(
            ChainId::VH,
            array![[0.5, 0.25], [1.0, 2.0], [5.0, -1.0]],
        )
        .unwrap();
        assert_eq!(pool_embedding(&m).unwrap(), pool_embedding(&permuted).unwrap());
    }

    #[test]
    fn embedding_text_round_trip() {
        let m = EmbeddingMatrix::new(ChainId::VL, array![[1.5, -0.25], [0.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = EmbeddingMatrix::parse(buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn non_finite_embedding_rejected() {
        assert!(EmbeddingMatrix::new(ChainId::VH, array![[f64::NAN]]).is_err());
    }
}
