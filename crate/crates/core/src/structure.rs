//! Cα structure ingestion, rigid superposition, and paired-coordinate features.
//!
//! Structures arrive as per-residue Cα coordinates on the same fixed
//! 152-position frame the sequences use. For each construct we superpose the
//! scFv domain onto its parental counterpart (per chain, over shared
//! positions), record the per-domain RMSD, and emit per-position channels
//! that pair both coordinate sets in a common centered frame.

use std::collections::BTreeMap;
use std::io::Read;

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seq::{ChainId, ALIGNED_LEN};

/// Coordinate channels per frame position.
pub const CHANNELS: usize = 8;
/// Positions in the concatenated VH+VL frame.
pub const PAIR_POSITIONS: usize = 2 * ALIGNED_LEN;
/// Flattened per-residue feature length: 2 chains × 152 positions × 8 channels.
pub const FLAT_DIM: usize = PAIR_POSITIONS * CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructSource {
    ParentalIgg,
    Scfv,
}

impl StructSource {
    pub fn parse(s: &str) -> Option<StructSource> {
        match s {
            "PARENTAL_IGG" => Some(StructSource::ParentalIgg),
            "SCFV" => Some(StructSource::Scfv),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StructSource::ParentalIgg => "PARENTAL_IGG",
            StructSource::Scfv => "SCFV",
        }
    }
}

/// Cα trace of one variable domain on the fixed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStructure {
    pub chain: ChainId,
    pub source: StructSource,
    /// `(frame_position, [x, y, z])`, positions strictly increasing in [1,152].
    pub coords: Vec<(usize, [f64; 3])>,
}

impl DomainStructure {
    pub fn new(
        chain: ChainId,
        source: StructSource,
        coords: Vec<(usize, [f64; 3])>,
    ) -> Result<DomainStructure> {
        let mut prev = 0usize;
        for &(pos, xyz) in &coords {
            if pos < 1 || pos > ALIGNED_LEN {
                return Err(CoreError::config(format!("frame position {pos} out of [1,152]")));
            }
            if pos <= prev {
                return Err(CoreError::config(format!(
                    "frame positions must be strictly increasing (saw {pos} after {prev})"
                )));
            }
            if xyz.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::numerical(format!(
                    "non-finite coordinate at position {pos}"
                )));
            }
            prev = pos;
        }
        Ok(DomainStructure { chain, source, coords })
    }

    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.coords.iter().map(|&(p, _)| p)
    }

    fn coord_at(&self, pos: usize) -> Option<[f64; 3]> {
        self.coords
            .binary_search_by_key(&pos, |&(p, _)| p)
            .ok()
            .map(|i| self.coords[i].1)
    }
}

/// Parse a structure file: one `chain_id,source,aho_position,x,y,z` line per residue.
pub fn parse_structure_file<R: Read>(r: R) -> Result<Vec<DomainStructure>> {
    let content = std::io::read_to_string(r)?;
    let mut groups: BTreeMap<(ChainId, StructSource), Vec<(usize, [f64; 3])>> = BTreeMap::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(CoreError::parse(i + 1, "expected 6 comma-separated fields"));
        }
        let chain = ChainId::parse(fields[0])
            .ok_or_else(|| CoreError::parse(i + 1, format!("unknown chain `{}`", fields[0])))?;
        let source = StructSource::parse(fields[1])
            .ok_or_else(|| CoreError::parse(i + 1, format!("unknown source `{}`", fields[1])))?;
        let pos: usize =
            fields[2].parse().map_err(|_| CoreError::parse(i + 1, "bad frame position"))?;
        let mut xyz = [0.0; 3];
        for (k, f) in fields[3..6].iter().enumerate() {
            xyz[k] = f
                .parse::<f64>()
                .map_err(|_| CoreError::parse(i + 1, "bad coordinate value"))?;
        }
        groups.entry((chain, source)).or_default().push((pos, xyz));
    }
    groups
        .into_iter()
        .map(|((chain, source), coords)| DomainStructure::new(chain, source, coords))
        .collect()
}

pub fn write_structure_file<W: std::io::Write>(
    domains: &[&DomainStructure],
    mut w: W,
) -> Result<()> {
    for d in domains {
        for &(pos, [x, y, z]) in &d.coords {
            writeln!(w, "{},{},{},{},{},{}", d.chain.as_str(), d.source.as_str(), pos, x, y, z)?;
        }
    }
    Ok(())
}

/// Find a domain in a parsed structure file.
pub fn find_domain(
    domains: &[DomainStructure],
    chain: ChainId,
    source: StructSource,
) -> Result<&DomainStructure> {
    domains
        .iter()
        .find(|d| d.chain == chain && d.source == source)
        .ok_or_else(|| {
            CoreError::MissingArtifact(format!(
                "structure for chain {} / source {}",
                chain.as_str(),
                source.as_str()
            ))
        })
}

/// Parental and scFv domain traces for one construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructurePair {
    pub parental: Vec<DomainStructure>,
    pub scfv: Vec<DomainStructure>,
}

impl StructurePair {
    /// Per-residue features for this construct (VH and VL of both sources).
    pub fn features(&self) -> Result<StructPairFeatures> {
        per_residue_features(
            find_domain(&self.parental, ChainId::VH, StructSource::ParentalIgg)?,
            find_domain(&self.parental, ChainId::VL, StructSource::ParentalIgg)?,
            find_domain(&self.scfv, ChainId::VH, StructSource::Scfv)?,
            find_domain(&self.scfv, ChainId::VL, StructSource::Scfv)?,
        )
    }
}

/// Result of an optimal rigid-body superposition of `P` onto `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Superposition {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub rmsd: f64,
}

impl Superposition {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }
}

/// Optimal proper rotation and translation minimizing the RMSD of `R·p + t` vs `q`.
///
/// Uses the SVD of the 3×3 cross-covariance with determinant-sign reflection
/// correction. Fails for fewer than 3 points or when the centered point
/// cloud is rank-deficient (all points collinear or coincident).
pub fn kabsch_superpose(p: &[[f64; 3]], q: &[[f64; 3]]) -> Result<Superposition> {
    let n = p.len();
    if n != q.len() {
        return Err(CoreError::dimension(format!(
            "point sets differ in size: {n} vs {}",
            q.len()
        )));
    }
    if n < 3 {
        return Err(CoreError::config(format!("superposition needs at least 3 points, got {n}")));
    }

    let mut p_bar = Vector3::zeros();
    let mut q_bar = Vector3::zeros();
    for i in 0..n {
        p_bar += Vector3::from(p[i]);
        q_bar += Vector3::from(q[i]);
    }
    p_bar /= n as f64;
    q_bar /= n as f64;

    // Cross-covariance H = Σ (p−p̄)(q−q̄)ᵀ.
    let mut h = Matrix3::zeros();
    for i in 0..n {
        let pc = Vector3::from(p[i]) - p_bar;
        let qc = Vector3::from(q[i]) - q_bar;
        h += pc * qc.transpose();
    }

    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| CoreError::numerical("SVD failed to produce U"))?;
    let v_t = svd.v_t.ok_or_else(|| CoreError::numerical("SVD failed to produce Vᵀ"))?;
    let s = svd.singular_values;
    if !(s[0].is_finite() && s[1].is_finite()) || s[1] <= s[0] * 1e-12 {
        return Err(CoreError::numerical(
            "degenerate point configuration: cross-covariance rank < 2",
        ));
    }

    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rot = v * correction * u.transpose();
    let trans = q_bar - rot * p_bar;

    let mut sq_sum = 0.0;
    for i in 0..n {
        let mapped = rot * Vector3::from(p[i]) + trans;
        let diff = mapped - Vector3::from(q[i]);
        sq_sum += diff.norm_squared();
    }
    let rmsd = (sq_sum / n as f64).sqrt();

    let mut rotation = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rotation[i][j] = rot[(i, j)];
        }
    }
    Ok(Superposition { rotation, translation: [trans[0], trans[1], trans[2]], rmsd })
}

/// Shared frame positions of two domains, with paired coordinates.
fn shared_coords(
    a: &DomainStructure,
    b: &DomainStructure,
) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    let occupied_b: BTreeMap<usize, [f64; 3]> = b.coords.iter().copied().collect();
    for &(pos, xyz) in &a.coords {
        if let Some(&other) = occupied_b.get(&pos) {
            pa.push(xyz);
            pb.push(other);
        }
    }
    (pa, pb)
}

/// RMSD between a parental domain and its scFv counterpart after
/// superposition over their shared frame positions.
pub fn domain_rmsd(parental: &DomainStructure, scfv: &DomainStructure) -> Result<f64> {
    let (p_par, p_scfv) = shared_coords(parental, scfv);
    if p_par.len() < 3 {
        return Err(CoreError::config(format!(
            "domains share only {} positions; need at least 3",
            p_par.len()
        )));
    }
    Ok(kabsch_superpose(&p_scfv, &p_par)?.rmsd)
}

/// Per-residue paired-coordinate features for one parental/scFv construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructPairFeatures {
    pub rmsd_vh: f64,
    pub rmsd_vl: f64,
    /// Flattened `[chain][position][channel]` tensor, length 2·152·8.
    /// Channels: parental x,y,z; scFv x,y,z (in the parental frame);
    /// parental-gap flag; scFv-gap flag.
    pub per_residue: Vec<f64>,
}

impl StructPairFeatures {
    pub fn channels(&self, chain: ChainId, pos: usize) -> &[f64] {
        let c = match chain {
            ChainId::VH => 0,
            ChainId::VL => 1,
        };
        let base = ((c * ALIGNED_LEN) + (pos - 1)) * CHANNELS;
        &self.per_residue[base..base + CHANNELS]
    }

    /// View as a (positions × channels) matrix for convolutional input.
    pub fn positions_by_channels(&self) -> Array2<f64> {
        Array2::from_shape_vec((PAIR_POSITIONS, CHANNELS), self.per_residue.clone())
            .expect("flat length is PAIR_POSITIONS × CHANNELS")
    }
}

/// Build paired-coordinate features for a parental/scFv construct.
///
/// Each scFv chain is first mapped into its parental frame by the optimal
/// rigid superposition over shared positions; both coordinate sets are then
/// centered on the parental occupied-position mean. Absent positions are
/// zero-filled with the matching gap flag set.
pub fn per_residue_features(
    parental_vh: &DomainStructure,
    parental_vl: &DomainStructure,
    scfv_vh: &DomainStructure,
    scfv_vl: &DomainStructure,
) -> Result<StructPairFeatures> {
    let mut per_residue = vec![0.0; FLAT_DIM];
    let mut rmsds = [0.0; 2];

    for (c, (parental, scfv)) in
        [(parental_vh, scfv_vh), (parental_vl, scfv_vl)].into_iter().enumerate()
    {
        let (shared_par, shared_scfv) = shared_coords(parental, scfv);
        if shared_par.len() < 3 {
            return Err(CoreError::config(format!(
                "chain {} shares only {} positions between parental and scFv",
                if c == 0 { "VH" } else { "VL" },
                shared_par.len()
            )));
        }
        let sup = kabsch_superpose(&shared_scfv, &shared_par)?;
        rmsds[c] = sup.rmsd;

        let mut center = [0.0; 3];
        for &(_, xyz) in &parental.coords {
            for k in 0..3 {
                center[k] += xyz[k];
            }
        }
        for v in &mut center {
            *v /= parental.coords.len() as f64;
        }

        for pos in 1..=ALIGNED_LEN {
            let base = ((c * ALIGNED_LEN) + (pos - 1)) * CHANNELS;
            match parental.coord_at(pos) {
                Some(xyz) => {
                    for k in 0..3 {
                        per_residue[base + k] = xyz[k] - center[k];
                    }
                }
                None => per_residue[base + 6] = 1.0,
            }
            match scfv.coord_at(pos) {
                Some(xyz) => {
                    let mapped = sup.apply(xyz);
                    for k in 0..3 {
                        per_residue[base + 3 + k] = mapped[k] - center[k];
                    }
                }
                None => per_residue[base + 7] = 1.0,
            }
        }
    }

    Ok(StructPairFeatures { rmsd_vh: rmsds[0], rmsd_vl: rmsds[1], per_residue })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot_z_90(p: [f64; 3]) -> [f64; 3] {
        [-p[1], p[0], p[2]]
    }

    fn helix(n: usize, phase: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.35 + phase;
                [4.0 * t.cos(), 4.0 * t.sin(), 1.5 * i as f64]
            })
            .collect()
    }

    fn domain(chain: ChainId, source: StructSource, pts: &[[f64; 3]]) -> DomainStructure {
        let coords = pts.iter().enumerate().map(|(i, &p)| (i + 1, p)).collect();
        DomainStructure::new(chain, source, coords).unwrap()
    }

    #[test]
    fn identical_sets_give_zero_rmsd_and_identity_rotation() {
        let pts = helix(12, 0.0);
        let sup = kabsch_superpose(&pts, &pts).unwrap();
        assert!(sup.rmsd <= 1e-10, "rmsd {}", sup.rmsd);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((sup.rotation[i][j] - expect).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rigid_transform_is_recovered() {
        let pts = helix(20, 0.3);
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|&p| {
                let r = rot_z_90(p);
                [r[0] + 5.0, r[1] - 2.0, r[2] + 11.0]
            })
            .collect();
        let sup = kabsch_superpose(&pts, &moved).unwrap();
        assert!(sup.rmsd <= 1e-8, "rmsd {}", sup.rmsd);
        for (p, m) in pts.iter().zip(&moved) {
            let mapped = sup.apply(*p);
            for k in 0..3 {
                assert!((mapped[k] - m[k]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn too_few_or_degenerate_points_error() {
        let two = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert!(kabsch_superpose(&two, &two).is_err());
        let collinear: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(kabsch_superpose(&collinear, &collinear).is_err());
    }

    #[test]
    fn reflection_is_not_returned_as_rotation() {
        // A mirrored point set must map through a proper rotation (det = +1).
        let pts = helix(10, 0.0);
        let mirrored: Vec<[f64; 3]> = pts.iter().map(|&[x, y, z]| [-x, y, z]).collect();
        let sup = kabsch_superpose(&pts, &mirrored).unwrap();
        let r = &sup.rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() <= 1e-9, "det {det}");
        assert!(sup.rmsd > 0.1, "mirror cannot be matched exactly by a rotation");
    }

    #[test]
    fn domain_rmsd_zero_for_identical_and_invariant_to_rotation() {
        let pts = helix(30, 0.1);
        let parental = domain(ChainId::VH, StructSource::ParentalIgg, &pts);
        let same = domain(ChainId::VH, StructSource::Scfv, &pts);
        assert!(domain_rmsd(&parental, &same).unwrap() <= 1e-10);

        let rotated: Vec<[f64; 3]> = pts.iter().map(|&p| rot_z_90(p)).collect();
        let scfv = domain(ChainId::VH, StructSource::Scfv, &rotated);
        assert!(domain_rmsd(&parental, &scfv).unwrap() <= 1e-8);
    }

    #[test]
    fn rmsd_is_symmetric() {
        let a = helix(15, 0.0);
        let b: Vec<[f64; 3]> = helix(15, 0.0)
            .iter()
            .enumerate()
            .map(|(i, &[x, y, z])| [x + (i as f64 * 0.01), y - 0.02 * i as f64, z])
            .collect();
        let da = domain(ChainId::VH, StructSource::ParentalIgg, &a);
        let db = domain(ChainId::VH, StructSource::Scfv, &b);
        let forward = domain_rmsd(&da, &db).unwrap();
        let backward = domain_rmsd(&db, &da).unwrap();
        assert!((forward - backward).abs() <= 1e-9);
    }

    #[test]
    fn per_residue_gap_flags_and_identity_channels() {
        let pts = helix(40, 0.2);
        let mut scfv_pts: Vec<(usize, [f64; 3])> =
            pts.iter().enumerate().map(|(i, &p)| (i + 1, p)).collect();
        scfv_pts.retain(|&(pos, _)| pos != 37);

        let parental_vh = domain(ChainId::VH, StructSource::ParentalIgg, &pts);
        let parental_vl = domain(ChainId::VL, StructSource::ParentalIgg, &pts);
        let scfv_vh =
            DomainStructure::new(ChainId::VH, StructSource::Scfv, scfv_pts).unwrap();
        let scfv_vl = domain(ChainId::VL, StructSource::Scfv, &pts);

        let feats = per_residue_features(&parental_vh, &parental_vl, &scfv_vh, &scfv_vl).unwrap();
        assert_eq!(feats.per_residue.len(), FLAT_DIM);

        // scFv missing position 37: channels 4–6 zero, scFv-gap flag set.
        let ch = feats.channels(ChainId::VH, 37);
        assert_eq!(&ch[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(ch[6], 0.0);
        assert_eq!(ch[7], 1.0);

        // Identical VL chains: scFv channels equal parental channels, no gaps.
        for pos in 1..=40 {
            let ch = feats.channels(ChainId::VL, pos);
            for k in 0..3 {
                assert!((ch[k] - ch[3 + k]).abs() <= 1e-9);
            }
            assert_eq!(ch[6], 0.0);
            assert_eq!(ch[7], 0.0);
        }
        // Unoccupied tail of the frame carries both gap flags.
        for pos in 41..=ALIGNED_LEN {
            let ch = feats.channels(ChainId::VL, pos);
            assert_eq!(&ch[..6], &[0.0; 6]);
            assert_eq!(ch[6], 1.0);
            assert_eq!(ch[7], 1.0);
        }
        assert!(feats.rmsd_vl <= 1e-10);
    }

    #[test]
    fn gap_flag_excludes_coordinates() {
        let pts = helix(25, 0.0);
        let parental = domain(ChainId::VH, StructSource::ParentalIgg, &pts);
        let scfv = domain(ChainId::VH, StructSource::Scfv, &pts);
        let feats = per_residue_features(&parental, &parental, &scfv, &scfv).unwrap();
        for chain in [ChainId::VH, ChainId::VL] {
            for pos in 1..=ALIGNED_LEN {
                let ch = feats.channels(chain, pos);
                if ch[6] == 1.0 {
                    assert_eq!(&ch[..3], &[0.0; 3]);
                }
                if ch[7] == 1.0 {
                    assert_eq!(&ch[3..6], &[0.0; 3]);
                }
            }
        }
    }

    #[test]
    fn structure_file_round_trip() {
        let pts = helix(10, 0.4);
        let vh = domain(ChainId::VH, StructSource::ParentalIgg, &pts);
        let vl = domain(ChainId::VL, StructSource::ParentalIgg, &pts);
        let mut buf = Vec::new();
        write_structure_file(&[&vh, &vl], &mut buf).unwrap();
        let parsed = parse_structure_file(buf.as_slice()).unwrap();
        assert_eq!(parsed.len(), 2);
        let vh_back = find_domain(&parsed, ChainId::VH, StructSource::ParentalIgg).unwrap();
        assert_eq!(vh_back.coords.len(), 10);
    }
}
