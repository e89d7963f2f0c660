//! Synthetic reformatting benchmark with planted, recoverable ground truth.
//!
//! Families get random VH/VL backbones and helix-like Cα traces; members
//! are point-mutated copies with a per-member structural deformation of
//! magnitude `d`. The latent log-yield is
//!
//! ```text
//! z = base_f + s_f · w · d + seq_term + noise
//! ```
//!
//! where the family sign `s_f ∈ {+1, −1}` flips with a configurable
//! probability. Crucially, the deformation *direction* differs between
//! plus- and minus-signed families (two global per-position fields), so the
//! signed structure contribution is linearly recoverable from per-residue
//! coordinates while the scalar RMSD sees only the magnitude `d` — pooled
//! across sign-mixed families it carries almost no signal. Sequence effects
//! are family-specific, so they do not transfer across held-out families.
//!
//! Yields are `exp`-transformed to a heavy-tailed distribution and the QC
//! threshold is calibrated by sorting so the realized failure rate matches
//! the target.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bio::{write_biophys_csv, BiophysRow};
use crate::dataset::{
    aggregate_by_signature, write_records_csv, Orientation, ReformatRecord, SigKey,
    AMINO_ACIDS,
};
use crate::error::{CoreError, Result};
use crate::seq::{ChainId, ALIGNED_LEN};
use crate::structure::{write_structure_file, DomainStructure, StructSource, StructurePair};

pub const DEFAULT_FAIL_RATE: f64 = 0.409;

/// The eight linker types available to generated constructs.
pub const LINKERS: [&str; 8] =
    ["G4Sx1", "G4Sx2", "G4Sx3", "G4Sx4", "Whitlow", "EAAAK1", "EAAAK3", "GSAT"];

// Fixed shape constants of the generative story.
const BASE_STD: f64 = 0.6;
const SEQ_EFFECT_STD: f64 = 0.45;
const COORD_JITTER: f64 = 0.05;
const SCFV_DROPOUT: f64 = 0.02;
const YIELD_LOG_MEAN: f64 = 3.0;
const YIELD_LOG_STD: f64 = 0.9;
const HELIX_RADIUS: f64 = 4.0;
const HELIX_TURN: f64 = 0.35;
const HELIX_RISE: f64 = 1.5;
const FAMILY_SHAPE_STD: f64 = 0.3;
const BIO_MISSING_RATE: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_families: usize,
    /// Inclusive (min, max) member count per family; min must be ≥ 3.
    pub per_family: (usize, usize),
    /// Per-residue point-mutation probability for family members.
    pub mutation_rate: f64,
    pub target_fail_rate: f64,
    /// Weight `w` of the signed structural term in the latent log-yield.
    pub structure_signal_weight: f64,
    /// Probability that a family's structure→yield sign is flipped.
    pub family_sign_flip_prob: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> GenConfig {
        GenConfig {
            n_families: 50,
            per_family: (25, 35),
            mutation_rate: 0.02,
            target_fail_rate: DEFAULT_FAIL_RATE,
            structure_signal_weight: 1.5,
            family_sign_flip_prob: 0.5,
            noise_std: 0.25,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_families == 0 {
            return Err(CoreError::config("n_families must be positive"));
        }
        if self.per_family.0 < 3 || self.per_family.0 > self.per_family.1 {
            return Err(CoreError::config("per_family needs 3 ≤ min ≤ max"));
        }
        for (name, rate) in [
            ("mutation_rate", self.mutation_rate),
            ("target_fail_rate", self.target_fail_rate),
            ("family_sign_flip_prob", self.family_sign_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(CoreError::config(format!("{name} must be in [0,1]")));
            }
        }
        if self.noise_std < 0.0 || self.structure_signal_weight < 0.0 {
            return Err(CoreError::config("noise_std and signal weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilyTruth {
    pub name: String,
    pub sign: i8,
    pub base: f64,
    pub vh_len: usize,
    pub vl_len: usize,
    /// Planted per-mutation effects: (chain, position, amino idx) → effect.
    pub mutation_effects: Vec<((u8, u16, u8), f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberTruth {
    pub record_ids: Vec<String>,
    pub sig_key: String,
    pub family: String,
    pub deformation: f64,
    pub seq_term: f64,
    pub noise: f64,
    pub z: f64,
    pub yield_value: f64,
    pub qc_pass: u8,
    pub sec_pct: f64,
}

/// Everything needed to recompute every label exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GenConfig,
    pub z_mean: f64,
    pub z_std: f64,
    pub yield_log_mean: f64,
    pub yield_log_std: f64,
    pub qc_threshold_z: f64,
    /// Global deformation direction fields for +1/−1 families:
    /// `[chain][position][xyz]`.
    pub field_plus: Vec<Vec<[f64; 3]>>,
    pub field_minus: Vec<Vec<[f64; 3]>>,
    pub families: Vec<FamilyTruth>,
    pub members: Vec<MemberTruth>,
}

impl GroundTruth {
    /// Recompute the stored yield and QC label from the planted components.
    pub fn recompute_member(&self, m: &MemberTruth) -> (f64, u8) {
        let family = self.families.iter().find(|f| f.name == m.family).expect("family present");
        let z = family.base
            + f64::from(family.sign) * self.config.structure_signal_weight * m.deformation
            + m.seq_term
            + m.noise;
        let z_hat = if self.z_std > 0.0 { (z - self.z_mean) / self.z_std } else { 0.0 };
        let yield_value = (self.yield_log_mean + self.yield_log_std * z_hat).exp();
        (yield_value, u8::from(z > self.qc_threshold_z))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<ReformatRecord>,
    /// Keyed by signature digest.
    pub structures: BTreeMap<String, StructurePair>,
    /// Keyed by canonical signature key.
    pub biophys: BTreeMap<String, BiophysRow>,
    pub truth: GroundTruth,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_sequence(len: usize, rng: &mut ChaCha8Rng) -> String {
    (0..len).map(|_| AMINO_ACIDS[rng.random_range(0..20)]).collect()
}

fn clamp_len(raw: f64, lo: usize, hi: usize) -> usize {
    (raw.round() as i64).clamp(lo as i64, hi as i64) as usize
}

/// A global zero-mean direction field with unit RMS amplitude.
fn draw_field(rng: &mut ChaCha8Rng) -> Vec<Vec<[f64; 3]>> {
    let mut field: Vec<Vec<[f64; 3]>> = (0..2)
        .map(|_| {
            (0..ALIGNED_LEN)
                .map(|_| [normal(rng), normal(rng), normal(rng)])
                .collect::<Vec<_>>()
        })
        .collect();
    for chain in &mut field {
        let mut mean = [0.0; 3];
        for v in chain.iter() {
            for k in 0..3 {
                mean[k] += v[k];
            }
        }
        for m in &mut mean {
            *m /= ALIGNED_LEN as f64;
        }
        let mut ms = 0.0;
        for v in chain.iter_mut() {
            for k in 0..3 {
                v[k] -= mean[k];
                ms += v[k] * v[k];
            }
        }
        let rms = (ms / ALIGNED_LEN as f64).sqrt();
        for v in chain.iter_mut() {
            for k in 0..3 {
                v[k] /= rms;
            }
        }
    }
    field
}

fn helix_backbone(len: usize, phase: f64, shape: &[[f64; 3]]) -> Vec<(usize, [f64; 3])> {
    (0..len)
        .map(|i| {
            let t = i as f64 * HELIX_TURN + phase;
            let base = [
                HELIX_RADIUS * t.cos() + shape[i][0],
                HELIX_RADIUS * t.sin() + shape[i][1],
                HELIX_RISE * i as f64 + shape[i][2],
            ];
            (i + 1, base)
        })
        .collect()
}

fn rotation_from_axis_angle(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply_rigid(r: &[[f64; 3]; 3], t: &[f64; 3], p: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
    ]
}

struct PendingMember {
    key: SigKey,
    family_idx: usize,
    record_ids: Vec<String>,
    deformation: f64,
    seq_term: f64,
    noise: f64,
    z: f64,
    parental: StructurePair0,
}

struct StructurePair0 {
    parental_vh: Vec<(usize, [f64; 3])>,
    parental_vl: Vec<(usize, [f64; 3])>,
    scfv_vh: Vec<(usize, [f64; 3])>,
    scfv_vl: Vec<(usize, [f64; 3])>,
}

/// Generate a complete synthetic dataset. Byte-identical for equal configs.
pub fn generate(config: &GenConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let field_plus = draw_field(&mut rng);
    let field_minus = draw_field(&mut rng);

    let mut families = Vec::with_capacity(config.n_families);
    let mut pending: Vec<PendingMember> = Vec::new();
    let mut seen: BTreeMap<SigKey, usize> = BTreeMap::new();
    let mut record_counter = 0usize;

    for f in 0..config.n_families {
        let name = format!("fam{f:03}");
        let vh_len = clamp_len(118.9 + 4.8 * normal(&mut rng), 100, 135);
        let vl_len = clamp_len(108.1 + 2.2 * normal(&mut rng), 100, 126);
        let vh_backbone = random_sequence(vh_len, &mut rng);
        let vl_backbone = random_sequence(vl_len, &mut rng);
        let base = BASE_STD * normal(&mut rng);
        let sign: i8 =
            if rng.random::<f64>() < config.family_sign_flip_prob { -1 } else { 1 };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let shape_vh: Vec<[f64; 3]> = (0..vh_len)
            .map(|_| {
                [
                    FAMILY_SHAPE_STD * normal(&mut rng),
                    FAMILY_SHAPE_STD * normal(&mut rng),
                    FAMILY_SHAPE_STD * normal(&mut rng),
                ]
            })
            .collect();
        let shape_vl: Vec<[f64; 3]> = (0..vl_len)
            .map(|_| {
                [
                    FAMILY_SHAPE_STD * normal(&mut rng),
                    FAMILY_SHAPE_STD * normal(&mut rng),
                    FAMILY_SHAPE_STD * normal(&mut rng),
                ]
            })
            .collect();
        let parental_vh = helix_backbone(vh_len, phase, &shape_vh);
        let parental_vl = helix_backbone(vl_len, phase + 1.3, &shape_vl);

        let mut effects: BTreeMap<(u8, u16, u8), f64> = BTreeMap::new();
        let n_members = rng.random_range(config.per_family.0..=config.per_family.1);
        let field = if sign > 0 { &field_plus } else { &field_minus };

        for _ in 0..n_members {
            // Point-mutate the backbones; accumulate family-specific effects.
            let mut seq_term = 0.0;
            let mut mutate = |backbone: &str, chain: u8, rng: &mut ChaCha8Rng| -> String {
                backbone
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if rng.random::<f64>() < config.mutation_rate {
                            let mut new = AMINO_ACIDS[rng.random_range(0..20)];
                            while new == c {
                                new = AMINO_ACIDS[rng.random_range(0..20)];
                            }
                            let aa = crate::dataset::amino_index(new).unwrap() as u8;
                            let key = (chain, (i + 1) as u16, aa);
                            let effect = *effects
                                .entry(key)
                                .or_insert_with(|| SEQ_EFFECT_STD * normal(rng));
                            seq_term += effect;
                            new
                        } else {
                            c
                        }
                    })
                    .collect()
            };
            let vh_seq = mutate(&vh_backbone, 0, &mut rng);
            let vl_seq = mutate(&vl_backbone, 1, &mut rng);
            let linker = LINKERS[rng.random_range(0..LINKERS.len())].to_string();
            let orientation =
                if rng.random::<f64>() < 0.5 { Orientation::VhVl } else { Orientation::VlVh };

            let key = SigKey {
                vh_seq,
                vl_seq,
                linker_id: linker,
                orientation,
            };
            record_counter += 1;
            let record_id = format!("rec{record_counter:06}");

            if let Some(&existing) = seen.get(&key) {
                // True replicate: the same construct measured again.
                pending[existing].record_ids.push(record_id);
                continue;
            }

            let deformation = normal(&mut rng).abs();
            let noise = config.noise_std * normal(&mut rng);
            let z = base
                + f64::from(sign) * config.structure_signal_weight * deformation
                + seq_term
                + noise;

            // scFv Cα trace: parental + signed deformation field + jitter,
            // then an arbitrary rigid placement.
            let axis = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let rot = rotation_from_axis_angle(axis, angle);
            let trans =
                [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            let deform = |parental: &[(usize, [f64; 3])], chain_idx: usize, rng: &mut ChaCha8Rng| {
                parental
                    .iter()
                    .filter_map(|&(pos, xyz)| {
                        if rng.random::<f64>() < SCFV_DROPOUT {
                            return None;
                        }
                        let dir = field[chain_idx][pos - 1];
                        let moved = [
                            xyz[0] + deformation * dir[0] + COORD_JITTER * normal(rng),
                            xyz[1] + deformation * dir[1] + COORD_JITTER * normal(rng),
                            xyz[2] + deformation * dir[2] + COORD_JITTER * normal(rng),
                        ];
                        Some((pos, apply_rigid(&rot, &trans, moved)))
                    })
                    .collect::<Vec<_>>()
            };
            let scfv_vh = deform(&parental_vh, 0, &mut rng);
            let scfv_vl = deform(&parental_vl, 1, &mut rng);

            seen.insert(key.clone(), pending.len());
            pending.push(PendingMember {
                key,
                family_idx: f,
                record_ids: vec![record_id],
                deformation,
                seq_term,
                noise,
                z,
                parental: StructurePair0 {
                    parental_vh: parental_vh.clone(),
                    parental_vl: parental_vl.clone(),
                    scfv_vh,
                    scfv_vl,
                },
            });
        }

        families.push(FamilyTruth {
            name,
            sign,
            base,
            vh_len,
            vl_len,
            mutation_effects: effects.into_iter().collect(),
        });
    }

    // Calibrate yield transform and QC threshold on the realized z values.
    let zs: Vec<f64> = pending.iter().map(|m| m.z).collect();
    let n = zs.len() as f64;
    let z_mean = zs.iter().sum::<f64>() / n;
    let z_std = (zs.iter().map(|z| (z - z_mean) * (z - z_mean)).sum::<f64>() / n).sqrt();
    let mut sorted = zs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n_fail = ((config.target_fail_rate * n).round() as usize).min(sorted.len());
    let qc_threshold_z = if n_fail == 0 { f64::NEG_INFINITY } else { sorted[n_fail - 1] };

    let mut records = Vec::new();
    let mut structures = BTreeMap::new();
    let mut biophys = BTreeMap::new();
    let mut members = Vec::new();

    for m in &pending {
        let z_hat = if z_std > 0.0 { (m.z - z_mean) / z_std } else { 0.0 };
        let yield_value = (YIELD_LOG_MEAN + YIELD_LOG_STD * z_hat).exp();
        let qc_pass = u8::from(m.z > qc_threshold_z);
        let sec_logit = 1.2 + 1.2 * z_hat + 0.3 * normal(&mut rng);
        let sec_pct = 100.0 / (1.0 + (-sec_logit).exp());
        let family = &families[m.family_idx];

        for record_id in &m.record_ids {
            records.push(ReformatRecord {
                record_id: record_id.clone(),
                vh_seq: m.key.vh_seq.clone(),
                vl_seq: m.key.vl_seq.clone(),
                linker_id: m.key.linker_id.clone(),
                orientation: m.key.orientation,
                parental_family: family.name.clone(),
                campaign: format!("camp{:02}", m.family_idx % 7),
                qc_pass: Some(qc_pass),
                yield_ng_per_ul: Some(yield_value),
                sec_main_peak_pct: Some(sec_pct),
            });
        }

        let digest = m.key.digest();
        let mk = |chain, source, coords: &Vec<(usize, [f64; 3])>| {
            DomainStructure::new(chain, source, coords.clone()).expect("generated coords valid")
        };
        structures.insert(
            digest,
            StructurePair {
                parental: vec![
                    mk(ChainId::VH, StructSource::ParentalIgg, &m.parental.parental_vh),
                    mk(ChainId::VL, StructSource::ParentalIgg, &m.parental.parental_vl),
                ],
                scfv: vec![
                    mk(ChainId::VH, StructSource::Scfv, &m.parental.scfv_vh),
                    mk(ChainId::VL, StructSource::Scfv, &m.parental.scfv_vl),
                ],
            },
        );

        // Composition-derived developability descriptors with mild noise.
        let combined = format!("{}{}", m.key.vh_seq, m.key.vl_seq);
        let frac = |set: &[char]| {
            combined.chars().filter(|c| set.contains(c)).count() as f64
                / combined.len() as f64
        };
        let cell = |v: f64, rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < BIO_MISSING_RATE {
                None
            } else {
                Some(v + 0.05 * normal(rng))
            }
        };
        let psh = frac(&['A', 'F', 'I', 'L', 'M', 'V', 'W', 'Y']) * 10.0;
        let pnc = frac(&['D', 'E']) * 10.0;
        let ppc = frac(&['K', 'R', 'H']) * 10.0;
        let sfvcsp = (ppc - pnc) * 2.0;
        biophys.insert(
            m.key.canonical(),
            BiophysRow {
                psh: cell(psh, &mut rng),
                pnc: cell(pnc, &mut rng),
                ppc: cell(ppc, &mut rng),
                sfvcsp: cell(sfvcsp, &mut rng),
            },
        );

        members.push(MemberTruth {
            record_ids: m.record_ids.clone(),
            sig_key: m.key.canonical(),
            family: family.name.clone(),
            deformation: m.deformation,
            seq_term: m.seq_term,
            noise: m.noise,
            z: m.z,
            yield_value,
            qc_pass,
            sec_pct,
        });
    }

    Ok(SyntheticDataset {
        records,
        structures,
        biophys,
        truth: GroundTruth {
            config: *config,
            z_mean,
            z_std,
            yield_log_mean: YIELD_LOG_MEAN,
            yield_log_std: YIELD_LOG_STD,
            qc_threshold_z,
            field_plus,
            field_minus,
            families,
            members,
        },
    })
}

impl SyntheticDataset {
    /// Write the exact file formats the ingestion stages consume:
    /// `records.csv`, `biophys.csv`, `structures/<digest>.{parental,scfv}.txt`,
    /// and the ground-truth manifest `truth.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut records_out = Vec::new();
        write_records_csv(&self.records, &mut records_out)?;
        fs::write(dir.join("records.csv"), records_out)?;

        let mut bio_out = Vec::new();
        write_biophys_csv(&self.biophys, &mut bio_out)?;
        fs::write(dir.join("biophys.csv"), bio_out)?;

        let sdir = dir.join("structures");
        fs::create_dir_all(&sdir)?;
        for (digest, pair) in &self.structures {
            let mut buf = Vec::new();
            write_structure_file(&pair.parental.iter().collect::<Vec<_>>(), &mut buf)?;
            fs::write(sdir.join(format!("{digest}.parental.txt")), buf)?;
            let mut buf = Vec::new();
            write_structure_file(&pair.scfv.iter().collect::<Vec<_>>(), &mut buf)?;
            fs::write(sdir.join(format!("{digest}.scfv.txt")), buf)?;
        }

        fs::write(dir.join("truth.json"), serde_json::to_vec_pretty(&self.truth)?)?;
        Ok(())
    }

    /// Emit synthetic per-residue embedding files (`<digest>.VH.emb` /
    /// `<digest>.VL.emb`) so the embedding-MLP path can run end to end.
    /// Each residue embeds as a per-letter code vector plus noise.
    pub fn write_embeddings(&self, dir: &Path, dim: usize) -> Result<()> {
        use crate::seq::EmbeddingMatrix;
        if dim == 0 {
            return Err(CoreError::config("embedding dim must be positive"));
        }
        let edir = dir.join("embeddings");
        fs::create_dir_all(&edir)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.truth.config.seed ^ 0x9e37_79b9);
        let mut codes = vec![vec![0.0; dim]; 20];
        for code in &mut codes {
            for v in code.iter_mut() {
                *v = normal(&mut rng);
            }
        }
        for member in &self.truth.members {
            let key = SigKey::from_canonical(&member.sig_key)
                .ok_or_else(|| CoreError::config("bad canonical key in manifest"))?;
            let digest = key.digest();
            for (chain, seq) in [(ChainId::VH, &key.vh_seq), (ChainId::VL, &key.vl_seq)] {
                let mut values = ndarray::Array2::zeros((seq.len(), dim));
                for (i, c) in seq.chars().enumerate() {
                    let aa = crate::dataset::amino_index(c).unwrap();
                    for j in 0..dim {
                        values[(i, j)] = codes[aa][j] + 0.05 * normal(&mut rng);
                    }
                }
                let m = EmbeddingMatrix::new(chain, values)?;
                let mut buf = Vec::new();
                m.write(&mut buf)?;
                fs::write(edir.join(format!("{digest}.{}.emb", chain.as_str())), buf)?;
            }
        }
        Ok(())
    }
}

/// Dataset-level summary: counts, target statistics, and class balance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub n_records: usize,
    pub n_signatures: usize,
    pub n_families: usize,
    pub n_campaigns: usize,
    pub n_linkers: usize,
    pub n_orientations: usize,
    pub vh_len_mean: f64,
    pub vh_len_std: f64,
    pub vl_len_mean: f64,
    pub vl_len_std: f64,
    pub yield_mean: f64,
    pub yield_std: f64,
    pub yield_min: f64,
    pub yield_max: f64,
    pub qc_fail_rate: f64,
    pub sec_pass_rate: Option<f64>,
}

impl StatsReport {
    pub fn render(&self) -> String {
        format!(
            "records            {}\n\
             unique signatures  {}\n\
             parental families  {}\n\
             campaigns          {}\n\
             linker types       {}\n\
             domain orders      {}\n\
             VH length          {:.1} ± {:.1}\n\
             VL length          {:.1} ± {:.1}\n\
             yield (ng/µL)      {:.2} ± {:.2}  range [{:.2}, {:.2}]\n\
             QC fail rate       {:.1}%\n\
             SEC pass rate      {}",
            self.n_records,
            self.n_signatures,
            self.n_families,
            self.n_campaigns,
            self.n_linkers,
            self.n_orientations,
            self.vh_len_mean,
            self.vh_len_std,
            self.vl_len_mean,
            self.vl_len_std,
            self.yield_mean,
            self.yield_std,
            self.yield_min,
            self.yield_max,
            self.qc_fail_rate * 100.0,
            self.sec_pass_rate
                .map(|r| format!("{:.1}%", r * 100.0))
                .unwrap_or_else(|| "n/a".to_string()),
        )
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn stats_report(records: &[ReformatRecord]) -> Result<StatsReport> {
    if records.is_empty() {
        return Err(CoreError::config("cannot summarize an empty dataset"));
    }
    let sigs = aggregate_by_signature(records)?;

    let vh_lens: Vec<f64> = sigs.signatures.iter().map(|s| s.key.vh_seq.len() as f64).collect();
    let vl_lens: Vec<f64> = sigs.signatures.iter().map(|s| s.key.vl_seq.len() as f64).collect();
    let yields: Vec<f64> = sigs.signatures.iter().filter_map(|s| s.yield_mean).collect();
    let qc: Vec<u8> = sigs.signatures.iter().filter_map(|s| s.qc_label).collect();
    let sec: Vec<u8> = sigs.signatures.iter().filter_map(|s| s.sec_label).collect();

    let campaigns: std::collections::BTreeSet<&str> =
        sigs.signatures.iter().map(|s| s.campaign.as_str()).collect();
    let linkers: std::collections::BTreeSet<&str> =
        sigs.signatures.iter().map(|s| s.key.linker_id.as_str()).collect();
    let orientations: std::collections::BTreeSet<&str> =
        sigs.signatures.iter().map(|s| s.key.orientation.as_str()).collect();

    let (vh_len_mean, vh_len_std) = mean_std(&vh_lens);
    let (vl_len_mean, vl_len_std) = mean_std(&vl_lens);
    let (yield_mean, yield_std) =
        if yields.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&yields) };

    Ok(StatsReport {
        n_records: records.len(),
        n_signatures: sigs.len(),
        n_families: sigs.family_index.len(),
        n_campaigns: campaigns.len(),
        n_linkers: linkers.len(),
        n_orientations: orientations.len(),
        vh_len_mean,
        vh_len_std,
        vl_len_mean,
        vl_len_std,
        yield_mean,
        yield_std,
        yield_min: yields.iter().cloned().fold(f64::INFINITY, f64::min),
        yield_max: yields.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        qc_fail_rate: if qc.is_empty() {
            f64::NAN
        } else {
            qc.iter().filter(|&&l| l == 0).count() as f64 / qc.len() as f64
        },
        sec_pass_rate: (!sec.is_empty())
            .then(|| sec.iter().filter(|&&l| l == 1).count() as f64 / sec.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> GenConfig {
        GenConfig { n_families: 6, per_family: (5, 8), seed: 11, ..GenConfig::default() }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let a = generate(&small_config()).unwrap();
        let b = generate(&small_config()).unwrap();
        let mut csv_a = Vec::new();
        write_records_csv(&a.records, &mut csv_a).unwrap();
        let mut csv_b = Vec::new();
        write_records_csv(&b.records, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(
            serde_json::to_string(&a.truth).unwrap(),
            serde_json::to_string(&b.truth).unwrap()
        );
    }

    #[test]
    fn zero_mutation_rate_shares_family_sequences() {
        let cfg = GenConfig { mutation_rate: 0.0, ..small_config() };
        let data = generate(&cfg).unwrap();
        let sigs = aggregate_by_signature(&data.records).unwrap();
        for members in sigs.family_index.values() {
            let first = &sigs.signatures[members[0]].key;
            for &i in members {
                let key = &sigs.signatures[i].key;
                assert_eq!(key.vh_seq, first.vh_seq);
                assert_eq!(key.vl_seq, first.vl_seq);
            }
        }
    }

    #[test]
    fn fail_rate_is_calibrated() {
        let cfg = GenConfig {
            n_families: 40,
            per_family: (25, 30),
            seed: 3,
            ..GenConfig::default()
        };
        let data = generate(&cfg).unwrap();
        assert!(data.truth.members.len() >= 1000);
        let fails = data.truth.members.iter().filter(|m| m.qc_pass == 0).count();
        let rate = fails as f64 / data.truth.members.len() as f64;
        assert!((rate - DEFAULT_FAIL_RATE).abs() <= 0.03, "realized fail rate {rate}");
    }

    #[test]
    fn manifest_recomputes_labels_exactly() {
        let data = generate(&small_config()).unwrap();
        for m in &data.truth.members {
            let (y, qc) = data.truth.recompute_member(m);
            assert_eq!(y, m.yield_value);
            assert_eq!(qc, m.qc_pass);
        }
    }

    #[test]
    fn structures_and_biophys_cover_every_signature() {
        let data = generate(&small_config()).unwrap();
        let sigs = aggregate_by_signature(&data.records).unwrap();
        for sig in &sigs.signatures {
            assert!(data.structures.contains_key(&sig.key.digest()));
            assert!(data.biophys.contains_key(&sig.key.canonical()));
        }
    }

    #[test]
    fn stats_report_counts_signatures() {
        let data = generate(&small_config()).unwrap();
        let report = stats_report(&data.records).unwrap();
        assert_eq!(report.n_records, data.records.len());
        assert_eq!(report.n_families, 6);
        assert!(report.n_linkers <= 8);
        // Class balance equals an independent recount.
        let sigs = aggregate_by_signature(&data.records).unwrap();
        let fails =
            sigs.signatures.iter().filter(|s| s.qc_label == Some(0)).count() as f64;
        assert_eq!(report.qc_fail_rate, fails / sigs.len() as f64);
        assert!(stats_report(&[]).is_err());
    }

    #[test]
    fn files_round_trip_through_ingestion() {
        use crate::dataset::parse_records;
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small_config()).unwrap();
        data.write_to_dir(dir.path()).unwrap();
        let file = std::fs::File::open(dir.path().join("records.csv")).unwrap();
        let report = parse_records(file).unwrap();
        assert_eq!(report.records.len(), data.records.len());
        assert!(report.rejected.is_empty());
        let bio = crate::bio::parse_biophys_csv(
            std::fs::File::open(dir.path().join("biophys.csv")).unwrap(),
        )
        .unwrap();
        assert_eq!(bio.len(), data.biophys.len());
    }
}
