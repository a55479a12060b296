//! Synthetic slice features driven by MR signal equations.
//!
//! Each scan draws one acquisition protocol. Its slices are per-tissue signal
//! vectors: the steady-state signal of every tissue under the protocol,
//! scaled by a scanner-specific receive gain and by tissue fractions that
//! depend on the imaging plane and vary from slice to slice, plus Gaussian
//! noise. Contrast is therefore a function of the metadata, and anatomy acts
//! as nuisance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{MetadataRecord, Plane};
use crate::prompt::stable_hash;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("protocol list is empty")]
    EmptyProtocolList,
    #[error("invalid generator setting: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub pd: f64,
}

impl Tissue {
    pub const fn new(t1_ms: f64, t2_ms: f64, pd: f64) -> Self {
        Tissue { t1_ms, t2_ms, pd }
    }

    /// T1 lengthens with field strength; relaxation constants are quoted at 1.5 T.
    pub fn at_field(self, tesla: f64) -> Tissue {
        let scale = if tesla > 0.0 {
            (tesla / 1.5).powf(0.3)
        } else {
            1.0
        };
        Tissue {
            t1_ms: self.t1_ms * scale,
            ..self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueSet {
    pub tissues: Vec<Tissue>,
}

impl Default for TissueSet {
    /// Gray matter, white matter, CSF and fat, then two variants of each.
    fn default() -> Self {
        TissueSet {
            tissues: vec![
                Tissue::new(1200.0, 80.0, 0.8),
                Tissue::new(900.0, 70.0, 0.7),
                Tissue::new(4000.0, 2000.0, 1.0),
                Tissue::new(350.0, 120.0, 0.9),
                Tissue::new(1000.0, 95.0, 0.75),
                Tissue::new(1400.0, 65.0, 0.85),
                Tissue::new(780.0, 60.0, 0.65),
                Tissue::new(1050.0, 85.0, 0.75),
                Tissue::new(2500.0, 1200.0, 0.95),
                Tissue::new(6500.0, 2500.0, 0.98),
                Tissue::new(300.0, 100.0, 0.85),
                Tissue::new(420.0, 140.0, 0.95),
            ],
        }
    }
}

impl TissueSet {
    pub fn len(&self) -> usize {
        self.tissues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tissues.is_empty()
    }
}

/// Magnitude signal of one tissue: saturation recovery for plain
/// acquisitions, inversion recovery when TI is present.
pub fn signal(tissue: &Tissue, record: &MetadataRecord) -> f64 {
    let Tissue { t1_ms, t2_ms, pd } = *tissue;
    let decay = (-record.te_ms / t2_ms).exp();
    let recovery = (-record.tr_ms / t1_ms).exp();
    let s = match record.ti_ms {
        None => pd * (1.0 - recovery) * decay * record.flip_angle_deg.to_radians().sin(),
        Some(ti) => pd * (1.0 - 2.0 * (-ti / t1_ms).exp() + recovery) * decay,
    };
    s.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlice {
    pub feature: Vec<f64>,
    #[serde(flatten)]
    pub record: MetadataRecord,
    pub scan_id: u64,
    pub slice_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub scans: usize,
    pub slices_per_scan: usize,
    /// Standard deviation of additive Gaussian feature noise.
    pub noise_sigma: f64,
    /// Log-scale standard deviation of per-slice tissue-fraction jitter.
    pub anatomy_sigma: f64,
    /// Per-scan global intensity scale is drawn from `[1/(1+j), 1+j]`.
    pub intensity_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            scans: 2000,
            slices_per_scan: 5,
            noise_sigma: 0.002,
            anatomy_sigma: 0.01,
            intensity_jitter: 3.0,
            seed: 0,
        }
    }
}

/// Scanner descriptions used by the default protocol list.
pub const SCANNERS: [(&str, &str, f64); 3] = [
    ("SIEMENS", "PRISMA", 3.0),
    ("GE", "SIGNA HDXT", 1.5),
    ("PHILIPS", "INGENIA", 3.0),
];

fn plane_spacing(plane: Plane) -> [f64; 3] {
    match plane {
        Plane::Sagittal => [5.0, 1.0, 1.0],
        Plane::Coronal => [1.0, 5.0, 1.0],
        Plane::Axial => [1.0, 1.0, 5.0],
    }
}

fn base_record(scanner: (&str, &str, f64), plane: Plane) -> MetadataRecord {
    MetadataRecord {
        manufacturer: scanner.0.to_string(),
        scanner_model: scanner.1.to_string(),
        field_strength_tesla: scanner.2,
        sequence_type: "SE".to_string(),
        sequence_variant: "SK".to_string(),
        series_description: None,
        flip_angle_deg: 90.0,
        te_ms: 0.0,
        tr_ms: 0.0,
        ti_ms: None,
        voxel_spacing_mm: Some(plane_spacing(plane)),
        num_slices: None,
        source_id: String::new(),
    }
}

/// Every scanner and plane crossed with spin-echo protocols placed on a
/// `cells_te × cells_tr` lattice over TE [0, 200) ms and TR [0, 10000) ms
/// (two protocols per cell, either side of its centre), plus one
/// FLAIR-like and one STIR-like inversion-recovery protocol.
pub fn default_protocols(cells_te: u32, cells_tr: u32) -> Vec<MetadataRecord> {
    let te_w = 200.0 / f64::from(cells_te);
    let tr_w = 10_000.0 / f64::from(cells_tr);
    let mut out = Vec::new();
    for scanner in SCANNERS {
        for plane in [Plane::Axial, Plane::Coronal, Plane::Sagittal] {
            let base = base_record(scanner, plane);
            for i in 0..cells_te {
                for j in 0..cells_tr {
                    for (fte, ftr) in [(0.4, 0.4), (0.6, 0.6)] {
                        let mut r = base.clone();
                        r.te_ms = ((f64::from(i) + fte) * te_w).round();
                        r.tr_ms = ((f64::from(j) + ftr) * tr_w).round();
                        r.series_description = Some(format!("{} SE", &plane.as_str()[..3]));
                        out.push(r);
                    }
                }
            }
            for (desc, te, tr, ti) in [
                ("FLAIR", 100.0, 9000.0, 2500.0),
                ("STIR", 40.0, 4000.0, 150.0),
            ] {
                let mut r = base.clone();
                r.sequence_type = "IR".to_string();
                r.te_ms = te;
                r.tr_ms = tr;
                r.ti_ms = Some(ti);
                r.series_description = Some(format!("{} {desc}", &plane.as_str()[..3]));
                out.push(r);
            }
        }
    }
    out
}

/// Deterministic per-channel factors in `[lo, hi]` keyed by a name.
fn keyed_factors(key: &str, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(key.as_bytes()));
    (0..n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Receive gain of each tissue channel on a given scanner.
pub fn scanner_gain(record: &MetadataRecord, n: usize) -> Vec<f64> {
    keyed_factors(
        &format!("gain/{}/{}", record.manufacturer, record.scanner_model),
        n,
        0.7,
        1.3,
    )
}

/// Mean tissue fractions seen in slices of a given plane.
pub fn plane_fractions(record: &MetadataRecord, n: usize) -> Vec<f64> {
    let plane = record.plane().map_or("UNKNOWN", Plane::as_str);
    keyed_factors(&format!("fractions/{plane}"), n, 0.4, 1.6)
}

/// Noise-free, nuisance-free feature of a protocol: gain × fraction × signal.
pub fn expected_feature(record: &MetadataRecord, tissues: &TissueSet) -> Vec<f64> {
    let n = tissues.len();
    let gain = scanner_gain(record, n);
    let frac = plane_fractions(record, n);
    tissues
        .tissues
        .iter()
        .enumerate()
        .map(|(k, t)| gain[k] * frac[k] * signal(&t.at_field(record.field_strength_tesla), record))
        .collect()
}

/// Draws `config.scans` scans uniformly over `protocols`. Scan `s` uses its
/// own generator stream, so a scan's slices do not depend on other scans.
pub fn generate_dataset(
    protocols: &[MetadataRecord],
    tissues: &TissueSet,
    config: &SynthConfig,
) -> Result<Vec<SyntheticSlice>, SynthError> {
    if protocols.is_empty() {
        return Err(SynthError::EmptyProtocolList);
    }
    if !(config.noise_sigma >= 0.0 && config.anatomy_sigma >= 0.0 && config.intensity_jitter >= 0.0)
    {
        return Err(SynthError::InvalidConfig(
            "noise settings must be non-negative",
        ));
    }
    if config.slices_per_scan == 0 {
        return Err(SynthError::InvalidConfig(
            "slices_per_scan must be positive",
        ));
    }
    let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
    let anatomy = Normal::new(0.0, config.anatomy_sigma).expect("validated sigma");
    let mut out = Vec::with_capacity(config.scans * config.slices_per_scan);
    for scan in 0..config.scans as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(scan);
        let mut record = protocols[rng.random_range(0..protocols.len())].clone();
        record.num_slices = Some(config.slices_per_scan as u32);
        record.source_id = format!("synth-{scan:06}");
        let base = expected_feature(&record, tissues);
        let j = config.intensity_jitter;
        let intensity = (rng.random_range(-1.0..=1.0) * (1.0 + j).ln()).exp();
        for slice in 0..config.slices_per_scan as u32 {
            let feature = base
                .iter()
                .map(|b| b * intensity * anatomy.sample(&mut rng).exp() + noise.sample(&mut rng))
                .collect();
            out.push(SyntheticSlice {
                feature,
                record: record.clone(),
                scan_id: scan,
                slice_index: slice,
            });
        }
    }
    Ok(out)
}
