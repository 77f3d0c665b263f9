//! Sample manifests: label binarization, stratified splitting, minority
//! oversampling, and a synthetic imbalanced image generator for desk-scale
//! experiments.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gray::{self, GrayImage, ImageError};
use crate::{hash_id, mix_seed};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown density category {0:?} (expected one of A, B, C, D)")]
    UnknownDensity(String),
    #[error("unknown split {0:?} (expected train, val or test)")]
    UnknownSplit(String),
    #[error("manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),
    #[error("missing image file {0}")]
    MissingImage(PathBuf),
    #[error("class {label} has {count} records, need at least {need}")]
    ClassTooSmall {
        label: usize,
        count: usize,
        need: usize,
    },
    #[error("train_fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("manifest must contain both classes to oversample")]
    SingleClass,
    #[error("bad synthesis config: {0}")]
    BadSynthConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// BI-RADS breast-density category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Density {
    A,
    B,
    C,
    D,
}

impl FromStr for Density {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Density::A),
            "B" => Ok(Density::B),
            "C" => Ok(Density::C),
            "D" => Ok(Density::D),
            _ => Err(DatasetError::UnknownDensity(s.to_string())),
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Density::A => "A",
            Density::B => "B",
            Density::C => "C",
            Density::D => "D",
        })
    }
}

/// Binary label: A/B are low density (0), C/D are high density (1).
pub fn binarize_density(density: Density) -> usize {
    match density {
        Density::A | Density::B => 0,
        Density::C | Density::D => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DatasetError::UnknownSplit(s.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One image with its density category, derived binary label and split.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub density: Density,
    pub label: usize,
    pub split: Option<Split>,
}

impl SampleRecord {
    pub fn new(
        image_id: impl Into<String>,
        path: impl Into<PathBuf>,
        density: Density,
        split: Option<Split>,
    ) -> Self {
        SampleRecord {
            image_id: image_id.into(),
            path: path.into(),
            density,
            label: binarize_density(density),
            split,
        }
    }
}

/// An ordered collection of sample records.
///
/// Loading from CSV enforces unique ids and readable image paths; manifests
/// produced by [`oversample_minority`] intentionally repeat records.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn from_records(records: Vec<SampleRecord>) -> Self {
        Manifest { records }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-class record counts, indexed by binary label.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    /// Records assigned to one split, as a new manifest.
    pub fn subset(&self, split: Split) -> Manifest {
        Manifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == Some(split))
                .cloned()
                .collect(),
        }
    }

    fn check_unique_ids(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(DatasetError::DuplicateId(r.image_id.clone()));
            }
        }
        Ok(())
    }

    /// Write as CSV with header `image_id,path,density,split`.
    ///
    /// Paths are emitted as given; the synthesizer and preprocessor store
    /// them relative to the manifest location so output trees relocate.
    pub fn save_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut out = String::from("image_id,path,density,split\n");
        for r in &self.records {
            let split = r.split.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.image_id,
                r.path.display(),
                r.density,
                split
            ));
        }
        fs::write(path, out).map_err(|e| io_err(path, e))
    }

    /// Load a manifest CSV, validating unique ids and that every referenced
    /// image file exists (relative paths resolve against the CSV location).
    pub fn load_csv(path: &Path) -> Result<Manifest, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let bad = |reason: String| DatasetError::BadManifest {
            path: path.display().to_string(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "image_id" || cols[1] != "path" || cols[2] != "density" {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let has_split = cols.len() > 3 && cols[3] == "split";
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 3 {
                return Err(bad(format!("line {}: too few fields", lineno + 2)));
            }
            let density: Density = fields[2].parse()?;
            let split = if has_split && fields.len() > 3 && !fields[3].is_empty() {
                Some(fields[3].parse()?)
            } else {
                None
            };
            let raw = PathBuf::from(fields[1]);
            let resolved = if raw.is_absolute() {
                raw.clone()
            } else {
                base.join(&raw)
            };
            if !resolved.is_file() {
                return Err(DatasetError::MissingImage(resolved));
            }
            records.push(SampleRecord::new(fields[0], resolved, density, split));
        }
        let manifest = Manifest { records };
        manifest.check_unique_ids()?;
        Ok(manifest)
    }
}

/// Deterministic per-class split into train and validation parts.
///
/// Each class contributes `round(train_fraction * n_c)` records to the train
/// side (clamped so neither side goes empty); any rounding drift against the
/// overall target is settled on the majority class.
pub fn stratified_split(
    manifest: &Manifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest), DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::BadFraction(train_fraction));
    }
    let counts = manifest.class_counts();
    for (label, &count) in counts.iter().enumerate() {
        if count < 2 {
            return Err(DatasetError::ClassTooSmall {
                label,
                count,
                need: 2,
            });
        }
    }
    let mut per_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, r) in manifest.records.iter().enumerate() {
        per_class[r.label].push(i);
    }
    let mut takes = [0usize; 2];
    for label in 0..2 {
        let n = counts[label];
        let t = (train_fraction * n as f64).round() as usize;
        takes[label] = t.clamp(1, n - 1);
    }
    // settle rounding drift on the majority class
    let majority = if counts[1] >= counts[0] { 1 } else { 0 };
    let target = (train_fraction * manifest.len() as f64).round() as i64;
    let drift = target - (takes[0] + takes[1]) as i64;
    takes[majority] =
        (takes[majority] as i64 + drift).clamp(1, counts[majority] as i64 - 1) as usize;

    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in 0..2 {
        let mut indices = per_class[label].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, label as u64));
        indices.shuffle(&mut rng);
        for (k, &idx) in indices.iter().enumerate() {
            if k < takes[label] {
                train.push(idx);
            } else {
                val.push(idx);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    let pick = |idxs: &[usize]| {
        Manifest::from_records(idxs.iter().map(|&i| manifest.records[i].clone()).collect())
    };
    Ok((pick(&train), pick(&val)))
}

/// Duplicate minority-class records (sampling with replacement) until both
/// classes have equal counts, then shuffle deterministically.
pub fn oversample_minority(manifest: &Manifest, seed: u64) -> Result<Manifest, DatasetError> {
    let counts = manifest.class_counts();
    if counts[0] == 0 || counts[1] == 0 {
        return Err(DatasetError::SingleClass);
    }
    let minority = if counts[0] < counts[1] { 0 } else { 1 };
    let deficit = counts[1 - minority] - counts[minority];
    let minority_indices: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == minority)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0b5a));
    let mut records = manifest.records.clone();
    for _ in 0..deficit {
        let pick = minority_indices[rng.random_range(0..minority_indices.len())];
        records.push(manifest.records[pick].clone());
    }
    records.shuffle(&mut rng);
    Ok(Manifest { records })
}

/// Configuration for the synthetic imbalanced dataset.
///
/// Class 1 ("dense") images carry an oriented sinusoidal texture at a higher
/// spatial frequency than class 0, separated by `texture_frequency_gap`;
/// Gaussian pixel noise is added on top.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub n_total: usize,
    /// Majority:minority ratio; the majority class is 1 (high density).
    pub imbalance_ratio: f64,
    /// (width, height) of the generated images.
    pub image_size: (usize, usize),
    /// Relative frequency separation: class 1 textures sit at
    /// `f0 * (1 + gap)` against the class-0 base frequency `f0`.
    pub texture_frequency_gap: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_total: 2000,
            imbalance_ratio: 9.0,
            image_size: (128, 256),
            texture_frequency_gap: 1.0,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

/// Base texture frequency of the low-density class, cycles per pixel.
pub const SYNTH_BASE_FREQUENCY: f64 = 0.05;
/// Amplitude of the additive sinusoidal texture.
pub const SYNTH_TEXTURE_AMPLITUDE: f64 = 0.18;
/// Mean background intensity.
pub const SYNTH_BACKGROUND: f64 = 0.5;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_total < 2 {
            return Err(DatasetError::BadSynthConfig(format!(
                "n_total {} < 2",
                self.n_total
            )));
        }
        if self.imbalance_ratio < 1.0 {
            return Err(DatasetError::BadSynthConfig(format!(
                "imbalance_ratio {} < 1",
                self.imbalance_ratio
            )));
        }
        if self.texture_frequency_gap <= 0.0 {
            return Err(DatasetError::BadSynthConfig(
                "texture_frequency_gap must be positive".into(),
            ));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(DatasetError::BadSynthConfig("empty image size".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(DatasetError::BadSynthConfig("negative noise_sigma".into()));
        }
        Ok(())
    }

    /// (minority, majority) record counts implied by the ratio.
    pub fn class_sizes(&self) -> (usize, usize) {
        let minority = ((self.n_total as f64) / (1.0 + self.imbalance_ratio)).round() as usize;
        let minority = minority.clamp(1, self.n_total - 1);
        (minority, self.n_total - minority)
    }

    /// Texture frequency (cycles/pixel) used for a label.
    pub fn frequency_for(&self, label: usize) -> f64 {
        if label == 0 {
            SYNTH_BASE_FREQUENCY
        } else {
            SYNTH_BASE_FREQUENCY * (1.0 + self.texture_frequency_gap)
        }
    }
}

/// Render one synthetic image. Deterministic per (config seed, image id).
pub fn render_synthetic_image(config: &SynthConfig, image_id: &str, label: usize) -> GrayImage {
    let (w, h) = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, hash_id(image_id)));
    let orientation: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq = config.frequency_for(label);
    let (dir_x, dir_y) = (orientation.cos(), orientation.sin());
    let noise = Normal::new(0.0, config.noise_sigma.max(1e-12)).expect("valid sigma");
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t = freq * (x as f64 * dir_x + y as f64 * dir_y);
            let mut v = SYNTH_BACKGROUND
                + SYNTH_TEXTURE_AMPLITUDE * (std::f64::consts::TAU * t + phase).sin();
            if config.noise_sigma > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    GrayImage::new(w, h, pixels).expect("non-empty synthetic image")
}

/// Generate the synthetic dataset under `out_dir`.
///
/// Images are written as 8-bit PGM files in `out_dir/images/`; the returned
/// manifest records paths relative to `out_dir` (no splits assigned).
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<Manifest, DatasetError> {
    config.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| io_err(&image_dir, e))?;
    let (minority, _majority) = config.class_sizes();
    let mut records = Vec::with_capacity(config.n_total);
    for i in 0..config.n_total {
        let label = usize::from(i >= minority);
        let density = if label == 0 { Density::A } else { Density::C };
        let image_id = format!("synth_{i:05}");
        let img = render_synthetic_image(config, &image_id, label);
        let rel = PathBuf::from("images").join(format!("{image_id}.pgm"));
        gray::write_pgm8(&img, &out_dir.join(&rel))?;
        records.push(SampleRecord::new(image_id, rel, density, None));
    }
    Ok(Manifest::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_manifest(n0: usize, n1: usize) -> Manifest {
        let mut records = Vec::new();
        for i in 0..n0 {
            records.push(SampleRecord::new(
                format!("low_{i}"),
                format!("low_{i}.pgm"),
                Density::B,
                None,
            ));
        }
        for i in 0..n1 {
            records.push(SampleRecord::new(
                format!("high_{i}"),
                format!("high_{i}.pgm"),
                Density::C,
                None,
            ));
        }
        Manifest::from_records(records)
    }

    #[test]
    fn binarize_maps_the_four_categories() {
        assert_eq!(binarize_density("A".parse().unwrap()), 0);
        assert_eq!(binarize_density("b".parse().unwrap()), 0);
        assert_eq!(binarize_density("c".parse().unwrap()), 1);
        assert_eq!(binarize_density("D".parse().unwrap()), 1);
    }

    #[test]
    fn binarize_rejects_unknown_category_naming_it() {
        let err = "E".parse::<Density>().unwrap_err().to_string();
        assert!(err.contains("\"E\""), "{err}");
    }

    #[test]
    fn labels_round_trip_through_canonical_densities() {
        for label in 0..2 {
            for density in if label == 0 {
                [Density::A, Density::B]
            } else {
                [Density::C, Density::D]
            } {
                assert_eq!(binarize_density(density), label);
            }
        }
    }

    #[test]
    fn split_5_5_at_080_gives_4_4_train() {
        let m = toy_manifest(5, 5);
        let (train, val) = stratified_split(&m, 0.8, 7).unwrap();
        assert_eq!(train.class_counts(), [4, 4]);
        assert_eq!(val.class_counts(), [1, 1]);
    }

    #[test]
    fn split_preserves_class_proportions() {
        let m = toy_manifest(10, 90);
        let (train, _) = stratified_split(&m, 0.8, 3).unwrap();
        assert_eq!(train.class_counts(), [8, 72]);
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        let m = toy_manifest(13, 29);
        let (t1, v1) = stratified_split(&m, 0.8, 11).unwrap();
        let (t2, v2) = stratified_split(&m, 0.8, 11).unwrap();
        assert_eq!(t1.records(), t2.records());
        assert_eq!(v1.records(), v2.records());

        let mut merged: Vec<String> = t1
            .records()
            .iter()
            .chain(v1.records())
            .map(|r| r.image_id.clone())
            .collect();
        merged.sort();
        let mut original: Vec<String> = m.records().iter().map(|r| r.image_id.clone()).collect();
        original.sort();
        assert_eq!(merged, original);
    }

    #[test]
    fn split_proportion_within_one_record_per_class() {
        for seed in 0..5u64 {
            let m = toy_manifest(7, 23);
            let (train, _) = stratified_split(&m, 0.7, seed).unwrap();
            let counts = train.class_counts();
            for (label, &n) in [7usize, 23].iter().enumerate() {
                let ideal = 0.7 * n as f64;
                assert!(
                    (counts[label] as f64 - ideal).abs() <= 1.0,
                    "class {label}: took {} of {n} (ideal {ideal})",
                    counts[label]
                );
            }
        }
    }

    #[test]
    fn split_rejects_tiny_class() {
        let m = toy_manifest(1, 5);
        assert!(matches!(
            stratified_split(&m, 0.8, 0),
            Err(DatasetError::ClassTooSmall { label: 0, .. })
        ));
    }

    #[test]
    fn oversample_balances_counts() {
        let m = toy_manifest(3, 9);
        let o = oversample_minority(&m, 5).unwrap();
        assert_eq!(o.class_counts(), [9, 9]);
    }

    #[test]
    fn oversample_noop_when_balanced() {
        let m = toy_manifest(5, 5);
        let o = oversample_minority(&m, 5).unwrap();
        assert_eq!(o.class_counts(), [5, 5]);
        assert_eq!(o.len(), 10);
    }

    #[test]
    fn oversample_keeps_every_original_id() {
        let m = toy_manifest(2, 7);
        let o = oversample_minority(&m, 9).unwrap();
        let ids: BTreeSet<&str> = o.records().iter().map(|r| r.image_id.as_str()).collect();
        for r in m.records() {
            assert!(ids.contains(r.image_id.as_str()), "lost {}", r.image_id);
        }
        assert_eq!(o.class_counts(), [7, 7]);
    }

    #[test]
    fn oversample_rejects_single_class() {
        let m = toy_manifest(0, 4);
        assert!(matches!(
            oversample_minority(&m, 0),
            Err(DatasetError::SingleClass)
        ));
    }

    #[test]
    fn synth_class_sizes_follow_ratio() {
        let cfg = SynthConfig {
            n_total: 100,
            imbalance_ratio: 9.0,
            ..SynthConfig::default()
        };
        assert_eq!(cfg.class_sizes(), (10, 90));
    }

    #[test]
    fn synth_rerun_is_byte_identical() {
        let cfg = SynthConfig {
            n_total: 6,
            imbalance_ratio: 2.0,
            image_size: (24, 32),
            ..SynthConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&cfg, d1.path()).unwrap();
        let m2 = generate_synthetic(&cfg, d2.path()).unwrap();
        assert_eq!(m1.class_counts(), m2.class_counts());
        for (a, b) in m1.records().iter().zip(m2.records()) {
            let fa = fs::read(d1.path().join(&a.path)).unwrap();
            let fb = fs::read(d2.path().join(&b.path)).unwrap();
            assert_eq!(fa, fb, "image {} differs between runs", a.image_id);
        }
    }

    #[test]
    fn synth_rejects_unwritable_output_directory() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("occupied");
        fs::write(&blocker, b"file, not a directory").unwrap();
        let cfg = SynthConfig {
            n_total: 4,
            imbalance_ratio: 1.0,
            image_size: (8, 8),
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, &blocker),
            Err(DatasetError::Io { .. })
        ));
    }

    #[test]
    fn manifest_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_total: 5,
            imbalance_ratio: 4.0,
            image_size: (16, 16),
            ..SynthConfig::default()
        };
        let mut m = generate_synthetic(&cfg, dir.path()).unwrap();
        m.records[0].split = Some(Split::Test);
        let csv = dir.path().join("manifest.csv");
        m.save_csv(&csv).unwrap();
        let back = Manifest::load_csv(&csv).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.records()[0].split, Some(Split::Test));
        assert_eq!(back.records()[0].label, m.records()[0].label);
        assert_eq!(back.class_counts(), m.class_counts());
    }

    #[test]
    fn manifest_load_rejects_duplicates_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = GrayImage::filled(4, 4, 0.5).unwrap();
        gray::write_pgm8(&img, &dir.path().join("a.pgm")).unwrap();
        let csv = dir.path().join("m.csv");

        fs::write(
            &csv,
            "image_id,path,density,split\nx,a.pgm,A,\nx,a.pgm,C,\n",
        )
        .unwrap();
        assert!(matches!(
            Manifest::load_csv(&csv),
            Err(DatasetError::DuplicateId(_))
        ));

        fs::write(&csv, "image_id,path,density,split\nx,gone.pgm,A,\n").unwrap();
        assert!(matches!(
            Manifest::load_csv(&csv),
            Err(DatasetError::MissingImage(_))
        ));
    }

    /// Brute-force spectral power of `img` within a radial frequency band
    /// (cycles/pixel), via a direct DFT over the band's integer frequencies.
    fn mid_band_energy(img: &GrayImage, f_lo: f64, f_hi: f64) -> f64 {
        let (w, h) = (img.width(), img.height());
        let mut energy = 0.0;
        for v in 0..h {
            for u in 0..w {
                // map to signed frequencies in cycles/pixel
                let fu = if u <= w / 2 {
                    u as f64
                } else {
                    u as f64 - w as f64
                } / w as f64;
                let fv = if v <= h / 2 {
                    v as f64
                } else {
                    v as f64 - h as f64
                } / h as f64;
                let fr = (fu * fu + fv * fv).sqrt();
                if fr < f_lo || fr > f_hi {
                    continue;
                }
                let (mut re, mut im) = (0.0f64, 0.0f64);
                for y in 0..h {
                    for x in 0..w {
                        let ang = -std::f64::consts::TAU * (fu * x as f64 + fv * y as f64);
                        let p = f64::from(img.get(x, y));
                        re += p * ang.cos();
                        im += p * ang.sin();
                    }
                }
                energy += re * re + im * im;
            }
        }
        energy / (w * h) as f64
    }

    #[test]
    fn mid_band_fft_energy_separates_classes() {
        // large frequency gap, small noise: a threshold on brute-force
        // mid-band spectral energy must split the classes perfectly
        let cfg = SynthConfig {
            n_total: 12,
            imbalance_ratio: 1.0,
            image_size: (48, 48),
            texture_frequency_gap: 1.0,
            noise_sigma: 0.01,
            seed: 123,
        };
        let f1 = cfg.frequency_for(1);
        let (f_lo, f_hi) = (f1 * 0.75, f1 * 1.25);
        let mut low = Vec::new();
        let mut high = Vec::new();
        for i in 0..cfg.n_total {
            let label = usize::from(i >= cfg.class_sizes().0);
            let img = render_synthetic_image(&cfg, &format!("synth_{i:05}"), label);
            let e = mid_band_energy(&img, f_lo, f_hi);
            if label == 0 {
                low.push(e);
            } else {
                high.push(e);
            }
        }
        let max_low = low.iter().cloned().fold(f64::MIN, f64::max);
        let min_high = high.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max_low < min_high,
            "mid-band energy overlaps: max low {max_low}, min high {min_high}"
        );
    }
}
