//! Deterministic synthetic pixel time series with class-conditional
//! phenology, supervision labels, and injectable cloud-like spikes.
//!
//! Each of the nine land-cover classes is a set of per-band harmonic curves:
//! `base + sum(amplitude * exp(sharpness * (cos(2*pi*(day - peak)/365) - 1)))`.
//! A sample draws per-band jitter of those parameters (its clean signal),
//! then adds Gaussian pixel noise. Every draw comes from a per-sample
//! ChaCha stream, so generation is bit-reproducible and order-independent.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Labels, ModelError, TimeSeriesSample, BANDS, DAYS};

pub const CLASS_COUNT: usize = 9;
pub const CLASS_NAMES: [&str; CLASS_COUNT] = [
    "crop",
    "forest",
    "grass",
    "shrub",
    "water",
    "tundra",
    "impervious",
    "bareland",
    "snow_ice",
];

pub const CLASS_CROP: usize = 0;
pub const CLASS_WATER: usize = 4;
pub const CLASS_IMPERVIOUS: usize = 6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dataset has no classes")]
    NoClasses,
    #[error("bad generator config: {0}")]
    Config(String),
    #[error("not an ESDS dataset (bad magic)")]
    BadMagic,
    #[error("unsupported ESDS version {0}")]
    BadVersion(u32),
    #[error("dataset file is truncated")]
    Truncated,
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

/// One seasonal bump on top of a band's base level. Negative amplitudes make
/// dips (crop red edge). `day` may be any phase; the cosine wraps the year.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub amplitude: f64,
    pub day: f64,
    pub sharpness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub base: f64,
    pub peaks: Vec<Peak>,
}

impl BandCurve {
    fn flat(base: f64) -> Self {
        Self {
            base,
            peaks: Vec::new(),
        }
    }

    fn with_peaks(base: f64, peaks: &[(f64, f64, f64)]) -> Self {
        Self {
            base,
            peaks: peaks
                .iter()
                .map(|&(amplitude, day, sharpness)| Peak {
                    amplitude,
                    day,
                    sharpness,
                })
                .collect(),
        }
    }

    pub fn value(&self, day: f64) -> f64 {
        let mut v = self.base;
        for p in &self.peaks {
            let phase = 2.0 * std::f64::consts::PI * (day - p.day) / 365.0;
            v += p.amplitude * (p.sharpness * (phase.cos() - 1.0)).exp();
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub id: usize,
    pub name: String,
    /// Per-band curves in Blue, Green, Red, NIR, SWIR1, SWIR2 order.
    pub bands: Vec<BandCurve>,
    pub noise_sigma: f64,
    /// Probability a calendar month is flagged as water.
    pub water_monthly: [f64; 12],
    /// Static covariates as (mean, sd) of normalized elevation and slope.
    pub elevation: (f64, f64),
    pub slope: (f64, f64),
}

impl ClassProfile {
    /// The noiseless, jitterless class curve for one band and day.
    pub fn clean_value(&self, band: usize, day: usize) -> f64 {
        self.bands[band].value(day as f64).clamp(0.0, 1.0)
    }
}

/// Jitter scales applied per sample so members of a class differ in more than
/// pixel noise; without this every probe task would be trivially saturated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Additive sd on each band's base level.
    pub base_sd: f64,
    /// Multiplicative sd on each peak amplitude.
    pub amplitude_frac_sd: f64,
    /// Additive sd in days on each peak position.
    pub peak_day_sd: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            base_sd: 0.01,
            amplitude_frac_sd: 0.10,
            peak_day_sd: 4.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub profiles: Vec<ClassProfile>,
    pub jitter: JitterConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            profiles: default_profiles(),
            jitter: JitterConfig::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.profiles.is_empty() {
            return Err(SynthError::NoClasses);
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.id != i {
                return Err(SynthError::Config(format!(
                    "profile {i} has id {}, profiles must be listed in id order",
                    p.id
                )));
            }
            if p.bands.len() != BANDS {
                return Err(SynthError::Config(format!(
                    "profile {} has {} band curves, expected {BANDS}",
                    p.name,
                    p.bands.len()
                )));
            }
            for band in 0..BANDS {
                for day in 0..DAYS {
                    let v = p.bands[band].value(day as f64);
                    if !(0.0..=1.0).contains(&v) {
                        return Err(SynthError::Config(format!(
                            "profile {} band {band} leaves [0,1] on day {day} ({v})",
                            p.name
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn default_profiles() -> Vec<ClassProfile> {
    let p = |id: usize,
             name: &str,
             bands: Vec<BandCurve>,
             water_monthly: [f64; 12],
             elevation: (f64, f64),
             slope: (f64, f64)| ClassProfile {
        id,
        name: name.into(),
        bands,
        noise_sigma: 0.02,
        water_monthly,
        elevation,
        slope,
    };
    vec![
        // Crop: double-peaked season (two rotations), deep red dips.
        p(
            0,
            "crop",
            vec![
                BandCurve::with_peaks(0.06, &[(0.02, 150.0, 3.0)]),
                BandCurve::with_peaks(0.08, &[(0.06, 135.0, 6.0), (0.05, 245.0, 6.0)]),
                BandCurve::with_peaks(0.16, &[(-0.08, 140.0, 5.0), (-0.07, 250.0, 5.0)]),
                BandCurve::with_peaks(0.22, &[(0.28, 140.0, 5.0), (0.25, 250.0, 5.0)]),
                BandCurve::with_peaks(0.18, &[(0.08, 145.0, 4.0)]),
                BandCurve::with_peaks(0.12, &[(0.05, 145.0, 4.0)]),
            ],
            [0.0; 12],
            (0.30, 0.10),
            (0.10, 0.05),
        ),
        // Forest: broad single summer peak, strong NIR plateau.
        p(
            1,
            "forest",
            vec![
                BandCurve::with_peaks(0.04, &[(0.01, 180.0, 2.0)]),
                BandCurve::with_peaks(0.07, &[(0.03, 180.0, 2.0)]),
                BandCurve::with_peaks(0.06, &[(0.01, 180.0, 2.0)]),
                BandCurve::with_peaks(0.28, &[(0.22, 180.0, 2.0)]),
                BandCurve::with_peaks(0.14, &[(0.04, 180.0, 2.0)]),
                BandCurve::with_peaks(0.08, &[(0.03, 180.0, 2.0)]),
            ],
            [0.0; 12],
            (0.45, 0.12),
            (0.30, 0.10),
        ),
        // Grass and shrub: nearly the same spectral curves (shrub is grass
        // scaled slightly darker/weaker), so reflectance alone barely
        // separates them — but their elevation priors are disjoint. The pair
        // is resolvable mainly through the static channels.
        p(
            2,
            "grass",
            vec![
                BandCurve::with_peaks(0.060, &[(0.020, 165.0, 3.0)]),
                BandCurve::with_peaks(0.090, &[(0.050, 165.0, 3.0)]),
                BandCurve::with_peaks(0.140, &[(-0.060, 165.0, 3.0)]),
                BandCurve::with_peaks(0.200, &[(0.180, 165.0, 3.0)]),
                BandCurve::with_peaks(0.220, &[(0.040, 230.0, 3.0)]),
                BandCurve::with_peaks(0.160, &[(0.035, 230.0, 3.0)]),
            ],
            [0.0; 12],
            (0.25, 0.06),
            (0.15, 0.06),
        ),
        p(
            3,
            "shrub",
            vec![
                BandCurve::with_peaks(0.071, &[(0.0178, 165.0, 3.0)]),
                BandCurve::with_peaks(0.101, &[(0.0445, 165.0, 3.0)]),
                BandCurve::with_peaks(0.151, &[(-0.0534, 165.0, 3.0)]),
                BandCurve::with_peaks(0.211, &[(0.1600, 165.0, 3.0)]),
                BandCurve::with_peaks(0.231, &[(0.0356, 230.0, 3.0)]),
                BandCurve::with_peaks(0.171, &[(0.0312, 230.0, 3.0)]),
            ],
            [0.0; 12],
            (0.68, 0.06),
            (0.22, 0.08),
        ),
        // Water: dark, NIR and SWIR lowest, green above NIR year round.
        p(
            4,
            "water",
            vec![
                BandCurve::with_peaks(0.060, &[(0.010, 180.0, 1.0)]),
                BandCurve::with_peaks(0.070, &[(0.008, 180.0, 1.0)]),
                BandCurve::with_peaks(0.035, &[(0.005, 180.0, 1.0)]),
                BandCurve::with_peaks(0.020, &[(0.008, 180.0, 2.0)]),
                BandCurve::flat(0.015),
                BandCurve::flat(0.012),
            ],
            [1.0; 12],
            (0.15, 0.08),
            (0.02, 0.01),
        ),
        // Tundra: snow-bright winters, brief summer green-up, fixed
        // June–July melt ponds.
        p(
            5,
            "tundra",
            vec![
                BandCurve::with_peaks(0.10, &[(0.25, 0.0, 2.0)]),
                BandCurve::with_peaks(0.12, &[(0.22, 0.0, 2.0)]),
                BandCurve::with_peaks(0.12, &[(0.20, 0.0, 2.0)]),
                BandCurve::with_peaks(0.15, &[(0.10, 0.0, 2.0), (0.08, 200.0, 4.0)]),
                BandCurve::with_peaks(0.12, &[(0.02, 200.0, 4.0)]),
                BandCurve::with_peaks(0.10, &[(0.02, 200.0, 4.0)]),
            ],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            (0.85, 0.06),
            (0.25, 0.10),
        ),
        // Impervious and bareland: both flat, nearly the same brightness
        // (bareland a shade brighter), the second statics-resolved pair —
        // urban surfaces sit on flat ground, bareland on steeper relief.
        p(
            6,
            "impervious",
            vec![
                BandCurve::with_peaks(0.160, &[(0.005, 180.0, 1.0)]),
                BandCurve::with_peaks(0.170, &[(0.005, 180.0, 1.0)]),
                BandCurve::with_peaks(0.180, &[(0.006, 180.0, 1.0)]),
                BandCurve::with_peaks(0.190, &[(0.008, 180.0, 1.0)]),
                BandCurve::with_peaks(0.200, &[(0.006, 180.0, 1.0)]),
                BandCurve::with_peaks(0.190, &[(0.005, 180.0, 1.0)]),
            ],
            [0.0; 12],
            (0.35, 0.10),
            (0.04, 0.02),
        ),
        p(
            7,
            "bareland",
            vec![
                BandCurve::with_peaks(0.170, &[(0.005, 180.0, 1.0)]),
                BandCurve::with_peaks(0.181, &[(0.005, 180.0, 1.0)]),
                BandCurve::with_peaks(0.192, &[(0.006, 180.0, 1.0)]),
                BandCurve::with_peaks(0.202, &[(0.008, 180.0, 1.0)]),
                BandCurve::with_peaks(0.213, &[(0.006, 180.0, 1.0)]),
                BandCurve::with_peaks(0.202, &[(0.005, 180.0, 1.0)]),
            ],
            [0.0; 12],
            (0.55, 0.15),
            (0.45, 0.10),
        ),
        // Snow/ice: bright visible, dark SWIR, winter-peaked.
        p(
            8,
            "snow_ice",
            vec![
                BandCurve::with_peaks(0.75, &[(0.10, 0.0, 1.0)]),
                BandCurve::with_peaks(0.72, &[(0.10, 0.0, 1.0)]),
                BandCurve::with_peaks(0.70, &[(0.10, 0.0, 1.0)]),
                BandCurve::with_peaks(0.55, &[(0.08, 0.0, 1.0)]),
                BandCurve::with_peaks(0.08, &[(0.02, 0.0, 1.0)]),
                BandCurve::with_peaks(0.06, &[(0.02, 0.0, 1.0)]),
            ],
            [0.0; 12],
            (0.92, 0.04),
            (0.40, 0.12),
        ),
    ]
}

/// SplitMix64; distinct per-sample streams from one dataset seed.
fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// One sample from a profile. Draw order is fixed: per-band jitter, statics,
/// water flags, then daily noise. Values round through f32 so the in-memory
/// dataset equals its serialized form exactly.
pub fn generate_sample(
    profile: &ClassProfile,
    jitter: &JitterConfig,
    seed: u64,
) -> Result<(TimeSeriesSample, Vec<f64>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut curves = profile.bands.clone();
    for c in &mut curves {
        c.base += jitter.base_sd * unit.sample(&mut rng);
        for p in &mut c.peaks {
            p.amplitude *= 1.0 + jitter.amplitude_frac_sd * unit.sample(&mut rng);
            p.day += jitter.peak_day_sd * unit.sample(&mut rng);
        }
    }
    let statics = vec![
        f32_round((profile.elevation.0 + profile.elevation.1 * unit.sample(&mut rng)).clamp(0.0, 1.0)),
        f32_round((profile.slope.0 + profile.slope.1 * unit.sample(&mut rng)).clamp(0.0, 1.0)),
    ];
    let mut water_monthly = [false; 12];
    for (m, flag) in water_monthly.iter_mut().enumerate() {
        *flag = rng.gen::<f64>() < profile.water_monthly[m];
    }
    let mut clean = vec![0.0; DAYS * BANDS];
    let mut noisy = vec![0.0; DAYS * BANDS];
    for day in 0..DAYS {
        for band in 0..BANDS {
            let c = curves[band].value(day as f64).clamp(0.0, 1.0);
            let n = (c + profile.noise_sigma * unit.sample(&mut rng)).clamp(0.0, 1.0);
            clean[day * BANDS + band] = f32_round(c);
            noisy[day * BANDS + band] = f32_round(n);
        }
    }
    let labels = Labels {
        annual_class: profile.id,
        static_class: profile.id,
        impervious: profile.id == CLASS_IMPERVIOUS,
        crop: profile.id == CLASS_CROP,
        water_monthly,
    };
    Ok((TimeSeriesSample::new(noisy, statics, labels)?, clean))
}

/// Raises visible bands toward 0.9 on a seeded ~`rate` fraction of days and
/// pairs each with a shadow day pulled toward 0.05 on all bands. Returns the
/// corrupted sample and the sorted list of affected days.
pub fn inject_cloud_spikes(
    sample: &TimeSeriesSample,
    rate: f64,
    seed: u64,
) -> (TimeSeriesSample, Vec<u16>) {
    let mut out = sample.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut days = Vec::new();
    for day in 0..DAYS {
        if rng.gen::<f64>() >= rate {
            continue;
        }
        for band in [0, 1, 2] {
            let v = &mut out.reflectance[day * BANDS + band];
            *v += 0.8 * (0.9 - *v);
        }
        days.push(day as u16);
        let shadow = (day + rng.gen_range(3..15)) % DAYS;
        for band in 0..BANDS {
            let v = &mut out.reflectance[shadow * BANDS + band];
            *v += 0.8 * (0.05 - *v);
        }
        days.push(shadow as u16);
    }
    days.sort_unstable();
    days.dedup();
    (out, days)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub class_names: Vec<String>,
    pub samples: Vec<TimeSeriesSample>,
    /// Pre-noise reflectance per sample, day-major `[365 * 6]`.
    pub clean: Vec<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticDataset {
    /// `n` samples assigned to classes round-robin, so counts differ by at
    /// most one and divide exactly when `n` is a multiple of the class count.
    pub fn generate(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<Self, SynthError> {
        cfg.validate()?;
        let k = cfg.profiles.len();
        let pairs: Vec<(TimeSeriesSample, Vec<f64>)> = (0..n)
            .map(|i| generate_sample(&cfg.profiles[i % k], &cfg.jitter, mix_seed(seed, i as u64)))
            .collect::<Result<_, _>>()?;
        let (samples, clean) = pairs.into_iter().unzip();
        Ok(Self {
            class_names: cfg.profiles.iter().map(|p| p.name.clone()).collect(),
            samples,
            clean,
            seed,
        })
    }

    /// Train/validation pair on disjoint seed streams.
    pub fn generate_pair(
        cfg: &GeneratorConfig,
        n_train: usize,
        n_val: usize,
        seed: u64,
    ) -> Result<(Self, Self), SynthError> {
        let train = Self::generate(cfg, n_train, mix_seed(seed, 0x7261_696e))?;
        let val = Self::generate(cfg, n_val, mix_seed(seed, 0x7661_6c69))?;
        Ok((train, val))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let mut w = io::BufWriter::new(fs::File::create(path)?);
        self.write(&mut w)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), SynthError> {
        w.write_all(b"ESDS")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        let s = self.samples.first().map_or(2, |x| x.statics.len());
        w.write_all(&(s as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.class_names.len() as u32).to_le_bytes())?;
        for name in &self.class_names {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
        }
        for (sample, clean) in self.samples.iter().zip(&self.clean) {
            let l = &sample.labels;
            w.write_all(&(l.annual_class as u16).to_le_bytes())?;
            w.write_all(&(l.static_class as u16).to_le_bytes())?;
            let mut flags: u16 = 0;
            for (m, &f) in l.water_monthly.iter().enumerate() {
                flags |= (f as u16) << m;
            }
            flags |= (l.impervious as u16) << 12;
            flags |= (l.crop as u16) << 13;
            w.write_all(&flags.to_le_bytes())?;
            for &v in &sample.statics {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for &v in &sample.reflectance {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
            for &v in clean {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let mut r = io::BufReader::new(fs::File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, SynthError> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != b"ESDS" {
            return Err(SynthError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != 1 {
            return Err(SynthError::BadVersion(version));
        }
        let n = read_u32(r)? as usize;
        let s = read_u32(r)? as usize;
        let mut seed_bytes = [0u8; 8];
        read_exact(r, &mut seed_bytes)?;
        let seed = u64::from_le_bytes(seed_bytes);
        let n_classes = read_u32(r)? as usize;
        if n_classes > 4096 {
            return Err(SynthError::Malformed(format!(
                "implausible class count {n_classes}"
            )));
        }
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = read_u16(r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf)?;
            class_names.push(
                String::from_utf8(buf)
                    .map_err(|_| SynthError::Malformed("class name is not UTF-8".into()))?,
            );
        }
        let mut samples = Vec::with_capacity(n);
        let mut clean = Vec::with_capacity(n);
        for _ in 0..n {
            let annual_class = read_u16(r)? as usize;
            let static_class = read_u16(r)? as usize;
            let flags = read_u16(r)?;
            let mut water_monthly = [false; 12];
            for (m, f) in water_monthly.iter_mut().enumerate() {
                *f = flags & (1 << m) != 0;
            }
            let labels = Labels {
                annual_class,
                static_class,
                impervious: flags & (1 << 12) != 0,
                crop: flags & (1 << 13) != 0,
                water_monthly,
            };
            let statics = read_f32s(r, s)?;
            let reflectance = read_f32s(r, DAYS * BANDS)?;
            let clean_refl = read_f32s(r, DAYS * BANDS)?;
            samples.push(TimeSeriesSample::new(reflectance, statics, labels)?);
            clean.push(clean_refl);
        }
        Ok(Self {
            class_names,
            samples,
            clean,
            seed,
        })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), SynthError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            SynthError::Truncated
        } else {
            SynthError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, SynthError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SynthError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, SynthError> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::compute_index_targets;

    #[test]
    fn default_profiles_are_valid_and_ordered() {
        let cfg = GeneratorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.profiles.len(), CLASS_COUNT);
        for (i, p) in cfg.profiles.iter().enumerate() {
            assert_eq!(p.id, i);
            assert_eq!(p.name, CLASS_NAMES[i]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = SyntheticDataset::generate(&cfg, 18, 42).unwrap();
        let b = SyntheticDataset::generate(&cfg, 18, 42).unwrap();
        assert_eq!(a, b);
        let c = SyntheticDataset::generate(&cfg, 18, 43).unwrap();
        assert_ne!(a.samples[0].reflectance, c.samples[0].reflectance);
    }

    #[test]
    fn stratification_is_round_robin() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 27, 7).unwrap();
        let mut counts = [0usize; CLASS_COUNT];
        for s in &d.samples {
            counts[s.labels.annual_class] += 1;
        }
        assert_eq!(counts, [3; CLASS_COUNT]);
    }

    #[test]
    fn signals_stay_in_unit_range() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 18, 3).unwrap();
        for (s, c) in d.samples.iter().zip(&d.clean) {
            assert!(s.reflectance.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(c.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn water_profile_is_dark_and_wet() {
        let cfg = GeneratorConfig::default();
        let water = &cfg.profiles[CLASS_WATER];
        // From the profile parameters themselves: NIR/SWIR means below 0.1
        // and NDWI positive in every month.
        let mut refl = vec![0.0; DAYS * BANDS];
        for day in 0..DAYS {
            for band in 0..BANDS {
                refl[day * BANDS + band] = water.clean_value(band, day);
            }
        }
        for band in [3, 4, 5] {
            let mean: f64 =
                (0..DAYS).map(|d| refl[d * BANDS + band]).sum::<f64>() / DAYS as f64;
            assert!(mean < 0.1, "band {band} mean {mean}");
        }
        let idx = compute_index_targets(&refl);
        assert!(idx.ndwi.iter().all(|&v| v > 0.0), "{:?}", idx.ndwi);
    }

    #[test]
    fn impervious_variance_is_below_vegetation() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 90, 11).unwrap();
        let band_var = |class: usize| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for (s, _) in d.samples.iter().zip(&d.clean) {
                if s.labels.annual_class != class {
                    continue;
                }
                count += 1;
                for band in 0..BANDS {
                    let vals: Vec<f64> =
                        (0..DAYS).map(|day| s.reflectance[day * BANDS + band]).collect();
                    let mean = vals.iter().sum::<f64>() / DAYS as f64;
                    total +=
                        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / DAYS as f64;
                }
            }
            total / (count * BANDS) as f64
        };
        let imp = band_var(CLASS_IMPERVIOUS);
        for veg in [0, 1, 2, 3] {
            assert!(
                imp < band_var(veg),
                "impervious variance {imp} not below class {veg}"
            );
        }
    }

    #[test]
    fn cloud_injection_examples() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 9, 5).unwrap();
        let sample = &d.samples[1];
        let (same, days) = inject_cloud_spikes(sample, 0.0, 1);
        assert_eq!(&same, sample);
        assert!(days.is_empty());

        let (spiked, days) = inject_cloud_spikes(sample, 0.05, 1);
        assert!(!days.is_empty());
        // Clouds (~rate * 365 of them) plus paired shadows.
        assert!(days.len() >= 10 && days.len() <= 60, "{}", days.len());
        assert!(spiked.reflectance.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Every recorded day was touched, and at least one cloud day that was
        // not later shadowed stays bright (>= 0.72 by construction).
        for &day in &days {
            let d = day as usize;
            assert_ne!(
                spiked.reflectance[d * BANDS..(d + 1) * BANDS],
                sample.reflectance[d * BANDS..(d + 1) * BANDS]
            );
        }
        let max_blue = days
            .iter()
            .map(|&d| spiked.reflectance[d as usize * BANDS])
            .fold(0.0f64, f64::max);
        assert!(max_blue > 0.7, "no bright cloud day, max blue {max_blue}");
        let again = inject_cloud_spikes(sample, 0.05, 1);
        assert_eq!(again.1, days);
    }

    #[test]
    fn dataset_file_round_trip_is_stable() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 18, 9).unwrap();
        let mut bytes = Vec::new();
        d.write(&mut bytes).unwrap();
        let loaded = SyntheticDataset::read(&mut &bytes[..]).unwrap();
        // Generation rounds through f32, so the round trip is exact.
        assert_eq!(loaded, d);
        let mut bytes2 = Vec::new();
        loaded.write(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn malformed_dataset_files_are_rejected() {
        let cfg = GeneratorConfig::default();
        let d = SyntheticDataset::generate(&cfg, 9, 9).unwrap();
        let mut bytes = Vec::new();
        d.write(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            SyntheticDataset::read(&mut &bad_magic[..]),
            Err(SynthError::BadMagic)
        ));

        let truncated = &bytes[..bytes.len() / 2];
        assert!(matches!(
            SyntheticDataset::read(&mut &truncated[..]),
            Err(SynthError::Truncated)
        ));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            SyntheticDataset::read(&mut &bad_version[..]),
            Err(SynthError::BadVersion(9))
        ));
    }

    #[test]
    fn raw_nearest_neighbor_separates_classes() {
        let cfg = GeneratorConfig::default();
        let (train, val) = SyntheticDataset::generate_pair(&cfg, 90, 90, 17).unwrap();
        let mut correct = 0;
        for (v, vc) in val.samples.iter().zip(&val.clean) {
            let mut best = (f64::INFINITY, 0);
            for (t, tc) in train.samples.iter().zip(&train.clean) {
                let dist: f64 = vc
                    .iter()
                    .zip(tc)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, t.labels.annual_class);
                }
            }
            if best.1 == v.labels.annual_class {
                correct += 1;
            }
        }
        let acc = correct as f64 / val.samples.len() as f64;
        assert!(acc > 0.9, "1-NN accuracy {acc}");
    }

    #[test]
    fn generate_pair_uses_disjoint_streams() {
        let cfg = GeneratorConfig::default();
        let (train, val) = SyntheticDataset::generate_pair(&cfg, 9, 9, 3).unwrap();
        assert_ne!(train.samples[0].reflectance, val.samples[0].reflectance);
    }
}
