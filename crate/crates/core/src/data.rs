//! Audio I/O, synthetic sources, mixing and dynamic-mixing augmentation.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type DataRng = ChaCha8Rng;

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Relative level range of non-anchor sources, in dB.
pub const MAX_RELATIVE_GAIN_DB: f64 = 5.0;

/// Speed perturbation range.
pub const SPEED_RANGE: (f64, f64) = (0.95, 1.05);

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> AudioSignal {
        AudioSignal {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub mixture: AudioSignal,
    pub sources: Vec<AudioSignal>,
}

impl MixtureSample {
    /// Builds the mixture as the sum of `sources`, truncated to the shortest.
    pub fn from_sources(mut sources: Vec<AudioSignal>) -> Result<MixtureSample> {
        let Some(first) = sources.first() else {
            return Err(Error::usage("a mixture needs at least one source"));
        };
        let rate = first.sample_rate;
        if sources.iter().any(|s| s.sample_rate != rate) {
            return Err(Error::Data("sources have different sample rates".into()));
        }
        let len = sources.iter().map(AudioSignal::len).min().unwrap_or(0);
        if len == 0 {
            return Err(Error::Data("empty source signal".into()));
        }
        let mut mixture = vec![0.0; len];
        for s in &mut sources {
            s.samples.truncate(len);
            mixture
                .iter_mut()
                .zip(&s.samples)
                .for_each(|(m, v)| *m += v);
        }
        Ok(MixtureSample {
            mixture: AudioSignal::new(mixture, rate),
            sources,
        })
    }

    /// Source sample vectors, for the loss functions.
    pub fn targets(&self) -> Vec<&[f64]> {
        self.sources.iter().map(|s| s.samples.as_slice()).collect()
    }

    /// Random contiguous excerpt of at most `max_len` samples.
    pub fn crop<R: Rng + ?Sized>(&self, max_len: usize, rng: &mut R) -> MixtureSample {
        let len = self.mixture.len();
        if max_len == 0 || len <= max_len {
            return self.clone();
        }
        let start = rng.random_range(0..=len - max_len);
        let cut = |s: &AudioSignal| {
            AudioSignal::new(s.samples[start..start + max_len].to_vec(), s.sample_rate)
        };
        MixtureSample {
            mixture: cut(&self.mixture),
            sources: self.sources.iter().map(cut).collect(),
        }
    }
}

// --- WAV ---

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads 16-bit PCM mono; samples are scaled by 1/32768.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_error(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(format_error(
            path,
            format!("expected mono, found {} channels", spec.channels),
        ));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_error(
            path,
            format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format_error(path, e.to_string()))?;
    Ok(AudioSignal::new(samples, spec.sample_rate))
}

/// Writes 16-bit PCM mono, rounding and saturating each sample.
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_error(path, other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &v in &signal.samples {
        let q = (v * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)
}

// --- mixing ---

/// Level of a non-anchor source below the first one, uniform in `[0, 5]` dB.
pub fn sample_relative_gain_db<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(0.0..=MAX_RELATIVE_GAIN_DB)
}

/// Mixes `sources` after truncating to the shortest. The first source keeps
/// its level; each other source is attenuated by an independent gain drawn
/// from [`sample_relative_gain_db`]. If the mixture would clip, mixture and
/// sources are rescaled together.
pub fn make_mixture<R: Rng + ?Sized>(
    sources: &[AudioSignal],
    rng: &mut R,
) -> Result<MixtureSample> {
    if sources.len() < 2 {
        return Err(Error::usage(format!(
            "a mixture needs at least 2 sources, got {}",
            sources.len()
        )));
    }
    let gained: Vec<AudioSignal> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let gain = if i == 0 {
                1.0
            } else {
                10f64.powf(-sample_relative_gain_db(rng) / 20.0)
            };
            AudioSignal::new(s.samples.iter().map(|v| v * gain).collect(), s.sample_rate)
        })
        .collect();
    let mut sample = MixtureSample::from_sources(gained)?;
    let peak = sample
        .mixture
        .samples
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let sources = sample
            .sources
            .into_iter()
            .map(|s| AudioSignal::new(s.samples.iter().map(|v| v / peak).collect(), s.sample_rate))
            .collect();
        sample = MixtureSample::from_sources(sources)?;
    }
    Ok(sample)
}

/// Resamples by linear interpolation to `round(T / factor)` samples; output
/// sample `i` reads the input at position `i·factor`.
pub fn speed_perturb(x: &AudioSignal, factor: f64) -> Result<AudioSignal> {
    if !(SPEED_RANGE.0..=SPEED_RANGE.1).contains(&factor) {
        return Err(Error::usage(format!(
            "speed factor {factor} outside [{}, {}]",
            SPEED_RANGE.0, SPEED_RANGE.1
        )));
    }
    if x.is_empty() {
        return Ok(x.clone());
    }
    let n = x.len();
    let out_len = ((n as f64 / factor).round() as usize).max(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = (i as f64 * factor).min((n - 1) as f64);
            let left = pos.floor() as usize;
            let right = (left + 1).min(n - 1);
            let frac = pos - left as f64;
            x.samples[left] + frac * (x.samples[right] - x.samples[left])
        })
        .collect();
    Ok(AudioSignal::new(samples, x.sample_rate))
}

/// Single-source signals tagged by speaker or source identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceBank {
    pub entries: Vec<(String, AudioSignal)>,
}

impl SourceBank {
    /// Distinct tags in first-seen order.
    pub fn tags(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = Vec::new();
        for (tag, _) in &self.entries {
            if !tags.contains(&tag.as_str()) {
                tags.push(tag);
            }
        }
        tags
    }

    fn with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a AudioSignal> + 'a {
        self.entries
            .iter()
            .filter(move |(t, _)| t == tag)
            .map(|(_, s)| s)
    }
}

fn draw_sources<R: Rng + ?Sized>(
    bank: &SourceBank,
    num_speakers: usize,
    rng: &mut R,
    perturb: bool,
) -> Result<Vec<AudioSignal>> {
    let tags = bank.tags();
    if tags.len() < num_speakers {
        return Err(Error::usage(format!(
            "mixing needs {num_speakers} distinct source tags, bank has {}",
            tags.len()
        )));
    }
    let picked = sample(rng, tags.len(), num_speakers).into_vec();
    let mut sources = Vec::with_capacity(num_speakers);
    for i in picked {
        let candidates: Vec<&AudioSignal> = bank.with_tag(tags[i]).collect();
        let source = candidates[rng.random_range(0..candidates.len())];
        if perturb {
            let factor = rng.random_range(SPEED_RANGE.0..=SPEED_RANGE.1);
            sources.push(speed_perturb(source, factor)?);
        } else {
            sources.push(source.clone());
        }
    }
    Ok(sources)
}

/// Draws `num_speakers` sources with distinct tags, speed-perturbs each
/// independently, and mixes them with [`make_mixture`].
pub fn dynamic_mix<R: Rng + ?Sized>(
    bank: &SourceBank,
    num_speakers: usize,
    rng: &mut R,
) -> Result<MixtureSample> {
    let sources = draw_sources(bank, num_speakers, rng, true)?;
    make_mixture(&sources, rng)
}

/// [`dynamic_mix`] without speed perturbation, for building fixed sets.
pub fn static_mix<R: Rng + ?Sized>(
    bank: &SourceBank,
    num_speakers: usize,
    rng: &mut R,
) -> Result<MixtureSample> {
    let sources = draw_sources(bank, num_speakers, rng, false)?;
    make_mixture(&sources, rng)
}

/// Harmonic tones with separated fundamentals (300 Hz to 1200 Hz, ±5% jitter),
/// up to three harmonics below 0.45·`sample_rate`, random phases and a slow
/// amplitude modulation. Each signal peaks at 0.7.
pub fn synth_toy_bank<R: Rng + ?Sized>(
    n_sources: usize,
    length: usize,
    sample_rate: u32,
    rng: &mut R,
) -> SourceBank {
    let sr = sample_rate as f64;
    let entries = (0..n_sources)
        .map(|i| {
            let position = if n_sources > 1 {
                i as f64 / (n_sources - 1) as f64
            } else {
                0.0
            };
            let f0 = 300.0 * 4f64.powf(position) * rng.random_range(0.95..1.05);
            let harmonics: Vec<(f64, f64, f64)> = [1.0, 0.5, 0.25]
                .iter()
                .enumerate()
                .map(|(h, &amp)| {
                    (
                        f0 * (h + 1) as f64,
                        amp,
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .filter(|&(f, _, _)| f < 0.45 * sr)
                .collect();
            let f_am = rng.random_range(1.0..4.0);
            let am_phase = rng.random_range(0.0..std::f64::consts::TAU);
            let mut samples: Vec<f64> = (0..length)
                .map(|n| {
                    let t = n as f64 / sr;
                    let tone: f64 = harmonics
                        .iter()
                        .map(|&(f, a, p)| a * (std::f64::consts::TAU * f * t + p).sin())
                        .sum();
                    let envelope = 0.6 + 0.4 * (std::f64::consts::TAU * f_am * t + am_phase).sin();
                    envelope * tone
                })
                .collect();
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                samples.iter_mut().for_each(|v| *v *= 0.7 / peak);
            }
            (format!("tone{i}"), AudioSignal::new(samples, sample_rate))
        })
        .collect();
    SourceBank { entries }
}

/// Deterministic 64-bit seed for a position in a stream, e.g. `(seed, epoch, index)`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn seeded_rng(seed: u64, path: &[u64]) -> DataRng {
    DataRng::seed_from_u64(derive_seed(seed, path))
}

// --- manifests ---

/// One line of a manifest: an id and the source files of that mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub paths: Vec<PathBuf>,
}

/// Parses `id<TAB>path<TAB>path...` lines. Relative paths are resolved
/// against `base`. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t').map(str::trim);
        let id = fields.next().unwrap_or_default().to_string();
        let paths: Vec<PathBuf> = fields
            .filter(|f| !f.is_empty())
            .map(|f| base.join(f))
            .collect();
        if paths.is_empty() {
            return Err(Error::Data(format!(
                "manifest line {}: no paths for id {id:?}",
                n + 1
            )));
        }
        entries.push(ManifestEntry { id, paths });
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Loads a bank listed as `tag<TAB>path` lines.
pub fn read_bank(path: &Path) -> Result<SourceBank> {
    let mut bank = SourceBank::default();
    for entry in read_manifest(path)? {
        for p in &entry.paths {
            bank.entries.push((entry.id.clone(), read_wav(p)?));
        }
    }
    if bank.entries.is_empty() {
        return Err(Error::Data(format!(
            "source bank {} is empty",
            path.display()
        )));
    }
    Ok(bank)
}

/// Loads pre-mixed samples; each line lists the (already gained) sources of one mixture.
pub fn read_mixtures(path: &Path, num_speakers: usize) -> Result<Vec<(String, MixtureSample)>> {
    read_manifest(path)?
        .into_iter()
        .map(|entry| {
            if entry.paths.len() != num_speakers {
                return Err(Error::Data(format!(
                    "mixture {} lists {} sources, expected {num_speakers}",
                    entry.id,
                    entry.paths.len()
                )));
            }
            let sources = entry
                .paths
                .iter()
                .map(|p| read_wav(p))
                .collect::<Result<Vec<_>>>()?;
            Ok((entry.id, MixtureSample::from_sources(sources)?))
        })
        .collect()
}

// --- mixture streams ---

/// Training data addressed by `(epoch, index)`; the same address always
/// yields the same sample.
pub trait MixtureSource {
    fn mixture(&self, epoch: usize, index: usize) -> Result<MixtureSample>;
}

/// A fixed list of pre-mixed samples, cycled by index.
pub struct FixedMixtures(pub Vec<MixtureSample>);

impl MixtureSource for FixedMixtures {
    fn mixture(&self, _epoch: usize, index: usize) -> Result<MixtureSample> {
        if self.0.is_empty() {
            return Err(Error::Data("no training mixtures".into()));
        }
        Ok(self.0[index % self.0.len()].clone())
    }
}

/// Fresh dynamic mixes from a source bank.
pub struct DynamicMixing {
    pub bank: SourceBank,
    pub num_speakers: usize,
    pub seed: u64,
}

impl MixtureSource for DynamicMixing {
    fn mixture(&self, epoch: usize, index: usize) -> Result<MixtureSample> {
        dynamic_mix(
            &self.bank,
            self.num_speakers,
            &mut seeded_rng(self.seed, &[epoch as u64, index as u64]),
        )
    }
}

/// Fresh synthetic tones mixed at random relative levels.
pub struct ToyMixtures {
    pub num_speakers: usize,
    pub length: usize,
    pub sample_rate: u32,
    pub seed: u64,
}

impl ToyMixtures {
    /// `count` samples from epoch 0, e.g. for validation.
    pub fn take(&self, count: usize) -> Result<Vec<MixtureSample>> {
        (0..count).map(|i| self.mixture(0, i)).collect()
    }
}

impl MixtureSource for ToyMixtures {
    fn mixture(&self, epoch: usize, index: usize) -> Result<MixtureSample> {
        let mut rng = seeded_rng(self.seed, &[epoch as u64, index as u64]);
        let bank = synth_toy_bank(self.num_speakers, self.length, self.sample_rate, &mut rng);
        let sources: Vec<AudioSignal> = bank.entries.into_iter().map(|(_, s)| s).collect();
        make_mixture(&sources, &mut rng)
    }
}
