//! Synthetic graded images and the KDST dataset container.
//!
//! A grade-`g` image holds two bright horizontal bands separated by a dark
//! gap that narrows by `global_gap` pixels per grade, with a horizontal
//! sinusoid inside the bands whose frequency rises by `texture_freq_step`
//! cycles per grade. Gaussian noise is added and values are clipped to
//! `[0, 1]`. The single channel is replicated across `channels`.
//!
//! KDST layout (little-endian): `"KDST"` · version `u32` = 1 · split `u8` ·
//! grades `u8` · count `u32` · count × label `u8` · KTEN `[N, H, W, C]`.

use std::f64::consts::TAU;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::io::{write_tensor, ByteReader};
use crate::tensor::Tensor;

pub const KDST_MAGIC: &[u8; 4] = b"KDST";
pub const KDST_VERSION: u32 = 1;

const BACKGROUND: f64 = 0.1;
const BAND_LEVEL: f64 = 0.55;
const TEXTURE_AMPLITUDE: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub per_grade: usize,
    pub image_size: usize,
    pub grades: usize,
    pub channels: usize,
    pub seed: u64,
    /// Gap between the bands for grade 0, in pixels.
    pub base_gap: usize,
    /// Gap narrowing per grade, in pixels.
    pub global_gap: usize,
    pub band_height: usize,
    /// Maximum vertical offset of the band pair, in pixels.
    pub jitter: usize,
    /// Texture cycles across the image width for grade 0.
    pub base_freq: f64,
    pub texture_freq_step: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::for_size(64)
    }
}

impl SyntheticSpec {
    /// Geometry scaled to `image_size`; 64 gives gaps 20, 16, 12, 8, 4.
    pub fn for_size(image_size: usize) -> Self {
        SyntheticSpec {
            per_grade: 100,
            image_size,
            grades: 5,
            channels: 3,
            seed: 0,
            base_gap: image_size * 5 / 16,
            global_gap: (image_size / 16).max(1),
            band_height: (image_size * 3 / 16).max(1),
            jitter: image_size / 16,
            base_freq: 2.0,
            texture_freq_step: 1.5,
            noise_sigma: 0.25,
        }
    }

    pub fn gap(&self, grade: usize) -> Option<usize> {
        self.base_gap
            .checked_sub(grade * self.global_gap)
            .filter(|&g| g >= 1)
    }

    pub fn freq(&self, grade: usize) -> f64 {
        self.base_freq + grade as f64 * self.texture_freq_step
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.per_grade == 0 || self.image_size == 0 || self.channels == 0 {
            return fail("per_grade, image_size and channels must be positive".into());
        }
        if !(2..=255).contains(&self.grades) {
            return fail(format!("grades must be in 2..=255, got {}", self.grades));
        }
        if self.gap(self.grades - 1).is_none() {
            return fail(format!(
                "band gap underflows: base {} - {} x {} is below 1 pixel",
                self.base_gap,
                self.grades - 1,
                self.global_gap
            ));
        }
        let tall = 2 * self.band_height + self.base_gap + 2 * self.jitter;
        if self.band_height == 0 || tall > self.image_size {
            return fail(format!(
                "bands ({tall} px with jitter) do not fit a {} px image",
                self.image_size
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !self.base_freq.is_finite() || !self.texture_freq_step.is_finite() {
            return fail("texture frequencies must be finite".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    Full,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Full => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            3 => Split::Full,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Full => "full",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "full" => Ok(Split::Full),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, H, W, C]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub grades: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, grades: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dim(
                "dataset",
                format!("{} labels for images {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= grades) {
            return Err(Error::Contract(format!("label {bad} out of range for {grades} grades")));
        }
        Ok(Dataset {
            images,
            labels,
            grades,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn grade_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.grades];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images `[len, H, W, C]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.image_shape().iter().product();
        let src = self.images.data();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(shape, data), labels)
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Config(format!("{split} split would be empty")));
        }
        let (images, labels) = self.batch(indices);
        Ok(Dataset {
            images,
            labels,
            grades: self.grades,
            split,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.len() + 24 + self.images.numel() * 8);
        out.extend_from_slice(KDST_MAGIC);
        out.extend_from_slice(&KDST_VERSION.to_le_bytes());
        out.push(self.split.tag());
        out.push(self.grades as u8);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend(self.labels.iter().map(|&l| l as u8));
        write_tensor(&mut out, &self.images).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(bytes);
        r.magic(KDST_MAGIC)?;
        let version = r.u32("dataset version")?;
        if version != KDST_VERSION {
            return Err(Error::UnsupportedVersion {
                kind: "KDST",
                found: version,
                expected: KDST_VERSION,
            });
        }
        let at = r.offset();
        let split = Split::from_tag(r.u8("split tag")?).ok_or_else(|| Error::Format {
            offset: at,
            message: "unknown split tag".into(),
        })?;
        let at = r.offset();
        let grades = r.u8("grade count")? as usize;
        if grades < 2 {
            return Err(Error::Format {
                offset: at,
                message: format!("grade count {grades} is below 2"),
            });
        }
        let n = r.u32("sample count")? as usize;
        let at = r.offset();
        let raw = r.take(n, "labels")?;
        if let Some(pos) = raw.iter().position(|&l| l as usize >= grades) {
            return Err(Error::Format {
                offset: at + pos as u64,
                message: format!("label {} out of range for {grades} grades", raw[pos]),
            });
        }
        let labels = raw.iter().map(|&l| l as usize).collect();
        let at = r.offset();
        let images = r.tensor()?;
        if images.rank() != 4 || images.shape()[0] != n {
            return Err(Error::Format {
                offset: at,
                message: format!("image tensor {:?} does not hold {n} samples", images.shape()),
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format {
                offset: r.offset(),
                message: format!("{} trailing bytes after dataset", r.remaining()),
            });
        }
        Ok(Dataset {
            images,
            labels,
            grades,
            split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

/// Renders one noiseless-or-noisy grade image into `out` (`H·W` values).
fn render(spec: &SyntheticSpec, grade: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let size = spec.image_size;
    let gap = spec.gap(grade).expect("validated");
    let span = 2 * spec.band_height + gap;
    let jitter = spec.jitter as isize;
    let shift = rng.gen_range(-jitter..=jitter);
    let phase = rng.gen_range(0.0..TAU);
    let top = (((size - span) / 2) as isize + shift) as usize;
    let freq = spec.freq(grade);
    for y in 0..size {
        let in_band = (y >= top && y < top + spec.band_height)
            || (y >= top + spec.band_height + gap && y < top + span);
        for x in 0..size {
            let v = if in_band {
                BAND_LEVEL + TEXTURE_AMPLITUDE * (TAU * freq * x as f64 / size as f64 + phase).sin()
            } else {
                BACKGROUND
            };
            out[y * size + x] = v;
        }
    }
    if spec.noise_sigma > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * z;
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Deterministic grade-major dataset: `per_grade` samples of grade 0, then
/// grade 1, and so on.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (size, c) = (spec.image_size, spec.channels);
    let n = spec.per_grade * spec.grades;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut plane = vec![0.0; size * size];
    let mut data = Vec::with_capacity(n * size * size * c);
    let mut labels = Vec::with_capacity(n);
    for grade in 0..spec.grades {
        for _ in 0..spec.per_grade {
            render(spec, grade, &mut rng, &mut plane);
            for &v in &plane {
                data.extend(std::iter::repeat(v).take(c));
            }
            labels.push(grade);
        }
    }
    Dataset::new(
        Tensor::from_parts(vec![n, size, size, c], data),
        labels,
        spec.grades,
        Split::Full,
    )
}

/// Stratified train/val/test split. Per grade, `round(f · n)` samples go to
/// val and test and the rest to train; each split keeps original order.
pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    split_with(dataset, seed, |n| {
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n);
        let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_val);
        (n_val, n_test)
    })
}

/// Stratified split taking exactly `val` and `test` samples of every grade.
pub fn split_counts(dataset: &Dataset, val: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let counts = dataset.grade_counts();
    if let Some(g) = counts.iter().position(|&n| n < val + test) {
        return Err(Error::Config(format!(
            "grade {g} has {} samples, fewer than the {} requested for val and test",
            counts[g],
            val + test
        )));
    }
    split_with(dataset, seed, |_| (val, test))
}

fn split_with(
    dataset: &Dataset,
    seed: u64,
    sizes: impl Fn(usize) -> (usize, usize),
) -> Result<(Dataset, Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for grade in 0..dataset.grades {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == grade).collect();
        idx.shuffle(&mut rng);
        let (n_val, n_test) = sizes(idx.len());
        let (val, rest) = idx.split_at(n_val);
        let (test, train) = rest.split_at(n_test);
        parts[0].extend_from_slice(train);
        parts[1].extend_from_slice(val);
        parts[2].extend_from_slice(test);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok((
        dataset.subset(&parts[0], Split::Train)?,
        dataset.subset(&parts[1], Split::Val)?,
        dataset.subset(&parts[2], Split::Test)?,
    ))
}

pub const TRAIN_FILE: &str = "train.kdst";
pub const VAL_FILE: &str = "val.kdst";
pub const TEST_FILE: &str = "test.kdst";

/// A generated benchmark as stored in a data directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// `spec.per_grade` training samples per grade plus `val` and `test`
    /// held-out samples per grade, all drawn from one generator stream.
    pub fn generate(spec: &SyntheticSpec, val: usize, test: usize) -> Result<Splits> {
        let full = generate(&SyntheticSpec {
            per_grade: spec.per_grade + val + test,
            ..spec.clone()
        })?;
        let (train, val, test) = split_counts(&full, val, test, spec.seed)?;
        Ok(Splits { train, val, test })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        self.train.save(&dir.join(TRAIN_FILE))?;
        self.val.save(&dir.join(VAL_FILE))?;
        self.test.save(&dir.join(TEST_FILE))
    }

    pub fn load(dir: &Path) -> Result<Splits> {
        Ok(Splits {
            train: Dataset::load(&dir.join(TRAIN_FILE))?,
            val: Dataset::load(&dir.join(VAL_FILE))?,
            test: Dataset::load(&dir.join(TEST_FILE))?,
        })
    }
}

#[cfg(test)]
mod tests;
