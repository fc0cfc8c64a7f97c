//! Synthetic planted-expertise data, `MUXD` dataset files and batching.
//!
//! Each sample belongs to one expertise region. A region owns a subset of
//! the classes and a spatial window; the class is written into that window
//! as a fixed ±1 template, the rest of the image is noise. A per-region
//! marker pattern goes into a separate window, so the region can be told
//! apart from the whole image even when the class cannot. A `shared_fraction`
//! of samples echo their class template into every region window and are
//! therefore solvable by every region expert.

use std::num::NonZeroUsize;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const DATASET_MAGIC: [u8; 4] = *b"MUXD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn code(self) -> u32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            _ => Err(Error::Format {
                kind: "dataset",
                detail: format!("unknown split tag {c}"),
            }),
        }
    }
}

/// Labelled inputs stored as one `[n × C × H × W]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

/// Materialized batch of samples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.rank() < 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} labels for inputs of shape {:?}", labels.len(), inputs.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: num_classes,
            });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> Tensor {
        let per: usize = self.sample_shape().iter().product();
        let data = self.inputs.data()[i * per..(i + 1) * per].to_vec();
        Tensor::new(self.sample_shape().to_vec(), data).expect("slice of a valid tensor")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: indices.iter().map(|&i| self.sample(i)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Serializes to the `MUXD` layout:
    /// magic, version, split tag, class count, sample count, sample rank,
    /// sample dims, f32 inputs, u32 labels, CRC32 (all little-endian).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(&DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.u32(self.split.code());
        w.len_u32(self.num_classes)?;
        w.len_u32(self.len())?;
        w.len_u32(self.sample_shape().len())?;
        for &d in self.sample_shape() {
            w.len_u32(d)?;
        }
        w.f32s(self.inputs.data());
        for &l in &self.labels {
            w.len_u32(l)?;
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, _) = Reader::open("dataset", bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let split = Split::from_code(r.u32()?)?;
        let num_classes = r.usize()?;
        let n = r.usize()?;
        let rank = r.usize()?;
        if rank == 0 || rank > 4 {
            return Err(Error::Format {
                kind: "dataset",
                detail: format!("sample rank {rank}"),
            });
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let per = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::Truncated("dataset"))?;
        let data = r.f32s(n.checked_mul(per).ok_or(Error::Truncated("dataset"))?)?;
        let labels = (0..n).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let mut shape = vec![n];
        shape.extend(dims);
        let inputs = Tensor::new(shape, data).map_err(|e| Error::Format {
            kind: "dataset",
            detail: e.to_string(),
        })?;
        Self::new(inputs, labels, num_classes, split)
    }
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// Shuffled mini-batches over one epoch. The last batch may be short.
#[derive(Debug, Clone)]
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(out)
    }
}

/// One epoch of index batches drawn from a seeded permutation.
pub fn batches(dataset: &Dataset, batch_size: NonZeroUsize, rng: &mut Rng) -> Batches {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut order);
    Batches {
        order,
        batch_size: batch_size.get(),
        pos: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub classes: Vec<usize>,
    /// Where this region's class templates are written.
    pub window: Window,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub regions: Vec<RegionSpec>,
    /// Window holding the per-region marker pattern; no marker when absent.
    pub marker_window: Option<Window>,
    /// Template amplitude.
    pub signal: f32,
    /// Standard deviation of the additive pixel noise.
    pub noise: f32,
    /// Probability that a sample's template is echoed into every region window.
    pub shared_fraction: f64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl Default for PlantedSpec {
    /// Three regions in three quadrants of a 1×16×16 image, marker in the fourth.
    fn default() -> Self {
        let q = |top, left| Window {
            top,
            left,
            height: 8,
            width: 8,
        };
        Self {
            num_classes: 10,
            input_shape: vec![1, 16, 16],
            regions: vec![
                RegionSpec {
                    classes: vec![0, 1, 2, 3],
                    window: q(0, 0),
                    fraction: 0.4,
                },
                RegionSpec {
                    classes: vec![4, 5, 6],
                    window: q(0, 8),
                    fraction: 0.3,
                },
                RegionSpec {
                    classes: vec![7, 8, 9],
                    window: q(8, 0),
                    fraction: 0.3,
                },
            ],
            marker_window: Some(q(8, 8)),
            signal: 1.0,
            noise: 1.0,
            shared_fraction: 0.2,
            train_samples: 6000,
            val_samples: 1000,
        }
    }
}

/// Test-facing ground truth for one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleAnnotation {
    pub region: usize,
    /// Template echoed into every region window.
    pub shared: bool,
    /// Intended number of region experts that fail on the sample.
    pub hardness: usize,
}

#[derive(Debug, Clone)]
pub struct AnnotatedDataset {
    pub dataset: Dataset,
    pub annotations: Vec<SampleAnnotation>,
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub train: AnnotatedDataset,
    pub val: AnnotatedDataset,
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("planted spec: {msg}")));
        let (h, w) = match self.input_shape.as_slice() {
            [c, h, w] if *c > 0 && *h > 0 && *w > 0 => (*h, *w),
            s => return bad(format!("input shape must be [C, H, W], got {s:?}")),
        };
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.regions.is_empty() {
            return bad("need at least one region".into());
        }
        let total: f64 = self.regions.iter().map(|r| r.fraction).sum();
        if self.regions.iter().any(|r| !(r.fraction >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return bad(format!(
                "region fractions must be nonnegative and sum to 1, got {total}"
            ));
        }
        let size = (self.regions[0].window.height, self.regions[0].window.width);
        for (i, r) in self.regions.iter().enumerate() {
            if r.classes.is_empty() || r.classes.iter().any(|&c| c >= self.num_classes) {
                return bad(format!("region {i} has an empty or out-of-range class list"));
            }
            if !r.window.fits(h, w) {
                return bad(format!("region {i} window does not fit {h}×{w}"));
            }
            if (r.window.height, r.window.width) != size {
                return bad("all region windows must have the same size".into());
            }
        }
        if let Some(m) = self.marker_window {
            if !m.fits(h, w) {
                return bad("marker window does not fit the input".into());
            }
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !self.signal.is_finite() {
            return bad("noise must be a nonnegative finite number".into());
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad("shared_fraction must lie in [0, 1]".into());
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        Ok(())
    }
}

struct Templates {
    per_class: Vec<Vec<f32>>,
    markers: Vec<Vec<f32>>,
}

fn sign_pattern(n: usize, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect()
}

fn stamp(image: &mut [f32], shape: &[usize], win: &Window, pattern: &[f32], amplitude: f32) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut k = 0;
    for ch in 0..c {
        for y in win.top..win.top + win.height {
            for x in win.left..win.left + win.width {
                image[(ch * h + y) * w + x] += amplitude * pattern[k];
                k += 1;
            }
        }
    }
}

/// Generates train and validation splits. Identical seeds give bit-identical data.
pub fn generate_planted(spec: &PlantedSpec, seed: u64) -> Result<PlantedData> {
    spec.validate()?;
    let channels = spec.input_shape[0];
    let win = spec.regions[0].window;
    let mut trng = Rng::for_purpose(seed, "planted/templates");
    let per_class = (0..spec.num_classes)
        .map(|_| sign_pattern(channels * win.height * win.width, &mut trng))
        .collect();
    let markers = match spec.marker_window {
        Some(m) => (0..spec.regions.len())
            .map(|_| sign_pattern(channels * m.height * m.width, &mut trng))
            .collect(),
        None => Vec::new(),
    };
    let templates = Templates { per_class, markers };
    Ok(PlantedData {
        train: generate_split(spec, &templates, Split::Train, spec.train_samples, seed)?,
        val: generate_split(spec, &templates, Split::Val, spec.val_samples, seed)?,
    })
}

fn generate_split(
    spec: &PlantedSpec,
    templates: &Templates,
    split: Split,
    n: usize,
    seed: u64,
) -> Result<AnnotatedDataset> {
    let tag = match split {
        Split::Train => "planted/train",
        Split::Val => "planted/val",
    };
    let mut rng = Rng::for_purpose(seed, tag);
    let shape = &spec.input_shape;
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    let regions = spec.regions.len();

    for _ in 0..n {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut region = regions - 1;
        for (i, r) in spec.regions.iter().enumerate() {
            acc += r.fraction;
            if u < acc {
                region = i;
                break;
            }
        }
        let spec_r = &spec.regions[region];
        let class = spec_r.classes[rng.below(spec_r.classes.len())];
        let shared = rng.uniform() < spec.shared_fraction;

        let mut image: Vec<f32> = (0..per)
            .map(|_| (f64::from(spec.noise) * rng.normal_approx()) as f32)
            .collect();
        let pattern = &templates.per_class[class];
        if shared {
            for r in &spec.regions {
                stamp(&mut image, shape, &r.window, pattern, spec.signal);
            }
        } else {
            stamp(&mut image, shape, &spec_r.window, pattern, spec.signal);
        }
        if let Some(m) = &spec.marker_window {
            stamp(&mut image, shape, m, &templates.markers[region], spec.signal);
        }
        data.extend(image);
        labels.push(class);
        annotations.push(SampleAnnotation {
            region,
            shared,
            hardness: if shared { 0 } else { regions - 1 },
        });
    }

    let mut full = vec![n];
    full.extend_from_slice(shape);
    let dataset = Dataset::new(Tensor::new(full, data)?, labels, spec.num_classes, split)?;
    Ok(AnnotatedDataset { dataset, annotations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PlantedSpec {
        PlantedSpec {
            train_samples: 50,
            val_samples: 20,
            ..PlantedSpec::default()
        }
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_planted(&small_spec(), 11).unwrap();
        let b = generate_planted(&small_spec(), 11).unwrap();
        assert_eq!(a.train.dataset.to_bytes().unwrap(), b.train.dataset.to_bytes().unwrap());
        assert_eq!(a.val.dataset, b.val.dataset);
        let c = generate_planted(&small_spec(), 12).unwrap();
        assert_ne!(a.train.dataset, c.train.dataset);
    }

    #[test]
    fn noise_free_single_region_repeats_class_patterns() {
        let spec = PlantedSpec {
            regions: vec![RegionSpec {
                classes: vec![0, 1],
                window: Window {
                    top: 0,
                    left: 0,
                    height: 4,
                    width: 4,
                },
                fraction: 1.0,
            }],
            noise: 0.0,
            num_classes: 2,
            input_shape: vec![1, 8, 8],
            marker_window: None,
            ..small_spec()
        };
        let d = generate_planted(&spec, 5).unwrap().train.dataset;
        for class in 0..2 {
            let same: Vec<Tensor> = (0..d.len())
                .filter(|&i| d.label(i) == class)
                .map(|i| d.sample(i))
                .collect();
            assert!(same.len() > 5);
            assert!(same.windows(2).all(|w| w[0] == w[1]));
        }
        let first = |c| (0..d.len()).find(|&i| d.label(i) == c).unwrap();
        assert_ne!(d.sample(first(0)), d.sample(first(1)));
    }

    #[test]
    fn invalid_fractions_rejected() {
        let mut spec = small_spec();
        spec.regions[0].fraction = 0.9;
        assert!(matches!(generate_planted(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn labels_follow_regions() {
        let spec = small_spec();
        let d = generate_planted(&spec, 2).unwrap().train;
        for (i, a) in d.annotations.iter().enumerate() {
            assert!(spec.regions[a.region].classes.contains(&d.dataset.label(i)));
            assert_eq!(a.hardness, if a.shared { 0 } else { 2 });
        }
    }

    #[test]
    fn file_round_trip_and_truncation() {
        let d = generate_planted(&small_spec(), 3).unwrap().val.dataset;
        let bytes = d.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 10]),
            Err(Error::Truncated(_))
        ));
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn batches_partition_each_epoch() {
        let d = generate_planted(&small_spec(), 4).unwrap().train.dataset;
        let bs = NonZeroUsize::new(16).unwrap();
        let all: Vec<Vec<usize>> = batches(&d, bs, &mut Rng::new(1)).collect();
        assert_eq!(all.len(), 4);
        assert_eq!(all.last().unwrap().len(), 2);
        let mut seen: Vec<usize> = all.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        let again: Vec<Vec<usize>> = batches(&d, bs, &mut Rng::new(1)).collect();
        assert_eq!(all, again);

        let one: Vec<Vec<usize>> = batches(&d, NonZeroUsize::new(50).unwrap(), &mut Rng::new(2)).collect();
        assert_eq!(one.len(), 1);
        assert_ne!(one[0], (0..50).collect::<Vec<_>>());
    }
}
