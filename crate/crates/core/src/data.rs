//! Class-incremental datasets: synthetic Gaussian clusters, small raster
//! ingestion (IDX and CSV), and task schedules.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};
use crate::linalg::DenseMatrix;
use crate::rng::{gaussian_matrix, rng_for, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DenseMatrix,
    labels: Vec<usize>,
    splits: Vec<Split>,
    num_classes: usize,
    provenance: Provenance,
}

impl Dataset {
    /// Assembles a dataset and assigns the first 80% of each class (in
    /// sample order) to the training split.
    pub fn with_class_split(samples: DenseMatrix, labels: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Data(format!(
                "{} samples but {} labels",
                samples.rows(),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut per_class = vec![0usize; num_classes];
        for &l in &labels {
            per_class[l] += 1;
        }
        let mut seen = vec![0usize; num_classes];
        let splits = labels
            .iter()
            .map(|&l| {
                let train_quota = per_class[l] * 4 / 5;
                seen[l] += 1;
                if seen[l] <= train_quota {
                    Split::Train
                } else {
                    Split::Test
                }
            })
            .collect();
        Ok(Self {
            samples,
            labels,
            splits,
            num_classes,
            provenance,
        })
    }

    pub fn samples(&self) -> &DenseMatrix {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Sample indices of the given split whose label is in `classes`,
    /// in dataset order.
    pub fn indices_for(&self, split: Split, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split && classes.contains(&self.labels[i]))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.splits.iter().filter(|s| **s == split).count()
    }

    /// Rows at `indices` as a batch matrix.
    pub fn gather(&self, indices: &[usize]) -> DenseMatrix {
        let p = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.samples.row(i));
        }
        DenseMatrix::new(indices.len(), p, data).expect("rows of a finite matrix")
    }

    /// Every class needs `2·clients` training samples and one test sample.
    pub fn validate_for_clients(&self, clients: usize) -> Result<()> {
        for c in 0..self.num_classes {
            let train = self.indices_for(Split::Train, &[c]).len();
            let test = self.indices_for(Split::Test, &[c]).len();
            if train < 2 * clients || test < 1 {
                return Err(Error::config(format!(
                    "class {c} has {train} train / {test} test samples; {clients} clients need at least {} / 1",
                    2 * clients
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            samples_per_class: 60,
            input_dim: 128,
            cluster_spread: 0.5,
            cluster_separation: 10.0,
            seed: 0,
        }
    }
}

/// One Gaussian cluster per class around a mean drawn uniformly on the
/// sphere of radius `cluster_separation`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.samples_per_class == 0 || cfg.input_dim == 0 {
        return Err(Error::config("synthetic data needs classes, samples and dimensions"));
    }
    if !(cfg.cluster_spread > 0.0) || !cfg.cluster_separation.is_finite() {
        return Err(Error::config("cluster spread must be positive"));
    }
    let mut rng = rng_for(cfg.seed, Stream::Data, &[]);
    let p = cfg.input_dim;
    let n = cfg.num_classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.num_classes {
        let direction = gaussian_matrix(&mut rng, 1, p, 1.0);
        let mean = direction.scale(cfg.cluster_separation / direction.frobenius_norm());
        let noise = gaussian_matrix(&mut rng, cfg.samples_per_class, p, cfg.cluster_spread);
        for i in 0..cfg.samples_per_class {
            data.extend(noise.row(i).iter().zip(mean.row(0)).map(|(z, m)| m + z));
            labels.push(c);
        }
    }
    Dataset::with_class_split(DenseMatrix::new(n, p, data)?, labels, Provenance::Synthetic)
}

/// Where to read an ingested raster dataset from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum RasterSource {
    Idx { images: String, labels: String },
    Csv { path: String },
}

pub fn ingest_raster(source: &RasterSource) -> Result<Dataset> {
    match source {
        RasterSource::Idx { images, labels } => {
            let images = std::fs::read(Path::new(images))?;
            let labels = std::fs::read(Path::new(labels))?;
            parse_idx(&images, &labels)
        }
        RasterSource::Csv { path } => parse_csv(&std::fs::read_to_string(Path::new(path))?),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            location: Location::Byte(self.pos as u64),
            reason: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let chunk = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Parse {
            location: Location::Byte(self.pos as u64),
            reason: format!(
                "truncated {what}: need {n} bytes, {} available",
                self.bytes.len().saturating_sub(self.pos)
            ),
        })?;
        self.pos += n;
        Ok(chunk)
    }
}

/// Parses an IDX image file (`0x00000803`, dims count/rows/cols) and its
/// companion label file (`0x00000801`, dim count). Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut img = ByteReader { bytes: images, pos: 0 };
    let magic = img.u32_be("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            location: Location::Byte(0),
            reason: format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = img.u32_be("image count")? as usize;
    let rows = img.u32_be("image rows")? as usize;
    let cols = img.u32_be("image cols")? as usize;
    let pixels = img.take(count * rows * cols, "pixel data")?;

    let mut lab = ByteReader { bytes: labels, pos: 0 };
    let magic = lab.u32_be("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            location: Location::Byte(0),
            reason: format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = lab.u32_be("label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            location: Location::Byte(4),
            reason: format!("{label_count} labels for {count} images"),
        });
    }
    let label_bytes = lab.take(count, "label data")?;

    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let samples = DenseMatrix::new(count, rows * cols, data)?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::with_class_split(samples, labels, Provenance::Ingested)
}

/// Serializes images (row-major `count × rows·cols`, bytes) and labels into
/// the IDX pair read by [`parse_idx`].
pub fn write_idx(pixels: &[u8], rows: u32, cols: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let count = labels.len() as u32;
    assert_eq!(pixels.len(), (count * rows * cols) as usize);
    let mut images = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, count] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (images, lab)
}

/// CSV with a header row, a `label` column, and raw 0–255 pixel columns.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        location: Location::Line(1),
        reason: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_col = names.iter().position(|n| *n == "label").ok_or_else(|| Error::Parse {
        location: Location::Line(1),
        reason: "header has no `label` column".into(),
    })?;
    let width = names.len() - 1;
    if width == 0 {
        return Err(Error::Parse {
            location: Location::Line(1),
            reason: "header has no pixel columns".into(),
        });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                location: Location::Line(line_no),
                reason: format!("{} fields, header has {}", fields.len(), names.len()),
            });
        }
        for (c, f) in fields.iter().enumerate() {
            if c == label_col {
                let label = f.parse::<usize>().map_err(|_| Error::Parse {
                    location: Location::Line(line_no),
                    reason: format!("label `{f}` is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v = f.parse::<f64>().ok().filter(|v| (0.0..=255.0).contains(v)).ok_or_else(|| {
                    Error::Parse {
                        location: Location::Line(line_no),
                        reason: format!("pixel `{f}` in column {} is not in 0..=255", names[c]),
                    }
                })?;
                data.push(v / 255.0);
            }
        }
    }
    let n = labels.len();
    Dataset::with_class_split(DenseMatrix::new(n, width, data)?, labels, Provenance::Ingested)
}

/// Disjoint, equally sized groups of class ids, one per task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub tasks: Vec<Vec<usize>>,
}

impl TaskSchedule {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks.first().map_or(0, Vec::len)
    }

    /// Head row assigned to `class`: classes are numbered in the order their
    /// tasks arrive.
    pub fn head_index(&self, class: usize) -> Option<usize> {
        let per = self.classes_per_task();
        self.tasks
            .iter()
            .enumerate()
            .find_map(|(t, cs)| cs.iter().position(|&c| c == class).map(|i| t * per + i))
    }
}

/// Shuffles class ids with the seed and cuts them into `num_tasks` groups.
pub fn build_schedule(num_classes: usize, num_tasks: usize, seed: u64) -> Result<TaskSchedule> {
    if num_tasks == 0 || num_classes == 0 || !num_classes.is_multiple_of(num_tasks) {
        return Err(Error::config(format!(
            "{num_classes} classes cannot be split into {num_tasks} equal tasks"
        )));
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    classes.shuffle(&mut rng_for(seed, Stream::Schedule, &[]));
    let per = num_classes / num_tasks;
    Ok(TaskSchedule {
        tasks: classes.chunks(per).map(<[usize]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_centroid_accuracy(ds: &Dataset) -> f64 {
        let p = ds.input_dim();
        let mut centroids = vec![vec![0.0; p]; ds.num_classes()];
        let mut counts = vec![0usize; ds.num_classes()];
        for i in 0..ds.len() {
            if ds.splits()[i] == Split::Train {
                let l = ds.labels()[i];
                counts[l] += 1;
                for (c, x) in centroids[l].iter_mut().zip(ds.samples().row(i)) {
                    *c += x;
                }
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let test: Vec<usize> = (0..ds.len()).filter(|&i| ds.splits()[i] == Split::Test).collect();
        let correct = test
            .iter()
            .filter(|&&i| {
                let x = ds.samples().row(i);
                let best = (0..ds.num_classes())
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        let db: f64 = centroids[b].iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let cfg = SyntheticConfig {
            num_classes: 6,
            samples_per_class: 50,
            input_dim: 8,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.count(Split::Train), 240);
        assert_eq!(ds.count(Split::Test), 60);
        assert_eq!(ds, generate_synthetic(&cfg).unwrap());
        assert_eq!(ds.provenance(), Provenance::Synthetic);
    }

    #[test]
    fn degenerate_clusters_are_perfectly_separable() {
        let cfg = SyntheticConfig {
            num_classes: 5,
            samples_per_class: 20,
            input_dim: 6,
            cluster_spread: 1e-9,
            cluster_separation: 1.0,
            seed: 3,
        };
        assert_eq!(nearest_centroid_accuracy(&generate_synthetic(&cfg).unwrap()), 1.0);
    }

    #[test]
    fn separability_decreases_with_spread() {
        let accs: Vec<f64> = [0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|&s| {
                let cfg = SyntheticConfig {
                    num_classes: 8,
                    samples_per_class: 50,
                    input_dim: 4,
                    cluster_spread: s,
                    cluster_separation: 1.5,
                    seed: 11,
                };
                nearest_centroid_accuracy(&generate_synthetic(&cfg).unwrap())
            })
            .collect();
        assert!(accs.windows(2).all(|w| w[0] >= w[1]), "{accs:?}");
    }

    #[test]
    fn idx_round_trip_fixture() {
        let pixels: Vec<u8> = vec![0, 255, 128, 64, 1, 2, 3, 4, 0, 0, 0, 0, 9, 8, 7, 6];
        let (images, labels) = write_idx(&pixels, 2, 2, &[3, 1, 0, 3]);
        let ds = parse_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels(), &[3, 1, 0, 3]);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.samples().row(0), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
        assert_eq!(ds.samples().row(2), &[0.0; 4]);
        assert_eq!(ds.provenance(), Provenance::Ingested);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let (mut images, labels) = write_idx(&[1, 2, 3, 4], 2, 2, &[0]);
        images.truncate(18);
        match parse_idx(&images, &labels) {
            Err(Error::Parse { location: Location::Byte(16), .. }) => {}
            other => panic!("{other:?}"),
        }
        let (mut images, labels) = write_idx(&[1, 2, 3, 4], 2, 2, &[0]);
        images[3] = 0x01;
        assert!(matches!(
            parse_idx(&images, &labels),
            Err(Error::Parse { location: Location::Byte(0), .. })
        ));
    }

    #[test]
    fn csv_parsing() {
        let ds = parse_csv("label,p0,p1\n1,0,255\n0,0,0\n").unwrap();
        assert_eq!(ds.labels(), &[1, 0]);
        assert_eq!(ds.samples().row(0), &[0.0, 1.0]);
        assert_eq!(ds.samples().row(1), &[0.0, 0.0]);

        assert!(matches!(
            parse_csv("p0,p1\n0,1\n"),
            Err(Error::Parse { location: Location::Line(1), .. })
        ));
        assert!(matches!(
            parse_csv("label,p0\n1,0\n0,x\n"),
            Err(Error::Parse { location: Location::Line(3), .. })
        ));
    }

    #[test]
    fn schedules() {
        let s = build_schedule(10, 10, 1).unwrap();
        assert_eq!(s.num_tasks(), 10);
        assert!(s.tasks.iter().all(|t| t.len() == 1));
        assert!(matches!(build_schedule(10, 3, 1), Err(Error::Config(_))));
        assert_eq!(build_schedule(12, 4, 5).unwrap(), build_schedule(12, 4, 5).unwrap());

        let s = build_schedule(12, 4, 5).unwrap();
        let mut all: Vec<usize> = s.tasks.concat();
        all.sort();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        for (t, classes) in s.tasks.iter().enumerate() {
            for (i, &c) in classes.iter().enumerate() {
                assert_eq!(s.head_index(c), Some(t * 3 + i));
            }
        }
    }
}
