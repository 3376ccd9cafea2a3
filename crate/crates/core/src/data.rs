//! Synthetic source/target data: a Gaussian-mixture source domain, six
//! label-preserving corruption families with five severity levels, a mild
//! "natural" re-sampling shift, and CSV interchange.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Distance between any two class means of the source mixture.
pub const CLASS_MEAN_DISTANCE: f64 = 4.0;
/// Size of the natural-shift split.
pub const NATURAL_SHIFT_SIZE: usize = 2000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub corruption: Option<CorruptionSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset must contain at least one sample"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Root-mean-square distance of the empirical class means from their centroid.
    pub fn class_mean_spread(&self) -> f64 {
        let d = self.input_dim();
        let mut sums = vec![vec![0.0; d]; self.classes];
        let counts = self.class_histogram();
        for (i, &y) in self.labels.iter().enumerate() {
            for (s, v) in sums[y].iter_mut().zip(self.inputs.row(i)) {
                *s += v;
            }
        }
        let means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
            .collect();
        let k = means.len() as f64;
        let centroid: Vec<f64> = (0..d).map(|j| means.iter().map(|m| m[j]).sum::<f64>() / k).collect();
        let ms = means
            .iter()
            .map(|m| m.iter().zip(&centroid).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / k;
        ms.sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    UniformNoise,
    FeatureScale,
    MeanShift,
    Rotation,
    SaltMask,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::UniformNoise,
        CorruptionKind::FeatureScale,
        CorruptionKind::MeanShift,
        CorruptionKind::Rotation,
        CorruptionKind::SaltMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::UniformNoise => "uniform_noise",
            CorruptionKind::FeatureScale => "feature_scale",
            CorruptionKind::MeanShift => "mean_shift",
            CorruptionKind::Rotation => "rotation",
            CorruptionKind::SaltMask => "salt_mask",
        }
    }

    /// Strength at severity 1..=5. Every ladder is strictly monotone; feature
    /// scale decreases (stronger contrast loss), all others increase.
    pub fn ladder(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.1, 0.25, 0.5, 0.75, 1.0],
            CorruptionKind::UniformNoise => [0.2, 0.4, 0.8, 1.2, 1.6],
            CorruptionKind::FeatureScale => [0.9, 0.75, 0.5, 0.35, 0.2],
            CorruptionKind::MeanShift => [0.25, 0.5, 1.0, 1.5, 2.0],
            CorruptionKind::Rotation => [5.0, 10.0, 20.0, 35.0, 50.0],
            CorruptionKind::SaltMask => [0.05, 0.10, 0.20, 0.30, 0.40],
        }
    }

    fn stream_id(self) -> u64 {
        CorruptionKind::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown corruption `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!("severity {severity} not in 1..=5")));
        }
        Ok(Self { kind, severity })
    }

    pub fn strength(&self) -> f64 {
        self.kind.ladder()[self.severity as usize - 1]
    }
}

/// Mixes a dataset seed with a tag so derived streams do not collide.
fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gram-Schmidt on Gaussian columns: `rows x cols` with orthonormal columns.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = rng.normals(rows);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// The source domain: `classes` unit-covariance Gaussians whose means form a
/// regular simplex with edge [`CLASS_MEAN_DISTANCE`], randomly oriented in the
/// input space and centred at the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceFamily {
    pub classes: usize,
    pub input_dim: usize,
    pub seed: u64,
}

pub const FAMILY_NAME: &str = "source";

impl SourceFamily {
    pub fn new(classes: usize, input_dim: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if input_dim + 1 < classes {
            return Err(Error::invalid(format!(
                "input_dim {input_dim} cannot hold a {classes}-class simplex"
            )));
        }
        Ok(Self {
            classes,
            input_dim,
            seed,
        })
    }

    /// Analytic RMS distance of the class means from their centroid.
    pub fn spread(&self) -> f64 {
        let k = self.classes as f64;
        CLASS_MEAN_DISTANCE * ((k - 1.0) / (2.0 * k)).sqrt()
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        let k = self.classes;
        // Centred one-hot vectors form a simplex with edge sqrt(2) inside the
        // (k-1)-dim subspace orthogonal to the all-ones vector.
        let mut rng = SeededRng::stream(self.seed, 0xFA);
        let sub = {
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for i in 0..k {
                let mut v: Vec<f64> = (0..k).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / k as f64).collect();
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-9 && basis.len() < k - 1 {
                    basis.push(v.into_iter().map(|x| x / norm).collect());
                }
            }
            basis
        };
        let embed = random_orthonormal(self.input_dim, k - 1, &mut rng);
        let scale = CLASS_MEAN_DISTANCE / 2f64.sqrt();
        (0..k)
            .map(|i| {
                let coords: Vec<f64> = sub
                    .iter()
                    .map(|b| scale * (b[i]))
                    .collect();
                (0..self.input_dim)
                    .map(|r| coords.iter().zip(&embed).map(|(c, col)| c * col[r]).sum())
                    .collect()
            })
            .collect()
    }

    fn draw(
        &self,
        means: &[Vec<f64>],
        n: usize,
        std: f64,
        rng: &mut SeededRng,
        meta: DatasetMeta,
    ) -> Result<LabeledDataset> {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * self.input_dim);
        for &y in &labels {
            data.extend(means[y].iter().map(|m| m + std * rng.normal()));
        }
        LabeledDataset::new(
            Tensor::new(vec![n, self.input_dim], data)?,
            labels,
            self.classes,
            meta,
        )
    }

    /// `n` samples from independent stream `stream`. Labels are balanced.
    pub fn sample(&self, n: usize, stream: u64) -> Result<LabeledDataset> {
        if n < self.classes {
            return Err(Error::invalid(format!(
                "need n >= classes ({n} < {})",
                self.classes
            )));
        }
        let mut rng = SeededRng::stream(self.seed, 1 + stream);
        let meta = DatasetMeta {
            generator: format!("{FAMILY_NAME}/stream{stream}"),
            seed: mix(self.seed, stream),
            corruption: None,
        };
        self.draw(&self.means(), n, 1.0, &mut rng, meta)
    }

    pub fn train_set(&self, n: usize) -> Result<LabeledDataset> {
        self.sample(n, 0)
    }

    /// Held-out clean test split for evaluation seed `eval_seed`.
    pub fn test_set(&self, n: usize, eval_seed: u64) -> Result<LabeledDataset> {
        self.sample(n, 1 + eval_seed)
    }
}

/// `classes`-way mixture with `n` samples; see [`SourceFamily`].
pub fn generate_source(classes: usize, input_dim: usize, n: usize, seed: u64) -> Result<LabeledDataset> {
    SourceFamily::new(classes, input_dim, seed)?.train_set(n)
}

/// Same mixture with every class mean nudged by 10% of the mean spread in a
/// random direction and the covariance inflated by 1.2.
pub fn natural_shift(family: &SourceFamily, seed: u64) -> Result<LabeledDataset> {
    let mut rng = SeededRng::stream(mix(family.seed, 0x4E41), seed);
    let offset = 0.1 * family.spread();
    let means: Vec<Vec<f64>> = family
        .means()
        .into_iter()
        .map(|m| {
            let dir = random_orthonormal(family.input_dim, 1, &mut rng).remove(0);
            m.iter().zip(&dir).map(|(a, u)| a + offset * u).collect()
        })
        .collect();
    let meta = DatasetMeta {
        generator: "natural_shift".into(),
        seed: mix(family.seed ^ 0x4E41, seed),
        corruption: None,
    };
    family.draw(&means, NATURAL_SHIFT_SIZE, 1.2f64.sqrt(), &mut rng, meta)
}

/// Applies `spec` to every input; labels are left untouched. Deterministic in
/// `(ds.meta.seed, spec)`. Noise magnitudes scale with the dataset's
/// [`LabeledDataset::class_mean_spread`].
pub fn apply_corruption(ds: &LabeledDataset, spec: CorruptionSpec) -> Result<LabeledDataset> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    let a = spec.strength();
    let d = ds.input_dim();
    // Per-family randomness (directions, planes) is shared across severities;
    // per-sample noise is drawn from a severity-specific stream.
    let mut family_rng = SeededRng::stream(mix(ds.meta.seed, 0xC0), spec.kind.stream_id());
    let mut rng = SeededRng::stream(
        mix(ds.meta.seed, 0xC1),
        spec.kind.stream_id() * 8 + spec.severity as u64,
    );
    let mut x = ds.inputs.clone();
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let sigma = a * ds.class_mean_spread();
            x.data_mut().iter_mut().for_each(|v| *v += sigma * rng.normal());
        }
        CorruptionKind::UniformNoise => {
            x.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-a, a));
        }
        CorruptionKind::FeatureScale => {
            x.data_mut().iter_mut().for_each(|v| *v *= a);
        }
        CorruptionKind::MeanShift => {
            let u = random_orthonormal(d, 1, &mut family_rng).remove(0);
            for row in x.data_mut().chunks_mut(d) {
                row.iter_mut().zip(&u).for_each(|(v, du)| *v += a * du);
            }
        }
        CorruptionKind::Rotation => {
            if d < 2 {
                return Err(Error::invalid("rotation needs at least two input dimensions"));
            }
            let plane = random_orthonormal(d, 2, &mut family_rng);
            let (c, s) = (a.to_radians().cos(), a.to_radians().sin());
            for row in x.data_mut().chunks_mut(d) {
                let p: f64 = row.iter().zip(&plane[0]).map(|(v, u)| v * u).sum();
                let q: f64 = row.iter().zip(&plane[1]).map(|(v, u)| v * u).sum();
                let (dp, dq) = (c * p - s * q - p, s * p + c * q - q);
                for j in 0..d {
                    row[j] += dp * plane[0][j] + dq * plane[1][j];
                }
            }
        }
        CorruptionKind::SaltMask => {
            let k = ((a * d as f64).round() as usize).min(d);
            let mut idx: Vec<usize> = (0..d).collect();
            for row in x.data_mut().chunks_mut(d) {
                // partial Fisher-Yates picks k distinct coordinates
                for i in 0..k {
                    let j = i + rng.below(d - i);
                    idx.swap(i, j);
                    row[idx[i]] = 0.0;
                }
            }
        }
    }
    let mut meta = ds.meta.clone();
    meta.corruption = Some(spec);
    LabeledDataset::new(x, ds.labels.clone(), ds.classes, meta)
}

/// `{family}_{kind}_s{severity}_{seed}.csv`
pub fn corrupted_file_name(family: &str, spec: CorruptionSpec, seed: u64) -> String {
    format!("{family}_{}_s{}_{seed}.csv", spec.kind, spec.severity)
}

/// Header `label,f0,...,f{d-1}`, one sample per line, 17 significant digits.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let d = ds.input_dim();
    let mut out = String::with_capacity(ds.len() * d * 24);
    out.push_str("label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, &y) in ds.labels.iter().enumerate() {
        out.push_str(&y.to_string());
        for v in ds.inputs.row(i) {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, &path.display().to_string())
}

pub fn parse_csv(text: &str, source: &str) -> Result<LabeledDataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Csv {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let well_formed = cols.first() == Some(&"label")
        && cols.len() >= 2
        && cols[1..].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
    if !well_formed {
        return Err(Error::Csv {
            line: 1,
            message: "header must be `label,f0,...,f{d-1}`".into(),
        });
    }
    let d = cols.len() - 1;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(Error::Csv {
                line: lineno,
                message: format!("expected {} columns, found {}", d + 1, fields.len()),
            });
        }
        let y: usize = fields[0].parse().map_err(|_| Error::Csv {
            line: lineno,
            message: format!("label `{}` is not a non-negative integer", fields[0]),
        })?;
        labels.push(y);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Csv {
                line: lineno,
                message: format!("`{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Csv {
                    line: lineno,
                    message: "non-finite feature".into(),
                });
            }
            data.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::Csv {
            line: 2,
            message: "no data rows".into(),
        });
    }
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    let n = labels.len();
    LabeledDataset::new(
        Tensor::new(vec![n, d], data)?,
        labels,
        classes,
        DatasetMeta {
            generator: format!("csv:{source}"),
            seed: 0,
            corruption: None,
        },
    )
}
