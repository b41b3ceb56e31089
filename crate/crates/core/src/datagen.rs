//! Seeded synthetic two-modality datasets from a linear-Gaussian latent model.
//!
//! A latent `z` drives both modalities: `prevalent = A·z + σ_p·g` and
//! `privileged = B·z + σ_q·g`. Modality strength is set by the two noise
//! levels alone, which is how the SEW/WES regimes are emulated.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::losses::{self, ClassTargets};
use crate::rng::{self, Stream};

/// Minimum distance between class means in latent space.
const CLASS_SEPARATION: f64 = 4.0;
/// Within-class latent standard deviation when a spec leaves it out.
const DEFAULT_CLASS_SPREAD: f64 = 0.5;
const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    Classification { num_classes: usize },
    Regression { targets: usize },
}

impl Task {
    /// Width of the model output layer.
    pub fn output_dim(&self) -> usize {
        match *self {
            Task::Classification { num_classes } => num_classes,
            Task::Regression { targets } => targets,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Classification { .. } => "classification",
            Task::Regression { .. } => "regression",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub n_samples: usize,
    pub latent_dim: usize,
    pub d_prevalent: usize,
    pub d_privileged: usize,
    pub noise_prevalent: f64,
    pub noise_privileged: f64,
    /// Within-class latent standard deviation (classification only). At the
    /// default, classes are separable in latent space; larger values make
    /// them overlap.
    #[serde(default = "default_class_spread")]
    pub class_spread: f64,
    pub seed: u64,
}

fn default_class_spread() -> f64 {
    DEFAULT_CLASS_SPREAD
}

impl SyntheticSpec {
    /// Privileged modality clean, prevalent modality noisy.
    pub fn sew_classification(seed: u64) -> Self {
        Self {
            task: Task::Classification { num_classes: 5 },
            n_samples: 500,
            latent_dim: 4,
            d_prevalent: 32,
            d_privileged: 16,
            noise_prevalent: 3.0,
            noise_privileged: 0.3,
            class_spread: 1.0,
            seed,
        }
    }

    /// Prevalent modality clean, privileged modality noisy.
    pub fn wes_classification(seed: u64) -> Self {
        Self {
            noise_prevalent: 0.3,
            noise_privileged: 3.0,
            ..Self::sew_classification(seed)
        }
    }

    pub fn sew_regression(seed: u64) -> Self {
        Self {
            task: Task::Regression { targets: 2 },
            ..Self::sew_classification(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples", self.n_samples),
            ("latent_dim", self.latent_dim),
            ("d_prevalent", self.d_prevalent),
            ("d_privileged", self.d_privileged),
            ("task output", self.task.output_dim()),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        for (name, v) in [
            ("noise_prevalent", self.noise_prevalent),
            ("noise_privileged", self.noise_privileged),
            ("class_spread", self.class_spread),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(ClassTargets),
    Values(Tensor2),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.labels().len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes(c) => Task::Classification {
                num_classes: c.num_classes(),
            },
            Targets::Values(v) => Task::Regression { targets: v.cols() },
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Classes(c) => Targets::Classes(ClassTargets::new(
                indices.iter().map(|&i| c.labels()[i]).collect(),
                c.num_classes(),
            )?),
            Targets::Values(v) => Targets::Values(v.select_rows(indices)?),
        })
    }
}

/// Rows selected from a [`Dataset`].
#[derive(Clone, Debug)]
pub struct Batch {
    pub prevalent: Tensor2,
    pub privileged: Tensor2,
    pub targets: Targets,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub prevalent: Tensor2,
    pub privileged: Tensor2,
    pub targets: Targets,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn new(prevalent: Tensor2, privileged: Tensor2, targets: Targets, splits: Vec<Split>) -> Result<Self> {
        let n = prevalent.rows();
        if privileged.rows() != n || targets.len() != n || splits.len() != n {
            return Err(Error::contract(format!(
                "inconsistent row counts: prevalent {n}, privileged {}, targets {}, splits {}",
                privileged.rows(),
                targets.len(),
                splits.len()
            )));
        }
        Ok(Self {
            prevalent,
            privileged,
            targets,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.prevalent.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn d_prevalent(&self) -> usize {
        self.prevalent.cols()
    }

    pub fn d_privileged(&self) -> usize {
        self.privileged.cols()
    }

    /// Sample indices of a split in ascending order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Ok(Batch {
            prevalent: self.prevalent.select_rows(indices)?,
            privileged: self.privileged.select_rows(indices)?,
            targets: self.targets.select(indices)?,
        })
    }

    pub fn split_batch(&self, split: Split) -> Result<Batch> {
        self.batch(&self.indices(split))
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        match &self.targets {
            Targets::Classes(c) => {
                let mut counts = vec![0; c.num_classes()];
                for &l in c.labels() {
                    counts[l] += 1;
                }
                Some(counts)
            }
            Targets::Values(_) => None,
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Stream::Data);
    let n = spec.n_samples;
    let l = spec.latent_dim;
    let mix_std = 1.0 / (l as f64).sqrt();
    let a = rng::normal_matrix(&mut rng, spec.d_prevalent, l, mix_std);
    let b = rng::normal_matrix(&mut rng, spec.d_privileged, l, mix_std);

    let (latent, targets) = match spec.task {
        Task::Classification { num_classes } => {
            let means = class_means(&mut rng, num_classes, l);
            let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
            labels.shuffle(&mut rng);
            let noise = rng::normal_matrix(&mut rng, n, l, spec.class_spread);
            let z = Tensor2::from_fn(n, l, |i, j| means.get(labels[i], j) + noise.get(i, j));
            (z, Targets::Classes(ClassTargets::new(labels, num_classes)?))
        }
        Task::Regression { targets } => {
            let z = rng::normal_matrix(&mut rng, n, l, 1.0);
            let w = rng::normal_matrix(&mut rng, l, targets, mix_std);
            let y = z.matmul(&w)?.map(f64::tanh);
            (z, Targets::Values(y))
        }
    };

    let prevalent = observe(&mut rng, &latent, &a, spec.noise_prevalent)?;
    let privileged = observe(&mut rng, &latent, &b, spec.noise_privileged)?;

    let mut split_rng = rng::stream(spec.seed, Stream::Split);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut splits = vec![Split::Val; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Dataset::new(prevalent, privileged, targets, splits)
}

fn observe(rng: &mut rand_chacha::ChaCha8Rng, z: &Tensor2, mixing: &Tensor2, noise: f64) -> Result<Tensor2> {
    let mut x = z.matmul(&mixing.transpose())?;
    for v in x.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v += noise * g;
    }
    Ok(x)
}

/// Class means drawn at random, then rescaled so the closest pair sits at
/// [`CLASS_SEPARATION`]. Of several candidate draws, the most evenly spread is kept.
fn class_means(rng: &mut rand_chacha::ChaCha8Rng, k: usize, dim: usize) -> Tensor2 {
    let mut best: Option<(f64, Tensor2, f64)> = None;
    for _ in 0..32 {
        let m = rng::normal_matrix(rng, k, dim, 1.0);
        let mut min_d = f64::INFINITY;
        for i in 0..k {
            for j in i + 1..k {
                let d: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                min_d = min_d.min(d.sqrt());
            }
        }
        if k < 2 {
            min_d = 1.0;
        }
        let rms = (m.data().iter().map(|v| v * v).sum::<f64>() / k as f64).sqrt();
        let quality = min_d / rms.max(1e-12);
        if best.as_ref().is_none_or(|(q, _, _)| quality > *q) {
            best = Some((quality, m, min_d));
        }
    }
    let (_, m, min_d) = best.expect("at least one candidate");
    m.scale(CLASS_SEPARATION / min_d.max(1e-12))
}

/// Shuffled index batches of one split; a trailing batch smaller than 2 is dropped.
pub fn batches(ds: &Dataset, split: Split, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::contract(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut idx = ds.indices(split);
    let mut rng = rng::stream(epoch_seed, Stream::Batching);
    idx.shuffle(&mut rng);
    Ok(idx
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Validation-split scores of linear probes trained on each modality alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeScores {
    pub prevalent: f64,
    pub privileged: f64,
}

pub fn probe_scores(ds: &Dataset) -> Result<ProbeScores> {
    let train = ds.indices(Split::Train);
    let val = ds.indices(Split::Val);
    let score = |x: &Tensor2| -> Result<f64> {
        let probe = LinearProbe::fit(&x.select_rows(&train)?, &ds.targets.select(&train)?)?;
        probe.score(&x.select_rows(&val)?, &ds.targets.select(&val)?)
    };
    Ok(ProbeScores {
        prevalent: score(&ds.prevalent)?,
        privileged: score(&ds.privileged)?,
    })
}

/// Linear read-out on standardized features: softmax regression for
/// classes, ridge least squares for real targets.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Tensor2,
    classification: bool,
}

impl LinearProbe {
    const ITERS: usize = 1500;
    const LR: f64 = 0.5;
    const RIDGE: f64 = 1e-6;

    pub fn fit(x: &Tensor2, targets: &Targets) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::contract("cannot fit a probe on zero samples"));
        }
        let (mean, scale) = standardizer(x);
        let xs = design(x, &mean, &scale);
        let (n, d) = xs.shape();
        let weights = match targets {
            Targets::Classes(c) => {
                let y = c.one_hot();
                let k = c.num_classes();
                let mut w = Tensor2::zeros(d, k);
                let mut vel = Tensor2::zeros(d, k);
                let xt = xs.transpose();
                for _ in 0..Self::ITERS {
                    let p = losses::softmax(&xs.matmul(&w)?);
                    let resid = p.zip_map(&y, "probe", |a, b| a - b)?;
                    let grad = xt.matmul(&resid)?.scale(1.0 / n as f64);
                    for ((v, g), p) in vel.data_mut().iter_mut().zip(grad.data()).zip(w.data_mut()) {
                        *v = 0.9 * *v + g;
                        *p -= Self::LR * *v;
                    }
                }
                w
            }
            Targets::Values(y) => {
                let xt = xs.transpose();
                let mut gram = xt.matmul(&xs)?;
                for i in 0..d {
                    let v = gram.get(i, i) + Self::RIDGE * n as f64;
                    gram.set(i, i, v);
                }
                solve_spd(&gram, &xt.matmul(y)?)?
            }
        };
        Ok(Self {
            mean,
            scale,
            weights,
            classification: targets.task().is_classification(),
        })
    }

    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        design(x, &self.mean, &self.scale).matmul(&self.weights)
    }

    /// Accuracy for classes, mean CCC over targets otherwise.
    pub fn score(&self, x: &Tensor2, targets: &Targets) -> Result<f64> {
        let out = self.predict(x)?;
        match targets {
            Targets::Classes(c) => Ok(accuracy(&out, c)),
            Targets::Values(y) => {
                debug_assert!(!self.classification);
                let mut total = 0.0;
                for j in 0..y.cols() {
                    let p: Vec<f64> = (0..y.rows()).map(|i| out.get(i, j)).collect();
                    let t: Vec<f64> = (0..y.rows()).map(|i| y.get(i, j)).collect();
                    total += losses::ccc(&p, &t)?;
                }
                Ok(total / y.cols() as f64)
            }
        }
    }
}

pub fn accuracy(logits: &Tensor2, targets: &ClassTargets) -> f64 {
    let pred = logits.argmax_rows();
    let hits = pred.iter().zip(targets.labels()).filter(|(p, l)| p == l).count();
    hits as f64 / targets.labels().len().max(1) as f64
}

fn standardizer(x: &Tensor2) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.col_sums().data().iter().map(|s| s / n).collect();
    let scale = (0..x.cols())
        .map(|j| {
            let var = (0..x.rows()).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Standardized features with a trailing bias column.
fn design(x: &Tensor2, mean: &[f64], scale: &[f64]) -> Tensor2 {
    let d = x.cols();
    Tensor2::from_fn(x.rows(), d + 1, |i, j| {
        if j == d {
            1.0
        } else {
            (x.get(i, j) - mean[j]) / scale[j]
        }
    })
}

/// Cholesky solve of `A·X = B` for symmetric positive definite `A`.
fn solve_spd(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let n = a.rows();
    let mut l = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if d <= 0.0 {
                    return Err(Error::Degenerate(
                        "probe normal equations are not positive definite".into(),
                    ));
                }
                l.set(i, j, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l.get(i, k) * x.get(k, c)).sum();
            x.set(i, c, (x.get(i, c) - s) / l.get(i, i));
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x.get(k, c)).sum();
            x.set(i, c, (x.get(i, c) - s) / l.get(i, i));
        }
    }
    Ok(x)
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv(ds)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_csv(&text)
}

fn header(task: Task, d_p: usize, d_q: usize) -> Vec<String> {
    let mut cols = vec!["sample_id".to_string(), "split".to_string()];
    match task {
        Task::Classification { .. } => cols.push("label".into()),
        Task::Regression { targets } => cols.extend((0..targets).map(|j| format!("target_{j}"))),
    }
    cols.extend((0..d_p).map(|j| format!("prev_{j}")));
    cols.extend((0..d_q).map(|j| format!("priv_{j}")));
    cols
}

pub fn to_csv(ds: &Dataset) -> String {
    let mut out = header(ds.task(), ds.d_prevalent(), ds.d_privileged()).join(",");
    out.push('\n');
    for i in 0..ds.len() {
        write!(out, "{i},{}", ds.splits[i].name()).unwrap();
        match &ds.targets {
            Targets::Classes(c) => write!(out, ",{}", c.labels()[i]).unwrap(),
            Targets::Values(v) => v.row(i).iter().for_each(|x| write!(out, ",{x:.16e}").unwrap()),
        }
        for x in ds.prevalent.row(i).iter().chain(ds.privileged.row(i)) {
            write!(out, ",{x:.16e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file, expected a header".into(),
    })?;
    let cols: Vec<&str> = head.split(',').map(str::trim).collect();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };

    let expect = |pos: usize, name: &str| -> Result<()> {
        match cols.get(pos) {
            Some(&c) if c == name => Ok(()),
            Some(&c) => Err(parse_err(1, format!("expected column `{name}`, found `{c}`"))),
            None => Err(parse_err(1, format!("expected column `{name}`, header ended"))),
        }
    };
    expect(0, "sample_id")?;
    expect(1, "split")?;
    let classification = cols.get(2) == Some(&"label");
    let n_targets = if classification {
        1
    } else {
        cols.iter().skip(2).take_while(|c| c.starts_with("target_")).count()
    };
    if n_targets == 0 {
        expect(2, "label")?;
    }
    if !classification {
        for j in 0..n_targets {
            expect(2 + j, &format!("target_{j}"))?;
        }
    }
    let start = 2 + n_targets;
    let d_p = cols[start..].iter().take_while(|c| c.starts_with("prev_")).count();
    let d_q = cols.len() - start - d_p;
    let task = if classification {
        Task::Classification { num_classes: 1 }
    } else {
        Task::Regression { targets: n_targets }
    };
    let expected = header(task, d_p, d_q);
    for (pos, name) in expected.iter().enumerate() {
        expect(pos, name)?;
    }
    if d_p == 0 || d_q == 0 {
        return Err(parse_err(
            1,
            "header needs at least one prev_ and one priv_ column".into(),
        ));
    }

    let mut prevalent = Vec::new();
    let mut privileged = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut splits = Vec::new();
    for (idx, line) in lines {
        let ln = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != expected.len() {
            return Err(parse_err(
                ln,
                format!("expected {} fields, found {}", expected.len(), fields.len()),
            ));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|e| parse_err(ln, format!("column `{}`: {e}", expected[k])))
        };
        splits.push(match fields[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(parse_err(ln, format!("unknown split `{other}`"))),
        });
        if classification {
            labels.push(
                fields[2]
                    .parse::<usize>()
                    .map_err(|e| parse_err(ln, format!("column `label`: {e}")))?,
            );
        } else {
            for j in 0..n_targets {
                values.push(num(2 + j)?);
            }
        }
        for j in 0..d_p {
            prevalent.push(num(start + j)?);
        }
        for j in 0..d_q {
            privileged.push(num(start + d_p + j)?);
        }
    }
    let n = splits.len();
    if n == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    let targets = if classification {
        let k = labels.iter().max().map_or(1, |m| m + 1);
        Targets::Classes(ClassTargets::new(labels, k)?)
    } else {
        Targets::Values(Tensor2::new(n, n_targets, values)?)
    };
    Dataset::new(
        Tensor2::new(n, d_p, prevalent)?,
        Tensor2::new(n, d_q, privileged)?,
        targets,
        splits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> SyntheticSpec {
        SyntheticSpec {
            task,
            n_samples: 100,
            latent_dim: 3,
            d_prevalent: 5,
            d_privileged: 4,
            noise_prevalent: 0.5,
            noise_privileged: 0.1,
            class_spread: 0.5,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(Task::Classification { num_classes: 3 });
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec {
            seed: 12,
            ..spec.clone()
        };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate(&small(Task::Classification { num_classes: 2 })).unwrap();
        assert_eq!(ds.class_counts().unwrap(), vec![50, 50]);
        let ds = generate(&SyntheticSpec {
            n_samples: 103,
            ..small(Task::Classification { num_classes: 5 })
        })
        .unwrap();
        let counts = ds.class_counts().unwrap();
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn split_is_eighty_twenty() {
        let ds = generate(&small(Task::Regression { targets: 2 })).unwrap();
        assert_eq!(ds.indices(Split::Train).len(), 80);
        assert_eq!(ds.indices(Split::Val).len(), 20);
        match &ds.targets {
            Targets::Values(v) => assert!(v.data().iter().all(|x| x.abs() <= 1.0)),
            _ => panic!("expected regression targets"),
        }
    }

    #[test]
    fn noise_free_prevalent_is_linearly_separable() {
        let spec = SyntheticSpec {
            noise_prevalent: 0.0,
            class_spread: 0.5,
            ..SyntheticSpec::sew_classification(3)
        };
        let ds = generate(&spec).unwrap();
        let train = ds.indices(Split::Train);
        let x = ds.prevalent.select_rows(&train).unwrap();
        let t = ds.targets.select(&train).unwrap();
        let probe = LinearProbe::fit(&x, &t).unwrap();
        assert_eq!(probe.score(&x, &t).unwrap(), 1.0);
    }

    #[test]
    fn batching_examples() {
        let mut spec = small(Task::Classification { num_classes: 2 });
        spec.n_samples = 10;
        let mut ds = generate(&spec).unwrap();
        ds.splits = vec![Split::Train; 10];
        let b = batches(&ds, Split::Train, 5, 3).unwrap();
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, batches(&ds, Split::Train, 5, 3).unwrap());

        spec.n_samples = 11;
        let mut ds = generate(&spec).unwrap();
        ds.splits = vec![Split::Train; 11];
        let b = batches(&ds, Split::Train, 5, 3).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 5]);
        assert!(batches(&ds, Split::Train, 1, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        for task in [Task::Classification { num_classes: 3 }, Task::Regression { targets: 2 }] {
            let ds = generate(&small(task)).unwrap();
            assert_eq!(from_csv(&to_csv(&ds)).unwrap(), ds);
        }
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(from_csv(""), Err(Error::Parse { line: 1, .. })));
        let err = from_csv("sample_id,split,label,prev_0,prov_0\n").unwrap_err();
        assert!(err.to_string().contains("priv_0"), "{err}");
        let err = from_csv("id,split,label,prev_0,priv_0\n").unwrap_err();
        assert!(err.to_string().contains("sample_id"), "{err}");
        let err = from_csv("sample_id,split,label,prev_0,priv_0\n0,train,1,0.5,x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }
}
