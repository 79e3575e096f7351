//! Synthetic parametric drag-coefficient tasks with family structure, solver
//! version drift and an optional label-leaking column.
//!
//! Labels follow
//! `y = c0 + a·x + xᵀQx + b·sin(3·x1)·x2 + family_offset + version_offset + noise`
//! with `x ∈ [-1, 1]^d`. Samples of one family cluster around a family centre,
//! so holding out whole families is a genuine extrapolation test.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::genome::{SplitPolicy, SplitSpec};
use crate::linalg::Matrix;
use crate::rng::DeterministicStream;

pub const GENERATOR_VERSION: &str = "synthetic-drag-v1";
pub const BASE_DRAG: f64 = 0.28;
pub const LINEAR_SCALE: f64 = 0.05;
pub const QUADRATIC_SCALE: f64 = 0.02;
pub const INTERACTION_WEIGHT: f64 = 0.02;
pub const FAMILY_OFFSET_SCALE: f64 = 0.02;
pub const VERSION_OFFSET_SCALE: f64 = 0.01;
pub const LEAK_JITTER: f64 = 1e-4;
pub const DEFAULT_PAIR_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub features: usize,
    pub samples: usize,
    pub families: usize,
    pub noise: f64,
    pub solver_versions: usize,
    pub leaky_feature: bool,
    /// Fraction of families frozen as the certification holdout.
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Free-form flow-condition metadata copied into the dataset card.
    pub metadata: BTreeMap<String, String>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            features: 8,
            samples: 600,
            families: 6,
            noise: 0.005,
            solver_versions: 2,
            leaky_feature: true,
            holdout_fraction: 1.0 / 6.0,
            seed: 2024,
            metadata: BTreeMap::new(),
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features < 2 {
            return Err(Error::Spec(format!("features must be >= 2 (got {})", self.features)));
        }
        if self.families == 0 {
            return Err(Error::Spec("families must be >= 1".into()));
        }
        if self.samples < 10 * self.families {
            return Err(Error::Spec(format!(
                "samples must be >= 10 * families ({} < {})",
                self.samples,
                10 * self.families
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Spec(format!("noise must be >= 0 (got {})", self.noise)));
        }
        if self.solver_versions == 0 {
            return Err(Error::Spec("solver_versions must be >= 1".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Spec(format!(
                "holdout_fraction must lie in (0, 1) (got {})",
                self.holdout_fraction
            )));
        }
        if holdout_family_count(self.families, self.holdout_fraction) >= self.families {
            return Err(Error::Spec("holdout would consume every family".into()));
        }
        Ok(())
    }
}

fn holdout_family_count(families: usize, fraction: f64) -> usize {
    ((fraction * families as f64).round() as usize).max(1)
}

/// Provenance record shipped with every generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCard {
    pub generator_version: String,
    pub engine_version: String,
    pub spec: TaskSpec,
    pub feature_names: Vec<String>,
    /// Columns that carry label information and must never reach a model.
    pub leaky_columns: Vec<usize>,
    /// Families frozen as the certification holdout.
    pub holdout_families: Vec<usize>,
    pub family_offsets: Vec<f64>,
    pub version_offsets: Vec<f64>,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<f64>,
    pub family: Vec<usize>,
    pub version: Vec<usize>,
    pub card: DatasetCard,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_columns(&self) -> usize {
        self.features.cols()
    }

    pub fn n_families(&self) -> usize {
        self.card.spec.families
    }

    pub fn content_hash(&self) -> &str {
        &self.card.content_hash
    }

    pub fn holdout_indices(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.card.holdout_families.contains(&self.family[i]))
            .collect()
    }

    /// Writes features, label, family and version columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.card.feature_names.clone();
        header.extend(["label".to_string(), "family".to_string(), "version".to_string()]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.family[i].to_string());
            rec.push(self.version[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_card(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, &self.card)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn hash_dataset(features: &Matrix, labels: &[f64], family: &[usize], version: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update((features.rows() as u64).to_le_bytes());
    h.update((features.cols() as u64).to_le_bytes());
    for v in features.data().iter().chain(labels) {
        h.update(v.to_bits().to_le_bytes());
    }
    for v in family.iter().chain(version) {
        h.update((*v as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.features;
    let root = DeterministicStream::new(spec.seed);
    let mut coef_rng = root.split(1);
    let mut sample_rng = root.split(2);
    let mut noise_rng = root.split(3);
    let mut assign_rng = root.split(4);

    let linear: Vec<f64> = (0..d).map(|_| coef_rng.uniform_range(-LINEAR_SCALE, LINEAR_SCALE)).collect();
    let mut quad = vec![0.0; d * d];
    for k in 0..d {
        for l in k..d {
            let q = coef_rng.uniform_range(-QUADRATIC_SCALE, QUADRATIC_SCALE);
            quad[k * d + l] = q;
            quad[l * d + k] = q;
        }
    }
    let centres: Vec<Vec<f64>> = (0..spec.families)
        .map(|_| (0..d).map(|_| coef_rng.uniform_range(-0.4, 0.4)).collect())
        .collect();
    let mut version_offsets = linspace(-VERSION_OFFSET_SCALE, VERSION_OFFSET_SCALE, spec.solver_versions);
    coef_rng.shuffle(&mut version_offsets);

    let latent = |x: &[f64]| -> f64 {
        let mut y = BASE_DRAG;
        for k in 0..d {
            y += linear[k] * x[k];
            for l in 0..d {
                y += x[k] * quad[k * d + l] * x[l];
            }
        }
        y + INTERACTION_WEIGHT * (3.0 * x[0]).sin() * x[1]
    };

    let mut rows = Vec::with_capacity(spec.samples);
    let mut family = Vec::with_capacity(spec.samples);
    let mut version = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let f = i % spec.families;
        let x: Vec<f64> = centres[f]
            .iter()
            .map(|c| (c + sample_rng.uniform_range(-0.6, 0.6)).clamp(-1.0, 1.0))
            .collect();
        rows.push(x);
        family.push(f);
        version.push(sample_rng.index(spec.solver_versions));
    }

    let mut base: Vec<f64> = rows
        .iter()
        .zip(&version)
        .map(|(x, &v)| latent(x) + version_offsets[v])
        .collect();

    // Family offsets are evenly spaced over ±FAMILY_OFFSET_SCALE and assigned in
    // the rank order of the families' noise-free mean labels, so offsets widen
    // the gaps between family means instead of cancelling them.
    let mut family_means = vec![0.0; spec.families];
    let mut family_counts = vec![0usize; spec.families];
    for (i, &f) in family.iter().enumerate() {
        family_means[f] += base[i];
        family_counts[f] += 1;
    }
    for f in 0..spec.families {
        family_means[f] /= family_counts[f] as f64;
    }
    let mut order: Vec<usize> = (0..spec.families).collect();
    order.sort_by(|&a, &b| family_means[a].total_cmp(&family_means[b]).then(a.cmp(&b)));
    let spaced = linspace(-FAMILY_OFFSET_SCALE, FAMILY_OFFSET_SCALE, spec.families);
    let mut family_offsets = vec![0.0; spec.families];
    for (rank, &f) in order.iter().enumerate() {
        family_offsets[f] = spaced[rank];
    }

    for (i, y) in base.iter_mut().enumerate() {
        *y += family_offsets[family[i]] + spec.noise * noise_rng.normal();
    }
    let labels = base;

    let mut feature_names: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    let mut leaky_columns = Vec::new();
    if spec.leaky_feature {
        for (row, y) in rows.iter_mut().zip(&labels) {
            row.push(y + LEAK_JITTER * noise_rng.normal());
        }
        leaky_columns.push(d);
        feature_names.push(format!("x{d}"));
    }

    let mut families: Vec<usize> = (0..spec.families).collect();
    assign_rng.shuffle(&mut families);
    let mut holdout_families = families[..holdout_family_count(spec.families, spec.holdout_fraction)].to_vec();
    holdout_families.sort_unstable();

    let features = Matrix::from_rows(&rows);
    let content_hash = hash_dataset(&features, &labels, &family, &version);
    let card = DatasetCard {
        generator_version: GENERATOR_VERSION.to_string(),
        engine_version: crate::ENGINE_VERSION.to_string(),
        spec: spec.clone(),
        feature_names,
        leaky_columns,
        holdout_families,
        family_offsets,
        version_offsets,
        content_hash,
    };
    Ok(Dataset {
        features,
        labels,
        family,
        version,
        card,
    })
}

/// Ordered pairs of positions into a sample subset whose labels differ by
/// more than the tie tolerance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
    pub eps: f64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// All `(i, j)` with `i < j` and `|labels[i] - labels[j]| > eps`, as positions into `labels`.
    pub fn from_labels(labels: &[f64], eps: f64) -> Self {
        let mut pairs = Vec::new();
        for i in 0..labels.len() {
            for j in (i + 1)..labels.len() {
                if (labels[i] - labels[j]).abs() > eps {
                    pairs.push((i, j));
                }
            }
        }
        Self { pairs, eps }
    }
}

/// Pairs over a subset of the dataset, reported as dataset sample indices.
pub fn make_pairs(ds: &Dataset, indices: &[usize], eps: f64) -> Result<PairSet> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Argument(format!("sample index {bad} out of range")));
    }
    let labels: Vec<f64> = indices.iter().map(|&i| ds.labels[i]).collect();
    let local = PairSet::from_labels(&labels, eps);
    Ok(PairSet {
        pairs: local.pairs.into_iter().map(|(a, b)| (indices[a], indices[b])).collect(),
        eps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Split {
    pub holdout: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Standalone split driven entirely by `policy`: the holdout is drawn with
/// `policy.holdout_fraction` (whole families or individual samples) and the
/// rest is partitioned into `policy.folds` folds.
pub fn split(ds: &Dataset, policy: &SplitSpec, seed: u64) -> Result<Split> {
    if !(policy.holdout_fraction > 0.0 && policy.holdout_fraction < 1.0) || policy.folds < 2 {
        return Err(Error::Argument("split policy out of range".into()));
    }
    let mut rng = DeterministicStream::new(seed);
    let k = policy.folds as usize;
    match policy.policy {
        SplitPolicy::ByFamily => {
            let f = ds.n_families();
            let n_hold = holdout_family_count(f, policy.holdout_fraction);
            if f < k + n_hold {
                return Err(Error::InfeasibleSplit(format!(
                    "{f} families cannot supply {n_hold} holdout family(ies) and {k} folds"
                )));
            }
            let mut fams: Vec<usize> = (0..f).collect();
            rng.shuffle(&mut fams);
            let holdout_fams = fams[..n_hold].to_vec();
            family_folds(ds, &holdout_fams, k, &mut rng)
        }
        SplitPolicy::Random => {
            let n_hold = (policy.holdout_fraction * ds.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..ds.len()).collect();
            rng.shuffle(&mut order);
            let mut holdout = order[..n_hold].to_vec();
            holdout.sort_unstable();
            random_folds(holdout, order[n_hold..].to_vec(), k)
        }
    }
}

/// Split used by the evaluation harness: the holdout is always the dataset's
/// frozen holdout families, and the remaining samples are partitioned into
/// `folds` folds by family or uniformly at random.
pub fn evaluation_split(ds: &Dataset, policy: SplitPolicy, folds: usize, seed: u64) -> Result<Split> {
    let mut rng = DeterministicStream::new(seed);
    let holdout_fams = &ds.card.holdout_families;
    match policy {
        SplitPolicy::ByFamily => {
            let available = ds.n_families() - holdout_fams.len();
            if available < folds {
                return Err(Error::InfeasibleSplit(format!(
                    "{available} non-holdout families cannot fill {folds} folds"
                )));
            }
            family_folds(ds, holdout_fams, folds, &mut rng)
        }
        SplitPolicy::Random => {
            let holdout = ds.holdout_indices();
            let mut rest: Vec<usize> = (0..ds.len()).filter(|i| !holdout.contains(i)).collect();
            rng.shuffle(&mut rest);
            random_folds(holdout, rest, folds)
        }
    }
}

fn family_folds(ds: &Dataset, holdout_fams: &[usize], k: usize, rng: &mut DeterministicStream) -> Result<Split> {
    let mut rest: Vec<usize> = (0..ds.n_families()).filter(|f| !holdout_fams.contains(f)).collect();
    if rest.len() < k {
        return Err(Error::InfeasibleSplit(format!("{} families for {k} folds", rest.len())));
    }
    rng.shuffle(&mut rest);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, f) in rest.iter().enumerate() {
        groups[i % k].push(*f);
    }
    let holdout: Vec<usize> = (0..ds.len()).filter(|&i| holdout_fams.contains(&ds.family[i])).collect();
    let folds = groups
        .iter()
        .map(|val_fams| {
            let (validation, train): (Vec<usize>, Vec<usize>) = (0..ds.len())
                .filter(|&i| !holdout_fams.contains(&ds.family[i]))
                .partition(|&i| val_fams.contains(&ds.family[i]));
            Fold { train, validation }
        })
        .collect();
    Ok(Split { holdout, folds })
}

fn random_folds(holdout: Vec<usize>, shuffled: Vec<usize>, k: usize) -> Result<Split> {
    if shuffled.len() < k {
        return Err(Error::InfeasibleSplit(format!("{} samples for {k} folds", shuffled.len())));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, s) in shuffled.iter().enumerate() {
        groups[i % k].push(*s);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    let folds = (0..k)
        .map(|v| {
            let mut train: Vec<usize> = groups
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != v)
                .flat_map(|(_, idx)| idx.iter().copied())
                .collect();
            train.sort_unstable();
            Fold {
                train,
                validation: groups[v].clone(),
            }
        })
        .collect();
    Ok(Split { holdout, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn families_of(ds: &Dataset, idx: &[usize]) -> BTreeSet<usize> {
        idx.iter().map(|&i| ds.family[i]).collect()
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_name_the_bound() {
        let err = generate(&TaskSpec { samples: 50, ..TaskSpec::default() }).unwrap_err();
        assert!(err.to_string().contains("samples"));
        let err = generate(&TaskSpec { features: 1, ..TaskSpec::default() }).unwrap_err();
        assert!(err.to_string().contains("features"));
        let err = generate(&TaskSpec { noise: -1.0, ..TaskSpec::default() }).unwrap_err();
        assert!(err.to_string().contains("noise"));
    }

    #[test]
    fn card_records_leaky_column_and_holdout() {
        let ds = generate(&TaskSpec::default()).unwrap();
        assert_eq!(ds.n_columns(), 9);
        assert_eq!(ds.card.leaky_columns, vec![8]);
        assert_eq!(ds.card.holdout_families.len(), 1);
        let clean = generate(&TaskSpec { leaky_feature: false, ..TaskSpec::default() }).unwrap();
        assert_eq!(clean.n_columns(), 8);
        assert!(clean.card.leaky_columns.is_empty());
    }

    #[test]
    fn labels_are_finite_and_families_populated() {
        let ds = generate(&TaskSpec::default()).unwrap();
        assert!(ds.labels.iter().all(|y| y.is_finite()));
        for f in 0..ds.n_families() {
            assert!(ds.family.iter().filter(|&&g| g == f).count() >= 5);
        }
        let (lo, hi) = ds
            .labels
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), &y| (lo.min(y), hi.max(y)));
        assert!(lo > 0.1 && hi < 0.5, "label range {lo}..{hi}");
    }

    #[test]
    fn tied_pair_is_excluded() {
        let p = PairSet::from_labels(&[0.30, 0.30, 0.35], 1e-6);
        assert_eq!(p.pairs, vec![(0, 2), (1, 2)]);
    }

    #[test]
    fn four_distinct_labels_give_six_pairs() {
        assert_eq!(PairSet::from_labels(&[0.1, 0.2, 0.3, 0.4], 1e-6).len(), 6);
    }

    #[test]
    fn make_pairs_reports_dataset_indices() {
        let ds = generate(&TaskSpec::default()).unwrap();
        let idx = [5, 17, 42];
        let pairs = make_pairs(&ds, &idx, DEFAULT_PAIR_EPS).unwrap();
        for (i, j) in &pairs.pairs {
            assert!(idx.contains(i) && idx.contains(j));
            assert!((ds.labels[*i] - ds.labels[*j]).abs() > DEFAULT_PAIR_EPS);
        }
        assert!(make_pairs(&ds, &[0, 10_000], 1e-6).is_err());
        assert!(make_pairs(&ds, &[3], 1e-6).unwrap().is_empty());
    }

    #[test]
    fn family_split_is_family_disjoint() {
        let ds = generate(&TaskSpec::default()).unwrap();
        let s = split(&ds, &SplitSpec::default(), 11).unwrap();
        let hold = families_of(&ds, &s.holdout);
        for fold in &s.folds {
            let tr = families_of(&ds, &fold.train);
            let va = families_of(&ds, &fold.validation);
            assert!(tr.is_disjoint(&va));
            assert!(hold.is_disjoint(&tr) && hold.is_disjoint(&va));
        }
    }

    #[test]
    fn family_split_fold_sizes_cycle() {
        let ds = generate(&TaskSpec::default()).unwrap();
        let s = split(&ds, &SplitSpec::default(), 3).unwrap();
        assert_eq!(families_of(&ds, &s.holdout).len(), 1);
        let mut sizes: Vec<usize> = s.folds.iter().map(|f| families_of(&ds, &f.validation).len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2, 2]);
    }

    #[test]
    fn random_split_holdout_size() {
        let spec = TaskSpec { samples: 100, families: 4, ..TaskSpec::default() };
        let ds = generate(&spec).unwrap();
        let policy = SplitSpec { policy: SplitPolicy::Random, holdout_fraction: 0.2, folds: 3 };
        let s = split(&ds, &policy, 5).unwrap();
        assert_eq!(s.holdout.len(), 20);
        let total: usize = s.folds.iter().map(|f| f.validation.len()).sum();
        assert_eq!(total, 80);
    }

    #[test]
    fn too_few_families_is_infeasible() {
        let spec = TaskSpec { families: 3, samples: 300, ..TaskSpec::default() };
        let ds = generate(&spec).unwrap();
        let err = split(&ds, &SplitSpec::default(), 0).unwrap_err();
        assert!(matches!(err, Error::InfeasibleSplit(_)));
        assert!(evaluation_split(&ds, SplitPolicy::ByFamily, 3, 0).is_err());
    }

    #[test]
    fn evaluation_split_uses_frozen_holdout() {
        let ds = generate(&TaskSpec::default()).unwrap();
        for policy in [SplitPolicy::ByFamily, SplitPolicy::Random] {
            for seed in 0..3 {
                let s = evaluation_split(&ds, policy, 3, seed).unwrap();
                assert_eq!(s.holdout, ds.holdout_indices());
            }
        }
    }
}
