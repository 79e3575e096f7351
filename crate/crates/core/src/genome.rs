//! Heritable pipeline specifications and the variation operators over them.
//!
//! A genome is a declarative description of a full training and evaluation
//! program. Its identity is the hash of the canonical JSON of its pipeline
//! content, so two genomes reached by different operator paths but holding the
//! same content share an id.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::DeterministicStream;

pub const LAMBDA_RANGE: (f64, f64) = (1e-6, 1e4);
pub const GAMMA_RANGE: (f64, f64) = (1e-3, 1e2);
pub const HIDDEN_RANGE: (u32, u32) = (4, 64);
pub const LEARNING_RATE_RANGE: (f64, f64) = (1e-4, 1.0);
pub const EPOCH_RANGE: (u32, u32) = (10, 500);
pub const CLIP_RANGE: (f64, f64) = (0.25, 16.0);
pub const THRESHOLD_RANGE: (f64, f64) = (1e-3, 4.0);
pub const RANK_WEIGHT_RANGE: (f64, f64) = (1.0 / 64.0, 1.0);
pub const HOLDOUT_RANGE: (f64, f64) = (0.05, 0.5);
pub const FOLD_RANGE: (u32, u32) = (2, 10);

/// Content hash of a genome's pipeline fields.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenomeId(pub String);

impl fmt::Display for GenomeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Zscore,
    Minmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataOpsSpec {
    pub normalization: Normalization,
    /// Clip each feature to `[q1 - m*iqr, q3 + m*iqr]` of the training fold.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outlier_clip: Option<f64>,
    pub feature_mask: Vec<bool>,
    /// Remove per-solver-version label offsets before fitting.
    pub drift_compensation: bool,
}

impl DataOpsSpec {
    pub fn active_features(&self) -> usize {
        self.feature_mask.iter().filter(|b| **b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    RidgeLinear,
    KernelRidgeRbf,
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 3] = [
        ModelFamily::RidgeLinear,
        ModelFamily::KernelRidgeRbf,
        ModelFamily::Mlp1Hidden,
    ];
}

/// Model family plus the hyperparameters that family uses. Irrelevant
/// hyperparameters cannot be represented, so they never reach the canonical form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    RidgeLinear {
        lambda_reg: f64,
    },
    KernelRidgeRbf {
        lambda_reg: f64,
        gamma: f64,
    },
    #[serde(rename = "mlp_1hidden")]
    Mlp1Hidden {
        /// L2 weight decay.
        lambda_reg: f64,
        hidden_units: u32,
        learning_rate: f64,
        epochs: u32,
    },
}

impl ModelSpec {
    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSpec::RidgeLinear { .. } => ModelFamily::RidgeLinear,
            ModelSpec::KernelRidgeRbf { .. } => ModelFamily::KernelRidgeRbf,
            ModelSpec::Mlp1Hidden { .. } => ModelFamily::Mlp1Hidden,
        }
    }

    pub fn defaults(family: ModelFamily) -> Self {
        match family {
            ModelFamily::RidgeLinear => ModelSpec::RidgeLinear { lambda_reg: 1.0 },
            ModelFamily::KernelRidgeRbf => ModelSpec::KernelRidgeRbf {
                lambda_reg: 0.1,
                gamma: 0.1,
            },
            ModelFamily::Mlp1Hidden => ModelSpec::Mlp1Hidden {
                lambda_reg: 1e-4,
                hidden_units: 16,
                learning_rate: 0.05,
                epochs: 100,
            },
        }
    }

    pub fn lambda_reg(&self) -> f64 {
        match self {
            ModelSpec::RidgeLinear { lambda_reg }
            | ModelSpec::KernelRidgeRbf { lambda_reg, .. }
            | ModelSpec::Mlp1Hidden { lambda_reg, .. } => *lambda_reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    PairwiseHinge,
    LogsigmoidRank,
    Multitask,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Mse,
        LossKind::PairwiseHinge,
        LossKind::LogsigmoidRank,
        LossKind::Multitask,
    ];

    pub fn is_ranking(self) -> bool {
        !matches!(self, LossKind::Mse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Mse,
    PairwiseHinge {
        margin: f64,
    },
    LogsigmoidRank {
        threshold: f64,
        adaptive_threshold: bool,
    },
    /// `(1 - rank_weight) * mse + rank_weight * logsigmoid_rank`.
    Multitask {
        rank_weight: f64,
        threshold: f64,
    },
}

impl LossSpec {
    pub fn kind(&self) -> LossKind {
        match self {
            LossSpec::Mse => LossKind::Mse,
            LossSpec::PairwiseHinge { .. } => LossKind::PairwiseHinge,
            LossSpec::LogsigmoidRank { .. } => LossKind::LogsigmoidRank,
            LossSpec::Multitask { .. } => LossKind::Multitask,
        }
    }

    pub fn defaults(kind: LossKind) -> Self {
        match kind {
            LossKind::Mse => LossSpec::Mse,
            LossKind::PairwiseHinge => LossSpec::PairwiseHinge { margin: 0.1 },
            LossKind::LogsigmoidRank => LossSpec::LogsigmoidRank {
                threshold: 0.1,
                adaptive_threshold: false,
            },
            LossKind::Multitask => LossSpec::Multitask {
                rank_weight: 0.5,
                threshold: 0.1,
            },
        }
    }

    fn threshold(&self) -> Option<f64> {
        match self {
            LossSpec::Mse => None,
            LossSpec::PairwiseHinge { margin } => Some(*margin),
            LossSpec::LogsigmoidRank { threshold, .. } | LossSpec::Multitask { threshold, .. } => {
                Some(*threshold)
            }
        }
    }

    fn with_threshold(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            LossSpec::Mse => {}
            LossSpec::PairwiseHinge { margin } => *margin = value,
            LossSpec::LogsigmoidRank { threshold, .. } | LossSpec::Multitask { threshold, .. } => {
                *threshold = value
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    ByFamily,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub policy: SplitPolicy,
    pub holdout_fraction: f64,
    pub folds: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            policy: SplitPolicy::ByFamily,
            holdout_fraction: 1.0 / 6.0,
            folds: 3,
        }
    }
}

/// The four mutation classes. Each owns exactly one genome block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    DataEdit,
    ModelSwap,
    LossEvolve,
    SplitGuard,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 4] = [
        OperatorKind::DataEdit,
        OperatorKind::ModelSwap,
        OperatorKind::LossEvolve,
        OperatorKind::SplitGuard,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::DataEdit => "data_edit",
            OperatorKind::ModelSwap => "model_swap",
            OperatorKind::LossEvolve => "loss_evolve",
            OperatorKind::SplitGuard => "split_guard",
        }
    }

    /// The fixed sub-mutation catalog, in retry order.
    pub fn catalog(self) -> &'static [SubMutation] {
        use SubMutation::*;
        match self {
            OperatorKind::DataEdit => &[
                CycleNormalization,
                AddClip,
                ScaleClip(0.5),
                ScaleClip(2.0),
                RemoveClip,
                FlipMaskBit,
                ToggleDrift,
            ],
            OperatorKind::ModelSwap => &[
                SwitchFamily,
                ScaleLambda(2.0),
                ScaleLambda(0.5),
                ScaleGamma(2.0),
                ScaleGamma(0.5),
                ScaleHidden(2.0),
                ScaleHidden(0.5),
                ScaleLearningRate(2.0),
                ScaleLearningRate(0.5),
                ScaleEpochs(2.0),
                ScaleEpochs(0.5),
            ],
            OperatorKind::LossEvolve => &[
                SwitchLoss,
                ScaleThreshold(2.0),
                ScaleThreshold(0.5),
                ScaleRankWeight(2.0),
                ScaleRankWeight(0.5),
                ToggleAdaptiveThreshold,
            ],
            OperatorKind::SplitGuard => &[
                TogglePolicy,
                StepFolds(1),
                StepFolds(-1),
                ScaleHoldout(2.0),
                ScaleHoldout(0.5),
            ],
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One parameterized entry of an operator catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubMutation {
    CycleNormalization,
    AddClip,
    ScaleClip(f64),
    RemoveClip,
    FlipMaskBit,
    ToggleDrift,
    SwitchFamily,
    ScaleLambda(f64),
    ScaleGamma(f64),
    ScaleHidden(f64),
    ScaleLearningRate(f64),
    ScaleEpochs(f64),
    SwitchLoss,
    ScaleThreshold(f64),
    ScaleRankWeight(f64),
    ToggleAdaptiveThreshold,
    TogglePolicy,
    StepFolds(i32),
    ScaleHoldout(f64),
}

/// How a genome came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Initial,
    Immigrant,
    Crossover,
    Mutation(OperatorKind),
}

impl Origin {
    pub fn operator(self) -> Option<OperatorKind> {
        match self {
            Origin::Mutation(kind) => Some(kind),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Origin::Initial => "initial",
            Origin::Immigrant => "immigrant",
            Origin::Crossover => "crossover",
            Origin::Mutation(kind) => kind.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<GenomeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_parent: Option<GenomeId>,
    pub origin: Origin,
    pub iteration: u64,
    pub generation: u32,
}

impl Provenance {
    pub fn initial() -> Self {
        Self {
            parent: None,
            second_parent: None,
            origin: Origin::Initial,
            iteration: 0,
            generation: 0,
        }
    }
}

/// The hashed part of a genome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineContent {
    pub data_ops: DataOpsSpec,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub split: SplitSpec,
}

impl PipelineContent {
    pub fn content_id(&self) -> GenomeId {
        let canonical = canonical_json(self).expect("pipeline content always serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        GenomeId(hex::encode(&digest[..8]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Genome {
    id: GenomeId,
    pub version: u64,
    content: PipelineContent,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct GenomeFile {
    id: GenomeId,
    version: u64,
    data_ops: DataOpsSpec,
    model: ModelSpec,
    loss: LossSpec,
    split: SplitSpec,
    provenance: Provenance,
}

impl Serialize for Genome {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        GenomeFile {
            id: self.id.clone(),
            version: self.version,
            data_ops: self.content.data_ops.clone(),
            model: self.content.model.clone(),
            loss: self.content.loss.clone(),
            split: self.content.split.clone(),
            provenance: self.provenance.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = GenomeFile::deserialize(deserializer)?;
        let genome = Genome::from_content(
            PipelineContent {
                data_ops: file.data_ops,
                model: file.model,
                loss: file.loss,
                split: file.split,
            },
            file.version,
            file.provenance,
        );
        if genome.id != file.id {
            return Err(serde::de::Error::custom(format!(
                "genome id {} does not match content hash {}",
                file.id, genome.id
            )));
        }
        Ok(genome)
    }
}

/// Key-sorted JSON with shortest round-trip float formatting.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's Map is a BTreeMap (no preserve_order), so keys come out sorted.
    let tree = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&tree)?)
}

impl Genome {
    pub fn from_content(content: PipelineContent, version: u64, provenance: Provenance) -> Self {
        Self {
            id: content.content_id(),
            version,
            content,
            provenance,
        }
    }

    /// zscore normalization, all features, ridge with unit penalty, mse, family split.
    pub fn default_for(n_features: usize) -> Self {
        Self::from_content(
            PipelineContent {
                data_ops: DataOpsSpec {
                    normalization: Normalization::Zscore,
                    outlier_clip: None,
                    feature_mask: vec![true; n_features],
                    drift_compensation: false,
                },
                model: ModelSpec::defaults(ModelFamily::RidgeLinear),
                loss: LossSpec::Mse,
                split: SplitSpec::default(),
            },
            0,
            Provenance::initial(),
        )
    }

    pub fn id(&self) -> &GenomeId {
        &self.id
    }

    pub fn content(&self) -> &PipelineContent {
        &self.content
    }

    pub fn data_ops(&self) -> &DataOpsSpec {
        &self.content.data_ops
    }

    pub fn model(&self) -> &ModelSpec {
        &self.content.model
    }

    pub fn loss(&self) -> &LossSpec {
        &self.content.loss
    }

    pub fn split(&self) -> &SplitSpec {
        &self.content.split
    }

    /// Returns a copy with the given content, rehashed.
    pub fn with_content(&self, content: PipelineContent) -> Self {
        Self::from_content(content, self.version, self.provenance.clone())
    }

    pub fn to_canonical_json(&self) -> String {
        canonical_json(self).expect("genomes always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn same_content(&self, other: &Genome) -> bool {
        self.id == other.id
    }
}

/// Invariant violations of a genome; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Validation(self.violations))
        }
    }
}

pub fn validate(g: &Genome) -> ValidationReport {
    let mut v = Vec::new();
    let data = g.data_ops();
    if data.active_features() == 0 {
        v.push("feature_mask empty".to_string());
    }
    if let Some(clip) = data.outlier_clip {
        if !(clip.is_finite() && clip > 0.0) {
            v.push(format!("outlier_clip must be > 0 (got {clip})"));
        }
    }
    match *g.model() {
        ModelSpec::RidgeLinear { lambda_reg } => check_lambda(lambda_reg, &mut v),
        ModelSpec::KernelRidgeRbf { lambda_reg, gamma } => {
            check_lambda(lambda_reg, &mut v);
            if !(gamma.is_finite() && gamma > 0.0) {
                v.push(format!("gamma must be > 0 (got {gamma})"));
            }
        }
        ModelSpec::Mlp1Hidden {
            lambda_reg,
            hidden_units,
            learning_rate,
            epochs,
        } => {
            check_lambda(lambda_reg, &mut v);
            if !(HIDDEN_RANGE.0..=HIDDEN_RANGE.1).contains(&hidden_units) {
                v.push(format!("hidden_units out of range (got {hidden_units})"));
            }
            if !(learning_rate.is_finite() && learning_rate > 0.0) {
                v.push(format!("learning_rate must be > 0 (got {learning_rate})"));
            }
            if !(EPOCH_RANGE.0..=EPOCH_RANGE.1).contains(&epochs) {
                v.push(format!("epochs out of range (got {epochs})"));
            }
        }
    }
    match *g.loss() {
        LossSpec::Mse => {}
        LossSpec::PairwiseHinge { margin: t } | LossSpec::LogsigmoidRank { threshold: t, .. } => {
            check_threshold(t, &mut v)
        }
        LossSpec::Multitask {
            rank_weight,
            threshold,
        } => {
            check_threshold(threshold, &mut v);
            if !(0.0..=1.0).contains(&rank_weight) {
                v.push(format!("rank_weight out of range (got {rank_weight})"));
            }
        }
    }
    let split = g.split();
    if !(split.holdout_fraction > 0.0 && split.holdout_fraction < 1.0) {
        v.push(format!("holdout out of range (got {})", split.holdout_fraction));
    }
    if split.folds < 2 {
        v.push(format!("folds must be >= 2 (got {})", split.folds));
    }
    ValidationReport { violations: v }
}

fn check_lambda(lambda: f64, v: &mut Vec<String>) {
    if !(lambda.is_finite() && lambda >= 0.0) {
        v.push(format!("lambda_reg must be >= 0 (got {lambda})"));
    }
}

fn check_threshold(t: f64, v: &mut Vec<String>) {
    if !(t.is_finite() && t >= 0.0) {
        v.push(format!("threshold must be >= 0 (got {t})"));
    }
}

fn scale_clamped(value: f64, factor: f64, range: (f64, f64)) -> f64 {
    (value * factor).clamp(range.0, range.1)
}

fn scale_int(value: u32, factor: f64, range: (u32, u32)) -> u32 {
    ((value as f64 * factor).round() as u32).clamp(range.0, range.1)
}

/// Applies one sub-mutation. Returns `None` when it does not apply to this
/// genome (for example scaling a hyperparameter the model family lacks).
fn apply(sub: SubMutation, c: &PipelineContent, rng: &mut DeterministicStream) -> Option<PipelineContent> {
    use SubMutation::*;
    let mut out = c.clone();
    match sub {
        CycleNormalization => {
            out.data_ops.normalization = match c.data_ops.normalization {
                Normalization::None => Normalization::Zscore,
                Normalization::Zscore => Normalization::Minmax,
                Normalization::Minmax => Normalization::None,
            };
        }
        AddClip => {
            if c.data_ops.outlier_clip.is_some() {
                return None;
            }
            out.data_ops.outlier_clip = Some(2.0);
        }
        ScaleClip(f) => {
            let clip = c.data_ops.outlier_clip?;
            out.data_ops.outlier_clip = Some(scale_clamped(clip, f, CLIP_RANGE));
        }
        RemoveClip => {
            c.data_ops.outlier_clip?;
            out.data_ops.outlier_clip = None;
        }
        FlipMaskBit => {
            let n = c.data_ops.feature_mask.len();
            if n == 0 {
                return None;
            }
            let bit = rng.index(n);
            out.data_ops.feature_mask[bit] = !out.data_ops.feature_mask[bit];
            if out.data_ops.active_features() == 0 {
                return None;
            }
        }
        ToggleDrift => out.data_ops.drift_compensation = !c.data_ops.drift_compensation,
        SwitchFamily => {
            let current = c.model.family();
            let others: Vec<ModelFamily> = ModelFamily::ALL.into_iter().filter(|f| *f != current).collect();
            out.model = ModelSpec::defaults(others[rng.index(others.len())]);
        }
        ScaleLambda(f) => {
            let lambda = c.model.lambda_reg();
            let scaled = scale_clamped(lambda, f, LAMBDA_RANGE);
            match &mut out.model {
                ModelSpec::RidgeLinear { lambda_reg }
                | ModelSpec::KernelRidgeRbf { lambda_reg, .. }
                | ModelSpec::Mlp1Hidden { lambda_reg, .. } => *lambda_reg = scaled,
            }
        }
        ScaleGamma(f) => match &mut out.model {
            ModelSpec::KernelRidgeRbf { gamma, .. } => *gamma = scale_clamped(*gamma, f, GAMMA_RANGE),
            _ => return None,
        },
        ScaleHidden(f) => match &mut out.model {
            ModelSpec::Mlp1Hidden { hidden_units, .. } => *hidden_units = scale_int(*hidden_units, f, HIDDEN_RANGE),
            _ => return None,
        },
        ScaleLearningRate(f) => match &mut out.model {
            ModelSpec::Mlp1Hidden { learning_rate, .. } => {
                *learning_rate = scale_clamped(*learning_rate, f, LEARNING_RATE_RANGE)
            }
            _ => return None,
        },
        ScaleEpochs(f) => match &mut out.model {
            ModelSpec::Mlp1Hidden { epochs, .. } => *epochs = scale_int(*epochs, f, EPOCH_RANGE),
            _ => return None,
        },
        SwitchLoss => {
            let current = c.loss.kind();
            let others: Vec<LossKind> = LossKind::ALL.into_iter().filter(|k| *k != current).collect();
            out.loss = LossSpec::defaults(others[rng.index(others.len())]);
        }
        ScaleThreshold(f) => {
            let t = c.loss.threshold()?;
            out.loss = c.loss.with_threshold(scale_clamped(t, f, THRESHOLD_RANGE));
        }
        ScaleRankWeight(f) => match &mut out.loss {
            LossSpec::Multitask { rank_weight, .. } => {
                *rank_weight = scale_clamped(*rank_weight, f, RANK_WEIGHT_RANGE)
            }
            _ => return None,
        },
        ToggleAdaptiveThreshold => match &mut out.loss {
            LossSpec::LogsigmoidRank { adaptive_threshold, .. } => *adaptive_threshold = !*adaptive_threshold,
            _ => return None,
        },
        TogglePolicy => {
            out.split.policy = match c.split.policy {
                SplitPolicy::ByFamily => SplitPolicy::Random,
                SplitPolicy::Random => SplitPolicy::ByFamily,
            };
        }
        StepFolds(step) => {
            let folds = (c.split.folds as i64 + step as i64).clamp(FOLD_RANGE.0 as i64, FOLD_RANGE.1 as i64);
            out.split.folds = folds as u32;
        }
        ScaleHoldout(f) => {
            out.split.holdout_fraction = scale_clamped(c.split.holdout_fraction, f, HOLDOUT_RANGE);
        }
    }
    (out != *c).then_some(out)
}

/// Whether `sub` targets a hyperparameter that `c`'s model family or loss
/// kind actually has.
fn targets_present_field(sub: SubMutation, c: &PipelineContent) -> bool {
    use SubMutation::*;
    match sub {
        ScaleGamma(_) => c.model.family() == ModelFamily::KernelRidgeRbf,
        ScaleHidden(_) | ScaleLearningRate(_) | ScaleEpochs(_) => c.model.family() == ModelFamily::Mlp1Hidden,
        ScaleThreshold(_) => c.loss.kind() != LossKind::Mse,
        ScaleRankWeight(_) => c.loss.kind() == LossKind::Multitask,
        ToggleAdaptiveThreshold => c.loss.kind() == LossKind::LogsigmoidRank,
        _ => true,
    }
}

/// Applies one operator of class `kind` to `g`.
///
/// A sub-mutation is drawn uniformly from the entries of the kind's catalog
/// that target fields `g` has; if it would leave the genome unchanged the
/// following entries are tried in order. When every entry is a no-op the
/// parent content is returned with a bumped version.
pub fn mutate(g: &Genome, kind: OperatorKind, rng: &mut DeterministicStream, iteration: u64, generation: u32) -> Genome {
    let catalog: Vec<SubMutation> = kind
        .catalog()
        .iter()
        .copied()
        .filter(|&sub| targets_present_field(sub, &g.content))
        .collect();
    let start = rng.index(catalog.len());
    let provenance = Provenance {
        parent: Some(g.id.clone()),
        second_parent: None,
        origin: Origin::Mutation(kind),
        iteration,
        generation,
    };
    for offset in 0..catalog.len() {
        let sub = catalog[(start + offset) % catalog.len()];
        if let Some(content) = apply(sub, &g.content, rng) {
            return Genome::from_content(content, g.version + 1, provenance);
        }
    }
    Genome::from_content(g.content.clone(), g.version + 1, provenance)
}

/// Block-level recombination: each of the four blocks is taken whole from
/// `a` or from `b` with equal probability.
pub fn crossover(a: &Genome, b: &Genome, rng: &mut DeterministicStream, iteration: u64, generation: u32) -> Genome {
    let pick = |rng: &mut DeterministicStream| rng.bernoulli(0.5);
    let data_ops = if pick(rng) { &a.content.data_ops } else { &b.content.data_ops };
    let model = if pick(rng) { &a.content.model } else { &b.content.model };
    let loss = if pick(rng) { &a.content.loss } else { &b.content.loss };
    let split = if pick(rng) { &a.content.split } else { &b.content.split };
    let content = PipelineContent {
        data_ops: data_ops.clone(),
        model: model.clone(),
        loss: loss.clone(),
        split: split.clone(),
    };
    Genome::from_content(
        content,
        a.version.max(b.version) + 1,
        Provenance {
            parent: Some(a.id.clone()),
            second_parent: Some(b.id.clone()),
            origin: Origin::Crossover,
            iteration,
            generation,
        },
    )
}

/// Samples an operator kind from a weight vector indexed like [`OperatorKind::ALL`].
pub fn sample_operator(weights: &[f64; 4], rng: &mut DeterministicStream) -> OperatorKind {
    OperatorKind::ALL[rng.weighted_index(weights)]
}

fn log_grid(rng: &mut DeterministicStream, base: f64, lo_exp: i32, hi_exp: i32) -> f64 {
    let exp = lo_exp + rng.index((hi_exp - lo_exp + 1) as usize) as i32;
    base * 2f64.powi(exp)
}

/// A random valid genome of the given model family, used to seed islands and
/// as random immigrants. Hyperparameters sit on the same ×2 grid the
/// mutation operators walk.
pub fn random_genome(family: ModelFamily, n_features: usize, rng: &mut DeterministicStream, origin: Origin) -> Genome {
    let normalization = [Normalization::None, Normalization::Zscore, Normalization::Minmax][rng.index(3)];
    let mut feature_mask: Vec<bool> = (0..n_features).map(|_| rng.bernoulli(0.8)).collect();
    if !feature_mask.iter().any(|b| *b) && n_features > 0 {
        let bit = rng.index(n_features);
        feature_mask[bit] = true;
    }
    let outlier_clip = rng.bernoulli(0.3).then(|| log_grid(rng, 2.0, -1, 2));
    let drift_compensation = rng.bernoulli(0.5);
    let model = match family {
        ModelFamily::RidgeLinear => ModelSpec::RidgeLinear {
            lambda_reg: log_grid(rng, 1.0, -8, 6),
        },
        ModelFamily::KernelRidgeRbf => ModelSpec::KernelRidgeRbf {
            lambda_reg: log_grid(rng, 0.1, -6, 4),
            gamma: log_grid(rng, 0.1, -4, 4),
        },
        ModelFamily::Mlp1Hidden => ModelSpec::Mlp1Hidden {
            lambda_reg: log_grid(rng, 1e-4, -4, 4),
            hidden_units: [4, 8, 16, 32][rng.index(4)],
            learning_rate: log_grid(rng, 0.05, -3, 2),
            epochs: [25, 50, 100, 200][rng.index(4)],
        },
    };
    let loss = LossSpec::defaults(LossKind::ALL[rng.index(4)]);
    let policy = if rng.bernoulli(0.25) {
        SplitPolicy::Random
    } else {
        SplitPolicy::ByFamily
    };
    Genome::from_content(
        PipelineContent {
            data_ops: DataOpsSpec {
                normalization,
                outlier_clip,
                feature_mask,
                drift_compensation,
            },
            model,
            loss,
            split: SplitSpec {
                policy,
                ..SplitSpec::default()
            },
        },
        0,
        Provenance {
            origin,
            ..Provenance::initial()
        },
    )
}
