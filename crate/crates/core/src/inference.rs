//! Standard, positive-negative, and multi-class scoring of images against
//! the designated prompts.
//!
//! All strategies project the image with the image adapter and the prompts
//! with the text adapter, then compare by cosine similarity. Temperature is
//! not applied unless [`InferenceOptions::use_temperature`] is set.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::AdapterModel;
use crate::datamodel::{split_view, Dataset, FeatureRecord, Split, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::{dot, sigmoid, softmax, DenseMatrix};
use crate::promptbank::{criterion_membership, PromptBank, SubsetBank, NUM_SUBSETS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Standard,
    #[serde(rename = "posneg")]
    PosNeg,
    #[serde(rename = "multiclass")]
    MultiClass,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Standard, Strategy::PosNeg, Strategy::MultiClass];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::PosNeg => "posneg",
            Strategy::MultiClass => "multiclass",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Strategy::Standard),
            "posneg" => Ok(Strategy::PosNeg),
            "multiclass" => Ok(Strategy::MultiClass),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected standard, posneg or multiclass)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InferenceOptions {
    /// Multiply similarities by `exp(θ)` before the sigmoid/softmax.
    pub use_temperature: bool,
}

/// Scores for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordScores {
    pub id: String,
    pub scores: [f64; NUM_CRITERIA],
    /// Softmax over the subset prompts (multi-class only), in bank order.
    pub subset_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyScores {
    pub strategy: Strategy,
    pub records: Vec<RecordScores>,
}

/// Designated prompts after the text adapter, ready to score many images.
#[derive(Debug, Clone)]
pub struct PreparedPrompts {
    standard: DenseMatrix,
    positive: DenseMatrix,
    negative: DenseMatrix,
    subsets: Option<(DenseMatrix, DenseMatrix)>,
    scale: f64,
}

impl PreparedPrompts {
    pub fn new(
        model: &AdapterModel,
        bank: &PromptBank,
        subsets: Option<&SubsetBank>,
        options: InferenceOptions,
    ) -> Result<Self> {
        if bank.dim() != model.dim() {
            return Err(Error::Config(format!(
                "prompt bank is {}-dimensional, adapter is {}-dimensional",
                bank.dim(),
                model.dim()
            )));
        }
        let t = bank.inference_text_features()?;
        let subsets = match subsets {
            None => None,
            Some(s) => {
                if s.dim() != model.dim() {
                    return Err(Error::Config(format!(
                        "subset bank is {}-dimensional, adapter is {}-dimensional",
                        s.dim(),
                        model.dim()
                    )));
                }
                let emb: Vec<&[f64]> = s.prompts().iter().map(|p| p.embedding.as_slice()).collect();
                let projected = model.project_texts(&DenseMatrix::from_rows(&emb)?)?;
                Some((projected, criterion_membership(s)))
            }
        };
        Ok(Self {
            standard: model.project_texts(&DenseMatrix::from_rows(&t.standard)?)?,
            positive: model.project_texts(&DenseMatrix::from_rows(&t.positive)?)?,
            negative: model.project_texts(&DenseMatrix::from_rows(&t.negative)?)?,
            subsets,
            scale: if options.use_temperature { model.log_scale.exp() } else { 1.0 },
        })
    }

    pub fn has_subsets(&self) -> bool {
        self.subsets.is_some()
    }
}

/// `σ(s(v, t_i))` per criterion for a projected, unit-norm image vector.
pub fn standard_scores(v: &[f64], prompts: &PreparedPrompts) -> [f64; NUM_CRITERIA] {
    std::array::from_fn(|i| sigmoid(prompts.scale * dot(v, prompts.standard.row(i))))
}

/// Two-way softmax `[p⁺_i, p⁻_i]` over the stacked similarities per criterion.
pub fn posneg_probabilities(v: &[f64], prompts: &PreparedPrompts) -> [[f64; 2]; NUM_CRITERIA] {
    std::array::from_fn(|i| {
        let s_pos = prompts.scale * dot(v, prompts.positive.row(i));
        let s_neg = prompts.scale * dot(v, prompts.negative.row(i));
        let p = softmax(&[s_pos, s_neg]);
        [p[0], p[1]]
    })
}

/// `p⁺_i = e^{s⁺}/(e^{s⁺} + e^{s⁻})` per criterion.
pub fn posneg_scores(v: &[f64], prompts: &PreparedPrompts) -> [f64; NUM_CRITERIA] {
    posneg_probabilities(v, prompts).map(|[pos, _]| pos)
}

/// Softmax over subset prompts, aggregated per criterion through the
/// membership matrix. Returns `(scores, subset_probs)`.
pub fn multiclass_scores(v: &[f64], prompts: &PreparedPrompts) -> Result<([f64; NUM_CRITERIA], Vec<f64>)> {
    let (subset_rows, membership) = prompts
        .subsets
        .as_ref()
        .ok_or_else(|| Error::Config("multi-class inference needs a subset bank".into()))?;
    let sims: Vec<f64> = (0..subset_rows.rows())
        .map(|j| prompts.scale * dot(v, subset_rows.row(j)))
        .collect();
    let p = softmax(&sims);
    // a sum of probabilities can round to just above 1
    let scores = std::array::from_fn(|i| dot(membership.row(i), &p).clamp(0.0, 1.0));
    Ok((scores, p))
}

fn project_record(model: &AdapterModel, record: &FeatureRecord) -> Result<Vec<f64>> {
    if record.embedding.len() != model.dim() {
        return Err(Error::Config(format!(
            "record `{}` is {}-dimensional, adapter is {}-dimensional",
            record.id,
            record.embedding.len(),
            model.dim()
        )));
    }
    let x = DenseMatrix::from_vec(1, model.dim(), record.embedding.clone())?;
    Ok(model.project_images(&x)?.into_data())
}

pub fn infer_standard(model: &AdapterModel, record: &FeatureRecord, prompts: &PreparedPrompts) -> Result<[f64; NUM_CRITERIA]> {
    Ok(standard_scores(&project_record(model, record)?, prompts))
}

pub fn infer_posneg(model: &AdapterModel, record: &FeatureRecord, prompts: &PreparedPrompts) -> Result<[f64; NUM_CRITERIA]> {
    Ok(posneg_scores(&project_record(model, record)?, prompts))
}

pub fn infer_multiclass(
    model: &AdapterModel,
    record: &FeatureRecord,
    prompts: &PreparedPrompts,
) -> Result<([f64; NUM_CRITERIA], Vec<f64>)> {
    multiclass_scores(&project_record(model, record)?, prompts)
}

/// Scores every record with one strategy, preserving record order.
pub fn score_records<'a>(
    model: &AdapterModel,
    records: impl IntoIterator<Item = &'a FeatureRecord>,
    prompts: &PreparedPrompts,
    strategy: Strategy,
) -> Result<StrategyScores> {
    let mut out = Vec::new();
    for r in records {
        let v = project_record(model, r)?;
        let (scores, subset_probs) = match strategy {
            Strategy::Standard => (standard_scores(&v, prompts), None),
            Strategy::PosNeg => (posneg_scores(&v, prompts), None),
            Strategy::MultiClass => {
                let (s, p) = multiclass_scores(&v, prompts)?;
                (s, Some(p))
            }
        };
        out.push(RecordScores {
            id: r.id.clone(),
            scores,
            subset_probs,
        });
    }
    Ok(StrategyScores {
        strategy,
        records: out,
    })
}

/// Scores one split with identity adapters, i.e. with no task training.
pub fn infer_zero_shot(
    dataset: &Dataset,
    bank: &PromptBank,
    subsets: Option<&SubsetBank>,
    strategy: Strategy,
    split: Split,
) -> Result<StrategyScores> {
    let model = AdapterModel::identity(dataset.dim);
    let prompts = PreparedPrompts::new(&model, bank, subsets, InferenceOptions::default())?;
    score_records(&model, split_view(dataset, split), &prompts, strategy)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScores {
    id: String,
    strategy: Strategy,
    #[serde(serialize_with = "io::serialize_f64_vec")]
    scores: Vec<f64>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "io::serialize_opt_f64_vec"
    )]
    subset_probs: Option<Vec<f64>>,
}

impl StrategyScores {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&io::to_line(&RawScores {
                id: r.id.clone(),
                strategy: self.strategy,
                scores: r.scores.to_vec(),
                subset_probs: r.subset_probs.clone(),
            }));
            out.push('\n');
        }
        out
    }
}

pub fn save_scores(scores: &StrategyScores, path: &Path) -> Result<()> {
    io::write_text(path, &scores.to_jsonl())
}

pub fn load_scores(path: &Path) -> Result<StrategyScores> {
    let mut strategy = None;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (line, text) in io::read_lines(path)? {
        let raw: RawScores = io::parse_line(path, line, &text)?;
        let bad = |msg: String| Error::Schema(format!("{}:{line}: {msg}", path.display()));
        match strategy {
            None => strategy = Some(raw.strategy),
            Some(s) if s != raw.strategy => {
                return Err(bad(format!("mixed strategies `{s}` and `{}`", raw.strategy)));
            }
            Some(_) => {}
        }
        if raw.scores.len() != NUM_CRITERIA {
            return Err(bad(format!("{} scores, expected {NUM_CRITERIA}", raw.scores.len())));
        }
        if raw.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(bad(format!("scores for `{}` outside [0, 1]", raw.id)));
        }
        if let Some(p) = &raw.subset_probs {
            if p.len() != NUM_SUBSETS {
                return Err(bad(format!("{} subset probabilities, expected {NUM_SUBSETS}", p.len())));
            }
        }
        if !seen.insert(raw.id.clone()) {
            return Err(bad(format!("duplicate id `{}`", raw.id)));
        }
        records.push(RecordScores {
            id: raw.id,
            scores: [raw.scores[0], raw.scores[1], raw.scores[2]],
            subset_probs: raw.subset_probs,
        });
    }
    let strategy = strategy.ok_or_else(|| Error::Schema(format!("{}: empty scores file", path.display())))?;
    Ok(StrategyScores { strategy, records })
}
