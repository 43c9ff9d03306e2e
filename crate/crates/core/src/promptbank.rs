//! Prompt texts with frozen embeddings: per-criterion positive/negative
//! entries for training and inference, and the subset bank used by
//! multi-class inference.
//!
//! `*.prompts.jsonl` starts with `{"schema":"prompts-v1","dim":D,"mode":M}`
//! where `M` is `fixed_class` or `text_augmented`; entries carry `criterion`
//! (1-based), `polarity`, `text`, `embedding` and `designated`.
//! `*.subsets.jsonl` starts with `{"schema":"subsets-v1","dim":D}`; entries
//! carry `subset` (1-based criterion indices), `text` and `embedding`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::NUM_CRITERIA;
use crate::error::{Error, Result};
use crate::io;
use crate::numerics::DenseMatrix;

pub const PROMPTS_SCHEMA: &str = "prompts-v1";
pub const SUBSETS_SCHEMA: &str = "subsets-v1";

/// Number of criterion subsets, `2^K`.
pub const NUM_SUBSETS: usize = 1 << NUM_CRITERIA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_label(label: bool) -> Self {
        if label {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Polarity::Positive
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    FixedClass,
    TextAugmented,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    /// Zero-based criterion index.
    pub criterion: usize,
    pub polarity: Polarity,
    pub text: String,
    pub embedding: Vec<f64>,
    pub designated: bool,
}

/// Designated inference embeddings in criterion order.
#[derive(Debug, Clone, PartialEq)]
pub struct InferencePrompts {
    /// One prompt per criterion for standard inference.
    pub standard: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    dim: usize,
    mode: BankMode,
    entries: Vec<PromptEntry>,
    /// `candidates[criterion][polarity]` → entry indices eligible for training.
    candidates: Vec<[Vec<usize>; 2]>,
}

fn polarity_slot(p: Polarity) -> usize {
    match p {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
    }
}

impl PromptBank {
    /// Validates the bank.
    ///
    /// Every criterion needs at least one positive and one negative entry;
    /// fixed-class banks need exactly one of each. In text-augmented banks the
    /// designated inference prompts are held out of training whenever a
    /// non-designated alternative exists.
    pub fn new(dim: usize, mode: BankMode, entries: Vec<PromptEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Schema("prompt bank dimension must be positive".into()));
        }
        let mut all: Vec<[Vec<usize>; 2]> = vec![[Vec::new(), Vec::new()]; NUM_CRITERIA];
        let mut designated = [[0usize; 2]; NUM_CRITERIA];
        for (i, e) in entries.iter().enumerate() {
            if e.criterion >= NUM_CRITERIA {
                return Err(Error::Schema(format!(
                    "prompt entry {i} has criterion {}, expected 1..={NUM_CRITERIA}",
                    e.criterion + 1
                )));
            }
            if e.text.trim().is_empty() {
                return Err(Error::Schema(format!("prompt entry {i} has empty text")));
            }
            if e.embedding.len() != dim {
                return Err(Error::Schema(format!(
                    "prompt entry {i} ({}) has a {}-dim embedding, bank declares {dim}",
                    e.text,
                    e.embedding.len()
                )));
            }
            if e.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("prompt entry {i} has a non-finite embedding")));
            }
            let slot = polarity_slot(e.polarity);
            all[e.criterion][slot].push(i);
            if e.designated {
                designated[e.criterion][slot] += 1;
            }
        }
        for c in 0..NUM_CRITERIA {
            for p in [Polarity::Positive, Polarity::Negative] {
                let slot = polarity_slot(p);
                let n = all[c][slot].len();
                if n == 0 {
                    return Err(Error::Schema(format!("criterion C{} has no {p} prompt", c + 1)));
                }
                if mode == BankMode::FixedClass && n != 1 {
                    return Err(Error::Schema(format!(
                        "fixed_class bank has {n} {p} prompts for C{}, expected exactly 1",
                        c + 1
                    )));
                }
                if designated[c][slot] > 1 {
                    return Err(Error::Schema(format!(
                        "criterion C{} has {} designated {p} prompts, expected at most 1",
                        c + 1,
                        designated[c][slot]
                    )));
                }
            }
        }
        let candidates = all
            .into_iter()
            .map(|per_polarity| {
                per_polarity.map(|idx| {
                    let held_out: Vec<usize> = idx.iter().copied().filter(|&i| !entries[i].designated).collect();
                    if mode == BankMode::TextAugmented && !held_out.is_empty() {
                        held_out
                    } else {
                        idx
                    }
                })
            })
            .collect();
        Ok(Self {
            dim,
            mode,
            entries,
            candidates,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    /// Entries eligible for training draws for one criterion and polarity.
    pub fn training_candidates(&self, criterion: usize, polarity: Polarity) -> impl Iterator<Item = &PromptEntry> {
        self.candidates[criterion][polarity_slot(polarity)]
            .iter()
            .map(|&i| &self.entries[i])
    }

    /// Uniform draw among the training prompts whose polarity matches `label`.
    pub fn sample_training_prompt<R: Rng + ?Sized>(&self, criterion: usize, label: bool, rng: &mut R) -> &PromptEntry {
        let pool = &self.candidates[criterion][polarity_slot(Polarity::from_label(label))];
        let pick = if pool.len() == 1 {
            pool[0]
        } else {
            pool[rng.random_range(0..pool.len())]
        };
        &self.entries[pick]
    }

    fn designated(&self, criterion: usize, polarity: Polarity) -> Result<&PromptEntry> {
        self.entries
            .iter()
            .find(|e| e.criterion == criterion && e.polarity == polarity && e.designated)
            .ok_or_else(|| {
                Error::Config(format!(
                    "no designated {polarity} inference prompt for C{}",
                    criterion + 1
                ))
            })
    }

    pub fn inference_text_features(&self) -> Result<InferencePrompts> {
        let mut positive = Vec::with_capacity(NUM_CRITERIA);
        let mut negative = Vec::with_capacity(NUM_CRITERIA);
        for c in 0..NUM_CRITERIA {
            positive.push(self.designated(c, Polarity::Positive)?.embedding.clone());
            negative.push(self.designated(c, Polarity::Negative)?.embedding.clone());
        }
        Ok(InferencePrompts {
            standard: positive.clone(),
            positive,
            negative,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let header = PromptsHeader {
            schema: PROMPTS_SCHEMA.into(),
            dim: self.dim,
            mode: self.mode,
        };
        let mut lines = vec![io::to_line(&header)];
        lines.extend(self.entries.iter().map(|e| {
            io::to_line(&RawPrompt {
                criterion: e.criterion + 1,
                polarity: e.polarity,
                text: e.text.clone(),
                embedding: e.embedding.clone(),
                designated: e.designated,
            })
        }));
        join_lines(lines)
    }
}

fn join_lines(lines: Vec<String>) -> String {
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPrompt {
    /// Membership flag per criterion.
    pub subset: [bool; NUM_CRITERIA],
    pub text: String,
    pub embedding: Vec<f64>,
}

impl SubsetPrompt {
    pub fn contains(&self, criterion: usize) -> bool {
        self.subset[criterion]
    }

    fn mask(&self) -> usize {
        self.subset
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .fold(0, |m, (i, _)| m | (1 << i))
    }
}

/// The `2^K` subset prompts, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetBank {
    dim: usize,
    prompts: Vec<SubsetPrompt>,
}

impl SubsetBank {
    pub fn new(dim: usize, prompts: Vec<SubsetPrompt>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &prompts {
            if p.embedding.len() != dim {
                return Err(Error::Schema(format!(
                    "subset prompt `{}` has a {}-dim embedding, bank declares {dim}",
                    p.text,
                    p.embedding.len()
                )));
            }
            if p.embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("subset prompt `{}` has a non-finite embedding", p.text)));
            }
            if p.text.trim().is_empty() {
                return Err(Error::Schema("subset prompt with empty text".into()));
            }
            if !seen.insert(p.mask()) {
                return Err(Error::Schema(format!(
                    "subset {} appears more than once",
                    format_subset(&p.subset)
                )));
            }
        }
        if prompts.len() != NUM_SUBSETS {
            let missing: Vec<String> = (0..NUM_SUBSETS)
                .filter(|m| !seen.contains(m))
                .map(|m| format_subset(&mask_to_subset(m)))
                .collect();
            return Err(Error::Schema(format!(
                "subset bank has {} prompts, expected {NUM_SUBSETS}; missing {}",
                prompts.len(),
                missing.join(", ")
            )));
        }
        Ok(Self { dim, prompts })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts(&self) -> &[SubsetPrompt] {
        &self.prompts
    }

    pub fn to_jsonl(&self) -> String {
        let header = SubsetsHeader {
            schema: SUBSETS_SCHEMA.into(),
            dim: self.dim,
        };
        let mut lines = vec![io::to_line(&header)];
        lines.extend(self.prompts.iter().map(|p| {
            io::to_line(&RawSubset {
                subset: (0..NUM_CRITERIA).filter(|&c| p.subset[c]).map(|c| c + 1).collect(),
                text: p.text.clone(),
                embedding: p.embedding.clone(),
            })
        }));
        join_lines(lines)
    }
}

/// `K x 2^K` 0/1 matrix: entry `(i, j)` is 1 iff subset prompt `j` includes
/// criterion `i`.
pub fn criterion_membership(bank: &SubsetBank) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(NUM_CRITERIA, bank.prompts.len());
    for (j, p) in bank.prompts.iter().enumerate() {
        for i in 0..NUM_CRITERIA {
            if p.contains(i) {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

pub fn mask_to_subset(mask: usize) -> [bool; NUM_CRITERIA] {
    std::array::from_fn(|i| mask & (1 << i) != 0)
}

fn format_subset(s: &[bool; NUM_CRITERIA]) -> String {
    let names: Vec<String> = (0..NUM_CRITERIA).filter(|&i| s[i]).map(|i| format!("C{}", i + 1)).collect();
    format!("{{{}}}", names.join(","))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptsHeader {
    schema: String,
    dim: usize,
    mode: BankMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrompt {
    criterion: usize,
    polarity: Polarity,
    text: String,
    #[serde(serialize_with = "io::serialize_f64_vec")]
    embedding: Vec<f64>,
    #[serde(default)]
    designated: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsetsHeader {
    schema: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubset {
    subset: Vec<usize>,
    text: String,
    #[serde(serialize_with = "io::serialize_f64_vec")]
    embedding: Vec<f64>,
}

fn check_schema(path: &Path, expected: &str, found: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Schema(format!(
            "{}: expected schema `{expected}`, found `{found}`",
            path.display()
        )))
    }
}

fn with_path(path: &Path, e: Error) -> Error {
    match e {
        Error::Schema(msg) => Error::Schema(format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn load_prompt_bank(path: &Path) -> Result<PromptBank> {
    let lines = io::read_lines(path)?;
    let Some(((hline, htext), rest)) = lines.split_first() else {
        return Err(Error::Schema(format!("{}: empty prompts file", path.display())));
    };
    let header: PromptsHeader = io::parse_line(path, *hline, htext)?;
    check_schema(path, PROMPTS_SCHEMA, &header.schema)?;
    let mut entries = Vec::with_capacity(rest.len());
    for (line, text) in rest {
        let raw: RawPrompt = io::parse_line(path, *line, text)?;
        if raw.criterion == 0 || raw.criterion > NUM_CRITERIA {
            return Err(Error::Schema(format!(
                "{}:{line}: criterion {} outside 1..={NUM_CRITERIA}",
                path.display(),
                raw.criterion
            )));
        }
        entries.push(PromptEntry {
            criterion: raw.criterion - 1,
            polarity: raw.polarity,
            text: raw.text,
            embedding: raw.embedding,
            designated: raw.designated,
        });
    }
    PromptBank::new(header.dim, header.mode, entries).map_err(|e| with_path(path, e))
}

pub fn load_subset_bank(path: &Path) -> Result<SubsetBank> {
    let lines = io::read_lines(path)?;
    let Some(((hline, htext), rest)) = lines.split_first() else {
        return Err(Error::Schema(format!("{}: empty subsets file", path.display())));
    };
    let header: SubsetsHeader = io::parse_line(path, *hline, htext)?;
    check_schema(path, SUBSETS_SCHEMA, &header.schema)?;
    let mut prompts = Vec::with_capacity(rest.len());
    for (line, text) in rest {
        let raw: RawSubset = io::parse_line(path, *line, text)?;
        let mut subset = [false; NUM_CRITERIA];
        for &c in &raw.subset {
            if c == 0 || c > NUM_CRITERIA || subset[c - 1] {
                return Err(Error::Schema(format!(
                    "{}:{line}: invalid or repeated criterion {c} in subset",
                    path.display()
                )));
            }
            subset[c - 1] = true;
        }
        prompts.push(SubsetPrompt {
            subset,
            text: raw.text,
            embedding: raw.embedding,
        });
    }
    SubsetBank::new(header.dim, prompts).map_err(|e| with_path(path, e))
}

pub fn save_prompt_bank(bank: &PromptBank, path: &Path) -> Result<()> {
    io::write_text(path, &bank.to_jsonl())
}

pub fn save_subset_bank(bank: &SubsetBank, path: &Path) -> Result<()> {
    io::write_text(path, &bank.to_jsonl())
}

/// Bundled prompt texts: the three criterion definitions used as fixed-class
/// positives, matching negatives, and composed subset descriptions.
pub mod defaults {
    use super::NUM_CRITERIA;

    pub const CRITERIA: [&str; NUM_CRITERIA] = [
        "the cystic duct and the cystic artery, connected to the gallbladder",
        "a hepatocystic triangle cleared from fat and connective tissues",
        "the lower part of the gallbladder separated from the liver bed",
    ];

    pub const NEGATIVES: [&str; NUM_CRITERIA] = [
        "A general medical image not showing cystic duct or cystic artery",
        "A general medical image not showing a hepatocystic triangle cleared from fat and connective tissues",
        "A general medical image not showing the lower part of the gallbladder separated from the liver bed",
    ];

    pub const EMPTY_SUBSET: &str = "none of the criteria achieved";

    pub fn subset_text(subset: &[bool; NUM_CRITERIA]) -> String {
        let parts: Vec<&str> = (0..NUM_CRITERIA).filter(|&i| subset[i]).map(|i| CRITERIA[i]).collect();
        if parts.is_empty() {
            EMPTY_SUBSET.to_string()
        } else {
            parts.join("; ")
        }
    }
}
