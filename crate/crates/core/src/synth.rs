//! Synthetic embeddings with known class structure.
//!
//! Each criterion gets an orthonormal prototype direction `μ_i`. An image
//! embedding is `Σ_i ±μ_i + N(0, σ²)` with the sign given by its label;
//! positive prompts sit near `μ_i`, negative prompts near `−μ_i`, and each
//! subset prompt is `Σ_{i∈S} μ_i − Σ_{i∉S} μ_i`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{save_dataset, Dataset, FeatureRecord, Split, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::metrics::average_precision;
use crate::numerics::{dot, norm};
use crate::promptbank::{
    defaults, mask_to_subset, save_prompt_bank, save_subset_bank, BankMode, Polarity, PromptBank, PromptEntry,
    SubsetBank, SubsetPrompt, NUM_SUBSETS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub prevalence: [f64; NUM_CRITERIA],
    pub noise_sigma: f64,
    pub seed: u64,
    /// Non-designated training paraphrases per criterion and polarity.
    pub paraphrases: usize,
    /// Per-coordinate standard deviation of prompt jitter around `±μ_i`.
    pub prompt_jitter: f64,
    pub mode: BankMode,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            n_train: 600,
            n_val: 200,
            n_test: 200,
            prevalence: [0.5; NUM_CRITERIA],
            noise_sigma: 0.1,
            seed: 0,
            paraphrases: 4,
            prompt_jitter: 0.05,
            mode: BankMode::TextAugmented,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < NUM_CRITERIA {
            return Err(Error::Config(format!(
                "dim {} is smaller than the {NUM_CRITERIA} criteria",
                self.dim
            )));
        }
        for (i, &p) in self.prevalence.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("prevalence for C{} is {p}, must lie in (0, 1)", i + 1)));
            }
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(self.prompt_jitter >= 0.0) || !self.prompt_jitter.is_finite() {
            return Err(Error::Config(format!("prompt jitter {} must be finite and >= 0", self.prompt_jitter)));
        }
        if self.mode == BankMode::TextAugmented && self.paraphrases == 0 {
            return Err(Error::Config("text_augmented banks need at least one paraphrase".into()));
        }
        Ok(())
    }

    fn provenance(&self) -> String {
        format!(
            "synthetic: dim={} sigma={} prevalence={:?} jitter={} seed={}",
            self.dim, self.noise_sigma, self.prevalence, self.prompt_jitter, self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub bank: PromptBank,
    pub subsets: SubsetBank,
    /// The prototype directions `μ_i`, one per criterion.
    pub directions: Vec<Vec<f64>>,
}

/// Paths written by [`SynthOutput::save`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthFiles {
    pub features: PathBuf,
    pub prompts: PathBuf,
    pub subsets: PathBuf,
}

impl SynthOutput {
    pub fn save(&self, dir: &Path, stem: &str) -> Result<SynthFiles> {
        let files = SynthFiles {
            features: dir.join(format!("{stem}.features.jsonl")),
            prompts: dir.join(format!("{stem}.prompts.jsonl")),
            subsets: dir.join(format!("{stem}.subsets.jsonl")),
        };
        save_dataset(&self.dataset, &files.features)?;
        save_prompt_bank(&self.bank, &files.prompts)?;
        save_subset_bank(&self.subsets, &files.subsets)?;
        Ok(files)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `k` orthonormal vectors in `R^dim` via two-pass Gram–Schmidt on Gaussian draws.
fn orthonormal_directions(rng: &mut ChaCha8Rng, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn signed_sum(directions: &[Vec<f64>], signs: &[bool], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for (mu, &s) in directions.iter().zip(signs) {
        let sign = if s { 1.0 } else { -1.0 };
        out.iter_mut().zip(mu).for_each(|(o, m)| *o += sign * m);
    }
    out
}

pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let dim = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let directions = orthonormal_directions(&mut rng, NUM_CRITERIA, dim);

    let mut records = Vec::with_capacity(config.n_train + config.n_val + config.n_test);
    for (split, n) in [
        (Split::Train, config.n_train),
        (Split::Val, config.n_val),
        (Split::Test, config.n_test),
    ] {
        for i in 0..n {
            let labels: [bool; NUM_CRITERIA] = std::array::from_fn(|c| rng.random_bool(config.prevalence[c]));
            let mut embedding = signed_sum(&directions, &labels, dim);
            for x in embedding.iter_mut() {
                *x += config.noise_sigma * gaussian(&mut rng);
            }
            records.push(FeatureRecord {
                id: format!("{split}-{i:05}"),
                split,
                embedding,
                labels,
                confidence: None,
            });
        }
    }

    let mut entries = Vec::new();
    for (c, mu) in directions.iter().enumerate() {
        for polarity in [Polarity::Positive, Polarity::Negative] {
            let sign = if polarity.is_positive() { 1.0 } else { -1.0 };
            let base = if polarity.is_positive() {
                defaults::CRITERIA[c]
            } else {
                defaults::NEGATIVES[c]
            };
            let count = match config.mode {
                BankMode::FixedClass => 1,
                BankMode::TextAugmented => 1 + config.paraphrases,
            };
            for k in 0..count {
                let embedding = mu
                    .iter()
                    .map(|m| sign * m + config.prompt_jitter * gaussian(&mut rng))
                    .collect();
                entries.push(PromptEntry {
                    criterion: c,
                    polarity,
                    text: if k == 0 {
                        base.to_string()
                    } else {
                        format!("{base} (paraphrase {k})")
                    },
                    embedding,
                    designated: k == 0,
                });
            }
        }
    }
    let bank = PromptBank::new(dim, config.mode, entries)?;

    let subsets = (0..NUM_SUBSETS)
        .map(|mask| {
            let subset = mask_to_subset(mask);
            SubsetPrompt {
                subset,
                text: defaults::subset_text(&subset),
                embedding: signed_sum(&directions, &subset, dim),
            }
        })
        .collect();
    let subsets = SubsetBank::new(dim, subsets)?;

    Ok(SynthOutput {
        dataset: Dataset::new(dim, records, config.provenance())?,
        bank,
        subsets,
        directions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NullApStats {
    pub mean: f64,
    /// Sample standard deviation; undefined for a single trial.
    pub std: Option<f64>,
    pub trials: usize,
}

/// Monte Carlo AP of uniformly random scores against labels with
/// `round(n · prevalence)` positives (at least one) in random positions.
pub fn null_ap_distribution(n: usize, prevalence: f64, trials: usize, seed: u64) -> Result<NullApStats> {
    if trials == 0 {
        return Err(Error::Config("null AP needs at least one trial".into()));
    }
    if n == 0 || !(prevalence > 0.0 && prevalence <= 1.0) {
        return Err(Error::Config(format!("invalid null AP setup: n={n}, prevalence={prevalence}")));
    }
    let positives = ((n as f64 * prevalence).round() as usize).clamp(1, n);
    let mut aps = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let mut labels: Vec<bool> = (0..n).map(|i| i < positives).collect();
        labels.shuffle(&mut rng);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        aps.push(average_precision(&scores, &labels)?);
    }
    let mean = aps.iter().sum::<f64>() / trials as f64;
    let std = (trials > 1)
        .then(|| (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt());
    Ok(NullApStats { mean, std, trials })
}
