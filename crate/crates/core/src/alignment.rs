//! Adapter projections, cosine similarity, temperature-scaled batch softmax
//! and the symmetric KL contrastive loss.
//!
//! The learnable temperature is stored as a log-scale `θ`: similarities are
//! multiplied by `exp(θ)` before the softmax, i.e. `τ = exp(−θ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Labels, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::numerics::{
    self, finite_diff_check, kl_row_mean, l2_normalize_rows, matmul_transposed, CheckReport, DenseMatrix, GradTape,
    Gradients, ParamId, ParamSet, Var,
};

/// Initial log-scale of the learnable temperature.
pub const INIT_LOG_SCALE: f64 = 2.6593;

pub const IMG_WEIGHT: ParamId = ParamId(0);
pub const IMG_BIAS: ParamId = ParamId(1);
pub const TXT_WEIGHT: ParamId = ParamId(2);
pub const TXT_BIAS: ParamId = ParamId(3);
pub const LOG_SCALE: ParamId = ParamId(4);

const PARAM_NAMES: [&str; 5] = ["img_weight", "img_bias", "txt_weight", "txt_bias", "log_scale"];

/// Linear adapters (`x ↦ x·Wᵀ + b`) for each modality plus the temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterModel {
    pub img_weight: DenseMatrix,
    pub img_bias: DenseMatrix,
    pub txt_weight: DenseMatrix,
    pub txt_bias: DenseMatrix,
    pub log_scale: f64,
}

impl AdapterModel {
    /// Identity weights, zero biases, `θ = INIT_LOG_SCALE`.
    pub fn identity(dim: usize) -> Self {
        Self {
            img_weight: DenseMatrix::identity(dim),
            img_bias: DenseMatrix::zeros(1, dim),
            txt_weight: DenseMatrix::identity(dim),
            txt_bias: DenseMatrix::zeros(1, dim),
            log_scale: INIT_LOG_SCALE,
        }
    }

    pub fn dim(&self) -> usize {
        self.img_weight.rows()
    }

    /// Softmax temperature `τ = exp(−θ)`.
    pub fn temperature(&self) -> f64 {
        (-self.log_scale).exp()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let shapes = [
            (self.img_weight.shape(), (d, d)),
            (self.img_bias.shape(), (1, d)),
            (self.txt_weight.shape(), (d, d)),
            (self.txt_bias.shape(), (1, d)),
        ];
        for (i, (got, want)) in shapes.into_iter().enumerate() {
            if got != want {
                return Err(Error::shape("adapter", format!("{} is {got:?}, expected {want:?}", PARAM_NAMES[i])));
            }
        }
        if !self.log_scale.is_finite() {
            return Err(Error::NonFinite {
                context: "adapter log_scale".into(),
            });
        }
        Ok(())
    }

    /// Parameters in `ParamId` order: image weight, image bias, text weight,
    /// text bias, log-scale (as `1 x 1`).
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.push(PARAM_NAMES[0], self.img_weight.clone());
        p.push(PARAM_NAMES[1], self.img_bias.clone());
        p.push(PARAM_NAMES[2], self.txt_weight.clone());
        p.push(PARAM_NAMES[3], self.txt_bias.clone());
        p.push(PARAM_NAMES[4], DenseMatrix::scalar(self.log_scale).expect("finite log scale"));
        p
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::shape("adapter", format!("{} parameter groups, expected 5", params.len())));
        }
        let log_scale = params
            .get(LOG_SCALE)
            .as_scalar()
            .ok_or_else(|| Error::shape("adapter", "log_scale must be 1x1"))?;
        let model = Self {
            img_weight: params.get(IMG_WEIGHT).clone(),
            img_bias: params.get(IMG_BIAS).clone(),
            txt_weight: params.get(TXT_WEIGHT).clone(),
            txt_bias: params.get(TXT_BIAS).clone(),
            log_scale,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn project_images(&self, images: &DenseMatrix) -> Result<DenseMatrix> {
        project_rows(images, &self.img_weight, &self.img_bias)
    }

    pub fn project_texts(&self, texts: &DenseMatrix) -> Result<DenseMatrix> {
        project_rows(texts, &self.txt_weight, &self.txt_bias)
    }
}

fn project_rows(x: &DenseMatrix, weight: &DenseMatrix, bias: &DenseMatrix) -> Result<DenseMatrix> {
    let mut y = matmul_transposed(x, weight)?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    l2_normalize_rows(&y)
}

/// Unit-norm projected image rows and, per criterion, unit-norm projected
/// prompt rows.
pub fn project(model: &AdapterModel, images: &DenseMatrix, prompts: &[DenseMatrix]) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
    let v = model.project_images(images)?;
    let t = prompts
        .iter()
        .map(|p| model.project_texts(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((v, t))
}

/// Cosine similarities `S = V·Tᵀ` for unit-norm rows. `Sᵀ` holds the
/// text-to-image direction.
pub fn similarity_matrix(v: &DenseMatrix, t: &DenseMatrix) -> Result<DenseMatrix> {
    matmul_transposed(v, t)
}

/// Row softmaxes of `S·exp(θ)` (image→text) and `Sᵀ·exp(θ)` (text→image).
pub fn batch_distributions(s: &DenseMatrix, log_scale: f64) -> Result<(DenseMatrix, DenseMatrix)> {
    let factor = log_scale.exp();
    let scaled = s.map(|x| x * factor);
    scaled.check_finite("scaled similarities")?;
    Ok((
        numerics::softmax_rows(&scaled)?,
        numerics::softmax_rows(&scaled.transpose())?,
    ))
}

/// Ground-truth match distribution. Row `j` is uniform over the prompts `k`
/// whose polarity label equals image `j`'s label.
pub fn target_matrix(labels: &[bool], prompt_labels: &[bool]) -> Result<DenseMatrix> {
    let mut q = DenseMatrix::zeros(labels.len(), prompt_labels.len());
    for (j, &y) in labels.iter().enumerate() {
        let matches = prompt_labels.iter().filter(|&&p| p == y).count();
        if matches == 0 {
            return Err(Error::DegenerateBatch(format!("image {j} has no matching prompt in the batch")));
        }
        let w = 1.0 / matches as f64;
        for (k, &p) in prompt_labels.iter().enumerate() {
            if p == y {
                q.set(j, k, w);
            }
        }
    }
    Ok(q)
}

/// Mean over rows of `KL(Q_j ‖ P_j)`.
pub fn kl_contrastive_loss(p: &DenseMatrix, q: &DenseMatrix) -> Result<f64> {
    for (name, m) in [("prediction", p), ("target", q)] {
        for r in 0..m.rows() {
            let s: f64 = m.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateBatch(format!("{name} row {r} sums to {s}, not 1")));
            }
        }
    }
    kl_row_mean(q, p)
}

/// One training batch: image rows, the prompt rows sampled for each
/// criterion, and both label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub images: DenseMatrix,
    /// `prompts[i]` row `k` is the prompt sampled for image `k`, criterion `i`.
    pub prompts: Vec<DenseMatrix>,
    pub labels: Vec<Labels>,
    /// Polarity (as a label) of each sampled prompt.
    pub prompt_labels: Vec<Labels>,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    fn check(&self, dim: usize) -> Result<()> {
        let n = self.images.rows();
        if n < 2 {
            return Err(Error::DegenerateBatch(format!("batch of {n}; contrastive loss needs at least 2")));
        }
        if self.prompts.len() != NUM_CRITERIA || self.labels.len() != n || self.prompt_labels.len() != n {
            return Err(Error::shape("batch", "inconsistent batch components"));
        }
        if self.images.cols() != dim || self.prompts.iter().any(|p| p.shape() != (n, dim)) {
            return Err(Error::shape("batch", format!("rows must be {dim}-dimensional")));
        }
        Ok(())
    }

    fn criterion_labels(&self, i: usize) -> (Vec<bool>, Vec<bool>) {
        (
            self.labels.iter().map(|l| l[i]).collect(),
            self.prompt_labels.iter().map(|l| l[i]).collect(),
        )
    }
}

/// Similarities, both softmax directions, and both targets for one criterion.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionSimilarity {
    pub similarity: DenseMatrix,
    pub img_to_txt: DenseMatrix,
    pub txt_to_img: DenseMatrix,
    pub target_img_to_txt: DenseMatrix,
    pub target_txt_to_img: DenseMatrix,
}

impl CriterionSimilarity {
    /// `½[KL(img→txt) + KL(txt→img)]`
    pub fn loss(&self) -> Result<f64> {
        let a = kl_contrastive_loss(&self.img_to_txt, &self.target_img_to_txt)?;
        let b = kl_contrastive_loss(&self.txt_to_img, &self.target_txt_to_img)?;
        Ok(0.5 * (a + b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBatch {
    pub criteria: Vec<CriterionSimilarity>,
}

impl SimilarityBatch {
    pub fn build(model: &AdapterModel, batch: &ContrastiveBatch) -> Result<Self> {
        batch.check(model.dim())?;
        let (v, ts) = project(model, &batch.images, &batch.prompts)?;
        let criteria = ts
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let similarity = similarity_matrix(&v, t)?;
                let (img_to_txt, txt_to_img) = batch_distributions(&similarity, model.log_scale)?;
                let (labels, prompt_labels) = batch.criterion_labels(i);
                Ok(CriterionSimilarity {
                    similarity,
                    img_to_txt,
                    txt_to_img,
                    target_img_to_txt: target_matrix(&labels, &prompt_labels)?,
                    target_txt_to_img: target_matrix(&prompt_labels, &labels)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { criteria })
    }

    /// Sum over criteria, in criterion order, of the symmetric per-criterion loss.
    pub fn total_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.criteria {
            total += c.loss()?;
        }
        Ok(total)
    }
}

/// Parameter handles of an adapter recorded on a tape.
struct ModelVars {
    img_weight: Var,
    img_bias: Var,
    txt_weight: Var,
    txt_bias: Var,
    log_scale: Var,
}

fn record_params(tape: &mut GradTape, params: &ParamSet) -> ModelVars {
    ModelVars {
        img_weight: tape.param(IMG_WEIGHT, params.get(IMG_WEIGHT).clone()),
        img_bias: tape.param(IMG_BIAS, params.get(IMG_BIAS).clone()),
        txt_weight: tape.param(TXT_WEIGHT, params.get(TXT_WEIGHT).clone()),
        txt_bias: tape.param(TXT_BIAS, params.get(TXT_BIAS).clone()),
        log_scale: tape.param(LOG_SCALE, params.get(LOG_SCALE).clone()),
    }
}

fn record_projection(tape: &mut GradTape, x: DenseMatrix, weight: Var, bias: Var) -> Result<Var> {
    let x = tape.constant(x);
    let y = tape.matmul_transposed(x, weight)?;
    let y = tape.add_row_bias(y, bias)?;
    tape.l2_normalize_rows(y)
}

/// Records the full batch loss on `tape` and returns the scalar root.
fn record_total_loss(tape: &mut GradTape, params: &ParamSet, batch: &ContrastiveBatch) -> Result<Var> {
    let vars = record_params(tape, params);
    let v = record_projection(tape, batch.images.clone(), vars.img_weight, vars.img_bias)?;
    let mut total: Option<Var> = None;
    for (i, prompts) in batch.prompts.iter().enumerate() {
        let t = record_projection(tape, prompts.clone(), vars.txt_weight, vars.txt_bias)?;
        let s = tape.matmul_transposed(v, t)?;
        let scaled = tape.scale_by_exp(s, vars.log_scale)?;
        let scaled_t = tape.transpose(scaled);
        let p_img = tape.softmax_rows(scaled)?;
        let p_txt = tape.softmax_rows(scaled_t)?;
        let (labels, prompt_labels) = batch.criterion_labels(i);
        let kl_img = tape.kl_row_mean(target_matrix(&labels, &prompt_labels)?, p_img)?;
        let kl_txt = tape.kl_row_mean(target_matrix(&prompt_labels, &labels)?, p_txt)?;
        let sum = tape.add(kl_img, kl_txt)?;
        let half = tape.scale(sum, 0.5);
        total = Some(match total {
            None => half,
            Some(acc) => tape.add(acc, half)?,
        });
    }
    total.ok_or_else(|| Error::DegenerateBatch("no criteria in batch".into()))
}

/// Batch loss and its gradients with respect to every adapter parameter,
/// evaluated at `params` (laid out as [`AdapterModel::to_params`]).
pub fn loss_and_gradients_at(params: &ParamSet, batch: &ContrastiveBatch) -> Result<(f64, Gradients)> {
    let dim = params.get(IMG_WEIGHT).rows();
    batch.check(dim)?;
    let mut tape = GradTape::new();
    let root = record_total_loss(&mut tape, params, batch)?;
    let loss = tape.value(root).data()[0];
    Ok((loss, tape.backward(root)?))
}

pub fn loss_and_gradients(model: &AdapterModel, batch: &ContrastiveBatch) -> Result<(f64, Gradients)> {
    loss_and_gradients_at(&model.to_params(), batch)
}

/// Forward-only batch loss.
pub fn total_loss(model: &AdapterModel, batch: &ContrastiveBatch) -> Result<f64> {
    SimilarityBatch::build(model, batch)?.total_loss()
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

fn random_model(rng: &mut impl Rng, dim: usize) -> AdapterModel {
    let mut m = AdapterModel::identity(dim);
    m.img_weight = random_matrix(rng, dim, dim, 1.0);
    m.txt_weight = random_matrix(rng, dim, dim, 1.0);
    m.img_bias = random_matrix(rng, 1, dim, 0.3);
    m.txt_bias = random_matrix(rng, 1, dim, 0.3);
    m.log_scale = rng.random_range(-0.5..1.5);
    m
}

/// Images with their own matching prompts: every prompt label equals its
/// image label, as the trainer constructs batches.
fn random_batch(rng: &mut impl Rng, n: usize, dim: usize) -> ContrastiveBatch {
    let labels: Vec<Labels> = (0..n).map(|_| std::array::from_fn(|_| rng.random_bool(0.5))).collect();
    ContrastiveBatch {
        images: random_matrix(rng, n, dim, 1.0),
        prompts: (0..NUM_CRITERIA).map(|_| random_matrix(rng, n, dim, 1.0)).collect(),
        prompt_labels: labels.clone(),
        labels,
    }
}

/// A random adapter and a random batch whose prompt labels equal the image
/// labels, as the trainer builds them. Used for gradient checks.
pub fn random_problem(n: usize, dim: usize, seed: u64) -> (AdapterModel, ContrastiveBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = random_batch(&mut rng, n, dim);
    let model = random_model(&mut rng, dim);
    (model, batch)
}

/// Central-difference check of the total-loss gradients on [`random_problem`].
pub fn gradient_check(n: usize, dim: usize, seed: u64, h: f64, tol: f64) -> Result<CheckReport> {
    let (model, batch) = random_problem(n, dim, seed);
    finite_diff_check(|p| loss_and_gradients_at(p, &batch), &model.to_params(), h, tol)
}
