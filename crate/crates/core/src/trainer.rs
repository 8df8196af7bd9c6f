//! Frozen toy encoders, synthetic few-shot tasks and an SGD loop that learns
//! prompt vectors through the hierarchical OT classifier.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignConfig, CostMode, PromptFeature, PromptSet, Side};
use crate::classifier::{classify, cross_entropy_loss, loss_gradients, ClassBank, PromptSetGradient};
use crate::error::{Error, Result};
use crate::numerics::{dot, l2_norm, l2_normalize, normalize_backward, DenseMatrix};

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::new(rows, cols, data).expect("gaussian entries are finite")
}

/// Frozen linear encoder: tokens are the normalized rows of
/// `[content; prompt] · projection`, the global feature is their normalized
/// mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    projection: DenseMatrix,
    side: Side,
}

impl ToyEncoder {
    pub fn new(projection: DenseMatrix, side: Side) -> Result<Self> {
        if projection.rows() == 0 || projection.cols() == 0 {
            return Err(Error::InvalidInput("encoder projection must be non-empty".into()));
        }
        Ok(Self { projection, side })
    }

    pub fn projection(&self) -> &DenseMatrix {
        &self.projection
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn input_dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.cols()
    }

    fn raw_tokens(&self, prompt: &DenseMatrix, content: &DenseMatrix) -> Result<DenseMatrix> {
        if prompt.rows() == 0 {
            return Err(Error::InvalidInput("prompt needs at least one row".into()));
        }
        for (what, m) in [("prompt", prompt), ("content", content)] {
            if m.cols() != self.input_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "{what} has {} columns, encoder expects {}",
                    m.cols(),
                    self.input_dim()
                )));
            }
        }
        content.vstack(prompt)?.matmul(&self.projection)
    }

    pub fn encode(&self, prompt: &DenseMatrix, content: &DenseMatrix) -> Result<PromptFeature> {
        let raw = self.raw_tokens(prompt, content)?;
        let tokens = crate::numerics::row_normalize_l2(&raw)?;
        let global = l2_normalize(&mean_row(&tokens))?;
        PromptFeature::new(global, tokens)
    }

    /// Gradient with respect to the prompt rows, given gradients with
    /// respect to the encoded global feature and token rows.
    pub fn encode_backward(
        &self,
        prompt: &DenseMatrix,
        content: &DenseMatrix,
        grad_global: &[f64],
        grad_tokens: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        let raw = self.raw_tokens(prompt, content)?;
        if grad_tokens.shape() != raw.shape() || grad_global.len() != raw.cols() {
            return Err(Error::DimensionMismatch("feature gradient shape".into()));
        }
        let tokens = crate::numerics::row_normalize_l2(&raw)?;
        let count = tokens.rows() as f64;
        let g_mean = normalize_backward(&mean_row(&tokens), grad_global);

        let (d_in, d) = self.projection.shape();
        let offset = content.rows();
        let mut out = DenseMatrix::zeros(prompt.rows(), d_in);
        for r in 0..prompt.rows() {
            let i = offset + r;
            let g_tok: Vec<f64> = grad_tokens
                .row(i)
                .iter()
                .zip(&g_mean)
                .map(|(g, m)| g + m / count)
                .collect();
            let g_raw = normalize_backward(raw.row(i), &g_tok);
            for (k, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = dot(&self.projection.row(k)[..d], &g_raw);
            }
        }
        Ok(out)
    }
}

fn mean_row(m: &DenseMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    let n = m.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub embed_dim: usize,
    /// Scale of the modality-specific part of each projection.
    pub modality_gap: f64,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            modality_gap: 2.0,
            seed: 0,
        }
    }
}

/// Image and text encoders sharing a random projection `W`; each adds its
/// own `gap · E`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub image: ToyEncoder,
    pub text: ToyEncoder,
}

impl ToyBackbone {
    pub fn new(input_dim: usize, spec: &BackboneSpec) -> Result<Self> {
        if input_dim == 0 || spec.embed_dim == 0 {
            return Err(Error::InvalidInput("backbone dimensions must be positive".into()));
        }
        if !(spec.modality_gap >= 0.0) || !spec.modality_gap.is_finite() {
            return Err(Error::InvalidInput("modality_gap must be finite and non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let std = 1.0 / (spec.embed_dim as f64).sqrt();
        let shared = gaussian_matrix(&mut rng, input_dim, spec.embed_dim, std);
        let mut side = |side| {
            let own = gaussian_matrix(&mut rng, input_dim, spec.embed_dim, std);
            let data = shared
                .as_slice()
                .iter()
                .zip(own.as_slice())
                .map(|(w, e)| w + spec.modality_gap * e)
                .collect();
            ToyEncoder::new(DenseMatrix::new(input_dim, spec.embed_dim, data)?, side)
        };
        Ok(Self {
            image: side(Side::Image)?,
            text: side(Side::Class)?,
        })
    }
}

/// Learnable prompts: `M` visual and `N` textual matrices of shape `b × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptParams {
    visual: Vec<DenseMatrix>,
    textual: Vec<DenseMatrix>,
}

impl PromptParams {
    pub fn new(visual: Vec<DenseMatrix>, textual: Vec<DenseMatrix>) -> Result<Self> {
        let Some(first) = visual.first().or(textual.first()) else {
            return Err(Error::InvalidInput("need at least one prompt per side".into()));
        };
        if visual.is_empty() || textual.is_empty() {
            return Err(Error::InvalidInput("need at least one prompt per side".into()));
        }
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidInput("prompt length and input dim must be positive".into()));
        }
        if visual.iter().chain(&textual).any(|p| p.shape() != shape) {
            return Err(Error::DimensionMismatch("all prompts must share one shape".into()));
        }
        Ok(Self { visual, textual })
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn init(m: usize, n: usize, length: usize, input_dim: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = (0..m).map(|_| gaussian_matrix(&mut rng, length, input_dim, std)).collect();
        let textual = (0..n).map(|_| gaussian_matrix(&mut rng, length, input_dim, std)).collect();
        Self::new(visual, textual)
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ps: &[DenseMatrix]| ps.iter().map(|p| DenseMatrix::zeros(p.rows(), p.cols())).collect();
        Self {
            visual: z(&self.visual),
            textual: z(&self.textual),
        }
    }

    pub fn visual(&self) -> &[DenseMatrix] {
        &self.visual
    }

    pub fn textual(&self) -> &[DenseMatrix] {
        &self.textual
    }

    pub fn prompt_length(&self) -> usize {
        self.visual[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.visual[0].cols()
    }

    fn all_mut(&mut self) -> impl Iterator<Item = &mut DenseMatrix> {
        self.visual.iter_mut().chain(self.textual.iter_mut())
    }

    fn all(&self) -> impl Iterator<Item = &DenseMatrix> {
        self.visual.iter().chain(self.textual.iter())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (p, g) in self.all_mut().zip(other.all()) {
            for (x, y) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *x += scale * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.all().all(|p| p.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Visual prompts then textual prompts, each row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.all().flat_map(|p| p.as_slice().iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub classes: usize,
    pub shots: usize,
    pub test_per_class: usize,
    /// Patch rows per image.
    pub patches: usize,
    /// Content token rows per class description.
    pub class_tokens: usize,
    pub input_dim: usize,
    pub cluster_spread: f64,
    /// 1 for a single concept per class, 2 for the multi-concept variant.
    pub anchors_per_class: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            shots: 8,
            test_per_class: 10,
            patches: 4,
            class_tokens: 2,
            input_dim: 16,
            cluster_spread: 0.05,
            anchors_per_class: 1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(msg.into()));
        if self.classes < 2 {
            return bad("task needs at least 2 classes");
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return bad("shots and test_per_class must be at least 1");
        }
        if self.patches == 0 || self.class_tokens == 0 || self.input_dim == 0 {
            return bad("patches, class_tokens and input_dim must be at least 1");
        }
        if self.anchors_per_class == 0 {
            return bad("anchors_per_class must be at least 1");
        }
        if self.class_tokens < self.anchors_per_class {
            return bad("class_tokens must cover every anchor");
        }
        if !(self.cluster_spread >= 0.0) || !self.cluster_spread.is_finite() {
            return bad("cluster_spread must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub patches: DenseMatrix,
    pub label: usize,
    /// Which of the class anchors generated the patches.
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: TaskSpec,
    /// Per class, per anchor: unit vectors of length `input_dim`.
    pub anchors: Vec<Vec<Vec<f64>>>,
    /// Per class content tokens (`class_tokens × input_dim`), cycling
    /// through the class anchors.
    pub class_tokens: Vec<DenseMatrix>,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl SyntheticTask {
    pub fn classes(&self) -> usize {
        self.spec.classes
    }
}

pub fn generate_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    let anchors: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..spec.anchors_per_class)
                .map(|_| loop {
                    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                    if l2_norm(&v) > 1e-6 {
                        break l2_normalize(&v).expect("nonzero").into_vec();
                    }
                })
                .collect()
        })
        .collect();
    let class_tokens = anchors
        .iter()
        .map(|a| {
            let rows: Vec<&Vec<f64>> = (0..spec.class_tokens).map(|r| &a[r % a.len()]).collect();
            DenseMatrix::from_rows(&rows)
        })
        .collect::<Result<Vec<_>>>()?;

    let noise_std = spec.cluster_spread / (d as f64).sqrt();
    let image = |rng: &mut ChaCha8Rng, label: usize| {
        let anchor = rng.gen_range(0..spec.anchors_per_class);
        let center = &anchors[label][anchor];
        let data = (0..spec.patches)
            .flat_map(|_| center.iter().map(|c| c + noise_std * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
            .collect();
        LabeledImage {
            patches: DenseMatrix::new(spec.patches, d, data).expect("finite patches"),
            label,
            anchor,
        }
    };
    let mut train = Vec::with_capacity(spec.classes * spec.shots);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for label in 0..spec.classes {
        for _ in 0..spec.shots {
            train.push(image(&mut rng, label));
        }
        for _ in 0..spec.test_per_class {
            test.push(image(&mut rng, label));
        }
    }
    Ok(SyntheticTask {
        spec: *spec,
        anchors,
        class_tokens,
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub align: AlignConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0035,
            epochs: 200,
            batch_size: 4,
            align: AlignConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput("learning_rate must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be at least 1".into()));
        }
        self.align.validate()
    }
}

/// Encodes every class description with the current textual prompts.
pub fn encode_bank(backbone: &ToyBackbone, task: &SyntheticTask, params: &PromptParams) -> Result<ClassBank> {
    let classes = task
        .class_tokens
        .par_iter()
        .map(|content| {
            let prompts = params
                .textual
                .iter()
                .map(|t| backbone.text.encode(t, content))
                .collect::<Result<Vec<_>>>()?;
            PromptSet::new(prompts, Side::Class)
        })
        .collect::<Result<Vec<_>>>()?;
    ClassBank::unnamed(classes)
}

/// Encodes one image's patches once per visual prompt.
pub fn encode_image(backbone: &ToyBackbone, params: &PromptParams, patches: &DenseMatrix) -> Result<PromptSet> {
    let prompts = params
        .visual
        .iter()
        .map(|v| backbone.image.encode(v, patches))
        .collect::<Result<Vec<_>>>()?;
    PromptSet::new(prompts, Side::Image)
}

fn encode_batch(
    backbone: &ToyBackbone,
    params: &PromptParams,
    images: &[&LabeledImage],
) -> Result<Vec<(PromptSet, usize)>> {
    images
        .par_iter()
        .map(|img| Ok((encode_image(backbone, params, &img.patches)?, img.label)))
        .collect()
}

/// Cross-entropy of a batch under the given prompts.
pub fn batch_loss(
    backbone: &ToyBackbone,
    task: &SyntheticTask,
    params: &PromptParams,
    images: &[&LabeledImage],
    align: &AlignConfig,
) -> Result<f64> {
    let bank = encode_bank(backbone, task, params)?;
    let batch = encode_batch(backbone, params, images)?;
    cross_entropy_loss(&batch, &bank, align)
}

fn pull_back(
    encoder: &ToyEncoder,
    prompts: &[DenseMatrix],
    content: &DenseMatrix,
    grad: &PromptSetGradient,
) -> Result<Vec<DenseMatrix>> {
    prompts
        .iter()
        .zip(grad.globals.iter().zip(&grad.tokens))
        .map(|(p, (g, t))| encoder.encode_backward(p, content, g, t))
        .collect()
}

fn accumulate(into: &mut [DenseMatrix], from: &[DenseMatrix]) {
    for (a, b) in into.iter_mut().zip(from) {
        for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
            *x += y;
        }
    }
}

/// Batch loss and its gradient with respect to every prompt parameter.
pub fn batch_gradient(
    backbone: &ToyBackbone,
    task: &SyntheticTask,
    params: &PromptParams,
    images: &[&LabeledImage],
    align: &AlignConfig,
) -> Result<(f64, PromptParams)> {
    let bank = encode_bank(backbone, task, params)?;
    let batch = encode_batch(backbone, params, images)?;
    let grads = loss_gradients(&batch, &bank, align)?;

    let visual: Vec<Vec<DenseMatrix>> = images
        .par_iter()
        .zip(&grads.images)
        .map(|(img, g)| pull_back(&backbone.image, &params.visual, &img.patches, g))
        .collect::<Result<_>>()?;
    let textual: Vec<Vec<DenseMatrix>> = task
        .class_tokens
        .par_iter()
        .zip(&grads.classes)
        .map(|(content, g)| pull_back(&backbone.text, &params.textual, content, g))
        .collect::<Result<_>>()?;

    let mut out = params.zeros_like();
    for v in &visual {
        accumulate(&mut out.visual, v);
    }
    for t in &textual {
        accumulate(&mut out.textual, t);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("prompt gradient".into()));
    }
    Ok((grads.loss, out))
}

/// Test-set accuracy of the current prompts.
pub fn evaluate(backbone: &ToyBackbone, task: &SyntheticTask, params: &PromptParams, align: &AlignConfig) -> Result<f64> {
    let bank = encode_bank(backbone, task, params)?;
    let hits = task
        .test
        .par_iter()
        .map(|img| {
            let set = encode_image(backbone, params, &img.patches)?;
            Ok(usize::from(classify(&set, &bank, align)?.argmax == img.label))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / task.test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch, each taken before its
    /// update.
    pub loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PromptParams,
    pub history: Vec<EpochRecord>,
}

/// Plain minibatch SGD on the prompt parameters; encoders stay frozen.
pub fn train(
    backbone: &ToyBackbone,
    task: &SyntheticTask,
    params: &PromptParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.input_dim() != backbone.image.input_dim() || params.input_dim() != task.spec.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "prompts have input dim {}, encoders {}, task {}",
            params.input_dim(),
            backbone.image.input_dim(),
            task.spec.input_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = params.clone();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&LabeledImage> = chunk.iter().map(|&i| &task.train[i]).collect();
            let (loss, grad) = batch_gradient(backbone, task, &params, &images, &cfg.align)?;
            params.add_scaled(&grad, -cfg.learning_rate);
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("prompt parameters at epoch {epoch}")));
            }
            losses.push(loss);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
        }
        let test_accuracy = evaluate(backbone, task, &params, &cfg.align)?;
        history.push(EpochRecord {
            epoch,
            loss,
            test_accuracy,
        });
    }
    Ok(TrainOutcome { params, history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub beta: f64,
    pub accuracy: f64,
}

/// Trains once per β in convex cost mode from the same starting point and
/// reports the final test accuracy of each run.
pub fn ablate_beta(
    backbone: &ToyBackbone,
    task: &SyntheticTask,
    params: &PromptParams,
    grid: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("beta grid is empty".into()));
    }
    grid.iter()
        .map(|&beta| {
            let mut run = *cfg;
            run.align.beta = beta;
            run.align.cost_mode = CostMode::Convex;
            let out = train(backbone, task, params, &run)?;
            let accuracy = out.history.last().map_or(0.0, |r| r.test_accuracy);
            Ok(AblationRow { beta, accuracy })
        })
        .collect()
}
