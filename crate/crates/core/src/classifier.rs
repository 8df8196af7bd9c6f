//! OT-softmax classification and its cross-entropy loss.
//!
//! Class `k` gets the logit `(1 − d_k)/τ`, where `d_k` is the hierarchical
//! distance between the image's prompt set and the class's prompt set.
//! [`loss_gradients`] differentiates the batch loss with respect to every
//! global feature and token embedding on both sides. Both OT levels are
//! differentiated exactly through [`transport_cost_gradient`], and features
//! are treated as unnormalized parameters whose forward map normalizes them
//! (the cosine is scale invariant, so this only projects gradients onto the
//! tangent space of the unit sphere).

use rayon::prelude::*;

use crate::alignment::{hierarchical_distance, AlignConfig, HierarchicalAlignment, PromptSet, Side};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_similarity_with_grad, log_sum_exp, softmax, DenseMatrix, DenseVector};
use crate::ot::transport_cost_gradient;

/// The `K` classes a prediction ranges over.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBank {
    classes: Vec<PromptSet>,
    names: Vec<String>,
}

impl ClassBank {
    pub fn new(classes: Vec<PromptSet>, names: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "class bank needs at least 2 classes, got {}",
                classes.len()
            )));
        }
        if names.len() != classes.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {} classes",
                names.len(),
                classes.len()
            )));
        }
        let (n, dim) = (classes[0].len(), classes[0].dim());
        for (k, c) in classes.iter().enumerate() {
            if c.side() != Side::Class {
                return Err(Error::InvalidInput(format!("class {k} is not a class-side prompt set")));
            }
            if c.len() != n || c.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "class {k} has {} prompts of dimension {}, expected {n} of dimension {dim}",
                    c.len(),
                    c.dim()
                )));
            }
        }
        Ok(Self { classes, names })
    }

    /// Bank with classes named by their index.
    pub fn unnamed(classes: Vec<PromptSet>) -> Result<Self> {
        let names = (0..classes.len()).map(|k| k.to_string()).collect();
        Self::new(classes, names)
    }

    pub fn classes(&self) -> &[PromptSet] {
        &self.classes
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: DenseVector,
    pub distances: DenseVector,
    /// Index of the smallest distance (first on ties).
    pub argmax: usize,
}

/// `1 − d_k`; the temperature is applied by [`softmax`].
fn similarities(distances: &[f64]) -> Vec<f64> {
    distances.iter().map(|d| 1.0 - d).collect()
}

fn check_image(image: &PromptSet, bank: &ClassBank) -> Result<()> {
    if image.side() != Side::Image {
        return Err(Error::InvalidInput("expected an image-side prompt set".into()));
    }
    if image.dim() != bank.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image prompts have dimension {}, classes have {}",
            image.dim(),
            bank.dim()
        )));
    }
    Ok(())
}

fn align_all(image: &PromptSet, bank: &ClassBank, cfg: &AlignConfig) -> Result<Vec<HierarchicalAlignment>> {
    check_image(image, bank)?;
    bank.classes()
        .par_iter()
        .map(|class| hierarchical_distance(image, class, cfg))
        .collect()
}

fn predict_from_distances(distances: Vec<f64>, tau: f64) -> Result<Prediction> {
    let probabilities = softmax(&similarities(&distances), tau)?;
    let negated: Vec<f64> = distances.iter().map(|d| -d).collect();
    let argmax = argmax(&negated).expect("bank is nonempty");
    Ok(Prediction {
        probabilities,
        distances: DenseVector::new(distances)?,
        argmax,
    })
}

/// Softmax over `(1 − d_k)/τ`.
pub fn classify(image: &PromptSet, bank: &ClassBank, cfg: &AlignConfig) -> Result<Prediction> {
    let distances = align_all(image, bank, cfg)?.iter().map(|a| a.distance()).collect();
    predict_from_distances(distances, cfg.tau)
}

fn log_probability(distances: &[f64], tau: f64, k: usize) -> f64 {
    let scaled: Vec<f64> = distances.iter().map(|d| (1.0 - d) / tau).collect();
    scaled[k] - log_sum_exp(&scaled)
}

fn check_batch(batch: &[(PromptSet, usize)], bank: &ClassBank) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("loss needs a nonempty batch".into()));
    }
    if let Some((i, (_, y))) = batch.iter().enumerate().find(|(_, (_, y))| *y >= bank.len()) {
        return Err(Error::InvalidInput(format!(
            "label {y} of batch item {i} is out of range for {} classes",
            bank.len()
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true classes.
pub fn cross_entropy_loss(batch: &[(PromptSet, usize)], bank: &ClassBank, cfg: &AlignConfig) -> Result<f64> {
    check_batch(batch, bank)?;
    let per_image: Vec<f64> = batch
        .par_iter()
        .map(|(image, y)| {
            let d: Vec<f64> = align_all(image, bank, cfg)?.iter().map(|a| a.distance()).collect();
            Ok(-log_probability(&d, cfg.tau, *y))
        })
        .collect::<Result<_>>()?;
    let loss = per_image.iter().sum::<f64>() / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok(loss)
}

/// Gradient with respect to one prompt set: one global vector and one token
/// matrix per prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSetGradient {
    pub globals: Vec<Vec<f64>>,
    pub tokens: Vec<DenseMatrix>,
}

impl PromptSetGradient {
    pub fn zeros_like(set: &PromptSet) -> Self {
        Self {
            globals: set.prompts().iter().map(|p| vec![0.0; p.dim()]).collect(),
            tokens: set
                .prompts()
                .iter()
                .map(|p| DenseMatrix::zeros(p.token_count(), p.dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.globals.iter_mut().zip(&other.globals) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.tokens.iter_mut().zip(&other.tokens) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.globals.iter().flatten().all(|x| x.is_finite())
            && self.tokens.iter().all(|t| t.as_slice().iter().all(|x| x.is_finite()))
    }

    /// Every entry in a fixed order: globals first, then token matrices.
    pub fn flatten(&self) -> Vec<f64> {
        self.globals
            .iter()
            .flatten()
            .copied()
            .chain(self.tokens.iter().flat_map(|t| t.as_slice().iter().copied()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: f64,
    /// One entry per batch item.
    pub images: Vec<PromptSetGradient>,
    /// One entry per class of the bank.
    pub classes: Vec<PromptSetGradient>,
}

/// Pulls `weight · ∂d/∂(features)` back through one hierarchical alignment.
fn backward_alignment(
    image: &PromptSet,
    class: &PromptSet,
    alignment: &HierarchicalAlignment,
    cfg: &AlignConfig,
    weight: f64,
) -> Result<(PromptSetGradient, PromptSetGradient)> {
    let mut gi = PromptSetGradient::zeros_like(image);
    let mut gc = PromptSetGradient::zeros_like(class);
    let outer = transport_cost_gradient(alignment.prompt_plan(), &alignment.prompt.cost)?;
    let (m, n) = outer.shape();
    let (wg, wt) = (cfg.global_weight(), cfg.token_weight());

    for i in 0..m {
        for j in 0..n {
            let g_cost = weight * outer.get(i, j);
            if wg != 0.0 {
                let (_, dz, dh) =
                    cosine_similarity_with_grad(image.prompts()[i].global(), class.prompts()[j].global())?;
                let scale = -wg * g_cost;
                for (acc, d) in gi.globals[i].iter_mut().zip(&dz) {
                    *acc += scale * d;
                }
                for (acc, d) in gc.globals[j].iter_mut().zip(&dh) {
                    *acc += scale * d;
                }
            }
            let Some(token) = alignment.parts.token.get(i * n + j) else {
                continue;
            };
            let inner = transport_cost_gradient(token.plan(), &token.cost)?;
            let vis = image.prompts()[i].tokens();
            let txt = class.prompts()[j].tokens();
            for r in 0..vis.rows() {
                for s in 0..txt.rows() {
                    let scale = -wt * g_cost * inner.get(r, s);
                    if scale == 0.0 {
                        continue;
                    }
                    let (_, dr, ds) = cosine_similarity_with_grad(vis.row(r), txt.row(s))?;
                    for (acc, d) in gi.tokens[i].row_mut(r).iter_mut().zip(&dr) {
                        *acc += scale * d;
                    }
                    for (acc, d) in gc.tokens[j].row_mut(s).iter_mut().zip(&ds) {
                        *acc += scale * d;
                    }
                }
            }
        }
    }
    Ok((gi, gc))
}

/// Loss and its gradient with respect to every image-side and class-side
/// feature.
///
/// Fails with [`Error::NotConverged`] if any Sinkhorn solve in the forward
/// pass stopped before reaching its tolerance.
pub fn loss_gradients(
    batch: &[(PromptSet, usize)],
    bank: &ClassBank,
    cfg: &AlignConfig,
) -> Result<LossGradients> {
    check_batch(batch, bank)?;
    let scale = 1.0 / batch.len() as f64;
    let k = bank.len();

    // per image: (loss term, image gradient, class gradients)
    let per_image: Vec<(f64, PromptSetGradient, Vec<PromptSetGradient>)> = batch
        .par_iter()
        .map(|(image, y)| {
            let alignments = align_all(image, bank, cfg)?;
            let d: Vec<f64> = alignments.iter().map(|a| a.distance()).collect();
            let p = softmax(&similarities(&d), cfg.tau)?;
            let nll = -log_probability(&d, cfg.tau, *y);
            let pulled: Vec<(PromptSetGradient, PromptSetGradient)> = (0..k)
                .into_par_iter()
                .map(|c| {
                    let target = if c == *y { 1.0 } else { 0.0 };
                    // ∂L/∂d_c = −(p_c − y_c) / (τ · batch)
                    let weight = -(p[c] - target) * scale / cfg.tau;
                    backward_alignment(image, &bank.classes()[c], &alignments[c], cfg, weight)
                })
                .collect::<Result<_>>()?;
            let mut gi = PromptSetGradient::zeros_like(image);
            let mut gcs = Vec::with_capacity(k);
            for (a, b) in pulled {
                gi.add_assign(&a);
                gcs.push(b);
            }
            Ok((nll, gi, gcs))
        })
        .collect::<Result<_>>()?;

    let mut classes: Vec<PromptSetGradient> = bank.classes().iter().map(PromptSetGradient::zeros_like).collect();
    let mut loss = 0.0;
    let mut images = Vec::with_capacity(batch.len());
    for (nll, gi, gcs) in per_image {
        loss += nll;
        images.push(gi);
        for (acc, g) in classes.iter_mut().zip(&gcs) {
            acc.add_assign(g);
        }
    }
    let loss = loss * scale;
    if !loss.is_finite() || !images.iter().chain(&classes).all(PromptSetGradient::is_finite) {
        return Err(Error::NonFinite("loss gradients".into()));
    }
    Ok(LossGradients { loss, images, classes })
}
