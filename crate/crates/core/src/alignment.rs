//! Two-level optimal transport between an image's prompt set and a class's
//! prompt set.
//!
//! Each prompt is a global feature plus a bag of token embeddings. The
//! token level compares one visual prompt with one textual prompt by
//! entropic OT between their (uniformly weighted) tokens; the prompt level
//! then transports the `M` visual prompts onto the `N` textual prompts using
//! the cost
//!
//! ```text
//! additive: C_mn = (1 − cos(z_m, h_n)) + β · d_tok(m, n)
//! convex:   C_mn = (1 − β)(1 − cos(z_m, h_n)) + β · d_tok(m, n)
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, l2_norm, l2_normalize, row_normalize_l2, DenseMatrix, DenseVector};
use crate::ot::{sinkhorn, CostMatrix, DiscreteMeasure, SinkhornSettings, SinkhornSolution, TransportPlan};

/// Allowed deviation from unit norm for stored features.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Image,
    Class,
}

/// One encoded prompt: a unit global feature and unit-norm token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptFeature {
    global: DenseVector,
    tokens: DenseMatrix,
}

impl PromptFeature {
    /// Wraps already normalized features, checking the unit-norm invariants.
    pub fn new(global: DenseVector, tokens: DenseMatrix) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::InvalidInput("prompt feature needs at least one token".into()));
        }
        if global.len() != tokens.cols() {
            return Err(Error::DimensionMismatch(format!(
                "global feature has dimension {} but tokens have {}",
                global.len(),
                tokens.cols()
            )));
        }
        let n = l2_norm(&global);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::InvalidInput(format!("global feature has norm {n}, expected 1")));
        }
        for (i, row) in tokens.row_iter().enumerate() {
            let n = l2_norm(row);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::InvalidInput(format!("token {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self { global, tokens })
    }

    /// Normalizes raw encoder outputs (the global vector and every token row).
    pub fn normalized(global: &[f64], tokens: &DenseMatrix) -> Result<Self> {
        Self::new(l2_normalize(global)?, row_normalize_l2(tokens)?)
    }

    pub fn global(&self) -> &DenseVector {
        &self.global
    }

    pub fn tokens(&self) -> &DenseMatrix {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.rows()
    }

    /// Same feature with token rows reordered.
    pub fn with_token_order(&self, order: &[usize]) -> Self {
        Self {
            global: self.global.clone(),
            tokens: self.tokens.permute_rows(order),
        }
    }
}

/// The `M` prompts of one image or the `N` prompts of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: Vec<PromptFeature>,
    side: Side,
}

impl PromptSet {
    pub fn new(prompts: Vec<PromptFeature>, side: Side) -> Result<Self> {
        let Some(first) = prompts.first() else {
            return Err(Error::InvalidInput("prompt set needs at least one prompt".into()));
        };
        let dim = first.dim();
        if let Some(i) = prompts.iter().position(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "prompt {i} has dimension {}, expected {dim}",
                prompts[i].dim()
            )));
        }
        Ok(Self { prompts, side })
    }

    pub fn prompts(&self) -> &[PromptFeature] {
        &self.prompts
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.prompts[0].dim()
    }

    /// Same set with prompts reordered.
    pub fn with_prompt_order(&self, order: &[usize]) -> Self {
        Self {
            prompts: order.iter().map(|&i| self.prompts[i].clone()).collect(),
            side: self.side,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    #[default]
    Additive,
    Convex,
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(CostMode::Additive),
            "convex" => Ok(CostMode::Convex),
            other => Err(Error::InvalidInput(format!(
                "unknown cost mode {other:?}, expected additive or convex"
            ))),
        }
    }
}

/// Hyperparameters of the hierarchical distance and the classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    /// Weight of the token-level distance in the prompt-level cost.
    pub beta: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// Shared by both OT levels; `sinkhorn.lambda` is the entropic weight.
    pub sinkhorn: SinkhornSettings,
    pub cost_mode: CostMode,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tau: 0.01,
            sinkhorn: SinkhornSettings::default(),
            cost_mode: CostMode::Additive,
        }
    }
}

impl AlignConfig {
    pub fn lambda(&self) -> f64 {
        self.sinkhorn.lambda
    }

    pub fn validate(&self) -> Result<()> {
        self.sinkhorn.validate()?;
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidInput(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.cost_mode == CostMode::Convex && self.beta > 1.0 {
            return Err(Error::InvalidInput(format!(
                "convex cost mode needs beta in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidInput(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Weight applied to the global cosine distance `1 − cos`.
    pub fn global_weight(&self) -> f64 {
        match self.cost_mode {
            CostMode::Additive => 1.0,
            CostMode::Convex => 1.0 - self.beta,
        }
    }

    /// Weight applied to the token-level OT distance.
    pub fn token_weight(&self) -> f64 {
        self.beta
    }
}

/// A solved OT problem together with the cost it was solved for.
#[derive(Debug, Clone, PartialEq)]
pub struct OtResult {
    pub cost: CostMatrix,
    pub solution: SinkhornSolution,
}

impl OtResult {
    pub fn solve(cost: CostMatrix, settings: &SinkhornSettings) -> Result<Self> {
        let (m, n) = cost.shape();
        let solution = sinkhorn(
            &DiscreteMeasure::uniform(m)?,
            &DiscreteMeasure::uniform(n)?,
            &cost,
            settings,
        )?;
        Ok(Self { cost, solution })
    }

    /// `⟨T*, C⟩`.
    pub fn distance(&self) -> f64 {
        self.solution.transport_cost
    }

    pub fn plan(&self) -> &TransportPlan {
        &self.solution.plan
    }
}

/// `Ĉ_jl = 1 − cos(r_j, s_l)` between visual tokens `r` and textual tokens `s`.
pub fn token_cost(visual: &PromptFeature, textual: &PromptFeature) -> Result<CostMatrix> {
    if visual.dim() != textual.dim() {
        return Err(Error::DimensionMismatch(format!(
            "visual prompt has dimension {}, textual prompt has {}",
            visual.dim(),
            textual.dim()
        )));
    }
    let (j, l) = (visual.token_count(), textual.token_count());
    let mut data = Vec::with_capacity(j * l);
    for r in visual.tokens().row_iter() {
        for s in textual.tokens().row_iter() {
            data.push(1.0 - cosine_similarity(r, s)?);
        }
    }
    CostMatrix::new(DenseMatrix::new(j, l, data)?)
}

/// Entropic OT between the uniformly weighted tokens of two prompts.
pub fn token_ot_distance(
    visual: &PromptFeature,
    textual: &PromptFeature,
    cfg: &AlignConfig,
) -> Result<OtResult> {
    OtResult::solve(token_cost(visual, textual)?, &cfg.sinkhorn)
}

fn check_pair(image: &PromptSet, class: &PromptSet) -> Result<()> {
    if image.dim() != class.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image prompts have dimension {}, class prompts have {}",
            image.dim(),
            class.dim()
        )));
    }
    Ok(())
}

/// Intermediate quantities of the prompt-level cost.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCostParts {
    /// `cos(z_m, h_n)`, `M × N`.
    pub cosine: DenseMatrix,
    /// Token-level OT per prompt pair in row-major `(m, n)` order. Empty when
    /// `β = 0`, since the token level then does not enter the cost.
    pub token: Vec<OtResult>,
    pub cost: CostMatrix,
}

fn prompt_cost_parts(image: &PromptSet, class: &PromptSet, cfg: &AlignConfig) -> Result<PromptCostParts> {
    cfg.validate()?;
    check_pair(image, class)?;
    let (m, n) = (image.len(), class.len());
    let mut cosine = DenseMatrix::zeros(m, n);
    for (i, z) in image.prompts().iter().enumerate() {
        for (j, h) in class.prompts().iter().enumerate() {
            cosine.set(i, j, cosine_similarity(z.global(), h.global())?);
        }
    }
    let token: Vec<OtResult> = if cfg.token_weight() > 0.0 {
        (0..m * n)
            .into_par_iter()
            .map(|k| {
                token_ot_distance(&image.prompts()[k / n], &class.prompts()[k % n], cfg)
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let (wg, wt) = (cfg.global_weight(), cfg.token_weight());
    let mut c = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let mut entry = wg * (1.0 - cosine.get(i, j));
            if let Some(t) = token.get(i * n + j) {
                entry += wt * t.distance();
            }
            c.set(i, j, entry);
        }
    }
    Ok(PromptCostParts {
        cosine,
        token,
        cost: CostMatrix::new(c)?,
    })
}

/// Prompt-level cost matrix `C` (`M × N`).
pub fn prompt_cost(image: &PromptSet, class: &PromptSet, cfg: &AlignConfig) -> Result<CostMatrix> {
    Ok(prompt_cost_parts(image, class, cfg)?.cost)
}

/// Full two-level alignment of one image with one class.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalAlignment {
    pub parts: PromptCostParts,
    pub prompt: OtResult,
}

impl HierarchicalAlignment {
    pub fn distance(&self) -> f64 {
        self.prompt.distance()
    }

    pub fn prompt_plan(&self) -> &TransportPlan {
        self.prompt.plan()
    }

    /// Token plan for visual prompt `m` and textual prompt `n`, if the token
    /// level was evaluated.
    pub fn token_plan(&self, m: usize, n: usize) -> Option<&TransportPlan> {
        let cols = self.parts.cosine.cols();
        if n >= cols {
            return None;
        }
        self.parts.token.get(m * cols + n).map(OtResult::plan)
    }
}

/// Prompt-level OT distance between an image's prompts and a class's prompts.
pub fn hierarchical_distance(
    image: &PromptSet,
    class: &PromptSet,
    cfg: &AlignConfig,
) -> Result<HierarchicalAlignment> {
    let parts = prompt_cost_parts(image, class, cfg)?;
    let prompt = OtResult::solve(parts.cost.clone(), &cfg.sinkhorn)?;
    Ok(HierarchicalAlignment { parts, prompt })
}
