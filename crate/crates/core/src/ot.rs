//! Entropy-regularized optimal transport.
//!
//! [`sinkhorn`] solves
//!
//! ```text
//! min_{T ∈ Π(a, b)}  ⟨T, C⟩ − λ h(T),    h(T) = −Σ T_ij ln T_ij
//! ```
//!
//! with the scaling iterations carried out on dual potentials in the log
//! domain, so the Gibbs kernel `exp(−C/λ)` is never formed. The reported
//! distance is the transport cost `⟨T*, C⟩`; the regularized objective is
//! returned alongside it.
//!
//! Two gradients are available. [`ot_cost_gradient`] is the envelope
//! gradient of the regularized objective with respect to `C`, which is the
//! plan itself. [`transport_cost_gradient`] differentiates the transport cost
//! `⟨T*(C), C⟩` exactly, including the sensitivity of the plan, by implicit
//! differentiation of the optimality conditions.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, DenseMatrix, DenseVector};

/// Tolerance on the total mass of a [`DiscreteMeasure`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Largest problem size accepted by [`exact_ot_uniform`].
pub const ORACLE_MAX_N: usize = 8;

/// Strictly positive weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    weights: DenseVector,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("measure needs at least one atom".into()));
        }
        let weights = DenseVector::new(weights)?;
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "measure weight {i} is {}, weights must be strictly positive",
                weights[i]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { weights })
    }

    /// `n` atoms of mass exactly `1/n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("measure needs at least one atom".into()));
        }
        Ok(Self {
            weights: DenseVector::new(vec![1.0 / n as f64; n])?,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Nonnegative finite cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DenseMatrix);

impl CostMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if let Some(i) = m.as_slice().iter().position(|&c| c < 0.0) {
            let cols = m.cols().max(1);
            return Err(Error::InvalidInput(format!(
                "cost entry ({}, {}) is negative",
                i / cols,
                i % cols
            )));
        }
        if m.rows() == 0 || m.cols() == 0 {
            return Err(Error::InvalidInput("cost matrix is empty".into()));
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(DenseMatrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Regularization and stopping rule for [`sinkhorn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornSettings {
    pub lambda: f64,
    pub max_iterations: usize,
    /// Maximum L1 marginal violation accepted as converged.
    pub tolerance: f64,
    /// Warm start and Newton steps (see [`sinkhorn`]).
    pub accelerated: bool,
}

impl SinkhornSettings {
    pub fn new(lambda: f64, max_iterations: usize, tolerance: f64) -> Result<Self> {
        let s = Self {
            lambda,
            max_iterations,
            tolerance,
            accelerated: true,
        };
        s.validate()?;
        Ok(s)
    }

    /// Same settings with plain scaling iterations from zero potentials.
    pub fn plain(self) -> Self {
        Self {
            accelerated: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidInput("max_iterations must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) || !self.tolerance.is_finite() {
            return Err(Error::InvalidInput(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

impl Default for SinkhornSettings {
    /// λ = 0.1 with a 100 iteration budget.
    fn default() -> Self {
        Self {
            lambda: 0.1,
            max_iterations: 100,
            tolerance: 1e-6,
            accelerated: true,
        }
    }
}

/// Coupling returned by [`sinkhorn`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    plan: DenseMatrix,
    source: DiscreteMeasure,
    target: DiscreteMeasure,
    iterations_used: usize,
    marginal_violation: f64,
    tolerance: f64,
    lambda: f64,
}

impl TransportPlan {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.plan
    }

    pub fn source_marginal(&self) -> &DiscreteMeasure {
        &self.source
    }

    pub fn target_marginal(&self) -> &DiscreteMeasure {
        &self.target
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    /// `max(‖T1 − a‖₁, ‖Tᵀ1 − b‖₁)` of the returned plan.
    pub fn marginal_violation(&self) -> f64 {
        self.marginal_violation
    }

    /// Tolerance the plan was solved against.
    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_converged(&self) -> bool {
        self.marginal_violation <= self.tolerance
    }

    /// Recomputes both marginals from the stored matrix and checks them
    /// against the recorded tolerance.
    pub fn verify_marginals(&self) -> Result<()> {
        let (rows, cols) = marginal_errors(&self.plan, self.source.weights(), self.target.weights());
        if self.plan.as_slice().iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidInput("transport plan has a negative entry".into()));
        }
        let worst = rows.max(cols);
        if worst > self.tolerance {
            return Err(Error::NotConverged {
                violation: worst,
                tolerance: self.tolerance,
            });
        }
        Ok(())
    }
}

/// Output of [`sinkhorn`].
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornSolution {
    pub plan: TransportPlan,
    /// `⟨T*, C⟩`.
    pub transport_cost: f64,
    /// `⟨T*, C⟩ − λ h(T*)`.
    pub regularized_objective: f64,
}

fn marginal_errors(plan: &DenseMatrix, a: &[f64], b: &[f64]) -> (f64, f64) {
    let rows: f64 = plan.row_sums().iter().zip(a).map(|(s, w)| (s - w).abs()).sum();
    let cols: f64 = plan.col_sums().iter().zip(b).map(|(s, w)| (s - w).abs()).sum();
    (rows, cols)
}

/// `−Σ T ln T`, with `0 ln 0 = 0`.
pub fn entropy(plan: &DenseMatrix) -> f64 {
    plan.as_slice()
        .iter()
        .filter(|&&t| t > 0.0)
        .map(|&t| -t * t.ln())
        .sum()
}

#[cfg(debug_assertions)]
static VERIFIED_PLANS: std::sync::atomic::AtomicUsize = std::sync::atomic::AtomicUsize::new(0);

/// Number of converged plans whose marginals were re-verified inside
/// [`sinkhorn`]. Only tracked in builds with debug assertions.
#[cfg(debug_assertions)]
pub fn verified_plan_count() -> usize {
    VERIFIED_PLANS.load(std::sync::atomic::Ordering::Relaxed)
}

/// Largest `m + n` for which iterations try a dual Newton step.
pub const NEWTON_MAX_SIZE: usize = 256;

struct Potentials<'a> {
    c: &'a DenseMatrix,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    a: &'a [f64],
    b: &'a [f64],
    lambda: f64,
}

struct Iterate {
    f: Vec<f64>,
    g: Vec<f64>,
    plan: DenseMatrix,
    violation: f64,
    dual: f64,
}

impl Potentials<'_> {
    /// One row update followed by one column update, both in the log domain.
    fn sweep(&self, f: &mut [f64], g: &mut [f64], buf: &mut [f64]) {
        let (m, n) = self.c.shape();
        let lambda = self.lambda;
        for i in 0..m {
            let row = self.c.row(i);
            for j in 0..n {
                buf[j] = (g[j] - row[j]) / lambda;
            }
            f[i] = lambda * (self.log_a[i] - log_sum_exp(&buf[..n]));
        }
        for j in 0..n {
            for i in 0..m {
                buf[i] = (f[i] - self.c.get(i, j)) / lambda;
            }
            g[j] = lambda * (self.log_b[j] - log_sum_exp(&buf[..m]));
        }
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> DenseMatrix {
        let (m, n) = self.c.shape();
        let mut plan = DenseMatrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                plan.set(i, j, ((f[i] + g[j] - self.c.get(i, j)) / self.lambda).exp());
            }
        }
        plan
    }

    /// Sweeps from `(f, g)` and evaluates the resulting plan. `None` when the
    /// potentials or the plan stop being finite.
    fn step_from(&self, mut f: Vec<f64>, mut g: Vec<f64>, buf: &mut [f64]) -> Option<Iterate> {
        self.sweep(&mut f, &mut g, buf);
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return None;
        }
        let plan = self.plan(&f, &g);
        if plan.as_slice().iter().any(|t| !t.is_finite()) {
            return None;
        }
        let (rows, cols) = marginal_errors(&plan, self.a, self.b);
        let dual = dot(self.a, &f) + dot(self.b, &g) - self.lambda * plan.as_slice().iter().sum::<f64>();
        Some(Iterate {
            f,
            g,
            plan,
            violation: rows.max(cols),
            dual,
        })
    }

    /// Newton direction for the dual `⟨a, f⟩ + ⟨b, g⟩ − λ Σ exp((f_i + g_j − C_ij)/λ)`
    /// at the current iterate, with the last column potential pinned.
    fn newton_direction(&self, it: &Iterate, damping: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let t = &it.plan;
        let (m, n) = t.shape();
        let size = m + n - 1;
        let rows = t.row_sums();
        let cols = t.col_sums();
        let mut h = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        for i in 0..m {
            h[(i, i)] = rows[i];
            rhs[i] = self.lambda * (self.a[i] - rows[i]);
            for j in 0..n - 1 {
                h[(i, m + j)] = t.get(i, j);
                h[(m + j, i)] = t.get(i, j);
            }
        }
        for j in 0..n - 1 {
            h[(m + j, m + j)] = cols[j];
            rhs[m + j] = self.lambda * (self.b[j] - cols[j]);
        }
        for k in 0..size {
            h[(k, k)] += damping;
        }
        let x = h.lu().solve(&rhs)?;
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let df = x.rows(0, m).iter().copied().collect();
        let mut dg: Vec<f64> = x.rows(m, n - 1).iter().copied().collect();
        dg.push(0.0);
        Some((df, dg))
    }
}

/// Violation below which a non-decreasing step is treated as rounding noise.
fn rounding_floor(m: usize, n: usize) -> f64 {
    64.0 * f64::EPSILON * (m + n) as f64
}

/// Diagonal shifts tried in turn for the Newton system. Nearly disconnected
/// plan supports leave the dual Hessian close to singular.
const NEWTON_DAMPING: [f64; 6] = [0.0, 1e-14, 1e-12, 1e-10, 1e-8, 1e-6];

/// Ratio between consecutive λ values of the warm-start schedule.
const ANNEAL_FACTOR: f64 = 0.5;
/// Iteration cap for each intermediate λ of the warm-start schedule.
const ANNEAL_STAGE_ITERATIONS: usize = 200;

/// Iterates from `start` until the violation drops to `tolerance`, the budget
/// runs out or rounding stalls progress. Returns the iterate with the smallest
/// violation seen and the number of iterations performed.
fn iterate(
    pot: &Potentials<'_>,
    start: (Vec<f64>, Vec<f64>),
    max_iterations: usize,
    tolerance: f64,
    newton: bool,
    buf: &mut [f64],
) -> Result<(Iterate, usize)> {
    let (m, n) = pot.c.shape();
    let floor = rounding_floor(m, n);
    let mut current = pot
        .step_from(start.0, start.1, buf)
        .ok_or(Error::SinkhornDiverged { iteration: 1 })?;
    let mut best: Option<Iterate> = None;
    let mut iterations = 1;
    while current.violation > tolerance && iterations < max_iterations {
        let iteration = iterations + 1;
        let mut next = None;
        if newton {
            'search: for damping in NEWTON_DAMPING {
                let Some((df, dg)) = pot.newton_direction(&current, damping) else {
                    continue;
                };
                let mut step = 1.0;
                for _ in 0..20 {
                    let f = current.f.iter().zip(&df).map(|(x, d)| x + step * d).collect();
                    let g = current.g.iter().zip(&dg).map(|(x, d)| x + step * d).collect();
                    if let Some(cand) = pot.step_from(f, g, buf) {
                        if cand.dual > current.dual {
                            next = Some(cand);
                            break 'search;
                        }
                    }
                    step *= 0.5;
                }
            }
        }
        let next = match next {
            Some(it) => it,
            None => pot
                .step_from(current.f.clone(), current.g.clone(), buf)
                .ok_or(Error::SinkhornDiverged { iteration })?,
        };
        let lowest = best.as_ref().map_or(current.violation, |b| b.violation.min(current.violation));
        if next.violation >= lowest && lowest <= floor {
            break;
        }
        if next.violation > current.violation && best.as_ref().map_or(true, |b| current.violation < b.violation) {
            best = Some(current);
        }
        current = next;
        iterations = iteration;
    }
    let result = match best {
        Some(b) if b.violation < current.violation => b,
        _ => current,
    };
    Ok((result, iterations))
}

/// Potentials solved along a geometric λ schedule that starts at the cost
/// spread and stops just above the target λ. `None` when nothing is gained
/// or a stage fails.
fn warm_start(pot: &Potentials<'_>, tolerance: f64, newton: bool, buf: &mut [f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let (m, n) = pot.c.shape();
    let data = pot.c.as_slice();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lambda = hi - lo;
    if !(lambda > pot.lambda / ANNEAL_FACTOR) {
        return None;
    }
    let mut start = (vec![0.0; m], vec![0.0; n]);
    while lambda > pot.lambda {
        let stage = Potentials {
            lambda,
            log_a: pot.log_a.clone(),
            log_b: pot.log_b.clone(),
            ..*pot
        };
        let (it, _) = iterate(&stage, start, ANNEAL_STAGE_ITERATIONS, tolerance, newton, buf).ok()?;
        start = (it.f, it.g);
        lambda *= ANNEAL_FACTOR;
    }
    Some(start)
}

/// Log-domain Sinkhorn iterations.
///
/// Each iteration is a row update followed by a column update of the dual
/// potentials; the plan is then materialized and its L1 marginal violation
/// measured. Hitting `max_iterations` is not an error: the plan is returned
/// with its violation recorded.
///
/// Plain scaling slows to a crawl when the optimal plan is nearly sparse
/// (cost gaps much larger than λ). With `settings.accelerated` set, the
/// potentials are first warm-started by solving a geometric sequence of
/// larger λ values, and on problems with `m + n ≤` [`NEWTON_MAX_SIZE`] each
/// iteration tries a backtracked Newton step on the dual, kept only if the
/// following sweep ends with a smaller violation. The fixed point is the same
/// entropic optimum. `iterations_used` counts iterations at the target λ only.
pub fn sinkhorn(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    cost: &CostMatrix,
    settings: &SinkhornSettings,
) -> Result<SinkhornSolution> {
    settings.validate()?;
    let (m, n) = cost.shape();
    if a.len() != m || b.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cost is {m}x{n} but marginals have {} and {} atoms",
            a.len(),
            b.len()
        )));
    }
    let lambda = settings.lambda;
    let pot = Potentials {
        c: cost.matrix(),
        log_a: a.weights().iter().map(|w| w.ln()).collect(),
        log_b: b.weights().iter().map(|w| w.ln()).collect(),
        a: a.weights(),
        b: b.weights(),
        lambda,
    };
    let newton = settings.accelerated && m + n <= NEWTON_MAX_SIZE && m + n > 2;
    let mut buf = vec![0.0; m.max(n)];
    let start = settings
        .accelerated
        .then(|| warm_start(&pot, settings.tolerance, newton, &mut buf))
        .flatten()
        .unwrap_or_else(|| (vec![0.0; m], vec![0.0; n]));
    let (current, iterations) = iterate(&pot, start, settings.max_iterations, settings.tolerance, newton, &mut buf)?;

    let plan = current.plan;
    let transport_cost = plan.frobenius_dot(cost.matrix());
    let regularized_objective = transport_cost - lambda * entropy(&plan);
    let plan = TransportPlan {
        plan,
        source: a.clone(),
        target: b.clone(),
        iterations_used: iterations,
        marginal_violation: current.violation,
        tolerance: settings.tolerance,
        lambda,
    };
    #[cfg(debug_assertions)]
    if plan.is_converged() {
        if let Err(e) = plan.verify_marginals() {
            panic!("converged plan failed marginal verification: {e}");
        }
        VERIFIED_PLANS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }
    Ok(SinkhornSolution {
        plan,
        transport_cost,
        regularized_objective,
    })
}

/// Exact OT between two uniform measures on `n` atoms by enumerating the
/// vertices of the Birkhoff polytope.
///
/// Returns the optimal plan (a permutation matrix scaled by `1/n`) and its
/// cost. Ties resolve to the lexicographically first permutation.
pub fn exact_ot_uniform(cost: &CostMatrix) -> Result<(DenseMatrix, f64)> {
    let (rows, cols) = cost.shape();
    if rows != cols {
        return Err(Error::DimensionMismatch(format!(
            "exact oracle needs a square cost matrix, got {rows}x{cols}"
        )));
    }
    let n = rows;
    if n > ORACLE_MAX_N {
        return Err(Error::OracleLimitExceeded {
            n,
            max: ORACLE_MAX_N,
        });
    }
    let c = cost.matrix();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..n).permutations(n) {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum();
        if best.as_ref().map_or(true, |(_, b)| total < *b) {
            best = Some((perm, total));
        }
    }
    let (perm, total) = best.expect("n >= 1 has at least one permutation");
    let mut plan = DenseMatrix::zeros(n, n);
    for (i, &j) in perm.iter().enumerate() {
        plan.set(i, j, 1.0 / n as f64);
    }
    Ok((plan, total / n as f64))
}

fn require_converged(plan: &TransportPlan) -> Result<()> {
    if plan.is_converged() {
        Ok(())
    } else {
        Err(Error::NotConverged {
            violation: plan.marginal_violation,
            tolerance: plan.tolerance,
        })
    }
}

/// Envelope gradient `∂(⟨T,C⟩ − λh(T))/∂C = T*` at a converged plan.
pub fn ot_cost_gradient(plan: &TransportPlan) -> Result<DenseMatrix> {
    require_converged(plan)?;
    Ok(plan.plan.clone())
}

/// Exact gradient of the transport cost `⟨T*(C), C⟩` with respect to `C`.
///
/// Perturbing `C` moves the dual potentials `(f, g)` so that the marginals of
/// `T_ij = exp((f_i + g_j − C_ij)/λ)` stay fixed. Linearizing those
/// constraints gives a symmetric system in `(δf, δg)` with matrix
/// `H = [[diag(T1), T], [Tᵀ, diag(Tᵀ1)]]` and right-hand side the row and
/// column sums of `T ∘ δC`. Solving `H [α; γ]` against the row and column
/// sums of `T ∘ C` gives the adjoint, and
///
/// ```text
/// ∂⟨T,C⟩/∂C_ij = T_ij + T_ij (α_i + γ_j − C_ij) / λ
/// ```
///
/// `H` has the one-dimensional null space `(1, −1)`, removed by pinning the
/// last column potential.
pub fn transport_cost_gradient(plan: &TransportPlan, cost: &CostMatrix) -> Result<DenseMatrix> {
    require_converged(plan)?;
    let t = &plan.plan;
    let c = cost.matrix();
    if t.shape() != c.shape() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?} but cost is {:?}",
            t.shape(),
            c.shape()
        )));
    }
    let (m, n) = t.shape();
    let lambda = plan.lambda;
    let size = m + n - 1;
    if size == 0 {
        return Ok(t.clone());
    }

    let row_sums = t.row_sums();
    let col_sums = t.col_sums();
    let mut h = DMatrix::<f64>::zeros(size, size);
    let mut w = DVector::<f64>::zeros(size);
    for i in 0..m {
        h[(i, i)] = row_sums[i];
        for j in 0..n {
            let tc = t.get(i, j) * c.get(i, j);
            w[i] += tc;
            if j + 1 < n {
                h[(i, m + j)] = t.get(i, j);
                h[(m + j, i)] = t.get(i, j);
                w[m + j] += tc;
            }
        }
    }
    for j in 0..n.saturating_sub(1) {
        h[(m + j, m + j)] = col_sums[j];
    }
    let x = h
        .lu()
        .solve(&w)
        .ok_or_else(|| Error::NonFinite("singular plan sensitivity system".into()))?;

    let mut grad = DenseMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            let gamma = if j + 1 < n { x[m + j] } else { 0.0 };
            let tij = t.get(i, j);
            grad.set(i, j, tij + tij * (x[i] + gamma - c.get(i, j)) / lambda);
        }
    }
    if grad.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("transport cost gradient".into()));
    }
    Ok(grad)
}
