//! Damped block-Jacobi Newton on the dual coefficients.
//!
//! Each tied block (emission, transition) is preconditioned by its own
//! Hessian block; steps are accepted by backtracking on the objective.
//! Progress is measured by the per-block improvement bound
//! `‖g_block‖² / (2λ)`, with `g_block` expressed in orthonormal coordinates of
//! the block's span and `λ = 1/σ²`. No point in the span can beat the current
//! objective by more than the summed bounds, so the sum doubles as the
//! stopping rule and as a pruning score for blocks.

use std::io::{self, Write};

use faer::linalg::solvers::Solve;
use nalgebra::{DMatrix, DVector};

use crate::chain::CliqueKind;
use crate::config::{Schedule, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::lowrank::{pivoted_cholesky, Tolerance};
use crate::objective::{BasisSet, BlockValues, Coefficients, Evaluation, GradientReport, Objective};

pub const BLOCKS: [CliqueKind; 2] = [CliqueKind::Emission, CliqueKind::Transition];

/// Halvings tried by the line search: steps `1, 1/2, ..., 2^-MAX_HALVINGS`.
pub const MAX_HALVINGS: i32 = 20;

/// Pivots of the emission Gram whose residual falls below this fraction of
/// the largest diagonal are treated as linearly dependent.
const METRIC_TOLERANCE: f64 = 1e-10;

/// Largest objective decrease obtainable from a block whose gradient, in
/// orthonormal coordinates of the block's span, is `gradient`.
pub fn improvement_bound(gradient: &[f64], config: &TrainConfig) -> f64 {
    let squared: f64 = gradient.iter().map(|g| g * g).sum();
    0.5 * squared / config.lambda()
}

/// Maps emission-coefficient gradients to orthonormal coordinates of the anchor span.
///
/// With `K ≈ L Lᵀ` from a pivoted Cholesky of the anchor Gram matrix, any
/// coefficient gradient `g = Aᵀv` satisfies `g = L z`, and `‖z‖` is the norm of
/// the projection of `v` onto the span. `z` is recovered from the pivot rows,
/// which form a lower-triangular system.
#[derive(Clone, Debug)]
struct SpanMetric {
    pivots: Vec<usize>,
    lower: DMatrix<f64>,
}

impl SpanMetric {
    fn new(gram: &DMatrix<f64>) -> Result<Self> {
        let n = gram.nrows();
        if n == 0 || gram.diagonal().max() <= 0.0 {
            return Ok(Self {
                pivots: Vec::new(),
                lower: DMatrix::zeros(0, 0),
            });
        }
        let f = pivoted_cholesky(n, |i, j| gram[(i, j)], n, Tolerance::Relative(METRIC_TOLERANCE))?;
        let r = f.rank();
        let lower = DMatrix::from_fn(r, r, |i, j| f.factor[(f.pivots[i], j)]);
        Ok(Self {
            pivots: f.pivots,
            lower,
        })
    }

    fn coordinates(&self, gradient: &DVector<f64>) -> DVector<f64> {
        let rhs = DVector::from_iterator(self.pivots.len(), self.pivots.iter().map(|&p| gradient[p]));
        self.lower
            .solve_lower_triangular(&rhs)
            .unwrap_or_else(|| DVector::zeros(self.pivots.len()))
    }
}

/// One line of the iteration log.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective at the iterate, before this iteration's step. The last record
    /// is the returned iterate and has no blocks.
    pub objective: f64,
    pub gradient_norms: BlockValues,
    pub bounds: BlockValues,
    pub blocks: Vec<CliqueKind>,
    /// Accepted step length; 0 when the iteration made no move.
    pub step: f64,
}

/// Optimizer bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    /// Objective at the start and after every accepted step.
    pub objective_trace: Vec<f64>,
    /// Improvement bounds at the current coefficients.
    pub block_bounds: BlockValues,
    pub converged: bool,
    /// Blocks whose last Newton step found no decrease.
    pub stalled: Vec<CliqueKind>,
    pub basis: BasisSet,
    pub log: Vec<IterationRecord>,
}

impl TrainState {
    pub fn new(basis: BasisSet) -> Self {
        Self {
            iteration: 0,
            objective_trace: Vec::new(),
            block_bounds: BlockValues::default(),
            converged: false,
            stalled: Vec::new(),
            basis,
            log: Vec::new(),
        }
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().copied()
    }

    /// Tab-separated iteration log with a header row.
    pub fn write_log<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "iteration\tobjective\tgrad_norm_emission\tgrad_norm_transition\tbound_emission\tbound_transition\tblocks\tstep"
        )?;
        for r in &self.log {
            let blocks: Vec<&str> = r
                .blocks
                .iter()
                .map(|b| match b {
                    CliqueKind::Emission => "emission",
                    CliqueKind::Transition => "transition",
                })
                .collect();
            writeln!(
                out,
                "{}\t{:.12e}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}",
                r.iteration,
                r.objective,
                r.gradient_norms.emission,
                r.gradient_norms.transition,
                r.bounds.emission,
                r.bounds.transition,
                if blocks.is_empty() { "-".to_owned() } else { blocks.join(",") },
                r.step
            )?;
        }
        Ok(())
    }
}

/// Result of one Newton step.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// The selected blocks already satisfy the tolerance.
    AlreadyOptimal,
    Accepted { step: f64, decrease: f64 },
    /// No step length decreased the objective; coefficients unchanged.
    Stalled,
}

/// Per-block bounds at one point.
#[derive(Clone, Debug)]
pub struct PruneReport {
    pub retained: Vec<CliqueKind>,
    pub bounds: BlockValues,
}

/// Newton machinery bound to one dataset, anchor set and config.
pub struct Trainer {
    objective: Objective,
    config: TrainConfig,
    metric: SpanMetric,
    active: Vec<CliqueKind>,
}

impl Trainer {
    pub fn new(data: &Dataset, basis: &BasisSet, spec: &KernelSpec, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            log::debug!("training on an empty dataset: only the prior term remains");
        }
        if basis.n_labels() != data.n_labels() {
            return Err(Error::dim(data.n_labels(), basis.n_labels()));
        }
        let objective = Objective::new(data, basis.anchors(), spec, config.sigma_squared)?;
        let metric = SpanMetric::new(objective.gram())?;
        Ok(Self {
            objective,
            config: config.clone(),
            metric,
            active: BLOCKS.to_vec(),
        })
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn active_blocks(&self) -> &[CliqueKind] {
        &self.active
    }

    /// Restricts optimization to `blocks`; the others stay frozen.
    pub fn set_active_blocks(&mut self, blocks: &[CliqueKind]) {
        self.active = BLOCKS.iter().copied().filter(|b| blocks.contains(b)).collect();
    }

    /// Improvement bounds of every block for a gradient.
    pub fn bounds(&self, gradient: &GradientReport) -> BlockValues {
        let z = self.metric.coordinates(&gradient.emission);
        BlockValues {
            emission: improvement_bound(z.as_slice(), &self.config),
            transition: improvement_bound(gradient.transition.as_slice(), &self.config),
        }
    }

    fn newton_direction(&self, eval: &Evaluation, gradient: &GradientReport, block: CliqueKind) -> Result<DVector<f64>> {
        let mut h = self.objective.hessian_block_at(eval, block);
        let dim = h.nrows();
        if dim == 0 {
            return Ok(DVector::zeros(0));
        }
        let ridge = self.config.damping * h.trace() / dim as f64;
        for i in 0..dim {
            h[(i, i)] += ridge;
        }
        let g = gradient.block(block);
        // faer's blocked factorization is several times faster than nalgebra's at these sizes
        let hf = faer::Mat::<f64>::from_fn(dim, dim, |i, j| h[(i, j)]);
        let llt = hf.llt(faer::Side::Lower).map_err(|_| {
            Error::Numerical(format!(
                "{block:?} Hessian block ({dim}x{dim}) is not positive definite after damping {ridge:.3e}; increase `damping`"
            ))
        })?;
        let rhs = faer::Mat::<f64>::from_fn(dim, 1, |i, _| g[i]);
        let x = llt.solve(&rhs);
        Ok(DVector::from_fn(dim, |i, _| -x[(i, 0)]))
    }

    /// One damped Newton step on `blocks` with backtracking. A no-op when the
    /// blocks' summed bound is already below the gradient tolerance.
    pub fn newton_step(&self, state: &mut TrainState, blocks: &[CliqueKind]) -> Result<StepOutcome> {
        self.step_with_threshold(state, blocks, self.config.gradient_tolerance)
    }

    fn step_with_threshold(
        &self,
        state: &mut TrainState,
        blocks: &[CliqueKind],
        threshold: f64,
    ) -> Result<StepOutcome> {
        let coeffs = state.basis.coefficients().clone();
        let eval = self.objective.evaluate(&coeffs)?;
        let gradient = self.objective.gradient_at(&coeffs, &eval);
        let bounds = self.bounds(&gradient);
        state.block_bounds = bounds;
        if state.objective_trace.is_empty() {
            state.objective_trace.push(eval.value);
        }

        let mut record = IterationRecord {
            iteration: state.iteration,
            objective: eval.value,
            gradient_norms: gradient.block_norms,
            bounds,
            blocks: blocks.to_vec(),
            step: 0.0,
        };

        let selected: f64 = blocks.iter().map(|&b| bounds.get(b)).sum();
        if blocks.is_empty() || selected < threshold {
            state.log.push(record);
            return Ok(StepOutcome::AlreadyOptimal);
        }

        let directions = blocks
            .iter()
            .map(|&b| Ok((b, self.newton_direction(&eval, &gradient, b)?)))
            .collect::<Result<Vec<_>>>()?;

        let mut step = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let mut trial = coeffs.clone();
            for (b, d) in &directions {
                trial.axpy_block(*b, step, d);
            }
            // A step can overflow the scores; treat that as a rejected step.
            if let Ok(value) = self.objective.value(&trial) {
                if value < eval.value {
                    state.basis.set_coefficients(trial)?;
                    state.objective_trace.push(value);
                    state.stalled.retain(|b| !blocks.contains(b));
                    record.step = step;
                    state.log.push(record);
                    return Ok(StepOutcome::Accepted {
                        step,
                        decrease: eval.value - value,
                    });
                }
            }
            step *= 0.5;
        }
        for b in blocks {
            if !state.stalled.contains(b) {
                state.stalled.push(*b);
            }
        }
        state.log.push(record);
        Ok(StepOutcome::Stalled)
    }

    /// Bounds at the current coefficients and the blocks that reach `threshold`.
    pub fn prune_blocks(&self, state: &TrainState, threshold: f64) -> Result<PruneReport> {
        let gradient = self.objective.gradient(state.basis.coefficients())?;
        let bounds = self.bounds(&gradient);
        let retained = BLOCKS.iter().copied().filter(|&b| bounds.get(b) >= threshold).collect();
        Ok(PruneReport { retained, bounds })
    }

    fn active_bound(&self, bounds: &BlockValues) -> f64 {
        self.active.iter().map(|&b| bounds.get(b)).sum()
    }

    /// Runs the schedule from the coefficients already in `state`.
    pub fn run(&self, mut state: TrainState, schedule: Schedule) -> Result<TrainState> {
        let mut consecutive_stalls = 0usize;
        loop {
            let gradient = self.objective.gradient(state.basis.coefficients())?;
            let bounds = self.bounds(&gradient);
            state.block_bounds = bounds;
            if state.objective_trace.is_empty() {
                state.objective_trace.push(self.objective.value(state.basis.coefficients())?);
            }
            if self.active_bound(&bounds) < self.config.gradient_tolerance {
                state.converged = true;
                break;
            }
            if state.iteration >= self.config.max_iterations || self.active.is_empty() {
                break;
            }
            let tol = self.config.gradient_tolerance;
            let (blocks, threshold) = match schedule {
                Schedule::JointBlockJacobi => (self.active.clone(), tol),
                Schedule::CyclicSubspace => {
                    // Each block gets an equal share of the tolerance; blocks
                    // already inside their share are skipped.
                    let k = self.active.len();
                    let share = tol / k as f64;
                    let start = state.iteration % k;
                    let pick = (0..k)
                        .map(|i| self.active[(start + i) % k])
                        .find(|&b| bounds.get(b) >= share)
                        .unwrap_or(self.active[start]);
                    (vec![pick], share)
                }
            };
            let outcome = self.step_with_threshold(&mut state, &blocks, threshold)?;
            state.iteration += 1;
            match outcome {
                StepOutcome::Accepted { .. } => consecutive_stalls = 0,
                StepOutcome::AlreadyOptimal | StepOutcome::Stalled => {
                    consecutive_stalls += 1;
                    let limit = match schedule {
                        Schedule::JointBlockJacobi => 1,
                        Schedule::CyclicSubspace => self.active.len(),
                    };
                    if consecutive_stalls >= limit {
                        log::debug!("no further decrease after {} iterations", state.iteration);
                        let gradient = self.objective.gradient(state.basis.coefficients())?;
                        state.block_bounds = self.bounds(&gradient);
                        state.converged =
                            self.active_bound(&state.block_bounds) < self.config.gradient_tolerance;
                        break;
                    }
                }
            }
        }
        let gradient = self.objective.gradient(state.basis.coefficients())?;
        state.log.push(IterationRecord {
            iteration: state.iteration,
            objective: self.objective.value(state.basis.coefficients())?,
            gradient_norms: gradient.block_norms,
            bounds: state.block_bounds,
            blocks: Vec::new(),
            step: 0.0,
        });
        Ok(state)
    }
}

/// Trains from zero coefficients on `basis`'s anchors.
pub fn train(
    data: &Dataset,
    basis: BasisSet,
    spec: &KernelSpec,
    config: &TrainConfig,
    schedule: Schedule,
) -> Result<TrainState> {
    data.require_labeled()?;
    if data.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    let trainer = Trainer::new(data, &basis, spec, config)?;
    let zero = Coefficients::zeros(basis.len(), basis.n_labels());
    let mut basis = basis;
    basis.set_coefficients(zero)?;
    trainer.run(TrainState::new(basis), schedule)
}

/// Retained blocks at `state` for a pruning threshold.
pub fn prune_blocks(
    data: &Dataset,
    state: &TrainState,
    spec: &KernelSpec,
    config: &TrainConfig,
    threshold: f64,
) -> Result<PruneReport> {
    Trainer::new(data, &state.basis, spec, config)?.prune_blocks(state, threshold)
}
