//! Attack drivers: the flow-field attack (stadv), its tau grid search and
//! blur-adaptive variant, and the pixel-space baselines (FGSM, C&W, PGD).

use std::time::Instant;

use rand::Rng;

use crate::defense::BlurredModel;
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss, adv_loss_untargeted, grid_normalization, total_objective, AttackGoal,
    AttackObjectiveConfig,
};
use crate::metrics::{flow_l2_metric, flow_tv_metric};
use crate::models::{argmax, batch_tensor, Classifier, DifferentiableModel};
use crate::solver::{lbfgs_minimize, LbfgsConfig, Objective, SolveTrace, Termination};
use crate::tensor::Tape;
use crate::warp::{bilinear_warp, FlowField, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Stadv,
    Fgsm,
    Cw,
    Pgd,
    StadvAdaptive,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Stadv => "stadv",
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Cw => "cw",
            AttackMethod::Pgd => "pgd",
            AttackMethod::StadvAdaptive => "stadv-adaptive",
        }
    }
}

/// Everything persisted about one attack on one input.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub method: AttackMethod,
    pub goal: AttackGoal,
    pub adversarial: Image,
    /// Present for flow-based attacks only.
    pub flow: Option<FlowField>,
    /// True iff a fresh predict() on `adversarial` meets the goal.
    pub success: bool,
    /// Objective value at the start plus every accepted solver step.
    pub objective_trace: Vec<f64>,
    pub flow_tv: Option<f64>,
    pub flow_l2: Option<f64>,
    pub tau: Option<f64>,
    pub wall_ms: f64,
    /// Position of the input in the evaluation set, when attacked in batch.
    pub input_index: Option<usize>,
}

/// Flow magnitude metrics measured on the normalized sampling grid, the
/// scale the published evaluation tables use (flow storage stays in pixels).
pub fn flow_metrics_on_grid(flow: &FlowField) -> (f64, f64) {
    let (su, sv) = grid_normalization(flow.height, flow.width);
    let scaled = FlowField {
        height: flow.height,
        width: flow.width,
        du: flow.du.iter().map(|v| v * su).collect(),
        dv: flow.dv.iter().map(|v| v * sv).collect(),
    };
    (flow_tv_metric(&scaled), flow_l2_metric(&scaled))
}

fn check_geometry<G: DifferentiableModel + ?Sized>(model: &G, x: &Image) -> Result<()> {
    let (h, w, c) = model.input_geometry();
    if (x.height, x.width, x.channels) != (h, w, c) {
        return Err(Error::ShapeMismatch {
            op: "attack input",
            left: vec![x.height, x.width, x.channels],
            right: vec![h, w, c],
        });
    }
    Ok(())
}

// ── stadv ───────────────────────────────────────────────────────────

/// Joint objective over the flattened flow, tracking the best goal-satisfying
/// iterate seen at any evaluation (the margin loss plateaus at its kappa
/// floor, so the final solver point can sit just on the wrong side of the
/// decision boundary while an earlier probe crossed it).
struct StadvObjective<'a, G: DifferentiableModel + ?Sized> {
    x: &'a Image,
    model: &'a G,
    cfg: AttackObjectiveConfig,
    best: Option<(Vec<f64>, f64)>,
}

impl<G: DifferentiableModel + ?Sized> StadvObjective<'_, G> {
    fn track(&mut self, flat: &[f64], logits: &[f64], flow_value: f64) {
        if self.cfg.goal.satisfied_by(argmax(logits))
            && self.best.as_ref().is_none_or(|(_, f)| flow_value < *f)
        {
            self.best = Some((flat.to_vec(), flow_value));
        }
    }

    fn flow_of(&self, flat: &[f64]) -> FlowField {
        FlowField::from_flat(self.x.height, self.x.width, flat).expect("solver preserves dimension")
    }
}

impl<G: DifferentiableModel + ?Sized> Objective for StadvObjective<'_, G> {
    fn value(&mut self, flat: &[f64]) -> Result<f64> {
        let flow = self.flow_of(flat);
        let eval = total_objective(self.x, &flow, self.model, &self.cfg, false)?;
        self.track(flat, &eval.logits, eval.flow);
        Ok(eval.value)
    }

    fn value_grad(&mut self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let flow = self.flow_of(flat);
        let eval = total_objective(self.x, &flow, self.model, &self.cfg, true)?;
        self.track(flat, &eval.logits, eval.flow);
        Ok((eval.value, eval.grad.expect("gradient requested")))
    }
}

/// Optimize a zero-initialized flow field against the joint objective and
/// return the warped result. Solver breakdowns surface as a failed outcome,
/// not an error.
pub fn stadv_attack<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    cfg: &AttackObjectiveConfig,
    solver_cfg: &LbfgsConfig,
) -> Result<AttackOutcome> {
    let start = Instant::now();
    check_geometry(model, x)?;

    let mut objective = StadvObjective {
        x,
        model,
        cfg: *cfg,
        best: None,
    };
    let flat0 = vec![0.0; 2 * x.height * x.width];
    let (solution, trace) = match lbfgs_minimize(&mut objective, &flat0, solver_cfg) {
        Ok(r) => r,
        Err(_) => (
            flat0.clone(),
            SolveTrace {
                iterations: 0,
                objective_values: vec![],
                final_grad_norm: f64::NAN,
                termination: Termination::LineSearchFailure,
            },
        ),
    };

    let mut flow = objective.flow_of(&solution);
    let mut adversarial = bilinear_warp(x, &flow)?;
    let mut success = cfg.goal.satisfied_by(model.predict(&adversarial)?);
    if !success {
        if let Some((best_flat, _)) = objective.best.take() {
            flow = objective.flow_of(&best_flat);
            adversarial = bilinear_warp(x, &flow)?;
            success = cfg.goal.satisfied_by(model.predict(&adversarial)?);
        }
    }

    let (flow_tv, flow_l2) = flow_metrics_on_grid(&flow);
    Ok(AttackOutcome {
        method: AttackMethod::Stadv,
        goal: cfg.goal,
        success,
        flow_tv: Some(flow_tv),
        flow_l2: Some(flow_l2),
        flow: Some(flow),
        adversarial,
        objective_trace: trace.objective_values,
        tau: Some(cfg.tau),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        input_index: None,
    })
}

/// Ten log-spaced tau values spanning the published search range.
pub fn default_tau_grid() -> Vec<f64> {
    let (lo, hi, k) = (0.0005f64, 0.05f64, 10);
    (0..k)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

/// Run the stadv attack once per tau, descending, and return the first
/// success (the largest tau that still fools the model gives the smallest
/// deformation). If every tau fails, the failure with the lowest adversarial
/// margin is returned.
pub fn stadv_attack_gridsearch<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    goal: AttackGoal,
    kappa: f64,
    tau_grid: &[f64],
    solver_cfg: &LbfgsConfig,
) -> Result<AttackOutcome> {
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    let mut taus = tau_grid.to_vec();
    taus.sort_by(|a, b| b.partial_cmp(a).expect("finite taus"));

    let mut best_failure: Option<(f64, AttackOutcome)> = None;
    for tau in taus {
        let cfg = AttackObjectiveConfig::new(tau, kappa, goal)?;
        let outcome = stadv_attack(model, x, &cfg, solver_cfg)?;
        if outcome.success {
            return Ok(outcome);
        }
        let logits = model.logits_image(&outcome.adversarial)?;
        let margin = match goal {
            AttackGoal::Targeted { target, .. } => adv_loss(&logits, target, kappa)?,
            AttackGoal::Untargeted { true_class } => adv_loss_untargeted(&logits, true_class, kappa)?,
        };
        if best_failure.as_ref().is_none_or(|(m, _)| margin < *m) {
            best_failure = Some((margin, outcome));
        }
    }
    Ok(best_failure.expect("at least one tau ran").1)
}

/// Flow-field attack against the classifier with the 3x3 mean blur composed
/// in front; success is judged on the blur-then-classify pipeline.
pub fn adaptive_blur_attack(
    model: &Classifier,
    x: &Image,
    cfg: &AttackObjectiveConfig,
    solver_cfg: &LbfgsConfig,
) -> Result<AttackOutcome> {
    let composite = BlurredModel { inner: model };
    let mut outcome = stadv_attack(&composite, x, cfg, solver_cfg)?;
    outcome.method = AttackMethod::StadvAdaptive;
    Ok(outcome)
}

// ── pixel-space baselines ───────────────────────────────────────────

/// Cross-entropy gradient with respect to the input image.
fn input_gradient<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    label: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut leaf = batch_tensor(&[x])?;
    leaf.requires_grad = true;
    let xv = tape.leaf(leaf);
    let logits = model.forward_eval(&mut tape, xv)?;
    let loss = tape.cross_entropy(logits, &[label])?;
    tape.backward(loss)?;
    Ok(tape.grad(xv).expect("input gradient populated").to_vec())
}

fn signum(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step of size epsilon, clipped to the pixel range.
/// Untargeted ascends the true-class loss; targeted descends the
/// target-class loss.
pub fn fgsm_attack<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    goal: AttackGoal,
    epsilon: f64,
) -> Result<AttackOutcome> {
    let start = Instant::now();
    check_geometry(model, x)?;
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let (label, sign) = match goal {
        AttackGoal::Untargeted { true_class } => (true_class, 1.0),
        AttackGoal::Targeted { target, .. } => (target, -1.0),
    };
    let grad = input_gradient(model, x, label)?;
    let (lo, hi) = model.pixel_range();
    let mut adversarial = x.clone();
    for (v, g) in adversarial.data.iter_mut().zip(&grad) {
        *v = (*v + sign * epsilon * signum(*g)).clamp(lo, hi);
    }
    let success = goal.satisfied_by(model.predict(&adversarial)?);
    Ok(AttackOutcome {
        method: AttackMethod::Fgsm,
        goal,
        adversarial,
        flow: None,
        success,
        objective_trace: vec![],
        flow_tv: None,
        flow_l2: None,
        tau: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        input_index: None,
    })
}

/// Iterated signed-gradient steps projected onto the epsilon ball around x
/// and the pixel range. `random_start` samples the initial point uniformly
/// from the ball (the usual training adversary); disabled it reduces to
/// iterated FGSM from x itself.
#[allow(clippy::too_many_arguments)]
pub fn pgd_attack<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    goal: AttackGoal,
    epsilon: f64,
    steps: usize,
    step_size: f64,
    random_start: bool,
    seed: u64,
) -> Result<AttackOutcome> {
    let start = Instant::now();
    check_geometry(model, x)?;
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("pgd needs at least one step".into()));
    }
    let (label, sign) = match goal {
        AttackGoal::Untargeted { true_class } => (true_class, 1.0),
        AttackGoal::Targeted { target, .. } => (target, -1.0),
    };
    let (lo, hi) = model.pixel_range();

    let mut cur = x.clone();
    if random_start {
        let mut rng = crate::rng(seed);
        for (v, &orig) in cur.data.iter_mut().zip(&x.data) {
            *v = (orig + rng.random_range(-epsilon..=epsilon)).clamp(lo, hi);
        }
    }
    for _ in 0..steps {
        let grad = input_gradient(model, &cur, label)?;
        for ((v, g), &orig) in cur.data.iter_mut().zip(&grad).zip(&x.data) {
            let stepped = *v + sign * step_size * signum(*g);
            *v = stepped.clamp(orig - epsilon, orig + epsilon).clamp(lo, hi);
        }
    }
    let success = goal.satisfied_by(model.predict(&cur)?);
    Ok(AttackOutcome {
        method: AttackMethod::Pgd,
        goal,
        adversarial: cur,
        flow: None,
        success,
        objective_trace: vec![],
        flow_tv: None,
        flow_l2: None,
        tau: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        input_index: None,
    })
}

// ── C&W ─────────────────────────────────────────────────────────────

const CW_BINARY_SEARCH_ROUNDS: usize = 5;

/// Objective over the tanh-space variable w: ||delta||_2^2 + c * margin,
/// where x_adv = lo + (hi-lo)(tanh(w)+1)/2 stays in the pixel range by
/// construction. Tracks the successful evaluation with minimal ||delta||_2^2.
struct CwObjective<'a, G: DifferentiableModel + ?Sized> {
    x: &'a Image,
    model: &'a G,
    goal: AttackGoal,
    kappa: f64,
    c: f64,
    best: Option<(Vec<f64>, f64)>,
}

impl<G: DifferentiableModel + ?Sized> CwObjective<'_, G> {
    fn eval(&mut self, w: &[f64], with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (lo, hi) = (self.x.lo, self.x.hi);
        let n = self.x.data.len();
        let mut tape = Tape::new();
        let wv = tape.leaf_from(vec![n], w.to_vec(), with_grad)?;
        let t = tape.tanh(wv);
        let half = tape.mul_scalar(t, (hi - lo) / 2.0);
        let shifted = tape.add_scalar(half, (hi - lo) / 2.0 + lo);
        let batch = tape.reshape(shifted, vec![1, self.x.channels, self.x.height, self.x.width])?;
        let logits = tape_logits(self.model, &mut tape, batch)?;

        let (class, untargeted) = goal_margin_args(self.goal);
        let margin = tape.margin_loss(logits, class, self.kappa, untargeted)?;

        let orig = tape.leaf_from(vec![n], self.x.data.clone(), false)?;
        let delta = tape.sub(shifted, orig)?;
        let sq = tape.mul(delta, delta)?;
        let l2sq = tape.sum(sq);
        let weighted = tape.mul_scalar(margin, self.c);
        let total = tape.add(l2sq, weighted)?;

        let l2sq_value = tape.scalar_value(l2sq);
        let value = tape.scalar_value(total);
        if self.goal.satisfied_by(argmax(tape.data(logits)))
            && self.best.as_ref().is_none_or(|(_, b)| l2sq_value < *b)
        {
            self.best = Some((tape.data(shifted).to_vec(), l2sq_value));
        }
        if with_grad {
            tape.backward(total)?;
            Ok((value, Some(tape.grad(wv).expect("w gradient populated").to_vec())))
        } else {
            Ok((value, None))
        }
    }
}

fn goal_margin_args(goal: AttackGoal) -> (usize, bool) {
    match goal {
        AttackGoal::Targeted { target, .. } => (target, false),
        AttackGoal::Untargeted { true_class } => (true_class, true),
    }
}

fn tape_logits<G: DifferentiableModel + ?Sized>(
    model: &G,
    tape: &mut Tape,
    batch: crate::tensor::Var,
) -> Result<crate::tensor::Var> {
    model.forward_eval(tape, batch)
}

impl<G: DifferentiableModel + ?Sized> Objective for CwObjective<'_, G> {
    fn value(&mut self, w: &[f64]) -> Result<f64> {
        Ok(self.eval(w, false)?.0)
    }
    fn value_grad(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.eval(w, true)?;
        Ok((v, g.expect("gradient requested")))
    }
}

/// Margin-loss attack with an L2 penalty, optimized in tanh space by the
/// same L-BFGS solver, with a 5-round binary search over the margin weight c
/// selecting the successful result with minimal perturbation norm.
pub fn cw_attack<G: DifferentiableModel + ?Sized>(
    model: &G,
    x: &Image,
    goal: AttackGoal,
    kappa: f64,
    c_weight: f64,
    steps: usize,
) -> Result<AttackOutcome> {
    let start = Instant::now();
    check_geometry(model, x)?;
    if c_weight <= 0.0 {
        return Err(Error::InvalidArgument(format!("c must be > 0, got {c_weight}")));
    }
    let (lo, hi) = (x.lo, x.hi);
    let w0: Vec<f64> = x
        .data
        .iter()
        .map(|&v| {
            let t = (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            t.atanh()
        })
        .collect();

    let solver_cfg = LbfgsConfig {
        max_iterations: steps,
        ..Default::default()
    };

    let mut c = c_weight;
    let mut c_lo = 0.0f64;
    let mut c_hi: Option<f64> = None;
    let mut global_best: Option<(Vec<f64>, f64)> = None;
    let mut last_solution = w0.clone();
    let mut trace_values = vec![];

    for _ in 0..CW_BINARY_SEARCH_ROUNDS {
        let mut objective = CwObjective {
            x,
            model,
            goal,
            kappa,
            c,
            best: None,
        };
        match lbfgs_minimize(&mut objective, &w0, &solver_cfg) {
            Ok((solution, trace)) => {
                last_solution = solution;
                trace_values = trace.objective_values;
            }
            Err(_) => {}
        }
        let succeeded = objective.best.is_some();
        if let Some((img, l2)) = objective.best {
            if global_best.as_ref().is_none_or(|(_, b)| l2 < *b) {
                global_best = Some((img, l2));
            }
        }
        if succeeded {
            c_hi = Some(c);
            c = (c_lo + c) / 2.0;
        } else {
            c_lo = c;
            c = match c_hi {
                Some(h) => (c_lo + h) / 2.0,
                None => c * 10.0,
            };
        }
    }

    let data = match &global_best {
        Some((img, _)) => img.clone(),
        None => last_solution
            .iter()
            .map(|&w| lo + (hi - lo) * (w.tanh() + 1.0) / 2.0)
            .collect(),
    };
    let adversarial = Image {
        height: x.height,
        width: x.width,
        channels: x.channels,
        lo,
        hi,
        data,
    };
    let success = goal.satisfied_by(model.predict(&adversarial)?);

    Ok(AttackOutcome {
        method: AttackMethod::Cw,
        goal,
        adversarial,
        flow: None,
        success,
        objective_trace: trace_values,
        flow_tv: None,
        flow_l2: None,
        tau: None,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        input_index: None,
    })
}

// ── batch helpers ───────────────────────────────────────────────────

/// Eval-mode predictions for a set of images, batched for throughput.
pub fn predict_batch<G: DifferentiableModel + ?Sized>(model: &G, images: &[&Image]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut tape = Tape::new();
        let xv = tape.leaf(batch_tensor(chunk)?);
        let logits = model.forward_eval(&mut tape, xv)?;
        let cols = model.num_classes();
        preds.extend(tape.data(logits).chunks(cols).map(argmax));
    }
    Ok(preds)
}

/// Indices of up to `n` correctly classified samples, drawn in seeded
/// shuffled order. Attack success is measured only over such inputs.
pub fn select_correctly_classified<G: DifferentiableModel + ?Sized>(
    model: &G,
    images: &[Image],
    labels: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = crate::rng(seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut picked = Vec::with_capacity(n);
    for chunk in order.chunks(64) {
        if picked.len() >= n {
            break;
        }
        let imgs: Vec<&Image> = chunk.iter().map(|&i| &images[i]).collect();
        let preds = predict_batch(model, &imgs)?;
        for (&idx, pred) in chunk.iter().zip(preds) {
            if pred == labels[idx] {
                picked.push(idx);
                if picked.len() >= n {
                    break;
                }
            }
        }
    }
    Ok(picked)
}

/// One target per input, drawn uniformly from the classes other than the
/// true one.
pub fn assign_random_targets(true_labels: &[usize], num_classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = crate::rng(seed);
    true_labels
        .iter()
        .map(|&y| {
            let t = rng.random_range(0..num_classes - 1);
            if t >= y {
                t + 1
            } else {
                t
            }
        })
        .collect()
}
