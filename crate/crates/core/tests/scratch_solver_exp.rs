use std::time::Instant;
use stadv_core::attacks::*;
use stadv_core::data::{load_mnist, load_weights};
use stadv_core::losses::{total_objective, AttackGoal, AttackObjectiveConfig, ObjectiveEval};
use stadv_core::models::{argmax, build_model, DifferentiableModel};
use stadv_core::warp::{FlowField, Image};

struct Obj<'a> {
    x: &'a Image,
    g: &'a stadv_core::models::Classifier,
    cfg: AttackObjectiveConfig,
    best: Option<(Vec<f64>, f64)>,
    evals: usize,
}

impl Obj<'_> {
    fn eval(&mut self, flat: &[f64], grad: bool) -> ObjectiveEval {
        self.evals += 1;
        let flow = FlowField::from_flat(28, 28, flat).unwrap();
        let e = total_objective(self.x, &flow, self.g, &self.cfg, grad).unwrap();
        if self.cfg.goal.satisfied_by(argmax(&e.logits))
            && self.best.as_ref().map_or(true, |(_, f)| e.flow < *f)
        {
            self.best = Some((flat.to_vec(), e.flow));
        }
        e
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() }

#[allow(clippy::too_many_arguments)]
fn lbfgs_variant(
    obj: &mut Obj, x0: &[f64], m_hist: usize, max_iter: usize, bb1: bool,
) -> (Vec<f64>, usize) {
    let mut x = x0.to_vec();
    let e = obj.eval(&x, true);
    let (mut fx, mut grad) = (e.value, e.grad.unwrap());
    let mut s_h: Vec<Vec<f64>> = vec![];
    let mut y_h: Vec<Vec<f64>> = vec![];
    let mut rho_h: Vec<f64> = vec![];
    let mut iters = 0;
    for _ in 0..max_iter {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= 1e-6 { break; }
        let m = s_h.len();
        let mut q = grad.clone();
        if m == 0 {
            for v in q.iter_mut() { *v = -*v; }
        } else {
            let mut alpha = vec![0.0; m];
            for i in (0..m).rev() {
                alpha[i] = rho_h[i] * dot(&s_h[i], &q);
                for (qv, yv) in q.iter_mut().zip(&y_h[i]) { *qv -= alpha[i] * yv; }
            }
            let last = m - 1;
            let yy = dot(&y_h[last], &y_h[last]);
            let sy = dot(&s_h[last], &y_h[last]);
            let ss = dot(&s_h[last], &s_h[last]);
            let gamma = if bb1 { if sy > 0.0 { ss / sy } else { 1.0 } }
                        else if yy > 0.0 { sy / yy } else { 1.0 };
            for v in q.iter_mut() { *v *= gamma; }
            for i in 0..m {
                let beta = rho_h[i] * dot(&y_h[i], &q);
                let c = alpha[i] - beta;
                for (qv, sv) in q.iter_mut().zip(&s_h[i]) { *qv += c * sv; }
            }
            for v in q.iter_mut() { *v = -*v; }
        }
        let mut p = q;
        let mut slope = dot(&grad, &p);
        if slope >= 0.0 { p = grad.iter().map(|v| -v).collect(); slope = -gnorm * gnorm; }
        let mut alpha_ls = 1.0;
        let mut acc = None;
        for _ in 0..20 {
            let cand: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha_ls * pi).collect();
            let fc = obj.eval(&cand, false).value;
            if fc.is_finite() && fc <= fx + 1e-4 * alpha_ls * slope { acc = Some(cand); break; }
            alpha_ls *= 0.5;
        }
        let Some(xn) = acc else { break; };
        let en = obj.eval(&xn, true);
        let (f_new, g_new) = (en.value, en.grad.unwrap());
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let ys = dot(&y, &s);
        if ys > 1e-10 {
            if s_h.len() == m_hist { s_h.remove(0); y_h.remove(0); rho_h.remove(0); }
            s_h.push(s); y_h.push(y); rho_h.push(1.0 / ys);
        } else { s_h.clear(); y_h.clear(); rho_h.clear(); }
        x = xn; fx = f_new; grad = g_new; iters += 1;
    }
    (x, iters)
}

#[test]
#[ignore]
fn solver_matrix() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let test_data = load_mnist(&dir, "test").unwrap();
    let mut g = build_model("A", 7).unwrap();
    load_weights(&mut g, std::path::Path::new("/tmp/model_a_5ep.weights")).unwrap();

    let picked = select_correctly_classified(&g, &test_data.images, &test_data.labels, 8, 7).unwrap();
    let labels: Vec<usize> = picked.iter().map(|&i| test_data.labels[i]).collect();
    let targets = assign_random_targets(&labels, 10, 8);

    for (m_hist, max_iter, bb1) in [
        (10usize, 300usize, false),
        (10, 300, true),
        (40, 300, false),
        (40, 300, true),
        (40, 600, true),
    ] {
        let t0 = Instant::now();
        let mut wins = 0;
        let mut total_evals = 0;
        for (k, &idx) in picked.iter().enumerate() {
            let goal = AttackGoal::Targeted { target: targets[k], true_class: labels[k] };
            let cfg = AttackObjectiveConfig::new(0.05, 0.0, goal).unwrap();
            let mut obj = Obj { x: &test_data.images[idx], g: &g, cfg, best: None, evals: 0 };
            let flat0 = vec![0.0; 2 * 28 * 28];
            let (sol, _) = lbfgs_variant(&mut obj, &flat0, m_hist, max_iter, bb1);
            let flow = match &obj.best { Some((b, _)) => FlowField::from_flat(28, 28, b).unwrap(),
                                          None => FlowField::from_flat(28, 28, &sol).unwrap() };
            let adv = stadv_core::warp::bilinear_warp(&test_data.images[idx], &flow).unwrap();
            if goal.satisfied_by(g.predict(&adv).unwrap()) { wins += 1; }
            total_evals += obj.evals;
        }
        println!(
            "hist={m_hist} iters={max_iter} bb1={bb1}: success {wins}/8, avg evals {}, {:.1}s",
            total_evals / 8, t0.elapsed().as_secs_f64()
        );
    }
}
