use stadv_core::attacks::*;
use stadv_core::data::load_mnist;
use stadv_core::losses::{total_objective, AttackGoal, AttackObjectiveConfig};
use stadv_core::models::{build_model, DifferentiableModel};
use stadv_core::solver::LbfgsConfig;
use stadv_core::trainer::{train, TrainConfig};
use stadv_core::warp::{bilinear_warp, FlowField};

#[test]
#[ignore]
fn diag_attack() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let train_data = load_mnist(&dir, "train").unwrap();
    let test_data = load_mnist(&dir, "test").unwrap();
    let mut g = build_model("A", 7).unwrap();
    let cfg = TrainConfig { epochs: 1, seed: 7, ..Default::default() };
    train(&mut g, &train_data, &test_data, &cfg, &[]).unwrap();

    let picked = select_correctly_classified(&g, &test_data.images, &test_data.labels, 2, 7).unwrap();
    let idx = picked[0];
    let x = &test_data.images[idx];
    let y = test_data.labels[idx];
    let target = (y + 4) % 10;
    let goal = AttackGoal::Targeted { target, true_class: y };

    for (tau, iters) in [(0.05, 150usize), (0.05, 400), (0.005, 150)] {
        let ocfg = AttackObjectiveConfig::new(tau, 0.0, goal).unwrap();
        let solver = LbfgsConfig { max_iterations: iters, ..Default::default() };
        let out = stadv_attack(&g, x, &ocfg, &solver).unwrap();
        let n = out.objective_trace.len();
        let show: Vec<String> = out.objective_trace.iter().step_by((n/12).max(1)).map(|v| format!("{v:.3}")).collect();
        // recompute margin at the final flow
        let flow = out.flow.as_ref().unwrap();
        let eval = total_objective(x, flow, &g, &ocfg, false).unwrap();
        println!(
            "tau={tau} iters={} success={} adv={:.4} flowloss={:.4} trace=[{}]",
            n - 1, out.success, eval.adv, eval.flow, show.join(", ")
        );
        let warped = bilinear_warp(x, flow).unwrap();
        let logits = g.logits_image(&warped).unwrap();
        let mut idxs: Vec<usize> = (0..10).collect();
        idxs.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap());
        println!("  top logits: {:?} target={target} true={y}", &idxs[..3]);
    }
}
