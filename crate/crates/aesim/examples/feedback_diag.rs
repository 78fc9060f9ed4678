//! Dev diagnostic: imitation quality of the trained feedback policy in a
//! run directory. Usage: feedback_diag <config.toml>

use aesim::commands::RunPaths;
use aesim::config::ExperimentConfig;
use aesim::feedback::position_trend;
use aesim::metrics::{bias_probe, ProbeMode};
use aesim::rng::derive_seed;

fn main() {
    let config_path = std::env::args().nth(1).expect("usage: feedback_diag <config.toml>");
    let config = ExperimentConfig::load(config_path.as_ref()).unwrap();
    let paths = RunPaths::new(&config.out_dir);
    let catalog = aesim::logio::load_catalog(&paths.catalog()).unwrap();
    let oracle: aesim::world::OracleUserModel =
        serde_json::from_str(&std::fs::read_to_string(paths.oracle()).unwrap()).unwrap();
    let policy = aesim::commands::load_policy(&paths).unwrap();
    let test = aesim::logio::load_sessions(&paths.test_sessions()).unwrap();

    let k = config.data.pipeline.rerank_n;
    let learned = position_trend(&policy, &catalog, &test, k).unwrap();
    let truth = position_trend(&oracle, &catalog, &test, k).unwrap();
    let cr1 = truth.purchase[0];
    let max_dev = learned
        .purchase
        .iter()
        .zip(&truth.purchase)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("cr1 {cr1:.5} tol {:.5} max_purchase_dev {max_dev:.5}", 0.05 * cr1);
    for &pos in &[1usize, 2, 5, 10, 25, 50] {
        if pos <= k {
            println!(
                "  pos {pos}: policy p/c {:.4}/{:.4} oracle {:.4}/{:.4}",
                learned.purchase[pos - 1],
                learned.click[pos - 1],
                truth.purchase[pos - 1],
                truth.click[pos - 1]
            );
        }
    }
    // In-distribution check: policy trend and empirical action rates on the
    // expert (training) displays.
    let expert = aesim::commands::load_expert_sessions(&paths).unwrap();
    let on_expert = position_trend(&policy, &catalog, &expert, k).unwrap();
    let oracle_on_expert = position_trend(&oracle, &catalog, &expert, k).unwrap();
    let mut emp_p = vec![0.0f64; k];
    let mut emp_c = vec![0.0f64; k];
    let mut emp_n = vec![0.0f64; k];
    for s in &expert {
        for (t, &a) in s.trace.iter().take(k).enumerate() {
            let a = a.code() as usize;
            if a == 2 {
                emp_p[t] += 1.0;
            }
            if a >= 1 {
                emp_c[t] += 1.0;
            }
            emp_n[t] += 1.0;
        }
    }
    for &pos in &[1usize, 2, 5, 10, 25, 50] {
        if pos <= k {
            let t = pos - 1;
            println!(
                "  expert pos {pos}: policy p {:.4} oracle p {:.4} empirical p {:.4} (n {})",
                on_expert.purchase[t],
                oracle_on_expert.purchase[t],
                emp_p[t] / emp_n[t].max(1.0),
                emp_n[t] as u64
            );
        }
    }

    // Monte Carlo trend: sampled-history rollouts instead of the soft
    // expected-history propagation.
    let mut mc = vec![0.0f64; k];
    let mut counts = vec![0.0f64; k];
    let samples = 16;
    for (i, s) in test.iter().enumerate() {
        for r in 0..samples {
            let roll = policy
                .rollout(
                    &catalog,
                    &s.user_vec,
                    s.query,
                    &s.display,
                    derive_seed(17 + i as u64 * 131 + r, "mc"),
                )
                .unwrap();
            for (t, p) in roll.probs.iter().take(k).enumerate() {
                mc[t] += p[2];
                counts[t] += 1.0;
            }
        }
    }
    let mut mc_dev = 0.0f64;
    for t in 0..k {
        if counts[t] > 0.0 {
            mc[t] /= counts[t];
            mc_dev = mc_dev.max((mc[t] - truth.purchase[t]).abs());
        }
    }
    println!("mc max_purchase_dev {mc_dev:.5}");
    for &pos in &[1usize, 2, 5, 10, 25, 50] {
        if pos <= k {
            println!("  mc pos {pos}: {:.4} vs oracle {:.4}", mc[pos - 1], truth.purchase[pos - 1]);
        }
    }

    let table = bias_probe(
        &policy,
        &catalog,
        &test[..config.probe.n_sessions.min(test.len())],
        config.probe.max_k,
        ProbeMode::Expected,
        config.probe.clip_floor,
        derive_seed(17, "diag-probe"),
    )
    .unwrap();
    for &kk in &[2usize, 5, 10, 25, 50] {
        if kk <= config.probe.max_k {
            let truth = oracle.examination_at(kk);
            println!(
                "  probe k={kk}: {:.4} vs {:.4} (dev {:.4})",
                table.p[kk - 1],
                truth,
                (table.p[kk - 1] - truth).abs()
            );
        }
    }
}
