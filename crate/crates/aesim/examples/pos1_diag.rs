//! Dev diagnostic: policy vs oracle purchase probability for the item at
//! position 1 of each test list, plus correlation across sessions.
use aesim::commands::RunPaths;
use aesim::config::ExperimentConfig;

fn main() {
    let config_path = std::env::args().nth(1).expect("usage: pos1_diag <config.toml>");
    let config = ExperimentConfig::load(config_path.as_ref()).unwrap();
    let paths = RunPaths::new(&config.out_dir);
    let catalog = aesim::logio::load_catalog(&paths.catalog()).unwrap();
    let oracle: aesim::world::OracleUserModel =
        serde_json::from_str(&std::fs::read_to_string(paths.oracle()).unwrap()).unwrap();
    let policy = aesim::commands::load_policy(&paths).unwrap();
    let test = aesim::logio::load_sessions(&paths.test_sessions()).unwrap();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in test.iter().take(400) {
        let fb_p = policy
            .expected_probs(&catalog, &s.user_vec, s.query, &s.display)
            .unwrap();
        use aesim::metrics::ListEnvironment;
        let fb_o = oracle
            .expected_list_feedback(&catalog, &s.user_vec, s.query, &s.display)
            .unwrap();
        xs.push(fb_o.p_purchase[0]);
        ys.push(fb_p[0][2]);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0f64;
    let mut sxx = 0.0f64;
    let mut syy = 0.0f64;
    for (x, y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    println!(
        "pos1: oracle mean {:.4} policy mean {:.4} corr {:.3}",
        mx,
        my,
        sxy / (sxx.sqrt() * syy.sqrt() + 1e-12)
    );
    for (i, s) in test.iter().take(8).enumerate() {
        use aesim::metrics::ListEnvironment;
        let fb_o = oracle
            .expected_list_feedback(&catalog, &s.user_vec, s.query, &s.display)
            .unwrap();
        let fb_p = policy
            .expected_probs(&catalog, &s.user_vec, s.query, &s.display)
            .unwrap();
        let item = catalog.item(s.display[0]).unwrap();
        let feats = catalog.item_features(item);
        let fmax = feats.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!(
            "  s{i}: oracle {:.4} policy {:.4} |user| {:.2} max|item feat| {:.2}",
            fb_o.p_purchase[0],
            fb_p[0][2],
            s.user_vec.iter().map(|v| v * v).sum::<f64>().sqrt(),
            fmax
        );
    }
}
