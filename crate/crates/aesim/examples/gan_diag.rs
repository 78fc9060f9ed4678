//! Dev diagnostic: criterion-style virtual-user fidelity numbers for the
//! generator in a run directory. Usage: gan_diag <config.toml> [n]

use aesim::commands::RunPaths;
use aesim::config::ExperimentConfig;
use aesim::rng::{derive_seed, derive_seed_indexed};
use aesim::tensor::Tensor;
use aesim::user_gan::{encode_real, sample_width, two_sample_diagnostic};

fn main() {
    let config_path = std::env::args().nth(1).expect("usage: gan_diag <config.toml> [n]");
    let n: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(50_000);
    let config = ExperimentConfig::load(config_path.as_ref()).unwrap();
    let paths = RunPaths::new(&config.out_dir);
    let oracle: aesim::world::OracleUserModel =
        serde_json::from_str(&std::fs::read_to_string(paths.oracle()).unwrap()).unwrap();
    let gan = aesim::commands::load_user_gan(&paths).unwrap();
    let width = sample_width(gan.user_dim, gan.n_categories);
    let smoothing = config.gan.label_smoothing;

    let seed = derive_seed(17, "acceptance-fidelity");
    let mut real = Vec::with_capacity(n * width);
    for i in 0..n {
        let (u, q) = oracle.sample_user(derive_seed_indexed(seed, "real", i as u64));
        real.extend(encode_real(&u, q, gan.n_categories, smoothing));
    }
    let fakes = gan.sample_virtual_users(n, derive_seed(seed, "fake")).unwrap();
    let mut fake = Vec::with_capacity(n * width);
    for (u, q) in &fakes {
        fake.extend(encode_real(u, *q, gan.n_categories, smoothing));
    }
    let moments = |data: &[f64], d: usize| -> (f64, f64) {
        let mean = data.iter().skip(d).step_by(width).sum::<f64>() / n as f64;
        let var = data.iter().skip(d).step_by(width).map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let mut worst = 0.0f64;
    for d in 0..width {
        let (rm, rs) = moments(&real, d);
        let (fm, fs) = moments(&fake, d);
        let r = ((rm - fm).abs() / rs).max((rs - fs).abs() / rs);
        println!("dim {d:2}: real {rm:+.4}/{rs:.4} fake {fm:+.4}/{fs:.4} ratio {:.3}", r);
        worst = worst.max(r);
    }
    let m = 5000.min(n);
    let real_t = Tensor::matrix(m, width, real[..m * width].to_vec()).unwrap();
    let fake_t = Tensor::matrix(m, width, fake[..m * width].to_vec()).unwrap();
    let diag = two_sample_diagnostic(&real_t, &fake_t, derive_seed(seed, "probe")).unwrap();
    println!("worst moment ratio {worst:.3} (tol 0.10); two-sample auc {:.3} (tol 0.65)", diag.classifier_auc);
}
