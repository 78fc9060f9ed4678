//! Virtual-user generation: a WGAN with gradient penalty imitates the
//! oracle's joint (user vector, query) distribution.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gradient_penalty_grad, log_sigmoid, sigmoid, Activation, AdamConfig, AdamState, MlpSpec,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::{ParameterSet, Tensor};
use crate::world::OracleUserModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossMode {
    /// -E[D(x~)], the standard Wasserstein generator objective.
    Wgan,
    /// -E[log sigmoid(D(x~))], the saturating-resistant variant.
    LogSigmoid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct UserGanConfig {
    pub latent_dim: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lambda: f64,
    pub critic_steps: usize,
    pub batch_size: usize,
    /// Generator update count; each is preceded by `critic_steps` critic
    /// updates.
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Real query one-hots are scaled by this factor.
    pub label_smoothing: f64,
    pub generator_mode: GeneratorLossMode,
    pub seed: u64,
}

impl Default for UserGanConfig {
    fn default() -> Self {
        UserGanConfig {
            latent_dim: 16,
            generator_hidden: vec![128, 64, 32],
            critic_hidden: vec![128, 64, 32],
            lambda: 10.0,
            critic_steps: 5,
            batch_size: 64,
            steps: 200,
            learning_rate: 1e-4,
            beta1: 0.0,
            beta2: 0.9,
            label_smoothing: 0.9,
            generator_mode: GeneratorLossMode::Wgan,
            seed: 0,
        }
    }
}

impl UserGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::arg("lambda must be non-negative"));
        }
        if self.critic_steps == 0 || self.batch_size == 0 || self.latent_dim == 0 {
            return Err(Error::arg(
                "critic_steps, batch_size and latent_dim must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.label_smoothing) {
            return Err(Error::arg("label_smoothing must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Trained generator/critic pair over samples of width
/// user_dim + n_categories (user vector, query one-hot block).
#[derive(Debug, Clone)]
pub struct UserGan {
    pub generator_spec: MlpSpec,
    pub generator_params: ParameterSet,
    pub critic_spec: MlpSpec,
    pub critic_params: ParameterSet,
    pub user_dim: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
}

pub fn sample_width(user_dim: usize, n_categories: usize) -> usize {
    user_dim + n_categories
}

/// One real sample: user vector followed by a smoothed query one-hot.
pub fn encode_real(user_vec: &[f64], query: usize, n_categories: usize, smoothing: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(user_vec.len() + n_categories);
    out.extend_from_slice(user_vec);
    for c in 0..n_categories {
        out.push(if c == query { smoothing } else { 0.0 });
    }
    out
}

/// Decode a generated sample: the query is the argmax of the one-hot block,
/// ties resolved to the lowest category index.
pub fn decode_sample(sample: &[f64], user_dim: usize, n_categories: usize) -> Result<(Vec<f64>, usize)> {
    if sample.len() != user_dim + n_categories {
        return Err(Error::dim("decode_sample: width mismatch".to_string()));
    }
    let user = sample[..user_dim].to_vec();
    let block = &sample[user_dim..];
    let mut best = 0usize;
    for (c, &v) in block.iter().enumerate() {
        if v > block[best] {
            best = c;
        }
    }
    Ok((user, best))
}

/// Critic loss `E[D(fake)] - E[D(real)] + lambda * GP` and its exact
/// parameter gradient. The interpolation weights `eps` (one per batch row)
/// are an explicit input so the value is a deterministic function of its
/// arguments.
pub fn critic_loss(
    spec: &MlpSpec,
    params: &ParameterSet,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<(f64, ParameterSet)> {
    let batch = real.rows();
    if fake.rows() != batch || eps.len() != batch || real.cols() != fake.cols() {
        return Err(Error::dim("critic_loss: batch shape mismatch".to_string()));
    }
    let (fake_loss, fake_grads) = crate::nn::param_gradients(spec, params, fake, |out| {
        let mean = out.data().iter().sum::<f64>() / batch as f64;
        Ok((mean, Tensor::matrix(batch, 1, vec![1.0 / batch as f64; batch])?))
    })?;
    let (real_loss, real_grads) = crate::nn::param_gradients(spec, params, real, |out| {
        let mean = -out.data().iter().sum::<f64>() / batch as f64;
        Ok((mean, Tensor::matrix(batch, 1, vec![-1.0 / batch as f64; batch])?))
    })?;
    let width = real.cols();
    let mut x_hat = Tensor::zeros(vec![batch, width]);
    for b in 0..batch {
        let (r, f) = (real.row(b), fake.row(b));
        let out = &mut x_hat.data_mut()[b * width..(b + 1) * width];
        for i in 0..width {
            out[i] = eps[b] * r[i] + (1.0 - eps[b]) * f[i];
        }
    }
    let (penalty, gp_grads) = gradient_penalty_grad(spec, params, &x_hat, lambda)?;
    let mut grads = fake_grads;
    grads.axpy(1.0, &real_grads)?;
    grads.axpy(1.0, &gp_grads)?;
    Ok((fake_loss + real_loss + penalty, grads))
}

/// Generator loss for a fixed latent batch, with exact gradients through the
/// critic into the generator parameters.
pub fn generator_loss(
    gen_spec: &MlpSpec,
    gen_params: &ParameterSet,
    critic_spec: &MlpSpec,
    critic_params: &ParameterSet,
    latents: &Tensor,
    mode: GeneratorLossMode,
) -> Result<(f64, ParameterSet)> {
    let batch = latents.rows();
    let gen_cache = gen_spec.forward_cached(gen_params, latents)?;
    let fake = gen_cache.output();
    let critic_cache = critic_spec.forward_cached(critic_params, fake)?;
    let d = critic_cache.output();
    let mut loss = 0.0;
    let mut grad_d = Tensor::zeros(vec![batch, 1]);
    let scale = 1.0 / batch as f64;
    for b in 0..batch {
        let v = d.row(b)[0];
        match mode {
            GeneratorLossMode::Wgan => {
                loss += -v * scale;
                grad_d.data_mut()[b] = -scale;
            }
            GeneratorLossMode::LogSigmoid => {
                loss += -log_sigmoid(v) * scale;
                grad_d.data_mut()[b] = -sigmoid(-v) * scale;
            }
        }
    }
    let (_, dfake) = critic_cache.backward(critic_params, &grad_d)?;
    let (gen_grads, _) = gen_cache.backward(gen_params, &dfake)?;
    Ok((loss, gen_grads))
}

#[derive(Debug, Clone, Default)]
pub struct GanCurves {
    /// (generator step, critic loss after its inner updates).
    pub critic: Vec<(u64, f64)>,
    /// (generator step, generator loss).
    pub generator: Vec<(u64, f64)>,
}

fn standard_normal_batch(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("normal batch shape")
}

/// Alternating WGAN-GP training against real (user, query) samples from the
/// ground-truth oracle.
pub fn train_user_gan(
    oracle: &OracleUserModel,
    n_categories: usize,
    config: &UserGanConfig,
) -> Result<(UserGan, GanCurves)> {
    config.validate()?;
    let user_dim = oracle.config.user_dim;
    let width = sample_width(user_dim, n_categories);
    let mut gen_widths = vec![config.latent_dim];
    gen_widths.extend_from_slice(&config.generator_hidden);
    gen_widths.push(width);
    let gen_spec = MlpSpec::new(gen_widths, Activation::Relu, Activation::Identity)?;
    let mut critic_widths = vec![width];
    critic_widths.extend_from_slice(&config.critic_hidden);
    critic_widths.push(1);
    let critic_spec = MlpSpec::new(critic_widths, Activation::Relu, Activation::Identity)?;

    let mut init_rng = rng_from_seed(derive_seed(config.seed, "gan-init"));
    let mut gen_params = gen_spec.init_params(&mut init_rng);
    let mut critic_params = critic_spec.init_params(&mut init_rng);
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        ..AdamConfig::default()
    };
    let mut gen_adam = AdamState::new(adam.clone(), &gen_params);
    let mut critic_adam = AdamState::new(adam, &critic_params);
    let mut data_rng = rng_from_seed(derive_seed(config.seed, "gan-data"));
    let mut real_index = 0u64;
    let mut curves = GanCurves::default();

    let real_batch = |rng: &mut Rng, index: &mut u64| -> Tensor {
        let mut data = Vec::with_capacity(config.batch_size * width);
        for _ in 0..config.batch_size {
            let (user, query) =
                oracle.sample_user(derive_seed(derive_seed(config.seed, "gan-real"), &index.to_string()));
            *index += 1;
            data.extend(encode_real(&user, query, n_categories, config.label_smoothing));
        }
        let _ = rng;
        Tensor::matrix(config.batch_size, width, data).expect("real batch shape")
    };

    for step in 0..config.steps as u64 {
        let mut last_critic_loss = 0.0;
        for _ in 0..config.critic_steps {
            let real = real_batch(&mut data_rng, &mut real_index);
            let z = standard_normal_batch(config.batch_size, config.latent_dim, &mut data_rng);
            let fake = gen_spec.forward(&gen_params, &z)?;
            let eps: Vec<f64> = (0..config.batch_size)
                .map(|_| data_rng.gen_range(0.0..1.0))
                .collect();
            let (loss, grads) =
                critic_loss(&critic_spec, &critic_params, &real, &fake, &eps, config.lambda)?;
            critic_adam.step(&mut critic_params, &grads)?;
            last_critic_loss = loss;
        }
        let z = standard_normal_batch(config.batch_size, config.latent_dim, &mut data_rng);
        let (gen_loss_v, gen_grads) = generator_loss(
            &gen_spec,
            &gen_params,
            &critic_spec,
            &critic_params,
            &z,
            config.generator_mode,
        )?;
        gen_adam.step(&mut gen_params, &gen_grads)?;
        curves.critic.push((step, last_critic_loss));
        curves.generator.push((step, gen_loss_v));
    }

    Ok((
        UserGan {
            generator_spec: gen_spec,
            generator_params: gen_params,
            critic_spec,
            critic_params,
            user_dim,
            n_categories,
            latent_dim: config.latent_dim,
        },
        curves,
    ))
}

impl UserGan {
    /// Generate `n` virtual (user vector, query) pairs.
    pub fn sample_virtual_users(&self, n: usize, seed: u64) -> Result<Vec<(Vec<f64>, usize)>> {
        let mut rng = rng_from_seed(derive_seed(seed, "virtual-users"));
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let z = standard_normal_batch(1, self.latent_dim, &mut rng);
            let x = self.generator_spec.forward(&self.generator_params, &z)?;
            out.push(decode_sample(x.row(0), self.user_dim, self.n_categories)?);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Two-sample diagnostic

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoSampleDiagnostic {
    /// Held-out AUC of a classifier separating real from generated samples;
    /// 0.5 means indistinguishable.
    pub classifier_auc: f64,
    pub mean_abs_delta: Vec<f64>,
    pub std_abs_delta: Vec<f64>,
}

fn column_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = x.as_matrix_shape();
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x.row(r)[c] - mean[c];
            var[c] += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / rows as f64).sqrt())
        .collect();
    (mean, std)
}

/// Trains a small held-out classifier on real-vs-generated samples and
/// reports its test AUC plus per-feature moment gaps. Errors if the class
/// ratio exceeds 10:1 either way.
pub fn two_sample_diagnostic(
    real: &Tensor,
    fake: &Tensor,
    seed: u64,
) -> Result<TwoSampleDiagnostic> {
    let (nr, width) = real.as_matrix_shape();
    let (nf, wf) = fake.as_matrix_shape();
    if width != wf {
        return Err(Error::dim("two_sample: width mismatch".to_string()));
    }
    if nr > 10 * nf || nf > 10 * nr {
        return Err(Error::arg(format!(
            "two_sample: class imbalance {nr}:{nf} exceeds 10:1"
        )));
    }
    let (mr, sr) = column_stats(real);
    let (mf, sf) = column_stats(fake);
    let mean_abs_delta = mr.iter().zip(&mf).map(|(a, b)| (a - b).abs()).collect();
    let std_abs_delta = sr.iter().zip(&sf).map(|(a, b)| (a - b).abs()).collect();

    // Pool, shuffle, split in half: train a logistic probe, score held-out.
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(nr + nf);
    for r in 0..nr {
        rows.push((real.row(r).to_vec(), 1.0));
    }
    for r in 0..nf {
        rows.push((fake.row(r).to_vec(), 0.0));
    }
    use rand::seq::SliceRandom;
    let mut rng = rng_from_seed(derive_seed(seed, "two-sample"));
    rows.shuffle(&mut rng);
    let half = rows.len() / 2;
    let spec = MlpSpec::new(vec![width, 16, 1], Activation::Tanh, Activation::Identity)?;
    let mut params = spec.init_params(&mut rng);
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        &params,
    );
    let train = &rows[..half];
    let input = Tensor::matrix(
        train.len(),
        width,
        train.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
    )?;
    for _ in 0..200 {
        let (_, grads) = crate::nn::param_gradients(&spec, &params, &input, |out| {
            let n = train.len() as f64;
            let mut loss = 0.0;
            let mut grad = Tensor::zeros(vec![train.len(), 1]);
            for (b, (_, y)) in train.iter().enumerate() {
                let s = out.row(b)[0];
                loss += -(y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)) / n;
                grad.data_mut()[b] = (sigmoid(s) - y) / n;
            }
            Ok((loss, grad))
        })?;
        adam.step(&mut params, &grads)?;
    }
    let test = &rows[half..];
    let test_input = Tensor::matrix(
        test.len(),
        width,
        test.iter().flat_map(|(x, _)| x.iter().copied()).collect(),
    )?;
    let scores = spec.forward(&params, &test_input)?;
    let labels: Vec<f64> = test.iter().map(|(_, y)| *y).collect();
    let classifier_auc = crate::metrics::auc(scores.data(), &labels)?;
    Ok(TwoSampleDiagnostic {
        classifier_auc,
        mean_abs_delta,
        std_abs_delta,
    })
}
