//! Pipeline stage implementations behind the command-line interface.
//!
//! Each stage consumes upstream artifacts from the run directory, writes
//! its own outputs, and embeds schema version, config hash, and seeds in a
//! sidecar metadata file for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::feedback::{position_trend, train_gail, FeedbackPolicy};
use crate::ltr::{train_ranker, DlcmSpec, LossKind, PropensityTable, RankerModel};
use crate::metrics::{bias_probe, dynamic_score, evaluate_model, ProbeMode};
use crate::nn::MlpSpec;
use crate::pipeline::{prepare_dataset, IdentityReranker, Pipeline, RandomLinearScorer};
use crate::rng::{derive_seed, derive_seed_indexed};
use crate::tensor::{load_checkpoint, save_checkpoint, ParameterSet};
use crate::user_gan::{encode_real, train_user_gan, two_sample_diagnostic, UserGan};
use crate::world::{
    generate_catalog, log_sessions, Catalog, OracleUserModel, SessionLog, SCHEMA_VERSION,
};

/// Canonical artifact locations inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn catalog(&self) -> PathBuf {
        self.root.join("world/catalog.jsonl")
    }
    pub fn oracle(&self) -> PathBuf {
        self.root.join("world/oracle.json")
    }
    pub fn gan_generator(&self) -> PathBuf {
        self.root.join("user_gan/generator.aesm")
    }
    pub fn gan_critic(&self) -> PathBuf {
        self.root.join("user_gan/critic.aesm")
    }
    pub fn gan_meta(&self) -> PathBuf {
        self.root.join("user_gan/model.json")
    }
    pub fn gan_diagnostic(&self) -> PathBuf {
        self.root.join("user_gan/two_sample.json")
    }
    pub fn gan_curves(&self) -> PathBuf {
        self.root.join("user_gan/curves.csv")
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("feedback/policy.aesm")
    }
    pub fn policy_meta(&self) -> PathBuf {
        self.root.join("feedback/model.json")
    }
    pub fn discriminator(&self) -> PathBuf {
        self.root.join("feedback/discriminator.aesm")
    }
    pub fn expert_sessions(&self) -> PathBuf {
        self.root.join("feedback/expert.jsonl")
    }
    pub fn feedback_curves(&self) -> PathBuf {
        self.root.join("feedback/curves.csv")
    }
    pub fn stage1_sessions(&self) -> PathBuf {
        self.root.join("data/stage1.jsonl")
    }
    pub fn train_sessions(&self) -> PathBuf {
        self.root.join("data/train.jsonl")
    }
    pub fn test_sessions(&self) -> PathBuf {
        self.root.join("data/test.jsonl")
    }
    pub fn base_ranker(&self) -> PathBuf {
        self.root.join("data/base_ranker.aesm")
    }
    pub fn base_ranker_meta(&self) -> PathBuf {
        self.root.join("data/base_ranker.json")
    }
    pub fn propensity(&self) -> PathBuf {
        self.root.join("probe/propensity.csv")
    }
    pub fn ranker(&self, loss: LossKind, ips: bool) -> PathBuf {
        self.root
            .join(format!("rankers/{}_{}.aesm", loss.name(), ips_tag(ips)))
    }
    pub fn ranker_meta(&self, loss: LossKind, ips: bool) -> PathBuf {
        self.root
            .join(format!("rankers/{}_{}.json", loss.name(), ips_tag(ips)))
    }
    pub fn ranker_curve(&self, loss: LossKind, ips: bool) -> PathBuf {
        self.root
            .join(format!("rankers/{}_{}_curve.csv", loss.name(), ips_tag(ips)))
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval/results.csv")
    }
    pub fn report_table(&self) -> PathBuf {
        self.root.join("report/table.txt")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report/table.csv")
    }
    pub fn report_verdict(&self) -> PathBuf {
        self.root.join("report/metric_concordance.txt")
    }
    pub fn report_trend(&self) -> PathBuf {
        self.root.join("report/position_trend.csv")
    }
    pub fn report_features(&self) -> PathBuf {
        self.root.join("report/feature_deltas.csv")
    }
    pub fn meta(&self, stage: &str) -> PathBuf {
        self.root.join(format!("{stage}/meta.json"))
    }
}

pub fn ips_tag(ips: bool) -> &'static str {
    if ips {
        "ips"
    } else {
        "noips"
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StageMeta {
    schema_version: u32,
    stage: String,
    config_hash: String,
    master_seed: u64,
    stage_seed: u64,
}

fn write_meta(paths: &RunPaths, config: &ExperimentConfig, stage: &str, stage_seed: u64) -> Result<()> {
    let meta = StageMeta {
        schema_version: SCHEMA_VERSION,
        stage: stage.to_string(),
        config_hash: config.hash()?,
        master_seed: config.master_seed,
        stage_seed,
    };
    let path = paths.meta(stage);
    ensure_parent(&path)?;
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Contract guard: refuse to clobber existing primary outputs without
/// `--force`.
fn guard_overwrite(outputs: &[PathBuf], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    for p in outputs {
        if p.exists() {
            return Err(Error::arg(format!(
                "output {} exists; pass --force to overwrite",
                p.display()
            )));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(
        path,
        serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_world(paths: &RunPaths) -> Result<(Catalog, OracleUserModel)> {
    let catalog = crate::logio::load_catalog(&paths.catalog())
        .map_err(|e| missing_stage(e, "gen-world"))?;
    let oracle: OracleUserModel =
        read_json(&paths.oracle()).map_err(|e| missing_stage(e, "gen-world"))?;
    Ok((catalog, oracle))
}

fn missing_stage(e: Error, stage: &str) -> Error {
    match e {
        Error::MissingArtifact(m) => {
            Error::MissingArtifact(format!("{m} (run the {stage} stage first)"))
        }
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Stages

pub fn cmd_gen_world(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.catalog(), paths.oracle()], force)?;
    let seed = derive_seed(config.master_seed, "world");
    let catalog = generate_catalog(
        config.world.n_items,
        config.world.n_categories,
        &config.world.discrete_cardinalities,
        config.world.dense_width,
        seed,
    )?;
    let mut oracle_config = config.world.oracle.clone();
    oracle_config.seed = derive_seed(config.master_seed, "oracle");
    let oracle = OracleUserModel::generate(&catalog, oracle_config)?;
    ensure_parent(&paths.catalog())?;
    crate::logio::save_catalog(&paths.catalog(), &catalog)?;
    write_json(&paths.oracle(), &oracle)?;
    write_meta(&paths, config, "world", seed)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GanMeta {
    generator_spec: MlpSpec,
    critic_spec: MlpSpec,
    user_dim: usize,
    n_categories: usize,
    latent_dim: usize,
}

pub fn cmd_train_user_gen(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.gan_generator(), paths.gan_critic()], force)?;
    let (catalog, oracle) = load_world(&paths)?;
    let mut gan_config = config.gan.clone();
    gan_config.seed = derive_seed(config.master_seed, "user-gan");
    let (gan, curves) = train_user_gan(&oracle, catalog.n_categories, &gan_config)?;

    ensure_parent(&paths.gan_generator())?;
    save_checkpoint(&paths.gan_generator(), &gan.generator_params)?;
    save_checkpoint(&paths.gan_critic(), &gan.critic_params)?;
    write_json(
        &paths.gan_meta(),
        &GanMeta {
            generator_spec: gan.generator_spec.clone(),
            critic_spec: gan.critic_spec.clone(),
            user_dim: gan.user_dim,
            n_categories: gan.n_categories,
            latent_dim: gan.latent_dim,
        },
    )?;
    crate::logio::save_curve(&paths.gan_curves(), "step,critic_loss", &curves.critic)?;

    // Two-sample fidelity diagnostic against fresh oracle samples.
    let n = 2_000.min(50 * gan_config.batch_size);
    let diag_seed = derive_seed(config.master_seed, "gan-diagnostic");
    let width = crate::user_gan::sample_width(gan.user_dim, gan.n_categories);
    let mut real_data = Vec::with_capacity(n * width);
    for i in 0..n {
        let (user, query) =
            oracle.sample_user(crate::rng::derive_seed_indexed(diag_seed, "real", i as u64));
        real_data.extend(encode_real(&user, query, gan.n_categories, config.gan.label_smoothing));
    }
    let real = crate::tensor::Tensor::matrix(n, width, real_data)?;
    let fake_pairs = gan.sample_virtual_users(n, derive_seed(diag_seed, "fake"))?;
    let mut fake_data = Vec::with_capacity(n * width);
    for (user, query) in &fake_pairs {
        fake_data.extend(encode_real(user, *query, gan.n_categories, config.gan.label_smoothing));
    }
    let fake = crate::tensor::Tensor::matrix(n, width, fake_data)?;
    let diag = two_sample_diagnostic(&real, &fake, derive_seed(diag_seed, "classifier"))?;
    write_json(&paths.gan_diagnostic(), &diag)?;
    write_meta(&paths, config, "user_gan", gan_config.seed)?;
    Ok(())
}

pub fn load_user_gan(paths: &RunPaths) -> Result<UserGan> {
    let meta: GanMeta =
        read_json(&paths.gan_meta()).map_err(|e| missing_stage(e, "train-user-gen"))?;
    Ok(UserGan {
        generator_params: load_checkpoint(&paths.gan_generator())?,
        critic_params: load_checkpoint(&paths.gan_critic())?,
        generator_spec: meta.generator_spec,
        critic_spec: meta.critic_spec,
        user_dim: meta.user_dim,
        n_categories: meta.n_categories,
        latent_dim: meta.latent_dim,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyMeta {
    gru: crate::nn::GruSpec,
    head: MlpSpec,
    user_dim: usize,
    disc_spec: MlpSpec,
}

/// Logging scorer standing in for a production ranker: oracle relevance
/// plus per-(user, item) Gumbel noise at a fixed temperature. Temperature 0
/// serves greedily; higher temperatures interpolate toward random order.
struct NoisyOracleScorer<'a> {
    oracle: &'a OracleUserModel,
    temperature: f64,
    noise_seed: u64,
}

impl crate::pipeline::Scorer for NoisyOracleScorer<'_> {
    fn score_candidates(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        _query: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&idx| {
                let item = catalog.item_by_index(idx);
                let rel = self.oracle.relevance(catalog, user_vec, item);
                if self.temperature == 0.0 {
                    return Ok(rel);
                }
                let mut h = self.noise_seed ^ item.item_id.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                h ^= user_vec[0].to_bits().rotate_left(13);
                use rand::Rng as _;
                let mut rng = crate::rng::rng_from_seed(h);
                let u: f64 = rng.gen_range(1e-12..1.0);
                let gumbel = -(-u.ln()).ln();
                Ok(rel + self.temperature * gumbel)
            })
            .collect()
    }
}

pub fn cmd_train_feedback(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.policy(), paths.expert_sessions()], force)?;
    let (catalog, oracle) = load_world(&paths)?;
    let seed = derive_seed(config.master_seed, "feedback");

    // Expert demonstrations: the oracle interacting with a mixture of
    // logging pipelines. A single random-weight logger never places
    // top-affinity items at early positions, leaving the serving ranker's
    // display distribution outside the demonstrations' support; mixing in
    // noisy-greedy and greedy relevance loggers plus a trained click-ranker
    // surrogate covers it, the way production logs from a live ranker would.
    let identity = IdentityReranker;
    let mut expert = Vec::with_capacity(config.feedback.expert_sessions);
    let server_scorer = RandomLinearScorer::generate(
        &catalog,
        oracle.config.user_dim,
        derive_seed(seed, "expert-server"),
    );
    // Surrogate for the serving ranker: trained like the stage-2 base
    // ranker (clicks on random-logger lists), but from this stage's own
    // seed stream so the later dataset stage stays independent.
    let surrogate_stage1 = log_sessions(
        &oracle,
        &catalog,
        &Pipeline {
            config: config.data.pipeline.clone(),
            ranker: &server_scorer,
            reranker: &identity,
        },
        config.data.n_stage1,
        derive_seed(seed, "surrogate-stage1"),
    )?;
    let surrogate = crate::ltr::train_base_ranker(
        &catalog,
        &surrogate_stage1,
        oracle.config.user_dim,
        &config.data.base_ranker_hidden,
        config.data.base_ranker_epochs,
        config.data.base_ranker_batch,
        config.data.base_ranker_lr,
        derive_seed(seed, "surrogate-ranker"),
    )?;
    // Mixture shares: temperature ladder from random to greedy, with a
    // double share for the surrogate serving ranker whose display
    // distribution downstream evaluation uses.
    enum Logger {
        Random,
        Surrogate,
        Noisy(f64),
    }
    let n_total = config.feedback.expert_sessions;
    let share = n_total / 8;
    let components = [
        (Logger::Random, share),
        (Logger::Surrogate, 2 * share),
        (Logger::Noisy(1.5), share),
        (Logger::Noisy(0.7), share),
        (Logger::Noisy(0.35), share),
        (Logger::Noisy(0.15), share),
        (Logger::Noisy(0.0), n_total - 7 * share),
    ];
    for (slot, (logger, n)) in components.iter().enumerate() {
        let noisy;
        let ranker: &dyn crate::pipeline::Scorer = match logger {
            Logger::Random => &server_scorer,
            Logger::Surrogate => &surrogate,
            Logger::Noisy(temp) => {
                noisy = NoisyOracleScorer {
                    oracle: &oracle,
                    temperature: *temp,
                    noise_seed: derive_seed_indexed(seed, "expert-noise", slot as u64),
                };
                &noisy
            }
        };
        let server = Pipeline {
            config: config.data.pipeline.clone(),
            ranker,
            reranker: &identity,
        };
        expert.extend(log_sessions(
            &oracle,
            &catalog,
            &server,
            *n,
            derive_seed_indexed(seed, "expert-logs", slot as u64),
        )?);
    }

    let mut gail_config = config.feedback.gail.clone();
    gail_config.seed = derive_seed(seed, "gail");
    let (policy, disc, curves) =
        train_gail(&catalog, &expert, oracle.config.user_dim, &gail_config)?;

    ensure_parent(&paths.policy())?;
    crate::logio::save_sessions(&paths.expert_sessions(), &expert)?;
    save_checkpoint(&paths.policy(), &policy.params)?;
    save_checkpoint(&paths.discriminator(), &disc.params)?;
    write_json(
        &paths.policy_meta(),
        &PolicyMeta {
            gru: policy.gru,
            head: policy.head.clone(),
            user_dim: policy.user_dim,
            disc_spec: disc.spec.clone(),
        },
    )?;
    crate::logio::save_curve(&paths.feedback_curves(), "step,bc_loss", &curves.bc_loss)?;
    write_meta(&paths, config, "feedback", seed)?;
    Ok(())
}

pub fn load_policy(paths: &RunPaths) -> Result<FeedbackPolicy> {
    let meta: PolicyMeta =
        read_json(&paths.policy_meta()).map_err(|e| missing_stage(e, "train-feedback"))?;
    Ok(FeedbackPolicy {
        params: load_checkpoint(&paths.policy())?,
        gru: meta.gru,
        head: meta.head,
        user_dim: meta.user_dim,
    })
}

pub fn load_discriminator(paths: &RunPaths) -> Result<crate::feedback::Discriminator> {
    let meta: PolicyMeta =
        read_json(&paths.policy_meta()).map_err(|e| missing_stage(e, "train-feedback"))?;
    Ok(crate::feedback::Discriminator {
        spec: meta.disc_spec,
        params: load_checkpoint(&paths.discriminator())?,
    })
}

pub fn cmd_prepare_data(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(
        &[paths.train_sessions(), paths.test_sessions(), paths.base_ranker()],
        force,
    )?;
    let (catalog, oracle) = load_world(&paths)?;
    let seed = derive_seed(config.master_seed, "dataset");
    let prepared = prepare_dataset(&oracle, &catalog, &config.data, seed)?;
    ensure_parent(&paths.train_sessions())?;
    crate::logio::save_sessions(&paths.stage1_sessions(), &prepared.stage1)?;
    crate::logio::save_sessions(&paths.train_sessions(), &prepared.dataset.train)?;
    crate::logio::save_sessions(&paths.test_sessions(), &prepared.dataset.test)?;
    save_checkpoint(&paths.base_ranker(), &prepared.base_ranker.params)?;
    write_json(&paths.base_ranker_meta(), &prepared.base_ranker.spec)?;
    write_meta(&paths, config, "data", seed)?;
    Ok(())
}

pub fn cmd_bias_probe(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.propensity()], force)?;
    let (catalog, _) = load_world(&paths)?;
    let policy = load_policy(&paths)?;
    let train = crate::logio::load_sessions(&paths.train_sessions())
        .map_err(|e| missing_stage(e, "prepare-data"))?;
    let seed = derive_seed(config.master_seed, "bias-probe");
    let take = config.probe.n_sessions.min(train.len());
    let table = bias_probe(
        &policy,
        &catalog,
        &train[..take],
        config.probe.max_k,
        ProbeMode::Expected,
        config.probe.clip_floor,
        seed,
    )?;
    ensure_parent(&paths.propensity())?;
    table.save(&paths.propensity())?;
    write_meta(&paths, config, "probe", seed)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RankerMeta {
    Mlp { spec: MlpSpec },
    Gsf { spec: MlpSpec, group_size: usize },
    Dlcm { spec: DlcmSpec },
}

pub fn save_ranker(paths: &RunPaths, loss: LossKind, ips: bool, model: &RankerModel) -> Result<()> {
    let (meta, params): (RankerMeta, &ParameterSet) = match model {
        RankerModel::Mlp { spec, params } => (RankerMeta::Mlp { spec: spec.clone() }, params),
        RankerModel::Gsf {
            spec,
            params,
            group_size,
        } => (
            RankerMeta::Gsf {
                spec: spec.clone(),
                group_size: *group_size,
            },
            params,
        ),
        RankerModel::Dlcm { spec, params } => (RankerMeta::Dlcm { spec: spec.clone() }, params),
    };
    ensure_parent(&paths.ranker(loss, ips))?;
    save_checkpoint(&paths.ranker(loss, ips), params)?;
    write_json(&paths.ranker_meta(loss, ips), &meta)?;
    Ok(())
}

pub fn load_ranker(paths: &RunPaths, loss: LossKind, ips: bool) -> Result<RankerModel> {
    let meta: RankerMeta =
        read_json(&paths.ranker_meta(loss, ips)).map_err(|e| missing_stage(e, "train-ranker"))?;
    let params = load_checkpoint(&paths.ranker(loss, ips))?;
    Ok(match meta {
        RankerMeta::Mlp { spec } => RankerModel::Mlp { spec, params },
        RankerMeta::Gsf { spec, group_size } => RankerModel::Gsf {
            spec,
            params,
            group_size,
        },
        RankerMeta::Dlcm { spec } => RankerModel::Dlcm { spec, params },
    })
}

pub fn cmd_train_ranker(
    config: &ExperimentConfig,
    loss: LossKind,
    use_ips: bool,
    force: bool,
) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.ranker(loss, use_ips)], force)?;
    let (catalog, oracle) = load_world(&paths)?;
    let train = crate::logio::load_sessions(&paths.train_sessions())
        .map_err(|e| missing_stage(e, "prepare-data"))?;
    let table = if use_ips {
        Some(
            PropensityTable::load(&paths.propensity())
                .map_err(|e| missing_stage(e, "bias-probe"))?,
        )
    } else {
        None
    };
    let train_config = config.train_config(loss, use_ips);
    let (model, curve) = train_ranker(
        &catalog,
        &train,
        oracle.config.user_dim,
        &train_config,
        table.as_ref(),
    )?;
    save_ranker(&paths, loss, use_ips, &model)?;
    crate::logio::save_curve(&paths.ranker_curve(loss, use_ips), "step,loss", &curve.steps)?;
    write_meta(&paths, config, "rankers", train_config.seed)?;
    Ok(())
}

/// One evaluation row: offline metrics plus both dynamic scores (under the
/// learned feedback policy and under the ground-truth oracle).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub loss: String,
    pub ips: bool,
    pub auc: f64,
    pub gauc: f64,
    pub ndcg: f64,
    pub map: f64,
    /// Expected purchases per session under the learned feedback policy.
    pub sim_score: f64,
    /// Same quantity under the ground-truth oracle.
    pub true_score: f64,
}

pub fn cmd_evaluate(config: &ExperimentConfig, force: bool) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    guard_overwrite(&[paths.eval_csv()], force)?;
    let (catalog, oracle) = load_world(&paths)?;
    let policy = load_policy(&paths)?;
    let test = crate::logio::load_sessions(&paths.test_sessions())
        .map_err(|e| missing_stage(e, "prepare-data"))?;
    let mut rows = Vec::new();
    for loss in LossKind::ALL {
        for ips in [false, true] {
            if !paths.ranker_meta(loss, ips).exists() {
                continue;
            }
            let model = load_ranker(&paths, loss, ips)?;
            let eval = evaluate_model(
                &policy,
                &catalog,
                &model,
                &test,
                config.eval.label_target,
                config.eval.ndcg_k,
                loss.name(),
            )?;
            let true_score = dynamic_score(&oracle, &catalog, &model, &test)?;
            rows.push(EvalRow {
                loss: loss.name().to_string(),
                ips,
                auc: eval.auc,
                gauc: eval.gauc,
                ndcg: eval.ndcg,
                map: eval.map,
                sim_score: eval.dynamic,
                true_score,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact(
            "no trained rankers found (run the train-ranker stage first)".into(),
        ));
    }
    ensure_parent(&paths.eval_csv())?;
    std::fs::write(&paths.eval_csv(), eval_rows_to_csv(&rows))?;
    write_meta(&paths, config, "eval", config.master_seed)?;
    Ok(())
}

pub fn eval_rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("loss,ips,auc,gauc,ndcg,map,sim_score,true_score\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.loss, r.ips as u8, r.auc, r.gauc, r.ndcg, r.map, r.sim_score, r.true_score
        ));
    }
    out
}

pub fn load_eval_rows(paths: &RunPaths) -> Result<Vec<EvalRow>> {
    let text = std::fs::read_to_string(paths.eval_csv())
        .map_err(|e| Error::MissingArtifact(format!("{}: {e} (run the evaluate stage first)", paths.eval_csv().display())))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::Format(format!("bad eval row: {line}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("bad number {s}")))
        };
        rows.push(EvalRow {
            loss: f[0].to_string(),
            ips: f[1] == "1",
            auc: num(f[2])?,
            gauc: num(f[3])?,
            ndcg: num(f[4])?,
            map: num(f[5])?,
            sim_score: num(f[6])?,
            true_score: num(f[7])?,
        });
    }
    Ok(rows)
}

/// Rank-order concordance verdict between an offline metric and the dynamic
/// score (the platform's central diagnostic).
pub fn concordance_verdict(rows: &[EvalRow]) -> String {
    let mut discordant = Vec::new();
    for i in 0..rows.len() {
        for j in (i + 1)..rows.len() {
            let (a, b) = (&rows[i], &rows[j]);
            let by_gauc = a.gauc.partial_cmp(&b.gauc).unwrap();
            let by_sim = a.sim_score.partial_cmp(&b.sim_score).unwrap();
            if by_gauc != std::cmp::Ordering::Equal && by_sim == by_gauc.reverse() {
                discordant.push(format!(
                    "{}({}) vs {}({}): GAUC order {:.6} vs {:.6}, simulated score order {:.6} vs {:.6}",
                    a.loss,
                    ips_tag(a.ips),
                    b.loss,
                    ips_tag(b.ips),
                    a.gauc,
                    b.gauc,
                    a.sim_score,
                    b.sim_score
                ));
            }
        }
    }
    if discordant.is_empty() {
        "VERDICT: concordant — GAUC ordering matches the simulated-score ordering for every model pair under this config\n".to_string()
    } else {
        let mut out = format!(
            "VERDICT: discordant — {} model pair(s) rank differently by GAUC and by simulated score\n",
            discordant.len()
        );
        for d in discordant {
            out.push_str(&d);
            out.push('\n');
        }
        out
    }
}

pub fn cmd_report(config: &ExperimentConfig) -> Result<()> {
    let paths = RunPaths::new(&config.out_dir);
    let rows = load_eval_rows(&paths)?;
    if rows.is_empty() {
        return Err(Error::MissingArtifact("evaluation results are empty".into()));
    }
    let (catalog, oracle) = load_world(&paths)?;
    let policy = load_policy(&paths)?;
    let test = crate::logio::load_sessions(&paths.test_sessions())?;

    // Merged table: one row per loss, de-biasing variants side by side.
    let mut csv = String::from(
        "loss,gauc_noips,ndcg_noips,map_noips,sim_noips,gauc_ips,ndcg_ips,map_ips,sim_ips\n",
    );
    let mut table = format!(
        "{:<10} | {:>8} {:>8} {:>8} {:>9} | {:>8} {:>8} {:>8} {:>9}\n",
        "loss", "GAUC", "NDCG", "MAP", "sim", "GAUC*", "NDCG*", "MAP*", "sim*"
    );
    table.push_str(&format!("{}\n", "-".repeat(92)));
    for loss in LossKind::ALL {
        let no = rows.iter().find(|r| r.loss == loss.name() && !r.ips);
        let yes = rows.iter().find(|r| r.loss == loss.name() && r.ips);
        if no.is_none() && yes.is_none() {
            continue;
        }
        let fmt = |r: Option<&EvalRow>, f: fn(&EvalRow) -> f64| -> String {
            r.map(|r| format!("{:.6}", f(r))).unwrap_or_default()
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            loss.name(),
            fmt(no, |r| r.gauc),
            fmt(no, |r| r.ndcg),
            fmt(no, |r| r.map),
            fmt(no, |r| r.sim_score),
            fmt(yes, |r| r.gauc),
            fmt(yes, |r| r.ndcg),
            fmt(yes, |r| r.map),
            fmt(yes, |r| r.sim_score),
        ));
        let cell = |r: Option<&EvalRow>, f: fn(&EvalRow) -> f64| -> String {
            r.map(|r| format!("{:.4}", f(r))).unwrap_or_else(|| "-".into())
        };
        table.push_str(&format!(
            "{:<10} | {:>8} {:>8} {:>8} {:>9} | {:>8} {:>8} {:>8} {:>9}\n",
            loss.name(),
            cell(no, |r| r.gauc),
            cell(no, |r| r.ndcg),
            cell(no, |r| r.map),
            cell(no, |r| r.sim_score),
            cell(yes, |r| r.gauc),
            cell(yes, |r| r.ndcg),
            cell(yes, |r| r.map),
            cell(yes, |r| r.sim_score),
        ));
    }
    table.push_str("(* = trained with inverse-propensity de-biasing)\n");
    ensure_parent(&paths.report_csv())?;
    std::fs::write(&paths.report_csv(), &csv)?;
    std::fs::write(&paths.report_table(), &table)?;
    std::fs::write(&paths.report_verdict(), concordance_verdict(&rows))?;

    // Position trend (policy vs oracle) over the test displays.
    let k = config.data.pipeline.rerank_n;
    let learned = position_trend(&policy, &catalog, &test, k)?;
    let truth = position_trend(&oracle, &catalog, &test, k)?;
    let mut trend = String::from(
        "position,policy_click,policy_purchase,oracle_click,oracle_purchase\n",
    );
    for t in 0..k {
        trend.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            t + 1,
            learned.click[t],
            learned.purchase[t],
            truth.click[t],
            truth.purchase[t]
        ));
    }
    std::fs::write(&paths.report_trend(), trend)?;

    // Feature-distribution comparison from the generator diagnostic.
    if paths.gan_diagnostic().exists() {
        let diag: crate::user_gan::TwoSampleDiagnostic = read_json(&paths.gan_diagnostic())?;
        let mut features = String::from("feature,mean_abs_delta,std_abs_delta\n");
        for (i, (m, s)) in diag
            .mean_abs_delta
            .iter()
            .zip(&diag.std_abs_delta)
            .enumerate()
        {
            features.push_str(&format!("{i},{m:.6},{s:.6}\n"));
        }
        std::fs::write(&paths.report_features(), features)?;
    }
    write_meta(&paths, config, "report", config.master_seed)?;
    Ok(())
}

/// Expert sessions loader for downstream diagnostics.
pub fn load_expert_sessions(paths: &RunPaths) -> Result<Vec<SessionLog>> {
    crate::logio::load_sessions(&paths.expert_sessions())
        .map_err(|e| missing_stage(e, "train-feedback"))
}
