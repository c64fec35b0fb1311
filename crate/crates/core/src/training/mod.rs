//! Episodic training with periodic validation and best-model selection.

mod adam;
mod run_dir;

use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

use crate::alphabet::Split;
use crate::dataset::DatasetIndex;
use crate::episodes::{
    derive_seed, episode_rng, make_stream_plan_with, sample_episode, EpisodeSpec, Granularity,
    Method, MixMode, SeedStream, StreamPlan,
};
use crate::error::{Error, Result};
use crate::evaluation::{ensure_episode, evaluate, task_accuracies, RunResult};
use crate::protonet::{batch_tensor, episode_loss_and_grad, BackboneKind, Embedder, Network};

pub use adam::Adam;
pub use run_dir::{write_run_dir, RUN_FILES};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub total_episodes: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub validation_every: usize,
    pub validation_tasks: usize,
    pub seed: u64,
    pub backbone: BackboneKind,
    /// Safetensors file with initial backbone weights.
    pub pretrained_weights: Option<PathBuf>,
    pub mix_mode: MixMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Baseline,
            way: 5,
            shot: 1,
            queries_per_class: 2,
            total_episodes: 20_000,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            validation_every: 500,
            validation_tasks: 200,
            seed: 0,
            backbone: BackboneKind::ResNet18,
            pretrained_weights: None,
            mix_mode: MixMode::Alternate,
        }
    }
}

impl TrainConfig {
    pub fn base_spec(&self) -> EpisodeSpec {
        EpisodeSpec::character(self.way, self.shot, self.queries_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        self.base_spec().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_episodes == 0 {
            return bad("total_episodes must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.validation_every == 0 {
            return bad("validation_every must be >= 1");
        }
        if self.validation_tasks == 0 {
            return bad("validation_tasks must be >= 1");
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, episode: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let t = episode as f64 / self.total_episodes as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    /// Number of training episodes completed.
    pub episode: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub losses: Vec<f64>,
    pub granularities: Vec<Granularity>,
    pub validations: Vec<ValidationPoint>,
    pub best_episode: usize,
    pub best_accuracy: f64,
    pub optimizer_steps: u64,
}

pub struct TrainOutcome {
    pub best: Network,
    pub last: Network,
    pub history: TrainHistory,
    pub plan: StreamPlan,
}

/// Validation accuracy: mean over `n_tasks` character episodes from the
/// validation split. Task `t` is seeded from `(seed, Validation, t)`.
pub fn validate(
    model: &dyn Embedder,
    index: &DatasetIndex,
    n_tasks: usize,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<f64> {
    let accs = task_accuracies(
        model,
        index,
        Split::Val,
        spec,
        n_tasks,
        seed,
        SeedStream::Validation,
    )?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

fn initial_network(config: &TrainConfig) -> Result<Network> {
    let mut net = Network::new(
        config.backbone,
        derive_seed(config.seed, SeedStream::Init, 0),
    );
    match &config.pretrained_weights {
        Some(path) => net.load_safetensors(path)?,
        None if config.backbone == BackboneKind::ResNet18 => {
            log::warn!("no pretrained weights given; resnet18 starts from random initialization")
        }
        None => {}
    }
    Ok(net)
}

/// Runs `config.total_episodes` optimizer steps, one per episode, validating
/// every `validation_every` episodes and after the last one. The returned
/// `best` network is the one with the highest validation accuracy, earliest
/// on ties.
pub fn train(config: &TrainConfig, index: &DatasetIndex) -> Result<TrainOutcome> {
    config.validate()?;
    let base = config.base_spec();
    let plan = make_stream_plan_with(
        config.method,
        config.total_episodes,
        base,
        config.mix_mode,
        config.seed,
    )?;
    for g in plan.counts().keys() {
        base.with_granularity(*g)
            .validate_for(index, Split::Train)?;
    }
    base.validate_for(index, Split::Val)?;

    let mut net = initial_network(config)?;
    let mut adam = Adam::default();
    let mut history = TrainHistory {
        best_accuracy: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best = net.clone();

    for i in 0..config.total_episodes {
        let spec = plan.spec_at(i);
        let mut rng = episode_rng(derive_seed(config.seed, SeedStream::Train, i as u64));
        let ep = sample_episode(index, Split::Train, &spec, &mut rng)?;
        ensure_episode(&ep, index, i)?;

        let images: Vec<_> = ep
            .support
            .iter()
            .chain(&ep.query)
            .map(|it| index.image(it.image))
            .collect();
        let emb = net.forward_train(batch_tensor(&images)?)?.mapv(f64::from);
        let n_support = ep.support.len();
        let head = episode_loss_and_grad(
            emb.slice(s![..n_support, ..]),
            &ep.support_labels(),
            emb.slice(s![n_support.., ..]),
            &ep.query_labels(),
            spec.way,
        )?;
        if !head.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                episode: i,
                loss: head.loss,
            });
        }
        let grad = concatenate(Axis(0), &[head.support_grad.view(), head.query_grad.view()])
            .expect("support and query gradients share a width")
            .mapv(|g| g as f32);
        net.zero_grad();
        net.backward(grad.view());
        adam.step(&mut net, config.learning_rate_at(i));

        history.losses.push(head.loss);
        history.granularities.push(spec.granularity);

        let done = i + 1;
        if done % config.validation_every == 0 || done == config.total_episodes {
            let accuracy = validate(&net, index, config.validation_tasks, &base, config.seed)?;
            log::info!(
                "{} {}-shot seed {}: episode {done}/{} loss {:.4} val {:.4}",
                config.method,
                config.shot,
                config.seed,
                config.total_episodes,
                head.loss,
                accuracy
            );
            history.validations.push(ValidationPoint {
                episode: done,
                accuracy,
            });
            if accuracy > history.best_accuracy {
                history.best_accuracy = accuracy;
                history.best_episode = done;
                best = net.clone();
            }
        }
    }
    history.optimizer_steps = adam.steps();
    Ok(TrainOutcome {
        best,
        last: net,
        history,
        plan,
    })
}

/// Trains and tests one (method, shot) cell for each seed. The best
/// checkpoint of every seed is evaluated on `test_tasks` test episodes.
/// When `out_dir` is given each run is written to
/// `<out_dir>/<method>_<shot>shot_seed<seed>`.
pub fn run_experiment(
    template: &TrainConfig,
    seeds: &[u64],
    index: &DatasetIndex,
    test_tasks: usize,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    if seeds.len() != 3 {
        return Err(Error::Config(format!(
            "expected 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut evals = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let config = TrainConfig {
            seed,
            ..template.clone()
        };
        let mut outcome = train(&config, index)?;
        let eval = evaluate(
            &outcome.best,
            index,
            Split::Test,
            test_tasks,
            &config.base_spec(),
            seed,
        )?;
        log::info!(
            "{} {}-shot seed {seed}: test accuracy {:.4} ± {:.4}",
            config.method,
            config.shot,
            eval.accuracy,
            eval.ci_half_width
        );
        if let Some(dir) = out_dir {
            let run = dir.join(run_name(&config));
            write_run_dir(&run, &config, &mut outcome, index.preprocess())?;
        }
        evals.push(eval);
    }
    Ok(RunResult::from_evaluations(
        template.method,
        template.shot,
        seeds.to_vec(),
        &evals,
    ))
}

pub fn run_name(config: &TrainConfig) -> String {
    format!("{}_{}shot_seed{}", config.method, config.shot, config.seed)
}
