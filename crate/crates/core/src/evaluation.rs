//! Test-split evaluation, per-seed aggregation and the results table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::alphabet::Split;
use crate::dataset::DatasetIndex;
use crate::episodes::{
    check_episode_against, derive_seed, episode_rng, sample_episode, Episode, EpisodeSpec,
    Granularity, Method, SeedStream, Violation,
};
use crate::error::{Error, Result};
use crate::protonet::{classify, compute_prototypes, sq_distances, Embedder};

pub const SHOTS: [usize; 3] = [1, 2, 3];

/// Published 5-way test accuracies for shots 1, 2 and 3, used as the
/// comparison column of [`reproduce_table`].
pub const REFERENCE_ACCURACY: [(Method, [f64; 3]); 3] = [
    (Method::Baseline, [0.3810, 0.9110, 0.9370]),
    (Method::Method1, [0.7590, 0.9010, 0.8840]),
    (Method::Method2, [0.3830, 0.8700, 0.9290]),
];

pub fn reference_accuracy(method: Method, shot: usize) -> Option<f64> {
    let col = SHOTS.iter().position(|&s| s == shot)?;
    REFERENCE_ACCURACY
        .iter()
        .find(|(m, _)| *m == method)
        .map(|(_, row)| row[col])
}

/// Fraction of correctly classified queries in one episode.
pub fn episode_accuracy(model: &dyn Embedder, index: &DatasetIndex, ep: &Episode) -> Result<f64> {
    let images: Vec<_> = ep
        .support
        .iter()
        .chain(&ep.query)
        .map(|it| index.image(it.image))
        .collect();
    let emb = model.embed(&images)?;
    let s = ep.support.len();
    let protos = compute_prototypes(
        emb.slice(ndarray::s![..s, ..]),
        &ep.support_labels(),
        ep.spec.way,
    )?;
    let dist = sq_distances(emb.slice(ndarray::s![s.., ..]), protos.prototypes.view())?;
    let preds = classify(dist.view()).predictions;
    let correct = preds
        .iter()
        .zip(ep.query_labels())
        .filter(|(p, y)| **p == *y)
        .count();
    Ok(correct as f64 / ep.query.len() as f64)
}

/// Rejects an episode that touches the wrong split or is otherwise malformed.
pub(crate) fn ensure_episode(ep: &Episode, index: &DatasetIndex, episode: usize) -> Result<()> {
    if let Some(v) = check_episode_against(ep, index).into_iter().next() {
        return Err(match v {
            Violation::WrongSplit {
                image,
                expected,
                found,
            } => Error::SplitLeak {
                episode,
                image,
                expected,
                found,
            },
            violation => Error::MalformedEpisode { episode, violation },
        });
    }
    Ok(())
}

/// Accuracy of each of `n_tasks` character episodes drawn from `split`.
/// Task `t` uses the seed derived from `(seed, stream, t)`, so the task set
/// depends only on the seed and not on the model.
pub fn task_accuracies(
    model: &dyn Embedder,
    index: &DatasetIndex,
    split: Split,
    spec: &EpisodeSpec,
    n_tasks: usize,
    seed: u64,
    stream: SeedStream,
) -> Result<Vec<f64>> {
    if n_tasks == 0 {
        return Err(Error::Config(
            "number of evaluation tasks must be >= 1".into(),
        ));
    }
    if spec.granularity != Granularity::Character {
        return Err(Error::Config(format!(
            "evaluation episodes must be character-level, got {}",
            spec.granularity.as_str()
        )));
    }
    spec.validate_for(index, split)?;
    (0..n_tasks)
        .map(|t| {
            let mut rng = episode_rng(derive_seed(seed, stream, t as u64));
            let ep = sample_episode(index, split, spec, &mut rng)?;
            ensure_episode(&ep, index, t)?;
            episode_accuracy(model, index, &ep)
        })
        .collect()
}

/// 95% normal-approximation half width: `1.96 * sd / sqrt(n)` with the
/// sample standard deviation. Zero for fewer than two samples.
pub fn confidence_half_width(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
    1.96 * var.sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub ci_half_width: f64,
    pub n_tasks: usize,
    pub task_accuracies: Vec<f64>,
}

/// Mean accuracy over `n_tasks` episodes from `split`.
pub fn evaluate(
    model: &dyn Embedder,
    index: &DatasetIndex,
    split: Split,
    n_tasks: usize,
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<EvalOutcome> {
    let stream = match split {
        Split::Val => SeedStream::Validation,
        _ => SeedStream::Test,
    };
    let accs = task_accuracies(model, index, split, spec, n_tasks, seed, stream)?;
    Ok(EvalOutcome {
        accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
        ci_half_width: confidence_half_width(&accs),
        n_tasks,
        task_accuracies: accs,
    })
}

/// One cell of the results table: a method at one shot count over several
/// seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub shot: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Computed over all test tasks of all seeds pooled together.
    pub ci_half_width: f64,
    /// Tasks per seed.
    pub n_tasks: usize,
}

impl RunResult {
    pub fn from_accuracies(
        method: Method,
        shot: usize,
        seeds: Vec<u64>,
        per_seed: Vec<f64>,
        ci_half_width: f64,
        n_tasks: usize,
    ) -> RunResult {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
        RunResult {
            method,
            shot,
            seeds,
            per_seed,
            mean,
            ci_half_width,
            n_tasks,
        }
    }

    pub fn from_evaluations(
        method: Method,
        shot: usize,
        seeds: Vec<u64>,
        evals: &[EvalOutcome],
    ) -> RunResult {
        let pooled: Vec<f64> = evals
            .iter()
            .flat_map(|e| e.task_accuracies.iter().copied())
            .collect();
        RunResult::from_accuracies(
            method,
            shot,
            seeds,
            evals.iter().map(|e| e.accuracy).collect(),
            confidence_half_width(&pooled),
            evals.first().map_or(0, |e| e.n_tasks),
        )
    }
}

/// Method x shot grid of results.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub cells: BTreeMap<(Method, usize), RunResult>,
}

impl ResultsTable {
    pub fn get(&self, method: Method, shot: usize) -> Option<&RunResult> {
        self.cells.get(&(method, shot))
    }

    pub fn missing(&self) -> Vec<(Method, usize)> {
        Method::ALL
            .iter()
            .flat_map(|&m| SHOTS.iter().map(move |&s| (m, s)))
            .filter(|k| !self.cells.contains_key(k))
            .collect()
    }

    pub fn results(&self) -> impl Iterator<Item = &RunResult> {
        self.cells.values()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    pub table: ResultsTable,
    pub markdown: String,
    pub csv: String,
    pub warnings: Vec<String>,
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

/// Builds the 3x3 table. Missing cells render as "—"; a later result for the
/// same cell replaces an earlier one. Both cases produce a warning.
pub fn reproduce_table(results: Vec<RunResult>) -> TableReport {
    let mut table = ResultsTable::default();
    let mut warnings = Vec::new();
    for r in results {
        let key = (r.method, r.shot);
        if !SHOTS.contains(&r.shot) {
            warnings.push(format!(
                "{} {}-shot is outside the table and was ignored",
                r.method, r.shot
            ));
            continue;
        }
        if table.cells.insert(key, r).is_some() {
            warnings.push(format!(
                "duplicate result for {} {}-shot; keeping the last",
                key.0, key.1
            ));
        }
    }
    for (m, s) in table.missing() {
        warnings.push(format!("no result for {m} {s}-shot"));
    }

    let mut md = String::new();
    md.push_str("| Method | 1-shot | 2-shot | 3-shot | Reference (1 / 2 / 3-shot) |\n");
    md.push_str("|---|---|---|---|---|\n");
    for &m in &Method::ALL {
        let _ = write!(md, "| {} |", m.display_name());
        for &s in &SHOTS {
            match table.get(m, s) {
                Some(r) => {
                    let _ = write!(md, " {}% ± {} |", pct(r.mean), pct(r.ci_half_width));
                }
                None => md.push_str(" — |"),
            }
        }
        let refs: Vec<String> = SHOTS
            .iter()
            .map(|&s| reference_accuracy(m, s).map_or("—".into(), |v| format!("{}%", pct(v))))
            .collect();
        let _ = writeln!(md, " {} |", refs.join(" / "));
    }
    if table.cells.values().any(|r| !r.per_seed.is_empty()) {
        md.push_str("\nPer-seed accuracy (%):\n\n");
        for r in table.cells.values() {
            let seeds: Vec<String> = r
                .seeds
                .iter()
                .zip(&r.per_seed)
                .map(|(seed, a)| format!("seed {seed}: {}", pct(*a)))
                .collect();
            let _ = writeln!(md, "- {} {}-shot: {}", r.method, r.shot, seeds.join(", "));
        }
    }

    let mut csv = String::from(
        "method,shot,mean_accuracy,ci_half_width,n_tasks,seeds,per_seed,reference_accuracy\n",
    );
    for r in table.cells.values() {
        let join = |v: Vec<String>| v.join(";");
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.method,
            r.shot,
            r.mean,
            r.ci_half_width,
            r.n_tasks,
            join(r.seeds.iter().map(|s| s.to_string()).collect()),
            join(r.per_seed.iter().map(|a| a.to_string()).collect()),
            reference_accuracy(r.method, r.shot).map_or(String::new(), |v| v.to_string()),
        );
    }
    TableReport {
        table,
        markdown: md,
        csv,
        warnings,
    }
}

/// One row per (method, shot, seed).
pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::from("method,shot,seed,accuracy,n_tasks\n");
    for r in results {
        for (seed, acc) in r.seeds.iter().zip(&r.per_seed) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.method, r.shot, seed, acc, r.n_tasks
            );
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    /// `better` beats `worse` at `shot` by `margin_points` accuracy points.
    Ordering {
        shot: usize,
        better: Method,
        worse: Method,
        margin_points: f64,
    },
    /// Accuracy strictly increases or decreases with the shot count.
    Monotone {
        method: Method,
        increasing: bool,
        means: Vec<f64>,
    },
}

impl Finding {
    pub fn describe(&self) -> String {
        match self {
            Finding::Ordering {
                shot,
                better,
                worse,
                margin_points,
            } => format!("{shot}-shot: {better} - {worse} = +{margin_points:.1} points"),
            Finding::Monotone {
                method,
                increasing,
                means,
            } => {
                let vals: Vec<String> = means.iter().map(|v| pct(*v)).collect();
                let dir = if *increasing {
                    "increases"
                } else {
                    "decreases"
                };
                format!(
                    "{method}: accuracy {dir} with shots ({})",
                    vals.join(" -> ")
                )
            }
        }
    }
}

/// Pairwise orderings per shot and shot-monotonicity per method, over the
/// cells that are present. Ties produce no finding.
pub fn compare_methods(table: &ResultsTable) -> Vec<Finding> {
    let mut out = Vec::new();
    for &shot in &SHOTS {
        for (i, &a) in Method::ALL.iter().enumerate() {
            for &b in &Method::ALL[i + 1..] {
                let (Some(ra), Some(rb)) = (table.get(a, shot), table.get(b, shot)) else {
                    continue;
                };
                if ra.mean == rb.mean {
                    continue;
                }
                let (better, worse, diff) = if ra.mean > rb.mean {
                    (a, b, ra.mean - rb.mean)
                } else {
                    (b, a, rb.mean - ra.mean)
                };
                out.push(Finding::Ordering {
                    shot,
                    better,
                    worse,
                    margin_points: diff * 100.0,
                });
            }
        }
    }
    for &m in &Method::ALL {
        let means: Option<Vec<f64>> = SHOTS
            .iter()
            .map(|&s| table.get(m, s).map(|r| r.mean))
            .collect();
        let Some(means) = means else { continue };
        let up = means.windows(2).all(|w| w[1] > w[0]);
        let down = means.windows(2).all(|w| w[1] < w[0]);
        if up || down {
            out.push(Finding::Monotone {
                method: m,
                increasing: up,
                means,
            });
        }
    }
    out
}
