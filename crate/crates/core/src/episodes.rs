//! N-way K-shot episode sampling at character, row or column granularity,
//! and the training schedules that mix them.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphabet::{AlphabetError, AlphabetTable, Split};
use crate::dataset::DatasetIndex;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EpisodeError {
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("{split} split has {available} {granularity} classes, episode needs {needed}")]
    InsufficientClasses {
        split: Split,
        granularity: Granularity,
        needed: usize,
        available: usize,
    },
    #[error("{granularity} classes need {needed} images each but only {eligible} of {total} classes in {split} have that many")]
    InsufficientImages {
        split: Split,
        granularity: Granularity,
        needed: usize,
        eligible: usize,
        total: usize,
    },
    #[error("unknown method {0:?} (expected baseline, method1 or method2)")]
    UnknownMethod(String),
    #[error("unknown mix mode {0:?} (expected alternate, bernoulli or block)")]
    UnknownMixMode(String),
    #[error("unknown granularity {0:?} (expected character, row or column)")]
    UnknownGranularity(String),
}

/// Which alphabet label defines the classes of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Character = 0,
    Row = 1,
    Column = 2,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [
        Granularity::Character,
        Granularity::Row,
        Granularity::Column,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Character => "character",
            Granularity::Row => "row",
            Granularity::Column => "column",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = EpisodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "character" | "char" => Ok(Granularity::Character),
            "row" => Ok(Granularity::Row),
            "column" | "col" => Ok(Granularity::Column),
            other => Err(EpisodeError::UnknownGranularity(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub granularity: Granularity,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            way: 5,
            shot: 1,
            queries_per_class: 2,
            granularity: Granularity::Character,
        }
    }
}

impl EpisodeSpec {
    pub fn character(way: usize, shot: usize, queries_per_class: usize) -> Self {
        EpisodeSpec {
            way,
            shot,
            queries_per_class,
            granularity: Granularity::Character,
        }
    }

    pub fn with_granularity(self, granularity: Granularity) -> Self {
        EpisodeSpec {
            granularity,
            ..self
        }
    }

    /// Images needed per class.
    pub fn per_class_demand(&self) -> usize {
        self.shot + self.queries_per_class
    }

    pub fn support_len(&self) -> usize {
        self.way * self.shot
    }

    pub fn query_len(&self) -> usize {
        self.way * self.queries_per_class
    }

    /// Structural checks that do not depend on a dataset.
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.way < 2 {
            return Err(EpisodeError::InvalidSpec(format!(
                "way must be >= 2, got {}",
                self.way
            )));
        }
        if self.shot < 1 {
            return Err(EpisodeError::InvalidSpec("shot must be >= 1".into()));
        }
        if self.queries_per_class < 1 {
            return Err(EpisodeError::InvalidSpec(
                "queries_per_class must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Checks that `split` of `index` can supply episodes of this spec.
    pub fn validate_for(&self, index: &DatasetIndex, split: Split) -> Result<(), EpisodeError> {
        self.validate()?;
        let pools = index.label_pools(split, self.granularity);
        let needed = self.per_class_demand();
        if pools.len() < self.way {
            return Err(EpisodeError::InsufficientClasses {
                split,
                granularity: self.granularity,
                needed: self.way,
                available: pools.len(),
            });
        }
        let eligible = pools.values().filter(|p| p.len() >= needed).count();
        if eligible < self.way {
            return Err(EpisodeError::InsufficientImages {
                split,
                granularity: self.granularity,
                needed,
                eligible,
                total: pools.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeItem {
    /// Position in the [`DatasetIndex`].
    pub image: usize,
    pub local_class: usize,
}

/// A realized support/query sample. Items are class-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub split: Split,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Original label (char, row or column) of each local class.
    pub class_identities: Vec<u32>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|it| it.local_class).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|it| it.local_class).collect()
    }
}

/// Draws one episode. Classes are chosen uniformly without replacement among
/// labels with enough images, then each class's support and query images are
/// drawn without replacement from that label's pool.
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    split: Split,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    spec.validate_for(index, split)?;
    let demand = spec.per_class_demand();
    let eligible: Vec<(&u32, &Vec<usize>)> = index
        .label_pools(split, spec.granularity)
        .iter()
        .filter(|(_, pool)| pool.len() >= demand)
        .collect();

    let mut support = Vec::with_capacity(spec.support_len());
    let mut query = Vec::with_capacity(spec.query_len());
    let mut class_identities = Vec::with_capacity(spec.way);
    for (local_class, pick) in index::sample(rng, eligible.len(), spec.way)
        .into_iter()
        .enumerate()
    {
        let (&label, pool) = eligible[pick];
        class_identities.push(label);
        let chosen = index::sample(rng, pool.len(), demand);
        for (n, i) in chosen.into_iter().enumerate() {
            let item = EpisodeItem {
                image: pool[i],
                local_class,
            };
            if n < spec.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    support.sort_by_key(|it| it.local_class);
    query.sort_by_key(|it| it.local_class);
    Ok(Episode {
        spec: *spec,
        split,
        support,
        query,
        class_identities,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    WrongClassCount {
        expected: usize,
        found: usize,
    },
    DuplicateClassIdentity {
        label: u32,
    },
    WrongSupportSize {
        expected: usize,
        found: usize,
    },
    WrongQuerySize {
        expected: usize,
        found: usize,
    },
    LocalClassOutOfRange {
        local_class: usize,
    },
    SupportClassCount {
        local_class: usize,
        expected: usize,
        found: usize,
    },
    QueryClassCount {
        local_class: usize,
        expected: usize,
        found: usize,
    },
    DuplicateImage {
        image: usize,
    },
    ImageInSupportAndQuery {
        image: usize,
    },
    WrongSplit {
        image: usize,
        expected: Split,
        found: Split,
    },
    LabelMismatch {
        image: usize,
        local_class: usize,
        expected: u32,
        found: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongClassCount { expected, found } => {
                write!(f, "{found} class identities, expected {expected}")
            }
            Violation::DuplicateClassIdentity { label } => write!(f, "class {label} appears twice"),
            Violation::WrongSupportSize { expected, found } => {
                write!(f, "support has {found} items, expected {expected}")
            }
            Violation::WrongQuerySize { expected, found } => {
                write!(f, "query has {found} items, expected {expected}")
            }
            Violation::LocalClassOutOfRange { local_class } => {
                write!(f, "local class {local_class} out of range")
            }
            Violation::SupportClassCount {
                local_class,
                expected,
                found,
            } => {
                write!(
                    f,
                    "class {local_class} has {found} support items, expected {expected}"
                )
            }
            Violation::QueryClassCount {
                local_class,
                expected,
                found,
            } => {
                write!(
                    f,
                    "class {local_class} has {found} query items, expected {expected}"
                )
            }
            Violation::DuplicateImage { image } => write!(f, "image {image} drawn twice"),
            Violation::ImageInSupportAndQuery { image } => {
                write!(f, "image {image} is in both support and query")
            }
            Violation::WrongSplit {
                image,
                expected,
                found,
            } => {
                write!(f, "image {image} is from {found}, episode is {expected}")
            }
            Violation::LabelMismatch {
                image,
                local_class,
                expected,
                found,
            } => {
                write!(
                    f,
                    "image {image} has label {found}, class {local_class} is {expected}"
                )
            }
        }
    }
}

/// Structural invariants of an episode. Empty iff the episode is well formed.
pub fn check_episode(ep: &Episode) -> Vec<Violation> {
    let spec = &ep.spec;
    let mut out = Vec::new();
    if ep.class_identities.len() != spec.way {
        out.push(Violation::WrongClassCount {
            expected: spec.way,
            found: ep.class_identities.len(),
        });
    }
    let mut seen = BTreeSet::new();
    let mut reported = BTreeSet::new();
    for &label in &ep.class_identities {
        if !seen.insert(label) && reported.insert(label) {
            out.push(Violation::DuplicateClassIdentity { label });
        }
    }
    if ep.support.len() != spec.support_len() {
        out.push(Violation::WrongSupportSize {
            expected: spec.support_len(),
            found: ep.support.len(),
        });
    }
    if ep.query.len() != spec.query_len() {
        out.push(Violation::WrongQuerySize {
            expected: spec.query_len(),
            found: ep.query.len(),
        });
    }

    let count = |items: &[EpisodeItem], out: &mut Vec<Violation>| {
        let mut counts = vec![0usize; spec.way];
        for it in items {
            match counts.get_mut(it.local_class) {
                Some(c) => *c += 1,
                None => out.push(Violation::LocalClassOutOfRange {
                    local_class: it.local_class,
                }),
            }
        }
        counts
    };
    let support_counts = count(&ep.support, &mut out);
    let query_counts = count(&ep.query, &mut out);
    for k in 0..spec.way {
        if support_counts[k] != spec.shot {
            out.push(Violation::SupportClassCount {
                local_class: k,
                expected: spec.shot,
                found: support_counts[k],
            });
        }
        if query_counts[k] != spec.queries_per_class {
            out.push(Violation::QueryClassCount {
                local_class: k,
                expected: spec.queries_per_class,
                found: query_counts[k],
            });
        }
    }

    let mut support_images = HashSet::new();
    for it in &ep.support {
        if !support_images.insert(it.image) {
            out.push(Violation::DuplicateImage { image: it.image });
        }
    }
    let mut query_images = HashSet::new();
    for it in &ep.query {
        if support_images.contains(&it.image) {
            out.push(Violation::ImageInSupportAndQuery { image: it.image });
        } else if !query_images.insert(it.image) {
            out.push(Violation::DuplicateImage { image: it.image });
        }
    }
    out
}

/// [`check_episode`] plus dataset-dependent checks: every image belongs to
/// the episode's split and carries its class's label.
pub fn check_episode_against(ep: &Episode, index: &DatasetIndex) -> Vec<Violation> {
    let mut out = check_episode(ep);
    for it in ep.support.iter().chain(&ep.query) {
        let Some(img) = index.images().get(it.image) else {
            continue;
        };
        if img.split != ep.split {
            out.push(Violation::WrongSplit {
                image: it.image,
                expected: ep.split,
                found: img.split,
            });
        }
        if let Some(&expected) = ep.class_identities.get(it.local_class) {
            let found = img.label(ep.spec.granularity);
            if found != expected {
                out.push(Violation::LabelMismatch {
                    image: it.image,
                    local_class: it.local_class,
                    expected,
                    found,
                });
            }
        }
    }
    out
}

/// Maps character labels to labels at another granularity.
pub fn relabel(
    char_labels: &[u32],
    granularity: Granularity,
    table: &AlphabetTable,
) -> Result<Vec<u32>, AlphabetError> {
    char_labels
        .iter()
        .map(|&c| match granularity {
            Granularity::Character => table.entry(c).map(|e| e.char_label),
            Granularity::Row => table.row_of(c),
            Granularity::Column => table.col_of(c),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Character episodes only.
    Baseline,
    /// Half of the episodes use row labels.
    Method1,
    /// Half of the episodes use column labels.
    Method2,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Method1, Method::Method2];

    /// Granularity of the replacement episodes, if any.
    pub fn auxiliary(self) -> Option<Granularity> {
        match self {
            Method::Baseline => None,
            Method::Method1 => Some(Granularity::Row),
            Method::Method2 => Some(Granularity::Column),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Method1 => "method1",
            Method::Method2 => "method2",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Method::Baseline => "Baseline",
            Method::Method1 => "Proposed Method 1 (row)",
            Method::Method2 => "Proposed Method 2 (column)",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EpisodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "method1" | "method-1" | "row" => Ok(Method::Method1),
            "method2" | "method-2" | "column" => Ok(Method::Method2),
            other => Err(EpisodeError::UnknownMethod(other.to_string())),
        }
    }
}

/// How auxiliary episodes are interleaved with character episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// Even positions character, odd positions auxiliary.
    #[default]
    Alternate,
    /// Independent fair coin per episode.
    Bernoulli,
    /// All character episodes first, then all auxiliary ones.
    Block,
}

impl FromStr for MixMode {
    type Err = EpisodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alternate" => Ok(MixMode::Alternate),
            "bernoulli" => Ok(MixMode::Bernoulli),
            "block" => Ok(MixMode::Block),
            other => Err(EpisodeError::UnknownMixMode(other.to_string())),
        }
    }
}

impl fmt::Display for MixMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MixMode::Alternate => "alternate",
            MixMode::Bernoulli => "bernoulli",
            MixMode::Block => "block",
        })
    }
}

/// The per-episode granularity schedule of one training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPlan {
    pub method: Method,
    pub mix_mode: MixMode,
    pub total_episodes: usize,
    pub base_spec: EpisodeSpec,
    pub schedule: Vec<Granularity>,
}

impl StreamPlan {
    pub fn spec_at(&self, episode: usize) -> EpisodeSpec {
        self.base_spec.with_granularity(self.schedule[episode])
    }

    pub fn counts(&self) -> BTreeMap<Granularity, usize> {
        let mut counts = BTreeMap::new();
        for &g in &self.schedule {
            *counts.entry(g).or_insert(0) += 1;
        }
        counts
    }

    pub fn count(&self, granularity: Granularity) -> usize {
        self.schedule.iter().filter(|&&g| g == granularity).count()
    }
}

/// Default schedule: strict alternation starting with a character episode.
pub fn make_stream_plan(
    method: Method,
    total_episodes: usize,
    base_spec: EpisodeSpec,
) -> Result<StreamPlan, EpisodeError> {
    make_stream_plan_with(method, total_episodes, base_spec, MixMode::Alternate, 0)
}

/// `seed` is only consulted by [`MixMode::Bernoulli`].
pub fn make_stream_plan_with(
    method: Method,
    total_episodes: usize,
    base_spec: EpisodeSpec,
    mix_mode: MixMode,
    seed: u64,
) -> Result<StreamPlan, EpisodeError> {
    if total_episodes == 0 {
        return Err(EpisodeError::InvalidSpec(
            "total_episodes must be >= 1".into(),
        ));
    }
    let base_spec = base_spec.with_granularity(Granularity::Character);
    let schedule = match method.auxiliary() {
        None => vec![Granularity::Character; total_episodes],
        Some(aux) => match mix_mode {
            MixMode::Alternate => (0..total_episodes)
                .map(|i| {
                    if i % 2 == 0 {
                        Granularity::Character
                    } else {
                        aux
                    }
                })
                .collect(),
            MixMode::Block => {
                let head = total_episodes.div_ceil(2);
                (0..total_episodes)
                    .map(|i| {
                        if i < head {
                            Granularity::Character
                        } else {
                            aux
                        }
                    })
                    .collect()
            }
            MixMode::Bernoulli => {
                let mut rng = episode_rng(derive_seed(seed, SeedStream::Schedule, 0));
                (0..total_episodes)
                    .map(|_| {
                        if rng.random_bool(0.5) {
                            Granularity::Character
                        } else {
                            aux
                        }
                    })
                    .collect()
            }
        },
    };
    Ok(StreamPlan {
        method,
        mix_mode,
        total_episodes,
        base_spec,
        schedule,
    })
}

/// Independent random streams derived from one run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Train,
    Validation,
    Test,
    Inspect,
    Schedule,
    Init,
}

impl SeedStream {
    fn tag(self) -> u64 {
        match self {
            SeedStream::Train => 0x7472_6169_6e00_0001,
            SeedStream::Validation => 0x7661_6c69_6400_0002,
            SeedStream::Test => 0x7465_7374_0000_0003,
            SeedStream::Inspect => 0x696e_7370_6563_0004,
            SeedStream::Schedule => 0x7363_6865_6400_0005,
            SeedStream::Init => 0x696e_6974_0000_0006,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of `stream`; independent of generation order.
pub fn derive_seed(base: u64, stream: SeedStream, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ stream.tag()) ^ index)
}

pub fn episode_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
