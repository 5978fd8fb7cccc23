//! Local-only denoising strategies used as comparisons for lazy MIL.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncodedSentence, Gradient, ModelParams};
use crate::error::{Error, Result};
use crate::federation::{self, LocalStats, PlatformState, RoundConfig, SelectedInstance, TrainingUnit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DenoiseStrategy {
    /// Cross-platform selection of one sentence per bag.
    #[default]
    #[serde(rename = "lazy_mil")]
    LazyMil,
    /// Each platform picks its own best sentence per local bag.
    #[serde(rename = "one")]
    LocalOne,
    /// Each local bag is represented by the mean of its sentences.
    #[serde(rename = "avg")]
    LocalAvg,
    /// Every sentence trains on its distant label.
    #[serde(rename = "none")]
    NoDenoise,
}

impl DenoiseStrategy {
    pub const ALL: [DenoiseStrategy; 4] =
        [DenoiseStrategy::LazyMil, DenoiseStrategy::LocalOne, DenoiseStrategy::LocalAvg, DenoiseStrategy::NoDenoise];

    pub fn name(self) -> &'static str {
        match self {
            DenoiseStrategy::LazyMil => "lazy_mil",
            DenoiseStrategy::LocalOne => "one",
            DenoiseStrategy::LocalAvg => "avg",
            DenoiseStrategy::NoDenoise => "none",
        }
    }
}

impl fmt::Display for DenoiseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DenoiseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DenoiseStrategy::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown strategy {s:?}; expected one of lazy_mil, one, avg, none")]))
    }
}

/// Local argmax per local bag, kept on the platform.
pub fn local_one_select(platform: &PlatformState, params: &ModelParams) -> Result<Vec<SelectedInstance>> {
    let mut selected: Vec<SelectedInstance> = federation::local_argmax(platform, params)?
        .into_iter()
        .map(|(t, z, _)| SelectedInstance { local_index: z, relation: t.relation })
        .collect();
    selected.sort_unstable();
    Ok(selected)
}

/// Selection for the strategies that need no server round trip. Lazy MIL
/// selects through the protocol in `federation::run_round` instead.
pub fn local_selection(
    strategy: DenoiseStrategy,
    platform: &PlatformState,
    params: &ModelParams,
) -> Result<Vec<SelectedInstance>> {
    match strategy {
        DenoiseStrategy::LazyMil => Err(Error::Protocol {
            platform: platform.id,
            message: "lazy MIL selection requires the denoising round trip".into(),
        }),
        DenoiseStrategy::LocalOne => local_one_select(platform, params),
        DenoiseStrategy::LocalAvg | DenoiseStrategy::NoDenoise => Ok(platform
            .shard
            .iter()
            .enumerate()
            .map(|(z, s)| SelectedInstance { local_index: z, relation: s.triple.relation })
            .collect()),
    }
}

/// Loss and gradient for a bag represented by the mean of its members'
/// sentence vectors.
pub fn avg_bag_gradient(
    params: &ModelParams,
    members: &[&EncodedSentence],
    target: usize,
    dropout_p: f64,
    rng: &mut impl Rng,
) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros_like(params);
    let loss = encoder::group_loss_and_grad(params, members, target, dropout_p, rng, &mut grad)?;
    Ok((loss, grad))
}

/// Training units for one platform under `strategy`.
pub fn training_units(strategy: DenoiseStrategy, platform: &PlatformState) -> Vec<TrainingUnit> {
    match strategy {
        DenoiseStrategy::LocalAvg => {
            let mut units: Vec<TrainingUnit> = platform
                .bags
                .iter()
                .map(|(t, members)| TrainingUnit { members: members.clone(), relation: t.relation })
                .collect();
            units.sort_by_key(|u| u.members[0]);
            units
        }
        _ => platform
            .selected
            .iter()
            .map(|s| TrainingUnit { members: vec![s.local_index], relation: s.relation })
            .collect(),
    }
}

/// Local training on the platform's selection. Returns `None` when there
/// is nothing to train on, in which case the platform does not upload.
pub fn strategy_local_training(
    strategy: DenoiseStrategy,
    platform: &PlatformState,
    params: &ModelParams,
    config: &RoundConfig,
    round: usize,
    lr: f64,
) -> Result<Option<(ModelParams, LocalStats)>> {
    let units = training_units(strategy, platform);
    if units.is_empty() {
        return Ok(None);
    }
    federation::train_units(platform, &units, params, config, round, lr).map(Some)
}
