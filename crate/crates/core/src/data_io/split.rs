use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dsp::FeatureSample;
use crate::error::{Error, Result};

/// How the trials of each (subject, session) are divided.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitRule {
    /// Explicit trial ids. Every trial of a session must be listed on
    /// exactly one side.
    Trials { train: Vec<u32>, test: Vec<u32> },
    /// The first `round(train_fraction · n)` trials of a session, in trial
    /// id order, train; the rest test.
    Ratio { train_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitProtocol {
    pub name: String,
    pub rule: SplitRule,
}

impl SplitProtocol {
    /// First 9 trials of each session train, the next 6 test.
    pub fn seed() -> Self {
        Self {
            name: "seed".into(),
            rule: SplitRule::Trials {
                train: (0..9).collect(),
                test: (9..15).collect(),
            },
        }
    }

    /// First 16 trials of each session train, the last 8 test.
    pub fn seed_iv() -> Self {
        Self {
            name: "seed_iv".into(),
            rule: SplitRule::Trials {
                train: (0..16).collect(),
                test: (16..24).collect(),
            },
        }
    }

    /// 80% of the trials train, 20% test.
    pub fn deap() -> Self {
        Self::ratio("deap", 0.8)
    }

    pub fn ratio(name: &str, train_fraction: f64) -> Self {
        Self {
            name: name.into(),
            rule: SplitRule::Ratio { train_fraction },
        }
    }

    /// Looks up a named protocol: `seed`, `seed_iv`, `deap`, or `ratio:<f>`.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "seed" => Ok(Self::seed()),
            "seed_iv" => Ok(Self::seed_iv()),
            "deap" => Ok(Self::deap()),
            _ => match name.strip_prefix("ratio:").map(str::parse::<f64>) {
                Some(Ok(f)) => {
                    let p = Self::ratio(name, f);
                    p.validate()?;
                    Ok(p)
                }
                _ => Err(Error::Config(format!("unknown split protocol {name:?}"))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.rule {
            SplitRule::Trials { train, test } => {
                if train.is_empty() || test.is_empty() {
                    return Err(Error::InvalidArgument(format!("protocol {}: empty trial list", self.name)));
                }
                let a: BTreeSet<u32> = train.iter().copied().collect();
                if let Some(t) = test.iter().find(|t| a.contains(t)) {
                    return Err(Error::InvalidArgument(format!(
                        "protocol {}: trial {t} is on both sides",
                        self.name
                    )));
                }
            }
            SplitRule::Ratio { train_fraction } => {
                if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "protocol {}: train fraction {train_fraction} outside (0, 1)",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Splits samples by trial within each (subject, session). Sample order is
/// preserved on both sides.
pub fn apply_split(
    samples: &[FeatureSample],
    protocol: &SplitProtocol,
) -> Result<(Vec<FeatureSample>, Vec<FeatureSample>)> {
    protocol.validate()?;
    let mut sessions: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
    for s in samples {
        sessions.entry((s.subject_id, s.session_id)).or_default().insert(s.trial_id);
    }
    let mut train_trials: BTreeMap<(u32, u32), BTreeSet<u32>> = BTreeMap::new();
    for (key, trials) in &sessions {
        let chosen: BTreeSet<u32> = match &protocol.rule {
            SplitRule::Trials { train, test } => {
                let listed: BTreeSet<u32> = train.iter().chain(test).copied().collect();
                if let Some(t) = listed.iter().find(|t| !trials.contains(t)) {
                    return Err(Error::InvalidArgument(format!(
                        "protocol {}: trial {t} not present for subject {} session {}",
                        protocol.name, key.0, key.1
                    )));
                }
                if let Some(t) = trials.iter().find(|t| !listed.contains(t)) {
                    return Err(Error::InvalidArgument(format!(
                        "protocol {}: trial {t} of subject {} session {} is on neither side",
                        protocol.name, key.0, key.1
                    )));
                }
                train.iter().copied().collect()
            }
            SplitRule::Ratio { train_fraction } => {
                let n = trials.len();
                let k = (train_fraction * n as f64).round() as usize;
                if k == 0 || k == n {
                    return Err(Error::InvalidArgument(format!(
                        "protocol {}: {n} trials leave one side empty for subject {} session {}",
                        protocol.name, key.0, key.1
                    )));
                }
                trials.iter().take(k).copied().collect()
            }
        };
        train_trials.insert(*key, chosen);
    }
    let (train, test): (Vec<FeatureSample>, Vec<FeatureSample>) = samples
        .iter()
        .cloned()
        .partition(|s| train_trials[&(s.subject_id, s.session_id)].contains(&s.trial_id));
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument(format!("protocol {}: empty side", protocol.name)));
    }
    Ok((train, test))
}
