//! Scenario files: the inputs from which a simulation's root branch is built.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::{default_roster, AgentProfile, AgentRoster};
use crate::canonical::FORMAT_VERSION;
use crate::engine::MarketConfig;
use crate::fixed::{Fixed, Price};
use crate::model::{CommodityId, WorldEvent};

pub const DEFAULT_ROSTER_NAME: &str = "default14";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RosterSpec {
    Named(String),
    Profiles(Vec<AgentProfile>),
}

fn default_format_version() -> u32 {
    FORMAT_VERSION
}

fn default_prompt_version() -> String {
    "v1".into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub name: String,
    /// Opening price per commodity.
    pub commodities: BTreeMap<CommodityId, Fixed>,
    #[serde(default)]
    pub market: MarketConfig,
    pub roster: RosterSpec,
    pub seed: u64,
    #[serde(default = "default_prompt_version")]
    pub prompt_version: String,
    /// Events scheduled on the root branch from the start.
    #[serde(default)]
    pub events: Vec<WorldEvent>,
}

impl ScenarioConfig {
    /// OIL/GOLD/WHEAT at 80 / 1900 / 6.5 with the fourteen-agent roster.
    pub fn default14(seed: u64) -> Self {
        let commodities = [("OIL", "80"), ("GOLD", "1900"), ("WHEAT", "6.5")]
            .into_iter()
            .map(|(c, p)| (CommodityId::new(c).expect("static"), p.parse().expect("static")))
            .collect();
        ScenarioConfig {
            format_version: FORMAT_VERSION,
            name: "commodity-market".into(),
            commodities,
            market: MarketConfig::default(),
            roster: RosterSpec::Named(DEFAULT_ROSTER_NAME.into()),
            seed,
            prompt_version: default_prompt_version(),
            events: Vec::new(),
        }
    }

    /// Checks the config and resolves the roster.
    pub fn resolve(&self) -> Result<Scenario, ScenarioError> {
        let mut issues = Vec::new();
        let mut issue = |field: String, message: String| issues.push(FieldIssue { field, message });

        if self.format_version != FORMAT_VERSION {
            issue("format_version".into(), format!("unsupported version {}", self.format_version));
        }
        if self.name.trim().is_empty() {
            issue("name".into(), "must be nonempty".into());
        }
        if self.commodities.is_empty() {
            issue("commodities".into(), "at least one commodity is required".into());
        }
        let mut prices = BTreeMap::new();
        for (c, p) in &self.commodities {
            match Price::new(*p) {
                Some(price) => {
                    prices.insert(c.clone(), price);
                }
                None => issue(format!("commodities.{c}"), format!("initial price must be > 0, got {p}")),
            }
        }
        if let Err(e) = self.market.validate() {
            issue("market".into(), e.to_string());
        }
        if let Some(c) = self.market.liquidity.keys().find(|c| !self.commodities.contains_key(*c)) {
            issue("market.liquidity".into(), format!("unknown commodity {c}"));
        }
        let symbols: BTreeSet<CommodityId> = self.commodities.keys().cloned().collect();
        let roster = match &self.roster {
            RosterSpec::Named(name) if name == DEFAULT_ROSTER_NAME => Some(default_roster()),
            RosterSpec::Named(name) => {
                issue("roster".into(), format!("unknown roster {name:?}"));
                None
            }
            RosterSpec::Profiles(profiles) => match AgentRoster::new(profiles.clone()) {
                Ok(r) => Some(r),
                Err(e) => {
                    issue("roster".into(), e.to_string());
                    None
                }
            },
        };
        if let Some(r) = &roster {
            if let Err(e) = r.validate(&symbols) {
                issue("roster".into(), e.to_string());
            }
        }
        if self.prompt_version.trim().is_empty() {
            issue("prompt_version".into(), "must be nonempty".into());
        }
        let mut seen = BTreeSet::new();
        for (i, e) in self.events.iter().enumerate() {
            if let Err(err) = e.validate() {
                issue(format!("events[{i}]"), err.to_string());
            }
            if let Some(c) = e.impacts.keys().find(|c| !symbols.contains(*c)) {
                issue(format!("events[{i}]"), format!("unknown commodity {c}"));
            }
            if !seen.insert(e.event_id.clone()) {
                issue(format!("events[{i}]"), format!("duplicate event id {}", e.event_id));
            }
        }

        match (issues.is_empty(), roster) {
            (true, Some(roster)) => Ok(Scenario {
                config: self.clone(),
                prices,
                roster,
            }),
            _ => Err(ScenarioError { issues }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldIssue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ScenarioError {
    pub issues: Vec<FieldIssue>,
}

impl fmt::Display for ScenarioError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid scenario: ")?;
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", issue.field, issue.message)?;
        }
        Ok(())
    }
}

/// A validated scenario with its roster resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub prices: BTreeMap<CommodityId, Price>,
    pub roster: AgentRoster,
}

impl Scenario {
    pub fn market(&self) -> &MarketConfig {
        &self.config.market
    }

    pub fn commodity_set(&self) -> BTreeSet<CommodityId> {
        self.prices.keys().cloned().collect()
    }
}
