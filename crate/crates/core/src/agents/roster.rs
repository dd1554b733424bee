use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fixed::{Fixed, Price};
use crate::model::{AgentId, CommodityId, IdError, Portfolio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Momentum,
    Contrarian,
    Fundamentalist,
    Noise,
    EventFollower,
    Llm,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Momentum => "momentum",
            Strategy::Contrarian => "contrarian",
            Strategy::Fundamentalist => "fundamentalist",
            Strategy::Noise => "noise",
            Strategy::EventFollower => "event follower",
            Strategy::Llm => "language model",
        })
    }
}

/// Tunables for a strategy. Which fields are required depends on the strategy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyParams {
    /// Fraction of capacity committed per trade, in (0, 1].
    pub aggressiveness: Fixed,
    /// Base probability of posting, scaled by |sentiment|; in [0, 1].
    pub post_propensity: Fixed,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<Fixed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookback: Option<u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub anchors: BTreeMap<CommodityId, Price>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trade_probability: Option<Fixed>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialPortfolio {
    pub cash: Fixed,
    pub holdings: BTreeMap<CommodityId, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: AgentId,
    pub display_name: String,
    pub strategy: Strategy,
    pub params: StrategyParams,
    pub initial_portfolio: InitialPortfolio,
}

impl AgentProfile {
    pub fn portfolio(&self) -> Portfolio {
        Portfolio {
            agent_id: self.agent_id.clone(),
            cash: self.initial_portfolio.cash,
            holdings: self.initial_portfolio.holdings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RosterError {
    #[error("roster is empty")]
    Empty,
    #[error("duplicate agent id {0}")]
    DuplicateAgent(AgentId),
    #[error("agent {agent}: {reason}")]
    Profile { agent: AgentId, reason: String },
    #[error(transparent)]
    Id(#[from] IdError),
}

/// Profiles sorted by agent id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentRoster {
    profiles: Vec<AgentProfile>,
}

impl AgentRoster {
    pub fn new(mut profiles: Vec<AgentProfile>) -> Result<Self, RosterError> {
        if profiles.is_empty() {
            return Err(RosterError::Empty);
        }
        profiles.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));
        for pair in profiles.windows(2) {
            if pair[0].agent_id == pair[1].agent_id {
                return Err(RosterError::DuplicateAgent(pair[0].agent_id.clone()));
            }
        }
        Ok(AgentRoster { profiles })
    }

    pub fn profiles(&self) -> &[AgentProfile] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn has_language_agents(&self) -> bool {
        self.profiles.iter().any(|p| p.strategy == Strategy::Llm)
    }

    /// Checks every profile against the scenario's commodity set.
    pub fn validate(&self, commodities: &BTreeSet<CommodityId>) -> Result<(), RosterError> {
        if self.profiles.is_empty() {
            return Err(RosterError::Empty);
        }
        for profile in &self.profiles {
            validate_profile(profile, commodities).map_err(|reason| RosterError::Profile {
                agent: profile.agent_id.clone(),
                reason,
            })?;
        }
        Ok(())
    }
}

fn validate_profile(profile: &AgentProfile, commodities: &BTreeSet<CommodityId>) -> Result<(), String> {
    let p = &profile.params;
    let one = Fixed::one();
    if !p.aggressiveness.is_positive() || p.aggressiveness > one {
        return Err("aggressiveness must lie in (0, 1]".into());
    }
    if p.post_propensity.is_negative() || p.post_propensity > one {
        return Err("post_propensity must lie in [0, 1]".into());
    }
    if profile.initial_portfolio.cash.is_negative() {
        return Err("initial cash must be >= 0".into());
    }
    if let Some(c) = profile
        .initial_portfolio
        .holdings
        .keys()
        .find(|c| !commodities.contains(*c))
    {
        return Err(format!("holding in unknown commodity {c}"));
    }
    let need_threshold = || match p.threshold {
        Some(t) if !t.is_negative() => Ok(()),
        _ => Err(format!("{} strategy requires a non-negative threshold", profile.strategy)),
    };
    match profile.strategy {
        Strategy::Momentum | Strategy::Contrarian => {
            need_threshold()?;
            if p.lookback.unwrap_or(0) == 0 {
                return Err(format!("{} strategy requires lookback >= 1", profile.strategy));
            }
        }
        Strategy::Fundamentalist => {
            need_threshold()?;
            if p.anchors.is_empty() {
                return Err("fundamentalist strategy requires anchor prices".into());
            }
            if let Some(c) = p.anchors.keys().find(|c| !commodities.contains(*c)) {
                return Err(format!("anchor for unknown commodity {c}"));
            }
        }
        Strategy::EventFollower => need_threshold()?,
        Strategy::Noise => match p.trade_probability {
            Some(q) if !q.is_negative() && q <= one => {}
            _ => return Err("noise strategy requires trade_probability in [0, 1]".into()),
        },
        Strategy::Llm => {}
    }
    Ok(())
}

fn fx(s: &str) -> Fixed {
    s.parse().expect("literal")
}

fn px(s: &str) -> Price {
    Price::new(fx(s)).expect("positive literal")
}

fn holdings(oil: u64, gold: u64, wheat: u64) -> BTreeMap<CommodityId, u64> {
    [("OIL", oil), ("GOLD", gold), ("WHEAT", wheat)]
        .into_iter()
        .map(|(c, n)| (CommodityId::new(c).expect("static symbol"), n))
        .collect()
}

fn anchors(oil: &str, gold: &str, wheat: &str) -> BTreeMap<CommodityId, Price> {
    [("OIL", oil), ("GOLD", gold), ("WHEAT", wheat)]
        .into_iter()
        .map(|(c, v)| (CommodityId::new(c).expect("static symbol"), px(v)))
        .collect()
}

/// The fourteen-agent trading community used by the default scenario:
/// three momentum, three contrarian, three fundamentalist, two noise and
/// three event-following traders over OIL, GOLD and WHEAT.
pub fn default_roster() -> AgentRoster {
    struct Row {
        id: &'static str,
        name: &'static str,
        strategy: Strategy,
        aggressiveness: &'static str,
        post: &'static str,
        threshold: Option<&'static str>,
        lookback: Option<u64>,
        anchors: Option<(&'static str, &'static str, &'static str)>,
        trade_probability: Option<&'static str>,
        cash: &'static str,
        holdings: (u64, u64, u64),
    }
    use Strategy::*;
    let row = |id, name, strategy, aggressiveness, post, cash, holdings| Row {
        id,
        name,
        strategy,
        aggressiveness,
        post,
        threshold: None,
        lookback: None,
        anchors: None,
        trade_probability: None,
        cash,
        holdings,
    };
    let rows = vec![
        Row { threshold: Some("0.0200"), lookback: Some(5), ..row("mom-01", "Avery Chen", Momentum, "0.0100", "0.3000", "20000", (60, 4, 900)) },
        Row { threshold: Some("0.0250"), lookback: Some(8), ..row("mom-02", "Blake Osei", Momentum, "0.0080", "0.2000", "26000", (45, 6, 700)) },
        Row { threshold: Some("0.0300"), lookback: Some(12), ..row("mom-03", "Carmen Ruiz", Momentum, "0.0120", "0.4000", "18000", (80, 3, 1200)) },
        Row { threshold: Some("0.0150"), lookback: Some(4), ..row("con-01", "Dmitri Volkov", Contrarian, "0.0150", "0.2000", "24000", (70, 5, 800)) },
        Row { threshold: Some("0.0200"), lookback: Some(6), ..row("con-02", "Esi Mensah", Contrarian, "0.0200", "0.3000", "30000", (55, 7, 650)) },
        Row { threshold: Some("0.0300"), lookback: Some(10), ..row("con-03", "Farid Haddad", Contrarian, "0.0120", "0.1000", "22000", (90, 2, 1500)) },
        Row { threshold: Some("0.0200"), anchors: Some(("82.0000", "1880.0000", "6.6000")), ..row("fun-01", "Greta Lind", Fundamentalist, "0.0500", "0.2000", "35000", (100, 8, 1000)) },
        Row { threshold: Some("0.0250"), anchors: Some(("78.0000", "1920.0000", "6.4000")), ..row("fun-02", "Hiro Tanaka", Fundamentalist, "0.0600", "0.1500", "32000", (120, 6, 1100)) },
        Row { threshold: Some("0.0150"), anchors: Some(("80.5000", "1895.0000", "6.5500")), ..row("fun-03", "Ines Duarte", Fundamentalist, "0.0400", "0.2500", "40000", (75, 9, 950)) },
        Row { trade_probability: Some("0.3000"), ..row("noi-01", "Jonah Reyes", Noise, "0.0060", "0.1000", "15000", (40, 2, 500)) },
        Row { trade_probability: Some("0.2000"), ..row("noi-02", "Kaia Novak", Noise, "0.0080", "0.1000", "16000", (50, 3, 600)) },
        Row { threshold: Some("0.1000"), ..row("evt-01", "Leo Martins", EventFollower, "0.0200", "0.6000", "28000", (65, 4, 850)) },
        Row { threshold: Some("0.2000"), ..row("evt-02", "Mira Kapoor", EventFollower, "0.0300", "0.8000", "21000", (85, 5, 750)) },
        Row { threshold: Some("0.3000"), ..row("evt-03", "Nils Berg", EventFollower, "0.0200", "0.5000", "33000", (110, 7, 1300)) },
    ];
    let profiles = rows
        .into_iter()
        .map(|r| AgentProfile {
            agent_id: AgentId::new(r.id).expect("static id"),
            display_name: r.name.to_string(),
            strategy: r.strategy,
            params: StrategyParams {
                aggressiveness: fx(r.aggressiveness),
                post_propensity: fx(r.post),
                threshold: r.threshold.map(fx),
                lookback: r.lookback,
                anchors: r.anchors.map(|(o, g, w)| anchors(o, g, w)).unwrap_or_default(),
                trade_probability: r.trade_probability.map(fx),
            },
            initial_portfolio: InitialPortfolio {
                cash: fx(r.cash),
                holdings: holdings(r.holdings.0, r.holdings.1, r.holdings.2),
            },
        })
        .collect();
    AgentRoster::new(profiles).expect("default roster is well formed")
}
