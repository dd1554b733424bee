use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fixed::Fixed;
use crate::model::CommodityId;

/// Market and social-feed parameters for one scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketConfig {
    /// Demand impact coefficient (λ).
    pub lambda: Fixed,
    /// Per-commodity liquidity; commodities missing here use `default_liquidity`.
    #[serde(default)]
    pub liquidity: BTreeMap<CommodityId, Fixed>,
    pub default_liquidity: Fixed,
    pub event_gain: Fixed,
    /// Weight of the feed term in the sentiment blend (β).
    pub contagion: Fixed,
    pub feed_window: u64,
    pub checkpoint_interval: u64,
    pub min_price: Fixed,
    /// Number of past prices kept per commodity for lookback strategies.
    pub history_window: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            lambda: Fixed::from_units(500),
            liquidity: BTreeMap::new(),
            default_liquidity: Fixed::from_int(100),
            event_gain: Fixed::from_units(200),
            contagion: Fixed::from_units(3_000),
            feed_window: 5,
            checkpoint_interval: 10,
            min_price: Fixed::from_units(1),
            history_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Field { field: &'static str, reason: String },
}

impl MarketConfig {
    pub fn liquidity_of(&self, commodity: &CommodityId) -> Fixed {
        self.liquidity
            .get(commodity)
            .copied()
            .unwrap_or(self.default_liquidity)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |field, reason: &str| {
            Err(ConfigError::Field {
                field,
                reason: reason.to_string(),
            })
        };
        if self.lambda.is_negative() {
            return bad("lambda", "must be >= 0");
        }
        if !self.default_liquidity.is_positive() || self.liquidity.values().any(|l| !l.is_positive()) {
            return bad("liquidity", "must be > 0");
        }
        if !self.event_gain.is_positive() {
            return bad("event_gain", "must be > 0");
        }
        if self.contagion.is_negative() || self.contagion > Fixed::one() {
            return bad("contagion", "must lie in [0, 1]");
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval", "must be >= 1");
        }
        if !self.min_price.is_positive() {
            return bad("min_price", "must be > 0");
        }
        if self.history_window < 2 {
            return bad("history_window", "must be >= 2");
        }
        Ok(())
    }
}
