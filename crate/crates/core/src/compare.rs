//! Side-by-side comparison of two branches.
//!
//! A session is a view: it remembers which two branches it pairs and where
//! their histories last agreed, and reads everything else from the store on
//! demand. It only touches a branch when asked to run it.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use rust_decimal::{Decimal, RoundingStrategy};
use serde::{Deserialize, Serialize, Serializer};

use crate::branchstore::{BranchId, BranchStore, BranchTree, StoreError};
use crate::canonical::{self, FORMAT_VERSION};
use crate::model::{CommodityId, Tick, TickRecord};

const GAP_DP: u32 = 8;

/// Relative price gap, fixed at eight decimal places.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Gap(Decimal);

impl Gap {
    pub fn new(value: Decimal) -> Self {
        Gap(value.round_dp_with_strategy(GAP_DP, RoundingStrategy::MidpointNearestEven))
    }

    pub fn value(self) -> Decimal {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0.is_zero()
    }
}

impl fmt::Display for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.8}", self.0)
    }
}

impl fmt::Debug for Gap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for Gap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gap {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse::<Decimal>().map(Gap::new).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pane {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PaneState {
    Running,
    Paused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlAction {
    Run { n_ticks: u64 },
    Pause,
}

/// Serializable view of a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonSession {
    pub session_id: String,
    pub left: BranchId,
    pub right: BranchId,
    pub common_ancestor_tick: Tick,
    pub left_state: PaneState,
    pub right_state: PaneState,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CompareError {
    #[error("a branch cannot be compared with itself ({0})")]
    SameBranch(BranchId),
    #[error("branches {0} and {1} share no ancestor")]
    NoCommonAncestor(BranchId, BranchId),
    #[error("unknown commodity {0}")]
    UnknownCommodity(CommodityId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Lowest common ancestor of `a` and `b`, and the last tick both histories
/// share: the earliest fork tick on either path below that ancestor.
pub fn common_ancestor(tree: &BranchTree, a: &BranchId, b: &BranchId) -> Result<(BranchId, Tick), CompareError> {
    for id in [a, b] {
        if !tree.nodes.contains_key(id) {
            return Err(StoreError::UnknownBranch(id.clone()).into());
        }
    }
    let left = tree.lineage(a);
    let right = tree.lineage(b);
    let Some(lca) = left.iter().find(|l| right.iter().any(|r| r.branch_id == l.branch_id)) else {
        return Err(CompareError::NoCommonAncestor(a.clone(), b.clone()));
    };
    let below = |path: &[&crate::branchstore::Branch]| -> Option<Tick> {
        path.iter()
            .take_while(|n| n.branch_id != lca.branch_id)
            .map(|n| n.fork_tick)
            .min()
    };
    let tick = match (below(&left), below(&right)) {
        (Some(x), Some(y)) => x.min(y),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(CompareError::SameBranch(a.clone())),
    };
    Ok((lca.branch_id.clone(), tick))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapPoint {
    pub tick: Tick,
    pub gap: Gap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommodityDivergence {
    pub fork_price: crate::fixed::Price,
    pub series: Vec<GapPoint>,
    pub first_divergence_tick: Option<Tick>,
    /// Mean of (left − right) / fork price over ticks after the ancestor
    /// tick; positive means the left branch priced higher.
    pub mean_signed_gap: Gap,
    pub max_gap: Gap,
    pub final_gap: Gap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub format_version: u32,
    pub session_id: String,
    pub left: BranchId,
    pub right: BranchId,
    pub common_ancestor_tick: Tick,
    /// Last tick present on both sides.
    pub compared_through: Tick,
    /// First tick whose state hashes differ.
    pub first_divergence_tick: Option<Tick>,
    pub commodities: BTreeMap<CommodityId, CommodityDivergence>,
    pub cumulative_trade_count_delta: u64,
    pub cumulative_post_count_delta: u64,
    pub summary: Vec<String>,
}

impl DivergenceReport {
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_string(self).expect("report serializes")
    }
}

/// Both sides' records over the shared range, read once.
struct Paired {
    ancestor: Tick,
    left: Vec<TickRecord>,
    right: Vec<TickRecord>,
}

impl Paired {
    fn load(store: &BranchStore, left: &BranchId, right: &BranchId, ancestor: Tick) -> Result<Self, StoreError> {
        let through = store.branch(left)?.head_tick.min(store.branch(right)?.head_tick);
        Ok(Paired {
            ancestor,
            left: store.prefix_history(left, Tick::ZERO, through)?,
            right: store.prefix_history(right, Tick::ZERO, through)?,
        })
    }

    fn through(&self) -> Tick {
        Tick(self.left.len() as u64 - 1)
    }

    fn after_ancestor(&self) -> impl Iterator<Item = (&TickRecord, &TickRecord)> {
        let start = self.ancestor.0 as usize;
        self.left.iter().zip(&self.right).skip(start)
    }

    fn first_hash_divergence(&self) -> Option<Tick> {
        self.left
            .iter()
            .zip(&self.right)
            .find(|(l, r)| l.state_hash != r.state_hash)
            .map(|(l, _)| l.tick)
    }

    fn divergence(&self, commodity: &CommodityId) -> Result<CommodityDivergence, CompareError> {
        commodity_divergence(&self.left, &self.right, self.ancestor, commodity)
    }
}

/// Gap series and summary statistics for one commodity. `left` and `right`
/// are both trajectories indexed by tick from 0; only ticks present on both
/// sides, starting at `ancestor`, are compared.
pub fn commodity_divergence(
    left: &[TickRecord],
    right: &[TickRecord],
    ancestor: Tick,
    commodity: &CommodityId,
) -> Result<CommodityDivergence, CompareError> {
    let base = left
        .get(ancestor.0 as usize)
        .or(left.last())
        .and_then(|r| r.price(commodity))
        .ok_or_else(|| CompareError::UnknownCommodity(commodity.clone()))?;
    let denom = base.to_decimal();
    let mut series = Vec::new();
    let mut signed_sum = Decimal::ZERO;
    let mut signed_n = 0u32;
    for (l, r) in left.iter().zip(right).skip(ancestor.0 as usize) {
        let (Some(pl), Some(pr)) = (l.price(commodity), r.price(commodity)) else {
            return Err(CompareError::UnknownCommodity(commodity.clone()));
        };
        let diff = pl.to_decimal() - pr.to_decimal();
        series.push(GapPoint {
            tick: l.tick,
            gap: Gap::new(diff.abs() / denom),
        });
        if l.tick > ancestor {
            signed_sum += diff / denom;
            signed_n += 1;
        }
    }
    let mean = if signed_n == 0 {
        Decimal::ZERO
    } else {
        signed_sum / Decimal::from(signed_n)
    };
    Ok(CommodityDivergence {
        fork_price: base,
        first_divergence_tick: series.iter().find(|p| !p.gap.is_zero()).map(|p| p.tick),
        mean_signed_gap: Gap::new(mean),
        max_gap: series.iter().map(|p| p.gap).max().unwrap_or_default(),
        final_gap: series.last().map(|p| p.gap).unwrap_or_default(),
        series,
    })
}

/// A pair of branches under observation, with per-pane run state.
#[derive(Debug)]
pub struct Session {
    session_id: String,
    left: BranchId,
    right: BranchId,
    common_ancestor_tick: Tick,
    panes: Mutex<[PaneState; 2]>,
}

impl Session {
    /// Pairs two branches of the same store; both panes start paused.
    pub fn open(
        store: &BranchStore,
        session_id: impl Into<String>,
        left: BranchId,
        right: BranchId,
    ) -> Result<Self, CompareError> {
        if left == right {
            return Err(CompareError::SameBranch(left));
        }
        let (_, tick) = common_ancestor(&store.tree(), &left, &right)?;
        Ok(Session {
            session_id: session_id.into(),
            left,
            right,
            common_ancestor_tick: tick,
            panes: Mutex::new([PaneState::Paused; 2]),
        })
    }

    pub fn id(&self) -> &str {
        &self.session_id
    }

    pub fn branch(&self, pane: Pane) -> &BranchId {
        match pane {
            Pane::Left => &self.left,
            Pane::Right => &self.right,
        }
    }

    pub fn view(&self) -> ComparisonSession {
        let panes = *self.panes.lock().unwrap_or_else(|p| p.into_inner());
        ComparisonSession {
            session_id: self.session_id.clone(),
            left: self.left.clone(),
            right: self.right.clone(),
            common_ancestor_tick: self.common_ancestor_tick,
            left_state: panes[0],
            right_state: panes[1],
        }
    }

    fn set(&self, pane: Pane, state: PaneState) {
        self.panes.lock().unwrap_or_else(|p| p.into_inner())[pane as usize] = state;
    }

    /// RUN blocks until the advance finishes or is paused; PAUSE returns at
    /// once and takes effect at the next tick boundary.
    pub fn control(
        &self,
        store: &BranchStore,
        pane: Pane,
        action: ControlAction,
    ) -> Result<(ComparisonSession, Vec<TickRecord>), CompareError> {
        let branch = self.branch(pane);
        match action {
            ControlAction::Run { n_ticks } => {
                // Claims the branch inside advance; BranchBusy surfaces here.
                self.set(pane, PaneState::Running);
                let result = store.advance(branch, n_ticks);
                self.set(pane, PaneState::Paused);
                let records = result?;
                Ok((self.view(), records))
            }
            ControlAction::Pause => {
                store.pause(branch)?;
                Ok((self.view(), Vec::new()))
            }
        }
    }

    fn paired(&self, store: &BranchStore) -> Result<Paired, CompareError> {
        Ok(Paired::load(store, &self.left, &self.right, self.common_ancestor_tick)?)
    }

    pub fn divergence_series(&self, store: &BranchStore, commodity: &CommodityId) -> Result<Vec<GapPoint>, CompareError> {
        Ok(self.paired(store)?.divergence(commodity)?.series)
    }

    /// With `epsilon` zero, the first tick whose state hashes differ;
    /// otherwise the first tick where some commodity's gap exceeds it.
    pub fn first_divergence_tick(&self, store: &BranchStore, epsilon: Decimal) -> Result<Option<Tick>, CompareError> {
        let paired = self.paired(store)?;
        if epsilon <= Decimal::ZERO {
            return Ok(paired.first_hash_divergence());
        }
        let mut first: Option<Tick> = None;
        for commodity in store.scenario().prices.keys() {
            let hit = paired
                .divergence(commodity)?
                .series
                .into_iter()
                .find(|p| p.gap.value() > epsilon)
                .map(|p| p.tick);
            first = match (first, hit) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
        }
        Ok(first)
    }

    pub fn report(&self, store: &BranchStore) -> Result<DivergenceReport, CompareError> {
        let paired = self.paired(store)?;
        let mut commodities = BTreeMap::new();
        let mut summary = Vec::new();
        for commodity in store.scenario().prices.keys() {
            let d = paired.divergence(commodity)?;
            summary.push(match d.first_divergence_tick {
                None => format!("{commodity}: no divergence"),
                Some(t) => {
                    let lead = match d.mean_signed_gap.value().cmp(&Decimal::ZERO) {
                        std::cmp::Ordering::Greater => "left higher",
                        std::cmp::Ordering::Less => "right higher",
                        std::cmp::Ordering::Equal => "no net lead",
                    };
                    format!(
                        "{commodity}: diverges at tick {t}; mean signed gap {} ({lead}); max gap {}",
                        d.mean_signed_gap, d.max_gap
                    )
                }
            });
            commodities.insert(commodity.clone(), d);
        }
        let (mut trades, mut posts) = (0u64, 0u64);
        for (l, r) in paired.after_ancestor() {
            trades += l.trade_count.abs_diff(r.trade_count);
            posts += l.post_count.abs_diff(r.post_count);
        }
        Ok(DivergenceReport {
            format_version: FORMAT_VERSION,
            session_id: self.session_id.clone(),
            left: self.left.clone(),
            right: self.right.clone(),
            common_ancestor_tick: self.common_ancestor_tick,
            compared_through: paired.through(),
            first_divergence_tick: paired.first_hash_divergence(),
            commodities,
            cumulative_trade_count_delta: trades,
            cumulative_post_count_delta: posts,
            summary,
        })
    }
}
