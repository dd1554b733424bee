use std::collections::{BTreeMap, VecDeque};

use rust_decimal::Decimal;

use crate::engine::MarketConfig;
use crate::fixed::{Fixed, Price};
use crate::model::{
    AgentId, CommodityId, MarketMakerBook, Order, Portfolio, RejectedOrder, Side, Tick, Trade,
};

const MARKET_MAKER_REASONING: &str = "market maker absorbs residual order flow";

/// Result of one clearing round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Clearing {
    pub trades: Vec<Trade>,
    /// Accepted buy quantity minus accepted sell quantity, per commodity.
    pub net_demand: BTreeMap<CommodityId, i64>,
    pub rejected: Vec<RejectedOrder>,
}

struct Resting<'a> {
    order: &'a Order,
    remaining: u64,
}

/// Matches orders at the current price.
///
/// Orders are validated in agent-id order against running balances, so an
/// agent submitting several orders cannot overspend. Accepted buys and sells
/// cross pairwise in agent-id order; the leftover on either side trades
/// against the market maker.
pub fn clear_market(
    tick: Tick,
    orders: &[Order],
    portfolios: &BTreeMap<AgentId, Portfolio>,
    prices: &BTreeMap<CommodityId, Price>,
) -> Clearing {
    let mut sorted: Vec<&Order> = orders.iter().collect();
    sorted.sort_by(|a, b| a.agent_id.cmp(&b.agent_id));

    let mut cash_left: BTreeMap<&AgentId, Fixed> = BTreeMap::new();
    let mut held_left: BTreeMap<(&AgentId, &CommodityId), u64> = BTreeMap::new();
    let mut sides_taken: BTreeMap<(&AgentId, &CommodityId), Side> = BTreeMap::new();
    let mut books: BTreeMap<&CommodityId, (Vec<&Order>, Vec<&Order>)> = BTreeMap::new();
    let mut clearing = Clearing {
        net_demand: prices.keys().map(|c| (c.clone(), 0)).collect(),
        ..Clearing::default()
    };

    for order in sorted {
        let reject = |reason: String| RejectedOrder {
            order: order.clone(),
            reason,
        };
        let Some(portfolio) = portfolios.get(&order.agent_id) else {
            clearing.rejected.push(reject(format!("unknown agent {}", order.agent_id)));
            continue;
        };
        let Some(price) = prices.get(&order.commodity) else {
            clearing.rejected.push(reject(format!("unknown commodity {}", order.commodity)));
            continue;
        };
        match (order.side, order.quantity) {
            (Side::Hold, 0) => continue,
            (Side::Hold, _) => {
                clearing.rejected.push(reject("HOLD order with nonzero quantity".into()));
                continue;
            }
            (_, 0) => {
                clearing.rejected.push(reject(format!("{} order with zero quantity", order.side)));
                continue;
            }
            _ => {}
        }
        let key = (&order.agent_id, &order.commodity);
        if let Some(prev) = sides_taken.get(&key) {
            if *prev != order.side {
                clearing
                    .rejected
                    .push(reject("conflicts with an opposite order in the same round".into()));
                continue;
            }
        }
        match order.side {
            Side::Buy => {
                let cash = cash_left.entry(&order.agent_id).or_insert(portfolio.cash);
                let cost = price.value().mul_qty(order.quantity);
                if cost > *cash {
                    clearing
                        .rejected
                        .push(reject(format!("cost {cost} exceeds available cash {cash}")));
                    continue;
                }
                *cash -= cost;
                books.entry(&order.commodity).or_default().0.push(order);
            }
            Side::Sell => {
                let held = held_left
                    .entry(key)
                    .or_insert_with(|| portfolio.holding(&order.commodity));
                if order.quantity > *held {
                    clearing.rejected.push(reject(format!(
                        "sell {} exceeds holding {}",
                        order.quantity, held
                    )));
                    continue;
                }
                *held -= order.quantity;
                books.entry(&order.commodity).or_default().1.push(order);
            }
            Side::Hold => unreachable!(),
        }
        sides_taken.insert(key, order.side);
    }

    let mut seq = 0usize;
    let mut next_id = || {
        seq += 1;
        format!("T{}-{:04}", tick.0, seq)
    };
    let market_maker = AgentId::market_maker();

    for (commodity, (buys, sells)) in books {
        let price = prices[commodity];
        let bought: u64 = buys.iter().map(|o| o.quantity).sum();
        let sold: u64 = sells.iter().map(|o| o.quantity).sum();
        clearing
            .net_demand
            .insert(commodity.clone(), bought as i64 - sold as i64);

        let mut buy_queue: VecDeque<Resting> = buys
            .into_iter()
            .map(|order| Resting { order, remaining: order.quantity })
            .collect();
        let mut sell_queue: VecDeque<Resting> = sells
            .into_iter()
            .map(|order| Resting { order, remaining: order.quantity })
            .collect();

        while let (Some(buy), Some(sell)) = (buy_queue.front_mut(), sell_queue.front_mut()) {
            let quantity = buy.remaining.min(sell.remaining);
            clearing.trades.push(Trade {
                trade_id: next_id(),
                tick,
                commodity: commodity.clone(),
                buyer_id: buy.order.agent_id.clone(),
                seller_id: sell.order.agent_id.clone(),
                price,
                quantity,
                buyer_reasoning: buy.order.reasoning.clone(),
                seller_reasoning: sell.order.reasoning.clone(),
            });
            buy.remaining -= quantity;
            sell.remaining -= quantity;
            if buy.remaining == 0 {
                buy_queue.pop_front();
            }
            if sell.remaining == 0 {
                sell_queue.pop_front();
            }
        }
        for buy in buy_queue {
            clearing.trades.push(Trade {
                trade_id: next_id(),
                tick,
                commodity: commodity.clone(),
                buyer_id: buy.order.agent_id.clone(),
                seller_id: market_maker.clone(),
                price,
                quantity: buy.remaining,
                buyer_reasoning: buy.order.reasoning.clone(),
                seller_reasoning: MARKET_MAKER_REASONING.into(),
            });
        }
        for sell in sell_queue {
            clearing.trades.push(Trade {
                trade_id: next_id(),
                tick,
                commodity: commodity.clone(),
                buyer_id: market_maker.clone(),
                seller_id: sell.order.agent_id.clone(),
                price,
                quantity: sell.remaining,
                buyer_reasoning: MARKET_MAKER_REASONING.into(),
                seller_reasoning: sell.order.reasoning.clone(),
            });
        }
    }
    clearing
}

/// Applies executed trades to agent portfolios and the market-maker book.
pub fn settle(
    trades: &[Trade],
    portfolios: &mut BTreeMap<AgentId, Portfolio>,
    market_maker: &mut MarketMakerBook,
) {
    for trade in trades {
        let notional = trade.price.value().mul_qty(trade.quantity);
        let qty = trade.quantity as i64;
        if trade.buyer_id.is_market_maker() {
            market_maker.cash -= notional;
            *market_maker.inventory.entry(trade.commodity.clone()).or_insert(0) += qty;
        } else if let Some(p) = portfolios.get_mut(&trade.buyer_id) {
            p.cash -= notional;
            *p.holdings.entry(trade.commodity.clone()).or_insert(0) += trade.quantity;
        }
        if trade.seller_id.is_market_maker() {
            market_maker.cash += notional;
            *market_maker.inventory.entry(trade.commodity.clone()).or_insert(0) -= qty;
        } else if let Some(p) = portfolios.get_mut(&trade.seller_id) {
            p.cash += notional;
            let held = p.holdings.entry(trade.commodity.clone()).or_insert(0);
            *held = held.saturating_sub(trade.quantity);
        }
    }
}

/// `price · (1 + drift + λ · net_demand / liquidity)`, rounded half-to-even
/// and clamped below at `min_price`.
pub fn update_prices(
    prices: &BTreeMap<CommodityId, Price>,
    net_demand: &BTreeMap<CommodityId, i64>,
    drift: &BTreeMap<CommodityId, Decimal>,
    config: &MarketConfig,
) -> BTreeMap<CommodityId, Price> {
    let lambda = config.lambda.to_decimal();
    let floor = Price::new(config.min_price).unwrap_or_else(|| Price::new(Fixed::from_units(1)).unwrap());
    prices
        .iter()
        .map(|(c, price)| {
            let demand = Decimal::from(net_demand.get(c).copied().unwrap_or(0));
            let impact = lambda * demand / config.liquidity_of(c).to_decimal();
            let factor = Decimal::ONE + drift.get(c).copied().unwrap_or_default() + impact;
            let next = Fixed::from_decimal(price.to_decimal() * factor);
            let next = Price::new(next).filter(|p| *p >= floor).unwrap_or(floor);
            (c.clone(), next)
        })
        .collect()
}
