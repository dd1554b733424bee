//! Fixed-point decimal arithmetic for money and bounded scores.
//!
//! Every value carries exactly four fractional digits. Rounding is
//! half-to-even. Values serialize as decimal strings (`"80.0000"`) so the
//! canonical form of a state never depends on float formatting.

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use rust_decimal::{Decimal, MathematicalOps, RoundingStrategy};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Number of fractional digits carried by [`Fixed`].
pub const SCALE: u32 = 4;

/// Signed fixed-point decimal with four fractional digits.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Fixed(Decimal);

impl Fixed {
    pub const ZERO: Fixed = Fixed(Decimal::ZERO);

    /// Rounds `value` half-to-even onto the four-digit grid.
    pub fn from_decimal(value: Decimal) -> Self {
        let mut rounded = value.round_dp_with_strategy(SCALE, RoundingStrategy::MidpointNearestEven);
        rounded.rescale(SCALE);
        Fixed(rounded)
    }

    pub fn from_int(value: i64) -> Self {
        Self::from_decimal(Decimal::from(value))
    }

    /// Builds a value from its raw count of ten-thousandths.
    pub fn from_units(units: i64) -> Self {
        Fixed(Decimal::new(units, SCALE))
    }

    pub fn one() -> Self {
        Self::from_int(1)
    }

    pub fn to_decimal(self) -> Decimal {
        self.0
    }

    pub fn is_positive(self) -> bool {
        self.0 > Decimal::ZERO
    }

    pub fn is_negative(self) -> bool {
        self.0 < Decimal::ZERO
    }

    pub fn is_zero(self) -> bool {
        self.0.is_zero()
    }

    pub fn abs(self) -> Self {
        Fixed(self.0.abs())
    }

    /// Exact product with an integer quantity.
    pub fn mul_qty(self, quantity: u64) -> Self {
        Self::from_decimal(self.0 * Decimal::from(quantity))
    }

    pub fn clamp(self, lo: Fixed, hi: Fixed) -> Self {
        self.max(lo).min(hi)
    }
}

impl fmt::Display for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

impl fmt::Debug for Fixed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid fixed-point literal {0:?}")]
pub struct ParseFixedError(pub String);

impl FromStr for Fixed {
    type Err = ParseFixedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let value = Decimal::from_str_exact(trimmed.trim_start_matches('+'))
            .map_err(|_| ParseFixedError(s.to_string()))?;
        Ok(Self::from_decimal(value))
    }
}

impl Add for Fixed {
    type Output = Fixed;
    fn add(self, rhs: Fixed) -> Fixed {
        Fixed::from_decimal(self.0 + rhs.0)
    }
}

impl Sub for Fixed {
    type Output = Fixed;
    fn sub(self, rhs: Fixed) -> Fixed {
        Fixed::from_decimal(self.0 - rhs.0)
    }
}

impl AddAssign for Fixed {
    fn add_assign(&mut self, rhs: Fixed) {
        *self = *self + rhs;
    }
}

impl SubAssign for Fixed {
    fn sub_assign(&mut self, rhs: Fixed) {
        *self = *self - rhs;
    }
}

impl Neg for Fixed {
    type Output = Fixed;
    fn neg(self) -> Fixed {
        Fixed(-self.0)
    }
}

impl std::iter::Sum for Fixed {
    fn sum<I: Iterator<Item = Fixed>>(iter: I) -> Fixed {
        iter.fold(Fixed::ZERO, |acc, x| acc + x)
    }
}

impl Serialize for Fixed {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format!("{:.4}", self.0))
    }
}

impl<'de> Deserialize<'de> for Fixed {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Int(i64),
            Float(f64),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Int(i) => Ok(Fixed::from_int(i)),
            // Hand-written config files may use JSON numbers.
            Repr::Float(f) => Decimal::from_f64_retain(f)
                .map(Fixed::from_decimal)
                .ok_or_else(|| serde::de::Error::custom(format!("non-finite number {f}"))),
        }
    }
}

/// Strictly positive price, stored as [`Fixed`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Price(Fixed);

impl Price {
    pub fn new(value: Fixed) -> Option<Self> {
        value.is_positive().then_some(Price(value))
    }

    pub fn value(self) -> Fixed {
        self.0
    }

    pub fn to_decimal(self) -> Decimal {
        self.0.to_decimal()
    }
}

impl fmt::Display for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for Price {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl<'de> Deserialize<'de> for Price {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Fixed::deserialize(deserializer)?;
        Price::new(value).ok_or_else(|| serde::de::Error::custom(format!("price must be positive, got {value}")))
    }
}

/// `2^(-elapsed / half_life)`, computed in software decimal arithmetic so the
/// result is identical on every platform. Always strictly positive.
pub fn half_life_decay(elapsed: u64, half_life: u64) -> Decimal {
    let half_life = half_life.max(1);
    let whole = elapsed / half_life;
    let rem = elapsed % half_life;
    let mut value = if rem == 0 {
        Decimal::ONE
    } else {
        let exponent = Decimal::from(rem) / Decimal::from(half_life);
        Decimal::TWO
            .checked_powd(-exponent)
            .unwrap_or(Decimal::ONE)
    };
    for _ in 0..whole.min(96) {
        value /= Decimal::TWO;
    }
    if value.is_zero() {
        Decimal::new(1, 28)
    } else {
        value
    }
}
