//! Two-hop fiat conversion through the ledger token. Fiat never touches the
//! chain.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxError {
    #[error("unknown currency {0}")]
    UnknownCurrency(String),
    #[error("invalid rate table: {0}")]
    BadTable(String),
    #[error("converted amount does not fit in 128 bits")]
    Overflow,
}

impl FxError {
    pub fn code(&self) -> &'static str {
        match self {
            FxError::UnknownCurrency(_) => "UnknownCurrency",
            FxError::BadTable(_) => "BadTable",
            FxError::Overflow => "Overflow",
        }
    }
}

/// Rates are exact rationals written as `"n/d"` or `"n"`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FxRateTable {
    /// Tokens received per unit of fiat.
    #[serde(with = "rate_map")]
    pub to_token: BTreeMap<String, BigRational>,
    /// Fiat received per token.
    #[serde(with = "rate_map")]
    pub from_token: BTreeMap<String, BigRational>,
    #[serde(default)]
    pub fee_bps: u32,
}

impl FxRateTable {
    pub fn validate(&self) -> Result<(), FxError> {
        if self.fee_bps > 10_000 {
            return Err(FxError::BadTable("fee_bps exceeds 10000".into()));
        }
        let positive = |r: &BigRational| r.is_positive();
        if let Some((c, _)) = self
            .to_token
            .iter()
            .chain(&self.from_token)
            .find(|(_, r)| !positive(r))
        {
            return Err(FxError::BadTable(format!("rate for {c} must be > 0")));
        }
        Ok(())
    }

    /// Identity rates for each code, no fee.
    pub fn identity<'a>(codes: impl IntoIterator<Item = &'a str>) -> Self {
        let one = BigRational::from_integer(1.into());
        let mut t = FxRateTable::default();
        for c in codes {
            t.to_token.insert(c.to_string(), one.clone());
            t.from_token.insert(c.to_string(), one.clone());
        }
        t
    }
}

mod rate_map {
    use std::collections::BTreeMap;

    use num_rational::BigRational;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, BigRational>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k, v.to_string())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, BigRational>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                let r = v.trim().parse::<BigRational>().map_err(|_| D::Error::custom(format!("bad rate {v:?}")))?;
                Ok((k, r))
            })
            .collect()
    }
}

/// `floor(amount * rate(from -> token) * rate(token -> to) * (1 - fee))`,
/// exact until the final floor.
pub fn convert_fiat(amount: u128, from: &str, to: &str, table: &FxRateTable) -> Result<u128, FxError> {
    table.validate()?;
    let r1 = table
        .to_token
        .get(from)
        .ok_or_else(|| FxError::UnknownCurrency(from.to_string()))?;
    let r2 = table
        .from_token
        .get(to)
        .ok_or_else(|| FxError::UnknownCurrency(to.to_string()))?;
    let tokens = BigRational::from_integer(BigInt::from(amount)) * r1;
    let fee = BigRational::new(BigInt::from(10_000 - table.fee_bps), BigInt::from(10_000));
    let out = (tokens * r2 * fee).floor().to_integer();
    if out.is_zero() {
        return Ok(0);
    }
    out.to_u128().ok_or(FxError::Overflow)
}
