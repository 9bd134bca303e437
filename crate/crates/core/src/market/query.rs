use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::ChainState;

use super::{AssetRecord, AssetStatus, BookingState, Location, Window};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("bad filter: {0}")]
    BadFilter(String),
}

/// Axis-aligned box in microdegrees, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub lat_min_e6: i64,
    pub lat_max_e6: i64,
    pub lon_min_e6: i64,
    pub lon_max_e6: i64,
}

impl BoundingBox {
    pub fn from_degrees(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Self {
        let lo = Location::from_degrees(lat_min, lon_min);
        let hi = Location::from_degrees(lat_max, lon_max);
        BoundingBox {
            lat_min_e6: lo.lat_e6,
            lat_max_e6: hi.lat_e6,
            lon_min_e6: lo.lon_e6,
            lon_max_e6: hi.lon_e6,
        }
    }

    pub fn contains(&self, loc: &Location) -> bool {
        (self.lat_min_e6..=self.lat_max_e6).contains(&loc.lat_e6)
            && (self.lon_min_e6..=self.lon_max_e6).contains(&loc.lon_e6)
    }
}

impl std::str::FromStr for BoundingBox {
    type Err = String;

    /// `lat_min,lat_max,lon_min,lon_max` in degrees.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [a, b, c, d] => Ok(BoundingBox::from_degrees(*a, *b, *c, *d)),
            _ => Err(format!("expected 4 comma-separated numbers, got {}", parts.len())),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetFilter {
    pub bbox: Option<BoundingBox>,
    pub price_min: Option<u64>,
    pub price_max: Option<u64>,
    /// Keeps assets that could accept a booking for exactly this window.
    pub window: Option<Window>,
}

impl AssetFilter {
    pub fn validate(&self) -> Result<(), QueryError> {
        if let Some(b) = &self.bbox {
            if b.lat_min_e6 > b.lat_max_e6 || b.lon_min_e6 > b.lon_max_e6 {
                return Err(QueryError::BadFilter("bounding box min exceeds max".into()));
            }
        }
        if let (Some(lo), Some(hi)) = (self.price_min, self.price_max) {
            if lo > hi {
                return Err(QueryError::BadFilter("price_min exceeds price_max".into()));
            }
        }
        if let Some(w) = &self.window {
            if !w.is_valid() {
                return Err(QueryError::BadFilter("window end must be after start".into()));
            }
        }
        Ok(())
    }
}

fn window_free(state: &ChainState, asset: &AssetRecord, window: &Window) -> bool {
    asset.availability.iter().any(|a| a.covers(window))
        && !state.bookings.values().any(|b| {
            b.asset_id == asset.asset_id
                && b.state != BookingState::Cancelled
                && b.window.overlaps(window)
        })
}

/// Listed assets matching every present clause, ordered by asset id.
pub fn query_assets(state: &ChainState, filter: &AssetFilter) -> Result<Vec<AssetRecord>, QueryError> {
    filter.validate()?;
    Ok(state
        .assets
        .values()
        .filter(|a| a.status == AssetStatus::Listed)
        .filter(|a| filter.bbox.is_none_or(|b| b.contains(&a.location)))
        .filter(|a| filter.price_min.is_none_or(|p| a.price_per_tick >= p))
        .filter(|a| filter.price_max.is_none_or(|p| a.price_per_tick <= p))
        .filter(|a| filter.window.is_none_or(|w| window_free(state, a, &w)))
        .cloned()
        .collect())
}
