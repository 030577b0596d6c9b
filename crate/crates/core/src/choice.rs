//! EV-side valuation of charging stations: estimated state of charge on
//! arrival, reachability, expected waiting time, and the monetary utility an
//! EV assigns to charging at a station for a quoted price.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Parameters of the monetary utility an EV user assigns to a charging option.
///
/// Two standard variants exist:
/// * the full model ([`UtilityParams::default`]) prices waiting time and
///   charges for the usable energy fraction of the battery, and
/// * the price-only model ([`UtilityParams::price_only`]) ignores waiting and
///   scales cost by a sensitivity factor `k_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilityParams {
    /// Fixed cost per charging stop, in euro (entry fee, wear, etc.).
    pub fixed_cost_euro: f64,
    /// Value of travel time, in euro per hour of expected waiting.
    pub vtt_euro_per_hour: f64,
    /// Characteristic charging time constant used by the waiting model, in hours.
    pub k_ch_hours: f64,
    /// Fraction of battery capacity billed per unit of SOC purchased.
    pub energy_factor: f64,
    /// Whether expected waiting time enters the utility.
    pub waiting_enabled: bool,
    /// Cost sensitivity applied when waiting is ignored.
    pub k_s: f64,
}

impl Default for UtilityParams {
    fn default() -> Self {
        UtilityParams {
            fixed_cost_euro: 5.0,
            vtt_euro_per_hour: 29.0,
            k_ch_hours: 0.3,
            energy_factor: 0.8,
            waiting_enabled: true,
            k_s: 1.0,
        }
    }
}

impl UtilityParams {
    /// Variant that ranks stations by billed price alone: waiting is ignored
    /// and the full battery capacity is billed per unit of SOC.
    pub fn price_only() -> Self {
        UtilityParams {
            energy_factor: 1.0,
            waiting_enabled: false,
            ..UtilityParams::default()
        }
    }
}

/// Estimated state of charge on arrival after driving `dist_km` starting at
/// `soc`, for a vehicle whose full battery covers `travel_range_km`.
///
/// The estimate is linear in distance and may be negative, which means the
/// station cannot be reached.
pub fn esoc(soc: f64, dist_km: f64, travel_range_km: f64) -> f64 {
    soc - dist_km / travel_range_km
}

/// Whether an estimated arrival SOC makes a station reachable. The boundary
/// is inclusive: an EV arriving with exactly `margin` charge may still charge.
pub fn reachable(esoc: f64, margin: f64) -> bool {
    esoc >= margin
}

/// Expected waiting time, in hours, at a station with `slots` chargers of
/// which `free_slots` are currently unoccupied, when `tentative` EVs
/// (including the one deciding) intend to charge there.
///
/// Three regimes:
/// * enough free slots for every tentative EV: no waiting;
/// * some free slots but more intenders than slots: waiting grows with the
///   crowd and shrinks with total capacity plus free slots;
/// * no free slot: waiting grows with the crowd relative to capacity.
pub fn expected_waiting_hours(
    free_slots: u32,
    tentative: u32,
    slots: u32,
    k_ch_hours: f64,
) -> Result<f64> {
    if slots == 0 {
        return Err(SimError::Domain("station has zero charging slots".into()));
    }
    if free_slots > slots {
        return Err(SimError::Domain(format!(
            "free slots {free_slots} exceed total slots {slots}"
        )));
    }
    let dc = f64::from(free_slots);
    let g = f64::from(tentative);
    let c = f64::from(slots);
    let w = if free_slots > 0 {
        if dc >= g {
            0.0
        } else {
            k_ch_hours * g / (c + dc)
        }
    } else {
        k_ch_hours * (dc.abs() + g) / c
    };
    Ok(w)
}

/// Monetary utility (a negative euro amount) an EV assigns to buying
/// `delta_soc` of charge at `price_eur_kwh` from a battery of
/// `battery_kwh`, expecting to wait `waiting_hours`.
///
/// Cost per unit of SOC is the fixed stop cost amortized over the purchase
/// plus the energy bill; the waiting variant adds the value of expected
/// waiting time.
pub fn monetary_utility(
    price_eur_kwh: f64,
    delta_soc: f64,
    waiting_hours: f64,
    battery_kwh: f64,
    params: &UtilityParams,
) -> Result<f64> {
    if delta_soc <= 0.0 {
        return Err(SimError::Domain(format!(
            "delta_soc must be positive, got {delta_soc}"
        )));
    }
    if price_eur_kwh < 0.0 {
        return Err(SimError::Domain(format!(
            "price must be non-negative, got {price_eur_kwh}"
        )));
    }
    if waiting_hours < 0.0 {
        return Err(SimError::Domain(format!(
            "waiting hours must be non-negative, got {waiting_hours}"
        )));
    }
    let cost_per_soc = (params.fixed_cost_euro
        + price_eur_kwh * delta_soc * params.energy_factor * battery_kwh)
        / delta_soc;
    let u = if params.waiting_enabled {
        -(cost_per_soc + params.vtt_euro_per_hour * waiting_hours)
    } else {
        -params.k_s * cost_per_soc
    };
    Ok(u)
}
