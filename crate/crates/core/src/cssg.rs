//! Decentralized charging-station selection.
//!
//! Each EV selfishly picks the station maximizing its monetary utility given
//! what every other EV currently intends to do. The solver simulates the
//! decentralized protocol: every dissatisfied EV computes a best response
//! against the partition it last heard, proposals race through a shared
//! mailbox, and the (revision, random stamp) pair picks exactly one winner
//! per round. Because utility only degrades as a station's tentative crowd
//! grows, the race terminates in a stable partition where nobody wants to
//! move unilaterally.

use std::collections::BTreeMap;

use rand::Rng;

use crate::choice::{self, UtilityParams};
use crate::error::{Result, SimError};

/// One EV participating in a selection round.
#[derive(Debug, Clone)]
pub struct SelectingEv {
    pub id: u32,
    pub position_km: f64,
    pub soc: f64,
}

/// One station as the selection game sees it.
#[derive(Debug, Clone)]
pub struct StationState {
    pub id: u32,
    pub location_km: f64,
    pub slots: u32,
    /// Slots currently busy charging. Reduces availability.
    pub charging: u32,
    /// EVs already queued at the station. They no longer re-optimize but
    /// still count toward the expected crowd.
    pub committed: u32,
}

/// A full game instance: free EVs, stations, quoted prices, and the shared
/// valuation parameters.
#[derive(Debug, Clone)]
pub struct GameInstance {
    pub evs: Vec<SelectingEv>,
    pub stations: Vec<StationState>,
    /// `prices[e][s]` quotes station `s` (by index) to EV `e` (by index);
    /// `None` means no offer, which removes the station from that EV's
    /// strategy set.
    pub prices: Vec<Vec<Option<f64>>>,
    pub utility: UtilityParams,
    pub travel_range_km: f64,
    pub battery_kwh: f64,
    pub max_soc: f64,
    /// Minimum acceptable estimated SOC on arrival (usually zero).
    pub reach_margin: f64,
}

/// Result of a converged selection: who charges where, plus the revision
/// counter and tie-breaking stamp of the winning proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// EV id -> station id.
    pub assignment: BTreeMap<u32, u32>,
    pub revision: u64,
    pub stamp: f64,
}

impl Partition {
    /// Station id -> ids of the EVs assigned to it (stations with empty
    /// groups are omitted).
    pub fn groups(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut g: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&ev, &st) in &self.assignment {
            g.entry(st).or_default().push(ev);
        }
        g
    }
}

/// The message an EV broadcasts after revising its local copy of the
/// partition: revision counter, tie-break stamp, the assignment itself
/// (index-based), and which EVs are satisfied with it.
#[derive(Debug, Clone)]
pub struct AgentMessage {
    pub revision: u64,
    pub stamp: f64,
    pub assignment: Vec<Option<usize>>,
    pub satisfied: Vec<bool>,
}

/// Outcome of [`solve`]: the stable partition plus convergence accounting.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub partition: Partition,
    /// Committed partition revisions (improving moves that won their round).
    pub revisions: u64,
    /// Synchronous mailbox rounds swept.
    pub rounds: u64,
}

/// Worst-case number of committed revisions for `n` participating EVs.
pub fn iteration_bound(n_evs: usize) -> u64 {
    let n = n_evs as u64;
    n * (n + 1) / 2
}

/// A station an EV could actually use: ahead of it, reachable on its
/// remaining charge, offering a price, and able to sell it a positive
/// amount of charge.
#[derive(Debug, Clone)]
struct Candidate {
    st_idx: usize,
    price: f64,
    dist_km: f64,
    delta_soc: f64,
}

fn candidate_set(inst: &GameInstance, ev_idx: usize) -> Result<Vec<Candidate>> {
    let ev = &inst.evs[ev_idx];
    let mut out = Vec::new();
    for (s, st) in inst.stations.iter().enumerate() {
        let dist = st.location_km - ev.position_km;
        if dist < 0.0 {
            continue; // already passed; one-way traffic
        }
        let Some(price) = inst.prices[ev_idx][s] else {
            continue;
        };
        let es = choice::esoc(ev.soc, dist, inst.travel_range_km);
        if !choice::reachable(es, inst.reach_margin) {
            continue;
        }
        let delta_soc = inst.max_soc - es;
        if delta_soc <= 0.0 {
            continue; // would arrive already full
        }
        out.push(Candidate {
            st_idx: s,
            price,
            dist_km: dist,
            delta_soc,
        });
    }
    Ok(out)
}

/// Utility of `ev_idx` charging at candidate `cand` when `tentative` EVs
/// (including itself) intend to charge there.
fn candidate_utility(inst: &GameInstance, cand: &Candidate, tentative: u32) -> Result<f64> {
    let st = &inst.stations[cand.st_idx];
    let free = st.slots.saturating_sub(st.charging);
    let w = if inst.utility.waiting_enabled {
        choice::expected_waiting_hours(free, tentative, st.slots, inst.utility.k_ch_hours)?
    } else {
        0.0
    };
    choice::monetary_utility(cand.price, cand.delta_soc, w, inst.battery_kwh, &inst.utility)
}

/// Whether challenger (utility, price, dist, station index) beats the
/// incumbent under the deterministic preference order: higher utility, then
/// lower price, then shorter detour, then lower station id.
fn prefer(
    inst: &GameInstance,
    challenger: (f64, &Candidate),
    incumbent: (f64, &Candidate),
) -> bool {
    let (cu, cc) = challenger;
    let (iu, ic) = incumbent;
    if cu != iu {
        return cu > iu;
    }
    if cc.price != ic.price {
        return cc.price < ic.price;
    }
    if cc.dist_km != ic.dist_km {
        return cc.dist_km < ic.dist_km;
    }
    inst.stations[cc.st_idx].id < inst.stations[ic.st_idx].id
}

fn group_sizes(assignment: &[Option<usize>], n_stations: usize) -> Vec<u32> {
    let mut sizes = vec![0u32; n_stations];
    for a in assignment.iter().flatten() {
        sizes[*a] += 1;
    }
    sizes
}

/// Tentative crowd at candidate `cand` if `ev_idx` moves there, everyone
/// else staying put: the EVs already intending to charge there, plus queued
/// commitments, plus the mover itself.
fn tentative_with_move(
    inst: &GameInstance,
    sizes: &[u32],
    assignment: &[Option<usize>],
    ev_idx: usize,
    cand: &Candidate,
) -> u32 {
    let mut g = sizes[cand.st_idx];
    if assignment[ev_idx] == Some(cand.st_idx) {
        g -= 1;
    }
    g + 1 + inst.stations[cand.st_idx].committed
}

/// Best response of one EV against a fixed assignment of everyone else.
/// Returns the station index to select; equal-utility alternatives never
/// displace the current selection.
fn best_response_idx(
    inst: &GameInstance,
    assignment: &[Option<usize>],
    sizes: &[u32],
    ev_idx: usize,
    candidates: &[Candidate],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(SimError::NoReachableStation {
            ev: inst.evs[ev_idx].id,
        });
    }
    let current = assignment[ev_idx].and_then(|st| candidates.iter().find(|c| c.st_idx == st));
    let mut best: Option<(f64, &Candidate)> = match current {
        Some(c) => {
            let g = tentative_with_move(inst, sizes, assignment, ev_idx, c);
            Some((candidate_utility(inst, c, g)?, c))
        }
        None => None,
    };
    for c in candidates {
        if Some(c.st_idx) == assignment[ev_idx] {
            continue;
        }
        let g = tentative_with_move(inst, sizes, assignment, ev_idx, c);
        let u = candidate_utility(inst, c, g)?;
        best = match best {
            None => Some((u, c)),
            // A deviation must strictly beat the current selection; among
            // deviations the full preference order applies.
            Some(inc) if inc.1.st_idx == assignment[ev_idx].unwrap_or(usize::MAX) => {
                if u > inc.0 {
                    Some((u, c))
                } else {
                    Some(inc)
                }
            }
            Some(inc) => {
                if prefer(inst, (u, c), inc) {
                    Some((u, c))
                } else {
                    Some(inc)
                }
            }
        };
    }
    Ok(best.expect("candidates checked non-empty").1.st_idx)
}

fn validate(inst: &GameInstance) -> Result<()> {
    if inst.prices.len() != inst.evs.len() {
        return Err(SimError::ShapeMismatch(format!(
            "price matrix has {} rows for {} EVs",
            inst.prices.len(),
            inst.evs.len()
        )));
    }
    for (e, row) in inst.prices.iter().enumerate() {
        if row.len() != inst.stations.len() {
            return Err(SimError::ShapeMismatch(format!(
                "price row {e} has {} entries for {} stations",
                row.len(),
                inst.stations.len()
            )));
        }
    }
    for st in &inst.stations {
        if st.charging > st.slots {
            return Err(SimError::Domain(format!(
                "station {} charging {} exceeds slots {}",
                st.id, st.charging, st.slots
            )));
        }
    }
    Ok(())
}

/// Run the selection protocol to a stable partition.
///
/// `warm` optionally seeds assignments from a previous solution (EV id ->
/// station id); EVs absent from it start unassigned and join via their first
/// winning proposal. The `rng` only draws the tie-break stamps, so a fixed
/// stamp sequence makes the outcome reproducible.
pub fn solve(
    inst: &GameInstance,
    warm: Option<&BTreeMap<u32, u32>>,
    rng: &mut impl Rng,
) -> Result<SolveOutcome> {
    validate(inst)?;
    let n = inst.evs.len();
    let n_st = inst.stations.len();
    let st_index: BTreeMap<u32, usize> = inst
        .stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();

    let candidates: Vec<Vec<Candidate>> = (0..n)
        .map(|e| candidate_set(inst, e))
        .collect::<Result<_>>()?;
    for (e, cands) in candidates.iter().enumerate() {
        if cands.is_empty() {
            return Err(SimError::NoReachableStation {
                ev: inst.evs[e].id,
            });
        }
    }

    // Seed from the warm assignment where it still makes sense.
    let mut assignment: Vec<Option<usize>> = vec![None; n];
    if let Some(w) = warm {
        for (e, ev) in inst.evs.iter().enumerate() {
            if let Some(st_id) = w.get(&ev.id) {
                if let Some(&s) = st_index.get(st_id) {
                    if candidates[e].iter().any(|c| c.st_idx == s) {
                        assignment[e] = Some(s);
                    }
                }
            }
        }
    }

    let mut msg = AgentMessage {
        revision: 0,
        stamp: 0.0,
        assignment,
        satisfied: vec![false; n],
    };
    let bound = iteration_bound(n);
    let mut revisions = 0u64;
    let mut rounds = 0u64;

    while !msg.satisfied.iter().all(|&s| s) {
        rounds += 1;
        let sizes = group_sizes(&msg.assignment, n_st);
        let mut winner: Option<AgentMessage> = None;
        let mut content: Vec<usize> = Vec::new();
        for e in 0..n {
            if msg.satisfied[e] {
                continue;
            }
            let choice = best_response_idx(inst, &msg.assignment, &sizes, e, &candidates[e])?;
            if Some(choice) == msg.assignment[e] {
                content.push(e);
                continue;
            }
            // Propose a revised partition; the highest stamp wins the round.
            let stamp: f64 = rng.gen();
            let beats = winner.as_ref().map_or(true, |w| stamp > w.stamp);
            if beats {
                let mut assignment = msg.assignment.clone();
                assignment[e] = Some(choice);
                let mut satisfied = vec![false; n];
                satisfied[e] = true;
                winner = Some(AgentMessage {
                    revision: msg.revision + 1,
                    stamp,
                    assignment,
                    satisfied,
                });
            }
        }
        match winner {
            Some(w) => {
                revisions += 1;
                if revisions > bound {
                    return Err(SimError::NonConvergence { bound, evs: n });
                }
                msg = w;
            }
            None => {
                // Nobody wanted to move: everyone examined this revision and
                // is content, so the partition is stable.
                for e in content {
                    msg.satisfied[e] = true;
                }
            }
        }
    }

    let assignment: BTreeMap<u32, u32> = msg
        .assignment
        .iter()
        .enumerate()
        .map(|(e, a)| {
            let s = a.expect("every EV assigned at convergence");
            (inst.evs[e].id, inst.stations[s].id)
        })
        .collect();
    Ok(SolveOutcome {
        partition: Partition {
            assignment,
            revision: msg.revision,
            stamp: msg.stamp,
        },
        revisions,
        rounds,
    })
}

/// Best response of a single EV against a fixed partition: the station id it
/// would select (its current one unless a strictly better option exists).
pub fn best_response(inst: &GameInstance, partition: &Partition, ev: u32) -> Result<u32> {
    validate(inst)?;
    let (assignment, _) = index_assignment(inst, &partition.assignment)?;
    let ev_idx = inst
        .evs
        .iter()
        .position(|e| e.id == ev)
        .ok_or_else(|| SimError::Domain(format!("unknown EV {ev}")))?;
    let cands = candidate_set(inst, ev_idx)?;
    let sizes = group_sizes(&assignment, inst.stations.len());
    let s = best_response_idx(inst, &assignment, &sizes, ev_idx, &cands)?;
    Ok(inst.stations[s].id)
}

/// Station ids the EV at `ev_idx` (index into `inst.evs`) could select:
/// stations ahead of it that it can reach with its remaining charge, that
/// offer it a price, and that would sell it a positive amount of energy.
/// Callers can use this to filter out EVs with no options before solving,
/// since `solve` treats an empty candidate set as an error.
pub fn candidate_station_ids(inst: &GameInstance, ev_idx: usize) -> Result<Vec<u32>> {
    if ev_idx >= inst.evs.len() {
        return Err(SimError::Domain(format!(
            "EV index {ev_idx} out of range for instance with {} EVs",
            inst.evs.len()
        )));
    }
    Ok(candidate_set(inst, ev_idx)?
        .iter()
        .map(|c| inst.stations[c.st_idx].id)
        .collect())
}

/// Utility EV `ev` would get from charging at station `station` if it moved
/// there unilaterally, everyone else keeping the given assignment.
pub fn deviation_utility(
    inst: &GameInstance,
    assignment: &BTreeMap<u32, u32>,
    ev: u32,
    station: u32,
) -> Result<f64> {
    let (idx_assignment, st_index) = index_assignment(inst, assignment)?;
    let ev_idx = inst
        .evs
        .iter()
        .position(|e| e.id == ev)
        .ok_or_else(|| SimError::Domain(format!("unknown EV {ev}")))?;
    let &s = st_index
        .get(&station)
        .ok_or_else(|| SimError::Domain(format!("unknown station {station}")))?;
    let cands = candidate_set(inst, ev_idx)?;
    let cand = cands
        .iter()
        .find(|c| c.st_idx == s)
        .ok_or_else(|| SimError::NoReachableStation { ev })?;
    let sizes = group_sizes(&idx_assignment, inst.stations.len());
    let g = tentative_with_move(inst, &sizes, &idx_assignment, ev_idx, cand);
    candidate_utility(inst, cand, g)
}

fn index_assignment(
    inst: &GameInstance,
    assignment: &BTreeMap<u32, u32>,
) -> Result<(Vec<Option<usize>>, BTreeMap<u32, usize>)> {
    let st_index: BTreeMap<u32, usize> = inst
        .stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();
    let mut idx = vec![None; inst.evs.len()];
    for (e, ev) in inst.evs.iter().enumerate() {
        if let Some(st_id) = assignment.get(&ev.id) {
            let &s = st_index.get(st_id).ok_or_else(|| {
                SimError::Domain(format!("assignment references unknown station {st_id}"))
            })?;
            idx[e] = Some(s);
        }
    }
    Ok((idx, st_index))
}

/// Verify by direct enumeration of unilateral deviations that no EV can
/// strictly improve: the defining property of a stable partition. Every EV
/// must be assigned to one of its usable stations.
pub fn certify_nash_stable(inst: &GameInstance, partition: &Partition) -> Result<bool> {
    validate(inst)?;
    let (assignment, _) = index_assignment(inst, &partition.assignment)?;
    let sizes = group_sizes(&assignment, inst.stations.len());
    for e in 0..inst.evs.len() {
        let cands = candidate_set(inst, e)?;
        let Some(cur_idx) = assignment[e] else {
            return Ok(false); // unassigned EV always wants to move
        };
        let Some(cur) = cands.iter().find(|c| c.st_idx == cur_idx) else {
            return Ok(false); // assigned to an unusable station
        };
        let g = tentative_with_move(inst, &sizes, &assignment, e, cur);
        let u_cur = candidate_utility(inst, cur, g)?;
        for c in &cands {
            if c.st_idx == cur_idx {
                continue;
            }
            let g = tentative_with_move(inst, &sizes, &assignment, e, c);
            let u = candidate_utility(inst, c, g)?;
            if u > u_cur {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Exhaustively enumerate every assignment of EVs to their usable stations
/// and return the stable ones. Intended as a cross-check oracle for small
/// instances; errors out beyond `max_combinations` assignments.
pub fn enumerate_stable(
    inst: &GameInstance,
    max_combinations: u64,
) -> Result<Vec<BTreeMap<u32, u32>>> {
    validate(inst)?;
    let n = inst.evs.len();
    let candidates: Vec<Vec<Candidate>> = (0..n)
        .map(|e| candidate_set(inst, e))
        .collect::<Result<_>>()?;
    let mut total: u64 = 1;
    for cands in &candidates {
        if cands.is_empty() {
            return Err(SimError::NoReachableStation {
                ev: inst.evs[candidates.iter().position(|c| c.is_empty()).unwrap()].id,
            });
        }
        total = total.saturating_mul(cands.len() as u64);
        if total > max_combinations {
            return Err(SimError::Domain(format!(
                "enumeration would exceed {max_combinations} assignments"
            )));
        }
    }

    let mut stable = Vec::new();
    let mut odometer = vec![0usize; n];
    loop {
        let assignment: Vec<Option<usize>> = odometer
            .iter()
            .enumerate()
            .map(|(e, &k)| Some(candidates[e][k].st_idx))
            .collect();
        if assignment_is_stable(inst, &assignment, &candidates)? {
            stable.push(
                assignment
                    .iter()
                    .enumerate()
                    .map(|(e, a)| (inst.evs[e].id, inst.stations[a.unwrap()].id))
                    .collect(),
            );
        }
        // advance odometer
        let mut d = 0;
        loop {
            if d == n {
                return Ok(stable);
            }
            odometer[d] += 1;
            if odometer[d] < candidates[d].len() {
                break;
            }
            odometer[d] = 0;
            d += 1;
        }
    }
}

fn assignment_is_stable(
    inst: &GameInstance,
    assignment: &[Option<usize>],
    candidates: &[Vec<Candidate>],
) -> Result<bool> {
    let sizes = group_sizes(assignment, inst.stations.len());
    for e in 0..inst.evs.len() {
        let cur_idx = assignment[e].expect("enumeration assigns everyone");
        let cur = candidates[e]
            .iter()
            .find(|c| c.st_idx == cur_idx)
            .expect("assignment drawn from candidate set");
        let g = tentative_with_move(inst, &sizes, assignment, e, cur);
        let u_cur = candidate_utility(inst, cur, g)?;
        for c in &candidates[e] {
            if c.st_idx == cur_idx {
                continue;
            }
            let g = tentative_with_move(inst, &sizes, assignment, e, c);
            if candidate_utility(inst, c, g)? > u_cur {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Randomly generated well-formed instance for self-checks: every EV is
/// guaranteed at least one usable station, prices are per-pair (so the
/// personalized path gets exercised), and some pairs carry no offer.
pub fn random_instance(
    rng: &mut impl Rng,
    max_evs: usize,
    max_stations: usize,
) -> GameInstance {
    let n_stations = rng.gen_range(1..=max_stations.max(1));
    let mut stations: Vec<StationState> = (0..n_stations)
        .map(|i| {
            let slots = rng.gen_range(1..=4);
            StationState {
                id: i as u32,
                location_km: rng.gen_range(50.0..450.0),
                slots,
                charging: rng.gen_range(0..=slots),
                committed: rng.gen_range(0..=2),
            }
        })
        .collect();
    stations.sort_by(|a, b| a.location_km.partial_cmp(&b.location_km).unwrap());

    let max_soc = 0.8;
    let n_evs = rng.gen_range(1..=max_evs.max(1));
    let mut evs = Vec::with_capacity(n_evs);
    let mut prices = Vec::with_capacity(n_evs);
    for e in 0..n_evs {
        // Anchor each EV to one target station it can certainly use, then
        // derive its position and charge from the anchor.
        let target = rng.gen_range(0..n_stations);
        let loc = stations[target].location_km;
        let position_km = rng.gen_range((loc - 160.0).max(0.0)..loc);
        let esoc_at_target = rng.gen_range(0.0..0.75);
        let soc = esoc_at_target + (loc - position_km) / 800.0;
        evs.push(SelectingEv { id: e as u32, position_km, soc });
        let row: Vec<Option<f64>> = (0..n_stations)
            .map(|s| {
                if s != target && rng.gen_bool(0.2) {
                    None
                } else {
                    Some(rng.gen_range(0.35..0.55))
                }
            })
            .collect();
        prices.push(row);
    }
    GameInstance {
        evs,
        stations,
        prices,
        utility: UtilityParams::default(),
        travel_range_km: 800.0,
        battery_kwh: 800.0,
        max_soc,
        reach_margin: 0.0,
    }
}

/// Outcome of a randomized stability sweep over the selection solver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CertifyReport {
    pub instances: u64,
    pub solved: u64,
    /// Solutions that failed the direct unilateral-deviation check.
    pub stable_failures: u64,
    /// Solutions needing more revisions than n(n+1)/2 allows.
    pub bound_violations: u64,
    pub max_revisions_seen: u64,
    /// Instances small enough for exhaustive cross-checking.
    pub exhaustive_checked: u64,
    /// Solver outcomes missing from the exhaustively enumerated stable set.
    pub exhaustive_mismatches: u64,
}

impl CertifyReport {
    pub fn passed(&self) -> bool {
        self.solved == self.instances
            && self.stable_failures == 0
            && self.bound_violations == 0
            && self.exhaustive_mismatches == 0
    }
}

/// Solve `instances` random games, certifying each solution by direct
/// deviation checks, verifying the revision bound, and — for instances with
/// at most `exhaustive_max_evs` EVs — cross-checking against brute-force
/// enumeration of every stable assignment.
pub fn certify_sweep(
    instances: u64,
    max_evs: usize,
    max_stations: usize,
    exhaustive_max_evs: usize,
    seed: u64,
) -> Result<CertifyReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = CertifyReport {
        instances,
        solved: 0,
        stable_failures: 0,
        bound_violations: 0,
        max_revisions_seen: 0,
        exhaustive_checked: 0,
        exhaustive_mismatches: 0,
    };
    for _ in 0..instances {
        let inst = random_instance(&mut rng, max_evs, max_stations);
        let outcome = solve(&inst, None, &mut rng)?;
        report.solved += 1;
        report.max_revisions_seen = report.max_revisions_seen.max(outcome.revisions);
        if !certify_nash_stable(&inst, &outcome.partition)? {
            report.stable_failures += 1;
        }
        if outcome.revisions > iteration_bound(inst.evs.len()) {
            report.bound_violations += 1;
        }
        if inst.evs.len() <= exhaustive_max_evs {
            // Skip the cross-check when the candidate product is too large.
            if let Ok(stable) = enumerate_stable(&inst, 100_000) {
                report.exhaustive_checked += 1;
                if !stable.contains(&outcome.partition.assignment) {
                    report.exhaustive_mismatches += 1;
                }
            }
        }
    }
    Ok(report)
}
