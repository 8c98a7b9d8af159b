use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::model::{RateQuery, Sojourn, Terminal, Trajectory, TransitionRates};
use crate::pipeline::AGE_TOLERANCE;

/// Stable per-individual seed: FNV-1a over the id, mixed with the master
/// seed through SplitMix64.
pub fn individual_seed(master: u64, individual_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in individual_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ splitmix64(h))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_for(master: u64, individual_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(individual_seed(master, individual_id))
}

/// Samples a path from `start_state` at `start_age` until absorption or
/// `end_age`.
///
/// Rates are constant within each age year. In every year each live
/// transition draws its own exponential clock; the earliest clock that
/// fires before the next birthday decides the move. This is equivalent in
/// distribution to drawing a single exit time at the total rate and then
/// choosing the transition with probability proportional to its rate.
#[allow(clippy::too_many_arguments)]
pub fn simulate_trajectory<M: TransitionRates + ?Sized, R: Rng + ?Sized>(
    model: &M,
    query: &RateQuery<'_>,
    individual_id: &str,
    start_state: usize,
    start_age: f64,
    end_age: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    if !(start_age.is_finite() && end_age.is_finite() && start_age < end_age && start_age >= 0.0) {
        return Err(Error::invalid(format!(
            "simulation window [{start_age}, {end_age}) is empty or invalid"
        )));
    }
    let spec = model.transitions();
    if spec.is_absorbing(start_state) {
        return Err(Error::invalid(format!(
            "cannot simulate from absorbing state `{}`",
            spec.state_label(start_state)
        )));
    }
    let mut sojourns = Vec::new();
    let mut state = start_state;
    let mut entered = start_age;
    let mut t = start_age;
    let mut cached_age = None;
    let mut rates = Vec::new();

    loop {
        let age = (t + AGE_TOLERANCE).floor();
        if cached_age != Some(age) {
            rates = model.rates_at(query, age as u32)?;
            cached_age = Some(age);
        }
        let boundary = (age + 1.0).min(end_age);

        let mut first: Option<(f64, usize)> = None;
        for m in spec.live_from(state) {
            let lambda = rates[m];
            if lambda <= 0.0 {
                continue;
            }
            let wait = Exp::new(lambda)
                .map_err(|e| Error::Numerical(format!("rate {lambda}: {e}")))?
                .sample(rng);
            if first.is_none_or(|(w, _)| wait < w) {
                first = Some((wait, m));
            }
        }

        match first {
            Some((wait, m)) if t + wait < boundary => {
                t += wait;
                let to = spec.transition(m).1;
                sojourns.push(Sojourn {
                    state: spec.state_label(state).to_string(),
                    start_age: entered,
                    end_age: t,
                });
                if spec.is_absorbing(to) {
                    return Ok(Trajectory {
                        individual_id: individual_id.to_string(),
                        sojourns,
                        terminal: Terminal::State(spec.state_label(to).to_string()),
                    });
                }
                state = to;
                entered = t;
            }
            _ => {
                t = boundary;
                if t >= end_age {
                    sojourns.push(Sojourn {
                        state: spec.state_label(state).to_string(),
                        start_age: entered,
                        end_age,
                    });
                    return Ok(Trajectory {
                        individual_id: individual_id.to_string(),
                        sojourns,
                        terminal: Terminal::Censored,
                    });
                }
            }
        }
    }
}
