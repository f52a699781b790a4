//! Synthetic city generator: a grid of locations with dominant function
//! categories, and users whose daily visit schedules follow their assigned
//! persona (students sit in education cells on weekday daytimes, night-shift
//! workers travel late, visitors wander, ...). Everything is driven by a
//! single seeded RNG, so a configuration generates the same dataset every
//! time, byte for byte.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::{FUNCTION_CATEGORIES, NUM_FUNCTION_CATEGORIES, NUM_USER_GROUPS, RESIDENTIAL, USER_GROUPS};
use crate::data::{Dataset, DatasetMeta, Location, Record};
use crate::error::{Error, Result};

const ENTERTAINMENT: usize = 0;
const COMMERCIAL: usize = 1;
const EDUCATION: usize = 2;
const PUBLIC_SERVICE: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCityConfig {
    pub name: String,
    /// City is a `grid x grid` lattice; at most one location per cell.
    pub grid: usize,
    pub n_locations: usize,
    pub n_users: usize,
    pub days: usize,
    /// Probability weights over the 11 user groups, in taxonomy order.
    pub persona_mix: Vec<f64>,
    /// Probability weights over the 5 function categories for a location's
    /// dominant category, in taxonomy order.
    pub function_mix: Vec<f64>,
    /// Chance that a scheduled visit swaps its anchor for a random location
    /// of the same category (exploration noise).
    pub explore_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticCityConfig {
    fn default() -> Self {
        SyntheticCityConfig {
            name: "synthetic-city".to_string(),
            grid: 20,
            n_locations: 320,
            n_users: 160,
            days: 21,
            persona_mix: vec![1.0 / NUM_USER_GROUPS as f64; NUM_USER_GROUPS],
            function_mix: vec![0.15, 0.25, 0.12, 0.13, 0.35],
            explore_prob: 0.08,
            seed: 7,
        }
    }
}

impl SyntheticCityConfig {
    fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(Error::config("grid must be at least 2"));
        }
        if self.n_locations == 0 {
            return Err(Error::config("n_locations must be positive"));
        }
        if self.n_locations > self.grid * self.grid {
            return Err(Error::config(format!(
                "n_locations {} exceeds grid capacity {} ({}x{} cells, one location per cell)",
                self.n_locations,
                self.grid * self.grid,
                self.grid,
                self.grid
            )));
        }
        if self.n_users > 0 && self.days == 0 {
            return Err(Error::config("days must be positive when generating users"));
        }
        check_mix(&self.persona_mix, NUM_USER_GROUPS, "persona_mix")?;
        check_mix(&self.function_mix, NUM_FUNCTION_CATEGORIES, "function_mix")?;
        if !(0.0..1.0).contains(&self.explore_prob) {
            return Err(Error::config("explore_prob must be in [0, 1)"));
        }
        Ok(())
    }
}

fn check_mix(mix: &[f64], expected_len: usize, name: &str) -> Result<()> {
    if mix.len() != expected_len {
        return Err(Error::config(format!(
            "{name} must have {expected_len} entries, got {}",
            mix.len()
        )));
    }
    if mix.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config(format!("{name} entries must be finite and >= 0")));
    }
    let sum: f64 = mix.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("{name} must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Categories a persona's schedule cannot do without (all personas also
/// need a Residential home).
fn required_categories(persona: usize) -> &'static [usize] {
    match persona {
        0 | 1 => &[EDUCATION],              // Student, Teacher
        2 | 5 | 6 | 9 => &[COMMERCIAL],     // Office, Remote, Service, Retail
        3 => &[ENTERTAINMENT],              // Visitor
        4 | 7 => &[PUBLIC_SERVICE],         // Night Shift, Public Service Official
        8 => &[ENTERTAINMENT, COMMERCIAL],  // Fitness Enthusiast
        _ => &[],                           // Undefined
    }
}

struct City {
    /// Raw-coordinate locations, id == index.
    locations: Vec<Location>,
    /// Dominant category index per location.
    category: Vec<usize>,
    /// Location indices grouped by dominant category.
    by_category: Vec<Vec<usize>>,
}

struct Anchors {
    home: usize,
    work: usize,
    /// Commercial spots near the workplace (lunch / errands).
    lunch: Vec<usize>,
    /// Entertainment spots near home (evenings, gyms).
    fun: Vec<usize>,
    /// City-wide attraction pool (visitors, undefined wanderers).
    pool: Vec<usize>,
    /// Weekday index a retail employee takes off.
    day_off: u8,
}

struct Gen<'c> {
    rng: ChaCha8Rng,
    city: &'c City,
    explore_prob: f64,
}

impl Gen<'_> {
    fn maybe(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn choose(&mut self, options: &[usize]) -> usize {
        options[self.rng.random_range(0..options.len())]
    }

    /// Jitter an hour by +-1 within the day.
    fn j(&mut self, hour: i32) -> i32 {
        (hour + self.rng.random_range(-1..=1)).clamp(0, 23)
    }

    fn dur(&mut self, base: f64) -> f64 {
        (base + self.rng.random_range(-0.5..0.5)).max(0.5)
    }

    /// Apply exploration noise: sometimes swap for a random location of the
    /// same dominant category, so the spatial signal stays intact.
    fn visit(&mut self, anchor: usize) -> usize {
        if self.explore_prob > 0.0 && self.maybe(self.explore_prob) {
            let cat = self.city.category[anchor];
            self.choose(&self.city.by_category[cat])
        } else {
            anchor
        }
    }

    /// `k` locations of `cat` closest to `near`, by squared distance.
    fn nearest_of(&mut self, cat: usize, near: usize, k: usize) -> Vec<usize> {
        let nx = self.city.locations[near].x;
        let ny = self.city.locations[near].y;
        let mut cands: Vec<(f64, usize)> = self.city.by_category[cat]
            .iter()
            .map(|&i| {
                let dx = self.city.locations[i].x - nx;
                let dy = self.city.locations[i].y - ny;
                (dx * dx + dy * dy, i)
            })
            .collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

#[derive(Default)]
struct DayPlan {
    stays: Vec<(u8, usize, f64)>,
}

impl DayPlan {
    /// Append a stay, bumping the hour forward if it collides with the
    /// previous one; stays that would spill past the day are dropped.
    fn add(&mut self, hour: i32, loc: usize, dur: f64) {
        let mut h = hour.clamp(0, 23);
        if let Some(&(prev, _, _)) = self.stays.last() {
            if h <= prev as i32 {
                h = prev as i32 + 1;
            }
        }
        if h <= 23 {
            self.stays.push((h as u8, loc, dur));
        }
    }
}

fn plan_day(persona: usize, weekday: u8, a: &Anchors, g: &mut Gen) -> DayPlan {
    let weekend = weekday >= 5;
    let mut day = DayPlan::default();
    match persona {
        // Student: campus mornings and afternoons, lunch nearby, evenings out or home.
        0 => {
            if weekend {
                if !a.fun.is_empty() && g.maybe(0.6) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(11), g.visit(f), g.dur(3.0));
                }
                if !a.lunch.is_empty() && g.maybe(0.5) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(15), g.visit(l), g.dur(1.5));
                }
                day.add(g.j(18), a.home, g.dur(13.0));
            } else {
                day.add(g.j(8), g.visit(a.work), g.dur(4.0));
                if !a.lunch.is_empty() && g.maybe(0.45) {
                    let l = g.choose(&a.lunch);
                    day.add(12, g.visit(l), g.dur(1.0));
                }
                day.add(13, g.visit(a.work), g.dur(3.0));
                if !a.fun.is_empty() && g.maybe(0.35) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(17), g.visit(f), g.dur(2.0));
                }
                day.add(g.j(19), a.home, g.dur(11.0));
            }
        }
        // Teacher: early regular start at the same campus.
        1 => {
            if weekend {
                if !a.lunch.is_empty() && g.maybe(0.5) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(14), g.visit(l), g.dur(2.0));
                }
                day.add(g.j(17), a.home, g.dur(14.0));
            } else {
                day.add(7, g.visit(a.work), g.dur(5.0));
                if !a.lunch.is_empty() && g.maybe(0.4) {
                    let l = g.choose(&a.lunch);
                    day.add(12, g.visit(l), g.dur(1.0));
                }
                day.add(13, g.visit(a.work), g.dur(3.0));
                if !a.lunch.is_empty() && g.maybe(0.3) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(16), g.visit(l), g.dur(1.0));
                }
                day.add(g.j(18), a.home, g.dur(12.0));
            }
        }
        // Office worker: business-district days, evening rush home.
        2 => {
            if weekend {
                if !a.fun.is_empty() && g.maybe(0.5) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(11), g.visit(f), g.dur(2.5));
                }
                day.add(g.j(16), a.home, g.dur(14.0));
            } else {
                day.add(g.j(9), g.visit(a.work), g.dur(3.0));
                if !a.lunch.is_empty() && g.maybe(0.7) {
                    let l = g.choose(&a.lunch);
                    day.add(12, g.visit(l), g.dur(1.0));
                }
                day.add(13, g.visit(a.work), g.dur(4.0));
                if !a.fun.is_empty() && g.maybe(0.25) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(18), g.visit(f), g.dur(1.5));
                }
                day.add(g.j(19), a.home, g.dur(11.0));
            }
        }
        // Visitor: attractions all week, lodgings at night.
        3 => {
            let n_stops = 3 + g.rng.random_range(0..=1);
            for (i, base_hour) in [10, 13, 16, 19].iter().take(n_stops).enumerate() {
                let _ = i;
                let stop = g.choose(&a.pool);
                day.add(g.j(*base_hour), stop, g.dur(2.0));
            }
            day.add(21, a.home, g.dur(11.0));
        }
        // Night shift worker: rests by day, works through the night.
        4 => {
            if weekday == 6 {
                if !a.fun.is_empty() && g.maybe(0.5) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(18), g.visit(f), g.dur(2.0));
                }
                day.add(g.j(20), a.home, g.dur(12.0));
            } else {
                day.add(g.j(8), a.home, g.dur(6.0));
                if !a.lunch.is_empty() && g.maybe(0.4) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(16), g.visit(l), g.dur(1.0));
                }
                day.add(22, g.visit(a.work), g.dur(8.0));
            }
        }
        // Remote worker: home days and flexible cafe sessions.
        5 => {
            if g.maybe(0.35) {
                day.add(g.j(9), a.home, g.dur(14.0));
            } else {
                day.add(g.j(10), g.visit(a.work), g.dur(3.0));
                if !a.pool.is_empty() && g.maybe(0.3) {
                    let p = g.choose(&a.pool);
                    day.add(g.j(14), g.visit(p), g.dur(2.0));
                }
                day.add(g.j(17), a.home, g.dur(13.0));
            }
        }
        // Service industry worker: alternating early and late shifts.
        6 => {
            if weekday % 2 == 0 {
                day.add(g.j(10), g.visit(a.work), g.dur(6.0));
                if !a.fun.is_empty() && g.maybe(0.2) {
                    let f = g.choose(&a.fun);
                    day.add(g.j(17), g.visit(f), g.dur(1.5));
                }
                day.add(g.j(19), a.home, g.dur(11.0));
            } else {
                if !a.lunch.is_empty() && g.maybe(0.3) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(10), g.visit(l), g.dur(1.0));
                }
                day.add(g.j(15), g.visit(a.work), g.dur(7.0));
                day.add(23, a.home, g.dur(9.0));
            }
        }
        // Public service official: three-day duty rotation.
        7 => match weekday % 3 {
            0 => {
                day.add(8, g.visit(a.work), g.dur(8.0));
                day.add(g.j(17), a.home, g.dur(13.0));
            }
            1 => {
                day.add(g.j(14), g.visit(a.work), g.dur(8.0));
                day.add(23, a.home, g.dur(9.0));
            }
            _ => {
                day.add(g.j(9), a.home, g.dur(6.0));
                day.add(22, g.visit(a.work), g.dur(8.0));
            }
        },
        // Fitness enthusiast: training slots bracket the workday.
        8 => {
            if weekend {
                day.add(g.j(9), g.visit(a.fun[0]), g.dur(2.0));
                if !a.pool.is_empty() && g.maybe(0.4) {
                    let p = g.choose(&a.pool);
                    day.add(g.j(15), g.visit(p), g.dur(2.0));
                }
                day.add(g.j(18), a.home, g.dur(13.0));
            } else {
                day.add(6, g.visit(a.fun[0]), 1.5);
                day.add(9, g.visit(a.work), g.dur(7.0));
                if g.maybe(0.3) {
                    day.add(g.j(18), g.visit(a.fun[0]), 1.0);
                }
                day.add(g.j(20), a.home, g.dur(10.0));
            }
        }
        // Retail employee: mid-morning shifts, weekday day off.
        9 => {
            if weekday == a.day_off {
                day.add(g.j(10), a.home, g.dur(2.0));
                if !a.lunch.is_empty() && g.maybe(0.6) {
                    let l = g.choose(&a.lunch);
                    day.add(g.j(13), g.visit(l), g.dur(2.0));
                }
                day.add(g.j(16), a.home, g.dur(15.0));
            } else {
                day.add(g.j(10), g.visit(a.work), 8.0);
                day.add(g.j(19), a.home, g.dur(11.0));
            }
        }
        // Undefined persona: irregular wandering.
        _ => {
            let n_stops = 2 + g.rng.random_range(0..=2);
            let mut hour = 8 + g.rng.random_range(0..=2);
            for _ in 0..n_stops {
                let stop = g.choose(&a.pool);
                day.add(hour, stop, g.dur(1.5));
                hour += 2 + g.rng.random_range(0..=3);
            }
            day.add(21, a.home, g.dur(11.0));
        }
    }
    day
}

fn build_anchors(persona: usize, g: &mut Gen) -> Anchors {
    let homes = &g.city.by_category[RESIDENTIAL];
    let home = g.choose(homes);
    let pick_near = |g: &mut Gen, cat: usize, near: usize| -> usize {
        let near_k = g.nearest_of(cat, near, 6);
        g.choose(&near_k)
    };
    let req = required_categories(persona);
    let work = if req.is_empty() {
        home
    } else {
        // Primary anchor category is the first requirement; for the fitness
        // enthusiast that is the gym, handled below, so work is commercial.
        let cat = if persona == 8 { COMMERCIAL } else { req[0] };
        pick_near(g, cat, home)
    };
    let lunch = if g.city.by_category[COMMERCIAL].is_empty() {
        vec![]
    } else {
        g.nearest_of(COMMERCIAL, work, 3)
    };
    let fun = if g.city.by_category[ENTERTAINMENT].is_empty() {
        vec![]
    } else if persona == 8 {
        vec![pick_near(g, ENTERTAINMENT, home)]
    } else {
        g.nearest_of(ENTERTAINMENT, home, 3)
    };
    // Attraction pool: entertainment plus commercial plus public service,
    // anywhere in the city.
    let mut pool: Vec<usize> = Vec::new();
    for cat in [ENTERTAINMENT, COMMERCIAL, PUBLIC_SERVICE] {
        pool.extend_from_slice(&g.city.by_category[cat]);
    }
    if pool.is_empty() {
        pool.push(home);
    }
    let day_off = g.rng.random_range(0..5) as u8;
    Anchors {
        home,
        work,
        lunch,
        fun,
        pool,
        day_off,
    }
}

fn sample_mix(rng: &mut ChaCha8Rng, mix: &[f64]) -> usize {
    let r: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, w) in mix.iter().enumerate() {
        acc += w;
        if r < acc {
            return i;
        }
    }
    mix.len() - 1
}

/// Generate a deterministic synthetic city dataset. Coordinates are raw grid
/// units (cell centers with jitter); run normalization before training.
pub fn generate_synthetic_city(cfg: &SyntheticCityConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Choose occupied cells, then assign dominant categories.
    let mut cells: Vec<usize> = (0..cfg.grid * cfg.grid).collect();
    cells.shuffle(&mut rng);
    let mut chosen: Vec<usize> = cells.into_iter().take(cfg.n_locations).collect();
    chosen.sort_unstable();

    let mut locations = Vec::with_capacity(cfg.n_locations);
    let mut category = Vec::with_capacity(cfg.n_locations);
    for (i, cell) in chosen.iter().enumerate() {
        let row = cell / cfg.grid;
        let col = cell % cfg.grid;
        let jx: f64 = rng.random_range(-0.2..0.2);
        let jy: f64 = rng.random_range(-0.2..0.2);
        let cat = sample_mix(&mut rng, &cfg.function_mix);
        locations.push(Location {
            id: i as u64,
            x: col as f64 + 0.5 + jx,
            y: row as f64 + 0.5 + jy,
            category: Some(FUNCTION_CATEGORIES[cat].to_string()),
        });
        category.push(cat);
    }
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); NUM_FUNCTION_CATEGORIES];
    for (i, &c) in category.iter().enumerate() {
        by_category[c].push(i);
    }

    // Feasibility: every persona that can occur must find its categories.
    if cfg.n_users > 0 {
        if by_category[RESIDENTIAL].is_empty() {
            return Err(Error::data(
                "infeasible city: users need a home but no Residential-dominant location was generated",
            ));
        }
        for (p, w) in cfg.persona_mix.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            for &cat in required_categories(p) {
                if by_category[cat].is_empty() {
                    return Err(Error::data(format!(
                        "infeasible city: persona `{}` requires a {}-dominant location but none was generated",
                        USER_GROUPS[p], FUNCTION_CATEGORIES[cat]
                    )));
                }
            }
        }
    }

    let city = City {
        locations,
        category,
        by_category,
    };

    let mut users: BTreeMap<String, Vec<Record>> = BTreeMap::new();
    for u in 0..cfg.n_users {
        let persona = sample_mix(&mut rng, &cfg.persona_mix);
        let mut g = Gen {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e_ed_u64 ^ ((u as u64) << 16)),
            city: &city,
            explore_prob: cfg.explore_prob,
        };
        let anchors = build_anchors(persona, &mut g);
        let mut records = Vec::new();
        for day in 0..cfg.days {
            let weekday = (day % 7) as u8;
            let plan = plan_day(persona, weekday, &anchors, &mut g);
            for (hour, loc_idx, dur) in plan.stays {
                let loc = &city.locations[loc_idx];
                records.push(Record {
                    loc: loc.id,
                    x: loc.x,
                    y: loc.y,
                    weekday,
                    hour,
                    duration: dur,
                    timestamp: (day * 24 + hour as usize) as i64,
                });
            }
        }
        users.insert(format!("u{u:04}"), records);
    }

    let ds = Dataset {
        locations: city.locations,
        users,
        meta: DatasetMeta {
            name: cfg.name.clone(),
            seed: Some(cfg.seed),
            grid: Some(cfg.grid),
            norm: None,
        },
    };
    ds.validate()?;
    Ok(ds)
}
