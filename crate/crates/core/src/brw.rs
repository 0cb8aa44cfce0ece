//! Event-driven simulation of the branching random walk on a fixed environment.
//!
//! Particles jump at rate 1 (½ each side) and split in two at rate ξ(x).
//! Positions are kept as counts per site. Events are generated by thinning:
//! one clock of rate `pop · (1 + es)` picks a uniform particle, which jumps
//! with probability `1/(1 + es)` and otherwise branches with probability
//! `ξ(x)/es`.
//!
//! Particles at or below `running max − prune_window` are removed. With a
//! shadow window `w_s < prune_window`, particles that the smaller window
//! would remove are kept but marked tainted; the untainted ones then form
//! an exact sample of the system with window `w_s`, coupled to the larger
//! one.
//!
//! Optionally, sites holding at least `dense_threshold` particles are
//! advanced in fixed steps `dt` by a second-order splitting (exact Yule
//! growth for half a step, the exact displacement law of the walk, Yule
//! growth for the other half) instead of one event at a time. The sparse
//! sites near the tip stay exact.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

pub const RUN_RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeapConfig {
    /// A site becomes dense at this count and sparse again below half of it.
    pub dense_threshold: u64,
    pub dt: f64,
}

impl Default for LeapConfig {
    fn default() -> Self {
        LeapConfig {
            dense_threshold: 256,
            dt: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// `None` keeps every particle.
    pub prune_window: Option<u32>,
    pub pop_cap: Option<u64>,
    pub seed: u64,
    /// Coupled smaller window; requires `prune_window`.
    #[serde(default)]
    pub shadow_window: Option<u32>,
    #[serde(default)]
    pub leap: Option<LeapConfig>,
    /// Times at which `M_t` and `N(t, 0)` are recorded by `simulate_until`.
    #[serde(default)]
    pub record_grid: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            prune_window: Some(60),
            pop_cap: Some(50_000_000),
            seed: 0,
            shadow_window: None,
            leap: None,
            record_grid: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self, env: &Environment) -> Result<()> {
        if let Some(w) = self.prune_window {
            if w == 0 {
                return Err(Error::param("prune_window must be ≥ 1"));
            }
            if env.x_min() > -(w as i64) {
                return Err(Error::param(format!(
                    "environment starts at {} but prune window {w} needs sites down to {}",
                    env.x_min(),
                    -(w as i64)
                )));
            }
        }
        if let Some(ws) = self.shadow_window {
            match self.prune_window {
                Some(w) if ws >= 1 && ws < w => {}
                _ => return Err(Error::param("shadow_window must satisfy 1 ≤ shadow < prune_window")),
            }
        }
        if let Some(l) = &self.leap {
            if l.dense_threshold < 2 || !(l.dt > 0.0 && l.dt.is_finite()) {
                return Err(Error::param("leap needs dense_threshold ≥ 2 and dt > 0"));
            }
        }
        if self.record_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.record_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::param("record_grid must be finite, nonnegative and sorted"));
        }
        if !env.contains(0) {
            return Err(Error::param("environment must contain the origin"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    PopCapExceeded,
    RightBoundaryExceeded,
    /// Every particle was pruned.
    Extinct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShadowRecord {
    pub window: u32,
    /// First-hit times of the smaller-window system.
    pub first_hit: Vec<f64>,
    pub tainted_final: u64,
    /// Untainted particles the larger window would have removed; they are
    /// kept, so the smaller system stays exact and the larger one is
    /// perturbed. Expected to be zero.
    pub coupling_breaks: u64,
    /// The smaller system lost all its particles.
    pub extinct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub env_seed: u64,
    pub sim_seed: u64,
    pub n_target: Option<usize>,
    pub t_end: Option<f64>,
    pub status: RunStatus,
    pub t_final: f64,
    /// `first_hit[k]` is the first time any particle reached `k`, for
    /// `k = 0..=running max`.
    pub first_hit: Vec<f64>,
    pub grid: Vec<f64>,
    pub m_t: Vec<Option<i64>>,
    /// `None` where the origin lies inside the pruned region.
    pub n_t0: Vec<Option<u64>>,
    pub pop_final: u64,
    pub max_pop: u64,
    pub pruned: u64,
    pub left_exits: u64,
    pub events: u64,
    pub leap_steps: u64,
    pub prune_window: Option<u32>,
    pub leap: Option<LeapConfig>,
    pub shadow: Option<ShadowRecord>,
}

impl RunRecord {
    /// First hitting time of level `n`, if reached.
    pub fn hit(&self, n: usize) -> Option<f64> {
        self.first_hit.get(n).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunRecord = serde_json::from_str(text).map_err(|e| Error::Format {
            context: "run record".into(),
            message: e.to_string(),
        })?;
        if r.version != RUN_RECORD_VERSION {
            return Err(Error::Format {
                context: "run record".into(),
                message: format!("unsupported version {}", r.version),
            });
        }
        Ok(r)
    }
}

/// Prefix sums over site counts with descent search.
struct Fenwick {
    tree: Vec<u64>,
    top: usize,
}

impl Fenwick {
    fn new(n: usize) -> Self {
        Fenwick {
            tree: vec![0; n + 1],
            top: if n == 0 { 0 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) },
        }
    }

    fn add(&mut self, i: usize, delta: i64) {
        let mut j = i + 1;
        while j < self.tree.len() {
            self.tree[j] = self.tree[j].wrapping_add_signed(delta);
            j += j & j.wrapping_neg();
        }
    }

    /// Index `i` with `prefix(i) ≤ u < prefix(i + 1)` and the offset `u − prefix(i)`.
    fn find(&self, mut u: u64) -> (usize, u64) {
        let mut pos = 0;
        let mut step = self.top;
        while step > 0 {
            let next = pos + step;
            if next < self.tree.len() && self.tree[next] <= u {
                pos = next;
                u -= self.tree[next];
            }
            step >>= 1;
        }
        (pos, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Clean,
    Tainted,
}

enum Stop {
    Right,
    PopCap,
}

const FAR: i64 = i64::MIN / 4;

struct Sim<'a> {
    env: &'a Environment,
    x0: i64,
    clean: Vec<u64>,
    tainted: Vec<u64>,
    dense: Vec<bool>,
    fen: Fenwick,
    sparse_pop: u64,
    pop: u64,
    clean_pop: u64,
    shadow: bool,
    w_all: Option<i64>,
    w_clean: i64,
    r_all: i64,
    r_clean: i64,
    floor_all: i64,
    floor_clean: i64,
    hi_occ: i64,
    t: f64,
    first_hit: Vec<f64>,
    shadow_hit: Vec<f64>,
    pop_cap: u64,
    max_pop: u64,
    pruned: u64,
    left_exits: u64,
    breaks: u64,
    events: u64,
    leap_steps: u64,
}

impl<'a> Sim<'a> {
    fn new(env: &'a Environment, cfg: &SimConfig) -> Self {
        let len = env.len();
        let w_all = cfg.prune_window.map(i64::from);
        let w_clean = cfg.shadow_window.map_or(0, i64::from);
        let mut s = Sim {
            env,
            x0: env.x_min(),
            clean: vec![0; len],
            tainted: vec![0; len],
            dense: vec![false; len],
            fen: Fenwick::new(len),
            sparse_pop: 0,
            pop: 0,
            clean_pop: 0,
            shadow: cfg.shadow_window.is_some(),
            w_all,
            w_clean,
            r_all: 0,
            r_clean: 0,
            floor_all: w_all.map_or(FAR, |w| -w),
            floor_clean: if cfg.shadow_window.is_some() { -w_clean } else { FAR },
            hi_occ: 0,
            t: 0.0,
            first_hit: vec![0.0],
            shadow_hit: vec![0.0],
            pop_cap: cfg.pop_cap.unwrap_or(u64::MAX),
            max_pop: 1,
            pruned: 0,
            left_exits: 0,
            breaks: 0,
            events: 0,
            leap_steps: 0,
        };
        s.add(0, Class::Clean, 1);
        s
    }

    #[inline]
    fn idx(&self, x: i64) -> usize {
        (x - self.x0) as usize
    }

    #[inline]
    fn count(&self, x: i64) -> u64 {
        let i = self.idx(x);
        self.clean[i] + self.tainted[i]
    }

    fn add(&mut self, x: i64, class: Class, k: u64) {
        if k == 0 {
            return;
        }
        let i = self.idx(x);
        match class {
            Class::Clean => {
                self.clean[i] += k;
                self.clean_pop += k;
            }
            Class::Tainted => self.tainted[i] += k,
        }
        self.pop += k;
        if !self.dense[i] {
            self.fen.add(i, k as i64);
            self.sparse_pop += k;
        }
        if x > self.hi_occ {
            self.hi_occ = x;
        }
        self.max_pop = self.max_pop.max(self.pop);
    }

    fn remove(&mut self, x: i64, class: Class, k: u64) {
        if k == 0 {
            return;
        }
        let i = self.idx(x);
        match class {
            Class::Clean => {
                self.clean[i] -= k;
                self.clean_pop -= k;
            }
            Class::Tainted => self.tainted[i] -= k,
        }
        self.pop -= k;
        if !self.dense[i] {
            self.fen.add(i, -(k as i64));
            self.sparse_pop -= k;
        } else if self.clean[i] + self.tainted[i] == 0 {
            self.dense[i] = false;
        }
        if x == self.hi_occ {
            while self.hi_occ > self.x0 && self.count(self.hi_occ) == 0 {
                self.hi_occ -= 1;
            }
        }
    }

    /// Puts `k` particles of `class` at `x`, applying boundaries and pruning.
    fn place(&mut self, x: i64, class: Class, k: u64) -> std::result::Result<(), Stop> {
        if k == 0 {
            return Ok(());
        }
        if x > self.env.x_max() {
            return Err(Stop::Right);
        }
        if x < self.x0 {
            self.left_exits += k;
            return Ok(());
        }
        let mut class = class;
        if self.shadow && class == Class::Clean && x <= self.floor_clean {
            class = Class::Tainted;
        }
        if x <= self.floor_all {
            if self.shadow && class == Class::Clean {
                self.breaks += k;
            } else {
                self.pruned += k;
                return Ok(());
            }
        }
        self.add(x, class, k);
        if self.pop > self.pop_cap {
            return Err(Stop::PopCap);
        }
        // A leap step can move particles more than one site past the maximum.
        while x > self.r_all {
            self.r_all += 1;
            self.first_hit.push(self.t);
            if let Some(w) = self.w_all {
                self.floor_all = self.r_all - w;
                self.prune_site(self.floor_all);
            }
        }
        if self.shadow && class == Class::Clean {
            while x > self.r_clean {
                self.r_clean += 1;
                self.shadow_hit.push(self.t);
                self.floor_clean = self.r_clean - self.w_clean;
                self.taint_site(self.floor_clean);
            }
        }
        Ok(())
    }

    fn prune_site(&mut self, s: i64) {
        if s < self.x0 {
            return;
        }
        let i = self.idx(s);
        let t = self.tainted[i];
        self.remove(s, Class::Tainted, t);
        self.pruned += t;
        let c = self.clean[i];
        if self.shadow && s > self.floor_clean {
            self.breaks += c;
        } else {
            self.remove(s, Class::Clean, c);
            self.pruned += c;
        }
    }

    fn taint_site(&mut self, s: i64) {
        if s < self.x0 {
            return;
        }
        let c = self.clean[self.idx(s)];
        if c == 0 {
            return;
        }
        self.remove(s, Class::Clean, c);
        if s <= self.floor_all {
            self.pruned += c;
        } else {
            self.add(s, Class::Tainted, c);
        }
    }

    fn done(&self, n_target: Option<i64>) -> bool {
        match n_target {
            Some(n) => self.r_all >= n && (!self.shadow || self.r_clean >= n || self.clean_pop == 0),
            None => false,
        }
    }

    /// One thinned event at the current time among sparse particles.
    fn event(&mut self, rng: &mut SimRng) -> std::result::Result<(), Stop> {
        self.events += 1;
        let u = rng.random_range(0..self.sparse_pop);
        let (i, off) = self.fen.find(u);
        let x = self.x0 + i as i64;
        let class = if off < self.clean[i] { Class::Clean } else { Class::Tainted };
        let v = rng.random::<f64>() * (1.0 + self.env.es());
        if v < 1.0 {
            let to = if v < 0.5 { x + 1 } else { x - 1 };
            self.remove(x, class, 1);
            self.place(to, class, 1)
        } else if v - 1.0 < self.env.rate(x) {
            self.add(x, class, 1);
            if self.pop > self.pop_cap {
                Err(Stop::PopCap)
            } else {
                Ok(())
            }
        } else {
            Ok(())
        }
    }

    fn occupied_range(&self) -> (i64, i64) {
        ((self.floor_all + 1).max(self.x0), self.hi_occ)
    }

    /// One Strang step of length `dt` for all dense sites: Yule growth over
    /// `dt/2`, the exact displacement law of the walk over `dt`, and Yule
    /// growth over `dt/2` at the destination.
    fn leap(&mut self, rng: &mut SimRng, cfg: &LeapConfig) -> std::result::Result<(), Stop> {
        self.leap_steps += 1;
        let half = 0.5 * cfg.dt;
        let disp = displacement_law(cfg.dt);
        let (lo, hi) = self.occupied_range();
        let mut arrivals: Vec<(i64, Class, u64)> = Vec::new();
        for x in lo..=hi {
            let i = self.idx(x);
            if !self.dense[i] {
                continue;
            }
            let xi = self.env.rate(x);
            for class in [Class::Clean, Class::Tainted] {
                let m = match class {
                    Class::Clean => self.clean[i],
                    Class::Tainted => self.tainted[i],
                };
                if m == 0 {
                    continue;
                }
                self.remove(x, class, m);
                let grown = yule(rng, m, xi, half);
                self.events += grown - m;
                let mut rest = grown;
                let mut rest_p = 1.0;
                for &(d, p) in &disp {
                    if rest == 0 {
                        break;
                    }
                    let c = if d == 0 { rest } else { binomial(rng, rest, p / rest_p) };
                    rest -= c;
                    rest_p -= p;
                    if c > 0 {
                        if d != 0 {
                            self.events += c;
                        }
                        arrivals.push((x + d, class, c));
                    }
                }
            }
        }
        arrivals.sort_unstable_by_key(|&(to, class, _)| (to, class == Class::Tainted));
        let mut j = 0;
        while j < arrivals.len() {
            let (to, class, mut c) = arrivals[j];
            j += 1;
            while j < arrivals.len() && arrivals[j].0 == to && arrivals[j].1 == class {
                c += arrivals[j].2;
                j += 1;
            }
            if self.env.contains(to) {
                let grown = yule(rng, c, self.env.rate(to), half);
                self.events += grown - c;
                c = grown;
            }
            self.place(to, class, c)?;
        }
        self.reclassify(cfg);
        Ok(())
    }

    fn reclassify(&mut self, cfg: &LeapConfig) {
        let (lo, hi) = self.occupied_range();
        for x in lo..=hi {
            let i = self.idx(x);
            let tot = self.clean[i] + self.tainted[i];
            if self.dense[i] && tot < cfg.dense_threshold / 2 {
                self.dense[i] = false;
                self.fen.add(i, tot as i64);
                self.sparse_pop += tot;
            } else if !self.dense[i] && tot >= cfg.dense_threshold {
                self.dense[i] = true;
                self.fen.add(i, -(tot as i64));
                self.sparse_pop -= tot;
            }
        }
    }
}

const MAX_DISPLACEMENT: i64 = 4;

/// `P(d) = e^{−dt} I_{|d|}(dt)` for `0 < |d| ≤ MAX_DISPLACEMENT`, followed
/// by `d = 0`, which absorbs the truncated tail.
fn displacement_law(dt: f64) -> Vec<(i64, f64)> {
    let half = 0.5 * dt;
    let bessel = |k: i64| -> f64 {
        let mut term = half.powi(k as i32) / (1..=k).map(|j| j as f64).product::<f64>();
        let mut sum = term;
        for j in 1..30 {
            term *= half * half / (j as f64 * (j as i64 + k) as f64);
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        sum
    };
    let mut law = Vec::with_capacity(2 * MAX_DISPLACEMENT as usize + 1);
    for k in 1..=MAX_DISPLACEMENT {
        let p = (-dt).exp() * bessel(k);
        law.push((k, p));
        law.push((-k, p));
    }
    let moved: f64 = law.iter().map(|(_, p)| p).sum();
    law.push((0, 1.0 - moved));
    law
}

/// Population after time `s` of a Yule process at rate `xi` started from
/// `m` individuals: `m` plus a negative binomial, drawn as a Gamma–Poisson
/// mixture.
fn yule(rng: &mut SimRng, m: u64, xi: f64, s: f64) -> u64 {
    if m == 0 || xi <= 0.0 || s <= 0.0 {
        return m;
    }
    let q = (-xi * s).exp();
    let scale = -(-xi * s).exp_m1() / q;
    let lambda = Gamma::new(m as f64, scale).expect("valid gamma").sample(rng);
    if !(lambda > 0.0) {
        return m;
    }
    m + Poisson::new(lambda).expect("valid poisson").sample(rng) as u64
}

fn binomial(rng: &mut SimRng, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

struct Recorder<'g> {
    grid: &'g [f64],
    next: usize,
    m_t: Vec<Option<i64>>,
    n_t0: Vec<Option<u64>>,
}

impl<'g> Recorder<'g> {
    fn new(grid: &'g [f64]) -> Self {
        Recorder {
            grid,
            next: 0,
            m_t: Vec::with_capacity(grid.len()),
            n_t0: Vec::with_capacity(grid.len()),
        }
    }

    /// Records the current state for grid times before `t` (or up to and
    /// including `t` when `inclusive`).
    fn until(&mut self, sim: &Sim<'_>, t: f64, inclusive: bool) {
        while self.next < self.grid.len() {
            let g = self.grid[self.next];
            if g < t || (inclusive && g <= t) {
                self.m_t.push((sim.pop > 0).then_some(sim.hi_occ));
                self.n_t0.push((sim.floor_all < 0).then(|| sim.count(0)));
                self.next += 1;
            } else {
                break;
            }
        }
    }
}

fn run(env: &Environment, cfg: &SimConfig, n_target: Option<usize>, t_end: Option<f64>) -> Result<RunRecord> {
    cfg.validate(env)?;
    if let Some(n) = n_target {
        env.require(0, n as i64)?;
    }
    let target = n_target.map(|n| n as i64);
    let horizon = t_end.unwrap_or(f64::INFINITY);
    let mut rng = rng::stream(cfg.seed, 0);
    let mut sim = Sim::new(env, cfg);
    let grid: &[f64] = if t_end.is_some() { &cfg.record_grid } else { &[] };
    let mut rec = Recorder::new(grid);
    let rate_per = 1.0 + env.es();
    let mut status = RunStatus::Completed;
    let mut step_end = cfg.leap.map_or(horizon, |l| l.dt.min(horizon));

    'outer: while !sim.done(target) {
        if sim.pop == 0 {
            status = RunStatus::Extinct;
            break;
        }
        if sim.sparse_pop > 0 {
            let e: f64 = rng.sample(Exp1);
            let next = sim.t + e / (sim.sparse_pop as f64 * rate_per);
            if next <= step_end {
                rec.until(&sim, next, false);
                sim.t = next;
                match sim.event(&mut rng) {
                    Ok(()) => continue,
                    Err(stop) => {
                        status = stop_status(stop);
                        break 'outer;
                    }
                }
            }
        }
        // No further sparse event before the step boundary.
        if step_end >= horizon {
            rec.until(&sim, horizon, true);
            sim.t = horizon;
            break;
        }
        rec.until(&sim, step_end, false);
        sim.t = step_end;
        if let Some(l) = &cfg.leap {
            if let Err(stop) = sim.leap(&mut rng, l) {
                status = stop_status(stop);
                break;
            }
            step_end = (step_end + l.dt).min(horizon);
        }
    }
    if t_end.is_some() && status == RunStatus::Completed {
        rec.until(&sim, horizon, true);
    }
    let shadow = cfg.shadow_window.map(|w| ShadowRecord {
        window: w,
        first_hit: sim.shadow_hit.clone(),
        tainted_final: sim.tainted.iter().sum(),
        coupling_breaks: sim.breaks,
        extinct: sim.clean_pop == 0,
    });
    Ok(RunRecord {
        version: RUN_RECORD_VERSION,
        env_seed: env.seed(),
        sim_seed: cfg.seed,
        n_target,
        t_end,
        status,
        t_final: sim.t,
        first_hit: sim.first_hit,
        grid: grid.to_vec(),
        m_t: rec.m_t,
        n_t0: rec.n_t0,
        pop_final: sim.pop,
        max_pop: sim.max_pop,
        pruned: sim.pruned,
        left_exits: sim.left_exits,
        events: sim.events,
        leap_steps: sim.leap_steps,
        prune_window: cfg.prune_window,
        leap: cfg.leap,
        shadow,
    })
}

fn stop_status(stop: Stop) -> RunStatus {
    match stop {
        Stop::Right => RunStatus::RightBoundaryExceeded,
        Stop::PopCap => RunStatus::PopCapExceeded,
    }
}

/// Runs until some particle first reaches `n_target` (and, with a shadow
/// window, until the smaller system does too).
pub fn simulate_hitting(env: &Environment, n_target: usize, cfg: &SimConfig) -> Result<RunRecord> {
    if n_target == 0 {
        return Err(Error::param("n_target must be ≥ 1"));
    }
    run(env, cfg, Some(n_target), None)
}

/// Runs to time `t_end`, recording `M_t` and `N(t, 0)` on `cfg.record_grid`.
pub fn simulate_until(env: &Environment, t_end: f64, cfg: &SimConfig) -> Result<RunRecord> {
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::param("t_end must be finite and ≥ 0"));
    }
    run(env, cfg, None, Some(t_end))
}

/// Particle-level simulation without pruning that tracks, for every particle
/// alive at `t_end`, the first hitting times of levels `1..=levels` along its
/// ancestral line (`∞` if not reached).
pub fn lineage_hits(env: &Environment, t_end: f64, levels: usize, pop_cap: usize, rng: &mut SimRng) -> Result<Vec<Vec<f64>>> {
    env.require(-1, levels as i64)?;
    let mut pos: Vec<i64> = vec![0];
    let mut hits: Vec<Vec<f64>> = vec![vec![f64::INFINITY; levels]];
    let rate_per = 1.0 + env.es();
    let mut t = 0.0;
    loop {
        let e: f64 = rng.sample(Exp1);
        t += e / (pos.len() as f64 * rate_per);
        if t > t_end {
            break;
        }
        let i = rng.random_range(0..pos.len());
        let x = pos[i];
        let v = rng.random::<f64>() * rate_per;
        if v < 1.0 {
            let to = if v < 0.5 { x + 1 } else { x - 1 };
            if !env.contains(to) {
                return Err(Error::Window {
                    need_lo: to.min(env.x_min()),
                    need_hi: to.max(env.x_max()),
                    have_lo: env.x_min(),
                    have_hi: env.x_max(),
                });
            }
            pos[i] = to;
            if to >= 1 && (to as usize) <= levels && hits[i][to as usize - 1].is_infinite() {
                hits[i][to as usize - 1] = t;
            }
        } else if v - 1.0 < env.rate(x) {
            if pos.len() >= pop_cap {
                return Err(Error::param(format!("lineage population exceeded {pop_cap}")));
            }
            pos.push(x);
            hits.push(hits[i].clone());
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(rate: f64, lo: i64, hi: i64) -> Environment {
        Environment::homogeneous(rate, lo, hi).unwrap()
    }

    #[test]
    fn fenwick_find() {
        let mut f = Fenwick::new(5);
        for (i, c) in [3u64, 0, 2, 5, 1].iter().enumerate() {
            f.add(i, *c as i64);
        }
        assert_eq!(f.find(0), (0, 0));
        assert_eq!(f.find(2), (0, 2));
        assert_eq!(f.find(3), (2, 0));
        assert_eq!(f.find(5), (3, 0));
        assert_eq!(f.find(10), (4, 0));
        f.add(3, -5);
        assert_eq!(f.find(5), (4, 0));
    }

    #[test]
    fn zero_time_run() {
        let env = flat(0.2, -80, 80);
        let cfg = SimConfig {
            record_grid: vec![0.0],
            ..SimConfig::default()
        };
        let r = simulate_until(&env, 0.0, &cfg).unwrap();
        assert_eq!(r.m_t, vec![Some(0)]);
        assert_eq!(r.n_t0, vec![Some(1)]);
        assert_eq!(r.status, RunStatus::Completed);
    }

    #[test]
    fn deterministic_and_round_trips() {
        let env = flat(0.2, -80, 40);
        let cfg = SimConfig {
            seed: 11,
            ..SimConfig::default()
        };
        let a = simulate_hitting(&env, 20, &cfg).unwrap();
        let b = simulate_hitting(&env, 20, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.first_hit.len(), 21);
        assert!(a.first_hit.windows(2).all(|w| w[1] >= w[0]));
        let back = RunRecord::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn window_must_cover_prune_range() {
        let env = flat(0.2, -10, 40);
        let cfg = SimConfig::default();
        assert!(simulate_hitting(&env, 5, &cfg).is_err());
    }

    #[test]
    fn pop_cap_aborts_with_partial_record() {
        let env = flat(0.3, -80, 200);
        let cfg = SimConfig {
            pop_cap: Some(50),
            ..SimConfig::default()
        };
        let r = simulate_hitting(&env, 150, &cfg).unwrap();
        assert_eq!(r.status, RunStatus::PopCapExceeded);
        assert!(r.first_hit.len() < 151);
    }

    #[test]
    fn shadow_hits_no_earlier_than_full_system() {
        let env = flat(0.2, -80, 60);
        let cfg = SimConfig {
            prune_window: Some(20),
            shadow_window: Some(8),
            seed: 5,
            ..SimConfig::default()
        };
        let r = simulate_hitting(&env, 40, &cfg).unwrap();
        let s = r.shadow.as_ref().unwrap();
        assert!(!s.extinct);
        for k in 0..=40 {
            assert!(s.first_hit[k] >= r.first_hit[k]);
        }
    }

    #[test]
    fn displacement_law_is_symmetric_and_normalised() {
        let law = displacement_law(0.05);
        assert!((law.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-15);
        let p = |d: i64| law.iter().find(|(k, _)| *k == d).unwrap().1;
        assert_eq!(p(1), p(-1));
        // e^{-dt} I_1(dt) with I_1(x) ≈ x/2 + x³/16.
        let want = (-0.05f64).exp() * (0.025 + 0.05f64.powi(3) / 16.0);
        assert!((p(1) - want).abs() < 1e-9);
        let var: f64 = law.iter().map(|(d, p)| (d * d) as f64 * p).sum();
        // Mass beyond |d| = 4 is O(dt^5), so the variance is short by about 1e-8.
        assert!((var - 0.05).abs() < 1e-8);
    }

    #[test]
    fn yule_growth_has_exponential_mean() {
        let mut r = rng::stream(9, 0);
        let reps = 20_000;
        let (m, xi, s) = (50u64, 0.4, 0.5);
        let draws: Vec<f64> = (0..reps).map(|_| yule(&mut r, m, xi, s) as f64).collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let want = m as f64 * (xi * s).exp();
        assert!((mean - want).abs() < 4.0 * (var / reps as f64).sqrt());
        assert_eq!(yule(&mut r, 7, 0.0, 1.0), 7);
    }

    #[test]
    fn lineages_inherit_hits() {
        let env = flat(0.3, -100, 100);
        let mut rng = rng::stream(2, 0);
        let hits = lineage_hits(&env, 3.0, 3, 10_000, &mut rng).unwrap();
        assert!(!hits.is_empty());
        for h in &hits {
            for k in 1..3 {
                if h[k].is_finite() {
                    assert!(h[k - 1] <= h[k]);
                }
            }
        }
    }
}
