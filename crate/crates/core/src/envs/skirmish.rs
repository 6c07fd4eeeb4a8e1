use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::parse_err;
use crate::error::{LabError, Result};

pub const NO_OP: usize = 0;
pub const STOP: usize = 1;
/// North, south, east, west.
pub const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];
pub const FIRST_ATTACK: usize = 6;

const KILL_BONUS: f64 = 10.0;
const WIN_BONUS: f64 = 200.0;
const MAX_RETURN: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeamConfig {
    pub count: usize,
    pub health: u32,
    pub damage: u32,
    /// Steps a unit must wait after firing before it can fire again.
    pub cooldown: u32,
    /// Explicit `[x, y]` spawn cells, used with the fixed seed policy.
    pub spawn: Option<Vec<[usize; 2]>>,
}

impl Default for TeamConfig {
    fn default() -> Self {
        TeamConfig {
            count: 3,
            health: 5,
            damage: 1,
            cooldown: 0,
            spawn: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Spawn at the configured (or default) cells every episode.
    Fixed,
    /// Sample distinct cells in each team's edge band from the episode seed.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkirmishConfig {
    /// `[width, height]`.
    pub grid: [usize; 2],
    pub allies: TeamConfig,
    pub enemies: TeamConfig,
    pub sight: f64,
    pub shoot: f64,
    #[serde(rename = "move")]
    pub move_amount: usize,
    pub limit: usize,
    pub seed_policy: SeedPolicy,
}

impl Default for SkirmishConfig {
    fn default() -> Self {
        SkirmishConfig {
            grid: [8, 8],
            allies: TeamConfig::default(),
            enemies: TeamConfig::default(),
            sight: 4.0,
            shoot: 2.0,
            move_amount: 1,
            limit: 60,
            seed_policy: SeedPolicy::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub x: usize,
    pub y: usize,
    pub health: u32,
    pub cooldown: u32,
}

impl Unit {
    pub fn alive(&self) -> bool {
        self.health > 0
    }

    fn offset_to(&self, other: &Unit) -> (f64, f64) {
        (
            other.x as f64 - self.x as f64,
            other.y as f64 - self.y as f64,
        )
    }

    fn distance(&self, other: &Unit) -> f64 {
        let (dx, dy) = self.offset_to(other);
        dx.hypot(dy)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Roster {
    pub allies: Vec<Unit>,
    pub enemies: Vec<Unit>,
}

impl Roster {
    fn occupied(&self, x: usize, y: usize) -> bool {
        self.allies
            .iter()
            .chain(&self.enemies)
            .any(|u| u.alive() && u.x == x && u.y == y)
    }
}

pub(super) struct Outcome {
    pub reward: f64,
    pub ended: bool,
    pub win: bool,
}

/// Grid combat between agent-controlled allies and scripted enemies.
///
/// Allies act first, in id order, then every surviving enemy attacks the
/// nearest living ally in range (ties to the lowest id) or steps toward it.
/// Raw reward is damage dealt plus a bonus per kill and a win bonus, scaled
/// so a won episode returns exactly 20.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skirmish {
    pub config: SkirmishConfig,
    pub scale: f64,
}

fn config_err(key: &str, reason: impl Into<String>) -> LabError {
    LabError::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl Skirmish {
    pub fn new(config: SkirmishConfig) -> Result<Self> {
        let [w, h] = config.grid;
        if w == 0 || h == 0 {
            return Err(config_err("grid", "width and height must be positive"));
        }
        for (key, team) in [("allies", &config.allies), ("enemies", &config.enemies)] {
            if team.count == 0 || team.health == 0 || team.damage == 0 {
                return Err(config_err(key, "count, health and damage must be positive"));
            }
        }
        if !(config.shoot > 0.0 && config.sight > config.shoot) {
            return Err(config_err("sight", "need sight > shoot > 0"));
        }
        if config.limit == 0 || config.move_amount == 0 {
            return Err(config_err("limit", "limit and move must be positive"));
        }
        let band = (w / 4).max(1);
        match config.seed_policy {
            SeedPolicy::Random => {
                for (key, team) in [("allies", &config.allies), ("enemies", &config.enemies)] {
                    if team.spawn.is_some() {
                        return Err(config_err(
                            &format!("{key}.spawn"),
                            "explicit spawns need seed_policy \"fixed\"",
                        ));
                    }
                    if team.count > band * h {
                        return Err(config_err(key, "team does not fit in its spawn band"));
                    }
                }
                if 2 * band > w {
                    return Err(config_err("grid", "too narrow for two spawn bands"));
                }
            }
            SeedPolicy::Fixed => {
                let cells: Vec<[usize; 2]> = Self::fixed_cells(&config)?
                    .into_iter()
                    .flatten()
                    .collect();
                for (i, c) in cells.iter().enumerate() {
                    if c[0] >= w || c[1] >= h {
                        return Err(config_err("spawn", format!("cell {c:?} lies outside the grid")));
                    }
                    if cells[..i].contains(c) {
                        return Err(config_err("spawn", format!("overlapping spawn positions at {c:?}")));
                    }
                }
            }
        }
        let raw_max = f64::from(config.enemies.health) * config.enemies.count as f64
            + KILL_BONUS * config.enemies.count as f64
            + WIN_BONUS;
        Ok(Skirmish {
            scale: MAX_RETURN / raw_max,
            config,
        })
    }

    fn fixed_cells(config: &SkirmishConfig) -> Result<[Vec<[usize; 2]>; 2]> {
        let [w, h] = config.grid;
        let layout = |team: &TeamConfig, x: usize, key: &str| -> Result<Vec<[usize; 2]>> {
            match &team.spawn {
                Some(cells) if cells.len() != team.count => Err(config_err(
                    &format!("{key}.spawn"),
                    format!("{} cells for {} units", cells.len(), team.count),
                )),
                Some(cells) => Ok(cells.clone()),
                None => Ok((0..team.count)
                    .map(|i| [x, (i + 1) * h / (team.count + 1)])
                    .collect()),
            }
        };
        let ally_x = usize::from(w > 2);
        let enemy_x = w.saturating_sub(1 + usize::from(w > 2));
        Ok([
            layout(&config.allies, ally_x, "allies")?,
            layout(&config.enemies, enemy_x, "enemies")?,
        ])
    }

    pub(super) fn from_value(path: &Path, value: &Value) -> Result<Self> {
        let mut value = value.clone();
        if let Some(obj) = value.as_object_mut() {
            obj.remove("name");
        }
        let config: SkirmishConfig = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
                .unwrap_or("<root>")
                .to_string();
            parse_err(path, field, msg)
        })?;
        Skirmish::new(config)
    }

    pub fn n_actions(&self) -> usize {
        FIRST_ATTACK + self.config.enemies.count
    }

    pub fn obs_width(&self) -> usize {
        4 * (self.config.enemies.count + self.config.allies.count - 1) + 2
    }

    pub fn state_width(&self) -> usize {
        4 * self.config.allies.count + 3 * self.config.enemies.count
    }

    fn unit(cell: [usize; 2], team: &TeamConfig) -> Unit {
        Unit {
            x: cell[0],
            y: cell[1],
            health: team.health,
            cooldown: 0,
        }
    }

    pub fn spawn(&self, seed: u64) -> Roster {
        let c = &self.config;
        let [allies, enemies] = match c.seed_policy {
            SeedPolicy::Fixed => Self::fixed_cells(c).expect("validated at construction"),
            SeedPolicy::Random => {
                let [w, h] = c.grid;
                let band = (w / 4).max(1);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut pick = |x0: usize, count: usize| {
                    let mut cells: Vec<[usize; 2]> = (x0..x0 + band)
                        .flat_map(|x| (0..h).map(move |y| [x, y]))
                        .collect();
                    cells.shuffle(&mut rng);
                    cells.truncate(count);
                    cells
                };
                [pick(0, c.allies.count), pick(w - band, c.enemies.count)]
            }
        };
        Roster {
            allies: allies.into_iter().map(|p| Self::unit(p, &c.allies)).collect(),
            enemies: enemies.into_iter().map(|p| Self::unit(p, &c.enemies)).collect(),
        }
    }

    fn target_cell(&self, u: &Unit, dir: (i64, i64), amount: usize) -> Option<(usize, usize)> {
        let x = u.x as i64 + dir.0 * amount as i64;
        let y = u.y as i64 + dir.1 * amount as i64;
        let [w, h] = self.config.grid;
        (x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h).then_some((x as usize, y as usize))
    }

    fn free_move(&self, r: &Roster, u: &Unit, dir: (i64, i64), amount: usize) -> Option<(usize, usize)> {
        self.target_cell(u, dir, amount)
            .filter(|&(x, y)| !r.occupied(x, y))
    }

    pub(super) fn masks(&self, r: &Roster) -> Vec<Vec<bool>> {
        let n = self.n_actions();
        r.allies
            .iter()
            .map(|a| {
                let mut m = vec![false; n];
                if !a.alive() {
                    m[NO_OP] = true;
                    return m;
                }
                m[STOP] = true;
                for (k, dir) in MOVES.iter().enumerate() {
                    m[2 + k] = self.free_move(r, a, *dir, self.config.move_amount).is_some();
                }
                for (j, e) in r.enemies.iter().enumerate() {
                    m[FIRST_ATTACK + j] =
                        e.alive() && a.cooldown == 0 && a.distance(e) <= self.config.shoot;
                }
                m
            })
            .collect()
    }

    pub(super) fn advance(&self, r: &mut Roster, joint: &[usize]) -> Outcome {
        let c = &self.config;
        let mut ally_fired = vec![false; r.allies.len()];
        let mut enemy_fired = vec![false; r.enemies.len()];
        let mut raw = 0.0;

        for (i, &action) in joint.iter().enumerate() {
            if !r.allies[i].alive() {
                continue;
            }
            match action {
                NO_OP | STOP => {}
                a if a < FIRST_ATTACK => {
                    let unit = r.allies[i].clone();
                    if let Some((x, y)) = self.free_move(r, &unit, MOVES[a - 2], c.move_amount) {
                        r.allies[i].x = x;
                        r.allies[i].y = y;
                    }
                }
                a => {
                    ally_fired[i] = true;
                    let target = &mut r.enemies[a - FIRST_ATTACK];
                    if target.alive() {
                        let dealt = c.allies.damage.min(target.health);
                        target.health -= dealt;
                        raw += f64::from(dealt);
                        if !target.alive() {
                            raw += KILL_BONUS;
                        }
                    }
                }
            }
        }

        let win = r.enemies.iter().all(|e| !e.alive());
        if win {
            raw += WIN_BONUS;
        } else {
            for j in 0..r.enemies.len() {
                if !r.enemies[j].alive() {
                    continue;
                }
                let me = r.enemies[j].clone();
                let Some(target) = self.nearest_ally(r, &me) else {
                    break;
                };
                let ally = &r.allies[target];
                let (dx, dy) = me.offset_to(ally);
                if me.distance(ally) <= c.shoot {
                    if me.cooldown == 0 {
                        enemy_fired[j] = true;
                        let ally = &mut r.allies[target];
                        ally.health -= c.enemies.damage.min(ally.health);
                    }
                    continue;
                }
                let step_x = (dx.signum() as i64, 0);
                let step_y = (0, dy.signum() as i64);
                let amount = |d: f64| c.move_amount.min(d.abs() as usize);
                let mut options = vec![(step_x, amount(dx)), (step_y, amount(dy))];
                if dy.abs() > dx.abs() {
                    options.swap(0, 1);
                }
                for (dir, k) in options {
                    if k == 0 {
                        continue;
                    }
                    if let Some((x, y)) = self.free_move(r, &me, dir, k) {
                        r.enemies[j].x = x;
                        r.enemies[j].y = y;
                        break;
                    }
                }
            }
        }

        let tick = |units: &mut [Unit], fired: &[bool], cooldown: u32| {
            for (u, &f) in units.iter_mut().zip(fired) {
                u.cooldown = if !u.alive() {
                    0
                } else if f {
                    cooldown
                } else {
                    u.cooldown.saturating_sub(1)
                };
            }
        };
        tick(&mut r.allies, &ally_fired, c.allies.cooldown);
        tick(&mut r.enemies, &enemy_fired, c.enemies.cooldown);

        let lost = r.allies.iter().all(|a| !a.alive());
        Outcome {
            reward: raw * self.scale,
            ended: win || lost,
            win,
        }
    }

    fn nearest_ally(&self, r: &Roster, from: &Unit) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, a) in r.allies.iter().enumerate() {
            if !a.alive() {
                continue;
            }
            let d = from.distance(a);
            if best.is_none_or(|(b, _)| d < b) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i)
    }

    fn cooldown_norm(team: &TeamConfig) -> f64 {
        f64::from(team.cooldown.max(1))
    }

    pub(super) fn observations(&self, r: &Roster) -> Vec<Vec<f64>> {
        let c = &self.config;
        let sight = c.sight;
        let seen = |me: &Unit, other: &Unit, max_health: u32, out: &mut Vec<f64>| {
            let d = me.distance(other);
            if other.alive() && d <= sight {
                let (dx, dy) = me.offset_to(other);
                out.extend_from_slice(&[
                    d / sight,
                    dx / sight,
                    dy / sight,
                    f64::from(other.health) / f64::from(max_health),
                ]);
            } else {
                out.extend_from_slice(&[0.0; 4]);
            }
        };
        r.allies
            .iter()
            .enumerate()
            .map(|(i, me)| {
                if !me.alive() {
                    return vec![0.0; self.obs_width()];
                }
                let mut out = Vec::with_capacity(self.obs_width());
                for e in &r.enemies {
                    seen(me, e, c.enemies.health, &mut out);
                }
                for (k, a) in r.allies.iter().enumerate() {
                    if k != i {
                        seen(me, a, c.allies.health, &mut out);
                    }
                }
                out.push(f64::from(me.health) / f64::from(c.allies.health));
                out.push(f64::from(me.cooldown) / Self::cooldown_norm(&c.allies));
                out
            })
            .collect()
    }

    pub(super) fn state_vector(&self, r: &Roster) -> Vec<f64> {
        let c = &self.config;
        let nx = (c.grid[0].max(2) - 1) as f64;
        let ny = (c.grid[1].max(2) - 1) as f64;
        let mut out = Vec::with_capacity(self.state_width());
        for a in &r.allies {
            if a.alive() {
                out.extend_from_slice(&[
                    f64::from(a.health) / f64::from(c.allies.health),
                    f64::from(a.cooldown) / Self::cooldown_norm(&c.allies),
                    a.x as f64 / nx,
                    a.y as f64 / ny,
                ]);
            } else {
                out.extend_from_slice(&[0.0; 4]);
            }
        }
        for e in &r.enemies {
            if e.alive() {
                out.extend_from_slice(&[
                    f64::from(e.health) / f64::from(c.enemies.health),
                    e.x as f64 / nx,
                    e.y as f64 / ny,
                ]);
            } else {
                out.extend_from_slice(&[0.0; 3]);
            }
        }
        out
    }
}
