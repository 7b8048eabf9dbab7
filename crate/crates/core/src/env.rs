//! Deterministic 2-D tabletop: a gripper, colored blocks, one target zone,
//! optional distractors. Continuous positions, discrete dual-view rendering
//! (front view of the whole table plus a wrist window around the gripper),
//! a scripted expert, and the success predicate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const N_COLORS: usize = 4;
pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "yellow"];

/// Cell categories of the toy render codebook.
pub mod cell {
    pub const EMPTY: u8 = 0;
    pub const OOB: u8 = 1;
    pub const ZONE: u8 = 2;
    pub const BLOCK0: u8 = 3; // BLOCK0 + color
    pub const GRIP_OPEN: u8 = 7;
    pub const GRIP_CLOSED: u8 = 8;
    pub const HOLD0: u8 = 9; // HOLD0 + color of the held block
}

/// Total number of distinct cell categories (the toy image codebook size).
pub const CELL_CATEGORIES: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub width: f64,
    pub height: f64,
    pub front_rows: usize,
    pub front_cols: usize,
    pub wrist_rows: usize,
    pub wrist_cols: usize,
    pub grasp_radius: f64,
    pub zone_radius: f64,
    pub max_step: f64,
    pub max_episode_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 8.0,
            height: 8.0,
            front_rows: 8,
            front_cols: 8,
            wrist_rows: 3,
            wrist_cols: 3,
            grasp_radius: 0.5,
            zone_radius: 1.0,
            max_step: 1.0,
            max_episode_len: 40,
        }
    }
}

impl EnvConfig {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("serializable config"));
        hex_string(&h.finalize()[..8])
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SingleTarget,
    MultiTarget,
    WithDistractors,
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_target" => Ok(Self::SingleTarget),
            "multi_target" => Ok(Self::MultiTarget),
            "with_distractors" => Ok(Self::WithDistractors),
            other => Err(Error::Config(format!("unknown task family {other}"))),
        }
    }
}

impl std::fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::SingleTarget => "single_target",
            Self::MultiTarget => "multi_target",
            Self::WithDistractors => "with_distractors",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub instruction: String,
    pub target_color: u8,
    pub distractor_colors: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub color: u8,
    pub pos: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: (f64, f64),
    pub closed: bool,
    pub held: Option<u32>,
    pub objects: Vec<ObjectState>,
    pub zone_center: (f64, f64),
    pub zone_radius: f64,
    pub step_count: u32,
}

/// Continuous action: position deltas plus a gripper command, `g > 0` closes
/// and `g <= 0` opens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub g: f64,
}

impl Action {
    pub fn new(dx: f64, dy: f64, g: f64) -> Self {
        Self { dx, dy, g }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.g]
    }
}

/// Action dimensionality (dx, dy, g).
pub const ACTION_DIMS: usize = 3;
/// Proprioceptive dimensionality (x, y, aperture).
pub const STATE_DIMS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProprioState {
    pub x: f64,
    pub y: f64,
    /// 0 open, 1 closed.
    pub aperture: u8,
}

impl ProprioState {
    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.aperture as f64]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<u8>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cells: Vec<u8>) -> Self {
        assert_eq!(cells.len(), rows * cols);
        Self { rows, cols, cells }
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.cells[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub front: Grid,
    pub wrist: Grid,
}

pub struct Env {
    cfg: EnvConfig,
}

impl Env {
    pub fn new(cfg: EnvConfig) -> Self {
        Self { cfg }
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Seeded episode initialization. Identical `(seed, family)` always
    /// produces identical states.
    pub fn reset(&self, seed: u64, family: TaskFamily) -> Result<(WorldState, Task)> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target_color = rng.gen_range(0..N_COLORS as u8);

        let margin = c.zone_radius + 0.2;
        let zone_center = (
            rng.gen_range(margin..c.width - margin),
            rng.gen_range(margin..c.height - margin),
        );

        let (n_targets, n_distractors) = match family {
            TaskFamily::SingleTarget => (1, 0),
            TaskFamily::MultiTarget => (rng.gen_range(2..=3), 0),
            TaskFamily::WithDistractors => (1, rng.gen_range(1..=2)),
        };
        let mut distractor_colors = Vec::new();
        for _ in 0..n_distractors {
            // Any color other than the target.
            let shift = rng.gen_range(1..N_COLORS as u8);
            distractor_colors.push((target_color + shift) % N_COLORS as u8);
        }

        let mut objects: Vec<ObjectState> = Vec::new();
        let place = |rng: &mut ChaCha8Rng, color: u8, objects: &mut Vec<ObjectState>| -> Result<()> {
            const TRIES: usize = 100;
            for _ in 0..TRIES {
                let pos = (
                    rng.gen_range(0.3..c.width - 0.3),
                    rng.gen_range(0.3..c.height - 0.3),
                );
                let outside_zone = dist(pos, zone_center) > c.zone_radius + 0.6;
                let clear = objects.iter().all(|o| dist(pos, o.pos) >= 1.1);
                if outside_zone && clear {
                    objects.push(ObjectState {
                        id: objects.len() as u32,
                        color,
                        pos,
                    });
                    return Ok(());
                }
            }
            Err(Error::PlacementFailed(TRIES))
        };
        for _ in 0..n_targets {
            place(&mut rng, target_color, &mut objects)?;
        }
        for i in 0..n_distractors {
            let color = distractor_colors[i];
            place(&mut rng, color, &mut objects)?;
        }

        let gripper = (
            rng.gen_range(0.2..c.width - 0.2),
            rng.gen_range(0.2..c.height - 0.2),
        );

        let task = Task {
            instruction: format!(
                "place the {} block in the circle",
                COLOR_NAMES[target_color as usize]
            ),
            target_color,
            distractor_colors,
        };
        let state = WorldState {
            gripper,
            closed: false,
            held: None,
            objects,
            zone_center,
            zone_radius: c.zone_radius,
            step_count: 0,
        };
        Ok((state, task))
    }

    /// Pure transition. Deltas are clipped to `max_step`, positions clamp to
    /// the table, closing near an object grasps the nearest one, opening
    /// releases, a held object co-moves with the gripper.
    pub fn step(&self, state: &WorldState, action: &Action) -> WorldState {
        let c = &self.cfg;
        let mut next = state.clone();
        let dx = action.dx.clamp(-c.max_step, c.max_step);
        let dy = action.dy.clamp(-c.max_step, c.max_step);
        next.gripper.0 = (state.gripper.0 + dx).clamp(0.0, c.width - 1e-9);
        next.gripper.1 = (state.gripper.1 + dy).clamp(0.0, c.height - 1e-9);

        let want_closed = action.g > 0.0;
        if want_closed && next.held.is_none() {
            // Closing grasps the nearest object within reach; an
            // empty closed gripper keeps trying while commanded shut.
            let mut best: Option<(u32, f64)> = None;
            for o in &next.objects {
                let d = dist(o.pos, next.gripper);
                if d <= c.grasp_radius && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((o.id, d));
                }
            }
            next.held = best.map(|(id, _)| id);
        } else if !want_closed {
            next.held = None;
        }
        next.closed = want_closed;

        if let Some(id) = next.held {
            let g = next.gripper;
            if let Some(o) = next.objects.iter_mut().find(|o| o.id == id) {
                o.pos = g;
            }
        }
        next.step_count = state.step_count + 1;
        next
    }

    pub fn proprio(&self, state: &WorldState) -> ProprioState {
        ProprioState {
            x: state.gripper.0,
            y: state.gripper.1,
            aperture: state.closed as u8,
        }
    }

    /// Rasterizes the state into the dual-view observation. Precedence per
    /// cell: gripper glyph, then objects, then zone, then empty.
    pub fn render(&self, state: &WorldState) -> Observation {
        let c = &self.cfg;
        let cell_w = c.width / c.front_cols as f64;
        let cell_h = c.height / c.front_rows as f64;
        let gcell = (
            ((state.gripper.1 / cell_h) as isize).clamp(0, c.front_rows as isize - 1),
            ((state.gripper.0 / cell_w) as isize).clamp(0, c.front_cols as isize - 1),
        );

        let category = |r: isize, col: isize| -> u8 {
            if (r, col) == gcell {
                return match (state.closed, state.held) {
                    (_, Some(id)) => {
                        let color = state
                            .objects
                            .iter()
                            .find(|o| o.id == id)
                            .map(|o| o.color)
                            .unwrap_or(0);
                        cell::HOLD0 + color
                    }
                    (true, None) => cell::GRIP_CLOSED,
                    (false, None) => cell::GRIP_OPEN,
                };
            }
            for o in &state.objects {
                if Some(o.id) == state.held {
                    continue;
                }
                let oc = (
                    ((o.pos.1 / cell_h) as isize).clamp(0, c.front_rows as isize - 1),
                    ((o.pos.0 / cell_w) as isize).clamp(0, c.front_cols as isize - 1),
                );
                if oc == (r, col) {
                    return cell::BLOCK0 + o.color;
                }
            }
            let center = (
                (col as f64 + 0.5) * cell_w,
                (r as f64 + 0.5) * cell_h,
            );
            if dist(center, state.zone_center) <= state.zone_radius {
                return cell::ZONE;
            }
            cell::EMPTY
        };

        let mut front = Vec::with_capacity(c.front_rows * c.front_cols);
        for r in 0..c.front_rows as isize {
            for col in 0..c.front_cols as isize {
                front.push(category(r, col));
            }
        }

        let mut wrist = Vec::with_capacity(c.wrist_rows * c.wrist_cols);
        let half_r = c.wrist_rows as isize / 2;
        let half_c = c.wrist_cols as isize / 2;
        for dr in -half_r..=half_r {
            for dc in -half_c..=half_c {
                let (r, col) = (gcell.0 + dr, gcell.1 + dc);
                if r < 0 || col < 0 || r >= c.front_rows as isize || col >= c.front_cols as isize {
                    wrist.push(cell::OOB);
                } else {
                    wrist.push(category(r, col));
                }
            }
        }

        Observation {
            front: Grid::new(c.front_rows, c.front_cols, front),
            wrist: Grid::new(c.wrist_rows, c.wrist_cols, wrist),
        }
    }

    /// Phase-based scripted policy: approach the nearest target block, close,
    /// carry to the zone center, open. Emits holding no-ops once the task is
    /// already satisfied.
    pub fn expert_action(&self, state: &WorldState, task: &Task) -> Result<Action> {
        let c = &self.cfg;
        let hold_g = if state.closed { 1.0 } else { -1.0 };
        if self.is_success(state, task) {
            return Ok(Action::new(0.0, 0.0, hold_g));
        }

        let held_target = state.held.and_then(|id| {
            state
                .objects
                .iter()
                .find(|o| o.id == id && o.color == task.target_color)
        });
        if let Some(_) = held_target {
            let d = (
                state.zone_center.0 - state.gripper.0,
                state.zone_center.1 - state.gripper.1,
            );
            if dist(state.gripper, state.zone_center) <= 0.3 {
                return Ok(Action::new(0.0, 0.0, -1.0));
            }
            return Ok(Action::new(
                d.0.clamp(-c.max_step, c.max_step),
                d.1.clamp(-c.max_step, c.max_step),
                1.0,
            ));
        }
        if state.held.is_some() {
            // Holding the wrong thing; drop it.
            return Ok(Action::new(0.0, 0.0, -1.0));
        }

        let target = state
            .objects
            .iter()
            .filter(|o| o.color == task.target_color)
            .min_by(|a, b| {
                dist(a.pos, state.gripper)
                    .partial_cmp(&dist(b.pos, state.gripper))
                    .unwrap()
            })
            .ok_or(Error::NoTargetObject)?;
        let d = dist(target.pos, state.gripper);
        if d <= c.grasp_radius * 0.8 {
            return Ok(Action::new(0.0, 0.0, 1.0));
        }
        let delta = (
            target.pos.0 - state.gripper.0,
            target.pos.1 - state.gripper.1,
        );
        Ok(Action::new(
            delta.0.clamp(-c.max_step, c.max_step),
            delta.1.clamp(-c.max_step, c.max_step),
            -1.0,
        ))
    }

    /// True iff some unheld target-category object lies inside the zone.
    pub fn is_success(&self, state: &WorldState, task: &Task) -> bool {
        state.objects.iter().any(|o| {
            o.color == task.target_color
                && state.held != Some(o.id)
                && dist(o.pos, state.zone_center) <= state.zone_radius
        })
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> Env {
        Env::new(EnvConfig::default())
    }

    #[test]
    fn reset_is_deterministic() {
        let e = env();
        let (s1, t1) = e.reset(0, TaskFamily::SingleTarget).unwrap();
        let (s2, t2) = e.reset(0, TaskFamily::SingleTarget).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        assert_eq!(s1.objects.len(), 1);
    }

    #[test]
    fn families_have_expected_population() {
        let e = env();
        for seed in 0..20 {
            let (s, t) = e.reset(seed, TaskFamily::WithDistractors).unwrap();
            let targets = s.objects.iter().filter(|o| o.color == t.target_color).count();
            let distractors = s.objects.iter().filter(|o| o.color != t.target_color).count();
            assert!(targets >= 1);
            assert!(distractors >= 1);
            let (s, t) = e.reset(seed, TaskFamily::MultiTarget).unwrap();
            assert!(s.objects.iter().filter(|o| o.color == t.target_color).count() >= 2);
        }
    }

    #[test]
    fn zero_action_only_bumps_step_counter() {
        let e = env();
        let (s, _) = e.reset(3, TaskFamily::SingleTarget).unwrap();
        let next = e.step(&s, &Action::new(0.0, 0.0, -1.0));
        assert_eq!(next.gripper, s.gripper);
        assert_eq!(next.objects, s.objects);
        assert_eq!(next.step_count, s.step_count + 1);
    }

    #[test]
    fn bounds_clamp_at_origin() {
        let e = env();
        let (mut s, _) = e.reset(3, TaskFamily::SingleTarget).unwrap();
        s.gripper = (0.0, 0.0);
        let next = e.step(&s, &Action::new(-1.0, -1.0, -1.0));
        assert_eq!(next.gripper, (0.0, 0.0));
    }

    #[test]
    fn grasp_and_carry_by_hand() {
        let e = env();
        let (mut s, _) = e.reset(5, TaskFamily::SingleTarget).unwrap();
        let obj = s.objects[0].pos;
        s.gripper = (obj.0 - 0.4, obj.1);
        s.closed = false;
        // Close within grasp radius: block becomes held.
        let s1 = e.step(&s, &Action::new(0.0, 0.0, 1.0));
        assert_eq!(s1.held, Some(s.objects[0].id));
        // Move while closed: block co-moves.
        let s2 = e.step(&s1, &Action::new(1.0, 0.0, 1.0));
        assert_eq!(s2.objects[0].pos, s2.gripper);
        assert_eq!(s2.held, Some(s.objects[0].id));
    }

    #[test]
    fn render_is_pure_and_marks_gripper() {
        let e = env();
        let (mut s, _) = e.reset(4, TaskFamily::SingleTarget).unwrap();
        s.objects.clear();
        s.zone_center = (-10.0, -10.0); // off-table: zone renders nowhere
        let o1 = e.render(&s);
        let o2 = e.render(&s);
        assert_eq!(o1, o2);
        let non_empty: Vec<u8> = o1.front.cells.iter().copied().filter(|&c| c != cell::EMPTY).collect();
        assert_eq!(non_empty, vec![cell::GRIP_OPEN]);
    }

    #[test]
    fn wrist_window_marks_out_of_bounds_at_corner() {
        let e = env();
        let (mut s, _) = e.reset(4, TaskFamily::SingleTarget).unwrap();
        s.gripper = (0.1, 0.1);
        let obs = e.render(&s);
        // Top row and left column of the 3x3 window fall off the table.
        assert_eq!(obs.wrist.at(0, 0), cell::OOB);
        assert_eq!(obs.wrist.at(0, 1), cell::OOB);
        assert_eq!(obs.wrist.at(1, 0), cell::OOB);
        assert_ne!(obs.wrist.at(1, 1), cell::OOB);
    }

    #[test]
    fn success_requires_release_and_target_category() {
        let e = env();
        let (mut s, t) = e.reset(6, TaskFamily::SingleTarget).unwrap();
        let id = s.objects[0].id;
        s.objects[0].pos = s.zone_center;
        s.held = Some(id);
        s.closed = true;
        assert!(!e.is_success(&s, &t), "held object must not count");
        s.held = None;
        assert!(e.is_success(&s, &t));
        // A non-target object in the zone does not count.
        s.objects[0].color = (t.target_color + 1) % N_COLORS as u8;
        assert!(!e.is_success(&s, &t));
    }

    #[test]
    fn expert_succeeds_on_500_seeds() {
        let e = env();
        for family in [
            TaskFamily::SingleTarget,
            TaskFamily::MultiTarget,
            TaskFamily::WithDistractors,
        ] {
            let seeds = if family == TaskFamily::SingleTarget { 500 } else { 100 };
            for seed in 0..seeds {
                let (mut s, t) = e.reset(seed, family).unwrap();
                let mut ok = false;
                for _ in 0..e.cfg().max_episode_len {
                    if e.is_success(&s, &t) {
                        ok = true;
                        break;
                    }
                    let a = e.expert_action(&s, &t).unwrap();
                    s = e.step(&s, &a);
                }
                ok = ok || e.is_success(&s, &t);
                assert!(ok, "expert failed family {family} seed {seed}");
            }
        }
    }

    #[test]
    fn expert_length_within_bound() {
        let e = env();
        for seed in 0..100 {
            let (s0, t) = e.reset(seed, TaskFamily::SingleTarget).unwrap();
            let obj = s0.objects[0].pos;
            let d1 = ((obj.0 - s0.gripper.0).abs()).max((obj.1 - s0.gripper.1).abs());
            let d2 = ((s0.zone_center.0 - obj.0).abs()).max((s0.zone_center.1 - obj.1).abs());
            let bound = (d1 / e.cfg().max_step).ceil() as usize
                + (d2 / e.cfg().max_step).ceil() as usize
                + 2;
            let mut s = s0;
            let mut steps = 0;
            while !e.is_success(&s, &t) && steps <= bound {
                let a = e.expert_action(&s, &t).unwrap();
                s = e.step(&s, &a);
                steps += 1;
            }
            assert!(
                e.is_success(&s, &t),
                "seed {seed}: episode exceeded bound {bound}"
            );
        }
    }

    #[test]
    fn object_count_is_conserved_and_held_tracks_gripper() {
        let e = env();
        let (mut s, t) = e.reset(11, TaskFamily::WithDistractors).unwrap();
        let n = s.objects.len();
        for _ in 0..e.cfg().max_episode_len {
            let a = e.expert_action(&s, &t).unwrap();
            s = e.step(&s, &a);
            assert_eq!(s.objects.len(), n);
            if let Some(id) = s.held {
                let held = s.objects.iter().find(|o| o.id == id).unwrap();
                assert_eq!(held.pos, s.gripper);
            }
        }
    }

    #[test]
    fn expert_errors_without_target_object() {
        let e = env();
        let (mut s, t) = e.reset(2, TaskFamily::SingleTarget).unwrap();
        s.objects.clear();
        assert!(matches!(
            e.expert_action(&s, &t),
            Err(Error::NoTargetObject)
        ));
    }
}
