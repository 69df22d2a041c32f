//! Deterministic kinematic surrogate for a desk-scale tabletop arm.
//!
//! Three tasks over one movable gripper and one task object:
//! press-button (reach), pick-shed (reach + grasp + lift), open-drawer
//! (reach + grasp + pull). Episodes are exactly 20 steps; reward is the
//! binary per-step success predicate of the task. Dynamics are a pure
//! function of (state, action) — all randomness lives in object placement
//! and the scripted-policy noise.
//!
//! Geometry (cm). Workspace box: x in [-30, 30], y in [0, 50] away from
//! the base, z in [0, 30] up. The object space is a rectangle of the
//! configured area with width:depth = 2.5:1, centered on x = 0, starting
//! at y = 25. One action unit moves the gripper 2.5 cm per axis.

use crate::error::{CsrlError, Result};
use crate::nets::ObsMode;
use crate::rng::{derive, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const EPISODE_LEN: u32 = 20;
pub const STEP_SCALE_CM: f32 = 2.5;
pub const WORKSPACE_X: (f32, f32) = (-30.0, 30.0);
pub const WORKSPACE_Y: (f32, f32) = (0.0, 50.0);
pub const WORKSPACE_Z: (f32, f32) = (0.0, 30.0);
pub const GRIPPER_HOME: [f32; 3] = [0.0, 20.0, 15.0];
pub const PRESS_RADIUS_CM: f32 = 1.5;
pub const GRASP_RADIUS_CM: f32 = 2.0;
pub const LIFT_SUCCESS_CM: f32 = 5.0;
pub const DRAWER_SUCCESS_CM: f32 = 6.0;
pub const DRAWER_RANGE_CM: f32 = 10.0;
pub const OBJECT_SPACE_NEAR_Y: f32 = 25.0;
pub const OBJECT_SPACE_ASPECT: f32 = 2.5;

pub const IMG_H: usize = 48;
pub const IMG_W: usize = 48;
/// Rows at the bottom of the rendered frame occupied by the table band.
const TABLE_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PressButton,
    PickShed,
    OpenDrawer,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::PressButton, TaskKind::PickShed, TaskKind::OpenDrawer];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::PressButton => "press_button",
            TaskKind::PickShed => "pick_shed",
            TaskKind::OpenDrawer => "open_drawer",
        }
    }

    fn id(self) -> u64 {
        match self {
            TaskKind::PressButton => 0,
            TaskKind::PickShed => 1,
            TaskKind::OpenDrawer => 2,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = CsrlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "press_button" => Ok(TaskKind::PressButton),
            "pick_shed" => Ok(TaskKind::PickShed),
            "open_drawer" => Ok(TaskKind::OpenDrawer),
            other => Err(CsrlError::InvalidSpec(format!(
                "unknown task `{other}` (expected press_button | pick_shed | open_drawer)"
            ))),
        }
    }
}

/// Task identity plus its object-space parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    /// Object-space area in cm^2 (the standard grid uses 40 / 360 / 1000).
    pub area: f32,
    /// Object configurations per cm^2 (10 or 20 in the standard grid).
    pub density: f32,
    #[serde(default = "default_obs_mode")]
    pub obs_mode: ObsMode,
}

fn default_obs_mode() -> ObsMode {
    ObsMode::Vector
}

impl TaskSpec {
    pub fn new(task: TaskKind, area: f32, density: f32, obs_mode: ObsMode) -> Self {
        TaskSpec { task, area, density, obs_mode }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area > 0.0) || !(self.density > 0.0) {
            return Err(CsrlError::InvalidSpec(format!(
                "area and density must be positive (got {} / {})",
                self.area, self.density
            )));
        }
        Ok(())
    }

    /// Object-space rectangle: (x_min, x_max, y_min, y_max).
    pub fn object_space_rect(&self) -> (f32, f32, f32, f32) {
        let width = (self.area * OBJECT_SPACE_ASPECT).sqrt();
        let depth = (self.area / OBJECT_SPACE_ASPECT).sqrt();
        (
            -width / 2.0,
            width / 2.0,
            OBJECT_SPACE_NEAR_Y,
            OBJECT_SPACE_NEAR_Y + depth,
        )
    }

    /// Number of object configurations this spec generates.
    pub fn config_count(&self) -> usize {
        (self.area as f64 * self.density as f64).round() as usize
    }
}

/// One object placement on the table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectConfig {
    pub x: f32,
    pub y: f32,
}

/// Uniformly sampled placements, `round(area * density)` of them,
/// deterministic in (spec.task, seed).
pub fn sample_object_space(spec: &TaskSpec, seed: u64) -> Result<Vec<ObjectConfig>> {
    spec.validate()?;
    let (x0, x1, y0, y1) = spec.object_space_rect();
    let mut rng = derive(seed, Stream::ObjectSpace, spec.task.id());
    Ok((0..spec.config_count())
        .map(|_| ObjectConfig {
            x: rng.gen_range(x0..x1),
            y: rng.gen_range(y0..y1),
        })
        .collect())
}

/// Seven-dimensional action: position delta, orientation delta (accepted
/// but inert in this surrogate), and the gripper channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action7 {
    pub delta_pos: [f32; 3],
    pub delta_orient: [f32; 3],
    pub grip: f32,
}

impl Action7 {
    pub fn from_array(a: &[f32; 7]) -> Self {
        Action7 {
            delta_pos: [a[0], a[1], a[2]],
            delta_orient: [a[3], a[4], a[5]],
            grip: a[6],
        }
    }

    pub fn to_array(self) -> [f32; 7] {
        [
            self.delta_pos[0],
            self.delta_pos[1],
            self.delta_pos[2],
            self.delta_orient[0],
            self.delta_orient[1],
            self.delta_orient[2],
            self.grip,
        ]
    }

    fn clamped(self) -> Self {
        let c = |v: f32| v.clamp(-1.0, 1.0);
        Action7 {
            delta_pos: self.delta_pos.map(c),
            delta_orient: self.delta_orient.map(c),
            grip: c(self.grip),
        }
    }
}

/// Full simulator state. Aperture is binary in practice: 1.0 open, 0.0
/// closed. `object` is the live position (the drawer handle for
/// open-drawer).
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub gripper: [f32; 3],
    pub aperture: f32,
    pub object: [f32; 3],
    pub grasped: bool,
    pub drawer_ext: f32,
    pub button_latched: bool,
    pub step: u32,
}

fn dist3(a: &[f32; 3], b: &[f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

fn clip_workspace(p: [f32; 3]) -> [f32; 3] {
    [
        p[0].clamp(WORKSPACE_X.0, WORKSPACE_X.1),
        p[1].clamp(WORKSPACE_Y.0, WORKSPACE_Y.1),
        p[2].clamp(WORKSPACE_Z.0, WORKSPACE_Z.1),
    ]
}

/// Initial state for one placement: gripper at home, aperture open,
/// object at the config, counters zeroed.
pub fn reset(spec: &TaskSpec, config: ObjectConfig) -> Result<(WorldState, Vec<f32>)> {
    let (x0, x1, y0, y1) = (WORKSPACE_X.0, WORKSPACE_X.1, WORKSPACE_Y.0, WORKSPACE_Y.1);
    if !(x0..=x1).contains(&config.x) || !(y0..=y1).contains(&config.y) {
        return Err(CsrlError::InvalidSpec(format!(
            "object config ({}, {}) outside workspace",
            config.x, config.y
        )));
    }
    let state = WorldState {
        gripper: GRIPPER_HOME,
        aperture: 1.0,
        object: [config.x, config.y, 0.0],
        grasped: false,
        drawer_ext: 0.0,
        button_latched: false,
        step: 0,
    };
    let obs = observe(spec, &state);
    Ok((state, obs))
}

/// Success predicate of the task in the given state.
pub fn success(task: TaskKind, state: &WorldState) -> bool {
    match task {
        TaskKind::PressButton => state.button_latched,
        TaskKind::PickShed => state.grasped && state.object[2] >= LIFT_SUCCESS_CM,
        TaskKind::OpenDrawer => state.drawer_ext >= DRAWER_SUCCESS_CM,
    }
}

/// Advances the world by one action. Pure in (state, action).
pub fn step(
    spec: &TaskSpec,
    state: &WorldState,
    action: &Action7,
) -> Result<(WorldState, Vec<f32>, f32, bool)> {
    if state.step >= EPISODE_LEN {
        return Err(CsrlError::EpisodeDone { step: state.step });
    }
    let act = action.clamped();
    let mut next = state.clone();

    // drawer hold is judged before the move: gripper already closed on the
    // handle, and the command keeps it closed
    let holding_handle = spec.task == TaskKind::OpenDrawer
        && state.aperture == 0.0
        && act.grip > 0.0
        && dist3(&state.gripper, &state.object) < GRASP_RADIUS_CM;

    let before_y = next.gripper[1];
    next.gripper = clip_workspace([
        next.gripper[0] + STEP_SCALE_CM * act.delta_pos[0],
        next.gripper[1] + STEP_SCALE_CM * act.delta_pos[1],
        next.gripper[2] + STEP_SCALE_CM * act.delta_pos[2],
    ]);
    next.aperture = if act.grip > 0.0 { 0.0 } else { 1.0 };

    match spec.task {
        TaskKind::PressButton => {
            if dist3(&next.gripper, &next.object) < PRESS_RADIUS_CM && act.delta_pos[2] < 0.0 {
                next.button_latched = true;
            }
        }
        TaskKind::PickShed => {
            if next.aperture == 0.0 {
                if !next.grasped && dist3(&next.gripper, &next.object) < GRASP_RADIUS_CM {
                    next.grasped = true;
                }
                if next.grasped {
                    next.object = next.gripper;
                }
            } else if next.grasped {
                // released: the object drops straight down to the table
                next.grasped = false;
                next.object[2] = 0.0;
            }
        }
        TaskKind::OpenDrawer => {
            if holding_handle {
                let pulled = (before_y - next.gripper[1]).max(0.0);
                next.drawer_ext = (next.drawer_ext + pulled).min(DRAWER_RANGE_CM);
                // handle tracks the drawer face
                next.object[1] = state.object[1] + state.drawer_ext - next.drawer_ext;
            }
        }
    }

    let reward = if success(spec.task, &next) { 1.0 } else { 0.0 };
    next.step += 1;
    let done = next.step == EPISODE_LEN;
    let obs = observe(spec, &next);
    Ok((next, obs, reward, done))
}

/// Observation for the configured mode. Vector layout (length 10):
/// [gripper xyz, aperture, object xyz, drawer extension, object height,
/// grasped]. Image mode returns the rendered 48x48x3 frame.
pub fn observe(spec: &TaskSpec, state: &WorldState) -> Vec<f32> {
    match spec.obs_mode {
        ObsMode::Vector => vec![
            state.gripper[0],
            state.gripper[1],
            state.gripper[2],
            state.aperture,
            state.object[0],
            state.object[1],
            state.object[2],
            state.drawer_ext,
            state.object[2],
            if state.grasped { 1.0 } else { 0.0 },
        ],
        ObsMode::Image => render(spec.task, state),
    }
}

// ── rendering ───────────────────────────────────────────────────────

fn col_of_x(x: f32) -> i32 {
    (((x - WORKSPACE_X.0) / (WORKSPACE_X.1 - WORKSPACE_X.0)) * (IMG_W - 1) as f32).round() as i32
}

fn row_of_z(z: f32) -> i32 {
    let usable = (IMG_H - TABLE_ROWS - 1) as f32;
    ((1.0 - z / WORKSPACE_Z.1) * usable).round() as i32
}

fn put(img: &mut [f32], row: i32, col: i32, rgb: [f32; 3]) {
    if row < 0 || col < 0 || row >= IMG_H as i32 || col >= IMG_W as i32 {
        return;
    }
    let base = (row as usize * IMG_W + col as usize) * 3;
    img[base..base + 3].copy_from_slice(&rgb);
}

/// Orthographic front view (columns track x, rows track height z),
/// HWC layout, values in [0, 1]. Fixed background and table band, task
/// object as a colored primitive, gripper as two vertical bars whose
/// separation tracks the aperture.
pub fn render(task: TaskKind, state: &WorldState) -> Vec<f32> {
    const BG: [f32; 3] = [0.35, 0.38, 0.42];
    const TABLE: [f32; 3] = [0.55, 0.42, 0.25];
    const BUTTON: [f32; 3] = [0.90, 0.10, 0.10];
    const SHED: [f32; 3] = [0.10, 0.80, 0.15];
    const DRAWER: [f32; 3] = [0.15, 0.25, 0.90];
    const GRIPPER: [f32; 3] = [0.92, 0.92, 0.95];

    let mut img = vec![0.0f32; IMG_H * IMG_W * 3];
    for r in 0..IMG_H {
        let color = if r >= IMG_H - TABLE_ROWS { TABLE } else { BG };
        for c in 0..IMG_W {
            put(&mut img, r as i32, c as i32, color);
        }
    }

    let oc = col_of_x(state.object[0]);
    let or = row_of_z(state.object[2]);
    match task {
        TaskKind::PressButton => {
            for dr in -3i32..=3 {
                for dc in -3i32..=3 {
                    if dr * dr + dc * dc <= 9 {
                        put(&mut img, or + dr, oc + dc, BUTTON);
                    }
                }
            }
        }
        TaskKind::PickShed => {
            for dr in -2i32..=2 {
                for dc in -2i32..=2 {
                    put(&mut img, or + dr, oc + dc, SHED);
                }
            }
        }
        TaskKind::OpenDrawer => {
            let half_w = 2 + (state.drawer_ext * 0.6).round() as i32;
            for dr in -2i32..=2 {
                for dc in -half_w..=half_w {
                    put(&mut img, or + dr, oc + dc, DRAWER);
                }
            }
        }
    }

    let gc = col_of_x(state.gripper[0]);
    let gr = row_of_z(state.gripper[2]);
    let gap = 1 + (state.aperture * 3.0).round() as i32;
    for dr in -4i32..=4 {
        for bar in [-1i32, 1] {
            let c0 = gc + bar * gap;
            put(&mut img, gr + dr, c0, GRIPPER);
            put(&mut img, gr + dr, c0 + bar, GRIPPER);
        }
    }
    img
}

// ── scripted collection policies ────────────────────────────────────

/// Proportional controller toward the task's phase target with additive
/// Gaussian noise on every action dimension, clipped to [-1, 1].
pub fn scripted_policy(
    spec: &TaskSpec,
    state: &WorldState,
    rng: &mut ChaCha8Rng,
    sigma: f32,
) -> Action7 {
    let (target, grip): ([f32; 3], f32) = match spec.task {
        TaskKind::PressButton => {
            // aim below the button surface so the approach keeps a
            // strictly downward z command
            ([state.object[0], state.object[1], -4.0], -1.0)
        }
        TaskKind::PickShed => {
            if state.grasped {
                ([state.object[0], state.object[1], 12.0], 1.0)
            } else if dist3(&state.gripper, &state.object) < 1.2 {
                (state.object, 1.0)
            } else {
                (state.object, -1.0)
            }
        }
        TaskKind::OpenDrawer => {
            let handle = state.object;
            if state.aperture == 0.0 && dist3(&state.gripper, &handle) < GRASP_RADIUS_CM {
                ([handle[0], handle[1] - 6.0, handle[2]], 1.0)
            } else if dist3(&state.gripper, &handle) < 1.2 {
                (handle, 1.0)
            } else {
                (handle, -1.0)
            }
        }
    };

    let noise = |rng: &mut ChaCha8Rng| -> f32 {
        sigma * rng.sample::<f32, _>(rand_distr::StandardNormal)
    };
    // the proportional term is capped inside the open interval so recorded
    // actions rarely sit exactly on the tanh boundary (their inverse-tanh
    // stays in a range a cloning learner can actually regress onto)
    let prop = |t: f32, p: f32, n: f32| {
        (((t - p) / STEP_SCALE_CM).clamp(-0.9, 0.9) + n).clamp(-1.0, 1.0)
    };
    Action7 {
        delta_pos: [
            prop(target[0], state.gripper[0], noise(rng)),
            prop(target[1], state.gripper[1], noise(rng)),
            prop(target[2], state.gripper[2], noise(rng)),
        ],
        delta_orient: [
            noise(rng).clamp(-1.0, 1.0),
            noise(rng).clamp(-1.0, 1.0),
            noise(rng).clamp(-1.0, 1.0),
        ],
        grip: (grip + noise(rng)).clamp(-1.0, 1.0),
    }
}

/// One recorded step of a scripted episode. The executed action is stored
/// with the gripper channel thresholded to the binary {0, 1} command the
/// simulator applied.
pub struct ScriptedTransition {
    pub obs: Vec<f32>,
    pub action: [f32; 7],
    pub reward: f32,
    pub next_obs: Vec<f32>,
    pub done: bool,
}

pub fn run_scripted_episode(
    spec: &TaskSpec,
    config: ObjectConfig,
    rng: &mut ChaCha8Rng,
    sigma: f32,
) -> Result<(Vec<ScriptedTransition>, f32)> {
    let (mut state, mut obs) = reset(spec, config)?;
    let mut transitions = Vec::with_capacity(EPISODE_LEN as usize);
    let mut ret = 0.0f32;
    loop {
        let action = scripted_policy(spec, &state, rng, sigma);
        let (next_state, next_obs, reward, done) = step(spec, &state, &action)?;
        let mut recorded = action.clamped().to_array();
        recorded[6] = if action.grip > 0.0 { 1.0 } else { 0.0 };
        transitions.push(ScriptedTransition {
            obs,
            action: recorded,
            reward,
            next_obs: next_obs.clone(),
            done,
        });
        ret += reward;
        state = next_state;
        obs = next_obs;
        if done {
            break;
        }
    }
    Ok((transitions, ret))
}
