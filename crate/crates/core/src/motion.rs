//! Procedural motion clips on the bundled humanoid.
//!
//! Static motions keep both feet planted; locomotion follows analytic
//! footprints along a path that stays inside the sensor's view at 2 to 4 m.
//! Legs are posed by two-bone IK so that planted feet never slide.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::{Euclid, Float};

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ik::solve_leg;
use crate::rotation::{rot_x, rot_y, rot_z};
use crate::seed;
use crate::skeleton::{compose_chain, Joint, JointTransform, MotionClip, MotionFrame, Skeleton, FRAME_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionFamily {
    Static,
    Locomotion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionCategory {
    Idle,
    Squat,
    Wave,
    Walk,
    Run,
    Sidestep,
}

impl MotionCategory {
    pub const ALL: [MotionCategory; 6] = [Self::Idle, Self::Squat, Self::Wave, Self::Walk, Self::Run, Self::Sidestep];

    pub fn name(self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::Squat => "squat",
            Self::Wave => "wave",
            Self::Walk => "walk",
            Self::Run => "run",
            Self::Sidestep => "sidestep",
        }
    }

    pub fn family(self) -> MotionFamily {
        match self {
            Self::Idle | Self::Squat | Self::Wave => MotionFamily::Static,
            Self::Walk | Self::Run | Self::Sidestep => MotionFamily::Locomotion,
        }
    }

    /// Commanded speed along the path, m/s; zero for static motions.
    pub fn default_speed(self) -> f64 {
        match self {
            Self::Walk => 1.0,
            Self::Run => 2.2,
            Self::Sidestep => 0.5,
            _ => 0.0,
        }
    }
}

impl fmt::Display for MotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|c| c.name() == lower).ok_or_else(|| Error::UnknownCategory(s.to_string()))
    }
}

/// What to generate. Unset fields are drawn from the seed.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSpec {
    pub category: MotionCategory,
    pub duration_s: f64,
    pub speed: Option<f64>,
    /// Uniform scale of the skeleton, in `[0.9, 1.1]` when drawn.
    pub body_scale: Option<f64>,
}

impl MotionSpec {
    pub fn new(category: MotionCategory, duration_s: f64) -> Self {
        Self { category, duration_s, speed: None, body_scale: None }
    }

    /// Fills unset fields deterministically from `seed`.
    pub fn resolved(&self, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x5bec]);
        let scale: f64 = rng.random_range(0.9..=1.1);
        let jitter: f64 = rng.random_range(0.85..=1.15);
        Self {
            category: self.category,
            duration_s: self.duration_s,
            speed: Some(self.speed.unwrap_or(self.category.default_speed() * jitter)),
            body_scale: Some(self.body_scale.unwrap_or(scale)),
        }
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * FRAME_RATE).round() as usize
    }
}

pub fn generate_sequence(category: MotionCategory, duration_s: f64, seed: u64) -> Result<MotionClip> {
    generate(&MotionSpec::new(category, duration_s), seed)
}

/// Parses `category` and generates a clip.
pub fn generate_named(category: &str, duration_s: f64, seed: u64) -> Result<MotionClip> {
    generate_sequence(category.parse()?, duration_s, seed)
}

pub fn generate(spec: &MotionSpec, seed: u64) -> Result<MotionClip> {
    if !(spec.duration_s >= 1.0) || !spec.duration_s.is_finite() {
        return Err(Error::InvalidConfig(alloc::format!("duration must be at least 1 s, got {}", spec.duration_s)));
    }
    let spec = spec.resolved(seed);
    let scale = spec.body_scale.unwrap_or(1.0);
    let speed = spec.speed.unwrap_or(0.0);
    if !(0.8..=1.25).contains(&scale) || !(speed >= 0.0) {
        return Err(Error::InvalidConfig("body scale or speed out of range".into()));
    }
    let skeleton = Skeleton::default_humanoid().scaled(scale);
    let rig = Rig::new(&skeleton)?;
    let mut rng = seed::rng(seed, &[0x6e0, spec.category as u64]);
    let plan = Plan::draw(spec.category, speed, scale, &mut rng);
    let frames = (0..spec.frame_count()).map(|i| rig.pose(&plan, i as f64 / FRAME_RATE)).collect::<Result<Vec<_>>>()?;
    MotionClip::new(skeleton, frames)
}

/// Joint indices and offsets the animation drives.
struct Rig<'a> {
    skeleton: &'a Skeleton,
    offsets: Vec<Vector3<f64>>,
    spine: usize,
    chest: usize,
    neck: usize,
    arms: [usize; 2],
    forearms: [usize; 2],
    knees: [usize; 2],
    feet: [usize; 2],
    ankle_height: f64,
    root_height: f64,
}

impl<'a> Rig<'a> {
    fn new(skeleton: &'a Skeleton) -> Result<Self> {
        let idx = |n: &str| skeleton.index_of(n).ok_or_else(|| Error::InvalidSkeleton(alloc::format!("missing joint {n}")));
        let feet = skeleton.feet();
        let rest = skeleton.rest_transforms();
        let root_height = skeleton.rest_root_height();
        Ok(Self {
            skeleton,
            offsets: skeleton.joints().iter().map(Joint::offset).collect(),
            spine: idx("Spine")?,
            chest: idx("Chest")?,
            neck: idx("Neck")?,
            arms: [idx("LeftArm")?, idx("RightArm")?],
            forearms: [idx("LeftForeArm")?, idx("RightForeArm")?],
            knees: [skeleton.leg_chain(feet[0])?.1, skeleton.leg_chain(feet[1])?.1],
            feet,
            ankle_height: rest[feet[0]].position.y + root_height,
            root_height,
        })
    }

    fn pose(&self, plan: &Plan, t: f64) -> Result<MotionFrame> {
        let body = plan.body(t, self.root_height);
        let root = JointTransform { position: body.root, rotation: rot_y(body.yaw) * rot_x(body.pitch) };
        let mut rots = vec![Matrix3::identity(); self.skeleton.len()];
        rots[0] = rot_y(body.pelvis_twist);
        rots[self.spine] = rot_x(body.lean) * rot_y(-0.5 * body.pelvis_twist);
        rots[self.chest] = rot_x(body.breath);
        rots[self.neck] = rot_y(body.head_turn);
        // arms hang from the T-pose rest; swing is about the body's lateral axis
        rots[self.arms[0]] = rot_x(body.arm_swing[0]) * rot_z(-body.arm_drop[0]);
        rots[self.arms[1]] = rot_x(body.arm_swing[1]) * rot_z(body.arm_drop[1]);
        rots[self.forearms[0]] = rot_y(-body.elbow[0]);
        rots[self.forearms[1]] = rot_y(body.elbow[1]);
        for k in self.knees {
            rots[k] = rot_x(0.05);
        }
        for side in 0..2 {
            let step = plan.foot(side, t);
            let target = Vector3::new(step.x, self.ankle_height + step.lift, step.z);
            solve_leg(self.skeleton, &self.offsets, &mut rots, &root, self.feet[side], &target)?;
        }
        let world = compose_chain(self.skeleton, &self.offsets, &rots, &root);
        for side in 0..2 {
            let knee = world[self.knees[side]].rotation;
            rots[self.feet[side]] = knee.transpose() * rot_y(plan.foot(side, t).yaw);
        }
        Ok(MotionFrame { root_position: root.position, root_rotation: root.rotation, joint_rotations: rots })
    }
}

/// Per-frame body parameters.
struct Body {
    root: Vector3<f64>,
    yaw: f64,
    pitch: f64,
    pelvis_twist: f64,
    lean: f64,
    breath: f64,
    head_turn: f64,
    arm_swing: [f64; 2],
    arm_drop: [f64; 2],
    elbow: [f64; 2],
}

/// Horizontal foot placement, lift above the planted ankle height, and yaw.
struct FootState {
    x: f64,
    z: f64,
    lift: f64,
    yaw: f64,
}

enum Path {
    /// Stadium loop through both lanes, facing along the path.
    Loop { start: f64 },
    /// Back and forth along X, facing the sensor.
    Shuttle { start: f64, z: f64 },
}

const LOOP_HALF: f64 = 1.5;
const LOOP_RADIUS: f64 = 0.4;
const LOOP_CENTER_Z: f64 = 2.8;
const SHUTTLE_HALF: f64 = 1.2;

impl Path {
    /// Position on the ground and facing direction at arc length `s`.
    fn at(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            Path::Loop { start } => {
                let straight = 2.0 * LOOP_HALF;
                let arc = PI * LOOP_RADIUS;
                let u = Euclid::rem_euclid(&(start + s), &(2.0 * (straight + arc)));
                let (x, z, hx, hz) = if u < straight {
                    (-LOOP_HALF + u, LOOP_CENTER_Z + LOOP_RADIUS, 1.0, 0.0)
                } else if u < straight + arc {
                    let a = (u - straight) / LOOP_RADIUS;
                    (LOOP_HALF + LOOP_RADIUS * a.sin(), LOOP_CENTER_Z + LOOP_RADIUS * a.cos(), a.cos(), -a.sin())
                } else if u < 2.0 * straight + arc {
                    (LOOP_HALF - (u - straight - arc), LOOP_CENTER_Z - LOOP_RADIUS, -1.0, 0.0)
                } else {
                    let a = (u - 2.0 * straight - arc) / LOOP_RADIUS;
                    (-LOOP_HALF - LOOP_RADIUS * a.sin(), LOOP_CENTER_Z - LOOP_RADIUS * a.cos(), -a.cos(), a.sin())
                };
                (x, z, hx.atan2(hz))
            }
            Path::Shuttle { start, z } => {
                let u = Euclid::rem_euclid(&(start + s), &(4.0 * SHUTTLE_HALF));
                let x = -SHUTTLE_HALF + if u < 2.0 * SHUTTLE_HALF { u } else { 4.0 * SHUTTLE_HALF - u };
                (x, z, PI)
            }
        }
    }
}

struct Gait {
    path: Path,
    speed: f64,
    period: f64,
    duty: f64,
    lift: f64,
    stance_width: f64,
    dip: f64,
    bob: f64,
    lean: f64,
    arm_swing: f64,
}

enum Plan {
    Stand { center: (f64, f64), yaw: f64, width: f64, style: Stand },
    Move(Gait),
}

struct Stand {
    category: MotionCategory,
    sway: f64,
    sway_freq: f64,
    phase: f64,
    squat_depth: f64,
    squat_period: f64,
    wave_freq: f64,
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

fn wrap_angle(a: f64) -> f64 {
    Euclid::rem_euclid(&(a + PI), &TAU) - PI
}

impl Plan {
    fn draw(category: MotionCategory, speed: f64, scale: f64, rng: &mut seed::Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        match category.family() {
            MotionFamily::Static => {
                let center = (u(-0.8, 0.8), u(2.6, 3.4));
                let yaw = PI + u(-0.4, 0.4);
                let style = Stand {
                    category,
                    sway: u(0.01, 0.03),
                    sway_freq: u(0.15, 0.35),
                    phase: u(0.0, TAU),
                    squat_depth: u(0.25, 0.36) * scale,
                    squat_period: u(2.5, 3.5),
                    wave_freq: u(1.2, 2.0),
                };
                let width = if category == MotionCategory::Squat { 0.15 } else { 0.1 } * scale;
                Plan::Stand { center, yaw, width, style }
            }
            MotionFamily::Locomotion => {
                let speed = speed.max(1e-3);
                let (duty, travel, lift, dip, bob, lean, swing, width) = match category {
                    MotionCategory::Run => (0.4, 0.55, 0.15, 0.10, 0.03, 0.15, 0.7, 0.09),
                    MotionCategory::Sidestep => (0.65, 0.36, 0.06, 0.06, 0.01, 0.0, 0.1, 0.18),
                    _ => (0.6, 0.5, 0.08, 0.08, 0.015, 0.04, 0.45, 0.09),
                };
                let path = if category == MotionCategory::Sidestep {
                    Path::Shuttle { start: u(0.0, 4.0 * SHUTTLE_HALF), z: u(2.6, 3.2) }
                } else {
                    Path::Loop { start: u(0.0, 2.0) }
                };
                Plan::Move(Gait {
                    path,
                    speed,
                    period: travel * scale / (duty * speed),
                    duty,
                    lift: lift * scale,
                    stance_width: width * scale,
                    dip: dip * scale,
                    bob: bob * scale,
                    lean,
                    arm_swing: swing,
                })
            }
        }
    }

    fn body(&self, t: f64, root_height: f64) -> Body {
        let hang = 1.3;
        match self {
            Plan::Stand { center, yaw, style, .. } => {
                let w = TAU * style.sway_freq * t + style.phase;
                let fwd = (yaw.sin(), yaw.cos());
                let side = (fwd.1, -fwd.0);
                let (mut dx, mut dz) = (style.sway * w.sin() * side.0, style.sway * w.sin() * side.1);
                let mut height = root_height - 0.02 - 0.005 * (2.0 * w).sin();
                let mut lean = 0.02 * (0.7 * w).sin();
                let mut swing = [0.05 * w.sin(), -0.05 * w.sin()];
                let mut drop = [hang, hang];
                let mut elbow = [0.2, 0.2];
                match style.category {
                    MotionCategory::Squat => {
                        let d = 0.5 * (1.0 - (TAU * t / style.squat_period).cos());
                        height -= style.squat_depth * d;
                        lean += 0.5 * d;
                        // hips travel back as the torso leans
                        dx -= 0.12 * d * fwd.0;
                        dz -= 0.12 * d * fwd.1;
                        swing = [-1.2 * d, -1.2 * d];
                        elbow = [0.2 + 0.3 * d, 0.2 + 0.3 * d];
                    }
                    MotionCategory::Wave => {
                        drop[1] = -1.0;
                        elbow[1] = 0.3;
                        swing[1] = -0.2;
                        let wave = (TAU * style.wave_freq * t).sin();
                        return Body {
                            root: Vector3::new(center.0 + dx, height, center.1 + dz),
                            yaw: *yaw,
                            pitch: 0.0,
                            pelvis_twist: 0.03 * wave,
                            lean,
                            breath: 0.02 * (TAU * 0.25 * t).sin(),
                            head_turn: 0.15 * (0.5 * w).sin(),
                            arm_swing: swing,
                            arm_drop: [drop[0], drop[1] - 0.45 * wave],
                            elbow,
                        };
                    }
                    _ => {}
                }
                Body {
                    root: Vector3::new(center.0 + dx, height, center.1 + dz),
                    yaw: *yaw,
                    pitch: 0.0,
                    pelvis_twist: 0.0,
                    lean,
                    breath: 0.02 * (TAU * 0.25 * t).sin(),
                    head_turn: 0.3 * (0.5 * w).sin(),
                    arm_swing: swing,
                    arm_drop: drop,
                    elbow,
                }
            }
            Plan::Move(g) => {
                let (x, z, yaw) = g.path.at(g.speed * t);
                let cycle = TAU * t / g.period;
                let height = root_height - g.dip - g.bob * (2.0 * cycle).cos();
                let swing = g.arm_swing * cycle.sin();
                Body {
                    root: Vector3::new(x, height, z),
                    yaw,
                    pitch: 0.0,
                    pelvis_twist: 0.1 * g.arm_swing * cycle.sin(),
                    lean: g.lean,
                    breath: 0.0,
                    head_turn: -0.05 * g.arm_swing * cycle.sin(),
                    arm_swing: [-swing, swing],
                    arm_drop: [hang, hang],
                    elbow: [0.3 + 0.3 * g.arm_swing, 0.3 + 0.3 * g.arm_swing],
                }
            }
        }
    }

    /// Foot of `side` (0 left, 1 right) at time `t`.
    fn foot(&self, side: usize, t: f64) -> FootState {
        let lateral = if side == 0 { 1.0 } else { -1.0 };
        match self {
            Plan::Stand { center, yaw, width, .. } => {
                let left = (yaw.cos(), -yaw.sin());
                FootState { x: center.0 + lateral * width * left.0, z: center.1 + lateral * width * left.1, lift: 0.0, yaw: *yaw }
            }
            Plan::Move(g) => {
                let footprint = |k: f64| {
                    let (x, z, yaw) = g.path.at(g.speed * g.period * (k - 0.5 * side as f64 + 0.5 * g.duty));
                    let left = (yaw.cos(), -yaw.sin());
                    (x + lateral * g.stance_width * left.0, z + lateral * g.stance_width * left.1, yaw)
                };
                let tau = t / g.period + 0.5 * side as f64;
                let k = tau.floor();
                let phase = tau - k;
                let (x0, z0, y0) = footprint(k);
                if phase < g.duty {
                    return FootState { x: x0, z: z0, lift: 0.0, yaw: y0 };
                }
                let (x1, z1, y1) = footprint(k + 1.0);
                let u = (phase - g.duty) / (1.0 - g.duty);
                let e = smoothstep(u);
                FootState { x: x0 + (x1 - x0) * e, z: z0 + (z1 - z0) * e, lift: g.lift * (PI * u).sin(), yaw: y0 + wrap_angle(y1 - y0) * e }
            }
        }
    }
}

/// Human-readable list of category names.
pub fn category_names() -> String {
    MotionCategory::ALL.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{derive_features, label_foot_contacts, ContactThresholds};

    #[test]
    fn categories_parse_and_group() {
        assert_eq!("Walk".parse::<MotionCategory>().unwrap(), MotionCategory::Walk);
        assert!(matches!("moonwalk".parse::<MotionCategory>(), Err(Error::UnknownCategory(_))));
        assert_eq!(MotionCategory::Squat.family(), MotionFamily::Static);
        assert_eq!(MotionCategory::Sidestep.family(), MotionFamily::Locomotion);
    }

    #[test]
    fn five_seconds_is_one_hundred_frames() {
        for c in MotionCategory::ALL {
            assert_eq!(generate_sequence(c, 5.0, 3).unwrap().len(), 100);
        }
        assert!(generate_sequence(MotionCategory::Idle, 0.5, 3).is_err());
    }

    #[test]
    fn idle_barely_moves() {
        let clip = generate_sequence(MotionCategory::Idle, 5.0, 11).unwrap();
        let p0 = clip.frames[0].root_position;
        for f in &clip.frames {
            let d = f.root_position - p0;
            assert!((d.x * d.x + d.z * d.z).sqrt() < 0.1);
        }
    }

    #[test]
    fn walk_covers_commanded_distance() {
        let spec = MotionSpec { speed: Some(1.0), ..MotionSpec::new(MotionCategory::Walk, 5.0) };
        let clip = generate(&spec, 5).unwrap();
        let travelled: f64 = clip
            .frames
            .windows(2)
            .map(|w| {
                let d = w[1].root_position - w[0].root_position;
                (d.x * d.x + d.z * d.z).sqrt()
            })
            .sum();
        assert!((travelled - 4.95).abs() < 0.1, "travelled {travelled}");
    }

    #[test]
    fn same_seed_same_clip() {
        for c in MotionCategory::ALL {
            assert_eq!(generate_sequence(c, 2.0, 9).unwrap(), generate_sequence(c, 2.0, 9).unwrap());
        }
        assert_ne!(generate_sequence(MotionCategory::Walk, 2.0, 9).unwrap(), generate_sequence(MotionCategory::Walk, 2.0, 10).unwrap());
    }

    #[test]
    fn roots_stay_in_view() {
        for c in MotionCategory::ALL {
            for seed in 0..3 {
                let clip = generate_sequence(c, 12.0, seed).unwrap();
                for f in &clip.frames {
                    let (x, z) = (f.root_position.x, f.root_position.z);
                    let range = (x * x + z * z).sqrt();
                    assert!((2.0..=4.0).contains(&range), "{c} range {range}");
                    assert!(x.atan2(z).abs().to_degrees() < 45.0, "{c} azimuth");
                }
            }
        }
    }

    #[test]
    fn planted_feet_do_not_slide_and_stand_on_the_ground() {
        for c in MotionCategory::ALL {
            let clip = generate_sequence(c, 6.0, 2).unwrap();
            let feet = clip.skeleton.feet();
            let contacts = label_foot_contacts(&clip, &ContactThresholds::default());
            let on: usize = contacts.iter().map(|c| (c[0] + c[1]) as usize).sum();
            assert!(on > clip.len() / 2, "{c}: only {on} contact labels");
            for t in 0..clip.len() {
                let w = clip.world_transforms(t);
                for k in 0..2 {
                    // toes never sink below the floor
                    let toe = w[feet[k] + 1].position;
                    assert!(toe.y > -0.01, "{c}: toe at {}", toe.y);
                }
            }
            derive_features(&clip, &ContactThresholds::default()).unwrap();
        }
    }

    #[test]
    fn locomotion_alternates_contacts() {
        let clip = generate_sequence(MotionCategory::Walk, 6.0, 4).unwrap();
        let contacts = label_foot_contacts(&clip, &ContactThresholds::default());
        let left: usize = contacts.iter().map(|c| c[0] as usize).sum();
        assert!(left > 20 && left < clip.len() - 20, "left contacts {left}");
    }
}
