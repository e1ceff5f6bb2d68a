//! Gravity deposition of rigid grains into a cylindrical container.
//!
//! Grains are convex proxies (spheres or convex hulls of their point
//! clouds). Dynamics are deliberately simple — the goal is a static
//! equilibrium packing with sound contact statistics, not high-fidelity
//! grain mechanics: semi-implicit integration, support-function contact
//! detection, iterative position projection with Coulomb friction and zero
//! restitution, and per-grain sleeping.
//!
//! Units: millimeters, seconds, grams (mass = hull volume at unit density).

pub mod gjk;
pub mod hull;

pub use hull::{convex_hull, ConvexHull};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{vec3, Quat, Vec3};
use crate::rng::{self, RunRng};

use gjk::{closest_points, SupportMap};

/// Cylindrical container: floor at `z = 0`, wall at the given radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Container {
    pub radius: f64,
    pub wall_height: f64,
    pub fill_mark: f64,
}

impl Default for Container {
    fn default() -> Self {
        Container { radius: 0.7, wall_height: 20.0, fill_mark: 2.5 }
    }
}

impl Container {
    pub fn validate(&self) -> Result<()> {
        if self.radius <= 0.0 || self.wall_height <= 0.0 || self.fill_mark < 0.0 {
            return Err(Error::Config("container dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Convex collision proxy of a grain.
#[derive(Debug, Clone)]
pub enum GrainShape {
    Sphere { radius: f64 },
    /// Hull vertices in the body frame (centroid at the origin) plus a thin
    /// contact skin.
    Hull { hull: ConvexHull, margin: f64 },
}

impl GrainShape {
    /// Hull proxy of a point cloud, recentered on its hull centroid.
    /// The contact skin is 1% of the bounding radius.
    pub fn hull_of_points(points: &[Vec3]) -> Result<(GrainShape, Vec3)> {
        let hull = convex_hull(points)?;
        let centroid = hull.centroid();
        let recentered = ConvexHull {
            vertices: hull.vertices.iter().map(|&v| v - centroid).collect(),
            faces: hull.faces.clone(),
            planes: hull.planes.iter().map(|&(n, d)| (n, d - n.dot(centroid))).collect(),
        };
        let bound = recentered.bounding_radius_about(Vec3::ZERO);
        Ok((GrainShape::Hull { hull: recentered, margin: 0.01 * bound }, centroid))
    }

    /// Contact skin: the effective surface is the core support plus this.
    pub fn margin(&self) -> f64 {
        match self {
            GrainShape::Sphere { radius } => *radius,
            GrainShape::Hull { margin, .. } => *margin,
        }
    }

    /// Core support in the body frame (a sphere's core is its center).
    fn core_support_body(&self, dir: Vec3) -> Vec3 {
        match self {
            GrainShape::Sphere { .. } => Vec3::ZERO,
            GrainShape::Hull { hull, .. } => hull.support(dir),
        }
    }

    /// Radius of the effective shape about the body origin.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            GrainShape::Sphere { radius } => *radius,
            GrainShape::Hull { hull, margin } => hull.bounding_radius_about(Vec3::ZERO) + margin,
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            GrainShape::Sphere { radius } => 4.0 / 3.0 * std::f64::consts::PI * radius.powi(3),
            GrainShape::Hull { hull, .. } => hull.volume(),
        }
    }

    /// Effective-shape membership of a world point for a given pose.
    pub fn contains_world(&self, position: Vec3, orientation: Quat, p: Vec3) -> bool {
        match self {
            GrainShape::Sphere { radius } => (p - position).norm_sq() <= radius * radius,
            GrainShape::Hull { hull, margin } => {
                let inv = Quat {
                    w: orientation.w,
                    x: -orientation.x,
                    y: -orientation.y,
                    z: -orientation.z,
                };
                let body = inv.rotate(p - position);
                hull.contains(body, *margin)
            }
        }
    }
}

/// A grain in the simulation.
#[derive(Debug, Clone)]
pub struct RigidGrain {
    pub id: String,
    pub shape: GrainShape,
    pub mass: f64,
    pub position: Vec3,
    pub orientation: Quat,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
    inv_mass: f64,
    inv_inertia: f64,
    asleep: bool,
    quiet_steps: u32,
}

impl RigidGrain {
    pub fn new(id: impl Into<String>, shape: GrainShape) -> Self {
        let mass = shape.volume().max(1e-12);
        // Solid-sphere moment of inertia at the bounding radius.
        let r = shape.bounding_radius().max(1e-9);
        let inertia = 0.4 * mass * r * r;
        RigidGrain {
            id: id.into(),
            shape,
            mass,
            position: Vec3::ZERO,
            orientation: Quat::IDENTITY,
            velocity: Vec3::ZERO,
            angular_velocity: Vec3::ZERO,
            inv_mass: 1.0 / mass,
            inv_inertia: 1.0 / inertia,
            asleep: false,
            quiet_steps: 0,
        }
    }

    pub fn is_asleep(&self) -> bool {
        self.asleep
    }

    fn wake(&mut self) {
        self.asleep = false;
        self.quiet_steps = 0;
    }

    /// World support point of the core.
    fn support_world(&self, dir: Vec3) -> Vec3 {
        let inv = Quat {
            w: self.orientation.w,
            x: -self.orientation.x,
            y: -self.orientation.y,
            z: -self.orientation.z,
        };
        let body_dir = inv.rotate(dir);
        self.position + self.orientation.rotate(self.shape.core_support_body(body_dir))
    }

    /// Top of the effective shape.
    pub fn top_height(&self) -> f64 {
        self.support_world(vec3(0.0, 0.0, 1.0)).z + self.shape.margin()
    }

    pub fn bottom_height(&self) -> f64 {
        self.support_world(vec3(0.0, 0.0, -1.0)).z - self.shape.margin()
    }
}

struct Posed<'a>(&'a RigidGrain);

impl SupportMap for Posed<'_> {
    fn support(&self, dir: Vec3) -> Vec3 {
        self.0.support_world(dir)
    }
}

/// Effective-surface separation between two grains (negative when the
/// margins overlap).
pub fn pair_separation(a: &RigidGrain, b: &RigidGrain) -> f64 {
    let r = closest_points(&Posed(a), &Posed(b));
    if r.intersecting {
        -(a.shape.margin() + b.shape.margin())
    } else {
        r.distance - a.shape.margin() - b.shape.margin()
    }
}

/// Integration and contact-resolution parameters.
#[derive(Debug, Clone)]
pub struct SettleConfig {
    pub dt: f64,
    /// Gravity magnitude in mm/s^2.
    pub gravity: f64,
    pub friction: f64,
    /// Friction against the container wall; the bore is smooth, so arching
    /// against the wall is weaker than grain-on-grain friction.
    pub wall_friction: f64,
    /// Rolling-resistance coefficient: normal impulses bleed angular
    /// momentum so round proxies stop rolling.
    pub rolling_resistance: f64,
    /// Rolling resistance applies only below this surface speed (mm/s):
    /// settling cascades roll freely, near-rest rocking is damped out.
    pub slow_roll_speed: f64,
    /// Per-step velocity retention factors.
    pub linear_damping: f64,
    pub angular_damping: f64,
    pub solver_iterations: usize,
    /// Fraction of the remaining penetration corrected per iteration.
    pub position_correction: f64,
    /// Penetration below this depth is tolerated (mm).
    pub slop: f64,
    /// Sleep when kinetic energy per unit mass stays below this ((mm/s)^2).
    pub sleep_energy: f64,
    pub sleep_steps: u32,
    /// Contacting grains below this energy per unit mass are strongly
    /// damped: quenches rocking limit cycles near rest without touching
    /// falling or impacting grains.
    pub quasi_static_energy: f64,
    pub max_steps: u64,
}

impl Default for SettleConfig {
    fn default() -> Self {
        SettleConfig {
            dt: 1e-4,
            gravity: 9810.0,
            friction: 0.5,
            wall_friction: 0.15,
            rolling_resistance: 0.02,
            slow_roll_speed: f64::INFINITY,
            linear_damping: 0.999,
            angular_damping: 0.995,
            solver_iterations: 8,
            position_correction: 0.5,
            slop: 1e-4,
            sleep_energy: 1e-6,
            sleep_steps: 100,
            quasi_static_energy: 1e-1,
            max_steps: 2_000_000,
        }
    }
}

/// A settled (or partially settled) assembly.
#[derive(Debug, Clone)]
pub struct AssemblyScene {
    pub container: Container,
    pub grains: Vec<RigidGrain>,
    /// Heap top at the end of the run (mm).
    pub fill_height: f64,
    pub steps: u64,
    pub seed: u64,
    pub converged: bool,
}

impl AssemblyScene {
    pub fn new(container: Container, seed: u64) -> Self {
        AssemblyScene { container, grains: Vec::new(), fill_height: 0.0, steps: 0, seed, converged: true }
    }

    pub fn heap_top(&self) -> f64 {
        self.grains.iter().map(RigidGrain::top_height).fold(0.0, f64::max)
    }

    pub fn mean_bounding_diameter(&self) -> f64 {
        if self.grains.is_empty() {
            return 0.0;
        }
        2.0 * self.grains.iter().map(|g| g.shape.bounding_radius()).sum::<f64>()
            / self.grains.len() as f64
    }

    /// Largest effective-surface interpenetration over all grain pairs (mm).
    pub fn max_interpenetration(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.grains.len() {
            for j in (i + 1)..self.grains.len() {
                let (a, b) = (&self.grains[i], &self.grains[j]);
                let reach = a.shape.bounding_radius() + b.shape.bounding_radius();
                if (a.position - b.position).norm_sq() > reach * reach {
                    continue;
                }
                let sep = pair_separation(a, b);
                if sep < 0.0 {
                    worst = worst.max(-sep);
                }
            }
        }
        worst
    }
}

/// Uniform random orientation.
fn random_orientation(rng: &mut RunRng) -> Quat {
    use rand::Rng;
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    Quat {
        w: (1.0 - u1).sqrt() * (tau * u2).sin(),
        x: (1.0 - u1).sqrt() * (tau * u2).cos(),
        y: u1.sqrt() * (tau * u3).sin(),
        z: u1.sqrt() * (tau * u3).cos(),
    }
    .normalized()
}

/// Spawn heights used for every batch (mm).
pub const SPAWN_HEIGHT_RANGE: (f64, f64) = (7.0, 14.0);

/// Place a batch above the container: uniform heights in 7-14 mm, uniform
/// positions over the bore cross-section (kept inside by the grain's
/// bounding radius), uniform random orientations. Redraws on overlap with
/// an already-placed grain of the same batch.
pub fn spawn_batch(
    grains: &mut [RigidGrain],
    container: &Container,
    rng: &mut RunRng,
) -> Result<()> {
    container.validate()?;
    let mut placed: Vec<(Vec3, f64)> = Vec::with_capacity(grains.len());
    for grain in grains.iter_mut() {
        let bound = grain.shape.bounding_radius();
        if 2.0 * bound > 2.0 * container.radius {
            return Err(Error::Simulation(format!(
                "grain {} (bounding diameter {:.4} mm) does not fit the {:.4} mm bore",
                grain.id,
                2.0 * bound,
                2.0 * container.radius
            )));
        }
        let radial_max = (container.radius - bound).max(0.0);
        let mut accepted = false;
        for attempt in 0..2000 {
            use rand::Rng;
            let z = rng::uniform(rng, SPAWN_HEIGHT_RANGE.0, SPAWN_HEIGHT_RANGE.1)
                + (attempt / 500) as f64 * 2.0;
            let r = radial_max * rng.gen::<f64>().sqrt();
            let theta = rng::uniform(rng, 0.0, std::f64::consts::TAU);
            let pos = vec3(r * theta.cos(), r * theta.sin(), z);
            if placed.iter().all(|&(p, rb)| (p - pos).norm() > rb + bound) {
                grain.position = pos;
                grain.orientation = random_orientation(rng);
                grain.velocity = Vec3::ZERO;
                grain.angular_velocity = Vec3::ZERO;
                grain.wake();
                placed.push((pos, bound));
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Simulation(format!(
                "could not place grain {} without overlap after 2000 attempts",
                grain.id
            )));
        }
    }
    Ok(())
}

/// Encoded partner index of a floor contact.
const BODY_FLOOR: usize = usize::MAX;
/// Encoded partner index of a wall contact.
const BODY_WALL: usize = usize::MAX - 1;

struct Contact {
    /// Grain indices; `b >= BODY_WALL` marks a static boundary contact.
    a: usize,
    b: usize,
    /// Distinguishes multiple contact points of the same pair (hull floor
    /// vertices); part of the warm-start identity.
    ordinal: u32,
    /// Unit normal pointing from grain `a` toward `b` (or toward the
    /// static boundary).
    normal: Vec3,
    point: Vec3,
    depth: f64,
    /// Positions at detection time; iterative corrections measure their
    /// progress against these.
    pos_a0: Vec3,
    pos_b0: Vec3,
    /// Accumulated impulses: normal plus two fixed tangents.
    acc_n: f64,
    acc_t1: f64,
    acc_t2: f64,
    /// Per-step rolling-resistance budgets already spent (not warm-started).
    acc_roll_a: f64,
    acc_roll_b: f64,
}

impl Contact {
    fn key(&self) -> (usize, usize, u32) {
        (self.a, self.b, self.ordinal)
    }

    fn static_b(&self) -> bool {
        self.b >= BODY_WALL
    }
}

fn grain_pair_contact(ga: &RigidGrain, gb: &RigidGrain) -> Option<(Vec3, Vec3, f64)> {
    let r = closest_points(&Posed(ga), &Posed(gb));
    let margins = ga.shape.margin() + gb.shape.margin();
    if r.intersecting {
        // Cores overlap: push apart along the center line.
        let dir = (gb.position - ga.position).normalized();
        let normal = if dir.norm_sq() > 0.0 { dir } else { vec3(0.0, 0.0, 1.0) };
        let point = (ga.position + gb.position) * 0.5;
        return Some((normal, point, margins));
    }
    let depth = margins - r.distance;
    if depth <= 0.0 {
        return None;
    }
    let normal = if r.distance > 1e-12 {
        (r.point_b - r.point_a) * (1.0 / r.distance)
    } else {
        (gb.position - ga.position).normalized()
    };
    let point = (r.point_a + normal * ga.shape.margin() + r.point_b - normal * gb.shape.margin()) * 0.5;
    Some((normal, point, depth))
}

fn boundary_contacts(g: &RigidGrain, idx: usize, container: &Container, out: &mut Vec<Contact>) {
    // Floor: the boundary lies below, so the a-to-b normal points down.
    // Hulls contact through every vertex near the lowest one; a face-down
    // rest pose then has a stable multi-point base instead of a single
    // torque-pumping vertex.
    let margin = g.shape.margin();
    let low = g.support_world(vec3(0.0, 0.0, -1.0));
    let floor_depth = -(low.z - margin);
    if floor_depth > 0.0 {
        match &g.shape {
            GrainShape::Sphere { .. } => out.push(Contact {
                a: idx,
                b: BODY_FLOOR,
                ordinal: 0,
                normal: vec3(0.0, 0.0, -1.0),
                point: vec3(low.x, low.y, 0.0),
                depth: floor_depth,
                pos_a0: g.position,
                pos_b0: Vec3::ZERO,
                acc_n: 0.0,
                acc_t1: 0.0,
                acc_t2: 0.0,
                acc_roll_a: 0.0,
                acc_roll_b: 0.0,
            }),
            GrainShape::Hull { hull, .. } => {
                let band = 2.5e-4;
                for (vi, v) in hull.vertices.iter().enumerate() {
                    let world = g.position + g.orientation.rotate(*v);
                    let depth = -(world.z - margin);
                    if depth > 0.0 && world.z <= low.z + band {
                        out.push(Contact {
                            a: idx,
                            b: BODY_FLOOR,
                            ordinal: vi as u32,
                            normal: vec3(0.0, 0.0, -1.0),
                            point: vec3(world.x, world.y, 0.0),
                            depth,
                            pos_a0: g.position,
                            pos_b0: Vec3::ZERO,
                            acc_n: 0.0,
                            acc_t1: 0.0,
                            acc_t2: 0.0,
                            acc_roll_a: 0.0,
                            acc_roll_b: 0.0,
                        });
                    }
                }
            }
        }
    }
    // Cylinder wall (only meaningful off the axis).
    let radial = vec3(g.position.x, g.position.y, 0.0);
    if radial.norm_sq() > 1e-16 {
        let rdir = radial.normalized();
        let far = g.support_world(rdir);
        let reach = (far.x * far.x + far.y * far.y).sqrt() + g.shape.margin();
        let wall_depth = reach - container.radius;
        if wall_depth > 0.0 {
            out.push(Contact {
                a: idx,
                b: BODY_WALL,
                ordinal: 0,
                normal: rdir,
                point: far + rdir * g.shape.margin(),
                depth: wall_depth,
                pos_a0: g.position,
                pos_b0: Vec3::ZERO,
                acc_n: 0.0,
                acc_t1: 0.0,
                acc_t2: 0.0,
                acc_roll_a: 0.0,
                acc_roll_b: 0.0,
            });
        }
    }
}

/// Step counts and convergence of one settle run.
#[derive(Debug, Clone, Copy)]
pub struct SettleReport {
    pub steps: u64,
    pub converged: bool,
}

/// Integrate until every grain sleeps (or the step budget runs out, in
/// which case the partial scene is kept and `converged` is false).
pub fn settle(scene: &mut AssemblyScene, config: &SettleConfig) -> SettleReport {
    let n = scene.grains.len();
    let mut steps = 0u64;
    let cell = scene
        .grains
        .iter()
        .map(|g| 2.0 * g.shape.bounding_radius())
        .fold(0.1f64, f64::max);
    let mut warm: BTreeMap<(usize, usize, u32), (f64, f64, f64)> = BTreeMap::new();

    while steps < config.max_steps {
        if scene.grains.iter().all(|g| g.asleep) {
            break;
        }
        steps += 1;

        // Integrate awake grains.
        for g in scene.grains.iter_mut().filter(|g| !g.asleep) {
            g.velocity.z -= config.gravity * config.dt;
            g.velocity = g.velocity * config.linear_damping;
            g.angular_velocity = g.angular_velocity * config.angular_damping;
            g.position += g.velocity * config.dt;
            g.orientation = g.orientation.integrate(g.angular_velocity, config.dt);
        }

        // Broad phase on a uniform grid keyed by cell coordinates.
        let mut cells: BTreeMap<(i32, i32, i32), Vec<usize>> = BTreeMap::new();
        for (i, g) in scene.grains.iter().enumerate() {
            let key = (
                (g.position.x / cell).floor() as i32,
                (g.position.y / cell).floor() as i32,
                (g.position.z / cell).floor() as i32,
            );
            cells.entry(key).or_default().push(i);
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (&(cx, cy, cz), members) in &cells {
            for dx in 0..=1i32 {
                for dy in -1i32..=1 {
                    for dz in -1i32..=1 {
                        if dx == 0 && (dy < 0 || (dy == 0 && dz < 0)) {
                            continue;
                        }
                        let Some(others) = cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &i in members {
                            for &j in others {
                                if (dx, dy, dz) == (0, 0, 0) && j <= i {
                                    continue;
                                }
                                let (a, b) = (i.min(j), i.max(j));
                                let (ga, gb) = (&scene.grains[a], &scene.grains[b]);
                                if ga.asleep && gb.asleep {
                                    continue;
                                }
                                let reach =
                                    ga.shape.bounding_radius() + gb.shape.bounding_radius();
                                if (ga.position - gb.position).norm_sq() <= reach * reach {
                                    pairs.push((a, b));
                                }
                            }
                        }
                    }
                }
            }
        }
        pairs.sort_unstable();
        pairs.dedup();

        // Narrow phase.
        let mut contacts: Vec<Contact> = Vec::new();
        for &(a, b) in &pairs {
            if let Some((normal, point, depth)) =
                grain_pair_contact(&scene.grains[a], &scene.grains[b])
            {
                // Resting contacts hover around slop-deep penetration; only
                // clearly deeper impacts wake a sleeping grain.
                if depth > 10.0 * config.slop {
                    if scene.grains[a].asleep {
                        scene.grains[a].wake();
                    }
                    if scene.grains[b].asleep {
                        scene.grains[b].wake();
                    }
                }
                contacts.push(Contact {
                    a,
                    b,
                    ordinal: 0,
                    normal,
                    point,
                    depth,
                    pos_a0: scene.grains[a].position,
                    pos_b0: scene.grains[b].position,
                    acc_n: 0.0,
                    acc_t1: 0.0,
                    acc_t2: 0.0,
                    acc_roll_a: 0.0,
                    acc_roll_b: 0.0,
                });
            }
        }
        for i in 0..n {
            if !scene.grains[i].asleep {
                boundary_contacts(&scene.grains[i], i, &scene.container, &mut contacts);
            }
        }

        // Warm start from the previous step's accumulated impulses, then
        // iterate, swept bottom-up so the stack weight propagates from the
        // floor outward.
        contacts.sort_by(|x, y| {
            x.point.z.partial_cmp(&y.point.z).unwrap().then(x.a.cmp(&y.a)).then(x.b.cmp(&y.b))
        });
        for c in &mut contacts {
            if let Some(&(an, t1, t2)) = warm.get(&c.key()) {
                c.acc_n = an;
                c.acc_t1 = t1;
                c.acc_t2 = t2;
            }
        }
        let debug = std::env::var("SETTLE_DEBUG").is_ok() && steps % 1 == 0 && steps > 500 && steps < 505;
        if debug {
            for c in &contacts {
                eprintln!("step {steps} pre-warm: key={:?} acc=({:.4e},{:.4e},{:.4e}) depth={:.3e} v={:?}",
                    c.key(), c.acc_n, c.acc_t1, c.acc_t2, c.depth, scene.grains[c.a].velocity);
            }
        }
        for ci in 0..contacts.len() {
            warm_start_contact(scene, &contacts[ci]);
        }
        if debug {
            for c in &contacts {
                eprintln!("step {steps} post-warm: v={:?}", scene.grains[c.a].velocity);
            }
        }
        for _ in 0..config.solver_iterations {
            for c in &mut contacts {
                resolve_contact(&mut scene.grains, c, config);
            }
        }
        if debug {
            for c in &contacts {
                eprintln!("step {steps} post-iter: acc=({:.4e},{:.4e},{:.4e}) v={:?} w={:?}",
                    c.acc_n, c.acc_t1, c.acc_t2, scene.grains[c.a].velocity, scene.grains[c.a].angular_velocity);
            }
        }
        warm.clear();
        for c in &contacts {
            warm.insert(c.key(), (c.acc_n, c.acc_t1, c.acc_t2));
        }

        let mut touched = vec![false; n];
        for c in &contacts {
            touched[c.a] = true;
            if !c.static_b() {
                touched[c.b] = true;
            }
        }

        // Quasi-static quench and sleep bookkeeping.
        for (i, g) in scene.grains.iter_mut().enumerate() {
            if g.asleep {
                continue;
            }
            let r = g.shape.bounding_radius();
            let mut energy =
                0.5 * (g.velocity.norm_sq() + g.angular_velocity.norm_sq() * r * r);
            if touched[i] && energy < config.quasi_static_energy {
                g.velocity = g.velocity * 0.5;
                g.angular_velocity = g.angular_velocity * 0.5;
                energy = 0.5 * (g.velocity.norm_sq() + g.angular_velocity.norm_sq() * r * r);
            }
            if energy < config.sleep_energy {
                g.quiet_steps += 1;
                if g.quiet_steps >= config.sleep_steps {
                    g.asleep = true;
                    g.velocity = Vec3::ZERO;
                    g.angular_velocity = Vec3::ZERO;
                }
            } else {
                g.quiet_steps = 0;
            }
        }
    }

    let converged = scene.grains.iter().all(|g| g.asleep);
    scene.steps += steps;
    scene.converged = converged;
    scene.fill_height = scene.heap_top();
    SettleReport { steps, converged }
}

fn body_state(grains: &[RigidGrain], idx: usize, is_static: bool) -> (f64, f64, Vec3, bool) {
    if is_static {
        return (0.0, 0.0, Vec3::ZERO, true);
    }
    let g = &grains[idx];
    if g.asleep {
        (0.0, 0.0, g.position, true)
    } else {
        (g.inv_mass, g.inv_inertia, g.position, false)
    }
}

/// Tangent basis used for the friction accumulators.
fn tangent_basis(n: Vec3) -> (Vec3, Vec3) {
    let t1 = n.any_orthogonal();
    (t1, n.cross(t1))
}

fn warm_start_contact(scene: &mut AssemblyScene, c: &Contact) {
    if c.acc_n == 0.0 && c.acc_t1 == 0.0 && c.acc_t2 == 0.0 {
        return;
    }
    let (t1, t2) = tangent_basis(c.normal);
    let impulse_on_b = c.normal * c.acc_n + t1 * c.acc_t1 + t2 * c.acc_t2;
    let ra = c.point - scene.grains[c.a].position;
    let a_asleep = scene.grains[c.a].asleep;
    apply_impulse(&mut scene.grains, c.a, -impulse_on_b, ra, a_asleep);
    if !c.static_b() {
        let rb = c.point - scene.grains[c.b].position;
        let b_asleep = scene.grains[c.b].asleep;
        apply_impulse(&mut scene.grains, c.b, impulse_on_b, rb, b_asleep);
    }
}

fn resolve_contact(grains: &mut [RigidGrain], c: &mut Contact, config: &SettleConfig) {
    let static_b = c.static_b();
    let a_asleep = grains[c.a].asleep;
    let (inv_mass_a, inv_inertia_a, _, _) = body_state(grains, c.a, false);
    let (inv_mass_a, inv_inertia_a) = if a_asleep { (0.0, 0.0) } else { (inv_mass_a, inv_inertia_a) };
    let (inv_mass_b, inv_inertia_b, _, b_frozen) = body_state(grains, c.b.min(grains.len()), static_b);
    let inv_mass_sum = inv_mass_a + inv_mass_b;
    if inv_mass_sum == 0.0 {
        return;
    }

    // Depth along the stored normal, measured against the positions at
    // detection time, so repeated iterations converge instead of
    // over-correcting.
    let n = c.normal;
    let current_depth = {
        let shift_a = (grains[c.a].position - c.pos_a0).dot(n);
        let shift_b = if static_b { 0.0 } else { (grains[c.b].position - c.pos_b0).dot(n) };
        c.depth - (shift_b - shift_a)
    };
    let correction = (current_depth - config.slop).max(0.0) * config.position_correction;
    if correction > 0.0 {
        if inv_mass_a > 0.0 {
            grains[c.a].position -= n * (correction * inv_mass_a / inv_mass_sum);
        }
        if !static_b && inv_mass_b > 0.0 {
            grains[c.b].position += n * (correction * inv_mass_b / inv_mass_sum);
        }
    }

    let ra = c.point - grains[c.a].position;
    let rb = if static_b { Vec3::ZERO } else { c.point - grains[c.b].position };
    let point_velocity = |grains: &[RigidGrain]| -> Vec3 {
        let va = if a_asleep {
            Vec3::ZERO
        } else {
            grains[c.a].velocity + grains[c.a].angular_velocity.cross(ra)
        };
        let vb = if static_b || b_frozen {
            Vec3::ZERO
        } else {
            grains[c.b].velocity + grains[c.b].angular_velocity.cross(rb)
        };
        vb - va
    };

    // Normal impulse with a non-negative accumulator (zero restitution).
    let ang_a = if inv_inertia_a > 0.0 { (ra.cross(n)).norm_sq() * inv_inertia_a } else { 0.0 };
    let ang_b = if inv_inertia_b > 0.0 { (rb.cross(n)).norm_sq() * inv_inertia_b } else { 0.0 };
    let k_normal = inv_mass_sum + ang_a + ang_b;
    let vn = point_velocity(grains).dot(n);
    let delta = -vn / k_normal;
    let new_acc = (c.acc_n + delta).max(0.0);
    let applied = new_acc - c.acc_n;
    c.acc_n = new_acc;
    if applied != 0.0 {
        apply_impulse(grains, c.a, n * (-applied), ra, a_asleep);
        if !static_b {
            apply_impulse(grains, c.b, n * applied, rb, b_frozen);
        }
    }

    // Coulomb friction on two fixed tangents, capped by the accumulated
    // normal impulse.
    let (t1, t2) = tangent_basis(n);
    let mu = if c.b == BODY_WALL { config.wall_friction } else { config.friction };
    let bound = mu * c.acc_n;
    for (t, acc) in [(t1, &mut c.acc_t1), (t2, &mut c.acc_t2)] {
        let ang_a_t = if inv_inertia_a > 0.0 { (ra.cross(t)).norm_sq() * inv_inertia_a } else { 0.0 };
        let ang_b_t = if inv_inertia_b > 0.0 { (rb.cross(t)).norm_sq() * inv_inertia_b } else { 0.0 };
        let k_t = inv_mass_sum + ang_a_t + ang_b_t;
        let vt = point_velocity(grains).dot(t);
        let delta_t = -vt / k_t;
        let new_acc_t = (*acc + delta_t).clamp(-bound, bound);
        let applied_t = new_acc_t - *acc;
        *acc = new_acc_t;
        if applied_t != 0.0 {
            apply_impulse(grains, c.a, t * (-applied_t), ra, a_asleep);
            if !static_b {
                apply_impulse(grains, c.b, t * applied_t, rb, b_frozen);
            }
        }
    }

    // Rolling resistance: an angular constraint opposing each body's spin,
    // budgeted per step by mu_roll * acc_n * r. Solved inside the
    // iteration sweep so friction re-equilibrates afterwards; weak enough
    // that gravity can still tip an unstable pose toward a stable one.
    if config.rolling_resistance > 0.0 {
        for side in [0, 1] {
            let (idx, frozen) = if side == 0 {
                (c.a, a_asleep)
            } else if static_b {
                (usize::MAX, true)
            } else {
                (c.b, b_frozen)
            };
            if idx == usize::MAX || frozen {
                continue;
            }
            let g = &mut grains[idx];
            let w = g.angular_velocity;
            let w_mag = w.norm();
            if w_mag * g.shape.bounding_radius() >= config.slow_roll_speed {
                continue;
            }
            let bound = config.rolling_resistance * c.acc_n * g.shape.bounding_radius();
            let acc_roll = if side == 0 { &mut c.acc_roll_a } else { &mut c.acc_roll_b };
            if w_mag > 1e-14 && *acc_roll < bound {
                let need = w_mag / g.inv_inertia;
                let apply = need.min(bound - *acc_roll);
                *acc_roll += apply;
                g.angular_velocity = w * ((w_mag - apply * g.inv_inertia).max(0.0) / w_mag);
            }
        }
    }
}

fn apply_impulse(grains: &mut [RigidGrain], idx: usize, impulse: Vec3, r: Vec3, asleep: bool) {
    if asleep {
        return;
    }
    let g = &mut grains[idx];
    g.velocity += impulse * g.inv_mass;
    g.angular_velocity += r.cross(impulse) * g.inv_inertia;
}

/// Outcome of a fill-to-mark run.
#[derive(Debug, Clone, Copy)]
pub struct FillReport {
    pub grains_used: usize,
    pub reached_mark: bool,
    pub converged: bool,
}

/// Grains dropped per settle round.
pub const FILL_BATCH: usize = 25;

/// Drop grains from `source` in batches, settling between batches, until
/// the heap top reaches the container's fill mark or the source runs dry.
pub fn fill_to_mark(
    source: &mut dyn Iterator<Item = RigidGrain>,
    container: Container,
    config: &SettleConfig,
    seed: u64,
) -> Result<(AssemblyScene, FillReport)> {
    container.validate()?;
    let mut scene = AssemblyScene::new(container, seed);
    let mut rng = rng::run_rng(seed);
    let mut reached = false;
    let mut converged = true;
    if container.fill_mark <= 0.0 {
        return Ok((scene, FillReport { grains_used: 0, reached_mark: true, converged: true }));
    }
    loop {
        if scene.heap_top() >= container.fill_mark {
            reached = true;
            break;
        }
        let batch: Vec<RigidGrain> = source.take(FILL_BATCH).collect();
        if batch.is_empty() {
            break;
        }
        let start = scene.grains.len();
        scene.grains.extend(batch);
        spawn_batch(&mut scene.grains[start..], &scene.container.clone(), &mut rng)?;
        let report = settle(&mut scene, config);
        converged &= report.converged;
    }
    scene.fill_height = scene.heap_top();
    let used = scene.grains.len();
    Ok((scene, FillReport { grains_used: used, reached_mark: reached, converged }))
}

/// Monte Carlo porosity estimate.
#[derive(Debug, Clone, Copy)]
pub struct PorosityEstimate {
    pub porosity: f64,
    pub standard_error: f64,
    /// Height of the measured cylinder segment (mm).
    pub measured_height: f64,
}

/// Porosity of the cylinder segment below `height` by point sampling.
pub fn porosity_in_region(
    scene: &AssemblyScene,
    height: f64,
    samples: usize,
    rng: &mut RunRng,
) -> Result<PorosityEstimate> {
    use rand::Rng;
    if height <= 0.0 {
        return Err(Error::Simulation("porosity region height must be positive".into()));
    }
    if samples == 0 {
        return Err(Error::Simulation("porosity needs at least one sample".into()));
    }
    let radius = scene.container.radius;
    let mut solid = 0usize;
    for _ in 0..samples {
        let r = radius * rng.gen::<f64>().sqrt();
        let theta = rng::uniform(rng, 0.0, std::f64::consts::TAU);
        let p = vec3(r * theta.cos(), r * theta.sin(), rng::uniform(rng, 0.0, height));
        let inside = scene.grains.iter().any(|g| {
            let reach = g.shape.bounding_radius();
            (g.position - p).norm_sq() <= reach * reach
                && g.shape.contains_world(g.position, g.orientation, p)
        });
        if inside {
            solid += 1;
        }
    }
    let solid_fraction = solid as f64 / samples as f64;
    let porosity = 1.0 - solid_fraction;
    let se = (solid_fraction * (1.0 - solid_fraction) / samples as f64).sqrt();
    Ok(PorosityEstimate { porosity, standard_error: se, measured_height: height })
}

/// Porosity below the measured fill height, excluding the uneven surface
/// layer (one mean bounding diameter below the heap top).
pub fn porosity(scene: &AssemblyScene, samples: usize, rng: &mut RunRng) -> Result<PorosityEstimate> {
    if scene.grains.is_empty() || scene.fill_height <= 0.0 {
        return Err(Error::Simulation("porosity of an empty scene".into()));
    }
    let height = scene.fill_height - scene.mean_bounding_diameter();
    if height <= 0.0 {
        return Err(Error::Simulation(
            "settled heap is shallower than one grain diameter; no interior region to measure".into(),
        ));
    }
    porosity_in_region(scene, height, samples, rng)
}

// ── Scene file ──────────────────────────────────────────────────────

/// Poses and metadata parsed back from a scene file.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub container: Container,
    pub seed: u64,
    pub fill_height: f64,
    pub steps: u64,
    pub converged: bool,
    pub meta: Vec<(String, String)>,
    pub poses: Vec<(String, Vec3, Quat)>,
}

/// Write the replayable scene file: a text header followed by one pose
/// record per grain.
pub fn write_scene(path: impl AsRef<Path>, scene: &AssemblyScene, meta: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "grainscene 1").unwrap();
    for (k, v) in meta {
        writeln!(out, "# {k}={v}").unwrap();
    }
    writeln!(
        out,
        "container {} {} {}",
        scene.container.radius, scene.container.wall_height, scene.container.fill_mark
    )
    .unwrap();
    writeln!(out, "seed {}", scene.seed).unwrap();
    writeln!(out, "fill_height {}", scene.fill_height).unwrap();
    writeln!(out, "steps {}", scene.steps).unwrap();
    writeln!(out, "converged {}", scene.converged).unwrap();
    writeln!(out, "grains {}", scene.grains.len()).unwrap();
    for g in &scene.grains {
        writeln!(
            out,
            "grain {} {} {} {} {} {} {} {}",
            g.id,
            g.position.x,
            g.position.y,
            g.position.z,
            g.orientation.w,
            g.orientation.x,
            g.orientation.y,
            g.orientation.z
        )
        .unwrap();
    }
    fs::write(path.as_ref(), out)?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SceneRecord> {
    let path_str = path.as_ref().display().to_string();
    let text = fs::read_to_string(path.as_ref())?;
    let bad = |msg: &str| Error::format(path_str.clone(), msg.to_string());
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty scene file"))?;
    if header.trim() != "grainscene 1" {
        return Err(bad("missing scene header"));
    }
    let mut record = SceneRecord {
        container: Container::default(),
        seed: 0,
        fill_height: 0.0,
        steps: 0,
        converged: false,
        meta: Vec::new(),
        poses: Vec::new(),
    };
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            if let Some((k, v)) = rest.split_once('=') {
                record.meta.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("container") => {
                let vals: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                if vals.len() != 3 {
                    return Err(bad("malformed container line"));
                }
                record.container =
                    Container { radius: vals[0], wall_height: vals[1], fill_mark: vals[2] };
            }
            Some("seed") => {
                record.seed =
                    parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad seed"))?;
            }
            Some("fill_height") => {
                record.fill_height =
                    parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad fill height"))?;
            }
            Some("steps") => {
                record.steps =
                    parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| bad("bad steps"))?;
            }
            Some("converged") => {
                record.converged = parts.next() == Some("true");
            }
            Some("grains") => {}
            Some("grain") => {
                let id = parts.next().ok_or_else(|| bad("grain without id"))?.to_string();
                let vals: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                if vals.len() != 7 {
                    return Err(bad("grain pose needs 7 numbers"));
                }
                record.poses.push((
                    id,
                    vec3(vals[0], vals[1], vals[2]),
                    Quat { w: vals[3], x: vals[4], y: vals[5], z: vals[6] },
                ));
            }
            _ => return Err(bad("unknown scene line")),
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::run_rng;

    fn sphere_grain(id: &str, radius: f64) -> RigidGrain {
        RigidGrain::new(id, GrainShape::Sphere { radius })
    }

    #[test]
    fn single_sphere_rests_at_its_radius() {
        let mut scene = AssemblyScene::new(Container::default(), 1);
        let mut g = sphere_grain("s", 0.175);
        g.position = vec3(0.0, 0.0, 5.0);
        scene.grains.push(g);
        let report = settle(&mut scene, &SettleConfig::default());
        assert!(report.converged, "single sphere must settle");
        let z = scene.grains[0].position.z;
        assert!((z - 0.175).abs() / 0.175 < 0.02, "rest height {z}");
    }

    #[test]
    fn two_separated_spheres_rest_on_floor_without_overlap() {
        let mut scene = AssemblyScene::new(Container::default(), 2);
        let mut a = sphere_grain("a", 0.15);
        a.position = vec3(-0.35, 0.0, 4.0);
        let mut b = sphere_grain("b", 0.15);
        b.position = vec3(0.35, 0.0, 6.0);
        scene.grains.extend([a, b]);
        let report = settle(&mut scene, &SettleConfig::default());
        assert!(report.converged);
        for g in &scene.grains {
            assert!((g.position.z - 0.15).abs() / 0.15 < 0.02, "rest height {}", g.position.z);
        }
        let sep = pair_separation(&scene.grains[0], &scene.grains[1]);
        assert!(sep > -1e-3, "spheres must not interpenetrate, separation {sep}");
    }

    #[test]
    fn settling_is_deterministic() {
        let run = || {
            let mut scene = AssemblyScene::new(Container::default(), 7);
            let mut grains: Vec<RigidGrain> =
                (0..12).map(|i| sphere_grain(&format!("g{i}"), 0.12)).collect();
            let mut rng = run_rng(7);
            spawn_batch(&mut grains, &Container::default(), &mut rng).unwrap();
            scene.grains = grains;
            settle(&mut scene, &SettleConfig::default());
            scene
                .grains
                .iter()
                .flat_map(|g| {
                    [g.position.x, g.position.y, g.position.z, g.orientation.w].map(f64::to_bits)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn spawn_constraints_hold() {
        let mut rng = run_rng(3);
        let container = Container::default();
        let mut grains: Vec<RigidGrain> =
            (0..25).map(|i| sphere_grain(&format!("g{i}"), 0.1)).collect();
        spawn_batch(&mut grains, &container, &mut rng).unwrap();
        for g in &grains {
            assert!(g.position.z >= SPAWN_HEIGHT_RANGE.0, "height {}", g.position.z);
            let radial = (g.position.x * g.position.x + g.position.y * g.position.y).sqrt();
            assert!(radial <= container.radius - 0.1 + 1e-12);
        }
        // Pairwise non-overlapping at spawn.
        for i in 0..grains.len() {
            for j in (i + 1)..grains.len() {
                assert!((grains[i].position - grains[j].position).norm() > 0.2);
            }
        }
        // Oversized grain is rejected by id.
        let mut too_big = vec![sphere_grain("jumbo", 1.0)];
        let err = spawn_batch(&mut too_big, &container, &mut rng).unwrap_err();
        assert!(err.to_string().contains("jumbo"));
    }

    #[test]
    fn fill_zero_mark_is_empty() {
        let container = Container { fill_mark: 0.0, ..Container::default() };
        let (scene, report) = fill_to_mark(
            &mut (0..5).map(|i| sphere_grain(&format!("g{i}"), 0.1)),
            container,
            &SettleConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(report.grains_used, 0);
        assert!(report.reached_mark);
        assert!(scene.grains.is_empty());
    }

    #[test]
    fn exhausted_source_yields_partial_fill() {
        let (scene, report) = fill_to_mark(
            &mut (0..3).map(|i| sphere_grain(&format!("g{i}"), 0.1)),
            Container::default(),
            &SettleConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(report.grains_used, 3);
        assert!(!report.reached_mark);
        assert_eq!(scene.grains.len(), 3);
    }

    #[test]
    fn porosity_empty_region_is_one() {
        let mut scene = AssemblyScene::new(Container::default(), 1);
        scene.fill_height = 1.0;
        let mut rng = run_rng(5);
        let est = porosity_in_region(&scene, 1.0, 20_000, &mut rng).unwrap();
        assert_eq!(est.porosity, 1.0);
    }

    #[test]
    fn porosity_of_submerged_sphere_matches_analytic() {
        let container = Container { radius: 0.7, wall_height: 5.0, fill_mark: 2.0 };
        let mut scene = AssemblyScene::new(container, 1);
        let mut g = sphere_grain("s", 0.2);
        g.position = vec3(0.0, 0.0, 0.5);
        scene.grains.push(g);
        scene.fill_height = 1.0;
        let height = 1.0;
        let region_volume = std::f64::consts::PI * 0.7 * 0.7 * height;
        let sphere_volume = 4.0 / 3.0 * std::f64::consts::PI * 0.2f64.powi(3);
        let expected = 1.0 - sphere_volume / region_volume;
        let mut rng = run_rng(6);
        let est = porosity_in_region(&scene, height, 1_000_000, &mut rng).unwrap();
        assert!(
            (est.porosity - expected).abs() < 4.0 * est.standard_error + 1e-4,
            "porosity {} vs analytic {expected} (se {})",
            est.porosity,
            est.standard_error
        );
    }

    #[test]
    fn hull_grain_settles_inside_container() {
        use crate::pointcloud::synthetic::fibonacci_sphere;
        let pts: Vec<Vec3> = fibonacci_sphere(80).iter().map(|&p| p * 0.15).collect();
        let (shape, _) = GrainShape::hull_of_points(&pts).unwrap();
        let mut grain = RigidGrain::new("hull", shape);
        grain.position = vec3(0.1, -0.05, 3.0);
        let mut scene = AssemblyScene::new(Container::default(), 9);
        scene.grains.push(grain);
        let report = settle(&mut scene, &SettleConfig::default());
        assert!(report.converged);
        let g = &scene.grains[0];
        assert!(g.bottom_height() > -1e-3, "grain below the floor: {}", g.bottom_height());
        let radial = (g.position.x * g.position.x + g.position.y * g.position.y).sqrt();
        assert!(radial < scene.container.radius);
    }

    #[test]
    fn scene_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assembly.scene");
        let mut scene = AssemblyScene::new(Container::default(), 11);
        let mut g = sphere_grain("g0", 0.1);
        g.position = vec3(0.05, -0.1, 0.1);
        g.orientation = Quat::from_axis_angle(vec3(0.0, 0.0, 1.0), 0.3);
        scene.grains.push(g);
        scene.fill_height = 0.2;
        scene.steps = 1234;
        scene.converged = true;
        let meta = vec![("config_hash".to_string(), "abc123".to_string())];
        write_scene(&path, &scene, &meta).unwrap();
        let record = read_scene(&path).unwrap();
        assert_eq!(record.seed, 11);
        assert_eq!(record.steps, 1234);
        assert!(record.converged);
        assert_eq!(record.poses.len(), 1);
        assert_eq!(record.poses[0].0, "g0");
        assert!((record.poses[0].1 - vec3(0.05, -0.1, 0.1)).norm() < 1e-12);
        assert_eq!(record.meta, meta);
        assert_eq!(record.container, Container::default());
    }
}
