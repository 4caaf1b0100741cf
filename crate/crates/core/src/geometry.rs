//! Star-polygon peg cross-sections, hole offsets and signed-distance queries.
//!
//! All lengths are millimetres and all angles degrees. Polygons are stored
//! counter-clockwise; the shape origin is the star centre, which is also the
//! origin of the peg frame used by the contact model.

use std::collections::BTreeMap;

use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_rng;

pub type Vec2 = Vector2<f64>;

pub const DEFAULT_CLEARANCE_MM: f64 = 1.0;
pub const RADIUS_MIN_MM: f64 = 10.0;
pub const RADIUS_MAX_MM: f64 = 20.0;
/// Vertices whose turn is closer than this to a straight line are rejected.
pub const MIN_TURN_DEG: f64 = 2.0;
pub const ANGLE_CONCENTRATION: f64 = 5.0;
pub const RESAMPLE_BUDGET: usize = 1000;
pub const DEFAULT_PEG_LENGTH_MM: f64 = 40.0;

/// Radii and central angles a star polygon was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StarParams {
    pub radii_mm: Vec<f64>,
    pub angles_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonShape {
    vertices: Vec<Vec2>,
    star: Option<StarParams>,
}

impl PolygonShape {
    /// Builds a polygon from counter-clockwise vertices, rejecting degenerate
    /// or self-intersecting input.
    pub fn new(vertices: Vec<Vec2>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::invalid(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
            return Err(Error::NonFinite("polygon vertex".into()));
        }
        if signed_area(&vertices) <= 0.0 {
            return Err(Error::invalid("polygon vertices must be counter-clockwise"));
        }
        if !is_simple(&vertices) {
            return Err(Error::invalid("polygon is not simple"));
        }
        Ok(Self {
            vertices,
            star: None,
        })
    }

    /// Star polygon: vertex `i` sits at radius `radii[i]` and at the cumulative
    /// angle of the preceding central angles, starting on the +x axis.
    pub fn from_star(radii_mm: Vec<f64>, angles_deg: Vec<f64>) -> Result<Self> {
        if radii_mm.len() != angles_deg.len() {
            return Err(Error::DimensionMismatch {
                context: "star polygon angles",
                expected: radii_mm.len(),
                got: angles_deg.len(),
            });
        }
        if radii_mm.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::invalid("star radii must be positive"));
        }
        if angles_deg.iter().any(|&a| !(a > 0.0 && a < 180.0)) {
            return Err(Error::invalid("central angles must lie in (0, 180) degrees"));
        }
        let total: f64 = angles_deg.iter().sum();
        if (total - 360.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "central angles sum to {total}, expected 360"
            )));
        }
        let mut phi = 0.0_f64;
        let mut vertices = Vec::with_capacity(radii_mm.len());
        for (r, theta) in radii_mm.iter().zip(&angles_deg) {
            let rad = phi.to_radians();
            vertices.push(Vec2::new(r * rad.cos(), r * rad.sin()));
            phi += theta;
        }
        let mut shape = Self::new(vertices)?;
        shape.star = Some(StarParams {
            radii_mm,
            angles_deg,
        });
        Ok(shape)
    }

    /// Axis-aligned square centred on the origin.
    pub fn square(half_width: f64) -> Result<Self> {
        let h = half_width;
        Self::new(vec![
            Vec2::new(-h, -h),
            Vec2::new(h, -h),
            Vec2::new(h, h),
            Vec2::new(-h, h),
        ])
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn n(&self) -> usize {
        self.vertices.len()
    }

    pub fn star_params(&self) -> Option<&StarParams> {
        self.star.as_ref()
    }

    pub fn edges(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| (b - a).norm()).sum()
    }

    pub fn max_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Signed turn at each vertex in degrees; positive for convex corners.
    pub fn turn_angles_deg(&self) -> Vec<f64> {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let prev = self.vertices[(i + n - 1) % n];
                let cur = self.vertices[i];
                let next = self.vertices[(i + 1) % n];
                let a = cur - prev;
                let b = next - cur;
                cross(a, b).atan2(a.dot(&b)).to_degrees()
            })
            .collect()
    }

    /// Mirror image across the x axis (y -> -y), kept counter-clockwise.
    pub fn mirrored_y(&self) -> Self {
        let mut vertices: Vec<Vec2> = self.vertices.iter().map(|v| Vec2::new(v.x, -v.y)).collect();
        vertices.reverse();
        Self {
            vertices,
            star: None,
        }
    }

    pub fn translated(&self, d: Vec2) -> Self {
        Self {
            vertices: self.vertices.iter().map(|v| v + d).collect(),
            star: None,
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        crossing_parity(&self.vertices, p)
    }
}

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

pub fn signed_area(vertices: &[Vec2]) -> f64 {
    let n = vertices.len();
    0.5 * (0..n)
        .map(|i| cross(vertices[i], vertices[(i + 1) % n]))
        .sum::<f64>()
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    cross(b - a, c - a)
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// No two non-adjacent edges meet.
pub fn is_simple(vertices: &[Vec2]) -> bool {
    let n = vertices.len();
    for i in 0..n {
        let (a, b) = (vertices[i], vertices[(i + 1) % n]);
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (vertices[j], vertices[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn crossing_parity(vertices: &[Vec2], p: Vec2) -> bool {
    let n = vertices.len();
    let mut inside = false;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Random star polygon with `n` vertices: radii uniform in [10, 20] mm,
/// central angles from a symmetric Dirichlet scaled to 360 degrees.
pub fn generate_polygon<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PolygonShape> {
    if !(4..=10).contains(&n) {
        return Err(Error::invalid(format!("vertex count {n} outside 4..=10")));
    }
    let gamma = Gamma::new(ANGLE_CONCENTRATION, 1.0).expect("valid gamma parameters");
    for _ in 0..RESAMPLE_BUDGET {
        let radii: Vec<f64> = (0..n)
            .map(|_| rng.random_range(RADIUS_MIN_MM..=RADIUS_MAX_MM))
            .collect();
        let weights: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let total: f64 = weights.iter().sum();
        let angles: Vec<f64> = weights.iter().map(|w| 360.0 * w / total).collect();
        if angles.iter().any(|&a| a >= 180.0) {
            continue;
        }
        let Ok(shape) = PolygonShape::from_star(radii, angles) else {
            continue;
        };
        let straightish = shape
            .turn_angles_deg()
            .iter()
            .any(|t| t.abs() < MIN_TURN_DEG);
        if !straightish {
            return Ok(shape);
        }
    }
    Err(Error::ResampleBudget {
        n,
        attempts: RESAMPLE_BUDGET,
    })
}

/// Outward offset by `clearance`. Each corner becomes the intersection of
/// the two adjacent offset edges: a miter at convex corners and the exact
/// Minkowski corner at reflex ones.
pub fn offset_polygon(shape: &PolygonShape, clearance: f64) -> Result<PolygonShape> {
    if !(clearance > 0.0) || !clearance.is_finite() {
        return Err(Error::invalid(format!("clearance must be positive, got {clearance}")));
    }
    let v = shape.vertices();
    let n = v.len();
    let normals: Vec<Vec2> = (0..n)
        .map(|i| {
            let d = (v[(i + 1) % n] - v[i]).normalize();
            Vec2::new(d.y, -d.x)
        })
        .collect();
    let corners: Vec<Vec2> = (0..n)
        .map(|i| {
            let a = normals[(i + n - 1) % n];
            let b = normals[i];
            v[i] + (a + b) * (clearance / (1.0 + a.dot(&b)))
        })
        .collect();
    for i in 0..n {
        let orig = v[(i + 1) % n] - v[i];
        let moved = corners[(i + 1) % n] - corners[i];
        if moved.dot(&orig) <= 0.0 {
            return Err(Error::OffsetSelfIntersection { clearance });
        }
    }
    if !is_simple(&corners) {
        return Err(Error::OffsetSelfIntersection { clearance });
    }
    PolygonShape::new(corners).map_err(|_| Error::OffsetSelfIntersection { clearance })
}

/// Exact signed distance to the polygon boundary, negative inside.
pub fn polygon_sdf(shape: &PolygonShape, point: Vec2) -> f64 {
    EdgeTable::new(shape).sdf(point)
}

/// Precomputed edge data for repeated distance queries.
#[derive(Debug, Clone)]
pub struct EdgeTable {
    starts: Vec<Vec2>,
    dirs: Vec<Vec2>,
    inv_len2: Vec<f64>,
    normals: Vec<Vec2>,
    max_radius: f64,
}

impl EdgeTable {
    pub fn new(shape: &PolygonShape) -> Self {
        let mut starts = Vec::with_capacity(shape.n());
        let mut dirs = Vec::with_capacity(shape.n());
        let mut inv_len2 = Vec::with_capacity(shape.n());
        let mut normals = Vec::with_capacity(shape.n());
        for (a, b) in shape.edges() {
            let d = b - a;
            starts.push(a);
            dirs.push(d);
            inv_len2.push(1.0 / d.norm_squared());
            let u = d.normalize();
            normals.push(Vec2::new(u.y, -u.x));
        }
        Self {
            starts,
            dirs,
            inv_len2,
            normals,
            max_radius: shape.max_radius(),
        }
    }

    /// Radius of the smallest origin-centred disc containing the polygon.
    pub fn max_radius(&self) -> f64 {
        self.max_radius
    }

    pub fn sdf(&self, p: Vec2) -> f64 {
        self.sdf_grad(p).0
    }

    /// Signed distance and its gradient (unit, pointing away from the interior).
    pub fn sdf_grad(&self, p: Vec2) -> (f64, Vec2) {
        let mut best = f64::INFINITY;
        let mut best_delta = Vec2::zeros();
        let mut best_edge = 0;
        let mut inside = false;
        for i in 0..self.starts.len() {
            let a = self.starts[i];
            let d = self.dirs[i];
            let ap = p - a;
            let t = (ap.dot(&d) * self.inv_len2[i]).clamp(0.0, 1.0);
            let delta = ap - d * t;
            let dist2 = delta.norm_squared();
            if dist2 < best {
                best = dist2;
                best_delta = delta;
                best_edge = i;
            }
            let b = a + d;
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * d.x / d.y;
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        let dist = best.sqrt();
        let outward = if dist > 1e-12 {
            if inside {
                -best_delta / dist
            } else {
                best_delta / dist
            }
        } else {
            self.normals[best_edge]
        };
        (if inside { -dist } else { dist }, outward)
    }
}

/// A boundary point with the outward normal of the edge it was taken from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundarySample {
    pub point: Vec2,
    pub normal: Vec2,
}

/// Arc-length-uniform boundary samples. Every edge is split into
/// `floor(len / spacing) + 1` equal pieces and both end points are emitted,
/// so each vertex appears once per adjacent edge with that edge's normal.
pub fn sample_boundary_points(shape: &PolygonShape, spacing: f64) -> Result<Vec<BoundarySample>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
    }
    let mut out = Vec::new();
    for (a, b) in shape.edges() {
        let d = b - a;
        let len = d.norm();
        let pieces = edge_pieces(len, spacing);
        let u = d / len;
        let normal = Vec2::new(u.y, -u.x);
        for j in 0..=pieces {
            let t = j as f64 / pieces as f64;
            out.push(BoundarySample {
                point: a + d * t,
                normal,
            });
        }
    }
    Ok(out)
}

// Rounding slack so edges of equal nominal length split the same way.
fn edge_pieces(len: f64, spacing: f64) -> usize {
    (len / spacing + 1e-9).floor() as usize + 1
}

/// Boundary samples with the duplicated vertex entries removed.
pub fn unique_boundary_points(shape: &PolygonShape, spacing: f64) -> Result<Vec<Vec2>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
    }
    let mut out = Vec::new();
    for (a, b) in shape.edges() {
        let d = b - a;
        let pieces = edge_pieces(d.norm(), spacing);
        for j in 0..pieces {
            out.push(a + d * (j as f64 / pieces as f64));
        }
    }
    Ok(out)
}

/// Grid points (aligned to the origin) strictly inside the polygon.
pub fn interior_grid(shape: &PolygonShape, spacing: f64) -> Result<Vec<Vec2>> {
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("grid spacing must be positive, got {spacing}")));
    }
    let table = EdgeTable::new(shape);
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    for v in shape.vertices() {
        lo = lo.inf(v);
        hi = hi.sup(v);
    }
    let ix = ((lo.x / spacing).ceil() as i64)..=((hi.x / spacing).floor() as i64);
    let iy = ((lo.y / spacing).ceil() as i64)..=((hi.y / spacing).floor() as i64);
    let mut out = Vec::new();
    for j in iy {
        for i in ix.clone() {
            let p = Vec2::new(i as f64 * spacing, j as f64 * spacing);
            if table.sdf(p) < -1e-9 {
                out.push(p);
            }
        }
    }
    Ok(out)
}

/// Peg cross-section together with the hole cut for it.
#[derive(Debug, Clone)]
pub struct PegHolePair {
    pub peg: PolygonShape,
    /// Hole outline in world (plate) coordinates.
    pub hole: PolygonShape,
    pub clearance: f64,
    /// Peg length along its axis; the F/T sensor sits at half this height.
    pub extrusion_height: f64,
    pub plate_top_z: f64,
}

impl PegHolePair {
    pub fn new(peg: PolygonShape, clearance: f64) -> Result<Self> {
        let hole = offset_polygon(&peg, clearance)?;
        Ok(Self {
            peg,
            hole,
            clearance,
            extrusion_height: DEFAULT_PEG_LENGTH_MM,
            plate_top_z: 0.0,
        })
    }

    pub fn sensor_height(&self) -> f64 {
        0.5 * self.extrusion_height
    }

    /// Moves the plate and hole; the peg outline lives in the peg frame.
    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            peg: self.peg.clone(),
            hole: self.hole.translated(Vec2::new(dx, dy)),
            clearance: self.clearance,
            extrusion_height: self.extrusion_height,
            plate_top_z: self.plate_top_z + dz,
        }
    }

    /// Mirror image of the whole pair across the world XZ plane.
    pub fn mirrored_y(&self) -> Self {
        Self {
            peg: self.peg.mirrored_y(),
            hole: self.hole.mirrored_y(),
            clearance: self.clearance,
            extrusion_height: self.extrusion_height,
            plate_top_z: self.plate_top_z,
        }
    }
}

/// Serialized form of a generated shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: u32,
    pub n: usize,
    pub radii_mm: Vec<f64>,
    pub angles_deg: Vec<f64>,
    pub vertices: Vec<[f64; 2]>,
    pub clearance_mm: f64,
    pub seed: u64,
}

impl ShapeRecord {
    pub fn from_shape(id: u32, shape: &PolygonShape, clearance_mm: f64, seed: u64) -> Self {
        let (radii_mm, angles_deg) = shape
            .star_params()
            .map(|s| (s.radii_mm.clone(), s.angles_deg.clone()))
            .unwrap_or_default();
        Self {
            id,
            n: shape.n(),
            radii_mm,
            angles_deg,
            vertices: shape.vertices().iter().map(|v| [v.x, v.y]).collect(),
            clearance_mm,
            seed,
        }
    }

    /// Rebuilds the polygon, preferring the star parameters when present.
    pub fn shape(&self) -> Result<PolygonShape> {
        if !self.radii_mm.is_empty() {
            PolygonShape::from_star(self.radii_mm.clone(), self.angles_deg.clone())
        } else {
            PolygonShape::new(self.vertices.iter().map(|v| Vec2::new(v[0], v[1])).collect())
        }
    }

    pub fn pair(&self) -> Result<PegHolePair> {
        PegHolePair::new(self.shape()?, self.clearance_mm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertexClass {
    pub vertices: usize,
    pub seen: bool,
    pub shape_ids: Vec<u32>,
}

/// Shape set plus the per-vertex-class listing of shape IDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeManifest {
    pub seed: u64,
    pub clearance_mm: f64,
    pub classes: Vec<VertexClass>,
    pub shapes: Vec<ShapeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeSetConfig {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub seen_per_class: usize,
    pub unseen_per_class: usize,
    pub clearance_mm: f64,
}

impl Default for ShapeSetConfig {
    fn default() -> Self {
        Self {
            seen_classes: vec![4, 5, 6],
            unseen_classes: vec![7, 8, 9, 10],
            seen_per_class: 3,
            unseen_per_class: 2,
            clearance_mm: DEFAULT_CLEARANCE_MM,
        }
    }
}

impl ShapeSetConfig {
    /// 20 shapes per vertex class.
    pub fn paper_scale() -> Self {
        Self {
            seen_per_class: 20,
            unseen_per_class: 20,
            ..Self::default()
        }
    }
}

/// Generates the seen and unseen shape sets. Each shape has its own RNG
/// stream derived from `(seed, vertex count, index)`.
pub fn generate_shape_set(config: &ShapeSetConfig, seed: u64) -> Result<ShapeManifest> {
    let mut classes = Vec::new();
    let mut shapes = Vec::new();
    let groups = config
        .seen_classes
        .iter()
        .map(|&n| (n, true, config.seen_per_class))
        .chain(
            config
                .unseen_classes
                .iter()
                .map(|&n| (n, false, config.unseen_per_class)),
        );
    for (n, seen, count) in groups {
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            let shape_seed = crate::seed::mix(&[seed, 0x5ba9e, n as u64, i as u64]);
            let mut rng = derive_rng(&[shape_seed]);
            let shape = generate_polygon(n, &mut rng)?;
            let id = shapes.len() as u32;
            // Reject shapes whose hole cannot be cut; vanishingly rare.
            offset_polygon(&shape, config.clearance_mm)?;
            shapes.push(ShapeRecord::from_shape(id, &shape, config.clearance_mm, shape_seed));
            ids.push(id);
        }
        classes.push(VertexClass {
            vertices: n,
            seen,
            shape_ids: ids,
        });
    }
    Ok(ShapeManifest {
        seed,
        clearance_mm: config.clearance_mm,
        classes,
        shapes,
    })
}

impl ShapeManifest {
    pub fn shape(&self, id: u32) -> Option<&ShapeRecord> {
        self.shapes.iter().find(|s| s.id == id)
    }

    pub fn is_seen(&self, id: u32) -> bool {
        self.classes
            .iter()
            .any(|c| c.seen && c.shape_ids.contains(&id))
    }

    pub fn vertex_count(&self, id: u32) -> Option<usize> {
        self.shape(id).map(|s| s.n)
    }

    pub fn seen_ids(&self) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| c.seen)
            .flat_map(|c| c.shape_ids.iter().copied())
            .collect()
    }

    pub fn unseen_ids(&self) -> Vec<u32> {
        self.classes
            .iter()
            .filter(|c| !c.seen)
            .flat_map(|c| c.shape_ids.iter().copied())
            .collect()
    }

    /// Peg-hole pairs keyed by shape ID.
    pub fn pairs(&self) -> Result<BTreeMap<u32, PegHolePair>> {
        self.shapes.iter().map(|s| Ok((s.id, s.pair()?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_diamond() -> PolygonShape {
        PolygonShape::from_star(vec![15.0; 4], vec![90.0; 4]).unwrap()
    }

    #[test]
    fn forced_star_square() {
        let s = square_diamond();
        let expected = [(15.0, 0.0), (0.0, 15.0), (-15.0, 0.0), (0.0, -15.0)];
        for (v, e) in s.vertices().iter().zip(expected) {
            assert!((v.x - e.0).abs() < 1e-12 && (v.y - e.1).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn generated_polygons_respect_ranges() {
        let mut rng = derive_rng(&[17]);
        for n in 4..=10 {
            let s = generate_polygon(n, &mut rng).unwrap();
            let star = s.star_params().unwrap();
            assert_eq!(s.n(), n);
            assert!(star.radii_mm.iter().all(|r| (10.0..=20.0).contains(r)));
            assert!((star.angles_deg.iter().sum::<f64>() - 360.0).abs() < 1e-9);
            assert!(s.turn_angles_deg().iter().all(|t| t.abs() >= MIN_TURN_DEG));
        }
    }

    #[test]
    fn vertex_count_out_of_range() {
        let mut rng = derive_rng(&[1]);
        assert!(generate_polygon(3, &mut rng).is_err());
        assert!(generate_polygon(11, &mut rng).is_err());
    }

    #[test]
    fn square_offset_is_mitered() {
        let hole = offset_polygon(&PolygonShape::square(15.0).unwrap(), 1.0).unwrap();
        for v in hole.vertices() {
            assert!((v.x.abs() - 16.0).abs() < 1e-12 && (v.y.abs() - 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_rejects_bad_clearance() {
        let sq = PolygonShape::square(15.0).unwrap();
        assert!(offset_polygon(&sq, 0.0).is_err());
        assert!(offset_polygon(&sq, -1.0).is_err());
    }

    #[test]
    fn offset_rejects_self_intersection() {
        // Thin notch: two reflex-adjacent edges only 2 mm apart.
        let notch = PolygonShape::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(20.0, 0.0),
            Vec2::new(20.0, 20.0),
            Vec2::new(11.0, 20.0),
            Vec2::new(11.0, 5.0),
            Vec2::new(9.0, 5.0),
            Vec2::new(9.0, 20.0),
            Vec2::new(0.0, 20.0),
        ])
        .unwrap();
        assert!(offset_polygon(&notch, 0.5).is_ok());
        assert!(matches!(
            offset_polygon(&notch, 1.5),
            Err(Error::OffsetSelfIntersection { .. })
        ));
    }

    #[test]
    fn tiny_offset_hugs_original() {
        let mut rng = derive_rng(&[3]);
        let s = generate_polygon(7, &mut rng).unwrap();
        let o = offset_polygon(&s, 1e-6).unwrap();
        let table = EdgeTable::new(&s);
        let back = EdgeTable::new(&o);
        let fwd = sample_boundary_points(&o, 0.1).unwrap();
        let rev = sample_boundary_points(&s, 0.1).unwrap();
        let h1 = fwd.iter().map(|b| table.sdf(b.point).abs()).fold(0.0, f64::max);
        let h2 = rev.iter().map(|b| back.sdf(b.point).abs()).fold(0.0, f64::max);
        assert!(h1.max(h2) < 1e-5, "{h1} {h2}");
    }

    #[test]
    fn square_sdf_values() {
        let sq = PolygonShape::square(15.0).unwrap();
        assert!((polygon_sdf(&sq, Vec2::new(0.0, 0.0)) + 15.0).abs() < 1e-12);
        assert!((polygon_sdf(&sq, Vec2::new(20.0, 0.0)) - 5.0).abs() < 1e-12);
        let (_, g) = EdgeTable::new(&sq).sdf_grad(Vec2::new(20.0, 1.0));
        assert!((g - Vec2::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn square_boundary_samples() {
        let sq = PolygonShape::square(15.0).unwrap();
        let samples = sample_boundary_points(&sq, 30.0).unwrap();
        let uniq = unique_boundary_points(&sq, 30.0).unwrap();
        assert_eq!(uniq.len(), 8);
        assert_eq!(samples.len(), 12);
        assert!(samples.len() as f64 >= sq.perimeter() / 30.0);
        let corner = Vec2::new(15.0, 15.0);
        let normals: Vec<_> = samples
            .iter()
            .filter(|s| (s.point - corner).norm() < 1e-12)
            .map(|s| s.normal)
            .collect();
        assert_eq!(normals.len(), 2);
        assert!(normals.contains(&Vec2::new(1.0, 0.0)) && normals.contains(&Vec2::new(0.0, 1.0)));
        assert!(sample_boundary_points(&sq, 0.0).is_err());
    }

    #[test]
    fn clockwise_input_rejected() {
        let cw = vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(0.0, 1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
        ];
        assert!(PolygonShape::new(cw).is_err());
    }

    #[test]
    fn shape_set_is_deterministic_and_classified() {
        let cfg = ShapeSetConfig::default();
        let a = generate_shape_set(&cfg, 5).unwrap();
        let b = generate_shape_set(&cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shapes.len(), 9 + 8);
        assert_eq!(a.seen_ids().len(), 9);
        assert!(a.seen_ids().iter().all(|&id| a.vertex_count(id).unwrap() <= 6));
        assert!(a.unseen_ids().iter().all(|&id| a.vertex_count(id).unwrap() >= 7));
        let rec = &a.shapes[4];
        assert_eq!(rec.shape().unwrap().vertices().len(), rec.n);
        let json = serde_json::to_string(&a).unwrap();
        let back: ShapeManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }

    // Exhaustive oracle: closest point on every edge, sign from the winding
    // number.
    fn brute_sdf(v: &[Vec2], p: Vec2) -> f64 {
        let n = v.len();
        let mut best = f64::INFINITY;
        let mut winding = 0.0;
        for i in 0..n {
            let (a, b) = (v[i], v[(i + 1) % n]);
            let ab = b - a;
            let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
            best = best.min((a + ab * t - p).norm());
            let (u, w) = (a - p, b - p);
            winding += (u.x * w.y - u.y * w.x).atan2(u.dot(&w));
        }
        if winding.abs() > std::f64::consts::PI {
            -best
        } else {
            best
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn sdf_matches_exhaustive_oracle(seed in proptest::prelude::any::<u64>(), n in 4usize..=10, x in -25.0..25.0f64, y in -25.0..25.0f64) {
            let shape = generate_polygon(n, &mut derive_rng(&[seed])).unwrap();
            let table = EdgeTable::new(&shape);
            let p = Vec2::new(x, y);
            let expect = brute_sdf(shape.vertices(), p);
            proptest::prop_assert!((table.sdf(p) - expect).abs() < 1e-9, "{} vs {expect}", table.sdf(p));
            proptest::prop_assert_eq!(shape.contains(p), expect < 0.0);
            // Gradient is a unit vector pointing away from the outline.
            let (d, g) = table.sdf_grad(p);
            proptest::prop_assert!((d - expect).abs() < 1e-9);
            proptest::prop_assert!((g.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn hole_clears_peg_by_clearance(seed in proptest::prelude::any::<u64>(), n in 4usize..=10, c in 0.2..1.5f64) {
            let shape = generate_polygon(n, &mut derive_rng(&[seed])).unwrap();
            let Ok(hole) = offset_polygon(&shape, c) else { return Ok(()); };
            let table = EdgeTable::new(&hole);
            for b in sample_boundary_points(&shape, 0.25).unwrap() {
                proptest::prop_assert!(table.sdf(b.point) <= -c + 1e-9, "{:?} {}", b.point, table.sdf(b.point));
            }
            proptest::prop_assert!(hole.area() > shape.area());
        }
    }
}
