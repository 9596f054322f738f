//! Simulated depth sensing, relative drift estimation and agent masking.
//!
//! Cameras follow the usual optical convention: +z forward, +x right, +y
//! down. Pixel `(i, j)` covers `[i, i + 1) x [j, j + 1)` and is sampled at its
//! center. Depth is the z coordinate in the camera frame.

use std::io::{self, Write};

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};

use crate::environment::OccupancyGrid;
use crate::message::AgentId;
use crate::trajectory::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub max_depth: f64,
    /// World to camera.
    pub t_c_w: Isometry3<f64>,
}

impl CameraModel {
    /// Camera with the given field of view (degrees) and principal point at
    /// the image center, placed at the world origin looking along +x.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64, vfov_deg: f64, max_depth: f64) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let fx = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        let fy = height as f64 / 2.0 / (vfov_deg.to_radians() / 2.0).tan();
        let mut cam = Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            max_depth,
            t_c_w: Isometry3::identity(),
        };
        cam.set_body_pose(&Vec3::zeros(), 0.0);
        cam
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Mounts the camera on a body at `position` with heading `yaw`, looking
    /// forward along the body x axis.
    pub fn set_body_pose(&mut self, position: &Vec3, yaw: f64) {
        // Columns: camera x, y, z axes in body coordinates.
        let r_bc = Rotation3::from_matrix_unchecked(Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        ));
        let r_wb = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw);
        let r_wc = r_wb * r_bc;
        let t_w_c = Isometry3::from_parts(Translation3::from(*position), UnitQuaternion::from_rotation_matrix(&r_wc));
        self.t_c_w = t_w_c.inverse();
    }

    pub fn with_body_pose(mut self, position: &Vec3, yaw: f64) -> Self {
        self.set_body_pose(position, yaw);
        self
    }

    pub fn position(&self) -> Vec3 {
        self.t_c_w.inverse().translation.vector
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.t_c_w.transform_point(&(*world).into()).coords
    }

    /// Continuous pixel coordinates and depth of a world point, if it is in
    /// front of the camera.
    pub fn project(&self, world: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(world);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    /// World point at depth `z` along the ray through pixel coordinates `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let c = Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z);
        self.t_c_w.inverse_transform_point(&c.into()).coords
    }

    /// Back-projection of pixel `(i, j)`'s center.
    pub fn back_project_pixel(&self, i: usize, j: usize, z: f64) -> Vec3 {
        self.back_project(i as f64 + 0.5, j as f64 + 0.5, z)
    }
}

/// Row-major depth image in meters; `f32::INFINITY` marks no return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f32::INFINITY; width * height],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[j * self.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, z: f32) {
        self.data[j * self.width + i] = z;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|z| z.is_finite()).count()
    }

    /// 8-bit binary PGM, near is bright; pixels without return are black.
    pub fn write_pgm<W: Write>(&self, mut w: W, max_depth: f64) -> io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&z| {
                if z.is_finite() {
                    (255.0 * (1.0 - (z as f64 / max_depth).clamp(0.0, 1.0))).round() as u8
                } else {
                    0
                }
            })
            .collect();
        w.write_all(&bytes)
    }
}

/// A rendered agent body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereBody {
    pub id: AgentId,
    pub center: Vec3,
    pub radius: f64,
}

/// Smallest `s >= 0` with `|origin + s * dir - center| = radius`.
fn ray_sphere(origin: &Vec3, dir: &Vec3, center: &Vec3, radius: f64) -> Option<f64> {
    let oc = origin - center;
    let a = dir.norm_squared();
    let b = oc.dot(dir);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let s0 = (-b - sq) / a;
    if s0 >= 0.0 {
        return Some(s0);
    }
    let s1 = (-b + sq) / a;
    (s1 >= 0.0).then_some(s1)
}

/// Nearest raw voxel or sphere along every pixel ray, up to the camera's
/// maximum depth.
pub fn render_depth(camera: &CameraModel, grid: &OccupancyGrid, bodies: &[SphereBody]) -> DepthImage {
    let mut img = DepthImage::empty(camera.width, camera.height);
    let origin = camera.position();
    let rot = camera.t_c_w.rotation.inverse();
    let near: Vec<&SphereBody> = bodies
        .iter()
        .filter(|b| (b.center - origin).norm() <= camera.max_depth * 2.0 + b.radius)
        .collect();
    for j in 0..camera.height {
        for i in 0..camera.width {
            // Ray with unit z in camera frame: its parameter equals depth.
            let dc = Vec3::new(
                (i as f64 + 0.5 - camera.cx) / camera.fx,
                (j as f64 + 0.5 - camera.cy) / camera.fy,
                1.0,
            );
            let dw = rot * dc;
            let len = dw.norm();
            let mut best = camera.max_depth;
            let mut hit = false;
            if let Some(t) = grid.raycast(&origin, &(dw / len), camera.max_depth * len) {
                let z = t / len;
                if z <= best {
                    best = z;
                    hit = true;
                }
            }
            for b in &near {
                if let Some(z) = ray_sphere(&origin, &dw, &b.center, b.radius) {
                    if z <= best {
                        best = z;
                        hit = true;
                    }
                }
            }
            if hit {
                img.set(i, j, best as f32);
            }
        }
    }
    img
}

/// Axis-aligned ellipse in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelEllipse {
    pub cu: f64,
    pub cv: f64,
    pub au: f64,
    pub av: f64,
}

impl PixelEllipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        if self.au <= 0.0 || self.av <= 0.0 {
            return u.floor() == self.cu.floor() && v.floor() == self.cv.floor();
        }
        let x = (u - self.cu) / self.au;
        let y = (v - self.cv) / self.av;
        x * x + y * y <= 1.0
    }

    /// Pixels whose centers lie inside the ellipse, clipped to the image.
    pub fn pixels(&self, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let clip = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
            let a = (lo - 0.5).floor().max(0.0).min(n as f64) as usize;
            let b = ((hi - 0.5).ceil() + 1.0).max(0.0).min(n as f64) as usize;
            (a, b)
        };
        let (i0, i1) = clip(self.cu - self.au, self.cu + self.au, width);
        let (j0, j1) = clip(self.cv - self.av, self.cv + self.av, height);
        (j0..j1)
            .flat_map(move |j| (i0..i1).map(move |i| (i, j)))
            .filter(move |&(i, j)| self.contains(i as f64 + 0.5, j as f64 + 0.5))
    }
}

/// Conservative image of the sphere `(center, radius)`.
///
/// The exact image is a conic whose major axis points away from the
/// principal point; the returned ellipse is the circle (in normalized image
/// coordinates) with the conic's center and semi-major axis, so it contains
/// the conic. Returns `None` when the center is not in front of the camera.
pub fn project_trust_region(camera: &CameraModel, center: &Vec3, radius: f64) -> Option<PixelEllipse> {
    let c = camera.to_camera(center);
    if c.z <= 0.0 {
        return None;
    }
    let whole = PixelEllipse {
        cu: camera.cx,
        cv: camera.cy,
        au: camera.width as f64 * 2.0,
        av: camera.height as f64 * 2.0,
    };
    let dist = c.norm();
    if dist <= radius {
        return Some(whole);
    }
    let theta = (c.x.hypot(c.y)).atan2(c.z);
    let alpha = (radius / dist).asin();
    if theta + alpha >= std::f64::consts::FRAC_PI_2 {
        return Some(whole);
    }
    let r1 = (theta - alpha).tan();
    let r2 = (theta + alpha).tan();
    let mid = 0.5 * (r1 + r2);
    let semi = 0.5 * (r2 - r1);
    let radial = c.x.hypot(c.y);
    let (mx, my) = if radial > 1e-12 {
        (c.x / radial * mid, c.y / radial * mid)
    } else {
        (0.0, 0.0)
    };
    Some(PixelEllipse {
        cu: camera.fx * mx + camera.cx,
        cv: camera.fy * my + camera.cy,
        au: camera.fx * semi,
        av: camera.fy * semi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionCriteria {
    pub min_pixels: usize,
    /// Smallest cluster size as a fraction of the pixels the body should
    /// cover at its predicted position.
    pub min_coverage: f64,
    /// Largest fraction of the expected body pixels that may show something
    /// in front of the trust sphere.
    pub max_occlusion: f64,
    /// Reject bodies whose expected image is cut by the image border.
    pub require_in_frame: bool,
    /// Bound on the cluster's mean squared distance to its centroid, m².
    pub max_second_moment: f64,
    /// Largest accepted distance between the estimate and the prediction.
    pub gate: f64,
    /// Known body radius, used to move the surface centroid to the center.
    pub agent_radius: f64,
}

impl DetectionCriteria {
    pub fn for_agent(agent_radius: f64, trust_radius: f64) -> Self {
        Self {
            min_pixels: 12,
            min_coverage: 0.6,
            max_occlusion: 0.05,
            require_in_frame: true,
            max_second_moment: (1.5 * agent_radius).powi(2),
            gate: trust_radius,
            agent_radius,
        }
    }

    /// Looser criteria, used for masking.
    pub fn relaxed(&self) -> Self {
        Self {
            min_pixels: 3,
            min_coverage: 0.15,
            max_occlusion: 1.0,
            require_in_frame: false,
            max_second_moment: self.max_second_moment * 2.0,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Estimated body center.
    pub position: Vec3,
    /// First moment of the cluster.
    pub centroid: Vec3,
    pub pixel_count: usize,
    /// Pixels the body should cover at the prediction.
    pub expected_pixels: usize,
    pub second_moment: f64,
    pub ellipse: PixelEllipse,
    pub trust_center: Vec3,
    pub trust_radius: f64,
}

/// Finds the agent predicted at `predicted` inside the trust sphere of
/// radius `trust_radius`.
///
/// Pixels inside the projected trust region are back-projected and kept if
/// they land in the sphere. The cluster's first moment lies on the visible
/// surface, about two thirds of a radius in front of the center, so the
/// estimate shifts it that far along the viewing ray.
pub fn detect_agent(
    camera: &CameraModel,
    depth: &DepthImage,
    predicted: &Vec3,
    trust_radius: f64,
    criteria: &DetectionCriteria,
) -> Option<Detection> {
    let ellipse = project_trust_region(camera, predicted, trust_radius)?;
    let body = project_trust_region(camera, predicted, criteria.agent_radius)?;
    let (w, h) = (camera.width as f64, camera.height as f64);
    if criteria.require_in_frame
        && (body.cu - body.au < 0.0 || body.cu + body.au > w || body.cv - body.av < 0.0 || body.cv + body.av > h)
    {
        return None;
    }
    let origin = camera.position();
    let near = (predicted - origin).norm() - trust_radius;
    let mut expected = 0usize;
    let mut occluded = 0usize;
    for (i, j) in body.pixels(camera.width, camera.height) {
        expected += 1;
        let z = depth.get(i, j);
        if z.is_finite() && (camera.back_project_pixel(i, j, z as f64) - origin).norm() < near {
            occluded += 1;
        }
    }
    if occluded as f64 > criteria.max_occlusion * expected as f64 {
        return None;
    }
    let mut sum = Vec3::zeros();
    let mut pts = Vec::new();
    for (i, j) in ellipse.pixels(camera.width, camera.height) {
        let z = depth.get(i, j);
        if !z.is_finite() {
            continue;
        }
        let p = camera.back_project_pixel(i, j, z as f64);
        if (p - predicted).norm() <= trust_radius {
            sum += p;
            pts.push(p);
        }
    }
    if pts.is_empty() || pts.len() < criteria.min_pixels || (pts.len() as f64) < criteria.min_coverage * expected as f64 {
        return None;
    }
    let centroid = sum / pts.len() as f64;
    let second_moment = pts.iter().map(|p| (p - centroid).norm_squared()).sum::<f64>() / pts.len() as f64;
    if second_moment > criteria.max_second_moment {
        return None;
    }
    let view = centroid - origin;
    let position = if view.norm() > 1e-9 {
        centroid + view.normalize() * (2.0 / 3.0 * criteria.agent_radius)
    } else {
        centroid
    };
    if (position - predicted).norm() > criteria.gate {
        return None;
    }
    Some(Detection {
        position,
        centroid,
        pixel_count: pts.len(),
        expected_pixels: expected,
        second_moment,
        ellipse,
        trust_center: *predicted,
        trust_radius,
    })
}

/// Relative drift of one remote agent as seen by the owner.
///
/// `offset` is where the remote appears minus where its trajectory says it
/// is; remote trajectories are corrected by adding it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEstimate {
    pub remote: AgentId,
    pub offset: Vec3,
    pub confidence: u32,
    pub last_update: f64,
}

impl DriftEstimate {
    pub fn new(remote: AgentId) -> Self {
        Self {
            remote,
            offset: Vec3::zeros(),
            confidence: 0,
            last_update: f64::NEG_INFINITY,
        }
    }
}

/// Low-pass update with innovation `observed - predicted`; innovations
/// longer than `gate` leave the estimate unchanged.
pub fn update_drift(
    estimate: &DriftEstimate,
    predicted: &Vec3,
    observed: &Vec3,
    alpha: f64,
    gate: f64,
    clock: f64,
) -> DriftEstimate {
    let innovation = observed - predicted;
    if innovation.norm() > gate {
        return *estimate;
    }
    DriftEstimate {
        remote: estimate.remote,
        offset: estimate.offset * (1.0 - alpha) + innovation * alpha,
        confidence: estimate.confidence + 1,
        last_update: clock,
    }
}

/// Clears pixels of detected agents: those whose back-projection falls in a
/// detection's trust sphere, or in the sphere of the same radius around the
/// detected center.
pub fn mask_agents(camera: &CameraModel, depth: &DepthImage, detections: &[Detection]) -> DepthImage {
    let mut out = depth.clone();
    for d in detections {
        let around = project_trust_region(camera, &d.position, d.trust_radius);
        for region in std::iter::once(d.ellipse).chain(around) {
            for (i, j) in region.pixels(camera.width, camera.height) {
                let z = out.get(i, j);
                if !z.is_finite() {
                    continue;
                }
                let p = camera.back_project_pixel(i, j, z as f64);
                if (p - d.trust_center).norm() <= d.trust_radius || (p - d.position).norm() <= d.trust_radius {
                    out.set(i, j, f32::INFINITY);
                }
            }
        }
    }
    out
}

/// Inserts every valid pixel into `grid` as an obstacle surface point.
/// Returns the number of newly occupied voxels.
///
/// Points are pushed 1 mm along their ray so a return from a voxel face lands
/// in the voxel that was hit rather than the free one in front of it.
pub fn fuse_depth(grid: &mut OccupancyGrid, camera: &CameraModel, depth: &DepthImage) -> usize {
    const PUSH: f64 = 1e-3;
    let origin = camera.position();
    let mut added = 0;
    for j in 0..depth.height {
        for i in 0..depth.width {
            let z = depth.get(i, j);
            if z.is_finite() && (z as f64) <= camera.max_depth {
                let p = camera.back_project_pixel(i, j, z as f64);
                let ray = p - origin;
                let p = p + ray * (PUSH / ray.norm().max(1e-9));
                if grid.set_occupied(&p) {
                    added += 1;
                }
            }
        }
    }
    added
}
