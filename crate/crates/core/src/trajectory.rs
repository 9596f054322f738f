//! Uniform B-spline trajectories.
//!
//! A trajectory of degree `p` with control points `Q_0..Q_n` and knot interval
//! `dt` is evaluable on `[start, start + (n + 1 - p) * dt]`. Each knot span is
//! evaluated with the matrix form `s(u)^T M q`, where `s(u) = [1, u, .., u^p]`,
//! `u` is the normalized time inside the span and `q` holds the `p + 1`
//! control points that influence it.

use nalgebra::Vector3;
use thiserror::Error;

/// 3-D point or vector, meters (or derived units for derivative splines).
pub type Vec3 = Vector3<f64>;

/// Default spline degree.
pub const DEFAULT_DEGREE: usize = 3;

/// Relative slack accepted when checking that a time is inside the domain.
const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("degree {degree} needs at least {needed} control points, got {got}")]
    TooFewControlPoints {
        degree: usize,
        needed: usize,
        got: usize,
    },
    #[error("knot interval must be positive and finite, got {0}")]
    BadKnotInterval(f64),
    #[error("degree must be at least 1 for this operation")]
    ZeroDegree,
    #[error("time {t} is outside the trajectory domain [{start}, {end}]")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("non-finite control point at index {0}")]
    NonFinite(usize),
}

/// Uniform B-spline trajectory in 3-D.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineTrajectory {
    degree: usize,
    control_points: Vec<Vec3>,
    knot_interval: f64,
    start_time: f64,
    /// Row-major `(degree + 1) x (degree + 1)` basis matrix.
    basis: Vec<f64>,
}

impl BSplineTrajectory {
    pub fn new(
        degree: usize,
        control_points: Vec<Vec3>,
        knot_interval: f64,
        start_time: f64,
    ) -> Result<Self, TrajectoryError> {
        if control_points.len() < degree + 1 {
            return Err(TrajectoryError::TooFewControlPoints {
                degree,
                needed: degree + 1,
                got: control_points.len(),
            });
        }
        if !(knot_interval > 0.0 && knot_interval.is_finite()) {
            return Err(TrajectoryError::BadKnotInterval(knot_interval));
        }
        if let Some(i) = control_points
            .iter()
            .position(|q| !q.iter().all(|c| c.is_finite()))
        {
            return Err(TrajectoryError::NonFinite(i));
        }
        Ok(Self {
            degree,
            control_points,
            knot_interval,
            start_time,
            basis: basis_matrix(degree),
        })
    }

    /// Trajectory that holds `point` for `duration` seconds.
    pub fn hover(
        point: Vec3,
        degree: usize,
        knot_interval: f64,
        start_time: f64,
        segments: usize,
    ) -> Result<Self, TrajectoryError> {
        Self::new(
            degree,
            vec![point; segments.max(1) + degree],
            knot_interval,
            start_time,
        )
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control_points
    }

    pub fn into_control_points(self) -> Vec<Vec3> {
        self.control_points
    }

    pub fn knot_interval(&self) -> f64 {
        self.knot_interval
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    /// Number of knot spans in the evaluable domain.
    pub fn segment_count(&self) -> usize {
        self.control_points.len() - self.degree
    }

    pub fn duration(&self) -> f64 {
        self.segment_count() as f64 * self.knot_interval
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.duration()
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.start_time, self.end_time())
    }

    pub fn contains_time(&self, t: f64) -> bool {
        let slack = DOMAIN_SLACK * (1.0 + self.duration());
        t >= self.start_time - slack && t <= self.end_time() + slack
    }

    /// Same control points, shifted in time.
    pub fn with_start_time(mut self, start_time: f64) -> Self {
        self.start_time = start_time;
        self
    }

    /// Copy with every control point translated by `offset`.
    pub fn translated(&self, offset: &Vec3) -> Self {
        let mut out = self.clone();
        for q in &mut out.control_points {
            *q += offset;
        }
        out
    }

    /// Replaces the control points, keeping degree and timing.
    pub fn with_control_points(&self, control_points: Vec<Vec3>) -> Result<Self, TrajectoryError> {
        Self::new(
            self.degree,
            control_points,
            self.knot_interval,
            self.start_time,
        )
    }

    /// Span index and normalized span parameter for a time inside the domain.
    fn locate(&self, t: f64) -> (usize, f64) {
        let x = ((t - self.start_time) / self.knot_interval).max(0.0);
        let last = self.segment_count() - 1;
        let span = (x.floor() as usize).min(last);
        let u = (x - span as f64).clamp(0.0, 1.0);
        (span, u)
    }

    fn check_domain(&self, t: f64) -> Result<(), TrajectoryError> {
        if self.contains_time(t) {
            Ok(())
        } else {
            Err(TrajectoryError::OutOfDomain {
                t,
                start: self.start_time,
                end: self.end_time(),
            })
        }
    }

    /// Blending weights of the `degree + 1` control points active at `t`.
    ///
    /// Returns the index of the first active control point; the position at
    /// `t` is `sum_j w[j] * Q[first + j]`.
    pub fn basis_weights(&self, t: f64) -> Result<(usize, Vec<f64>), TrajectoryError> {
        self.check_domain(t)?;
        Ok(self.basis_weights_clamped(t))
    }

    /// Like [`basis_weights`](Self::basis_weights) but clamps `t` into the domain.
    pub fn basis_weights_clamped(&self, t: f64) -> (usize, Vec<f64>) {
        let (span, u) = self.locate(t.clamp(self.start_time, self.end_time()));
        let k = self.degree + 1;
        let mut weights = vec![0.0; k];
        let mut power = 1.0;
        for row in 0..k {
            for (col, w) in weights.iter_mut().enumerate() {
                *w += power * self.basis[row * k + col];
            }
            power *= u;
        }
        (span, weights)
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec3, TrajectoryError> {
        self.check_domain(t)?;
        Ok(self.evaluate_clamped(t))
    }

    /// Evaluates with `t` clamped into the domain; outside it the trajectory
    /// holds its first or last point.
    pub fn evaluate_clamped(&self, t: f64) -> Vec3 {
        let (first, weights) = self.basis_weights_clamped(t);
        weights
            .iter()
            .zip(&self.control_points[first..])
            .fold(Vec3::zeros(), |acc, (w, q)| acc + q * *w)
    }

    /// Time-derivative spline of degree `p - 1`.
    ///
    /// For uniform knots the derivative control points are
    /// `p (Q_{i+1} - Q_i) / (p dt) = (Q_{i+1} - Q_i) / dt`; the derivative
    /// shares the domain of the original.
    pub fn derivative(&self) -> Result<Self, TrajectoryError> {
        if self.degree == 0 {
            return Err(TrajectoryError::ZeroDegree);
        }
        let pts = self
            .control_points
            .windows(2)
            .map(|w| (w[1] - w[0]) / self.knot_interval)
            .collect();
        Self::new(self.degree - 1, pts, self.knot_interval, self.start_time)
    }

    /// Uniform time samples `(t, position)` with spacing at most `max_step`,
    /// including both domain endpoints.
    pub fn sample(&self, from: f64, to: f64, max_step: f64) -> Vec<(f64, Vec3)> {
        let from = from.max(self.start_time);
        let to = to.min(self.end_time());
        if to < from {
            return Vec::new();
        }
        let n = ((to - from) / max_step.max(1e-6)).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| {
                let t = from + (to - from) * i as f64 / n as f64;
                (t, self.evaluate_clamped(t))
            })
            .collect()
    }

    /// Upper bound on speed from the velocity control points (convex hull).
    pub fn max_control_speed(&self) -> f64 {
        self.control_points
            .windows(2)
            .map(|w| (w[1] - w[0]).norm() / self.knot_interval)
            .fold(0.0, f64::max)
    }

    /// Length of the curve, integrated by dense sampling.
    pub fn arc_length(&self, samples: usize) -> f64 {
        let pts = self.sample(self.start_time, self.end_time(), self.duration() / samples.max(1) as f64);
        pts.windows(2).map(|w| (w[1].1 - w[0].1).norm()).sum()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// Basis matrix of a uniform B-spline of the given degree, row-major.
///
/// Row `i` multiplies `u^i`, column `j` the `j`-th active control point:
/// `m[i][j] = C(p, i) / p! * sum_{s=j}^{p} (-1)^(s-j) C(p+1, s-j) (p-s)^(p-i)`.
pub fn basis_matrix(degree: usize) -> Vec<f64> {
    let k = degree + 1;
    let mut m = vec![0.0; k * k];
    let scale = 1.0 / factorial(degree);
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for s in j..k {
                let sign = if (s - j) % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * binomial(k, s - j) * ((degree - s) as f64).powi((degree - i) as i32);
            }
            m[i * k + j] = scale * binomial(degree, i) * acc;
        }
    }
    m
}
