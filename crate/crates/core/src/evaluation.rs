//! KITTI odometry metrics: relative translational and rotational error over
//! path segments of 100–800 m.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Chains relative motions: `n` relatives give `n + 1` absolute poses
/// starting at the identity.
pub fn accumulate(relatives: &[Pose]) -> Vec<Pose> {
    let mut out = Vec::with_capacity(relatives.len() + 1);
    out.push(Pose::identity());
    for r in relatives {
        let next = out.last().unwrap().compose(r);
        out.push(next);
    }
    out
}

/// Inverse of [`accumulate`]: `absolute[i]⁻¹ · absolute[i + 1]`.
pub fn relatives(absolute: &[Pose]) -> Vec<Pose> {
    absolute.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub lengths: Vec<f64>,
    /// Distance in frames between segment start points.
    pub stride: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            lengths: SEGMENT_LENGTHS.to_vec(),
            stride: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthError {
    pub length: f64,
    pub segments: usize,
    /// Mean translational error, percent.
    pub t_err: f64,
    /// Mean rotational error, degrees per 100 m.
    pub r_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentErrorReport {
    pub per_length: Vec<LengthError>,
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
    pub segments: usize,
    /// Set when the trajectory is too short for any segment.
    pub too_short: bool,
}

/// Cumulative ground-truth path length at each frame.
pub fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut d = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - poses[i - 1].translation).norm();
        }
        d.push(acc);
    }
    d
}

pub fn kitti_relative_errors(est: &[Pose], gt: &[Pose], opts: &EvalOptions) -> Result<SegmentErrorReport> {
    if est.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "trajectories differ in length: {} estimated, {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    if opts.stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let dist = path_distances(gt);
    let mut per_length = Vec::with_capacity(opts.lengths.len());
    for &len in &opts.lengths {
        let (mut t_sum, mut r_sum, mut count) = (0.0, 0.0, 0usize);
        for first in (0..gt.len()).step_by(opts.stride) {
            let target = dist[first] + len;
            let last = first + dist[first..].partition_point(|&d| d < target);
            if last >= gt.len() {
                continue;
            }
            let gt_delta = gt[first].inverse().compose(&gt[last]);
            let est_delta = est[first].inverse().compose(&est[last]);
            let e = gt_delta.inverse().compose(&est_delta);
            t_sum += e.translation.norm() / len;
            r_sum += e.angle() / len;
            count += 1;
        }
        if count > 0 {
            per_length.push(LengthError {
                length: len,
                segments: count,
                t_err: 100.0 * t_sum / count as f64,
                r_err: 100.0 * (r_sum / count as f64).to_degrees(),
            });
        }
    }
    let segments = per_length.iter().map(|l| l.segments).sum();
    let mean = |f: fn(&LengthError) -> f64| {
        if per_length.is_empty() {
            0.0
        } else {
            per_length.iter().map(f).sum::<f64>() / per_length.len() as f64
        }
    };
    Ok(SegmentErrorReport {
        t_rel: mean(|l| l.t_err),
        r_rel: mean(|l| l.r_err),
        too_short: per_length.is_empty(),
        segments,
        per_length,
    })
}

impl SegmentErrorReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("length_m,segments,t_err_percent,r_err_deg_per_100m\n");
        for l in &self.per_length {
            writeln!(s, "{},{},{},{}", l.length, l.segments, l.t_err, l.r_err).unwrap();
        }
        writeln!(s, "all,{},{},{}", self.segments, self.t_rel, self.r_rel).unwrap();
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>8} {:>9} {:>10} {:>14}\n", "length", "segments", "t_rel %", "r_rel deg/100m");
        for l in &self.per_length {
            writeln!(s, "{:>8} {:>9} {:>10.4} {:>14.4}", l.length, l.segments, l.t_err, l.r_err).unwrap();
        }
        writeln!(s, "{:>8} {:>9} {:>10.4} {:>14.4}", "all", self.segments, self.t_rel, self.r_rel).unwrap();
        if self.too_short {
            s.push_str("trajectory shorter than the smallest segment length; no segments evaluated\n");
        }
        s
    }
}

/// `frame,x,y,z` rows of absolute positions.
pub fn trajectory_csv(poses: &[Pose]) -> String {
    let mut s = String::from("frame,x,y,z\n");
    for (i, p) in poses.iter().enumerate() {
        let t = p.translation;
        writeln!(s, "{i},{},{},{}", t.x, t.y, t.z).unwrap();
    }
    s
}
