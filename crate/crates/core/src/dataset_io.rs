//! KITTI-format readers and writers: velodyne scans, OXTS inertial records,
//! timestamps, calibration and pose files, plus IMU windowing.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{Mat4, Pose, Vec3};
use crate::nn::Tensor;
use crate::preprocess::PreprocessedCloud;

/// Default OXTS rate when no timestamp file is present.
pub const OXTS_RATE_HZ: f64 = 100.0;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A velodyne scan: `x, y, z, reflectance` per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScanRecord {
    pub points: Vec<[f32; 4]>,
}

impl ScanRecord {
    pub fn from_cloud(cloud: &PointCloud) -> Self {
        Self {
            points: cloud
                .points
                .iter()
                .map(|p| [p.x as f32, p.y as f32, p.z as f32, 0.0])
                .collect(),
        }
    }

    pub fn to_cloud(&self) -> PointCloud {
        self.points
            .iter()
            .map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.points
            .iter()
            .flat_map(|p| p.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() % 16 != 0 {
            return Err(Error::format(
                path,
                format!("byte {}", bytes.len() - bytes.len() % 16),
                format!("length {} is not a multiple of 16", bytes.len()),
            ));
        }
        let points: Vec<[f32; 4]> = bytes
            .chunks_exact(16)
            .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
            .collect();
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::format(path, format!("byte {}", 16 * i), "non-finite value"));
        }
        Ok(Self { points })
    }
}

pub fn read_velodyne_bin(path: &Path) -> Result<ScanRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ScanRecord::from_bytes(&bytes, path)
}

pub fn write_velodyne_bin(path: &Path, scan: &ScanRecord) -> Result<()> {
    write_atomic(path, &scan.to_bytes())
}

/// Leading bytes of a cached preprocessed cloud.
pub const CLOUD_MAGIC: &[u8; 8] = b"LIOPREP\0";

/// Serializes points and normals: magic, `u64` count, then
/// `x y z nx ny nz` as little-endian `f64` per point.
pub fn preprocessed_to_bytes(cloud: &PreprocessedCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + cloud.len() * 48);
    out.extend_from_slice(CLOUD_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for (p, n) in cloud.points.iter().zip(&cloud.normals) {
        for v in p.iter().chain(n.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn preprocessed_from_bytes(bytes: &[u8], path: &Path) -> Result<PreprocessedCloud> {
    if bytes.len() < 16 || &bytes[..8] != CLOUD_MAGIC {
        return Err(Error::format(path, "byte 0", "not a preprocessed cloud"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if n.checked_mul(48) != Some(body.len()) {
        return Err(Error::format(
            path,
            "byte 8",
            format!("count {n} does not match {} payload bytes", body.len()),
        ));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (points, normals) = vals
        .chunks_exact(6)
        .map(|c| (Vec3::new(c[0], c[1], c[2]), Vec3::new(c[3], c[4], c[5])))
        .unzip();
    Ok(PreprocessedCloud::new(points, normals))
}

pub fn read_preprocessed(path: &Path) -> Result<PreprocessedCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    preprocessed_from_bytes(&bytes, path)
}

/// Written through a temporary file and renamed, so readers never see a
/// partial cache entry.
pub fn write_preprocessed(path: &Path, cloud: &PreprocessedCloud) -> Result<()> {
    write_atomic(path, &preprocessed_to_bytes(cloud))
}

/// Sorted `*.bin` files in `dir`.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    out.sort();
    Ok(out)
}

/// One inertial sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuRecord {
    /// Seconds.
    pub timestamp: f64,
    /// Linear acceleration, m/s².
    pub accel: Vec3,
    /// Angular velocity, rad/s.
    pub gyro: Vec3,
}

pub const OXTS_MIN_FIELDS: usize = 23;
const ACCEL_FIELDS: [usize; 3] = [11, 12, 13];
const GYRO_FIELDS: [usize; 3] = [17, 18, 19];

/// Parses one OXTS line into `(accel, gyro)`.
pub fn parse_oxts_line(line: &str, path: &Path, line_no: usize) -> Result<(Vec3, Vec3)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < OXTS_MIN_FIELDS {
        return Err(Error::format(
            path,
            format!("line {line_no}"),
            format!("{} fields, need at least {OXTS_MIN_FIELDS}", fields.len()),
        ));
    }
    let get = |i: usize| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::format(path, format!("line {line_no}"), format!("field {i} is not a finite number")))
    };
    let a = ACCEL_FIELDS.map(get);
    let g = GYRO_FIELDS.map(get);
    let [ax, ay, az] = a;
    let [wx, wy, wz] = g;
    Ok((Vec3::new(ax?, ay?, az?), Vec3::new(wx?, wy?, wz?)))
}

/// Parses a timestamp line: either `YYYY-MM-DD HH:MM:SS[.fff]` or seconds.
pub fn parse_timestamp(line: &str, path: &Path, line_no: usize) -> Result<f64> {
    let s = line.trim();
    if let Ok(v) = s.parse::<f64>() {
        if v.is_finite() {
            return Ok(v);
        }
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f")
        .map(|t| {
            let utc = t.and_utc();
            utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9
        })
        .map_err(|_| Error::format(path, format!("line {line_no}"), format!("unrecognized timestamp {s:?}")))
}

pub fn read_timestamps(path: &Path) -> Result<Vec<f64>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_timestamp(l, path, i + 1))
        .collect()
}

/// Reads OXTS records from a file of lines or from a KITTI raw `oxts`
/// directory (`data/*.txt` plus optional `timestamps.txt`). Without
/// timestamps, records are spaced at [`OXTS_RATE_HZ`] from zero.
pub fn read_oxts(path: &Path) -> Result<Vec<ImuRecord>> {
    let mut samples = Vec::new();
    let stamps_path;
    if path.is_dir() {
        let data = if path.join("data").is_dir() { path.join("data") } else { path.to_path_buf() };
        let mut files: Vec<PathBuf> = fs::read_dir(&data)
            .map_err(|e| Error::io(&data, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt") && p.file_name().is_some_and(|n| n != "timestamps.txt"))
            .collect();
        files.sort();
        for f in &files {
            for (i, line) in read_text(f)?.lines().enumerate() {
                if !line.trim().is_empty() {
                    samples.push(parse_oxts_line(line, f, i + 1)?);
                }
            }
        }
        stamps_path = Some(path.join("timestamps.txt")).filter(|p| p.is_file());
    } else {
        for (i, line) in read_text(path)?.lines().enumerate() {
            if !line.trim().is_empty() {
                samples.push(parse_oxts_line(line, path, i + 1)?);
            }
        }
        stamps_path = None;
    }
    let stamps = match stamps_path {
        Some(p) => {
            let s = read_timestamps(&p)?;
            if s.len() != samples.len() {
                return Err(Error::format(
                    &p,
                    "end of file",
                    format!("{} timestamps for {} records", s.len(), samples.len()),
                ));
            }
            s
        }
        None => (0..samples.len()).map(|i| i as f64 / OXTS_RATE_HZ).collect(),
    };
    Ok(samples
        .into_iter()
        .zip(stamps)
        .map(|((accel, gyro), timestamp)| ImuRecord { timestamp, accel, gyro })
        .collect())
}

/// Writes records as a KITTI raw `oxts` directory with 30 fields per line;
/// only acceleration and angular-velocity fields are non-zero.
pub fn write_oxts_dir(dir: &Path, records: &[ImuRecord]) -> Result<()> {
    let data = dir.join("data");
    fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    let mut stamps = String::new();
    for (i, r) in records.iter().enumerate() {
        let mut fields = [0.0f64; 30];
        for k in 0..3 {
            fields[ACCEL_FIELDS[k]] = r.accel[k];
            fields[GYRO_FIELDS[k]] = r.gyro[k];
        }
        let line = fields.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ") + "\n";
        write_atomic(&data.join(format!("{i:010}.txt")), line.as_bytes())?;
        stamps.push_str(&format!("{}\n", r.timestamp));
    }
    write_atomic(&dir.join("timestamps.txt"), stamps.as_bytes())
}

/// Exactly `S` inertial rows for one scan pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuWindow {
    /// `[ax, ay, az, wx, wy, wz]` per row.
    pub rows: Vec<[f64; 6]>,
    pub timestamps: Vec<f64>,
}

impl ImuWindow {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[S, 3]` acceleration columns.
    pub fn accel(&self) -> Tensor {
        Tensor::from_vec(&[self.len(), 3], self.rows.iter().flat_map(|r| r[..3].to_vec()).collect()).unwrap()
    }

    /// `[S, 3]` angular-velocity columns.
    pub fn gyro(&self) -> Tensor {
        Tensor::from_vec(&[self.len(), 3], self.rows.iter().flat_map(|r| r[3..].to_vec()).collect()).unwrap()
    }

    pub fn from_records(records: &[ImuRecord]) -> Self {
        Self {
            rows: records
                .iter()
                .map(|r| [r.accel.x, r.accel.y, r.accel.z, r.gyro.x, r.gyro.y, r.gyro.z])
                .collect(),
            timestamps: records.iter().map(|r| r.timestamp).collect(),
        }
    }

    /// Resamples to exactly `s` rows: index subsampling `⌊i·n/s⌋` when there
    /// are more rows, linear interpolation at `i·(n−1)/(s−1)` when fewer.
    pub fn resampled(&self, s: usize) -> Result<Self> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("IMU window"));
        }
        if s == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        if n == s {
            return Ok(self.clone());
        }
        if n > s {
            let idx: Vec<usize> = (0..s).map(|i| i * n / s).collect();
            return Ok(Self {
                rows: idx.iter().map(|&i| self.rows[i]).collect(),
                timestamps: idx.iter().map(|&i| self.timestamps[i]).collect(),
            });
        }
        let mut rows = Vec::with_capacity(s);
        let mut timestamps = Vec::with_capacity(s);
        for i in 0..s {
            let u = if s == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (s - 1) as f64 };
            let lo = (u.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let f = u - lo as f64;
            rows.push(std::array::from_fn(|k| self.rows[lo][k] * (1.0 - f) + self.rows[hi][k] * f));
            timestamps.push(self.timestamps[lo] * (1.0 - f) + self.timestamps[hi] * f);
        }
        Ok(Self { rows, timestamps })
    }
}

/// One window per consecutive scan pair, from records with timestamps in
/// `(t_k, t_{k+1}]`. Records must be sorted by time.
pub fn window_imu(records: &[ImuRecord], scan_times: &[f64], s: usize) -> Result<Vec<ImuWindow>> {
    if records.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::InvalidArgument("IMU records are not in chronological order".into()));
    }
    scan_times
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let start = records.partition_point(|r| r.timestamp <= w[0]);
            let end = records.partition_point(|r| r.timestamp <= w[1]);
            if start >= end {
                return Err(Error::InvalidArgument(format!(
                    "no IMU records between scans {k} and {} ({}, {}]",
                    k + 1,
                    w[0],
                    w[1]
                )));
            }
            ImuWindow::from_records(&records[start..end]).resampled(s)
        })
        .collect()
}

fn matrix_from_fields(vals: &[f64]) -> Mat4 {
    let mut m = Mat4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = vals[4 * r + c];
        }
    }
    m
}

fn parse_reals(s: &str, path: &Path, line_no: usize, count: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::format(path, format!("line {line_no}"), "expected finite real numbers"))?;
    if vals.len() != count {
        return Err(Error::format(
            path,
            format!("line {line_no}"),
            format!("{} fields, expected {count}", vals.len()),
        ));
    }
    Ok(vals)
}

pub fn parse_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Ok(Pose::from_matrix(&matrix_from_fields(&parse_reals(l, path, i + 1, 12)?))))
        .collect()
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    parse_poses(&read_text(path)?, path)
}

/// One line per pose: the upper 3×4 of the matrix, row-major, shortest
/// round-trip decimal form.
pub fn format_poses(poses: &[Pose]) -> String {
    let mut out = String::new();
    for p in poses {
        let m = p.matrix();
        let fields: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| {
                let v = m[(r, c)];
                // Avoid printing "-0".
                format!("{}", if v == 0.0 { 0.0 } else { v })
            })
            .collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    write_atomic(path, format_poses(poses).as_bytes())
}

/// Reads the `Tr:` entry of a KITTI odometry calibration file.
pub fn read_calibration(path: &Path) -> Result<Pose> {
    for (i, line) in read_text(path)?.lines().enumerate() {
        if let Some(rest) = line.trim().strip_prefix("Tr:") {
            return Ok(Pose::from_matrix(&matrix_from_fields(&parse_reals(rest, path, i + 1, 12)?)));
        }
    }
    Err(Error::format(path, "end of file", "no Tr: entry"))
}

/// Expresses lidar-frame poses in the camera frame: `Tr · T · Tr⁻¹`.
pub fn lidar_to_camera(poses: &[Pose], tr: &Pose) -> Vec<Pose> {
    let inv = tr.inverse();
    poses.iter().map(|p| tr.compose(p).compose(&inv)).collect()
}
