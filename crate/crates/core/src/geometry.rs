//! Camera model and LiDAR-to-image projection.
//!
//! Intrinsics are kept as `(fx, fy, cx, cy)` and the extrinsic as a full
//! 4x4 rigid transform from the LiDAR frame to the camera frame
//! (x right, y down, z forward). A camera-frame point `(x, y, z)` with
//! `z > 0` lands on pixel `(floor(fx*x/z + cx), floor(fy*y/z + cy))`, where
//! pixel `(u, v)` covers `[u, u+1) x [v, v+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROTATION_TOL: f64 = 1e-6;

/// Pinhole intrinsics plus a LiDAR-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibFile", into = "CalibFile")]
pub struct CameraCalib {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major 4x4, LiDAR homogeneous point to camera frame.
    pub extrinsic: [[f64; 4]; 4],
    pub width: u32,
    pub height: u32,
}

/// On-disk calibration layout: extrinsic flattened row-major.
#[derive(Serialize, Deserialize)]
struct CalibFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    extrinsic: Vec<f64>,
}

impl TryFrom<CalibFile> for CameraCalib {
    type Error = Error;

    fn try_from(f: CalibFile) -> Result<Self> {
        if f.extrinsic.len() != 16 {
            return Err(Error::config(format!(
                "extrinsic: expected 16 numbers, got {}",
                f.extrinsic.len()
            )));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, v) in f.extrinsic.iter().enumerate() {
            m[i / 4][i % 4] = *v;
        }
        CameraCalib::new(f.fx, f.fy, f.cx, f.cy, m, f.width, f.height)
    }
}

impl From<CameraCalib> for CalibFile {
    fn from(c: CameraCalib) -> Self {
        CalibFile {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            extrinsic: c.extrinsic.iter().flatten().copied().collect(),
        }
    }
}

impl CameraCalib {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        extrinsic: [[f64; 4]; 4],
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let calib = CameraCalib {
            fx,
            fy,
            cx,
            cy,
            extrinsic,
            width,
            height,
        };
        calib.validate()?;
        Ok(calib)
    }

    /// Camera at `origin` (LiDAR frame) looking along LiDAR +x, with LiDAR
    /// +z up and +y left.
    pub fn forward_looking(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        origin: [f64; 3],
    ) -> Result<Self> {
        // camera x = -lidar y, camera y = -lidar z, camera z = lidar x
        let r = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = -(r[i][0] * origin[0] + r[i][1] * origin[1] + r[i][2] * origin[2]);
        }
        m[3][3] = 1.0;
        CameraCalib::new(fx, fy, cx, cy, m, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.extrinsic.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("calibration contains non-finite values"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::config("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be at least 1x1"));
        }
        let m = &self.extrinsic;
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::config("extrinsic bottom row must be (0, 0, 0, 1)"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() >= ROTATION_TOL {
                    return Err(Error::config("extrinsic rotation is not orthonormal"));
                }
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det <= 0.0 {
            return Err(Error::config(
                "extrinsic rotation has non-positive determinant",
            ));
        }
        Ok(())
    }

    /// Applies the extrinsic to a single LiDAR-frame point.
    #[inline]
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.extrinsic;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Projects one camera-frame point. `None` if behind the camera or off
    /// the image.
    #[inline]
    pub fn pixel_of(&self, cam: [f64; 3]) -> Option<(u32, u32)> {
        let [x, y, z] = cam;
        if z <= 0.0 {
            return None;
        }
        let u = (self.fx * x / z + self.cx).floor();
        let v = (self.fy * y / z + self.cy).floor();
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }
}

/// N points in the LiDAR frame with optional reflectance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f32; 3]>,
    pub intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f32; 3]>) -> Self {
        PointCloud {
            xyz,
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.xyz[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    /// Fails on the first non-finite coordinate, naming its index.
    pub fn check_finite(&self) -> Result<()> {
        match self
            .xyz
            .iter()
            .position(|p| !p.iter().all(|c| c.is_finite()))
        {
            Some(i) => Err(Error::data(format!(
                "point {i} has a non-finite coordinate"
            ))),
            None => Ok(()),
        }
    }
}

/// Projection result for a single point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelProjection {
    pub valid: bool,
    pub u: u32,
    pub v: u32,
    /// Camera-frame z in meters.
    pub depth: f64,
}

pub fn transform_to_camera(points: &PointCloud, calib: &CameraCalib) -> Result<Vec<[f64; 3]>> {
    points.check_finite()?;
    Ok((0..points.len())
        .map(|i| calib.to_camera(points.point(i)))
        .collect())
}

pub fn project(points: &PointCloud, calib: &CameraCalib) -> Result<Vec<PixelProjection>> {
    let cam = transform_to_camera(points, calib)?;
    Ok(cam
        .into_iter()
        .map(|c| match calib.pixel_of(c) {
            Some((u, v)) => PixelProjection {
                valid: true,
                u,
                v,
                depth: c[2],
            },
            None => PixelProjection {
                valid: false,
                u: 0,
                v: 0,
                depth: c[2],
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: [[f64; 4]; 4] = [
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];

    fn calib(f: f64, c: f64, extrinsic: [[f64; 4]; 4]) -> CameraCalib {
        CameraCalib::new(f, f, c, c, extrinsic, 200, 200).unwrap()
    }

    #[test]
    fn identity_transform() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]]);
        let out = transform_to_camera(&pc, &calib(1.0, 0.0, IDENTITY)).unwrap();
        assert_eq!(out, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn translation_only() {
        let mut m = IDENTITY;
        m[2][3] = 5.0;
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let out = transform_to_camera(&pc, &calib(1.0, 0.0, m)).unwrap();
        assert_eq!(out, vec![[0.0, 0.0, 5.0]]);
    }

    #[test]
    fn yaw_quarter_turn() {
        let (s, c) = std::f64::consts::FRAC_PI_2.sin_cos();
        let m = [
            [c, -s, 0.0, 0.0],
            [s, c, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let pc = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        let out = transform_to_camera(&pc, &calib(1.0, 0.0, m)).unwrap();
        // frozen from an independent 4x4 matrix-multiply script
        let expect = [6.123233995736766e-17, 1.0, 0.0];
        for k in 0..3 {
            assert!((out[0][k] - expect[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_point_is_named() {
        let pc = PointCloud::new(vec![[0.0; 3], [f32::NAN, 0.0, 0.0]]);
        let err = transform_to_camera(&pc, &calib(1.0, 0.0, IDENTITY)).unwrap_err();
        assert!(err.to_string().contains("point 1"), "{err}");
    }

    #[test]
    fn optical_axis_hits_origin_pixel() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 1.0]]);
        let p = project(&pc, &calib(1.0, 0.0, IDENTITY)).unwrap()[0];
        assert!(p.valid);
        assert_eq!((p.u, p.v, p.depth), (0, 0, 1.0));
    }

    #[test]
    fn off_axis_pixel() {
        let pc = PointCloud::new(vec![[1.0, 0.0, 2.0]]);
        let p = project(&pc, &calib(100.0, 50.0, IDENTITY)).unwrap()[0];
        assert!(p.valid);
        assert_eq!((p.u, p.v, p.depth), (100, 50, 2.0));
    }

    #[test]
    fn behind_camera_is_invalid() {
        let pc = PointCloud::new(vec![[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]);
        let p = project(&pc, &calib(1.0, 0.0, IDENTITY)).unwrap();
        assert!(!p[0].valid && !p[1].valid);
    }

    #[test]
    fn rejects_bad_calibration() {
        assert!(CameraCalib::new(0.0, 1.0, 0.0, 0.0, IDENTITY, 10, 10).is_err());
        assert!(CameraCalib::new(1.0, 1.0, 0.0, 0.0, IDENTITY, 0, 10).is_err());
        let mut mirror = IDENTITY;
        mirror[0][0] = -1.0;
        assert!(CameraCalib::new(1.0, 1.0, 0.0, 0.0, mirror, 10, 10).is_err());
        let mut sheared = IDENTITY;
        sheared[0][1] = 0.1;
        assert!(CameraCalib::new(1.0, 1.0, 0.0, 0.0, sheared, 10, 10).is_err());
    }

    #[test]
    fn forward_looking_sees_ahead() {
        let c = CameraCalib::forward_looking(100.0, 100.0, 50.0, 50.0, 100, 100, [0.0, 0.0, 1.5])
            .unwrap();
        let cam = c.to_camera([10.0, 0.0, 1.5]);
        assert!((cam[0]).abs() < 1e-12 && (cam[1]).abs() < 1e-12);
        assert!((cam[2] - 10.0).abs() < 1e-12);
        // a point to the left lands left of center
        let (u, _) = c.pixel_of(c.to_camera([10.0, 2.0, 1.5])).unwrap();
        assert!(u < 50);
    }

    #[test]
    fn calib_json_round_trip() {
        let c = CameraCalib::forward_looking(100.0, 90.0, 50.0, 40.0, 100, 80, [0.0, 0.0, 1.5])
            .unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"extrinsic\":["));
        let back: CameraCalib = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let bad = text.replace("\"fx\":100.0", "\"fx\":-1.0");
        assert!(serde_json::from_str::<CameraCalib>(&bad).is_err());
    }
}
