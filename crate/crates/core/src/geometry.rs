//! Pixel-to-world coordinate lifting, sinusoidal 3D encoding and frame sampling.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3, Vector4};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{ops, Tensor};

/// One camera view: depth map `D`, intrinsics `K` and extrinsics `B`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    depth: Tensor,
    intrinsics: Matrix3<f64>,
    extrinsics: Matrix4<f64>,
}

#[derive(Serialize, Deserialize)]
struct DepthJson {
    dims: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    depth: DepthJson,
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
}

impl CameraFrame {
    /// `depth` is `H×W`; `intrinsics` and `extrinsics` are row-major.
    pub fn new(
        depth: Tensor,
        intrinsics: [[f64; 3]; 3],
        extrinsics: [[f64; 4]; 4],
    ) -> Result<Self> {
        let k = Matrix3::from_fn(|r, c| intrinsics[r][c]);
        let b = Matrix4::from_fn(|r, c| extrinsics[r][c]);
        Self::from_matrices(depth, k, b)
    }

    fn from_matrices(depth: Tensor, k: Matrix3<f64>, b: Matrix4<f64>) -> Result<Self> {
        depth.dims2()?;
        if k.determinant().abs() <= 1e-12 {
            return Err(Error::Geometry(format!(
                "intrinsics are singular (det = {:e})",
                k.determinant()
            )));
        }
        let bottom = [b[(3, 0)], b[(3, 1)], b[(3, 2)], b[(3, 3)]];
        let expected = [0.0, 0.0, 0.0, 1.0];
        if bottom
            .iter()
            .zip(expected)
            .any(|(v, e)| (v - e).abs() > 1e-12)
        {
            return Err(Error::Geometry(format!(
                "extrinsics bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        if let Some(d) = depth.data().iter().find(|d| **d < 0.0) {
            return Err(Error::Geometry(format!("negative depth {d}")));
        }
        if k.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera matrix entry".into()));
        }
        Ok(CameraFrame {
            depth,
            intrinsics: k,
            extrinsics: b,
        })
    }

    pub fn depth(&self) -> &Tensor {
        &self.depth
    }

    pub fn intrinsics(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.intrinsics[(r, c)]))
    }

    pub fn extrinsics(&self) -> [[f64; 4]; 4] {
        std::array::from_fn(|r| std::array::from_fn(|c| self.extrinsics[(r, c)]))
    }

    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }

    /// Same intrinsics and depth with a different rig pose.
    pub fn with_extrinsics(&self, extrinsics: [[f64; 4]; 4]) -> Result<Self> {
        CameraFrame::new(self.depth.clone(), self.intrinsics(), extrinsics)
    }

    /// Pinhole intrinsics, a random rigid pose and depths in `[0.5, 4)` meters.
    pub fn random(height: usize, width: usize, rng: &mut Rng) -> Self {
        let f = rng.random_range(0.5..2.0) * width.max(1) as f64;
        let k = Matrix3::new(
            f,
            rng.random_range(-0.05..0.05) * f,
            width as f64 / 2.0,
            0.0,
            f * rng.random_range(0.8..1.25),
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        let rot = Rotation3::from_euler_angles(
            rng.random_range(-PI..PI),
            rng.random_range(-PI / 2.0..PI / 2.0),
            rng.random_range(-PI..PI),
        );
        let mut b = Matrix4::identity();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(rot.matrix());
        for r in 0..3 {
            b[(r, 3)] = rng.random_range(-5.0..5.0);
        }
        let depth = Tensor::uniform(&[height, width], 0.5, 4.0, rng);
        CameraFrame::from_matrices(depth, k, b).expect("random rig is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: FrameJson = serde_json::from_str(text).map_err(|e| {
            Error::Parse(format!(
                "camera frame JSON at line {} column {}: {e}",
                e.line(),
                e.column()
            ))
        })?;
        if raw.k.len() != 9 || raw.b.len() != 16 {
            return Err(Error::Parse(format!(
                "K needs 9 values and B needs 16, got {} and {}",
                raw.k.len(),
                raw.b.len()
            )));
        }
        let depth = Tensor::new(raw.depth.dims.to_vec(), raw.depth.data)?;
        let k = Matrix3::from_row_slice(&raw.k);
        let b = Matrix4::from_row_slice(&raw.b);
        CameraFrame::from_matrices(depth, k, b)
    }

    pub fn to_json(&self) -> String {
        let raw = FrameJson {
            depth: DepthJson {
                dims: [self.height(), self.width()],
                data: self.depth.data().to_vec(),
            },
            k: self.intrinsics().concat(),
            b: self.extrinsics().concat(),
        };
        serde_json::to_string(&raw).expect("frame serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CameraFrame::from_json(&text)
    }
}

/// World coordinates per pixel, row-major over `(i, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMap {
    height: usize,
    width: usize,
    coords: Vec<[f64; 3]>,
}

impl PointMap {
    pub fn new(height: usize, width: usize, coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.len() != height * width {
            return Err(Error::dim("point_map", &[height, width], &[coords.len()]));
        }
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point map coordinate".into()));
        }
        Ok(PointMap {
            height,
            width,
            coords,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, i: usize, j: usize) -> [f64; 3] {
        self.coords[i * self.width + j]
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    /// `H×W×3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.coords.iter().flatten().copied().collect(),
        )
        .expect("finite by construction")
    }
}

/// Lifts every pixel `(i, j)` with depth `D[i, j]`:
/// `[x y z 1] = [D·[j i 1]·(K⁻¹)ᵀ, 1]·Bᵀ`.
pub fn lift_to_world(frame: &CameraFrame) -> Result<PointMap> {
    let k_inv = frame
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::Geometry("intrinsics are singular".into()))?;
    let (h, w) = (frame.height(), frame.width());
    let mut coords = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d = frame.depth.at(i, j);
            let cam = k_inv * Vector3::new(j as f64, i as f64, 1.0) * d;
            let world: Vector4<f64> = frame.extrinsics * cam.push(1.0);
            coords.push([world[0], world[1], world[2]]);
        }
    }
    PointMap::new(h, w, coords)
}

/// Frequency ladder for [`sinusoidal_encode`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoEncodingConfig {
    pub num_frequencies: usize,
    /// Longest wavelength in meters.
    pub base_wavelength: f64,
    /// Each successive wavelength is divided by this factor.
    pub ratio: f64,
    /// Encoded width; must be at least `6 · num_frequencies`, extra columns are zero.
    pub output_dim: usize,
}

impl Default for GeoEncodingConfig {
    fn default() -> Self {
        GeoEncodingConfig {
            num_frequencies: 8,
            base_wavelength: 1.0,
            ratio: 2.0,
            output_dim: 48,
        }
    }
}

impl GeoEncodingConfig {
    /// Largest ladder that fits a token width.
    pub fn for_width(width: usize) -> Self {
        GeoEncodingConfig {
            num_frequencies: (width / 6).clamp(1, 8),
            output_dim: width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::Parameter("num_frequencies must be >= 1".into()));
        }
        if !(self.base_wavelength > 0.0 && self.base_wavelength.is_finite())
            || self.ratio.is_nan()
            || self.ratio <= 0.0
        {
            return Err(Error::Parameter(
                "wavelength and ratio must be positive".into(),
            ));
        }
        if self.output_dim < 6 * self.num_frequencies {
            return Err(Error::Parameter(format!(
                "output_dim {} cannot hold {} encoded values",
                self.output_dim,
                6 * self.num_frequencies
            )));
        }
        Ok(())
    }

    /// Angular frequency of ladder rung `f`.
    pub fn frequency(&self, f: usize) -> f64 {
        2.0 * PI / (self.base_wavelength * self.ratio.powi(f as i32))
    }
}

/// Per point, `[sin(ω_f·a), cos(ω_f·a)]` for each axis `a` in x, y, z and each
/// rung `f`, axis-major, zero-padded to `cfg.output_dim`.
pub fn sinusoidal_encode(points: &PointMap, cfg: &GeoEncodingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let n = points.coords.len();
    let mut data = vec![0.0; n * cfg.output_dim];
    for (p, xyz) in points.coords.iter().enumerate() {
        let row = &mut data[p * cfg.output_dim..(p + 1) * cfg.output_dim];
        let mut col = 0;
        for a in xyz {
            for f in 0..cfg.num_frequencies {
                let (s, c) = (cfg.frequency(f) * a).sin_cos();
                row[col] = s;
                row[col + 1] = c;
                col += 2;
            }
        }
    }
    Tensor::new(vec![n, cfg.output_dim], data)
}

/// Adds coordinate embeddings onto visual tokens.
pub fn inject_coords(visual_tokens: &Tensor, encodings: &Tensor) -> Result<Tensor> {
    ops::add(visual_tokens, encodings).map_err(|e| match e {
        Error::Dimension { lhs, rhs, .. } => Error::Dimension {
            op: "inject_coords",
            lhs,
            rhs,
        },
        other => other,
    })
}

/// Uniform-stride frame selection capped at `max_frames`, always keeping the
/// first and last frame.
pub fn sample_frames(total_frames: usize, max_frames: usize) -> Result<Vec<usize>> {
    if total_frames == 0 || max_frames == 0 {
        return Err(Error::Parameter(format!(
            "frame counts must be >= 1 (total {total_frames}, max {max_frames})"
        )));
    }
    if total_frames <= max_frames {
        return Ok((0..total_frames).collect());
    }
    if max_frames == 1 {
        return Ok(vec![0]);
    }
    let span = total_frames - 1;
    let steps = max_frames - 1;
    Ok((0..max_frames).map(|i| i * span / steps).collect())
}

/// Default cap on frames sampled from one clip or multi-view set.
pub const MAX_FRAMES: usize = 32;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn identity_frame(depth: Tensor) -> CameraFrame {
        let mut k = [[0.0; 3]; 3];
        let mut b = [[0.0; 4]; 4];
        for i in 0..3 {
            k[i][i] = 1.0;
        }
        for i in 0..4 {
            b[i][i] = 1.0;
        }
        CameraFrame::new(depth, k, b).unwrap()
    }

    #[test]
    fn identity_rig_examples() {
        let pm = lift_to_world(&identity_frame(Tensor::full(&[4, 4], 1.0))).unwrap();
        assert_eq!(pm.at(0, 0), [0.0, 0.0, 1.0]);
        let mut depth = Tensor::full(&[4, 4], 1.0);
        depth.data_mut()[3 * 4 + 2] = 2.0;
        let pm = lift_to_world(&identity_frame(depth)).unwrap();
        assert_eq!(pm.at(3, 2), [4.0, 6.0, 2.0]);
    }

    #[test]
    fn frame_invariants() {
        let depth = Tensor::full(&[2, 2], 1.0);
        let eye4 = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let singular = [[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            CameraFrame::new(depth.clone(), singular, eye4),
            Err(Error::Geometry(_))
        ));
        let mut bad_b = eye4;
        bad_b[3][0] = 0.5;
        let eye3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(CameraFrame::new(depth.clone(), eye3, bad_b).is_err());
        let neg = Tensor::new(vec![1, 2], vec![1.0, -0.1]).unwrap();
        assert!(CameraFrame::new(neg, eye3, eye4).is_err());
    }

    #[test]
    fn zero_depth_maps_to_camera_center() {
        let mut rng = stream(4, "geo");
        let mut frame = CameraFrame::random(2, 3, &mut rng);
        frame.depth = Tensor::zeros(&[2, 3]);
        let pm = lift_to_world(&frame).unwrap();
        let t = frame.extrinsics();
        for p in pm.coords() {
            for a in 0..3 {
                assert!((p[a] - t[a][3]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let mut rng = stream(5, "geo");
        let frame = CameraFrame::random(3, 2, &mut rng);
        assert_eq!(CameraFrame::from_json(&frame.to_json()).unwrap(), frame);
        let err = CameraFrame::from_json("{\"depth\": [1,")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn encoding_of_origin() {
        let pm = PointMap::new(1, 1, vec![[0.0; 3]]).unwrap();
        let cfg = GeoEncodingConfig::default();
        let e = sinusoidal_encode(&pm, &cfg).unwrap();
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn encoding_matches_scalar_oracle() {
        let pm = PointMap::new(1, 1, vec![[0.3, -1.7, 2.25]]).unwrap();
        let cfg = GeoEncodingConfig {
            num_frequencies: 2,
            base_wavelength: 1.0,
            ratio: 2.0,
            output_dim: 16,
        };
        let e = sinusoidal_encode(&pm, &cfg).unwrap();
        let tau = 2.0 * PI;
        let (x, y, z) = (0.3f64, -1.7f64, 2.25f64);
        let expected = [
            (tau * x).sin(),
            (tau * x).cos(),
            (tau / 2.0 * x).sin(),
            (tau / 2.0 * x).cos(),
            (tau * y).sin(),
            (tau * y).cos(),
            (tau / 2.0 * y).sin(),
            (tau / 2.0 * y).cos(),
            (tau * z).sin(),
            (tau * z).cos(),
            (tau / 2.0 * z).sin(),
            (tau / 2.0 * z).cos(),
            0.0,
            0.0,
            0.0,
            0.0,
        ];
        for (a, b) in e.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn encoding_config_validation() {
        let cfg = GeoEncodingConfig {
            output_dim: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(GeoEncodingConfig::for_width(16).num_frequencies, 2);
    }

    #[test]
    fn inject_examples() {
        let mut rng = stream(6, "geo");
        let tok = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(inject_coords(&tok, &Tensor::zeros(&[3, 4])).unwrap(), tok);
        assert_eq!(inject_coords(&Tensor::zeros(&[3, 4]), &tok).unwrap(), tok);
        let err = inject_coords(&tok, &Tensor::zeros(&[4, 3])).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                op: "inject_coords",
                ..
            }
        ));
    }

    #[test]
    fn sample_frames_examples() {
        assert_eq!(sample_frames(5, MAX_FRAMES).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_frames(2, 2).unwrap(), vec![0, 1]);
        let s = sample_frames(100, 32).unwrap();
        assert_eq!((s.len(), s[0], s[31]), (32, 0, 99));
        assert!(sample_frames(0, 3).is_err());
        assert!(sample_frames(3, 0).is_err());
    }
}
