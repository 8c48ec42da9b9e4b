//! Camera projection from 3D point coordinates to normalized 2D
//! reference points.
//!
//! The camera is a nine-parameter homogeneous mapping: pixel coordinates
//! are ratios of linear forms in (x, y, z), then normalized by the image
//! extent and clamped to the unit square.

use thiserror::Error;

/// Denominator threshold below which a projection is flagged degenerate.
pub const EPS_PROJ: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate projection: |denominator| = {0:e} <= {EPS_PROJ:e}")]
    DegenerateProjection(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("camera file parse error at record {record}: {message}")]
    Parse { record: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Point3 {
        Point3 { x, y, z }
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Raw pixel coordinates (u, v).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel2 {
    pub u: f64,
    pub v: f64,
}

/// Normalized coordinates in [0,1]^2 after clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Unit2 {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub psi: [f64; 9],
    pub width_px: f64,
    pub height_px: f64,
}

impl CameraModel {
    pub fn new(psi: [f64; 9], width_px: f64, height_px: f64) -> Result<CameraModel, GeometryError> {
        if !(width_px > 0.0 && height_px > 0.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "image extent must be positive, got {width_px} x {height_px}"
            )));
        }
        if psi.iter().all(|v| *v == 0.0) {
            return Err(GeometryError::InvalidCamera(
                "psi must not be the all-zero vector".into(),
            ));
        }
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("psi must be finite".into()));
        }
        Ok(CameraModel {
            psi,
            width_px,
            height_px,
        })
    }
}

/// Projects a camera-frame 3D point to pixel coordinates.
pub fn project(cam: &CameraModel, p: Point3) -> Result<Pixel2, GeometryError> {
    let psi = &cam.psi;
    let d = psi[6] * p.x + psi[7] * p.y + psi[8] * p.z;
    if d.abs() <= EPS_PROJ {
        return Err(GeometryError::DegenerateProjection(d.abs()));
    }
    Ok(Pixel2 {
        u: (psi[0] * p.x + psi[1] * p.y + psi[2] * p.z) / d,
        v: (psi[3] * p.x + psi[4] * p.y + psi[5] * p.z) / d,
    })
}

/// Divides by the image extent and clamps each coordinate to [0,1].
pub fn normalize_pixel(cam: &CameraModel, px: Pixel2) -> Unit2 {
    Unit2 {
        a: (px.u / cam.width_px).clamp(0.0, 1.0),
        b: (px.v / cam.height_px).clamp(0.0, 1.0),
    }
}

/// Projection followed by normalization: the reference point of a
/// 3D candidate on the image plane.
pub fn ref_point(cam: &CameraModel, s: Point3) -> Result<Unit2, GeometryError> {
    Ok(normalize_pixel(cam, project(cam, s)?))
}

/// Parses camera records: per camera, 9 whitespace-separated decimal
/// values for psi followed by W0 and H0 (11 numbers per record, records
/// concatenated in reading order).
pub fn parse_camera_file(text: &str) -> Result<Vec<CameraModel>, GeometryError> {
    let mut values = Vec::new();
    for (i, tok) in text.split_whitespace().enumerate() {
        let v: f64 = tok.parse().map_err(|_| GeometryError::Parse {
            record: i / 11,
            message: format!("invalid number '{tok}'"),
        })?;
        values.push(v);
    }
    if values.len() % 11 != 0 {
        return Err(GeometryError::Parse {
            record: values.len() / 11,
            message: format!("expected records of 11 numbers, got {} values", values.len()),
        });
    }
    let mut cams = Vec::new();
    for (rec, chunk) in values.chunks(11).enumerate() {
        let mut psi = [0.0; 9];
        psi.copy_from_slice(&chunk[..9]);
        cams.push(
            CameraModel::new(psi, chunk[9], chunk[10]).map_err(|e| GeometryError::Parse {
                record: rec,
                message: e.to_string(),
            })?,
        );
    }
    Ok(cams)
}

/// Writes cameras in the same format `parse_camera_file` reads, with
/// round-trip float precision.
pub fn write_camera_file(cams: &[CameraModel]) -> String {
    let mut out = String::new();
    for cam in cams {
        let mut fields: Vec<String> = cam.psi.iter().map(|v| format!("{v}")).collect();
        fields.push(format!("{}", cam.width_px));
        fields.push(format!("{}", cam.height_px));
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}
