//! File formats: the JSON window stream, the ground-truth sidecar, report
//! JSON and trajectory CSV.
//!
//! Floats are printed with 17 significant digits so every value reads back
//! bit-exactly. Quaternions are `[w, x, y, z]`; matrices are
//! `{"rows", "cols", "data"}` with `data` row-major.

use std::io;

use nalgebra::{DMatrix, DVector, Matrix3, Quaternion, SMatrix, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{
    validate, BiasJacobians, Feature, ImuFactor, KeyframeState, PriorError, PriorFactor, VisualObservation,
    WindowProblem,
};
use crate::scenegen::{GroundTruth, SceneConfig, RNG_NAME};

/// JSON formatter writing every float as `d.dddddddddddddddde±x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

/// Serializes with [`FullPrecision`] floats.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl MatrixJson {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn from_static<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> Self {
        Self::from_dmatrix(&DMatrix::from_iterator(R, C, m.iter().copied()))
    }

    pub fn to_dmatrix(&self) -> Result<DMatrix<f64>, String> {
        if self.data.len() != self.rows * self.cols {
            return Err(format!(
                "matrix has {} values, expected {}×{}",
                self.data.len(),
                self.rows,
                self.cols
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }

    pub fn to_static<const R: usize, const C: usize>(&self) -> Result<SMatrix<f64, R, C>, String> {
        if (self.rows, self.cols) != (R, C) {
            return Err(format!("matrix is {}×{}, expected {R}×{C}", self.rows, self.cols));
        }
        let d = self.to_dmatrix()?;
        Ok(SMatrix::from_iterator(d.iter().copied()))
    }
}

fn quat_json(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

fn quat_from(q: [f64; 4]) -> UnitQuaternion<f64> {
    // Stored unit quaternions are kept exactly; `validate` checks the norm.
    UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeJson {
    pub id: usize,
    pub p: [f64; 3],
    pub q: [f64; 4],
    pub v: [f64; 3],
    pub ba: [f64; 3],
    pub bg: [f64; 3],
}

impl From<&KeyframeState> for KeyframeJson {
    fn from(s: &KeyframeState) -> Self {
        Self {
            id: s.id,
            p: s.p.into(),
            q: quat_json(&s.q),
            v: s.v.into(),
            ba: s.ba.into(),
            bg: s.bg.into(),
        }
    }
}

impl From<&KeyframeJson> for KeyframeState {
    fn from(s: &KeyframeJson) -> Self {
        Self {
            id: s.id,
            p: Vector3::from(s.p),
            q: quat_from(s.q),
            v: Vector3::from(s.v),
            ba: Vector3::from(s.ba),
            bg: Vector3::from(s.bg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureJson {
    pub id: usize,
    pub anchor_kf: usize,
    pub anchor_uv: [f64; 2],
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationJson {
    pub feature_id: usize,
    pub kf_id: usize,
    pub uv: [f64; 2],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasJacobiansJson {
    pub dp_dba: MatrixJson,
    pub dp_dbg: MatrixJson,
    pub dq_dbg: MatrixJson,
    pub dv_dba: MatrixJson,
    pub dv_dbg: MatrixJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuFactorJson {
    pub kf_i: usize,
    pub kf_j: usize,
    pub dt: f64,
    pub dp_hat: [f64; 3],
    pub dv_hat: [f64; 3],
    pub dq_hat: [f64; 4],
    pub bias_jacobians: BiasJacobiansJson,
    pub sqrt_info: MatrixJson,
    pub lin_ba: [f64; 3],
    pub lin_bg: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorJson {
    pub state_ids: Vec<usize>,
    pub linearization: Vec<KeyframeJson>,
    pub h: MatrixJson,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowJson {
    pub keyframes: Vec<KeyframeJson>,
    pub features: Vec<FeatureJson>,
    pub observations: Vec<ObservationJson>,
    pub imu_factors: Vec<ImuFactorJson>,
    pub prior: Option<PriorJson>,
}


/// Provenance of a generated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHeader {
    pub rng: String,
    pub seed: u64,
    pub config: SceneConfig,
}

impl GeneratorHeader {
    pub fn new(config: &SceneConfig) -> Self {
        Self {
            rng: RNG_NAME.to_string(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorHeader>,
    pub gravity: [f64; 3],
    pub windows: Vec<WindowJson>,
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("window {window}: {message}")]
    Window { window: usize, message: String },
    #[error("{0}")]
    Other(String),
}

fn m3(m: &Matrix3<f64>) -> MatrixJson {
    MatrixJson::from_static(m)
}

pub fn window_to_json(w: &WindowProblem) -> WindowJson {
    WindowJson {
        keyframes: w.keyframes.iter().map(KeyframeJson::from).collect(),
        features: w
            .features
            .iter()
            .map(|f| FeatureJson {
                id: f.id,
                anchor_kf: f.anchor_kf,
                anchor_uv: f.anchor_uv.into(),
                inv_depth: f.inv_depth,
            })
            .collect(),
        observations: w
            .observations
            .iter()
            .map(|o| ObservationJson {
                feature_id: o.feature_id,
                kf_id: o.kf_id,
                uv: o.uv.into(),
                sigma: o.sigma,
            })
            .collect(),
        imu_factors: w
            .imu_factors
            .iter()
            .map(|f| ImuFactorJson {
                kf_i: f.kf_i,
                kf_j: f.kf_j,
                dt: f.dt,
                dp_hat: f.dp_hat.into(),
                dv_hat: f.dv_hat.into(),
                dq_hat: quat_json(&f.dq_hat),
                bias_jacobians: BiasJacobiansJson {
                    dp_dba: m3(&f.bias_jacobians.dp_dba),
                    dp_dbg: m3(&f.bias_jacobians.dp_dbg),
                    dq_dbg: m3(&f.bias_jacobians.dq_dbg),
                    dv_dba: m3(&f.bias_jacobians.dv_dba),
                    dv_dbg: m3(&f.bias_jacobians.dv_dbg),
                },
                sqrt_info: MatrixJson::from_static(&f.sqrt_info),
                lin_ba: f.lin_ba.into(),
                lin_bg: f.lin_bg.into(),
            })
            .collect(),
        prior: w.prior.as_ref().map(|p| PriorJson {
            state_ids: p.state_ids.clone(),
            linearization: p.linearization.iter().map(KeyframeJson::from).collect(),
            h: MatrixJson::from_dmatrix(&p.h),
            b: p.b.iter().copied().collect(),
        }),
    }
}

/// Converts without validating.
pub fn window_from_json(w: &WindowJson, gravity: Vector3<f64>) -> Result<WindowProblem, String> {
    let imu_factors = w
        .imu_factors
        .iter()
        .map(|f| {
            Ok(ImuFactor {
                kf_i: f.kf_i,
                kf_j: f.kf_j,
                dt: f.dt,
                dp_hat: Vector3::from(f.dp_hat),
                dv_hat: Vector3::from(f.dv_hat),
                dq_hat: quat_from(f.dq_hat),
                bias_jacobians: BiasJacobians {
                    dp_dba: f.bias_jacobians.dp_dba.to_static()?,
                    dp_dbg: f.bias_jacobians.dp_dbg.to_static()?,
                    dq_dbg: f.bias_jacobians.dq_dbg.to_static()?,
                    dv_dba: f.bias_jacobians.dv_dba.to_static()?,
                    dv_dbg: f.bias_jacobians.dv_dbg.to_static()?,
                },
                sqrt_info: f.sqrt_info.to_static()?,
                lin_ba: Vector3::from(f.lin_ba),
                lin_bg: Vector3::from(f.lin_bg),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let prior = match &w.prior {
        None => None,
        Some(p) => {
            let lin: Vec<KeyframeState> = p.linearization.iter().map(KeyframeState::from).collect();
            if lin.iter().map(|s| s.id).ne(p.state_ids.iter().copied()) {
                return Err("prior: state_ids disagree with linearization states".into());
            }
            let prior = PriorFactor::new(lin, p.h.to_dmatrix()?, DVector::from_vec(p.b.clone()))
                .map_err(|e: PriorError| format!("prior: {e}"))?;
            Some(prior)
        }
    };
    Ok(WindowProblem {
        keyframes: w.keyframes.iter().map(KeyframeState::from).collect(),
        features: w
            .features
            .iter()
            .map(|f| Feature {
                id: f.id,
                anchor_kf: f.anchor_kf,
                anchor_uv: Vector2::from(f.anchor_uv),
                inv_depth: f.inv_depth,
            })
            .collect(),
        observations: w
            .observations
            .iter()
            .map(|o| VisualObservation {
                feature_id: o.feature_id,
                kf_id: o.kf_id,
                uv: Vector2::from(o.uv),
                sigma: o.sigma,
            })
            .collect(),
        imu_factors,
        prior,
        gravity,
    })
}

/// A decoded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub generator: Option<GeneratorHeader>,
    pub windows: Vec<WindowProblem>,
}

pub fn stream_to_json(windows: &[WindowProblem], generator: Option<GeneratorHeader>) -> Result<String, FormatError> {
    let gravity = windows
        .first()
        .map_or(crate::model::default_gravity(), |w| w.gravity);
    let doc = StreamJson {
        generator,
        gravity: gravity.into(),
        windows: windows.iter().map(window_to_json).collect(),
    };
    Ok(to_json(&doc)?)
}

/// Parses and validates a stream; the first bad window is named.
pub fn stream_from_json(text: &str) -> Result<Stream, FormatError> {
    #[derive(Deserialize)]
    struct Raw {
        #[serde(default)]
        generator: Option<GeneratorHeader>,
        gravity: [f64; 3],
        windows: Vec<serde_json::Value>,
    }
    let doc: Raw = serde_json::from_str(text)?;
    let gravity = Vector3::from(doc.gravity);
    let mut windows = Vec::with_capacity(doc.windows.len());
    for (k, raw) in doc.windows.into_iter().enumerate() {
        let bad = |message: String| FormatError::Window { window: k, message };
        let w: WindowJson = serde_json::from_value(raw).map_err(|e| bad(e.to_string()))?;
        let window = window_from_json(&w, gravity).map_err(bad)?;
        if let Some(v) = validate(&window).first() {
            return Err(FormatError::Window {
                window: k,
                message: v.to_string(),
            });
        }
        windows.push(window);
    }
    Ok(Stream {
        generator: doc.generator,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkJson {
    pub id: usize,
    pub position: [f64; 3],
    pub inv_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthJson {
    pub keyframes: Vec<KeyframeJson>,
    pub landmarks: Vec<LandmarkJson>,
}

pub fn ground_truth_to_json(gt: &GroundTruth) -> Result<String, FormatError> {
    let doc = GroundTruthJson {
        keyframes: gt.keyframes.iter().map(KeyframeJson::from).collect(),
        landmarks: gt
            .landmarks
            .iter()
            .map(|(id, p)| LandmarkJson {
                id: *id,
                position: (*p).into(),
                inv_depth: gt.inv_depths.get(id).copied().unwrap_or(f64::NAN),
            })
            .collect(),
    };
    Ok(to_json(&doc)?)
}

pub fn ground_truth_from_json(text: &str) -> Result<GroundTruth, FormatError> {
    let doc: GroundTruthJson = serde_json::from_str(text)?;
    let mut keyframes: Vec<KeyframeState> = doc.keyframes.iter().map(KeyframeState::from).collect();
    keyframes.sort_by_key(|k| k.id);
    Ok(GroundTruth {
        keyframes,
        landmarks: doc.landmarks.iter().map(|l| (l.id, Vector3::from(l.position))).collect(),
        inv_depths: doc.landmarks.iter().map(|l| (l.id, l.inv_depth)).collect(),
    })
}

/// `kf_id,px,py,pz,qw,qx,qy,qz`, one keyframe per row.
pub fn trajectory_csv(states: &[KeyframeState]) -> String {
    let mut out = String::from("kf_id,px,py,pz,qw,qx,qy,qz\n");
    for s in states {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            s.id, s.p.x, s.p.y, s.p.z, s.q.w, s.q.i, s.q.j, s.q.k
        ));
    }
    out
}
