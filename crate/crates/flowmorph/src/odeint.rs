//! Point-set advection through the flow.
//!
//! Fixed-step RK4 and adaptive Dormand-Prince 5(4). Training gradients come
//! from differentiating the unrolled RK4 computation on the tape
//! (discretize-then-optimize); dopri5 is reserved for inference and
//! verification. Reverse deformations always integrate the negated-path flow
//! forward in time, never the forward flow backward.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flowfield::{
    eval_flow_batch, FlowError, FlowModel, LatentCode, PairContext, TapedCode, TapedModel,
    TapedPath,
};
use crate::geometry::{Mesh, PointCloud, Vec3};
use crate::numerics::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error("integration span must satisfy t0 < t1 within [0, 1], got ({0}, {1})")]
    BadSpan(f64, f64),
    #[error("dopri5 exceeded {max_steps} steps at t = {t}; flow may be stiff or blowing up")]
    MaxStepsExceeded {
        max_steps: usize,
        t: f64,
        partial: Trajectory,
    },
    #[error("training gradients require the rk4 solver; dopri5 is inference-only")]
    TrainingNeedsRk4,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Integrator choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "lowercase")]
pub enum Solver {
    Rk4 {
        steps: usize,
    },
    Dopri5 {
        rtol: f64,
        atol: f64,
        max_steps: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    #[serde(flatten)]
    pub solver: Solver,
}

impl OdeConfig {
    pub fn rk4(steps: usize) -> OdeConfig {
        OdeConfig {
            solver: Solver::Rk4 { steps },
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> OdeConfig {
        OdeConfig {
            solver: Solver::Dopri5 {
                rtol,
                atol,
                max_steps: 100_000,
            },
        }
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        match self.solver {
            Solver::Rk4 { steps } => {
                if steps == 0 {
                    return Err(OdeError::InvalidConfig("rk4 needs at least 1 step".into()));
                }
            }
            Solver::Dopri5 { rtol, atol, .. } => {
                if rtol <= 0.0 || atol <= 0.0 {
                    return Err(OdeError::InvalidConfig(
                        "dopri5 tolerances must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Time-stamped point-set states recorded by an integrator. Full advections
/// run from time 0 to 1; partial paths cover their subspan.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Advect a point set by an arbitrary batch flow over `span`.
pub fn integrate<F>(
    mut flow: F,
    x0: &Array2<f64>,
    span: (f64, f64),
    cfg: &OdeConfig,
) -> Result<Trajectory, OdeError>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>, FlowError>,
{
    cfg.validate()?;
    let (t0, t1) = span;
    if !(t0 < t1 && (0.0..=1.0).contains(&t0) && (0.0..=1.0).contains(&t1)) {
        return Err(OdeError::BadSpan(t0, t1));
    }
    match cfg.solver {
        Solver::Rk4 { steps } => rk4(&mut flow, x0, t0, t1, steps),
        Solver::Dopri5 {
            rtol,
            atol,
            max_steps,
        } => dopri5(&mut flow, x0, t0, t1, rtol, atol, max_steps),
    }
}

fn rk4<F>(flow: &mut F, x0: &Array2<f64>, t0: f64, t1: f64, steps: usize) -> Result<Trajectory, OdeError>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>, FlowError>,
{
    let h = (t1 - t0) / steps as f64;
    let mut x = x0.clone();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    times.push(t0);
    states.push(x.clone());
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = flow(&x, t)?;
        let k2 = flow(&(&x + &k1.mapv(|v| v * h * 0.5)), t + 0.5 * h)?;
        let k3 = flow(&(&x + &k2.mapv(|v| v * h * 0.5)), t + 0.5 * h)?;
        let k4 = flow(&(&x + &k3.mapv(|v| v * h)), t + h)?;
        x = &x
            + &(k1.mapv(|v| v * h / 6.0)
                + k2.mapv(|v| v * h / 3.0)
                + k3.mapv(|v| v * h / 3.0)
                + k4.mapv(|v| v * h / 6.0));
        let t_next = if k + 1 == steps { t1 } else { t0 + (k + 1) as f64 * h };
        times.push(t_next);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
/// 5th-order weights (row 7 of A; FSAL).
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Error coefficients b5 - b4.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const DP_SAFETY: f64 = 0.9;
const DP_FAC_MIN: f64 = 0.2;
const DP_FAC_MAX: f64 = 5.0;
const DP_BETA: f64 = 0.04;

fn dopri5<F>(
    flow: &mut F,
    x0: &Array2<f64>,
    t0: f64,
    t1: f64,
    rtol: f64,
    atol: f64,
    max_steps: usize,
) -> Result<Trajectory, OdeError>
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>, FlowError>,
{
    let expo1 = 0.2 - DP_BETA * 0.75;
    let mut x = x0.clone();
    let mut t = t0;
    let mut h = 0.1 * (t1 - t0);
    let mut facold: f64 = 1e-4;
    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut k1 = flow(&x, t)?;
    let mut rejected = false;

    for _attempt in 0..max_steps {
        if t >= t1 {
            return Ok(Trajectory { times, states });
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }

        let mut k = Vec::with_capacity(7);
        k.push(k1.clone());
        for stage in 0..6 {
            let mut xs = x.clone();
            for (j, kj) in k.iter().enumerate() {
                let a = DP_A[stage][j];
                if a != 0.0 {
                    xs = xs + kj.mapv(|v| v * (a * h));
                }
            }
            k.push(flow(&xs, t + DP_C[stage + 1] * h)?);
        }

        let mut x_new = x.clone();
        for (j, kj) in k.iter().enumerate() {
            if DP_B5[j] != 0.0 {
                x_new = x_new + kj.mapv(|v| v * (DP_B5[j] * h));
            }
        }

        // Error norm: max over entries of |err| / (atol + rtol |state|).
        let mut err: f64 = 0.0;
        for (idx, xv) in x_new.iter().enumerate() {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                if DP_E[j] != 0.0 {
                    e += DP_E[j] * kj.as_slice().unwrap()[idx];
                }
            }
            e *= h;
            let scale = atol + rtol * xv.abs();
            err = err.max((e / scale).abs());
        }

        let fac11 = err.powf(expo1);
        if err <= 1.0 {
            // Accept. The PI factor uses the previous accepted error.
            let mut fac = fac11 / facold.powf(DP_BETA);
            facold = err.max(1e-4);
            t = if last { t1 } else { t + h };
            k1 = k.pop().expect("stage 7 exists"); // FSAL: k7 = f(t+h, x_new)
            x = x_new;
            times.push(t);
            states.push(x.clone());
            fac = (fac / DP_SAFETY).clamp(1.0 / DP_FAC_MAX, 1.0 / DP_FAC_MIN);
            let mut h_new = h / fac;
            if rejected {
                h_new = h_new.min(h);
            }
            rejected = false;
            h = h_new;
        } else {
            rejected = true;
            h /= (fac11 / DP_SAFETY).min(1.0 / DP_FAC_MIN);
        }
    }
    if t >= t1 {
        return Ok(Trajectory { times, states });
    }
    Err(OdeError::MaxStepsExceeded {
        max_steps,
        t,
        partial: Trajectory { times, states },
    })
}

// ---------------------------------------------------------------------------
// Flow-model advection.
// ---------------------------------------------------------------------------

pub fn points_to_array(points: &[Vec3]) -> Array2<f64> {
    let mut a = Array2::zeros((points.len(), 3));
    for (r, p) in points.iter().enumerate() {
        a[[r, 0]] = p.x;
        a[[r, 1]] = p.y;
        a[[r, 2]] = p.z;
    }
    a
}

pub fn array_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    (0..a.nrows())
        .map(|r| Vec3::new(a[[r, 0]], a[[r, 1]], a[[r, 2]]))
        .collect()
}

/// Advect a point set from the pair's source code to its target code over a
/// partial latent span ending at `t_end`. Point order is preserved;
/// identical codes return the input bitwise without integrating.
pub fn deform_partial(
    model: &FlowModel,
    ctx: &PairContext,
    points: &Array2<f64>,
    cfg: &OdeConfig,
    t_end: f64,
) -> Result<Array2<f64>, OdeError> {
    if ctx.is_identity() || t_end == 0.0 {
        return Ok(points.clone());
    }
    let traj = integrate(
        |x, t| eval_flow_batch(model, ctx, x, t),
        points,
        (0.0, t_end),
        cfg,
    )?;
    Ok(traj.final_state().clone())
}

/// Full advection from t = 0 to 1.
pub fn deform(
    model: &FlowModel,
    ctx: &PairContext,
    points: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>, OdeError> {
    deform_partial(model, ctx, points, cfg, 1.0)
}

/// Full advection with the recorded trajectory. Identical codes yield the
/// trivial two-snapshot trajectory.
pub fn deform_trajectory(
    model: &FlowModel,
    ctx: &PairContext,
    points: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Trajectory, OdeError> {
    if ctx.is_identity() {
        return Ok(Trajectory {
            times: vec![0.0, 1.0],
            states: vec![points.clone(), points.clone()],
        });
    }
    integrate(
        |x, t| eval_flow_batch(model, ctx, x, t),
        points,
        (0.0, 1.0),
        cfg,
    )
}

/// Advect and snapshot at the requested times (each consecutive span is
/// integrated afresh, so snapshots land exactly on the requested times).
/// `times` must start at 0, increase, and end at 1.
pub fn deform_snapshots(
    model: &FlowModel,
    ctx: &PairContext,
    points: &Array2<f64>,
    cfg: &OdeConfig,
    times: &[f64],
) -> Result<Trajectory, OdeError> {
    assert!(times.len() >= 2 && times[0] == 0.0 && *times.last().unwrap() == 1.0);
    if ctx.is_identity() {
        return Ok(Trajectory {
            times: times.to_vec(),
            states: vec![points.clone(); times.len()],
        });
    }
    let mut states = vec![points.clone()];
    for w in times.windows(2) {
        let traj = integrate(
            |x, t| eval_flow_batch(model, ctx, x, t),
            states.last().unwrap(),
            (w[0], w[1]),
            cfg,
        )?;
        states.push(traj.final_state().clone());
    }
    Ok(Trajectory {
        times: times.to_vec(),
        states,
    })
}

/// Advect mesh vertices; connectivity and labels are untouched.
pub fn deform_mesh(
    model: &FlowModel,
    ctx: &PairContext,
    mesh: &Mesh,
    cfg: &OdeConfig,
) -> Result<Mesh, OdeError> {
    let out = deform(model, ctx, &points_to_array(&mesh.vertices), cfg)?;
    Ok(mesh.with_vertices(array_to_points(&out)))
}

/// Advect a point cloud; labels ride along.
pub fn deform_cloud(
    model: &FlowModel,
    ctx: &PairContext,
    cloud: &PointCloud,
    cfg: &OdeConfig,
) -> Result<PointCloud, OdeError> {
    let out = deform(model, ctx, &points_to_array(&cloud.points), cfg)?;
    Ok(PointCloud {
        points: array_to_points(&out),
        labels: cloud.labels.clone(),
    })
}

// ---------------------------------------------------------------------------
// Differentiable RK4.
// ---------------------------------------------------------------------------

/// Gradients of a deformation loss with respect to the flow parameters and
/// the pair's latent codes.
#[derive(Debug)]
pub struct FlowGradients {
    pub backbone: Vec<(Array2<f64>, ndarray::Array1<f64>)>,
    pub sign_net: Option<Vec<(Array2<f64>, ndarray::Array1<f64>)>>,
    pub z_i: Vec<f64>,
    pub z_j: Vec<f64>,
}

/// Unroll fixed-step RK4 on the tape from `span.0` to `span.1`.
pub fn rk4_on_tape(
    tape: &mut Tape,
    path: &TapedPath<'_>,
    x0: TensorId,
    span: (f64, f64),
    steps: usize,
) -> TensorId {
    let (t0, t1) = span;
    let h = (t1 - t0) / steps as f64;
    let mut x = x0;
    for k in 0..steps {
        let t = t0 + k as f64 * h;
        let k1 = path.velocity(tape, x, t);
        let x2 = tape.add_scaled(x, k1, 0.5 * h);
        let k2 = path.velocity(tape, x2, t + 0.5 * h);
        let x3 = tape.add_scaled(x, k2, 0.5 * h);
        let k3 = path.velocity(tape, x3, t + 0.5 * h);
        let x4 = tape.add_scaled(x, k3, h);
        let k4 = path.velocity(tape, x4, t + h);
        x = tape.add_scaled(x, k1, h / 6.0);
        x = tape.add_scaled(x, k2, h / 3.0);
        x = tape.add_scaled(x, k3, h / 3.0);
        x = tape.add_scaled(x, k4, h / 6.0);
    }
    x
}

/// Integrate with gradients: unrolls RK4 on a fresh tape, hands the final
/// point tensor to `loss`, and backpropagates the scalar it returns.
/// Gradients cover the backbone (and sign net weights when present) plus both
/// latent codes. Errors if the config asks for dopri5.
pub fn integrate_with_grad<L>(
    model: &FlowModel,
    z_i: &LatentCode,
    z_j: &LatentCode,
    points: &Array2<f64>,
    cfg: &OdeConfig,
    loss: L,
) -> Result<(f64, FlowGradients), OdeError>
where
    L: FnOnce(&mut Tape, TensorId) -> TensorId,
{
    cfg.validate()?;
    let Solver::Rk4 { steps } = cfg.solver else {
        return Err(OdeError::TrainingNeedsRk4);
    };
    let mut tape = Tape::new();
    let taped = TapedModel::register(&mut tape, model, true)?;
    let from = TapedCode::variable(&mut tape, z_i);
    let to = TapedCode::variable(&mut tape, z_j);
    let path = taped.path(&mut tape, &from, &to)?;
    let x0 = tape.constant(points.clone());
    let x1 = rk4_on_tape(&mut tape, &path, x0, (0.0, 1.0), steps);
    let root = loss(&mut tape, x1);
    let value = tape.scalar(root);
    let grads = tape.backward(root).map_err(FlowError::from)?;
    let backbone = taped.backbone_grads(&grads);
    let sign_net = taped.sign_grads(&grads);
    let dim = z_i.dim();
    let gz_i = grads.dense(from.id, (1, dim)).into_raw_vec_and_offset().0;
    let gz_j = grads.dense(to.id, (1, dim)).into_raw_vec_and_offset().0;
    Ok((
        value,
        FlowGradients {
            backbone,
            sign_net,
            z_i: gz_i,
            z_j: gz_j,
        },
    ))
}

// ---------------------------------------------------------------------------
// Trajectory export.
// ---------------------------------------------------------------------------

/// Write one mesh per recorded time plus an index with per-frame volumes and
/// intersection counts.
pub fn export_trajectory(
    trajectory: &Trajectory,
    base: &Mesh,
    dir: &std::path::Path,
) -> Result<std::path::PathBuf, crate::geometry::GeometryError> {
    use crate::geometry::{count_triangle_intersections, save_mesh, signed_volume, MeshFormat};
    std::fs::create_dir_all(dir).map_err(|e| crate::geometry::GeometryError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut volumes = Vec::new();
    let mut intersections = Vec::new();
    for (idx, state) in trajectory.states.iter().enumerate() {
        let mesh = base.with_vertices(array_to_points(state));
        volumes.push(signed_volume(&mesh));
        intersections.push(count_triangle_intersections(&mesh));
        save_mesh(&mesh, &dir.join(format!("frame_{idx:04}.obj")), MeshFormat::Obj)?;
    }
    let index = serde_json::json!({
        "times": trajectory.times,
        "volumes": volumes,
        "intersections": intersections,
    });
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_string_pretty(&index).unwrap())
        .map_err(|e| crate::geometry::GeometryError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    Ok(path)
}
