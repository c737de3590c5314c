//! The learned deformation velocity field.
//!
//! For a shape pair (i, j) the velocity at point x and path time t is
//!
//! ```text
//! f(x, t) = inner(x, z_i + t (z_j - z_i)) * sign * ||z_j - z_i||
//! ```
//!
//! where `inner` is the backbone network, optionally wrapped as the curl of a
//! vector potential (exactly divergence-free) and/or mirror-symmetrized about
//! the yz plane. The sign factor is odd under swapping i and j, which makes
//! `f_ji(x, t) = -f_ij(x, 1-t)` hold by construction: reverse deformations
//! are structural inverses. With identical codes the magnitude factor is zero
//! and the field vanishes identically.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::numerics::{
    jacobian_unchecked, mlp_forward_generic, Activation, Dual3, MlpParams, NumericsError, Real,
    Tape, TapedMlp, TensorId,
};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite input point")]
    NonFiniteInput,
    #[error("hub sign rule needs one endpoint at the zero hub")]
    HubSignUndefined,
    #[error("divergence-free mode requires a C1 activation; backbone uses {activation:?}")]
    DivergenceFreeNeedsC1 { activation: Activation },
    #[error("latent length {actual} does not match model latent dimension {expected}")]
    LatentDimMismatch { expected: usize, actual: usize },
    #[error("sign mode odd-mlp requires a sign network")]
    SignNetMissing,
}

/// A shape's position in deformation space. The hub is the all-zero code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn hub(dim: usize) -> LatentCode {
        LatentCode(vec![0.0; dim])
    }

    pub fn is_hub(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// How the backbone output becomes a velocity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Backbone output used directly.
    Direct,
    /// Backbone parameterizes a vector potential; velocity is its curl,
    /// divergence-free by construction.
    #[serde(rename = "divfree")]
    DivergenceFree,
}

impl FlowMode {
    pub fn name(self) -> &'static str {
        match self {
            FlowMode::Direct => "direct",
            FlowMode::DivergenceFree => "divfree",
        }
    }

    pub fn parse(s: &str) -> Option<FlowMode> {
        match s {
            "direct" => Some(FlowMode::Direct),
            "divfree" => Some(FlowMode::DivergenceFree),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymmetryMode {
    Off,
    /// Velocity x-component anti-symmetric, y/z symmetric across x = 0.
    #[serde(rename = "yz")]
    PlaneYz,
}

impl SymmetryMode {
    pub fn name(self) -> &'static str {
        match self {
            SymmetryMode::Off => "off",
            SymmetryMode::PlaneYz => "yz",
        }
    }

    pub fn parse(s: &str) -> Option<SymmetryMode> {
        match s {
            "off" => Some(SymmetryMode::Off),
            "yz" => Some(SymmetryMode::PlaneYz),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignMode {
    /// +1 toward the hub, -1 away from it; no parameters. Requires one
    /// endpoint at the hub.
    #[serde(rename = "hub")]
    HubRule,
    /// Learned odd network: zero biases, tanh hidden layers, linear head.
    #[serde(rename = "oddmlp")]
    OddMlp,
}

impl SignMode {
    pub fn name(self) -> &'static str {
        match self {
            SignMode::HubRule => "hub",
            SignMode::OddMlp => "oddmlp",
        }
    }

    pub fn parse(s: &str) -> Option<SignMode> {
        match s {
            "hub" => Some(SignMode::HubRule),
            "oddmlp" => Some(SignMode::OddMlp),
            _ => None,
        }
    }
}

/// The learned flow: backbone network, optional sign network, and the
/// parameterization flags.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub backbone: MlpParams,
    pub sign_net: Option<MlpParams>,
    pub mode: FlowMode,
    pub symmetry: SymmetryMode,
    pub sign_mode: SignMode,
    pub latent_dim: usize,
    pub n_f: usize,
}

impl FlowModel {
    /// Backbone widths: input concat(x, z), tapering hidden stack, 3-wide
    /// linear head.
    pub fn backbone_widths(latent_dim: usize, n_f: usize) -> Vec<usize> {
        vec![3 + latent_dim, 4 * n_f, 2 * n_f, n_f, 3]
    }

    fn sign_widths(latent_dim: usize, n_f: usize) -> Vec<usize> {
        vec![latent_dim, 2 * n_f, 1]
    }

    /// Fresh model with Glorot weights. Validates the mode/activation
    /// combination; the odd sign network is created bias-free.
    pub fn init(
        latent_dim: usize,
        n_f: usize,
        activation: Activation,
        mode: FlowMode,
        symmetry: SymmetryMode,
        sign_mode: SignMode,
        rng: &mut impl Rng,
    ) -> Result<FlowModel, FlowError> {
        let backbone = MlpParams::glorot(&Self::backbone_widths(latent_dim, n_f), activation, rng);
        let sign_net = match sign_mode {
            SignMode::HubRule => None,
            SignMode::OddMlp => {
                let mut net =
                    MlpParams::glorot(&Self::sign_widths(latent_dim, n_f), Activation::Tanh, rng);
                net.clear_biases();
                Some(net)
            }
        };
        let model = FlowModel {
            backbone,
            sign_net,
            mode,
            symmetry,
            sign_mode,
            latent_dim,
            n_f,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.mode == FlowMode::DivergenceFree {
            for layer in &self.backbone.layers {
                if !layer.activation.is_c1() {
                    return Err(FlowError::DivergenceFreeNeedsC1 {
                        activation: layer.activation,
                    });
                }
            }
        }
        if self.sign_mode == SignMode::OddMlp && self.sign_net.is_none() {
            return Err(FlowError::SignNetMissing);
        }
        Ok(())
    }

    fn check_code(&self, z: &LatentCode) -> Result<(), FlowError> {
        if z.dim() != self.latent_dim {
            return Err(FlowError::LatentDimMismatch {
                expected: self.latent_dim,
                actual: z.dim(),
            });
        }
        Ok(())
    }
}

/// A deformation path between two latent codes.
#[derive(Debug, Clone)]
pub struct PairContext {
    pub z_i: LatentCode,
    pub z_j: LatentCode,
    /// ||z_j - z_i||, the flow-magnitude factor.
    pub magnitude: f64,
}

impl PairContext {
    pub fn new(z_i: LatentCode, z_j: LatentCode) -> PairContext {
        assert_eq!(z_i.dim(), z_j.dim(), "latent codes must share a dimension");
        let magnitude = z_i
            .0
            .iter()
            .zip(&z_j.0)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt();
        PairContext { z_i, z_j, magnitude }
    }

    /// Identical codes: the flow is identically zero.
    pub fn is_identity(&self) -> bool {
        self.magnitude == 0.0
    }

    pub fn reversed(&self) -> PairContext {
        PairContext::new(self.z_j.clone(), self.z_i.clone())
    }

    /// Latent-line conditioning z_i + t (z_j - z_i). The endpoints return the
    /// stored codes exactly, so a path retargeted to an interior code z_k =
    /// z_i + a (z_j - z_i) sees bit-identical conditioning at its endpoint.
    pub fn conditioning(&self, t: f64) -> Vec<f64> {
        if t == 0.0 {
            return self.z_i.0.clone();
        }
        if t == 1.0 {
            return self.z_j.0.clone();
        }
        self.z_i
            .0
            .iter()
            .zip(&self.z_j.0)
            .map(|(a, b)| a + t * (b - a))
            .collect()
    }

    /// Normalized latent direction; `None` for identical codes.
    pub fn direction(&self) -> Option<Vec<f64>> {
        if self.is_identity() {
            return None;
        }
        Some(
            self.z_i
                .0
                .iter()
                .zip(&self.z_j.0)
                .map(|(a, b)| (b - a) / self.magnitude)
                .collect(),
        )
    }
}

/// The sign factor for a pair. Hub rule: +1 deforming toward the hub
/// (z_j is the hub), -1 deforming away from it; errors when neither endpoint
/// is the hub (and the pair is not degenerate). Odd-mlp: the bias-free tanh
/// network evaluated on the normalized latent direction.
pub fn sign_value(model: &FlowModel, ctx: &PairContext) -> Result<f64, FlowError> {
    model.check_code(&ctx.z_i)?;
    model.check_code(&ctx.z_j)?;
    match model.sign_mode {
        SignMode::HubRule => {
            if ctx.is_identity() {
                // Zero-magnitude flow; the factor is never observable.
                Ok(1.0)
            } else if ctx.z_j.is_hub() {
                Ok(1.0)
            } else if ctx.z_i.is_hub() {
                Ok(-1.0)
            } else {
                Err(FlowError::HubSignUndefined)
            }
        }
        SignMode::OddMlp => {
            let net = model.sign_net.as_ref().ok_or(FlowError::SignNetMissing)?;
            match ctx.direction() {
                None => Ok(0.0),
                Some(u) => {
                    let out = mlp_forward_generic::<f64>(net, &u);
                    Ok(out[0])
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Generic single-point evaluation (also powers the nested-dual oracles).
// ---------------------------------------------------------------------------

fn mlp3<S: Real>(params: &MlpParams, p: [S; 3], cond: &[f64]) -> [S; 3] {
    let mut input: Vec<S> = Vec::with_capacity(3 + cond.len());
    input.extend_from_slice(&p);
    input.extend(cond.iter().map(|&c| S::from_f64(c)));
    let out = mlp_forward_generic(params, &input);
    [out[0], out[1], out[2]]
}

fn curl_generic<S: Real>(params: &MlpParams, p: [S; 3], cond: &[f64]) -> [S; 3] {
    let out = jacobian_unchecked::<S>(params, &p, cond);
    // J[a][b] = out[a].dx[b]; curl = (J21 - J12, J02 - J20, J10 - J01).
    [
        out[2].dx[1] - out[1].dx[2],
        out[0].dx[2] - out[2].dx[0],
        out[1].dx[0] - out[0].dx[1],
    ]
}

fn raw_field_generic<S: Real>(model: &FlowModel, p: [S; 3], cond: &[f64]) -> [S; 3] {
    match model.mode {
        FlowMode::Direct => mlp3(&model.backbone, p, cond),
        FlowMode::DivergenceFree => curl_generic(&model.backbone, p, cond),
    }
}

/// The inner velocity field (before sign and magnitude factors), generic over
/// the scalar so nested duals can probe its derivatives exactly.
pub fn inner_field_generic<S: Real>(model: &FlowModel, p: [S; 3], cond: &[f64]) -> [S; 3] {
    let raw = raw_field_generic(model, p, cond);
    match model.symmetry {
        SymmetryMode::Off => raw,
        SymmetryMode::PlaneYz => {
            let mirrored = raw_field_generic(model, [-p[0], p[1], p[2]], cond);
            let half = S::from_f64(0.5);
            [
                (raw[0] - mirrored[0]) * half,
                (raw[1] + mirrored[1]) * half,
                (raw[2] + mirrored[2]) * half,
            ]
        }
    }
}

/// Velocity of the pair flow at a single point.
pub fn eval_flow(model: &FlowModel, ctx: &PairContext, x: Vec3, t: f64) -> Result<Vec3, FlowError> {
    if !(x.x.is_finite() && x.y.is_finite() && x.z.is_finite()) {
        return Err(FlowError::NonFiniteInput);
    }
    model.check_code(&ctx.z_i)?;
    if ctx.is_identity() {
        return Ok(Vec3::zeros());
    }
    let sign = sign_value(model, ctx)?;
    let cond = ctx.conditioning(t);
    let inner = inner_field_generic::<f64>(model, [x.x, x.y, x.z], &cond);
    let factor = sign * ctx.magnitude;
    Ok(Vec3::new(inner[0] * factor, inner[1] * factor, inner[2] * factor))
}

/// Curl of the vector potential at one point: the divergence-free velocity
/// before sign/magnitude. Requires divergence-free mode.
pub fn curl_potential(model: &FlowModel, x: Vec3, cond: &[f64]) -> Result<Vec3, FlowError> {
    if model.mode != FlowMode::DivergenceFree {
        return Err(FlowError::DivergenceFreeNeedsC1 {
            activation: Activation::Identity,
        });
    }
    model.validate()?;
    // spatial_jacobian re-checks widths and activations.
    let jac = crate::numerics::spatial_jacobian(&model.backbone, &[x.x, x.y, x.z], cond)?;
    Ok(Vec3::new(
        jac[2][1] - jac[1][2],
        jac[0][2] - jac[2][0],
        jac[1][0] - jac[0][1],
    ))
}

/// The plane-symmetrized inner field at one point (Eq. 6 wrapper applied to
/// whichever raw field the mode selects).
pub fn symmetrize(model: &FlowModel, x: Vec3, cond: &[f64]) -> Result<Vec3, FlowError> {
    let raw = raw_field_generic::<f64>(model, [x.x, x.y, x.z], cond);
    let mirrored = raw_field_generic::<f64>(model, [-x.x, x.y, x.z], cond);
    Ok(Vec3::new(
        0.5 * (raw[0] - mirrored[0]),
        0.5 * (raw[1] + mirrored[1]),
        0.5 * (raw[2] + mirrored[2]),
    ))
}

/// Exact divergence of the inner field at one point, from a nested
/// forward-mode pass (second derivatives of the potential where applicable).
pub fn divergence(model: &FlowModel, x: Vec3, cond: &[f64]) -> Result<f64, FlowError> {
    model.validate()?;
    let p = [
        Dual3::<f64>::seeded(x.x, 0),
        Dual3::<f64>::seeded(x.y, 1),
        Dual3::<f64>::seeded(x.z, 2),
    ];
    let f = inner_field_generic::<Dual3<f64>>(model, p, cond);
    Ok(f[0].dx[0] + f[1].dx[1] + f[2].dx[2])
}

// ---------------------------------------------------------------------------
// Batched inference evaluation.
// ---------------------------------------------------------------------------

fn concat_cond(points: &Array2<f64>, cond: &[f64]) -> Array2<f64> {
    let (n, k) = points.dim();
    let mut out = Array2::zeros((n, k + cond.len()));
    out.slice_mut(ndarray::s![.., ..k]).assign(points);
    for (c, &v) in cond.iter().enumerate() {
        out.column_mut(k + c).fill(v);
    }
    out
}

fn seed_matrices(n: usize, width: usize) -> [Array2<f64>; 3] {
    let mut seeds = [
        Array2::zeros((n, width)),
        Array2::zeros((n, width)),
        Array2::zeros((n, width)),
    ];
    for (axis, seed) in seeds.iter_mut().enumerate() {
        seed.column_mut(axis).fill(1.0);
    }
    seeds
}

fn curl_batch(params: &MlpParams, input: &Array2<f64>) -> Array2<f64> {
    let n = input.nrows();
    let seeds = seed_matrices(n, input.ncols());
    let (_, t) = params.dual_forward_batch(input, [&seeds[0], &seeds[1], &seeds[2]]);
    let mut out = Array2::zeros((n, 3));
    for r in 0..n {
        out[[r, 0]] = t[1][[r, 2]] - t[2][[r, 1]];
        out[[r, 1]] = t[2][[r, 0]] - t[0][[r, 2]];
        out[[r, 2]] = t[0][[r, 1]] - t[1][[r, 0]];
    }
    out
}

fn raw_field_batch(model: &FlowModel, points: &Array2<f64>, cond: &[f64]) -> Array2<f64> {
    let input = concat_cond(points, cond);
    match model.mode {
        FlowMode::Direct => model.backbone.forward_batch(&input),
        FlowMode::DivergenceFree => curl_batch(&model.backbone, &input),
    }
}

fn mirror_points(points: &Array2<f64>) -> Array2<f64> {
    let mut m = points.clone();
    for r in 0..m.nrows() {
        m[[r, 0]] = -m[[r, 0]];
    }
    m
}

/// Inner field over a batch of points (rows).
pub fn inner_field_batch(model: &FlowModel, points: &Array2<f64>, cond: &[f64]) -> Array2<f64> {
    let raw = raw_field_batch(model, points, cond);
    match model.symmetry {
        SymmetryMode::Off => raw,
        SymmetryMode::PlaneYz => {
            let mirrored = raw_field_batch(model, &mirror_points(points), cond);
            let n = raw.nrows();
            let mut out = Array2::zeros((n, 3));
            for r in 0..n {
                out[[r, 0]] = 0.5 * (raw[[r, 0]] - mirrored[[r, 0]]);
                out[[r, 1]] = 0.5 * (raw[[r, 1]] + mirrored[[r, 1]]);
                out[[r, 2]] = 0.5 * (raw[[r, 2]] + mirrored[[r, 2]]);
            }
            out
        }
    }
}

/// Velocities for a batch of points (rows of `points`).
pub fn eval_flow_batch(
    model: &FlowModel,
    ctx: &PairContext,
    points: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>, FlowError> {
    model.check_code(&ctx.z_i)?;
    if ctx.is_identity() {
        return Ok(Array2::zeros(points.dim()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NonFiniteInput);
    }
    let sign = sign_value(model, ctx)?;
    let cond = ctx.conditioning(t);
    let inner = inner_field_batch(model, points, &cond);
    Ok(inner.mapv(|v| v * sign * ctx.magnitude))
}

// ---------------------------------------------------------------------------
// On-tape evaluation for training.
// ---------------------------------------------------------------------------

enum SignFactor {
    Const(f64),
    Node(TensorId),
}

/// Model parameters registered once on a tape; any number of pair paths can
/// share them, so their gradients accumulate into one set of leaves.
pub struct TapedModel {
    backbone: TapedMlp,
    sign_net: Option<TapedMlp>,
    mode: FlowMode,
    symmetry: SymmetryMode,
    sign_mode: SignMode,
    input_width: usize,
}

/// A latent code registered on a tape, with its value kept for hub detection.
#[derive(Clone)]
pub struct TapedCode {
    pub id: TensorId,
    pub value: LatentCode,
}

impl TapedCode {
    pub fn variable(tape: &mut Tape, z: &LatentCode) -> TapedCode {
        TapedCode {
            id: tape.variable_row(&z.0),
            value: z.clone(),
        }
    }

    pub fn constant(tape: &mut Tape, z: &LatentCode) -> TapedCode {
        TapedCode {
            id: tape.constant_row(&z.0),
            value: z.clone(),
        }
    }
}

impl TapedModel {
    /// Register backbone (and sign net) parameters as tape leaves. The sign
    /// network's biases stay constant: they are pinned at zero.
    pub fn register(tape: &mut Tape, model: &FlowModel, trainable: bool) -> Result<TapedModel, FlowError> {
        model.validate()?;
        let backbone = TapedMlp::register(tape, &model.backbone, trainable, true);
        let sign_net = model
            .sign_net
            .as_ref()
            .map(|net| TapedMlp::register(tape, net, trainable, false));
        Ok(TapedModel {
            backbone,
            sign_net,
            mode: model.mode,
            symmetry: model.symmetry,
            sign_mode: model.sign_mode,
            input_width: model.backbone.input_width(),
        })
    }

    /// A deformation path between two registered codes. The sign factor is
    /// resolved here: hub-rule paths need one endpoint at the hub.
    pub fn path<'m>(
        &'m self,
        tape: &mut Tape,
        from: &TapedCode,
        to: &TapedCode,
    ) -> Result<TapedPath<'m>, FlowError> {
        let diff = tape.sub(to.id, from.id);
        let magnitude = tape.norm(diff);
        let ctx = PairContext::new(from.value.clone(), to.value.clone());
        let sign = match self.sign_mode {
            SignMode::HubRule => {
                if ctx.is_identity() {
                    SignFactor::Const(1.0)
                } else if ctx.z_j.is_hub() {
                    SignFactor::Const(1.0)
                } else if ctx.z_i.is_hub() {
                    SignFactor::Const(-1.0)
                } else {
                    return Err(FlowError::HubSignUndefined);
                }
            }
            SignMode::OddMlp => {
                let net = self.sign_net.as_ref().ok_or(FlowError::SignNetMissing)?;
                if ctx.is_identity() {
                    // Zero magnitude already kills the flow.
                    SignFactor::Const(0.0)
                } else {
                    let inv_m = tape.recip(magnitude);
                    let u = tape.scale_by_scalar(diff, inv_m);
                    let s = net.forward(tape, u);
                    SignFactor::Node(s)
                }
            }
        };
        Ok(TapedPath {
            model: self,
            z_from: from.id,
            z_to: to.id,
            magnitude,
            sign,
        })
    }

    pub fn backbone_grads(
        &self,
        grads: &crate::numerics::Gradients,
    ) -> Vec<(Array2<f64>, ndarray::Array1<f64>)> {
        self.backbone.extract_grads(grads)
    }

    /// Sign-net weight gradients (bias slots are zero-pinned constants).
    pub fn sign_grads(
        &self,
        grads: &crate::numerics::Gradients,
    ) -> Option<Vec<(Array2<f64>, ndarray::Array1<f64>)>> {
        self.sign_net.as_ref().map(|net| net.extract_grads(grads))
    }
}

/// One latent-segment flow on the tape.
pub struct TapedPath<'m> {
    model: &'m TapedModel,
    pub z_from: TensorId,
    pub z_to: TensorId,
    magnitude: TensorId,
    sign: SignFactor,
}

impl TapedPath<'_> {
    /// Conditioning row for path time t, with exact codes at the endpoints.
    fn conditioning(&self, tape: &mut Tape, t: f64) -> TensorId {
        if t == 0.0 {
            self.z_from
        } else if t == 1.0 {
            self.z_to
        } else {
            let diff = tape.sub(self.z_to, self.z_from);
            tape.add_scaled(self.z_from, diff, t)
        }
    }

    fn raw_field(&self, tape: &mut Tape, points: TensorId, cond: TensorId) -> TensorId {
        let input = tape.concat_cond(points, cond);
        match self.model.mode {
            FlowMode::Direct => self.model.backbone.forward(tape, input),
            FlowMode::DivergenceFree => {
                let n = tape.value(points).nrows();
                let width = self.model.input_width;
                let mut seed_ids = [TensorId::default(); 3];
                for (axis, id) in seed_ids.iter_mut().enumerate() {
                    let mut s = Array2::zeros((n, width));
                    s.column_mut(axis).fill(1.0);
                    *id = tape.constant(s);
                }
                let (_, t) = self.model.backbone.dual_forward(tape, input, seed_ids);
                tape.curl_assemble(t[0], t[1], t[2])
            }
        }
    }

    fn inner_field(&self, tape: &mut Tape, points: TensorId, cond: TensorId) -> TensorId {
        let raw = self.raw_field(tape, points, cond);
        match self.model.symmetry {
            SymmetryMode::Off => raw,
            SymmetryMode::PlaneYz => {
                let mirrored_pts = tape.mirror_x(points);
                let mirrored = self.raw_field(tape, mirrored_pts, cond);
                tape.plane_sym_combine(raw, mirrored)
            }
        }
    }

    /// Velocity of the batch at path time t as a tape tensor.
    pub fn velocity(&self, tape: &mut Tape, points: TensorId, t: f64) -> TensorId {
        let cond = self.conditioning(tape, t);
        let inner = self.inner_field(tape, points, cond);
        let scaled = tape.scale_by_scalar(inner, self.magnitude);
        match self.sign {
            SignFactor::Const(c) => tape.scale(scaled, c),
            SignFactor::Node(s) => tape.scale_by_scalar(scaled, s),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_code(dim: usize, rng: &mut impl Rng) -> LatentCode {
        LatentCode((0..dim).map(|_| rng.gen_range(-0.4..0.4)).collect())
    }

    #[test]
    fn identical_codes_give_exact_zero_field() {
        let mut r = rng(3);
        let model = FlowModel::init(
            6,
            8,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::Off,
            SignMode::HubRule,
            &mut r,
        )
        .unwrap();
        let z = random_code(6, &mut r);
        let ctx = PairContext::new(z.clone(), z);
        for k in 0..20 {
            let x = Vec3::new(0.1 * k as f64, -0.05 * k as f64, 0.3);
            let v = eval_flow(&model, &ctx, x, 0.37).unwrap();
            assert_eq!(v, Vec3::zeros());
        }
    }

    #[test]
    fn hub_sign_rule_directionality() {
        let mut r = rng(4);
        let model = FlowModel::init(
            4,
            8,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::Off,
            SignMode::HubRule,
            &mut r,
        )
        .unwrap();
        let v = random_code(4, &mut r);
        let hub = LatentCode::hub(4);
        assert_eq!(
            sign_value(&model, &PairContext::new(v.clone(), hub.clone())).unwrap(),
            1.0
        );
        assert_eq!(
            sign_value(&model, &PairContext::new(hub.clone(), v.clone())).unwrap(),
            -1.0
        );
        let w = random_code(4, &mut r);
        assert!(matches!(
            sign_value(&model, &PairContext::new(v, w)),
            Err(FlowError::HubSignUndefined)
        ));
    }

    #[test]
    fn odd_mlp_sign_is_odd_and_zero_at_origin() {
        let mut r = rng(5);
        let model = FlowModel::init(
            5,
            8,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::Off,
            SignMode::OddMlp,
            &mut r,
        )
        .unwrap();
        let net = model.sign_net.as_ref().unwrap();
        for _ in 0..50 {
            let u: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = u.iter().map(|v| -v).collect();
            let s = mlp_forward_generic::<f64>(net, &u)[0];
            let s_neg = mlp_forward_generic::<f64>(net, &neg)[0];
            assert!((s + s_neg).abs() < 1e-14);
        }
        let zero = vec![0.0; 5];
        assert_eq!(mlp_forward_generic::<f64>(net, &zero)[0], 0.0);
    }

    #[test]
    fn negation_symmetry_across_all_modes() {
        let mut r = rng(6);
        for mode in [FlowMode::Direct, FlowMode::DivergenceFree] {
            for symmetry in [SymmetryMode::Off, SymmetryMode::PlaneYz] {
                let model = FlowModel::init(
                    4,
                    6,
                    Activation::Elu,
                    mode,
                    symmetry,
                    SignMode::OddMlp,
                    &mut r,
                )
                .unwrap();
                let z_i = random_code(4, &mut r);
                let z_j = random_code(4, &mut r);
                let fwd = PairContext::new(z_i.clone(), z_j.clone());
                let bwd = fwd.reversed();
                for _ in 0..100 {
                    let x = Vec3::new(
                        r.gen_range(-0.5..0.5),
                        r.gen_range(-0.5..0.5),
                        r.gen_range(-0.5..0.5),
                    );
                    let t: f64 = r.gen_range(0.0..1.0);
                    let vf = eval_flow(&model, &fwd, x, t).unwrap();
                    let vb = eval_flow(&model, &bwd, x, 1.0 - t).unwrap();
                    assert!((vf + vb).norm() < 1e-12, "mode {mode:?} sym {symmetry:?}");
                }
            }
        }
    }

    #[test]
    fn curl_of_rigged_potential_is_analytic() {
        // g(x,y,z) = (0, 0, x) => curl g = (0, -1, 0).
        let mut model = FlowModel {
            backbone: MlpParams::zeros(&[3, 3], Activation::Identity),
            sign_net: None,
            mode: FlowMode::DivergenceFree,
            symmetry: SymmetryMode::Off,
            sign_mode: SignMode::HubRule,
            latent_dim: 0,
            n_f: 1,
        };
        model.backbone.layers[0].weight[[0, 2]] = 1.0;
        for _ in 0..5 {
            let v = curl_potential(&model, Vec3::new(0.3, -0.7, 2.0), &[]).unwrap();
            assert!((v - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-14);
        }

        // g = (-y/2, x/2, 0) => curl g = (0, 0, 1).
        let mut rot = model.clone();
        rot.backbone.layers[0].weight.fill(0.0);
        rot.backbone.layers[0].weight[[1, 0]] = -0.5;
        rot.backbone.layers[0].weight[[0, 1]] = 0.5;
        let v = curl_potential(&rot, Vec3::new(0.9, 0.1, -0.4), &[]).unwrap();
        assert!((v - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn divergence_of_curl_vanishes() {
        let mut r = rng(7);
        let model = FlowModel::init(
            5,
            10,
            Activation::Elu,
            FlowMode::DivergenceFree,
            SymmetryMode::Off,
            SignMode::HubRule,
            &mut r,
        )
        .unwrap();
        let cond: Vec<f64> = (0..5).map(|_| r.gen_range(-0.3..0.3)).collect();
        for _ in 0..200 {
            let x = Vec3::new(
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
            );
            let div = divergence(&model, x, &cond).unwrap();
            assert!(div.abs() < 1e-9, "divergence {div}");
        }
    }

    #[test]
    fn symmetrized_field_mirrors_exactly() {
        let mut r = rng(8);
        let model = FlowModel::init(
            4,
            8,
            Activation::Elu,
            FlowMode::Direct,
            SymmetryMode::PlaneYz,
            SignMode::HubRule,
            &mut r,
        )
        .unwrap();
        let cond: Vec<f64> = (0..4).map(|_| r.gen_range(-0.3..0.3)).collect();
        for _ in 0..100 {
            let p = Vec3::new(
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.5..0.5),
            );
            let v = symmetrize(&model, p, &cond).unwrap();
            let vm = symmetrize(&model, Vec3::new(-p.x, p.y, p.z), &cond).unwrap();
            assert!((vm - Vec3::new(-v.x, v.y, v.z)).norm() < 1e-12);
        }
        // On the plane the x component vanishes exactly.
        let on_plane = symmetrize(&model, Vec3::new(0.0, 0.3, -0.2), &cond).unwrap();
        assert_eq!(on_plane.x, 0.0);
    }

    #[test]
    fn symmetrize_fixes_already_symmetric_fields() {
        // A constant field with zero x component is its own symmetrization.
        let mut model = FlowModel {
            backbone: MlpParams::zeros(&[3, 3], Activation::Identity),
            sign_net: None,
            mode: FlowMode::Direct,
            symmetry: SymmetryMode::PlaneYz,
            sign_mode: SignMode::HubRule,
            latent_dim: 0,
            n_f: 1,
        };
        model.backbone.layers[0].bias[1] = 0.7;
        model.backbone.layers[0].bias[2] = -0.2;
        let p = Vec3::new(0.4, 0.1, 0.9);
        let direct = raw_field_generic::<f64>(&model, [p.x, p.y, p.z], &[]);
        let sym = symmetrize(&model, p, &[]).unwrap();
        assert_eq!(sym, Vec3::new(direct[0], direct[1], direct[2]));
    }

    #[test]
    fn divfree_relu_rejected() {
        let mut r = rng(9);
        assert!(matches!(
            FlowModel::init(
                4,
                8,
                Activation::Relu,
                FlowMode::DivergenceFree,
                SymmetryMode::Off,
                SignMode::HubRule,
                &mut r,
            ),
            Err(FlowError::DivergenceFreeNeedsC1 { .. })
        ));
    }

    #[test]
    fn batch_matches_single_point() {
        let mut r = rng(10);
        for mode in [FlowMode::Direct, FlowMode::DivergenceFree] {
            for symmetry in [SymmetryMode::Off, SymmetryMode::PlaneYz] {
                let model = FlowModel::init(
                    4,
                    6,
                    Activation::Elu,
                    mode,
                    symmetry,
                    SignMode::HubRule,
                    &mut r,
                )
                .unwrap();
                let ctx = PairContext::new(random_code(4, &mut r), LatentCode::hub(4));
                let pts = Array2::from_shape_fn((7, 3), |_| r.gen_range(-0.5..0.5));
                let batch = eval_flow_batch(&model, &ctx, &pts, 0.42).unwrap();
                for k in 0..7 {
                    let x = Vec3::new(pts[[k, 0]], pts[[k, 1]], pts[[k, 2]]);
                    let single = eval_flow(&model, &ctx, x, 0.42).unwrap();
                    for c in 0..3 {
                        assert!((batch[[k, c]] - single[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn taped_velocity_matches_batch_eval() {
        let mut r = rng(11);
        for mode in [FlowMode::Direct, FlowMode::DivergenceFree] {
            for symmetry in [SymmetryMode::Off, SymmetryMode::PlaneYz] {
                let model = FlowModel::init(
                    3,
                    6,
                    Activation::Elu,
                    mode,
                    symmetry,
                    SignMode::HubRule,
                    &mut r,
                )
                .unwrap();
                let z = random_code(3, &mut r);
                let hub = LatentCode::hub(3);
                let ctx = PairContext::new(z.clone(), hub.clone());
                let pts = Array2::from_shape_fn((5, 3), |_| r.gen_range(-0.5..0.5));
                let expected = eval_flow_batch(&model, &ctx, &pts, 0.3).unwrap();

                let mut tape = Tape::new();
                let taped = TapedModel::register(&mut tape, &model, true).unwrap();
                let from = TapedCode::variable(&mut tape, &z);
                let to = TapedCode::constant(&mut tape, &hub);
                let path = taped.path(&mut tape, &from, &to).unwrap();
                let pts_id = tape.constant(pts.clone());
                let v = path.velocity(&mut tape, pts_id, 0.3);
                let got = tape.value(v);
                for k in 0..5 {
                    for c in 0..3 {
                        assert!(
                            (got[[k, c]] - expected[[k, c]]).abs() < 1e-12,
                            "mode {mode:?} sym {symmetry:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conditioning_is_exact_at_matched_endpoints() {
        let mut r = rng(12);
        let z_i = random_code(6, &mut r);
        let z_j = random_code(6, &mut r);
        let alpha = 0.37;
        let ij = PairContext::new(z_i.clone(), z_j.clone());
        let z_k = LatentCode(ij.conditioning(alpha));
        let ik = PairContext::new(z_i, z_k.clone());
        assert_eq!(ij.conditioning(alpha), ik.conditioning(1.0));
        assert_eq!(ik.conditioning(1.0), z_k.0);
    }
}
