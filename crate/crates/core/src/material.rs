//! Elasto-plastic damage matrix, transversely isotropic fibers and a bilinear
//! cohesive interface, driven pixel by pixel under incrementally applied strain.
//!
//! Stresses are in MPa, cohesive openings in nm and fracture energy in N/m.
//! Vectors use Voigt order `[11, 22, 12]`; strains carry engineering shear γ12.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fields::{DeformationSequence, FieldFrame, Grid};
use crate::microgen::MicrostructureGrid;
use crate::{Error, Result};

pub type Voigt = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixParams {
    /// GPa
    pub young_modulus: f64,
    pub poisson_ratio: f64,
    /// Uniaxial compressive yield strength, MPa.
    pub sigma_c: f64,
    /// Uniaxial tensile yield strength, MPa.
    pub sigma_t: f64,
    pub eps_c: f64,
    pub eps_t: f64,
    /// Hardening coefficient `a`.
    pub hardening_a: f64,
    /// Hardening exponent `b`.
    pub hardening_b: f64,
    /// Damage constant `A`.
    pub damage_a: f64,
    /// Damage constant `B`.
    pub damage_b: f64,
    /// Fluidity, 1/pseudo-time.
    pub fluidity: f64,
    /// Damage initiation threshold τ̄0 (√MPa).
    pub tau0: f64,
}

impl Default for MatrixParams {
    fn default() -> Self {
        MatrixParams {
            young_modulus: 3.9,
            poisson_ratio: 0.39,
            sigma_c: 79.0,
            sigma_t: 62.0,
            eps_c: 0.35,
            eps_t: 0.04,
            hardening_a: 20000.0,
            hardening_b: 12.0,
            damage_a: 0.95,
            damage_b: 2.0,
            fluidity: 10.0,
            tau0: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiberParams {
    /// Axial modulus, GPa.
    pub e1: f64,
    /// Transverse modulus, GPa.
    pub e2: f64,
    /// GPa
    pub g12: f64,
    /// GPa
    pub g23: f64,
    pub nu12: f64,
}

impl Default for FiberParams {
    fn default() -> Self {
        FiberParams {
            e1: 233.0,
            e2: 23.1,
            g12: 8.96,
            g23: 8.27,
            nu12: 0.2,
        }
    }
}

impl FiberParams {
    /// In-plane Poisson ratio of the transverse-isotropic 2-3 plane.
    pub fn nu23(&self) -> f64 {
        self.e2 / (2.0 * self.g23) - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterfaceParams {
    /// Cohesive strength, MPa.
    pub t_c: f64,
    /// Opening at peak traction, nm.
    pub delta_c: f64,
    /// Fracture energy, N/m.
    pub g_c: f64,
}

impl Default for InterfaceParams {
    fn default() -> Self {
        InterfaceParams {
            t_c: 70.0,
            delta_c: 1.0,
            g_c: 8.75,
        }
    }
}

/// Pseudo-time stepping and strain-partitioning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverParams {
    /// Pseudo-time step of one damage update.
    pub dt: f64,
    /// Applied strain increment between frames.
    pub d_eps: f64,
    /// Final applied strain.
    pub eps_f: f64,
    /// Damage/plasticity updates per frame.
    pub substeps: usize,
    pub c_matrix: f64,
    pub c_fiber: f64,
    /// Gain of the local fiber fraction in the matrix concentration factor.
    pub kappa_matrix: f64,
    pub kappa_fiber: f64,
    /// Gaussian length of the fiber-proximity field, µm.
    pub proximity_length: f64,
    /// Reduction of lateral contraction by nearby fibers.
    pub lateral_constraint: f64,
    /// Shear strain generated by fiber-arrangement asymmetry.
    pub shear_coupling: f64,
    /// Load shed per unit of peak matrix damage after localization.
    pub localization_gain: f64,
    pub psi_min: f64,
    pub damage_enabled: bool,
    pub max_iterations: usize,
    /// Stress residual, MPa.
    pub tolerance: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        DriverParams {
            dt: 0.01,
            d_eps: 0.0002,
            eps_f: 0.012,
            substeps: 10,
            c_matrix: 1.5,
            c_fiber: 0.35,
            kappa_matrix: 4.0,
            kappa_fiber: 0.5,
            proximity_length: 3.0,
            lateral_constraint: 0.6,
            shear_coupling: 4.0,
            localization_gain: 2.0,
            psi_min: 0.05,
            damage_enabled: true,
            max_iterations: 50,
            tolerance: 1e-8,
        }
    }
}

impl DriverParams {
    pub fn steps(&self) -> usize {
        (self.eps_f / self.d_eps).round() as usize
    }
}

/// All constitutive constants, in the units of the published tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialParams {
    pub matrix: MatrixParams,
    pub fiber: FiberParams,
    pub interface: InterfaceParams,
    pub driver: DriverParams,
}

impl MaterialParams {
    pub fn validate(&self) -> Result<()> {
        let m = &self.matrix;
        let f = &self.fiber;
        let i = &self.interface;
        let d = &self.driver;
        let bad = |what: &str| Err(Error::Validation(format!("material parameters: {what}")));
        if [m.young_modulus, f.e1, f.e2, f.g12, f.g23].iter().any(|&v| !(v > 0.0)) {
            return bad("moduli must be positive");
        }
        if !(m.poisson_ratio > 0.0 && m.poisson_ratio < 0.5) || !(f.nu12 > 0.0 && f.nu12 < 0.5) {
            return bad("Poisson ratios must lie in (0, 0.5)");
        }
        if !(f.nu23() > -1.0 && f.nu23() < 0.5) {
            return bad("E2/(2 G23) - 1 must lie in (-1, 0.5)");
        }
        if !(m.sigma_c > m.sigma_t && m.sigma_t > 0.0) {
            return bad("need sigma_c > sigma_t > 0");
        }
        if !(m.eps_c > m.eps_t && m.eps_t > 0.0) {
            return bad("need eps_c > eps_t > 0");
        }
        if !(m.damage_a > 0.0 && m.damage_a < 1.0) || !(m.damage_b > 0.0) {
            return bad("need 0 < A < 1 and B > 0");
        }
        if !(m.fluidity > 0.0) || !(m.tau0 > 0.0) {
            return bad("fluidity and tau0 must be positive");
        }
        if !(i.t_c > 0.0 && i.delta_c > 0.0 && i.g_c > 0.0) {
            return bad("cohesive parameters must be positive");
        }
        if !(softening_end(i.t_c, i.g_c) > i.delta_c) {
            return bad("2 G_c / T_c must exceed delta_c");
        }
        if !(d.dt > 0.0 && d.d_eps > 0.0 && d.eps_f >= d.d_eps && d.substeps > 0) {
            return bad("driver steps must be positive");
        }
        if !(d.c_matrix > 0.0 && d.c_fiber > 0.0 && d.proximity_length > 0.0) {
            return bad("concentration factors must be positive");
        }
        if !(d.psi_min > 0.0 && d.psi_min <= 1.0) || d.localization_gain < 0.0 {
            return bad("psi_min in (0, 1] and localization_gain >= 0");
        }
        if d.max_iterations == 0 || !(d.tolerance > 0.0) {
            return bad("iteration cap and tolerance must be positive");
        }
        Ok(())
    }

    /// Reads a `key = value` config with `[matrix]`, `[fiber]`, `[interface]`
    /// and `[driver]` sections. Missing keys keep the table defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: MaterialParams = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn matrix_stiffness(&self) -> Mat3 {
        plane_stress_stiffness(self.matrix.young_modulus * 1e3, self.matrix.poisson_ratio)
    }

    pub fn fiber_stiffness(&self) -> Mat3 {
        plane_stress_stiffness(self.fiber.e2 * 1e3, self.fiber.nu23())
    }

    pub fn cohesive_law(&self) -> CohesiveLaw {
        CohesiveLaw::new(self.interface.t_c, self.interface.delta_c, self.interface.g_c)
    }
}

/// Isotropic plane-stress stiffness (engineering shear).
pub fn plane_stress_stiffness(e: f64, nu: f64) -> Mat3 {
    let c = e / (1.0 - nu * nu);
    [[c, c * nu, 0.0], [c * nu, c, 0.0], [0.0, 0.0, c * (1.0 - nu) / 2.0]]
}

fn mat_vec(m: &Mat3, v: &Voigt) -> Voigt {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn dot(a: &Voigt, b: &Voigt) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Second deviatoric invariant for plane stress (σ33 = 0).
fn j2_stress(s: &Voigt) -> f64 {
    (s[0] * s[0] - s[0] * s[1] + s[1] * s[1]) / 3.0 + s[2] * s[2]
}

/// Tschoegl yield function φ = 6 J2 + 2 I1 (σc − σt) − 2 σc σt.
pub fn yield_phi(stress: &Voigt, sigma_c: f64, sigma_t: f64) -> f64 {
    6.0 * j2_stress(stress) + 2.0 * (stress[0] + stress[1]) * (sigma_c - sigma_t) - 2.0 * sigma_c * sigma_t
}

/// ∂f/∂σ of f = 6 J2 + 2 I1 (σc − σt), shear entry conjugate to γ12.
pub fn yield_gradient(stress: &Voigt, sigma_c: f64, sigma_t: f64) -> Voigt {
    let k = 2.0 * (sigma_c - sigma_t);
    [
        2.0 * (2.0 * stress[0] - stress[1]) + k,
        2.0 * (2.0 * stress[1] - stress[0]) + k,
        12.0 * stress[2],
    ]
}

/// Tangent hardening slope H = a (σ_Y0 / σ_v)^b.
pub fn hardening_h(sigma_y0: f64, sigma_v: f64, a: f64, b: f64) -> Result<f64> {
    if !(sigma_v > 0.0) {
        return Err(Error::Domain(format!("von Mises stress must be positive, got {sigma_v}")));
    }
    Ok(a * (sigma_y0 / sigma_v).powf(b))
}

/// D^ep = D − (D n)(nᵀ D) / (H + nᵀ D n) with n = ∂f/∂σ at `stress`.
pub fn elastoplastic_stiffness(d: &Mat3, stress: &Voigt, h: f64, sigma_c: f64, sigma_t: f64) -> Result<Mat3> {
    let n = yield_gradient(stress, sigma_c, sigma_t);
    let dn = mat_vec(d, &n);
    let denom = h + dot(&n, &dn);
    if !(denom > 0.0) {
        return Err(Error::SingularDenominator(denom));
    }
    let mut out = *d;
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= dn[i] * dn[j] / denom;
        }
    }
    Ok(out)
}

/// Strain-space Tschoegl criterion φ' = 6 J2' + 2 I1' (εc − εt) − 2 εc εt.
pub fn damage_phi_prime(strain: &Voigt, eps_c: f64, eps_t: f64) -> f64 {
    let e12 = 0.5 * strain[2];
    let (a, b) = (strain[0], strain[1]);
    let j2 = ((a - b) * (a - b) + a * a + b * b) / 6.0 + e12 * e12;
    6.0 * j2 + 2.0 * (a + b) * (eps_c - eps_t) - 2.0 * eps_c * eps_t
}

/// G = 1 − τ̄0 (1 − A)/τ̄ − A exp(B (τ̄0 − τ̄)).
pub fn damage_g(tau: f64, tau0: f64, a: f64, b: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    Ok(1.0 - tau0 * (1.0 - a) / tau - a * (b * (tau0 - tau)).exp())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DamageState {
    pub damage: f64,
    pub threshold: f64,
}

/// Viscous damage step; only fires when G exceeds the current threshold.
pub fn update_damage_and_threshold(state: DamageState, g: f64, mu: f64, dt: f64) -> DamageState {
    if g <= state.threshold {
        return state;
    }
    let denom = 1.0 + mu * dt;
    DamageState {
        damage: (state.damage + dt * (g - state.threshold) / denom).clamp(0.0, 1.0),
        threshold: (state.threshold + mu * dt * g) / denom,
    }
}

pub fn damaged_stiffness(dep: &Mat3, d: f64) -> Mat3 {
    let mut out = *dep;
    for row in &mut out {
        for v in row {
            *v *= 1.0 - d;
        }
    }
    out
}

pub fn effective_opening(delta_n: f64, delta_t: f64) -> f64 {
    delta_n.hypot(delta_t)
}

/// Opening (nm) where the bilinear law reaches zero traction: 2 G_c / T_c.
pub fn softening_end(t_c: f64, g_c: f64) -> f64 {
    // N/m over MPa is mm·1e-3... expressed directly: (N/m) / (N/mm²) = 1e-3 mm = 1e6 nm.
    2.0 * g_c / t_c * 1e3
}

/// Bilinear traction–separation law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohesiveLaw {
    pub t_c: f64,
    pub delta_c: f64,
    pub delta_f: f64,
}

impl CohesiveLaw {
    pub fn new(t_c: f64, delta_c: f64, g_c: f64) -> Self {
        CohesiveLaw {
            t_c,
            delta_c,
            delta_f: softening_end(t_c, g_c),
        }
    }

    pub fn traction(&self, delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else if delta <= self.delta_c {
            self.t_c * delta / self.delta_c
        } else if delta < self.delta_f {
            self.t_c * (self.delta_f - delta) / (self.delta_f - self.delta_c)
        } else {
            0.0
        }
    }

    /// Softening progress in [0, 1] for a historical maximum opening.
    pub fn damage(&self, delta_max: f64) -> f64 {
        ((delta_max - self.delta_c) / (self.delta_f - self.delta_c)).clamp(0.0, 1.0)
    }
}

pub fn cohesive_traction(delta: f64, t_c: f64, delta_c: f64, g_c: f64) -> f64 {
    CohesiveLaw::new(t_c, delta_c, g_c).traction(delta)
}

pub fn von_mises(s11: f64, s22: f64, s12: f64) -> f64 {
    (s11 * s11 - s11 * s22 + s22 * s22 + 3.0 * s12 * s12).max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Matrix,
    Fiber,
    Interface,
}

/// Constitutive state of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointState {
    pub phase: Phase,
    /// Nominal stress (after damage).
    pub stress: Voigt,
    /// Undamaged (effective) stress of the matrix.
    pub effective_stress: Voigt,
    pub strain: Voigt,
    pub eq_plastic_strain: f64,
    pub damage: f64,
    pub threshold: f64,
    /// Largest cohesive opening seen so far, nm.
    pub max_opening: f64,
}

impl PointState {
    pub fn new(phase: Phase) -> Self {
        PointState {
            phase,
            stress: [0.0; 3],
            effective_stress: [0.0; 3],
            strain: [0.0; 3],
            eq_plastic_strain: 0.0,
            damage: 0.0,
            threshold: 0.0,
            max_opening: 0.0,
        }
    }
}

/// Precomputed per-pixel loading direction and interface normal.
#[derive(Debug, Clone, Copy)]
struct PixelLoad {
    /// Strain per unit applied strain.
    direction: Voigt,
    normal: [f64; 2],
}

/// Compiled constants in MPa/nm used inside the stepping loop.
#[derive(Debug, Clone)]
pub struct Oracle {
    params: MaterialParams,
    d_matrix: Mat3,
    d_fiber: Mat3,
    law: CohesiveLaw,
}

impl Oracle {
    pub fn new(params: &MaterialParams) -> Result<Self> {
        params.validate()?;
        Ok(Oracle {
            params: params.clone(),
            d_matrix: params.matrix_stiffness(),
            d_fiber: params.fiber_stiffness(),
            law: params.cohesive_law(),
        })
    }

    pub fn params(&self) -> &MaterialParams {
        &self.params
    }

    /// Effective-stress update of a matrix point for strain increment `de`.
    /// Returns the plastic multiplier, or `None` if the iteration stalls.
    pub fn matrix_stress_update(&self, sigma0: &Voigt, de: &Voigt) -> Result<Option<(Voigt, f64)>> {
        let m = &self.params.matrix;
        let d = &self.d_matrix;
        let u = mat_vec(d, de);
        let trial = [sigma0[0] + u[0], sigma0[1] + u[1], sigma0[2] + u[2]];
        if yield_phi(&trial, m.sigma_c, m.sigma_t) <= 0.0 {
            return Ok(Some((trial, 0.0)));
        }
        // Elastic fraction α: φ(σ0 + α u) = 0 is quadratic in α.
        let phi0 = yield_phi(sigma0, m.sigma_c, m.sigma_t);
        let alpha = if phi0 < 0.0 {
            let qu = [u[0] / 3.0 - u[1] / 6.0, u[1] / 3.0 - u[0] / 6.0, u[2]];
            let p2 = 6.0 * dot(&u, &qu);
            let p1 = 12.0 * dot(sigma0, &qu) + 2.0 * (m.sigma_c - m.sigma_t) * (u[0] + u[1]);
            let root = if p2 > 0.0 {
                (-p1 + (p1 * p1 - 4.0 * p2 * phi0).max(0.0).sqrt()) / (2.0 * p2)
            } else {
                -phi0 / p1
            };
            root.clamp(0.0, 1.0)
        } else {
            0.0
        };
        let start = [sigma0[0] + alpha * u[0], sigma0[1] + alpha * u[1], sigma0[2] + alpha * u[2]];
        let rest = [(1.0 - alpha) * de[0], (1.0 - alpha) * de[1], (1.0 - alpha) * de[2]];

        let tangent = |at: &Voigt| -> Result<Mat3> {
            let sv = von_mises(at[0], at[1], at[2]);
            let h = hardening_h(m.sigma_t, sv, m.hardening_a, m.hardening_b)?;
            elastoplastic_stiffness(d, at, h, m.sigma_c, m.sigma_t)
        };
        let advance = |at: &Voigt| -> Result<Voigt> {
            let dep = tangent(at)?;
            let ds = mat_vec(&dep, &rest);
            Ok([start[0] + ds[0], start[1] + ds[1], start[2] + ds[2]])
        };

        let mut current = advance(&start)?;
        let tol = self.params.driver.tolerance;
        for _ in 0..self.params.driver.max_iterations {
            let mid = [
                0.5 * (start[0] + current[0]),
                0.5 * (start[1] + current[1]),
                0.5 * (start[2] + current[2]),
            ];
            let next = advance(&mid)?;
            let change = (0..3).map(|k| (next[k] - current[k]).abs()).fold(0.0, f64::max);
            current = next;
            if change < tol {
                let n = yield_gradient(&mid, m.sigma_c, m.sigma_t);
                let dn = mat_vec(d, &n);
                let h = hardening_h(m.sigma_t, von_mises(mid[0], mid[1], mid[2]), m.hardening_a, m.hardening_b)?;
                let lambda = (dot(&dn, &rest) / (h + dot(&n, &dn))).max(0.0);
                let n_norm = dot(&n, &n).sqrt();
                return Ok(Some((current, lambda * n_norm)));
            }
        }
        Ok(None)
    }

    /// Advances one continuum matrix point: plasticity, then damage.
    pub fn step_matrix(&self, state: &mut PointState, de: &Voigt, allow_damage: bool) -> Result<bool> {
        let m = &self.params.matrix;
        let drv = &self.params.driver;
        let Some((eff, dp)) = self.matrix_stress_update(&state.effective_stress, de)? else {
            return Ok(false);
        };
        state.effective_stress = eff;
        state.eq_plastic_strain += dp;
        for k in 0..3 {
            state.strain[k] += de[k];
        }
        if allow_damage && drv.damage_enabled && damage_phi_prime(&state.strain, m.eps_c, m.eps_t) > 0.0 {
            let energy = dot(&state.strain, &state.effective_stress);
            if energy > 0.0 {
                let g = damage_g(energy.sqrt(), m.tau0, m.damage_a, m.damage_b)?;
                let next = update_damage_and_threshold(
                    DamageState {
                        damage: state.damage,
                        threshold: state.threshold,
                    },
                    g,
                    m.fluidity,
                    drv.dt,
                );
                state.damage = next.damage;
                state.threshold = next.threshold;
            }
        }
        let keep = 1.0 - state.damage;
        state.stress = [keep * eff[0], keep * eff[1], keep * eff[2]];
        Ok(true)
    }

    fn step_fiber(&self, state: &mut PointState, de: &Voigt) {
        for k in 0..3 {
            state.strain[k] += de[k];
        }
        state.stress = mat_vec(&self.d_fiber, &state.strain);
        state.effective_stress = state.stress;
    }

    fn step_interface(&self, state: &mut PointState, de: &Voigt, normal: [f64; 2], pixel_nm: f64) {
        for k in 0..3 {
            state.strain[k] += de[k];
        }
        let [nx, ny] = normal;
        let (tx, ty) = (-ny, nx);
        let (e11, e22, e12) = (state.strain[0], state.strain[1], 0.5 * state.strain[2]);
        let e_n = e11 * nx * nx + e22 * ny * ny + 2.0 * e12 * nx * ny;
        let e_t = e11 * nx * tx + e22 * ny * ty + e12 * (nx * ty + ny * tx);
        let delta_n = e_n * pixel_nm;
        let delta_t = 2.0 * e_t * pixel_nm;
        let delta = effective_opening(delta_n.max(0.0), delta_t);
        let law = &self.law;
        state.max_opening = state.max_opening.max(delta);
        let magnitude = if delta >= state.max_opening {
            law.traction(delta)
        } else if state.max_opening > 0.0 {
            law.traction(state.max_opening) * delta / state.max_opening
        } else {
            0.0
        };
        let (mut t_n, t_t) = if delta > 0.0 {
            (magnitude * delta_n.max(0.0) / delta, magnitude * delta_t / delta)
        } else {
            (0.0, 0.0)
        };
        if delta_n < 0.0 {
            // Closed interface: penalty contact at the initial cohesive stiffness.
            t_n = law.t_c / law.delta_c * delta_n;
        }
        state.stress = [
            t_n * nx * nx + 2.0 * t_t * nx * tx,
            t_n * ny * ny + 2.0 * t_t * ny * ty,
            t_n * nx * ny + t_t * (nx * ty + tx * ny),
        ];
        state.effective_stress = state.stress;
        state.damage = law.damage(state.max_opening);
    }

    /// Runs the pseudo-time-stepped driver over a rasterized microstructure.
    ///
    /// Every pixel receives `ε · c_phase · (1 + κ_phase g)` along a fixed
    /// direction, where `g` is the Gaussian-smoothed fiber fraction. Once a
    /// matrix pixel damages, the damaged pixels keep integrating strain and
    /// damage, and every pixel sheds load by `ψ = max(ψ_min, 1 − gain · max d)`
    /// relative to its stress at that frame; damaged pixels are additionally
    /// scaled by their intact fraction `1 − d`.
    pub fn simulate(&self, grid: &MicrostructureGrid) -> Result<DeformationSequence> {
        let n = grid.size();
        let drv = &self.params.driver;
        let h_um = grid.pixel_size();
        let pixel_nm = h_um * 1e3;
        let loads = self.pixel_loads(&grid.pixels, h_um);
        let phases = classify_phases(&grid.pixels);

        let mut states: Vec<PointState> = phases.iter().map(|&p| PointState::new(p)).collect();
        let steps = drv.steps();
        let sub = drv.d_eps / drv.substeps as f64;

        let mut frames = Vec::with_capacity(steps + 1);
        frames.push(frame_from_states(0.0, &states, n));

        let mut process: Option<Vec<bool>> = None;
        let mut bulk_ref: Vec<Voigt> = Vec::new();
        let mut psi_ref = 1.0;

        for t in 1..=steps {
            let active = process.clone();
            let results: Vec<Result<()>> = states
                .par_chunks_mut(n)
                .zip(loads.par_chunks(n))
                .enumerate()
                .map(|(row, (state_row, load_row))| {
                    for (col, (st, ld)) in state_row.iter_mut().zip(load_row).enumerate() {
                        let idx = row * n + col;
                        if let Some(mask) = &active {
                            if !mask[idx] {
                                continue;
                            }
                        }
                        let de = [ld.direction[0] * sub, ld.direction[1] * sub, ld.direction[2] * sub];
                        for _ in 0..drv.substeps {
                            match st.phase {
                                Phase::Fiber => self.step_fiber(st, &de),
                                Phase::Interface => self.step_interface(st, &de, ld.normal, pixel_nm),
                                Phase::Matrix => {
                                    if !self.step_matrix(st, &de, true)? {
                                        return Err(Error::NonConvergence { row, col, frame: t });
                                    }
                                }
                            }
                        }
                    }
                    Ok(())
                })
                .collect();
            results.into_iter().collect::<Result<Vec<()>>>()?;

            let omega = states
                .iter()
                .filter(|s| s.phase == Phase::Matrix)
                .map(|s| s.damage)
                .fold(0.0, f64::max);
            let psi = (1.0 - drv.localization_gain * omega).max(drv.psi_min);

            match &process {
                None if omega > 0.0 => {
                    let mask: Vec<bool> = states
                        .iter()
                        .map(|s| s.phase == Phase::Matrix && s.damage > 0.0)
                        .collect();
                    bulk_ref = states
                        .iter()
                        .zip(&mask)
                        .map(|(s, &m)| if m { s.effective_stress } else { s.stress })
                        .collect();
                    psi_ref = psi;
                    process = Some(mask);
                }
                Some(mask) => {
                    let scale = psi / psi_ref;
                    for ((st, &m), r) in states.iter_mut().zip(mask).zip(&bulk_ref) {
                        let f = if m { scale * (1.0 - st.damage) } else { scale };
                        st.stress = [r[0] * f, r[1] * f, r[2] * f];
                    }
                }
                None => {}
            }
            frames.push(frame_from_states(t as f64 * drv.d_eps, &states, n));
        }

        DeformationSequence::from_frames(
            format!("seed-{}", grid.layout.seed),
            grid.layout.seed,
            grid.pixels.clone(),
            frames,
        )
    }

    fn pixel_loads(&self, pixels: &Grid, h_um: f64) -> Vec<PixelLoad> {
        let drv = &self.params.driver;
        let n = pixels.nrows();
        let g = proximity_field(pixels, drv.proximity_length / h_um);
        let nu_m = self.params.matrix.poisson_ratio;
        let nu_f = self.params.fiber.nu23();
        let len2 = drv.proximity_length * drv.proximity_length;
        let clamp = |k: isize| k.clamp(0, n as isize - 1) as usize;
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let gx = (g[[i, clamp(j as isize + 1)]] - g[[i, clamp(j as isize - 1)]]) / (2.0 * h_um);
                let gy = (g[[clamp(i as isize + 1), j]] - g[[clamp(i as isize - 1), j]]) / (2.0 * h_um);
                let local = g[[i, j]];
                let is_fiber = pixels[[i, j]] > 0.5;
                let (c, kappa, nu) = if is_fiber {
                    (drv.c_fiber, drv.kappa_fiber, nu_f)
                } else {
                    (drv.c_matrix, drv.kappa_matrix, nu_m)
                };
                let factor = c * (1.0 + kappa * local);
                let lateral = -nu * (1.0 - drv.lateral_constraint * local);
                let shear = drv.shear_coupling * gx * gy * len2;
                let norm = gx.hypot(gy);
                let normal = if norm > 1e-12 { [gx / norm, gy / norm] } else { [1.0, 0.0] };
                out.push(PixelLoad {
                    direction: [factor, factor * lateral, factor * shear],
                    normal,
                });
            }
        }
        out
    }
}

/// Matrix pixels 4-adjacent to a fiber form the cohesive band.
pub fn classify_phases(pixels: &Grid) -> Vec<Phase> {
    let n = pixels.nrows();
    let fiber = |i: usize, j: usize| pixels[[i, j]] > 0.5;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let phase = if fiber(i, j) {
                Phase::Fiber
            } else if (i > 0 && fiber(i - 1, j))
                || (i + 1 < n && fiber(i + 1, j))
                || (j > 0 && fiber(i, j - 1))
                || (j + 1 < n && fiber(i, j + 1))
            {
                Phase::Interface
            } else {
                Phase::Matrix
            };
            out.push(phase);
        }
    }
    out
}

/// Gaussian-smoothed fiber indicator (local fiber fraction), edge-clamped.
/// Mirrored neighbors are summed in pairs so a left-right flip of the input
/// flips the output bit for bit.
pub fn proximity_field(pixels: &Grid, sigma_px: f64) -> Array2<f64> {
    let n = pixels.nrows();
    let radius = (3.0 * sigma_px).ceil().max(1.0) as usize;
    let mut w: Vec<f64> = (0..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let total = w[0] + 2.0 * w[1..].iter().sum::<f64>();
    for v in &mut w {
        *v /= total;
    }
    let clamp = |k: isize| k.clamp(0, n as isize - 1) as usize;
    let src = pixels.mapv(|v| v as f64);
    let mut horiz = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = w[0] * src[[i, j]];
            for (k, wk) in w.iter().enumerate().skip(1) {
                let k = k as isize;
                acc += wk * (src[[i, clamp(j as isize + k)]] + src[[i, clamp(j as isize - k)]]);
            }
            horiz[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = w[0] * horiz[[i, j]];
            for (k, wk) in w.iter().enumerate().skip(1) {
                let k = k as isize;
                acc += wk * (horiz[[clamp(i as isize + k), j]] + horiz[[clamp(i as isize - k), j]]);
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn frame_from_states(strain: f64, states: &[PointState], n: usize) -> FieldFrame {
    let mut f = FieldFrame::zeros(strain, n);
    for (idx, s) in states.iter().enumerate() {
        let (i, j) = (idx / n, idx % n);
        f.s11[[i, j]] = s.stress[0] as f32;
        f.s22[[i, j]] = s.stress[1] as f32;
        f.s12[[i, j]] = s.stress[2] as f32;
        f.sv[[i, j]] = von_mises(s.stress[0], s.stress[1], s.stress[2]) as f32;
        f.damage[[i, j]] = s.damage as f32;
    }
    f
}

/// Ground-truth deformation history of one microstructure.
pub fn simulate_case(grid: &MicrostructureGrid, params: &MaterialParams) -> Result<DeformationSequence> {
    Oracle::new(params)?.simulate(grid)
}
