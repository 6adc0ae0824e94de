//! Per-link processing before belief propagation.
//!
//! Node `tx` transmits a training block from each of its `N_tx` antennas and
//! node `rx` receives it on each of its `N_rx` antennas:
//!
//! ```text
//! y_k(t) = Σ_q h_{q,k} e^{j ε_{q,k} t} z_q(t) + ξ_k(t),   t = 1..N
//! ε_{q,k} = ω^tx_q − ω^rx_k
//! ```
//!
//! Each receive antenna is an independent MISO problem. The relative offsets
//! are stacked receive-antenna-major, `r = [ε̂_1ᵀ, …, ε̂_{N_rx}ᵀ]ᵀ` with
//! `ε̂_k = [ε_{1,k}, …, ε_{N_tx,k}]ᵀ`, so row `k·N_tx + q` of the linear model
//! `r = A_tx ω_tx + A_rx ω_rx + n` reads `ω^tx_q − ω^rx_k`.
//!
//! Units: offsets in radians/sample, powers linear. SNR is `1/σ²` with unit
//! power per transmit antenna and `E|h|² = 1`.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{block_diag, spd_inverse, symmetrize};
use crate::topology::{NetworkGraph, NodeId};

/// Default half-width of the uniform CFO draw, `2π·0.05`.
pub const DEFAULT_CFO_HALF_RANGE: f64 = 2.0 * PI * 0.05;

pub fn snr_db_to_noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscillatorState {
    pub node: NodeId,
    pub omega: DVector<f64>,
}

impl OscillatorState {
    pub fn new(node: NodeId, omega: DVector<f64>) -> Result<Self> {
        if omega.iter().any(|w| !w.is_finite() || w.abs() > PI) {
            return Err(Error::InvalidInput(format!(
                "oscillator offsets of node {} must lie in [-π, π]",
                node + 1
            )));
        }
        Ok(Self { node, omega })
    }

    pub fn zero(node: NodeId, antennas: usize) -> Self {
        Self {
            node,
            omega: DVector::zeros(antennas),
        }
    }
}

/// Independent uniform offsets in `[-half_range, half_range]` for every
/// antenna; the reference node is pinned to zero.
pub fn draw_oscillators<R: Rng + ?Sized>(
    graph: &NetworkGraph,
    half_range: f64,
    rng: &mut R,
) -> Vec<OscillatorState> {
    (0..graph.num_nodes())
        .map(|i| {
            let n = graph.antennas(i);
            if i == graph.reference() {
                OscillatorState::zero(i, n)
            } else {
                let omega = DVector::from_fn(n, |_, _| rng.random_range(-half_range..=half_range));
                OscillatorState { node: i, omega }
            }
        })
        .collect()
}

/// Flat-fading link from `tx` to `rx`: `gains[(q, k)]` couples transmit
/// antenna `q` to receive antenna `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkChannel {
    pub tx: NodeId,
    pub rx: NodeId,
    gains: DMatrix<Complex64>,
    noise_var: Vec<f64>,
}

impl LinkChannel {
    pub fn new(tx: NodeId, rx: NodeId, gains: DMatrix<Complex64>, noise_var: Vec<f64>) -> Result<Self> {
        if noise_var.len() != gains.ncols() {
            return Err(Error::DimensionMismatch {
                expected: gains.ncols(),
                found: noise_var.len(),
            });
        }
        if noise_var.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidInput("noise variance must be positive".into()));
        }
        Ok(Self {
            tx,
            rx,
            gains,
            noise_var,
        })
    }

    /// i.i.d. `CN(0, 1)` gains, equal noise variance on every receive antenna.
    pub fn rayleigh<R: Rng + ?Sized>(
        tx: NodeId,
        rx: NodeId,
        n_tx: usize,
        n_rx: usize,
        noise_var: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let gains = DMatrix::from_fn(n_tx, n_rx, |_, _| complex_normal(rng, 1.0));
        Self::new(tx, rx, gains, vec![noise_var; n_rx])
    }

    pub fn gains(&self) -> &DMatrix<Complex64> {
        &self.gains
    }

    /// Gains seen by receive antenna `k`, one per transmit antenna.
    pub fn gains_to(&self, k: usize) -> DVector<Complex64> {
        self.gains.column(k).into_owned()
    }

    pub fn noise_var(&self, k: usize) -> f64 {
        self.noise_var[k]
    }
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingKind {
    /// Independent unit-modulus random phases per antenna.
    RandomPhase,
    /// One random-phase sequence, cyclically shifted by `⌊N/N_tx⌋` per antenna.
    CyclicShift,
}

/// `N × N_tx` training block, row `t−1` holding `[z_1(t), …, z_{N_tx}(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMatrix {
    z: DMatrix<Complex64>,
}

impl TrainingMatrix {
    pub fn new(z: DMatrix<Complex64>) -> Result<Self> {
        if z.nrows() <= z.ncols() || z.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "training needs N > N_tx >= 1, got N={} N_tx={}",
                z.nrows(),
                z.ncols()
            )));
        }
        if z.iter().any(|v| (v.norm() - 1.0).abs() > 1e-12) {
            return Err(Error::InvalidInput("training entries must be unit modulus".into()));
        }
        Ok(Self { z })
    }

    pub fn generate<R: Rng + ?Sized>(kind: TrainingKind, len: usize, n_tx: usize, rng: &mut R) -> Result<Self> {
        let phase = |rng: &mut R| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI));
        let z = match kind {
            TrainingKind::RandomPhase => {
                let mut z = DMatrix::from_element(len, n_tx, Complex64::new(1.0, 0.0));
                for q in 0..n_tx {
                    for t in 0..len {
                        z[(t, q)] = phase(rng);
                    }
                }
                z
            }
            TrainingKind::CyclicShift => {
                let base: Vec<Complex64> = (0..len).map(|_| phase(rng)).collect();
                let shift = len / n_tx.max(1);
                DMatrix::from_fn(len, n_tx, |t, q| base[(t + q * shift) % len])
            }
        };
        Self::new(z)
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn antennas(&self) -> usize {
        self.z.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.z
    }

    /// `Γ(ε) ⊙ Z`: entry `(t−1, q)` is `e^{j ε_q t} z_q(t)`.
    pub fn modulated(&self, eps: &[f64]) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.len(), self.antennas(), |row, q| {
            let t = (row + 1) as f64;
            Complex64::from_polar(1.0, eps[q] * t) * self.z[(row, q)]
        })
    }
}

/// `(A_tx, A_rx)` with `A_tx = 1_{N_rx} ⊗ I_{N_tx}` and `A_rx = −I_{N_rx} ⊗ 1_{N_tx}`,
/// realising row `k·N_tx + q ↦ ω^tx_q − ω^rx_k`.
pub fn build_structure_matrices(n_tx: usize, n_rx: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let rows = n_tx * n_rx;
    let mut a_tx = DMatrix::zeros(rows, n_tx);
    let mut a_rx = DMatrix::zeros(rows, n_rx);
    for k in 0..n_rx {
        for q in 0..n_tx {
            a_tx[(k * n_tx + q, q)] = 1.0;
            a_rx[(k * n_tx + q, k)] = -1.0;
        }
    }
    (a_tx, a_rx)
}

/// Relative offsets `ε_k` seen at receive antenna `k`.
fn relative_offsets(osc_tx: &OscillatorState, osc_rx: &OscillatorState, k: usize) -> Vec<f64> {
    osc_tx.omega.iter().map(|w| w - osc_rx.omega[k]).collect()
}

/// Received blocks `y_k`, one per receive antenna, in antenna order.
pub fn generate_observation<R: Rng + ?Sized>(
    osc_tx: &OscillatorState,
    osc_rx: &OscillatorState,
    channel: &LinkChannel,
    training: &TrainingMatrix,
    rng: &mut R,
) -> Result<Vec<DVector<Complex64>>> {
    let n_tx = osc_tx.omega.len();
    let n_rx = osc_rx.omega.len();
    if training.antennas() != n_tx || channel.gains.nrows() != n_tx {
        return Err(Error::DimensionMismatch {
            expected: n_tx,
            found: training.antennas(),
        });
    }
    if channel.gains.ncols() != n_rx {
        return Err(Error::DimensionMismatch {
            expected: n_rx,
            found: channel.gains.ncols(),
        });
    }
    Ok((0..n_rx)
        .map(|k| {
            let lam = training.modulated(&relative_offsets(osc_tx, osc_rx, k));
            let clean = &lam * channel.gains_to(k);
            let var = channel.noise_var(k);
            clean.map(|v| v + complex_normal(rng, var))
        })
        .collect())
}

/// Knobs of the joint CFO/channel least-squares estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlSettings {
    /// Coarse grid covers `[-grid_half_width, grid_half_width]` per offset.
    pub grid_half_width: f64,
    /// Grid step is `2π / (grid_density · N)`.
    pub grid_density: f64,
    pub max_refinement_steps: usize,
    /// Stop once the cost gradient norm drops to this level.
    pub gradient_tol: f64,
}

impl Default for MlSettings {
    fn default() -> Self {
        Self {
            grid_half_width: 0.2 * PI,
            grid_density: 8.0,
            max_refinement_steps: 100,
            gradient_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlEstimate {
    pub eps: DVector<f64>,
    pub gains: DVector<Complex64>,
    /// Residual energy `‖y − (Γ(ε̂)⊙Z)ĥ‖²`.
    pub cost: f64,
    /// `false` when refinement did not converge and the grid point is returned.
    pub converged: bool,
    pub refinement_steps: usize,
}

/// Channel least squares for fixed offsets: returns `(ĥ, residual energy)`.
fn channel_ls(y: &DVector<Complex64>, training: &TrainingMatrix, eps: &[f64]) -> Option<(DVector<Complex64>, f64)> {
    let lam = training.modulated(eps);
    let gram = lam.adjoint() * &lam;
    let rhs = lam.adjoint() * y;
    let h = gram.cholesky()?.solve(&rhs);
    let cost = (y - &lam * &h).norm_squared();
    Some((h, cost))
}

fn residual_energy(y: &DVector<Complex64>, training: &TrainingMatrix, eps: &[f64], h: &DVector<Complex64>) -> f64 {
    (y - training.modulated(eps) * h).norm_squared()
}

/// Joint least-squares (ML under white Gaussian noise) estimate of the
/// relative offsets and channel gains from one receive antenna.
pub fn estimate_relative_cfo_ml(y: &DVector<Complex64>, training: &TrainingMatrix) -> Result<MlEstimate> {
    estimate_relative_cfo_ml_with(y, training, &MlSettings::default())
}

pub fn estimate_relative_cfo_ml_with(
    y: &DVector<Complex64>,
    training: &TrainingMatrix,
    settings: &MlSettings,
) -> Result<MlEstimate> {
    let n = training.len();
    let n_tx = training.antennas();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: y.len(),
        });
    }
    if n <= 2 * n_tx {
        return Err(Error::InvalidInput(format!(
            "estimator needs N > 2·N_tx, got N={n} N_tx={n_tx}"
        )));
    }

    // Coarse tensor grid on the concentrated cost.
    let step = 2.0 * PI / (settings.grid_density * n as f64);
    let points = (2.0 * settings.grid_half_width / step).floor() as usize + 1;
    let grid: Vec<f64> = (0..points)
        .map(|i| -settings.grid_half_width + i as f64 * step)
        .collect();
    let mut index = vec![0usize; n_tx];
    let mut eps = vec![0.0; n_tx];
    let mut best: Option<(Vec<f64>, DVector<Complex64>, f64)> = None;
    loop {
        for (e, &i) in eps.iter_mut().zip(&index) {
            *e = grid[i];
        }
        if let Some((h, cost)) = channel_ls(y, training, &eps) {
            if best.as_ref().is_none_or(|b| cost < b.2) {
                best = Some((eps.clone(), h, cost));
            }
        }
        // odometer increment
        let mut d = 0;
        while d < n_tx {
            index[d] += 1;
            if index[d] < points {
                break;
            }
            index[d] = 0;
            d += 1;
        }
        if d == n_tx {
            break;
        }
    }
    let (grid_eps, grid_h, grid_cost) =
        best.ok_or(Error::NotPositiveDefinite("training Gram matrix on every grid point"))?;

    match refine(y, training, &grid_eps, &grid_h, settings) {
        Some((eps, h, cost, steps)) => Ok(MlEstimate {
            eps: DVector::from_vec(eps),
            gains: h,
            cost,
            converged: true,
            refinement_steps: steps,
        }),
        None => Ok(MlEstimate {
            eps: DVector::from_vec(grid_eps),
            gains: grid_h,
            cost: grid_cost,
            converged: false,
            refinement_steps: settings.max_refinement_steps,
        }),
    }
}

/// Gauss-Newton on `θ = (ε, Re h, Im h)` with step halving. Returns `None`
/// when the step budget runs out before the gradient criterion is met.
fn refine(
    y: &DVector<Complex64>,
    training: &TrainingMatrix,
    eps0: &[f64],
    h0: &DVector<Complex64>,
    settings: &MlSettings,
) -> Option<(Vec<f64>, DVector<Complex64>, f64, usize)> {
    let n = training.len();
    let m = training.antennas();
    let mut eps = eps0.to_vec();
    let mut h = h0.clone();
    let mut cost = residual_energy(y, training, &eps, &h);

    for step in 0..=settings.max_refinement_steps {
        let lam = training.modulated(&eps);
        let res = y - &lam * &h;
        // Real-stacked model Jacobian (2N × 3m) and residual.
        let mut jac = DMatrix::<f64>::zeros(2 * n, 3 * m);
        for row in 0..n {
            let t = (row + 1) as f64;
            for q in 0..m {
                let c = lam[(row, q)];
                let d_eps = Complex64::new(0.0, t) * h[q] * c;
                let d_im = Complex64::new(0.0, 1.0) * c;
                jac[(row, q)] = d_eps.re;
                jac[(row + n, q)] = d_eps.im;
                jac[(row, m + q)] = c.re;
                jac[(row + n, m + q)] = c.im;
                jac[(row, 2 * m + q)] = d_im.re;
                jac[(row + n, 2 * m + q)] = d_im.im;
            }
        }
        let r = DVector::from_fn(2 * n, |i, _| if i < n { res[i].re } else { res[i - n].im });
        let grad = -2.0 * jac.transpose() * &r;
        if grad.norm() <= settings.gradient_tol {
            return Some((eps, h, cost, step));
        }
        if step == settings.max_refinement_steps {
            break;
        }
        let normal = jac.transpose() * &jac;
        let delta = normal.cholesky()?.solve(&(jac.transpose() * &r));

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_eps: Vec<f64> = (0..m).map(|q| eps[q] + scale * delta[q]).collect();
            let cand_h = DVector::from_fn(m, |q, _| {
                h[q] + Complex64::new(delta[m + q], delta[2 * m + q]) * scale
            });
            let cand_cost = residual_energy(y, training, &cand_eps, &cand_h);
            if cand_cost < cost {
                eps = cand_eps;
                h = cand_h;
                cost = cand_cost;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // No representable descent left: the iterate sits on the
            // floating-point floor of the cost.
            return Some((eps, h, cost, step));
        }
    }
    None
}

/// Cramér-Rao bound of the relative offsets of one MISO problem,
///
/// ```text
/// B = σ²/2 · { Re[ V − Tᴴ (ΛᴴΛ)⁻¹ T ] }⁻¹
/// V = diag(h)ᴴ Λᴴ D² Λ diag(h),  T = Λᴴ D Λ diag(h),  Λ = Γ(ε)⊙Z,  D = diag(1..N)
/// ```
pub fn miso_crb(
    eps: &[f64],
    gains: &DVector<Complex64>,
    training: &TrainingMatrix,
    noise_var: f64,
) -> Result<DMatrix<f64>> {
    let m = training.antennas();
    if eps.len() != m || gains.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: eps.len().max(gains.len()),
        });
    }
    let n = training.len();
    let lam = training.modulated(eps);
    let d = DVector::from_fn(n, |t, _| Complex64::new((t + 1) as f64, 0.0));
    let dh = DMatrix::from_diagonal(gains);
    let d_lam = DMatrix::from_fn(n, m, |t, q| d[t] * lam[(t, q)]);
    let gram = lam.adjoint() * &lam;
    let gram_chol = gram
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("Γ(ε)⊙Z must have full column rank"))?;
    let v = dh.adjoint() * d_lam.adjoint() * &d_lam * &dh;
    let t = lam.adjoint() * &d_lam * &dh;
    let schur = &v - t.adjoint() * gram_chol.solve(&t);
    let info = symmetrize(&schur.map(|c| c.re));
    let inv = spd_inverse(&info, "offset Fisher information (zero channel gain?)")?;
    Ok(inv * (noise_var / 2.0))
}

/// Block-diagonal MIMO bound, receive antennas in order.
pub fn mimo_crb(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    block_diag(blocks.iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementMode {
    /// Simulate the training exchange and run the ML estimator.
    FullSignal,
    /// Draw `r ~ N(A_tx ω_tx + A_rx ω_rx, R)` with `R` the true-parameter bound.
    OracleMeasurement,
}

/// Linear relative-CFO model of one link, shared by both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMeasurement {
    pub tx: NodeId,
    pub rx: NodeId,
    pub r: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub a_tx: DMatrix<f64>,
    pub a_rx: DMatrix<f64>,
    /// Number of per-antenna ML estimates run to produce this measurement.
    pub ml_invocations: usize,
    /// How many of them fell back to the coarse grid point.
    pub ml_warnings: usize,
}

impl EdgeMeasurement {
    pub fn new(tx: NodeId, rx: NodeId, r: DVector<f64>, cov: DMatrix<f64>, n_tx: usize, n_rx: usize) -> Result<Self> {
        let rows = n_tx * n_rx;
        if r.len() != rows || cov.nrows() != rows || cov.ncols() != rows {
            return Err(Error::DimensionMismatch {
                expected: rows,
                found: r.len(),
            });
        }
        let cov = symmetrize(&cov);
        if cov.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("measurement covariance"));
        }
        let (a_tx, a_rx) = build_structure_matrices(n_tx, n_rx);
        Ok(Self {
            tx,
            rx,
            r,
            cov,
            a_tx,
            a_rx,
            ml_invocations: 0,
            ml_warnings: 0,
        })
    }

    /// Column block of the model acting on `node`'s offsets.
    pub fn structure_for(&self, node: NodeId) -> Option<&DMatrix<f64>> {
        if node == self.tx {
            Some(&self.a_tx)
        } else if node == self.rx {
            Some(&self.a_rx)
        } else {
            None
        }
    }

    pub fn other_end(&self, node: NodeId) -> Option<NodeId> {
        if node == self.tx {
            Some(self.rx)
        } else if node == self.rx {
            Some(self.tx)
        } else {
            None
        }
    }

    /// Noise-free model output `A_tx ω_tx + A_rx ω_rx`.
    pub fn model_mean(&self, omega_tx: &DVector<f64>, omega_rx: &DVector<f64>) -> DVector<f64> {
        &self.a_tx * omega_tx + &self.a_rx * omega_rx
    }
}

/// CRB of the link at the true offsets and gains.
pub fn true_link_covariance(
    osc_tx: &OscillatorState,
    osc_rx: &OscillatorState,
    channel: &LinkChannel,
    training: &TrainingMatrix,
) -> Result<DMatrix<f64>> {
    let blocks = (0..osc_rx.omega.len())
        .map(|k| {
            miso_crb(
                &relative_offsets(osc_tx, osc_rx, k),
                &channel.gains_to(k),
                training,
                channel.noise_var(k),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mimo_crb(&blocks))
}

pub fn measure_edge<R: Rng + ?Sized>(
    osc_tx: &OscillatorState,
    osc_rx: &OscillatorState,
    channel: &LinkChannel,
    training: &TrainingMatrix,
    mode: MeasurementMode,
    rng: &mut R,
) -> Result<EdgeMeasurement> {
    let n_tx = osc_tx.omega.len();
    let n_rx = osc_rx.omega.len();
    match mode {
        MeasurementMode::FullSignal => {
            let ys = generate_observation(osc_tx, osc_rx, channel, training, rng)?;
            let mut r = DVector::zeros(n_tx * n_rx);
            let mut blocks = Vec::with_capacity(n_rx);
            let mut warnings = 0;
            for (k, y) in ys.iter().enumerate() {
                let est = estimate_relative_cfo_ml(y, training)?;
                if !est.converged {
                    warnings += 1;
                }
                r.rows_mut(k * n_tx, n_tx).copy_from(&est.eps);
                blocks.push(miso_crb(
                    est.eps.as_slice(),
                    &est.gains,
                    training,
                    channel.noise_var(k),
                )?);
            }
            let mut m = EdgeMeasurement::new(osc_tx.node, osc_rx.node, r, mimo_crb(&blocks), n_tx, n_rx)?;
            m.ml_invocations = n_rx;
            m.ml_warnings = warnings;
            Ok(m)
        }
        MeasurementMode::OracleMeasurement => {
            let cov = true_link_covariance(osc_tx, osc_rx, channel, training)?;
            let (a_tx, a_rx) = build_structure_matrices(n_tx, n_rx);
            let mean = &a_tx * &osc_tx.omega + &a_rx * &osc_rx.omega;
            let r = mean + gaussian_draw(&cov, rng)?;
            EdgeMeasurement::new(osc_tx.node, osc_rx.node, r, cov, n_tx, n_rx)
        }
    }
}

/// One draw from `N(0, cov)`.
pub fn gaussian_draw<R: Rng + ?Sized>(cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let chol = symmetrize(cov)
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("sampling covariance"))?;
    let z = DVector::from_fn(cov.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * z)
}

/// One measurement per undirected graph edge, keyed by `(min, max)` node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet {
    edges: BTreeMap<(NodeId, NodeId), EdgeMeasurement>,
}

impl MeasurementSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, m: EdgeMeasurement) {
        self.edges.insert((m.tx.min(m.rx), m.tx.max(m.rx)), m);
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<&EdgeMeasurement> {
        self.edges.get(&(a.min(b), a.max(b)))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Measurements in ascending edge order.
    pub fn iter(&self) -> impl Iterator<Item = &EdgeMeasurement> {
        self.edges.values()
    }

    /// Checks that every graph edge has a dimensionally consistent measurement.
    pub fn validate_for(&self, graph: &NetworkGraph) -> Result<()> {
        for &(a, b) in graph.edges() {
            let m = self.get(a, b).ok_or(Error::MissingMeasurement(a + 1, b + 1))?;
            let (na, nb) = (graph.antennas(m.tx), graph.antennas(m.rx));
            if m.a_tx.ncols() != na || m.a_rx.ncols() != nb {
                return Err(Error::DimensionMismatch {
                    expected: na * nb,
                    found: m.r.len(),
                });
            }
        }
        Ok(())
    }
}

impl FromIterator<EdgeMeasurement> for MeasurementSet {
    fn from_iter<I: IntoIterator<Item = EdgeMeasurement>>(iter: I) -> Self {
        let mut set = Self::new();
        for m in iter {
            set.insert(m);
        }
        set
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn ones_training(len: usize, n_tx: usize) -> TrainingMatrix {
        TrainingMatrix::new(DMatrix::from_element(len, n_tx, Complex64::new(1.0, 0.0))).unwrap()
    }

    fn noiseless(eps: &[f64], h: &DVector<Complex64>, training: &TrainingMatrix) -> DVector<Complex64> {
        training.modulated(eps) * h
    }

    /// Inverse of the Fisher information of `y ~ CN(μ(θ), σ²I)`, Jacobian by
    /// central differences, restricted to the offset block.
    fn fd_crb(eps: &[f64], h: &DVector<Complex64>, training: &TrainingMatrix, var: f64) -> DMatrix<f64> {
        let m = eps.len();
        let n = training.len();
        let mu = |theta: &[f64]| {
            let e = &theta[..m];
            let g = DVector::from_fn(m, |q, _| Complex64::new(theta[m + q], theta[2 * m + q]));
            noiseless(e, &g, training)
        };
        let mut theta: Vec<f64> = eps.to_vec();
        theta.extend(h.iter().map(|c| c.re));
        theta.extend(h.iter().map(|c| c.im));
        let step = 1e-6;
        let mut jac = DMatrix::<Complex64>::zeros(n, 3 * m);
        for p in 0..3 * m {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[p] += step;
            dn[p] -= step;
            let col = (mu(&up) - mu(&dn)) / Complex64::new(2.0 * step, 0.0);
            jac.set_column(p, &col);
        }
        let fim = (jac.adjoint() * &jac).map(|c| c.re * 2.0 / var);
        let inv = fim.try_inverse().unwrap();
        inv.view((0, 0), (m, m)).into_owned()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn structure_matrices_small_cases() {
        let (a, b) = build_structure_matrices(1, 1);
        assert_eq!(a, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(b, DMatrix::from_element(1, 1, -1.0));
        let (a, b) = build_structure_matrices(2, 1);
        assert_eq!(a, DMatrix::identity(2, 2));
        assert_eq!(b, DMatrix::from_column_slice(2, 1, &[-1.0, -1.0]));
    }

    #[test]
    fn structure_matrices_enumerate_every_pair() {
        for n_tx in 1..=3 {
            for n_rx in 1..=3 {
                let (a, b) = build_structure_matrices(n_tx, n_rx);
                let wt = DVector::from_fn(n_tx, |q, _| 10.0f64.powi(q as i32));
                let wr = DVector::from_fn(n_rx, |k, _| 0.1 * (k + 1) as f64 + 1000.0);
                let out = &a * &wt + &b * &wr;
                for k in 0..n_rx {
                    for q in 0..n_tx {
                        assert_eq!(out[k * n_tx + q], wt[q] - wr[k]);
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_observation_examples() {
        let tr = ones_training(4, 1);
        let h = DVector::from_element(1, Complex64::new(1.0, 0.0));
        let y = noiseless(&[0.0], &h, &tr);
        assert!(y.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let y = noiseless(&[PI / 2.0], &h, &tr);
        let expect = [
            Complex64::new(0.0, 1.0),
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(1.0, 0.0),
        ];
        for (v, e) in y.iter().zip(expect) {
            assert!((v - e).norm() < 1e-15);
        }
    }

    #[test]
    fn observation_noise_is_zero_mean() {
        let mut rng = seed::rng_from(3);
        let tx = OscillatorState::new(0, DVector::from_element(1, 0.1)).unwrap();
        let rx = OscillatorState::new(1, DVector::from_element(1, -0.05)).unwrap();
        let var = 0.5;
        let ch = LinkChannel::new(0, 1, DMatrix::from_element(1, 1, Complex64::new(0.6, -0.8)), vec![var]).unwrap();
        let tr = ones_training(4, 1);
        let clean = noiseless(&[0.15], &ch.gains_to(0), &tr);
        let draws = 100_000;
        let mut acc = DVector::<Complex64>::zeros(4);
        for _ in 0..draws {
            let y = generate_observation(&tx, &rx, &ch, &tr, &mut rng).unwrap();
            acc += &y[0] - &clean;
        }
        let bound = 4.0 * (var / 2.0).sqrt() / (draws as f64).sqrt();
        for v in acc.iter() {
            let m = v / draws as f64;
            assert!(m.re.abs() < bound && m.im.abs() < bound);
        }
    }

    #[test]
    fn ml_is_exact_without_noise_single_antenna() {
        let mut rng = seed::rng_from(10);
        let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 1, &mut rng).unwrap();
        let eps = 2.0 * PI * 0.03;
        let h = DVector::from_element(1, Complex64::new(0.3, 0.9));
        let est = estimate_relative_cfo_ml(&noiseless(&[eps], &h, &tr), &tr).unwrap();
        assert!(est.converged);
        assert!((est.eps[0] - eps).abs() < 1e-9);
        assert!((est.gains[0] - h[0]).norm() < 1e-9);
    }

    #[test]
    fn ml_is_exact_without_noise_two_antennas() {
        let mut rng = seed::rng_from(11);
        let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 2, &mut rng).unwrap();
        let eps = [2.0 * PI * 0.02, -2.0 * PI * 0.04];
        let h = DVector::from_vec(vec![Complex64::new(1.1, -0.2), Complex64::new(-0.4, 0.7)]);
        let y = noiseless(&eps, &h, &tr);
        let est = estimate_relative_cfo_ml(&y, &tr).unwrap();
        assert!((est.eps[0] - eps[0]).abs() < 1e-7);
        assert!((est.eps[1] - eps[1]).abs() < 1e-7);

        // the truth is the global minimum of the concentrated cost on a fine sweep
        let sweep = 121;
        let w = 0.2 * PI;
        let mut best = f64::INFINITY;
        let mut arg = [0.0, 0.0];
        for i in 0..sweep {
            for j in 0..sweep {
                let e = [
                    -w + 2.0 * w * i as f64 / (sweep - 1) as f64,
                    -w + 2.0 * w * j as f64 / (sweep - 1) as f64,
                ];
                let (_, c) = channel_ls(&y, &tr, &e).unwrap();
                if c < best {
                    best = c;
                    arg = e;
                }
            }
        }
        let cell = 2.0 * w / (sweep - 1) as f64;
        assert!((arg[0] - eps[0]).abs() <= cell && (arg[1] - eps[1]).abs() <= cell);
        assert!(est.cost <= best);
    }

    #[test]
    fn ml_mse_tracks_crb_at_high_snr() {
        let mut rng = seed::rng_from(12);
        let var = snr_db_to_noise_var(30.0);
        let h = DVector::from_element(1, Complex64::new(1.0, 0.0));
        let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 1, &mut rng).unwrap();
        let eps = 0.1;
        let crb = miso_crb(&[eps], &h, &tr, var).unwrap()[(0, 0)];
        let trials = 2000;
        let mut se = 0.0;
        for _ in 0..trials {
            let y = noiseless(&[eps], &h, &tr).map(|v| v + complex_normal(&mut rng, var));
            let est = estimate_relative_cfo_ml(&y, &tr).unwrap();
            se += (est.eps[0] - eps).powi(2);
        }
        assert!(se / trials as f64 <= 2.0 * crb);
    }

    #[test]
    fn ml_rejects_short_training() {
        let tr = ones_training(4, 2);
        assert!(estimate_relative_cfo_ml(&DVector::zeros(4), &tr).is_err());
        let tr = ones_training(8, 1);
        assert!(estimate_relative_cfo_ml(&DVector::zeros(7), &tr).is_err());
    }

    #[test]
    fn scalar_crb_closed_form_and_finite_difference() {
        let mut rng = seed::rng_from(13);
        let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 1, &mut rng).unwrap();
        let h = DVector::from_element(1, Complex64::new(0.5, -1.2));
        let var = 0.03;
        let b = miso_crb(&[0.2], &h, &tr, var).unwrap();
        let n = 16.0;
        let closed = 6.0 * var / (h[0].norm_sqr() * n * (n * n - 1.0));
        assert!((b[(0, 0)] - closed).abs() / closed < 1e-12);
        assert!(rel_err(&b, &fd_crb(&[0.2], &h, &tr, var)) < 1e-6);
    }

    #[test]
    fn two_antenna_crb_matches_finite_difference() {
        let mut rng = seed::rng_from(14);
        for _ in 0..5 {
            let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 2, &mut rng).unwrap();
            let h = DVector::from_fn(2, |_, _| complex_normal(&mut rng, 1.0));
            let eps = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
            let b = miso_crb(&eps, &h, &tr, 0.01).unwrap();
            assert!(rel_err(&b, &fd_crb(&eps, &h, &tr, 0.01)) < 1e-6);
            assert_eq!(b, b.transpose());
            assert!(b.clone().cholesky().is_some());
        }
    }

    #[test]
    fn crb_is_linear_in_noise_variance() {
        let mut rng = seed::rng_from(15);
        let tr = TrainingMatrix::generate(TrainingKind::CyclicShift, 16, 2, &mut rng).unwrap();
        let h = DVector::from_fn(2, |_, _| complex_normal(&mut rng, 1.0));
        let b1 = miso_crb(&[0.1, -0.2], &h, &tr, 0.02).unwrap();
        let b2 = miso_crb(&[0.1, -0.2], &h, &tr, 0.04).unwrap();
        assert!((&b2 - &b1 * 2.0).norm() <= 1e-12 * b2.norm());
    }

    #[test]
    fn zero_gain_has_no_bound() {
        let tr = ones_training(16, 1);
        let h = DVector::from_element(1, Complex64::new(0.0, 0.0));
        assert!(miso_crb(&[0.0], &h, &tr, 1.0).is_err());
    }

    #[test]
    fn mimo_bound_is_block_diagonal() {
        let single = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(mimo_crb(std::slice::from_ref(&single)), single);
        let d = mimo_crb(&[DMatrix::from_element(1, 1, 3.0), DMatrix::from_element(1, 1, 4.0)]);
        assert_eq!(d, DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0])));
        let big = mimo_crb(&[single.clone(), single.clone()]);
        assert!(big.view((0, 2), (2, 2)).iter().all(|&v| v == 0.0));
        assert!(big.view((2, 0), (2, 2)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_generation_is_unit_modulus() {
        let mut rng = seed::rng_from(16);
        for kind in [TrainingKind::RandomPhase, TrainingKind::CyclicShift] {
            let tr = TrainingMatrix::generate(kind, 16, 2, &mut rng).unwrap();
            assert_eq!((tr.len(), tr.antennas()), (16, 2));
        }
        let tr = TrainingMatrix::generate(TrainingKind::CyclicShift, 8, 2, &mut rng).unwrap();
        for t in 0..8 {
            assert_eq!(tr.matrix()[(t, 1)], tr.matrix()[((t + 4) % 8, 0)]);
        }
        assert!(TrainingMatrix::new(DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0))).is_err());
        assert!(TrainingMatrix::new(DMatrix::from_element(3, 1, Complex64::new(0.5, 0.0))).is_err());
    }

    fn link(n_tx: usize, n_rx: usize, var: f64, rng: &mut crate::seed::Rng) -> (OscillatorState, OscillatorState, LinkChannel) {
        let tx = OscillatorState::new(0, DVector::from_fn(n_tx, |q, _| 0.05 * (q as f64 + 1.0))).unwrap();
        let rx = OscillatorState::new(1, DVector::from_fn(n_rx, |k, _| -0.07 * (k as f64 + 1.0))).unwrap();
        let ch = LinkChannel::rayleigh(0, 1, n_tx, n_rx, var, rng).unwrap();
        (tx, rx, ch)
    }

    #[test]
    fn oracle_measurement_with_tiny_covariance_is_the_model_mean() {
        let mut rng = seed::rng_from(17);
        let (tx, rx, _) = link(2, 2, 1.0, &mut rng);
        let (a, b) = build_structure_matrices(2, 2);
        let mean = &a * &tx.omega + &b * &rx.omega;
        let r = &mean + gaussian_draw(&(DMatrix::identity(4, 4) * 1e-12), &mut rng).unwrap();
        assert!((r - mean).amax() < 1e-5);
    }

    #[test]
    fn oracle_measurements_average_to_the_model_mean() {
        let mut rng = seed::rng_from(18);
        let (tx, rx, ch) = link(2, 1, snr_db_to_noise_var(10.0), &mut rng);
        let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 2, &mut rng).unwrap();
        let draws = 100_000;
        let mut acc = DVector::zeros(2);
        let mut cov = DMatrix::zeros(2, 2);
        for _ in 0..draws {
            let m = measure_edge(&tx, &rx, &ch, &tr, MeasurementMode::OracleMeasurement, &mut rng).unwrap();
            assert_eq!(m.ml_invocations, 0);
            acc += &m.r;
            cov = m.cov.clone();
        }
        let mean = acc / draws as f64;
        let truth = DVector::from_vec(vec![0.05 + 0.07, 0.10 + 0.07]);
        for q in 0..2 {
            let sd = (cov[(q, q)] / draws as f64).sqrt();
            assert!((mean[q] - truth[q]).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn full_signal_measurement_is_within_five_sigma() {
        let mut rng = seed::rng_from(19);
        let var = snr_db_to_noise_var(30.0);
        let trials = 2000;
        let mut inside = 0;
        for _ in 0..trials {
            let (tx, rx, ch) = link(1, 1, var, &mut rng);
            let tr = TrainingMatrix::generate(TrainingKind::RandomPhase, 16, 1, &mut rng).unwrap();
            let m = measure_edge(&tx, &rx, &ch, &tr, MeasurementMode::FullSignal, &mut rng).unwrap();
            assert_eq!(m.ml_invocations, 1);
            let sd = true_link_covariance(&tx, &rx, &ch, &tr).unwrap()[(0, 0)].sqrt();
            if (m.r[0] - 0.12).abs() <= 5.0 * sd {
                inside += 1;
            }
        }
        assert!(inside as f64 >= 0.999 * trials as f64, "{inside}/{trials}");
    }

    #[test]
    fn reference_node_draws_zero() {
        let g = NetworkGraph::complete(vec![2, 1, 2]);
        let osc = draw_oscillators(&g, DEFAULT_CFO_HALF_RANGE, &mut seed::rng_from(20));
        assert!(osc[0].omega.iter().all(|&w| w == 0.0));
        assert!(osc[1..]
            .iter()
            .flat_map(|o| o.omega.iter())
            .all(|w| w.abs() <= DEFAULT_CFO_HALF_RANGE));
        assert!(OscillatorState::new(0, DVector::from_element(1, 4.0)).is_err());
    }

    #[test]
    fn measurement_set_lookup_is_symmetric() {
        let m = EdgeMeasurement::new(0, 2, DVector::zeros(2), DMatrix::identity(2, 2), 2, 1).unwrap();
        let set: MeasurementSet = std::iter::once(m).collect();
        assert!(set.get(2, 0).is_some());
        assert_eq!(set.get(0, 2).unwrap().structure_for(2).unwrap().ncols(), 1);
        assert_eq!(set.get(0, 2).unwrap().other_end(0), Some(2));
        let g = NetworkGraph::new(vec![2, 1, 1], vec![(0, 2), (1, 2)], 0).unwrap();
        assert!(matches!(set.validate_for(&g), Err(Error::MissingMeasurement(2, 3))));
    }
}
