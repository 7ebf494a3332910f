//! Euler–Maruyama paths with first-exit detection.
//!
//! One pass over a path accumulates everything the estimators need: the
//! path cost, the martingales `M^{b_k}` of the basis functions and their
//! covariations. Controls enter the record only through `a·m` and `a·G·a`.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    CoeffVector, Diffusion, DiffusionFactors, ProblemSpec, Stopping, DEFAULT_PINV_REL_TOL,
};
use crate::rng::RngStream;
use crate::stats::CompensatedSum;

/// Bridge crossing probabilities below `exp(-BRIDGE_CUTOFF)` are not sampled.
const BRIDGE_CUTOFF: f64 = 50.0;

/// Sufficient statistics of one simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub sample_index: u64,
    pub tau: f64,
    pub exit_state: Vec<f64>,
    pub censored: bool,
    pub phi: f64,
    /// `m[k] ≈ M^{b_k}_τ`.
    pub m: Vec<f64>,
    /// Row-major `n×n` covariations `⟨M^{b_k}, M^{b_l}⟩_τ`.
    pub gram: Vec<f64>,
    pub n_steps: u64,
}

impl TrajectoryRecord {
    pub fn basis_size(&self) -> usize {
        self.m.len()
    }

    pub fn gram_at(&self, k: usize, l: usize) -> f64 {
        self.gram[k * self.m.len() + l]
    }

    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let n = self.m.len();
        DMatrix::from_row_slice(n, n, &self.gram)
    }

    /// `M^{u^v}_τ = v·m`.
    pub fn martingale(&self, v: &[f64]) -> f64 {
        v.iter().zip(&self.m).map(|(a, b)| a * b).sum()
    }

    /// `⟨M^{u^v}, M^{u^w}⟩_τ = v·G·w`.
    pub fn covariation(&self, v: &[f64], w: &[f64]) -> f64 {
        let n = self.m.len();
        let mut s = 0.0;
        for k in 0..n {
            if v[k] == 0.0 {
                continue;
            }
            let row = &self.gram[k * n..(k + 1) * n];
            s += v[k] * row.iter().zip(w).map(|(g, wl)| g * wl).sum::<f64>();
        }
        s
    }

    /// `(G·v)_k`.
    pub fn gram_times(&self, v: &[f64]) -> Vec<f64> {
        let n = self.m.len();
        (0..n)
            .map(|k| {
                self.gram[k * n..(k + 1) * n]
                    .iter()
                    .zip(v)
                    .map(|(g, vl)| g * vl)
                    .sum()
            })
            .collect()
    }
}

/// `log ε(M^{u^v})_τ = v·m − ½ v·G·v`.
pub fn log_exponential_martingale(rec: &TrajectoryRecord, v: &CoeffVector) -> f64 {
    rec.martingale(v) - 0.5 * rec.covariation(v, v)
}

/// `ε(M^{u^v})_τ = exp(v·m − ½ v·G·v)`.
pub fn exponential_martingale(rec: &TrajectoryRecord, v: &CoeffVector) -> Result<f64> {
    if v.len() != rec.basis_size() {
        return Err(Error::InvalidInput(format!(
            "weight vector has length {}, record has {} basis statistics",
            v.len(),
            rec.basis_size()
        )));
    }
    let e = log_exponential_martingale(rec, v);
    let w = e.exp();
    if !w.is_finite() || w <= 0.0 {
        return Err(Error::EstimatorUnusable(format!(
            "exponential weight exp({e:.6e}) is not representable (sample {})",
            rec.sample_index
        )));
    }
    Ok(w)
}

/// Probability that a Brownian bridge from `x0` to `x1` over `dt` touched
/// `barrier`, for per-step standard deviation `sigma·√dt`.
pub fn bridge_exit_probability(x0: f64, x1: f64, barrier: f64, sigma: f64, dt: f64) -> f64 {
    let prod = (barrier - x0) * (barrier - x1);
    if prod <= 0.0 {
        return 1.0;
    }
    (-2.0 * prod / (sigma * sigma * dt)).exp()
}

/// Reusable per-worker buffers for path simulation.
pub struct PathSimulator<'a> {
    spec: &'a ProblemSpec,
    a: &'a CoeffVector,
    fbuf: DMatrix<f64>,
    x: Vec<f64>,
    x_next: Vec<f64>,
    drift: Vec<f64>,
    bvals: Vec<f64>,
    coef: Vec<f64>,
    db: Vec<f64>,
}

impl<'a> PathSimulator<'a> {
    pub fn new(spec: &'a ProblemSpec, a: &'a CoeffVector) -> Result<Self> {
        spec.check_coefficients(a)?;
        let d = spec.dimension();
        let n = spec.basis_size();
        Ok(Self {
            spec,
            a,
            fbuf: DMatrix::zeros(d, d),
            x: vec![0.0; d],
            x_next: vec![0.0; d],
            drift: vec![0.0; d],
            bvals: vec![0.0; n * d],
            coef: vec![0.0; n * d],
            db: vec![0.0; d],
        })
    }

    pub fn run(&mut self, stream: RngStream) -> Result<TrajectoryRecord> {
        let spec = self.spec;
        let d = spec.dimension();
        let n = spec.basis_size();
        let dt = spec.dt();
        let sqrt_dt = dt.sqrt();
        let max_steps = spec.max_steps();
        let domain = spec.domain();
        let first_exit = spec.stopping() == Stopping::FirstExit;
        let bridge = first_exit && spec.bridge();
        if d == 1 {
            if let Some(factors) = spec.constant_factors() {
                return self.run_scalar(stream, factors);
            }
        }

        let mut gauss = stream.increments();
        let mut aux = stream.auxiliary();
        let mut phi_run = CompensatedSum::default();
        let mut m = vec![0.0; n];
        let mut gram = vec![0.0; n * n];
        self.x.copy_from_slice(spec.initial_state());

        let mut steps = 0u64;
        let mut exited = false;
        while steps < max_steps {
            let t = steps as f64 * dt;
            let varying;
            let factors = match (spec.constant_factors(), spec.diffusion()) {
                (Some(f), _) => f,
                (None, Diffusion::Field(field)) => {
                    field.eval(t, &self.x, &mut self.fbuf);
                    varying = DiffusionFactors::new(self.fbuf.clone(), DEFAULT_PINV_REL_TOL)?;
                    &varying
                }
                (None, Diffusion::Constant(_)) => unreachable!("constant diffusion is factored at build"),
            };

            spec.drift().eval(t, &self.x, &mut self.drift);
            for (k, b) in spec.basis().iter().enumerate() {
                let bk = &mut self.bvals[k * d..(k + 1) * d];
                b.field.eval(t, &self.x, bk);
                let ak = self.a[k];
                for j in 0..d {
                    self.drift[j] += ak * bk[j];
                }
                let ck = &mut self.coef[k * d..(k + 1) * d];
                for (i, c) in ck.iter_mut().enumerate() {
                    *c = (0..d).map(|j| factors.f_pinv[(i, j)] * bk[j]).sum();
                }
            }
            phi_run.add(spec.running_cost().eval(t, &self.x) * dt);

            gauss.fill_normal(sqrt_dt, &mut self.db);
            for k in 0..n {
                let ck = &self.coef[k * d..(k + 1) * d];
                m[k] += ck.iter().zip(&self.db).map(|(c, z)| c * z).sum::<f64>();
                for l in k..n {
                    let cl = &self.coef[l * d..(l + 1) * d];
                    let g = ck.iter().zip(cl).map(|(p, q)| p * q).sum::<f64>() * dt;
                    gram[k * n + l] += g;
                }
            }
            for i in 0..d {
                let noise: f64 = (0..d).map(|j| factors.f[(i, j)] * self.db[j]).sum();
                self.x_next[i] = self.x[i] + self.drift[i] * dt + noise;
            }
            if self.x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationDiverged {
                    step: steps,
                    sample_index: stream.sample_index,
                });
            }

            if first_exit {
                if !domain.contains(&self.x_next) {
                    exited = true;
                } else if bridge {
                    exited = self.bridge_crossing(factors, dt, steps, &mut aux);
                }
            }
            steps += 1;
            std::mem::swap(&mut self.x, &mut self.x_next);
            if exited {
                break;
            }
        }

        Ok(self.finish(stream, steps, exited, phi_run, m, gram, self.x.clone()))
    }

    /// One-dimensional paths with constant diffusion.
    fn run_scalar(&mut self, stream: RngStream, factors: &DiffusionFactors) -> Result<TrajectoryRecord> {
        let spec = self.spec;
        let n = spec.basis_size();
        let dt = spec.dt();
        let sqrt_dt = dt.sqrt();
        let max_steps = spec.max_steps();
        let (lo, hi) = spec.domain().bounds()[0];
        let first_exit = spec.stopping() == Stopping::FirstExit;
        let bridge = first_exit && spec.bridge() && factors.coord_sigma[0] > 0.0;
        let f = factors.f[(0, 0)];
        let f_pinv = factors.f_pinv[(0, 0)];
        let bridge_scale = 2.0 / (factors.coord_sigma[0].powi(2) * dt);

        let mut gauss = stream.increments();
        let mut aux = stream.auxiliary();
        let mut phi_run = CompensatedSum::default();
        let mut m = vec![0.0; n];
        let mut gram = vec![0.0; n * n];
        let mut x = spec.initial_state()[0];
        let mut z = [0.0];
        let mut out = [0.0];

        let mut steps = 0u64;
        let mut exited = false;
        while steps < max_steps {
            let t = steps as f64 * dt;
            let xs = [x];
            spec.drift().eval(t, &xs, &mut out);
            let mut velocity = out[0];
            for (k, b) in spec.basis().iter().enumerate() {
                b.field.eval(t, &xs, &mut out);
                velocity += self.a[k] * out[0];
                self.coef[k] = f_pinv * out[0];
            }
            phi_run.add(spec.running_cost().eval(t, &xs) * dt);

            gauss.fill_normal(sqrt_dt, &mut z);
            for k in 0..n {
                let ck = self.coef[k];
                m[k] += ck * z[0];
                for l in k..n {
                    gram[k * n + l] += ck * self.coef[l] * dt;
                }
            }
            let mut next = x + velocity * dt + f * z[0];
            if !next.is_finite() {
                return Err(Error::SimulationDiverged {
                    step: steps,
                    sample_index: stream.sample_index,
                });
            }
            if first_exit {
                if next <= lo || next >= hi {
                    exited = true;
                } else if bridge {
                    for (side, barrier) in [lo, hi].into_iter().enumerate() {
                        let exponent = bridge_scale * (barrier - x) * (barrier - next);
                        if exponent < BRIDGE_CUTOFF
                            && aux.uniform_at(steps, side as u64) < (-exponent).exp()
                        {
                            next = barrier;
                            exited = true;
                            break;
                        }
                    }
                }
            }
            steps += 1;
            x = next;
            if exited {
                break;
            }
        }
        Ok(self.finish(stream, steps, exited, phi_run, m, gram, vec![x]))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        stream: RngStream,
        steps: u64,
        exited: bool,
        phi_run: CompensatedSum,
        m: Vec<f64>,
        mut gram: Vec<f64>,
        exit_state: Vec<f64>,
    ) -> TrajectoryRecord {
        let spec = self.spec;
        let n = m.len();
        for k in 0..n {
            for l in 0..k {
                gram[k * n + l] = gram[l * n + k];
            }
        }
        let tau = steps as f64 * spec.dt();
        let phi = phi_run.value() + spec.terminal_cost().eval(tau, &exit_state);
        TrajectoryRecord {
            sample_index: stream.sample_index,
            tau,
            exit_state,
            censored: spec.stopping() == Stopping::FirstExit && !exited,
            phi,
            m,
            gram,
            n_steps: steps,
        }
    }

    /// Samples an intra-step crossing of each face; on a crossing the exit
    /// state is placed on that face.
    fn bridge_crossing(
        &mut self,
        factors: &DiffusionFactors,
        dt: f64,
        step: u64,
        aux: &mut crate::rng::AuxiliaryStream,
    ) -> bool {
        for (j, &(lo, hi)) in self.spec.domain().bounds().iter().enumerate() {
            let sigma = factors.coord_sigma[j];
            if sigma <= 0.0 {
                continue;
            }
            let scale = 2.0 / (sigma * sigma * dt);
            for (side, barrier) in [lo, hi].into_iter().enumerate() {
                let exponent = scale * (barrier - self.x[j]) * (barrier - self.x_next[j]);
                if exponent >= BRIDGE_CUTOFF {
                    continue;
                }
                let p = bridge_exit_probability(self.x[j], self.x_next[j], barrier, sigma, dt);
                if aux.uniform_at(step, (2 * j + side) as u64) < p {
                    self.x_next[j] = barrier;
                    return true;
                }
            }
        }
        false
    }
}

/// Simulates one trajectory under control `u^a`.
pub fn simulate_path(
    spec: &ProblemSpec,
    a: &CoeffVector,
    stream: RngStream,
) -> Result<TrajectoryRecord> {
    PathSimulator::new(spec, a)?.run(stream)
}

/// Simulates samples `0..n` of `seed` in parallel; records come back in
/// sample order and the first error by sample index is reported.
pub fn simulate_batch(
    spec: &ProblemSpec,
    a: &CoeffVector,
    n: usize,
    seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    spec.check_coefficients(a)?;
    let results: Vec<Result<TrajectoryRecord>> = (0..n as u64)
        .into_par_iter()
        .map_init(
            || PathSimulator::new(spec, a).expect("coefficients checked"),
            |sim, i| sim.run(RngStream::new(seed, i)),
        )
        .collect();
    results.into_iter().collect()
}

pub fn censored_fraction(records: &[TrajectoryRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.censored).count() as f64 / records.len() as f64
}

/// One CSV row per record: `tau, censored, phi, m_k..., gram_k_l...` (upper triangle).
pub fn write_records_csv<W: Write>(records: &[TrajectoryRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = records.first().map_or(0, TrajectoryRecord::basis_size);
    let mut header = vec!["tau".to_string(), "censored".into(), "phi".into()];
    header.extend((0..n).map(|k| format!("m_{k}")));
    for k in 0..n {
        for l in k..n {
            header.push(format!("gram_{k}_{l}"));
        }
    }
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            format!("{}", r.tau),
            format!("{}", r.censored),
            format!("{}", r.phi),
        ];
        row.extend(r.m.iter().map(|v| format!("{v}")));
        for k in 0..n {
            for l in k..n {
                row.push(format!("{}", r.gram_at(k, l)));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fields::{ConstantScalar, ConstantVector};
    use crate::model::BoxDomain;
    use std::sync::Arc;

    fn record(m: Vec<f64>, gram: Vec<f64>) -> TrajectoryRecord {
        TrajectoryRecord {
            sample_index: 0,
            tau: 1.0,
            exit_state: vec![0.0],
            censored: false,
            phi: 0.0,
            m,
            gram,
            n_steps: 1,
        }
    }

    #[test]
    fn exponential_martingale_values() {
        let rec = record(vec![2.0], vec![1.0]);
        assert_eq!(exponential_martingale(&rec, &CoeffVector::zeros(1)).unwrap(), 1.0);
        let w = exponential_martingale(&rec, &CoeffVector::new(vec![1.0])).unwrap();
        assert!((w - 1.5f64.exp()).abs() < 1e-12);
        let big = record(vec![1e4], vec![0.0]);
        assert!(matches!(
            exponential_martingale(&big, &CoeffVector::new(vec![1.0])),
            Err(Error::EstimatorUnusable(_))
        ));
    }

    #[test]
    fn bridge_probability_cases() {
        assert_eq!(bridge_exit_probability(0.2, 1.0, 1.0, 1.0, 0.01), 1.0);
        assert_eq!(bridge_exit_probability(-1e6, 0.0, 1.0, 1.0, 0.01), 0.0);
        let p = bridge_exit_probability(0.5, 0.5, 1.0, 1.0, 0.01);
        assert!((p - (-50.0f64).exp()).abs() < 1e-35);
        assert!((p - 1.9287e-22).abs() < 1e-25);
    }

    fn brownian(f: f64, bridge: bool) -> ProblemSpec {
        ProblemSpec::builder("bm", BoxDomain::new(vec![(-2.0, 1.0)]).unwrap())
            .drift(Arc::new(ConstantVector(vec![-1.0])))
            .diffusion(Diffusion::Constant(DMatrix::from_element(1, 1, f)))
            .alpha(1.0)
            .running_cost(Arc::new(ConstantScalar(1.0)), true)
            .basis_function("one", Arc::new(ConstantVector(vec![1.0])), 1.0)
            .initial_state(vec![0.0])
            .dt(1e-3)
            .t_max(50.0)
            .bridge(bridge)
            .build()
            .unwrap()
    }

    #[test]
    fn scalar_fast_path_matches_general_loop() {
        use crate::model::fields::{FnMatrixField, GaussianBump};
        let bump = |c: f64| {
            Arc::new(GaussianBump {
                center: vec![c],
                width: 0.4,
                direction: vec![1.0],
            })
        };
        let build = |diffusion: Diffusion| {
            ProblemSpec::builder("bm", BoxDomain::new(vec![(-2.0, 1.0)]).unwrap())
                .drift(Arc::new(ConstantVector(vec![-0.5])))
                .diffusion(diffusion)
                .alpha(1.5)
                .running_cost(Arc::new(ConstantScalar(1.0)), true)
                .basis_function("b0", bump(-0.5), 1.0)
                .basis_function("b1", bump(0.3), 1.0)
                .initial_state(vec![0.0])
                .dt(1e-3)
                .t_max(50.0)
                .bridge(true)
                .build()
                .unwrap()
        };
        let fast = build(Diffusion::Constant(DMatrix::from_element(1, 1, 1.5)));
        let general = build(Diffusion::Field(Arc::new(FnMatrixField::new(
            "const",
            |_t: f64, _x: &[f64], out: &mut DMatrix<f64>| out[(0, 0)] = 1.5,
        ))));
        let a = CoeffVector::new(vec![0.4, -0.7]);
        for i in 0..20 {
            let r1 = simulate_path(&fast, &a, RngStream::new(8, i)).unwrap();
            let r2 = simulate_path(&general, &a, RngStream::new(8, i)).unwrap();
            assert_eq!(r1.n_steps, r2.n_steps);
            assert_eq!(r1.exit_state, r2.exit_state);
            for (x, y) in r1.m.iter().zip(&r2.m).chain(r1.gram.iter().zip(&r2.gram)) {
                assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn unit_control_gives_brownian_motion_with_m_equal_displacement() {
        let spec = brownian(1.0, false);
        let a = CoeffVector::new(vec![1.0]);
        for i in 0..20 {
            let rec = simulate_path(&spec, &a, RngStream::new(3, i)).unwrap();
            assert!(!rec.censored);
            assert!((rec.m[0] - rec.exit_state[0]).abs() < 1e-9);
            assert_eq!(rec.tau, rec.n_steps as f64 * 1e-3);
            assert!((rec.gram[0] - rec.tau).abs() < 1e-9);
            assert!((rec.phi - rec.tau).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_diffusion_kills_martingales() {
        let spec = brownian(0.0, false).with_t_max(0.5).unwrap();
        let rec = simulate_path(&spec, &CoeffVector::new(vec![0.7]), RngStream::new(1, 0)).unwrap();
        assert_eq!(rec.m, vec![0.0]);
        assert_eq!(rec.gram, vec![0.0]);
        assert!(rec.censored);
        assert!((rec.tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn deterministic_and_crn_across_controls() {
        let spec = brownian(1.0, true);
        let a = CoeffVector::new(vec![0.3]);
        let r1 = simulate_path(&spec, &a, RngStream::new(9, 5)).unwrap();
        let r2 = simulate_path(&spec, &a, RngStream::new(9, 5)).unwrap();
        assert_eq!(r1, r2);
        let batch = simulate_batch(&spec, &a, 8, 9).unwrap();
        assert_eq!(batch[5], r1);
        assert!(batch.iter().enumerate().all(|(i, r)| r.sample_index == i as u64));
    }

    #[test]
    fn bridge_exit_lands_on_barrier() {
        let spec = brownian(1.0, true).with_dt(0.01).unwrap();
        let a = CoeffVector::new(vec![1.0]);
        let mut on_barrier = 0;
        for i in 0..200 {
            let rec = simulate_path(&spec, &a, RngStream::new(2, i)).unwrap();
            let x = rec.exit_state[0];
            assert!(x <= -2.0 || x >= 1.0);
            if x == -2.0 || x == 1.0 {
                on_barrier += 1;
            }
        }
        assert!(on_barrier > 0);
    }

    #[test]
    fn csv_dump_has_upper_triangle() {
        let mut rec = record(vec![1.0, 2.0], vec![1.0, 0.5, 0.5, 2.0]);
        rec.tau = 0.25;
        let mut buf = Vec::new();
        write_records_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "tau,censored,phi,m_0,m_1,gram_0_0,gram_0_1,gram_1_1"
        );
        assert_eq!(lines.next().unwrap(), "0.25,false,0,1,2,1,0.5,2");
    }
}
