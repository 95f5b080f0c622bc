//! AC (polar Newton–Raphson) and DC power flow, plus the fixed output-vector layout the
//! surrogate learns.

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{build_dc_matrices, build_ybus, BusKind, DcMatrices, GridCase};
use crate::linalg::{lu_solve, norm_inf};

/// Net injections and voltage setpoints for one power-flow run. All vectors are per bus.
#[derive(Debug, Clone, PartialEq)]
pub struct PfInput {
    /// Net active injection; the slack entry is ignored.
    pub p_injection: Vec<f64>,
    /// Net reactive injection; only PQ entries are used.
    pub q_injection: Vec<f64>,
    /// Voltage magnitude at Slack/PV buses; PQ entries are ignored.
    pub v_setpoints: Vec<f64>,
}

impl PfInput {
    /// Given net active injections, take reactive loads and setpoints from the case.
    pub fn from_active(case: &GridCase, p_injection: Vec<f64>) -> Self {
        Self {
            p_injection,
            q_injection: case.buses.iter().map(|b| -b.q_load).collect(),
            v_setpoints: case.buses.iter().map(|b| b.v_setpoint).collect(),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.p_injection.len() != n || self.q_injection.len() != n || self.v_setpoints.len() != n {
            return Err(Error::Dimension(format!("power-flow input must have {n} entries per vector")));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.p_injection) || !finite(&self.q_injection) || !finite(&self.v_setpoints) {
            return Err(Error::InvalidArgument("non-finite power-flow input".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfOptions {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PfSolution {
    pub v_mag: Vec<f64>,
    pub v_ang: Vec<f64>,
    /// Active generation at the slack bus (net injection plus local load).
    pub p_slack: f64,
    /// Reactive generation per distinct generator bus, ordered as [`GridCase::generator_buses`].
    pub q_gen: Vec<f64>,
    /// `max(|S_from|, |S_to|)` per branch.
    pub s_flow: Vec<f64>,
    /// Computed net injections at the final state.
    pub p_injection: Vec<f64>,
    pub q_injection: Vec<f64>,
    /// Series plus charging losses summed over branches (active part).
    pub losses: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the power mismatch at the final state.
    pub mismatch: f64,
    /// Mismatch norm before each Newton update, final entry included.
    pub mismatch_history: Vec<f64>,
}

/// Reusable AC solver for one case (holds the admittance matrix and bus partitions).
#[derive(Debug, Clone)]
pub struct AcSolver<'a> {
    case: &'a GridCase,
    ybus: Mat<Complex64>,
    pvpq: Vec<usize>,
    pq: Vec<usize>,
    gen_buses: Vec<usize>,
}

impl<'a> AcSolver<'a> {
    pub fn new(case: &'a GridCase) -> Self {
        let n = case.n_buses();
        let pv: Vec<usize> = (0..n).filter(|&i| case.buses[i].kind == BusKind::Pv).collect();
        let pq = case.pq_buses();
        let mut pvpq = pv;
        pvpq.extend(&pq);
        Self {
            case,
            ybus: build_ybus(case),
            pvpq,
            pq,
            gen_buses: case.generator_buses(),
        }
    }

    pub fn ybus(&self) -> &Mat<Complex64> {
        &self.ybus
    }

    fn power(&self, v: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let n = v.len();
        let current: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|k| self.ybus[(i, k)] * v[k]).sum())
            .collect();
        let s = (0..n).map(|i| v[i] * current[i].conj()).collect();
        (s, current)
    }

    /// Newton–Raphson from a flat start.
    pub fn solve(&self, input: &PfInput, opts: PfOptions) -> Result<PfSolution> {
        let n = self.case.n_buses();
        input.validate(n)?;
        let mut vm: Vec<f64> = (0..n)
            .map(|i| match self.case.buses[i].kind {
                BusKind::Pq => 1.0,
                _ => input.v_setpoints[i],
            })
            .collect();
        let mut va = vec![0.0; n];
        self.solve_from(input, opts, &mut vm, &mut va)
    }

    /// Newton–Raphson from a caller-provided (warm) state; `vm` at Slack/PV buses is reset to setpoints.
    pub fn solve_from(
        &self,
        input: &PfInput,
        opts: PfOptions,
        vm: &mut [f64],
        va: &mut [f64],
    ) -> Result<PfSolution> {
        if !(opts.tolerance > 0.0) {
            return Err(Error::InvalidArgument("power-flow tolerance must be positive".into()));
        }
        let n = self.case.n_buses();
        input.validate(n)?;
        let slack = self.case.slack_bus();
        for i in 0..n {
            if self.case.buses[i].kind != BusKind::Pq {
                vm[i] = input.v_setpoints[i];
            }
        }
        va[slack] = 0.0;
        let (npvpq, npq) = (self.pvpq.len(), self.pq.len());
        let dim = npvpq + npq;
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        let mut mismatch;
        loop {
            let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
            let (s, current) = self.power(&v);
            let mut f = Vec::with_capacity(dim);
            f.extend(self.pvpq.iter().map(|&i| input.p_injection[i] - s[i].re));
            f.extend(self.pq.iter().map(|&i| input.q_injection[i] - s[i].im));
            mismatch = norm_inf(&f);
            history.push(mismatch);
            if !mismatch.is_finite() {
                break;
            }
            if mismatch < opts.tolerance {
                converged = true;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }
            iterations += 1;

            // dS/dθ_k = j V_i conj(δ_ik I_i − Y_ik V_k);  dS/d|V|_k = V_i conj(Y_ik V_k/|V_k|) + δ_ik conj(I_i) V_i/|V_i|
            let ds_dva = |i: usize, k: usize| {
                let mut t = -self.ybus[(i, k)] * v[k];
                if i == k {
                    t += current[i];
                }
                Complex64::new(0.0, 1.0) * v[i] * t.conj()
            };
            let ds_dvm = |i: usize, k: usize| {
                let unit_k = v[k] / vm[k];
                let mut t = v[i] * (self.ybus[(i, k)] * unit_k).conj();
                if i == k {
                    t += current[i].conj() * v[i] / vm[i];
                }
                t
            };
            let jac = Mat::from_fn(dim, dim, |r, c| {
                let (i, p_row) = if r < npvpq { (self.pvpq[r], true) } else { (self.pq[r - npvpq], false) };
                let d = if c < npvpq {
                    ds_dva(i, self.pvpq[c])
                } else {
                    ds_dvm(i, self.pq[c - npvpq])
                };
                if p_row {
                    d.re
                } else {
                    d.im
                }
            });
            let dx = lu_solve(jac.as_ref(), &f).ok_or(Error::SingularJacobian(iterations))?;
            for (k, &i) in self.pvpq.iter().enumerate() {
                va[i] += dx[k];
            }
            for (k, &i) in self.pq.iter().enumerate() {
                vm[i] += dx[npvpq + k];
            }
        }
        Ok(self.finish(vm, va, converged, iterations, mismatch, history))
    }

    fn finish(
        &self,
        vm: &[f64],
        va: &[f64],
        converged: bool,
        iterations: usize,
        mismatch: f64,
        mismatch_history: Vec<f64>,
    ) -> PfSolution {
        let case = self.case;
        let n = case.n_buses();
        let v: Vec<Complex64> = (0..n).map(|i| Complex64::from_polar(vm[i], va[i])).collect();
        let (s, _) = self.power(&v);
        let slack = case.slack_bus();
        let mut s_flow = Vec::with_capacity(case.branches.len());
        let mut losses = 0.0;
        for br in &case.branches {
            let (sf, st) = branch_power(br, &v);
            s_flow.push(sf.norm().max(st.norm()));
            losses += sf.re + st.re;
        }
        PfSolution {
            v_mag: vm.to_vec(),
            v_ang: va.to_vec(),
            p_slack: s[slack].re + case.buses[slack].p_load,
            q_gen: self
                .gen_buses
                .iter()
                .map(|&b| s[b].im + case.buses[b].q_load)
                .collect(),
            s_flow,
            p_injection: s.iter().map(|x| x.re).collect(),
            q_injection: s.iter().map(|x| x.im).collect(),
            losses,
            converged,
            iterations,
            mismatch,
            mismatch_history,
        }
    }
}

/// Complex power entering the branch at its from and to ends.
pub fn branch_power(br: &crate::grid::Branch, v: &[Complex64]) -> (Complex64, Complex64) {
    let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
    let half = Complex64::new(0.0, br.b_charging / 2.0);
    let t = br.tap_ratio;
    let (vf, vt) = (v[br.from_bus], v[br.to_bus]);
    let i_f = (ys + half) / (t * t) * vf - ys / t * vt;
    let i_t = -ys / t * vf + (ys + half) * vt;
    (vf * i_f.conj(), vt * i_t.conj())
}

/// Solve AC power flow from a flat start.
pub fn solve_ac(case: &GridCase, input: &PfInput, tol: f64, max_iter: usize) -> Result<PfSolution> {
    AcSolver::new(case).solve(
        input,
        PfOptions {
            tolerance: tol,
            max_iter,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcSolution {
    pub theta: Vec<f64>,
    /// Active flow per branch in from→to direction.
    pub p_flow: Vec<f64>,
    /// Active generation at the slack bus (balance of all other injections plus local load).
    pub p_slack: f64,
}

pub fn solve_dc_with(case: &GridCase, dc: &DcMatrices, p_injection: &[f64]) -> DcSolution {
    let theta = dc.angles(p_injection);
    let p_flow = (0..case.branches.len())
        .map(|k| (0..theta.len()).map(|i| dc.flow_map[(k, i)] * theta[i]).sum())
        .collect();
    let others: f64 = (0..p_injection.len())
        .filter(|&i| i != dc.slack)
        .map(|i| p_injection[i])
        .sum();
    DcSolution {
        theta,
        p_flow,
        p_slack: -others + case.buses[dc.slack].p_load,
    }
}

/// Lossless DC power flow.
pub fn solve_dc(case: &GridCase, p_injection: &[f64]) -> Result<DcSolution> {
    if p_injection.len() != case.n_buses() {
        return Err(Error::Dimension("DC injection vector length".into()));
    }
    let dc = build_dc_matrices(case)?;
    Ok(solve_dc_with(case, &dc, p_injection))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    Voltage,
    Reactive,
    Flow,
    SlackPower,
}

/// Fixed output ordering: `[V at PQ buses] ++ [Q at generator buses] ++ [S per branch] ++ [p_slack]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayout {
    pub pq_buses: Vec<usize>,
    pub gen_buses: Vec<usize>,
    pub n_branches: usize,
    /// ±1 per branch: the direction of the case's nominal DC flow. DC apparent flow is reported as
    /// the flow along this direction, which keeps the DC outputs exactly linear in the injections.
    pub flow_orientation: Vec<f64>,
}

impl OutputLayout {
    pub fn new(case: &GridCase) -> Result<Self> {
        let dc = solve_dc(case, &case.nominal_injections())?;
        Ok(Self {
            pq_buses: case.pq_buses(),
            gen_buses: case.generator_buses(),
            n_branches: case.branches.len(),
            flow_orientation: dc
                .p_flow
                .iter()
                .map(|&f| if f < 0.0 { -1.0 } else { 1.0 })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.pq_buses.len() + self.gen_buses.len() + self.n_branches + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self, j: usize) -> OutputKind {
        let (nv, nq) = (self.pq_buses.len(), self.gen_buses.len());
        if j < nv {
            OutputKind::Voltage
        } else if j < nv + nq {
            OutputKind::Reactive
        } else if j < nv + nq + self.n_branches {
            OutputKind::Flow
        } else {
            OutputKind::SlackPower
        }
    }

    pub fn slack_index(&self) -> usize {
        self.len() - 1
    }

    pub fn names(&self, case: &GridCase) -> Vec<String> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.pq_buses.iter().map(|&b| format!("V:bus{}", case.buses[b].id)));
        out.extend(self.gen_buses.iter().map(|&b| format!("Q:bus{}", case.buses[b].id)));
        out.extend((0..self.n_branches).map(|k| format!("S:br{}", k + 1)));
        out.push("pslack".to_string());
        out
    }

    /// Physical `(lower, upper)` limits per output (flows have no lower limit).
    pub fn limits(&self, case: &GridCase) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.pq_buses.iter().map(|&b| (case.buses[b].v_min, case.buses[b].v_max)));
        for &b in &self.gen_buses {
            let (lo, hi) = case
                .generators
                .iter()
                .filter(|g| g.bus == b)
                .fold((0.0, 0.0), |(lo, hi), g| (lo + g.q_min, hi + g.q_max));
            out.push((lo, hi));
        }
        out.extend(case.branches.iter().map(|br| (f64::NEG_INFINITY, br.s_max)));
        let slack = &case.generators[case.slack_generator()];
        out.push((slack.p_min, slack.p_max));
        out
    }

    /// Output vector of a converged AC solution.
    pub fn extract(&self, sol: &PfSolution) -> Result<Vec<f64>> {
        if !sol.converged {
            return Err(Error::NotConverged {
                iterations: sol.iterations,
                mismatch: sol.mismatch,
            });
        }
        let mut y = Vec::with_capacity(self.len());
        y.extend(self.pq_buses.iter().map(|&b| sol.v_mag[b]));
        y.extend(sol.q_gen.iter().copied());
        y.extend(sol.s_flow.iter().copied());
        y.push(sol.p_slack);
        Ok(y)
    }

    /// DC solution wrapped as outputs: V ≡ 1, Q ≡ 0, oriented active flow, slack generation.
    pub fn extract_dc(&self, sol: &DcSolution) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.len());
        y.extend(self.pq_buses.iter().map(|_| 1.0));
        y.extend(self.gen_buses.iter().map(|_| 0.0));
        y.extend(sol.p_flow.iter().zip(&self.flow_orientation).map(|(f, s)| f * s));
        y.push(sol.p_slack);
        y
    }
}

/// Output vector of a converged AC solution for `case` (see [`OutputLayout`]).
pub fn extract_outputs(case: &GridCase, sol: &PfSolution) -> Result<Vec<f64>> {
    OutputLayout::new(case)?.extract(sol)
}
