//! Mesh planning and closed-form inter-machine communication volumes.
//!
//! All formulas are evaluated in exact rational arithmetic. The USP and SFU
//! volumes count elements crossing machine boundaries per machine: the trace
//! attributes each transfer to the GPU that issues it, so a single GPU moves
//! `1/M` of these amounts.

use std::fmt;

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simnet::Trace;

pub type Rational = Ratio<i128>;

fn q(n: usize) -> Rational {
    Rational::from_integer(n as i128)
}

/// Exact rational serialized as `"num/den"` next to its float value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Exact(pub Rational);

impl Serialize for Exact {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map(Exact).map_err(serde::de::Error::custom)
    }
}

fn parse_rational(s: &str) -> Result<Rational> {
    let bad = || Error::Format(format!("not a rational: {s}"));
    match s.split_once('/') {
        Some((a, b)) => {
            let den: i128 = b.trim().parse().map_err(|_| bad())?;
            if den == 0 {
                return Err(bad());
            }
            Ok(Rational::new(a.trim().parse().map_err(|_| bad())?, den))
        }
        None => Ok(Rational::from_integer(s.trim().parse().map_err(|_| bad())?)),
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_integer() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl Exact {
    pub fn to_f64(self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }
}

/// Ulysses degree `gcd(N*M, H)` and ring degree `N*M / P_u`.
pub fn plan_mesh(n: usize, m: usize, h: usize) -> (usize, usize) {
    let p = n * m;
    let p_u = p.gcd(&h);
    (p_u, p / p_u)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub b: usize,
    pub l: usize,
    pub h: usize,
    pub d: usize,
}

impl Workload {
    pub fn blhd(&self) -> usize {
        self.b * self.l * self.h * self.d
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    pub elements: Rational,
    /// Whether the shard sizes divide evenly so the value is a whole count.
    pub divisible: bool,
}

/// Per-GPU elements moved by ring attention over `p` ranks: `2(P-1)BLHD/P`.
pub fn ring_volume(p: usize, w: Workload) -> Volume {
    let blhd = w.blhd();
    Volume {
        elements: q(2 * (p - 1)) * q(blhd) / q(p),
        divisible: blhd % p == 0,
    }
}

/// Per-GPU elements moved by Ulysses attention over `p` ranks: `4(P-1)BLHD/P^2`.
pub fn ulysses_volume(p: usize, w: Workload) -> Volume {
    let blhd = w.blhd();
    Volume {
        elements: q(4 * (p - 1)) * q(blhd) / q(p * p),
        divisible: blhd % (p * p) == 0 && w.h % p == 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The ring (USP) or Ulysses (SFU) degree is at least the machine count.
    AtLeastN,
    /// The degree is below the machine count.
    BelowN,
}

fn check_mesh(n: usize, m: usize, p_u: usize, p_r: usize) -> Result<()> {
    if n == 0 || m == 0 || p_u == 0 || p_r == 0 {
        return Err(Error::Planning("mesh degrees must be >= 1".into()));
    }
    if p_u * p_r != n * m {
        return Err(Error::Planning(format!(
            "P_u * P_r = {p_u} * {p_r} does not equal N * M = {n} * {m}"
        )));
    }
    Ok(())
}

/// USP inter-machine elements per machine, with the branch used.
pub fn volume_usp(n: usize, m: usize, p_u: usize, p_r: usize, w: Workload) -> Result<(Rational, Regime)> {
    check_mesh(n, m, p_u, p_r)?;
    let per = q(w.blhd()) / q(n);
    if p_r >= n {
        Ok((q(2 * (n - 1)) * per, Regime::AtLeastN))
    } else {
        Ok((usp_below(n, p_r) * per, Regime::BelowN))
    }
}

fn usp_below(n: usize, p_r: usize) -> Rational {
    q(2 * n + 4) - (q(2 * n) / q(p_r) + q(4 * p_r) / q(n))
}

/// StreamFusion / TAS inter-machine elements per machine, with the branch used.
pub fn volume_sfu(n: usize, m: usize, p_u: usize, p_r: usize, w: Workload) -> Result<(Rational, Regime)> {
    check_mesh(n, m, p_u, p_r)?;
    let per = q(w.blhd()) / q(n);
    if p_u >= n {
        Ok((q(4 * (n - 1)) / q(n) * per, Regime::AtLeastN))
    } else {
        Ok((sfu_below(n, p_u) * per, Regime::BelowN))
    }
}

fn sfu_below(n: usize, p_u: usize) -> Rational {
    (q(6) - q(4) / q(p_u)) * q(n) / q(p_u) - q(2)
}

/// Both USP branches evaluated at the boundary `P_r = N`.
pub fn usp_boundary(n: usize) -> (Rational, Rational) {
    (q(2 * (n - 1)), usp_below(n, n))
}

/// Both SFU branches evaluated at the boundary `P_u = N`.
pub fn sfu_boundary(n: usize) -> (Rational, Rational) {
    (q(4 * (n - 1)) / q(n), sfu_below(n, n))
}

/// Normalized `V_USP - V_SFU` on the lattice `2 <= M <= P_u <= N`.
pub fn v_diff(m: usize, p_u: usize, n: usize) -> Rational {
    q(4 * n) / q(p_u * p_u) - q(4 * m + 6 * n) / q(p_u) - q(2 * p_u) / q(m) + q(2 * n) + q(6)
}

/// `V_diff` at `P_u = M`.
pub fn f_at_m(m: usize, n: usize) -> Rational {
    q(2 * n * (m - 1) * (m - 2)) / q(m * m)
}

/// `V_diff` at `P_u = N`.
pub fn f_at_n(m: usize, n: usize) -> Rational {
    q(2 * n) + q(4) / q(n) - (q(2 * n) / q(m) + q(4 * m) / q(n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaPoint {
    pub m: usize,
    pub p_u: usize,
    pub n: usize,
    pub v_diff: Exact,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub max_n: usize,
    pub checked: usize,
    pub violations: Vec<LemmaPoint>,
    pub zeros: Vec<LemmaPoint>,
    /// Triples where a proof endpoint formula disagrees with direct evaluation.
    pub endpoint_mismatches: Vec<LemmaPoint>,
    pub points: Vec<LemmaPoint>,
}

impl LemmaReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty() && self.endpoint_mismatches.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,p_u,n,v_diff,v_diff_f64\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.m,
                p.p_u,
                p.n,
                p.v_diff,
                p.v_diff.to_f64()
            ));
        }
        out
    }
}

pub fn lemma_sweep(max_n: usize) -> Result<LemmaReport> {
    if max_n < 2 {
        return Err(Error::Planning(format!("max_n must be >= 2, got {max_n}")));
    }
    let mut report = LemmaReport {
        max_n,
        checked: 0,
        violations: Vec::new(),
        zeros: Vec::new(),
        endpoint_mismatches: Vec::new(),
        points: Vec::new(),
    };
    for n in 2..=max_n {
        for m in 2..=n {
            for p_u in m..=n {
                let v = v_diff(m, p_u, n);
                let point = LemmaPoint {
                    m,
                    p_u,
                    n,
                    v_diff: Exact(v),
                };
                report.checked += 1;
                if v.is_negative() {
                    report.violations.push(point.clone());
                }
                if v.is_zero() {
                    report.zeros.push(point.clone());
                }
                let endpoint_ok = (p_u != m || v == f_at_m(m, n)) && (p_u != n || v == f_at_n(m, n));
                if !endpoint_ok {
                    report.endpoint_mismatches.push(point.clone());
                }
                report.points.push(point);
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanInput {
    pub n: usize,
    pub m: usize,
    pub workload: Workload,
}

/// Traced inter-machine elements of one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracedInter {
    pub strategy: String,
    /// Inter elements issued by each GPU.
    pub per_gpu: Vec<u64>,
    /// Inter elements issued by each machine's GPUs together.
    pub per_machine: Vec<u64>,
    pub expected_per_machine: Exact,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeReport {
    pub n: usize,
    pub m: usize,
    pub workload: Workload,
    /// Mesh used for USP: Ulysses inside each machine.
    pub usp_p_u: usize,
    pub usp_p_r: usize,
    /// Mesh from the gcd plan, used for TAS and the torus strategy.
    pub sfu_p_u: usize,
    pub sfu_p_r: usize,
    pub v_usp: Exact,
    pub v_sfu: Exact,
    pub v_usp_f64: f64,
    pub v_sfu_f64: f64,
    pub v_diff_normalized: Exact,
    pub usp_regime: Regime,
    pub sfu_regime: Regime,
    /// Set when the divisibility the trace cross-check needs does not hold.
    pub usp_analytical_only: bool,
    pub sfu_analytical_only: bool,
    pub verdict: String,
    pub traced: Vec<TracedInter>,
    pub discrepancies: Vec<String>,
}

impl VolumeReport {
    pub fn all_traces_match(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Analytical USP and SFU volumes for a plan, without traces.
pub fn compare_report(input: PlanInput) -> Result<VolumeReport> {
    let PlanInput { n, m, workload: w } = input;
    if n == 0 || m == 0 || w.b == 0 || w.l == 0 || w.h == 0 || w.d == 0 {
        return Err(Error::Planning("N, M, B, L, H, D must all be >= 1".into()));
    }
    let (usp_p_u, usp_p_r) = (m, n);
    let (sfu_p_u, sfu_p_r) = plan_mesh(n, m, w.h);
    let (v_usp, usp_regime) = volume_usp(n, m, usp_p_u, usp_p_r, w)?;
    let (v_sfu, sfu_regime) = volume_sfu(n, m, sfu_p_u, sfu_p_r, w)?;
    let per = q(w.blhd()) / q(n);
    let v_diff_normalized = (v_usp - v_sfu) / per;
    let verdict = if n == 1 {
        "single machine: no inter-machine traffic".to_string()
    } else if v_usp == v_sfu {
        if n == 2 {
            "equal inter volume (TAS = USP at N=2)".to_string()
        } else {
            "equal inter volume".to_string()
        }
    } else if v_sfu < v_usp {
        "sfu < usp".to_string()
    } else {
        "sfu > usp".to_string()
    };
    let p = n * m;
    // The torus mesh needs N | P_u, which also rules out the P_u < N branch.
    let usp_analytical_only = w.h % usp_p_u != 0 || w.l % p != 0;
    let sfu_analytical_only = sfu_p_u % n != 0 || w.l % p != 0;
    Ok(VolumeReport {
        n,
        m,
        workload: w,
        usp_p_u,
        usp_p_r,
        sfu_p_u,
        sfu_p_r,
        v_usp: Exact(v_usp),
        v_sfu: Exact(v_sfu),
        v_usp_f64: Exact(v_usp).to_f64(),
        v_sfu_f64: Exact(v_sfu).to_f64(),
        v_diff_normalized: Exact(v_diff_normalized),
        usp_regime,
        sfu_regime,
        usp_analytical_only,
        sfu_analytical_only,
        verdict,
        traced: Vec::new(),
        discrepancies: Vec::new(),
    })
}

impl VolumeReport {
    /// Cross-checks a traced run against `expected` per machine. Mismatches
    /// are recorded as discrepancies.
    pub fn attach_trace(&mut self, strategy: &str, trace: &Trace, expected: Rational) {
        let mesh = trace.mesh;
        let per_gpu: Vec<u64> = trace.volumes().iter().map(|v| v.inter).collect();
        let per_machine: Vec<u64> = (0..mesh.n_machines)
            .map(|k| trace.machine_inter_volume(k))
            .collect();
        let per_gpu_expected = expected / q(mesh.gpus_per_machine);
        let mut matches = true;
        for (k, &v) in per_machine.iter().enumerate() {
            if q(v as usize) != expected {
                matches = false;
                self.discrepancies.push(format!(
                    "{strategy}: machine {k} moved {v} inter elements, formula gives {}",
                    Exact(expected)
                ));
            }
        }
        for (g, &v) in per_gpu.iter().enumerate() {
            if q(v as usize) != per_gpu_expected {
                matches = false;
                self.discrepancies.push(format!(
                    "{strategy}: GPU {g} moved {v} inter elements, formula/M gives {}",
                    Exact(per_gpu_expected)
                ));
            }
        }
        self.traced.push(TracedInter {
            strategy: strategy.to_string(),
            per_gpu,
            per_machine,
            expected_per_machine: Exact(expected),
            matches,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(b: usize, l: usize, h: usize, d: usize) -> Workload {
        Workload { b, l, h, d }
    }

    fn r(n: i128, d: i128) -> Rational {
        Rational::new(n, d)
    }

    #[test]
    fn gcd_plans() {
        assert_eq!(plan_mesh(3, 8, 24), (24, 1));
        assert_eq!(plan_mesh(4, 8, 24), (8, 4));
        assert_eq!(plan_mesh(1, 1, 7), (1, 1));
    }

    #[test]
    fn ring_and_ulysses_formulas() {
        let x = w(1, 16, 4, 8);
        assert_eq!(ring_volume(1, x).elements, r(0, 1));
        assert_eq!(ulysses_volume(1, x).elements, r(0, 1));
        assert_eq!(ring_volume(2, x).elements, r(512, 1));
        assert_eq!(ulysses_volume(2, x).elements, r(512, 1));
        assert_eq!(ring_volume(4, x).elements, r(768, 1));
        assert_eq!(ulysses_volume(4, x).elements, r(384, 1));
        assert!(!ring_volume(3, w(1, 16, 1, 1)).divisible);
    }

    #[test]
    fn usp_and_sfu_examples() {
        let x = w(1, 16, 4, 8);
        assert_eq!(volume_usp(4, 2, 2, 4, x).unwrap(), (r(768, 1), Regime::AtLeastN));
        assert_eq!(volume_sfu(4, 2, 8, 1, x).unwrap(), (r(384, 1), Regime::AtLeastN));
        assert_eq!(volume_usp(1, 4, 4, 1, x).unwrap().0, r(0, 1));
        assert_eq!(volume_sfu(1, 4, 4, 1, x).unwrap().0, r(0, 1));
        assert!(volume_usp(2, 2, 3, 2, x).is_err());
    }

    #[test]
    fn branches_agree_at_boundaries() {
        for n in 1..40 {
            let (a, b) = usp_boundary(n);
            assert_eq!(a, b);
            let (a, b) = sfu_boundary(n);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lemma_examples() {
        assert_eq!(v_diff(2, 2, 2), r(0, 1));
        assert_eq!(f_at_m(2, 2), r(0, 1));
        assert_eq!(v_diff(2, 2, 4), r(0, 1));
        let rep = lemma_sweep(12).unwrap();
        assert!(rep.holds());
        assert!(rep.zeros.iter().any(|p| (p.m, p.p_u, p.n) == (2, 2, 4)));
        assert!(lemma_sweep(1).is_err());
        let csv = rep.to_csv();
        assert!(csv.starts_with("m,p_u,n,v_diff"));
        assert_eq!(csv.lines().count(), rep.checked + 1);
    }

    #[test]
    fn usp_below_branch_matches_lemma_algebra() {
        // With P_r = N*M/P_u both below-N branches reduce to the lemma's V_diff.
        for n in 2..10 {
            for m in 2..=n {
                for p_u in m..=n {
                    if (n * m) % p_u != 0 {
                        continue;
                    }
                    let p_r = n * m / p_u;
                    let x = w(1, n, 1, 1);
                    let (u, _) = volume_usp(n, m, p_u, p_r, x).unwrap();
                    let (s, _) = volume_sfu(n, m, p_u, p_r, x).unwrap();
                    assert_eq!(u - s, v_diff(m, p_u, n), "M={m} P_u={p_u} N={n}");
                }
            }
        }
    }

    #[test]
    fn compare_report_verdicts() {
        let rep = compare_report(PlanInput { n: 4, m: 2, workload: w(1, 16, 8, 4) }).unwrap();
        assert_eq!(rep.v_usp.0, r(768, 1));
        assert_eq!(rep.v_sfu.0, r(384, 1));
        assert_eq!(rep.verdict, "sfu < usp");
        let rep = compare_report(PlanInput { n: 2, m: 2, workload: w(1, 16, 8, 4) }).unwrap();
        assert_eq!(rep.v_usp, rep.v_sfu);
        assert!(rep.verdict.contains("TAS = USP"));
        let rep = compare_report(PlanInput { n: 1, m: 4, workload: w(1, 16, 8, 4) }).unwrap();
        assert_eq!(rep.v_usp.0, r(0, 1));
        assert_eq!(rep.v_sfu.0, r(0, 1));
    }

    #[test]
    fn exact_serializes_as_fraction() {
        let s = serde_json::to_string(&Exact(r(3, 4))).unwrap();
        assert_eq!(s, "\"3/4\"");
        let back: Exact = serde_json::from_str(&s).unwrap();
        assert_eq!(back.0, r(3, 4));
        assert_eq!(Exact(r(6, 3)).to_string(), "2");
    }
}
