//! Subcommand implementations. Each returns the rendered report and whether
//! its checks passed.

use std::path::Path;

use num_rational::Ratio;
use serde::Serialize;

use seqpar::planner::{
    compare_report, lemma_sweep, ring_volume, ulysses_volume, volume_sfu, volume_usp, Exact, PlanInput, Rational,
    Workload,
};
use seqpar::simnet::{race_check, replay_timeline, ExecMode, LinkVolume, Mesh, Timeline, Trace};
use seqpar::strategies::schedule::{Move, StageKind};
use seqpar::strategies::{
    run_strategy, trace_schedule, RunOptions, ShardedInput, Strategy, StrategyRun, TorusSchedule, TraceSchedule,
};

use crate::config::{ConfigError, FileConfig, RunConfig};
use crate::report::{csv, envelope, table, to_json};
use crate::{Format, Outcome};

const TOLERANCE: f64 = 1e-10;
const DEFAULT_MAX_N: usize = 64;

#[derive(Debug, Clone, Copy, Serialize)]
struct MeshInfo {
    n: usize,
    m: usize,
    t: usize,
    u: usize,
    r: usize,
}

impl From<Mesh> for MeshInfo {
    fn from(m: Mesh) -> Self {
        MeshInfo {
            n: m.n_machines,
            m: m.gpus_per_machine,
            t: m.torus,
            u: m.ulysses,
            r: m.ring,
        }
    }
}

impl MeshInfo {
    fn label(&self) -> String {
        format!("{}x{}x{}", self.t, self.u, self.r)
    }
}

fn workload(cfg: &RunConfig) -> Workload {
    Workload {
        b: cfg.b,
        l: cfg.l,
        h: cfg.h,
        d: cfg.d,
    }
}

fn run_all(cfg: &RunConfig, meshes: &[(Strategy, Mesh)], mode: ExecMode) -> Result<Vec<StrategyRun>, ConfigError> {
    let input = ShardedInput::random(cfg.shape(), cfg.world_size(), cfg.seed)?;
    let opts = RunOptions {
        ring_variant: cfg.ring_variant,
        mode: Some(mode),
        ..RunOptions::default()
    };
    let mut runs = Vec::new();
    for &(s, mesh) in meshes {
        runs.push(run_strategy(s, mesh, &input, &opts)?);
    }
    Ok(runs)
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), ConfigError> {
    std::fs::create_dir_all(dir).map_err(|e| ConfigError(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))
}

fn export_traces(dir: Option<&Path>, runs: &[StrategyRun]) -> Result<(), ConfigError> {
    if let Some(dir) = dir {
        for run in runs {
            write_file(dir, &format!("{}.trace.jsonl", run.strategy), &run.trace.to_jsonl())?;
        }
    }
    Ok(())
}

fn q(x: u64) -> Rational {
    Ratio::from_integer(x as i128)
}

/// What a strategy's closed form predicts and which traced quantity it constrains.
#[derive(Debug, Clone, Serialize)]
struct FormulaCheck {
    metric: &'static str,
    expected: Option<Exact>,
    observed: Vec<u64>,
    matches: Option<bool>,
}

fn formula_check(strategy: Strategy, trace: &Trace, w: Workload) -> Result<FormulaCheck, ConfigError> {
    let mesh = trace.mesh;
    let (n, m, p) = (mesh.n_machines, mesh.gpus_per_machine, mesh.world_size());
    let per_gpu_total = |expected: Rational| {
        let observed: Vec<u64> = trace.volumes().iter().map(LinkVolume::total).collect();
        let matches = observed.iter().all(|&v| q(v) == expected);
        FormulaCheck {
            metric: "per_gpu_total",
            expected: Some(Exact(expected)),
            observed,
            matches: Some(matches),
        }
    };
    let per_machine_inter = |expected: Option<Rational>| {
        let observed: Vec<u64> = (0..n).map(|k| trace.machine_inter_volume(k)).collect();
        let matches = expected.map(|e| {
            observed.iter().all(|&v| q(v) == e)
                && trace.volumes().iter().all(|v| q(v.inter) * q(m as u64) == e)
        });
        FormulaCheck {
            metric: "per_machine_inter",
            expected: expected.map(Exact),
            observed,
            matches,
        }
    };
    Ok(match strategy {
        Strategy::Ring => per_gpu_total(ring_volume(p, w).elements),
        Strategy::Ulysses => per_gpu_total(ulysses_volume(p, w).elements),
        Strategy::Usp => per_machine_inter(Some(volume_usp(n, m, m, n, w)?.0)),
        Strategy::Tas | Strategy::Torus => {
            // The closed form assumes the torus degree equals the machine count.
            let expected = if mesh.torus == n {
                Some(volume_sfu(n, m, mesh.ulysses_degree(), mesh.ring, w)?.0)
            } else {
                None
            };
            per_machine_inter(expected)
        }
    })
}

#[derive(Serialize)]
struct VerifyRow {
    strategy: Strategy,
    mesh: MeshInfo,
    max_rel_error: f64,
    volumes: Vec<LinkVolume>,
    formula: FormulaCheck,
    /// `(barrier_all, group barriers)` per rank.
    barriers: Vec<(usize, usize)>,
    hazards: usize,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyBody {
    tolerance: f64,
    notes: Vec<String>,
    results: Vec<VerifyRow>,
}

pub fn verify(file: FileConfig, format: Format, trace_dir: Option<&Path>) -> Result<Outcome, ConfigError> {
    let cfg = RunConfig::resolve(file, &Strategy::ALL)?;
    let meshes = cfg.meshes()?;
    let runs = run_all(&cfg, &meshes, ExecMode::from_env())?;
    export_traces(trace_dir, &runs)?;
    let oracle = ShardedInput::random(cfg.shape(), cfg.world_size(), cfg.seed)?.oracle()?;
    let w = workload(&cfg);
    let mut results = Vec::new();
    for run in &runs {
        let max_rel_error = run.gathered()?.max_rel_error(&oracle)?;
        let formula = formula_check(run.strategy, &run.trace, w)?;
        let hazards = race_check(&run.trace).len();
        let passed = max_rel_error <= TOLERANCE && hazards == 0 && formula.matches != Some(false);
        results.push(VerifyRow {
            strategy: run.strategy,
            mesh: run.mesh.into(),
            max_rel_error,
            volumes: run.trace.volumes(),
            formula,
            barriers: (0..run.mesh.world_size()).map(|g| run.trace.barrier_counts(g)).collect(),
            hazards,
            passed,
        });
    }
    let mut notes = Vec::new();
    if cfg.n == 1 {
        notes.push("N=1: all strategies reduce to Ulysses attention within one machine".to_string());
    }
    let passed = results.iter().all(|r| r.passed);
    let mut summary: Vec<String> = results
        .iter()
        .map(|r| {
            format!(
                "{} {}: max rel error {:.3e}, {} hazards",
                if r.passed { "PASS" } else { "FAIL" },
                r.strategy,
                r.max_rel_error,
                r.hazards
            )
        })
        .collect();
    summary.extend(notes.iter().cloned());
    let headers = [
        "strategy", "mesh", "max_rel_error", "metric", "expected", "observed", "formula", "hazards", "passed",
    ];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.mesh.label(),
                format!("{:.3e}", r.max_rel_error),
                r.formula.metric.to_string(),
                r.formula.expected.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                join(&r.formula.observed),
                match r.formula.matches {
                    Some(true) => "match",
                    Some(false) => "MISMATCH",
                    None => "unchecked",
                }
                .to_string(),
                r.hazards.to_string(),
                r.passed.to_string(),
            ]
        })
        .collect();
    let body = match format {
        Format::Json => to_json(&envelope(
            "verify",
            cfg.to_value(),
            passed,
            VerifyBody {
                tolerance: TOLERANCE,
                notes,
                results,
            },
        )),
        Format::Csv => csv(&headers, &rows),
        Format::Table => table(&headers, &rows),
    };
    Ok(Outcome { body, passed, summary })
}

fn join(xs: &[u64]) -> String {
    xs.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct StrategyVolume {
    strategy: Strategy,
    mesh: Option<MeshInfo>,
    metric: &'static str,
    analytical: Option<Exact>,
    traced: Option<Vec<u64>>,
    matches: Option<bool>,
    /// Why no trace was taken.
    #[serde(skip_serializing_if = "Option::is_none")]
    analytical_only: Option<String>,
}

#[derive(Serialize)]
struct VolumesBody {
    report: seqpar::planner::VolumeReport,
    strategies: Vec<StrategyVolume>,
}

pub fn volumes(file: FileConfig, format: Format) -> Result<Outcome, ConfigError> {
    let cfg = RunConfig::resolve(file, &Strategy::ALL)?;
    let w = workload(&cfg);
    let mut report = compare_report(PlanInput {
        n: cfg.n,
        m: cfg.m,
        workload: w,
    })?;
    let input = ShardedInput::random(cfg.shape(), cfg.world_size(), cfg.seed)?;
    let opts = RunOptions {
        ring_variant: cfg.ring_variant,
        mode: Some(ExecMode::from_env()),
        ..RunOptions::default()
    };
    let mut rows = Vec::new();
    for &s in &cfg.strategies {
        let mesh = match cfg.mesh_for(s) {
            Ok(mesh) => mesh,
            Err(e) => {
                let (metric, analytical) = match s {
                    Strategy::Ring => ("per_gpu_total", Some(ring_volume(cfg.world_size(), w).elements)),
                    Strategy::Ulysses => ("per_gpu_total", Some(ulysses_volume(cfg.world_size(), w).elements)),
                    Strategy::Usp => ("per_machine_inter", Some(report.v_usp.0)),
                    Strategy::Tas | Strategy::Torus => ("per_machine_inter", Some(report.v_sfu.0)),
                };
                rows.push(StrategyVolume {
                    strategy: s,
                    mesh: None,
                    metric,
                    analytical: analytical.map(Exact),
                    traced: None,
                    matches: None,
                    analytical_only: Some(e.0),
                });
                continue;
            }
        };
        let run = run_strategy(s, mesh, &input, &opts)?;
        let check = formula_check(s, &run.trace, w)?;
        if let (Strategy::Usp | Strategy::Tas | Strategy::Torus, Some(expected)) = (s, check.expected) {
            report.attach_trace(s.name(), &run.trace, expected.0);
        }
        rows.push(StrategyVolume {
            strategy: s,
            mesh: Some(mesh.into()),
            metric: check.metric,
            analytical: check.expected,
            traced: Some(check.observed),
            matches: check.matches,
            analytical_only: None,
        });
    }
    let passed = report.all_traces_match() && rows.iter().all(|r| r.matches != Some(false));
    let mut summary = vec![format!(
        "V_usp = {} ({}), V_sfu = {} ({}) per machine: {}",
        report.v_usp,
        report.v_usp_f64,
        report.v_sfu,
        report.v_sfu_f64,
        report.verdict
    )];
    summary.extend(report.discrepancies.iter().cloned());
    let headers = ["strategy", "mesh", "metric", "analytical", "traced", "status"];
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.mesh.map(|m| m.label()).unwrap_or_else(|| "-".into()),
                r.metric.to_string(),
                r.analytical.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                r.traced.as_deref().map(join).unwrap_or_else(|| "-".into()),
                match (&r.analytical_only, r.matches) {
                    (Some(_), _) => "analytical only".to_string(),
                    (None, Some(true)) => "match".to_string(),
                    (None, Some(false)) => "MISMATCH".to_string(),
                    (None, None) => "unchecked".to_string(),
                },
            ]
        })
        .collect();
    let body = match format {
        Format::Json => to_json(&envelope(
            "volumes",
            cfg.to_value(),
            passed,
            VolumesBody {
                report,
                strategies: rows,
            },
        )),
        Format::Csv => csv(&headers, &table_rows),
        Format::Table => format!("{}\n{}", summary[0], table(&headers, &table_rows)),
    };
    Ok(Outcome { body, passed, summary })
}

#[derive(Serialize)]
struct LemmaBody {
    checked: usize,
    violations: Vec<seqpar::planner::LemmaPoint>,
    zeros: Vec<seqpar::planner::LemmaPoint>,
    endpoint_mismatches: Vec<seqpar::planner::LemmaPoint>,
    holds: bool,
}

pub fn lemma(file: FileConfig, format: Format) -> Result<Outcome, ConfigError> {
    let max_n = file.max_n.unwrap_or(DEFAULT_MAX_N);
    let report = lemma_sweep(max_n)?;
    let holds = report.holds();
    let summary = vec![format!(
        "{}: {} triples checked up to N={max_n}, {} violations, {} zeros, {} endpoint mismatches",
        if holds { "PASS" } else { "FAIL" },
        report.checked,
        report.violations.len(),
        report.zeros.len(),
        report.endpoint_mismatches.len()
    )];
    let body = match format {
        Format::Csv => report.to_csv(),
        Format::Json => to_json(&envelope(
            "lemma",
            serde_json::json!({ "max_n": max_n }),
            holds,
            LemmaBody {
                checked: report.checked,
                violations: report.violations,
                zeros: report.zeros,
                endpoint_mismatches: report.endpoint_mismatches,
                holds,
            },
        )),
        Format::Table => table(
            &["max_n", "checked", "violations", "zeros", "endpoint_mismatches", "holds"],
            &[vec![
                max_n.to_string(),
                report.checked.to_string(),
                report.violations.len().to_string(),
                report.zeros.len().to_string(),
                report.endpoint_mismatches.len().to_string(),
                holds.to_string(),
            ]],
        ),
    };
    Ok(Outcome {
        body,
        passed: holds,
        summary,
    })
}

#[derive(Serialize)]
struct SimulateRow {
    strategy: Strategy,
    mesh: MeshInfo,
    makespan: f64,
    max_compute_busy: f64,
    max_non_overlapped_comm: f64,
    max_non_overlapped_inter: f64,
    inter_elements: u64,
    inter_bytes: u64,
    timeline: Timeline,
}

#[derive(Serialize)]
struct Assertion {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct SimulateBody {
    results: Vec<SimulateRow>,
    assertions: Vec<Assertion>,
}

fn assertions(cfg: &RunConfig, rows: &[SimulateRow]) -> Vec<Assertion> {
    let mut out = Vec::new();
    for r in rows {
        // Relative slack for float summation order.
        let slack = 1e-12 * r.makespan.max(1e-30);
        out.push(Assertion {
            name: format!("{}: makespan >= compute", r.strategy),
            passed: r.makespan + slack >= r.max_compute_busy,
            detail: format!("{:e} vs {:e}", r.makespan, r.max_compute_busy),
        });
        if cfg.world_size() == 1 {
            out.push(Assertion {
                name: format!("{}: single rank makespan == compute", r.strategy),
                passed: (r.makespan - r.max_compute_busy).abs() <= slack,
                detail: format!("{:e} vs {:e}", r.makespan, r.max_compute_busy),
            });
        }
    }
    let find = |s: Strategy| rows.iter().find(|r| r.strategy == s);
    if cfg.n > 1 {
        if let (Some(torus), Some(tas)) = (find(Strategy::Torus), find(Strategy::Tas)) {
            let (a, b) = (torus.max_non_overlapped_inter, tas.max_non_overlapped_inter);
            out.push(Assertion {
                name: "torus hides more inter traffic than tas".into(),
                passed: a < b || (a == 0.0 && b == 0.0),
                detail: format!("{a:e}s vs {b:e}s non-overlapped"),
            });
        }
        if let (Some(tas), Some(usp)) = (find(Strategy::Tas), find(Strategy::Usp)) {
            let (a, b) = (tas.inter_elements, usp.inter_elements);
            let (name, passed) = if cfg.n == 2 {
                ("tas inter volume equals usp at N=2", a == b)
            } else {
                ("tas inter volume below usp", a < b)
            };
            out.push(Assertion {
                name: name.into(),
                passed,
                detail: format!("{a} vs {b} elements"),
            });
        }
    }
    out
}

pub fn simulate(
    file: FileConfig,
    format: Format,
    assert: bool,
    trace_dir: Option<&Path>,
) -> Result<Outcome, ConfigError> {
    let cfg = RunConfig::resolve(file, &Strategy::ALL)?;
    let meshes = cfg.meshes()?;
    let runs = run_all(&cfg, &meshes, ExecMode::from_env())?;
    export_traces(trace_dir, &runs)?;
    let mut rows = Vec::new();
    for run in runs {
        let timeline = replay_timeline(&run.trace, &cfg.model)?;
        if let Some(dir) = trace_dir {
            write_file(dir, &format!("{}.timeline.json", run.strategy), &to_json(&timeline))?;
        }
        let inter_elements: u64 = run.trace.volumes().iter().map(|v| v.inter).sum();
        rows.push(SimulateRow {
            strategy: run.strategy,
            mesh: run.mesh.into(),
            makespan: timeline.makespan,
            max_compute_busy: timeline.max_compute_busy(),
            max_non_overlapped_comm: timeline.max_non_overlapped_comm(),
            max_non_overlapped_inter: timeline.max_non_overlapped_inter(),
            inter_elements,
            inter_bytes: inter_elements * std::mem::size_of::<f64>() as u64,
            timeline,
        });
    }
    let checks = if assert { assertions(&cfg, &rows) } else { Vec::new() };
    let passed = checks.iter().all(|a| a.passed);
    let mut summary: Vec<String> = rows
        .iter()
        .map(|r| format!("{}: makespan {:.4e}s", r.strategy, r.makespan))
        .collect();
    summary.extend(
        checks
            .iter()
            .map(|a| format!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail)),
    );
    let headers = [
        "strategy",
        "mesh",
        "makespan",
        "compute",
        "non_overlapped_comm",
        "non_overlapped_inter",
        "inter_elements",
        "inter_bytes",
    ];
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.mesh.label(),
                format!("{:.4e}", r.makespan),
                format!("{:.4e}", r.max_compute_busy),
                format!("{:.4e}", r.max_non_overlapped_comm),
                format!("{:.4e}", r.max_non_overlapped_inter),
                r.inter_elements.to_string(),
                r.inter_bytes.to_string(),
            ]
        })
        .collect();
    let body = match format {
        Format::Json => to_json(&envelope(
            "simulate",
            cfg.to_value(),
            passed,
            SimulateBody {
                results: rows,
                assertions: checks,
            },
        )),
        Format::Csv => csv(&headers, &table_rows),
        Format::Table => table(&headers, &table_rows),
    };
    Ok(Outcome { body, passed, summary })
}

#[derive(Serialize)]
struct ScheduleEntry {
    strategy: Strategy,
    mesh: MeshInfo,
    /// Idealized stage plan; torus only.
    #[serde(skip_serializing_if = "Option::is_none")]
    stage_plan: Option<TorusSchedule>,
    ranks: Vec<TraceSchedule>,
}

#[derive(Serialize)]
struct ScheduleBody {
    schedules: Vec<ScheduleEntry>,
}

/// One line per stage: `t=0 pull_q:1 q=[0] kv=[0] send=[Q(0,1)->1] recv=[Q(2,0)<-2]`.
pub fn render_stage_plan(plan: &TorusSchedule) -> String {
    let list = |xs: &[usize]| format!("[{}]", xs.iter().map(usize::to_string).collect::<Vec<_>>().join(","));
    let moves = |ms: &[Move], outgoing: bool| {
        let parts: Vec<String> = ms
            .iter()
            .map(|m| {
                let c = format!("{:?}({},{})", m.chunk.tensor, m.chunk.seq, m.chunk.head);
                if outgoing {
                    format!("{c}->{}", m.to)
                } else {
                    format!("{c}<-{}", m.from)
                }
            })
            .collect();
        format!("[{}]", parts.join(" "))
    };
    let mut out = String::new();
    for r in &plan.ranks {
        for st in &r.stages {
            let stage = match st.kind {
                StageKind::PullQ => format!("pull_q:{}", st.k),
                StageKind::PullKv => format!("pull_kv:{}", st.k),
                StageKind::PushO => "push_o".to_string(),
            };
            out.push_str(&format!(
                "t={} {stage} q={} kv={} send={} recv={}\n",
                r.t,
                list(&st.q_seq),
                list(&st.kv_seq),
                moves(&st.sends, true),
                moves(&st.receives, false)
            ));
        }
    }
    out
}

pub fn schedule(file: FileConfig, format: Format) -> Result<Outcome, ConfigError> {
    let cfg = RunConfig::resolve(file, &[Strategy::Torus])?;
    let meshes = cfg.meshes()?;
    // Round-robin keeps the dump byte-identical across runs.
    let runs = run_all(&cfg, &meshes, ExecMode::RoundRobin)?;
    let schedules: Vec<ScheduleEntry> = runs
        .iter()
        .map(|run| ScheduleEntry {
            strategy: run.strategy,
            mesh: run.mesh.into(),
            stage_plan: (run.strategy == Strategy::Torus).then(|| TorusSchedule::new(run.mesh.torus)),
            ranks: trace_schedule(&run.trace),
        })
        .collect();
    let summary = schedules
        .iter()
        .map(|s| {
            let steps: usize = s.ranks.iter().map(|r| r.steps.len()).sum();
            format!("{}: {} ranks, {steps} steps", s.strategy, s.ranks.len())
        })
        .collect();
    let headers = [
        "strategy", "rank", "step", "label", "flops", "pairs", "transfers", "elements", "barriers",
    ];
    let mut rows = Vec::new();
    for s in &schedules {
        for r in &s.ranks {
            for (i, step) in r.steps.iter().enumerate() {
                let pairs: Vec<String> = step.pairs.iter().map(|(a, b, c)| format!("({a},{b},{c})")).collect();
                let groups: Vec<String> = step
                    .barriers
                    .iter()
                    .map(|g| format!("{{{}}}", g.iter().map(usize::to_string).collect::<Vec<_>>().join(",")))
                    .collect();
                rows.push(vec![
                    s.strategy.to_string(),
                    r.rank.to_string(),
                    i.to_string(),
                    step.label.clone(),
                    step.flops.to_string(),
                    pairs.join(" "),
                    step.issued.len().to_string(),
                    step.issued.iter().map(|t| t.elements).sum::<u64>().to_string(),
                    groups.join(" "),
                ]);
            }
        }
    }
    let body = match format {
        Format::Json => to_json(&envelope("schedule", cfg.to_value(), true, ScheduleBody { schedules })),
        Format::Csv => csv(&headers, &rows),
        Format::Table => {
            let mut out = String::new();
            for s in &schedules {
                if let Some(plan) = &s.stage_plan {
                    out.push_str(&format!("# {} stage plan, N={}\n", s.strategy, plan.n));
                    out.push_str(&render_stage_plan(plan));
                    out.push('\n');
                }
            }
            out.push_str(&table(&headers, &rows));
            out
        }
    };
    Ok(Outcome {
        body,
        passed: true,
        summary,
    })
}
