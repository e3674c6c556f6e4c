//! Sequence-parallel attention strategies as rank programs on the simulator.

mod blocks;
mod hybrid;
mod input;
mod ring;
pub mod schedule;
mod torus;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use hybrid::{tas, ulysses_attention, usp};
pub use input::{gather_outputs, ShardedInput};
pub use ring::{ring_attention, RingVariant};
pub use schedule::{trace_schedule, TorusSchedule, TraceSchedule};
pub use torus::{check_torus_mesh, streamfusion_torus, TorusOptions};

use crate::error::{Error, Result};
use crate::planner::plan_mesh;
use crate::simnet::{Cluster, ExecMode, Mesh, Trace};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ring,
    Ulysses,
    Usp,
    Tas,
    Torus,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ring,
        Strategy::Ulysses,
        Strategy::Usp,
        Strategy::Tas,
        Strategy::Torus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ring => "ring",
            Strategy::Ulysses => "ulysses",
            Strategy::Usp => "usp",
            Strategy::Tas => "tas",
            Strategy::Torus => "torus",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ring" => Ok(Strategy::Ring),
            "ulysses" => Ok(Strategy::Ulysses),
            "usp" => Ok(Strategy::Usp),
            "tas" => Ok(Strategy::Tas),
            "torus" | "streamfusion" => Ok(Strategy::Torus),
            other => Err(Error::Format(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Transport of the standalone ring strategy.
    pub ring_variant: RingVariant,
    pub torus: TorusOptions,
    /// Simulator scheduling; `None` reads the environment.
    #[serde(skip)]
    pub mode: Option<ExecMode>,
}

/// The mesh each strategy runs on for an `n x m` cluster and `h` heads.
pub fn strategy_mesh(strategy: Strategy, n: usize, m: usize, h: usize) -> Result<Mesh> {
    let p = n * m;
    let need_heads = |degree: usize| {
        if h % degree != 0 {
            Err(Error::Planning(format!(
                "{strategy}: H={h} not divisible by Ulysses degree {degree}"
            )))
        } else {
            Ok(())
        }
    };
    match strategy {
        Strategy::Ring => Mesh::flat(n, m),
        Strategy::Ulysses => {
            need_heads(p)?;
            Mesh::new(n, m, 1, p, 1)
        }
        Strategy::Usp => {
            need_heads(m)?;
            Mesh::flat(n, m)
        }
        Strategy::Tas | Strategy::Torus => {
            let (p_u, p_r) = plan_mesh(n, m, h);
            if p_u % n != 0 {
                return Err(Error::Planning(format!(
                    "{strategy}: H={h} not divisible by T*U: P_u=gcd(N*M, H)={p_u} is not a multiple of N={n}"
                )));
            }
            Mesh::new(n, m, n, p_u / n, p_r)
        }
    }
}

/// Outputs and trace of one strategy execution.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub mesh: Mesh,
    pub outputs: Vec<Tensor4>,
    pub trace: Trace,
}

impl StrategyRun {
    pub fn gathered(&self) -> Result<Tensor4> {
        gather_outputs(&self.outputs)
    }
}

/// Runs `strategy` on a fresh cluster over `mesh`.
pub fn run_strategy(
    strategy: Strategy,
    mesh: Mesh,
    input: &ShardedInput,
    opts: &RunOptions,
) -> Result<StrategyRun> {
    let cluster = Cluster::with_mode(mesh, opts.mode.unwrap_or_else(ExecMode::from_env));
    let outputs = match strategy {
        Strategy::Ring => ring_attention(&cluster, input, opts.ring_variant)?,
        Strategy::Ulysses => ulysses_attention(&cluster, input)?,
        Strategy::Usp => usp(&cluster, input, mesh.gpus_per_machine)?,
        Strategy::Tas => tas(&cluster, input)?,
        Strategy::Torus => streamfusion_torus(&cluster, input, opts.torus)?,
    };
    Ok(StrategyRun {
        strategy,
        mesh,
        outputs,
        trace: cluster.trace(),
    })
}

pub(crate) fn check_world(mesh: &Mesh, input: &ShardedInput) -> Result<()> {
    if input.parts() != mesh.world_size() {
        return Err(Error::Dimension(format!(
            "input has {} shards but the mesh has {} ranks",
            input.parts(),
            mesh.world_size()
        )));
    }
    Ok(())
}

/// Allocates symmetric `q`, `k`, `v` buffers and loads each rank's shard.
pub(crate) fn load_qkv(cluster: &Cluster, input: &ShardedInput) -> Result<()> {
    let len = input.shard_shape().numel();
    for name in ["q", "k", "v"] {
        cluster.alloc_symmetric(name, len)?;
    }
    for rank in 0..input.parts() {
        cluster.load(rank, "q", 0, input.q(rank).data())?;
        cluster.load(rank, "k", 0, input.k(rank).data())?;
        cluster.load(rank, "v", 0, input.v(rank).data())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn check(strategy: Strategy, n: usize, m: usize, h: usize) -> StrategyRun {
        let mesh = strategy_mesh(strategy, n, m, h).unwrap();
        let p = n * m;
        let input = ShardedInput::random(Shape4::new(1, 4 * p, h, 4).unwrap(), p, 3).unwrap();
        let opts = RunOptions {
            mode: Some(ExecMode::RoundRobin),
            ..RunOptions::default()
        };
        let run = run_strategy(strategy, mesh, &input, &opts).unwrap();
        let err = run.gathered().unwrap().max_rel_error(&input.oracle().unwrap()).unwrap();
        assert!(err < 1e-10, "{strategy} {n}x{m} h={h}: {err}");
        run
    }

    #[test]
    fn every_strategy_matches_oracle_on_small_meshes() {
        for s in Strategy::ALL {
            for (n, m) in [(1, 2), (2, 2), (3, 2)] {
                check(s, n, m, 12);
            }
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("mesh".parse::<Strategy>().is_err());
    }

    #[test]
    fn torus_rejects_machine_count_not_dividing_heads() {
        let e = strategy_mesh(Strategy::Torus, 3, 2, 7).unwrap_err();
        assert!(e.to_string().contains("H=7 not divisible by T*U"), "{e}");
    }

    #[test]
    fn ring_variants_agree() {
        let input = ShardedInput::random(Shape4::new(1, 12, 2, 4).unwrap(), 3, 1).unwrap();
        let mesh = Mesh::flat(3, 1).unwrap();
        let mut outs = Vec::new();
        for ring_variant in [RingVariant::Pull, RingVariant::SendRecv] {
            let opts = RunOptions {
                ring_variant,
                mode: Some(ExecMode::RoundRobin),
                ..RunOptions::default()
            };
            outs.push(run_strategy(Strategy::Ring, mesh, &input, &opts).unwrap().gathered().unwrap());
        }
        assert!(outs[0].max_rel_error(&outs[1]).unwrap() < 1e-12);
    }
}
