//! Simulated cluster with one-sided communication, tracing, race detection
//! and an α–β timeline model.

pub mod cluster;
pub mod mesh;
pub mod race;
pub mod timeline;
pub mod trace;

pub use cluster::{Cluster, CommEvent, ExecMode, RankCtx, Region, Transfer, THREADS_ENV};
pub use mesh::{Coord, Mesh};
pub use race::{race_check, Hazard};
pub use timeline::{replay_timeline, Interval, LaneBusy, LatencyModel, RankTimeline, Timeline};
pub use trace::{
    ChunkRef, ComputePair, LinkClass, LinkVolume, OpKind, Stream, TensorKind, Trace, TraceEvent,
};
