use seqpar::simnet::{Cluster, ExecMode, Mesh, OpKind, TensorKind};
use seqpar::strategies::schedule::{ChunkId, Move, StageKind};
use seqpar::strategies::{streamfusion_torus, trace_schedule, ShardedInput, TorusOptions, TorusSchedule};
use seqpar::Shape4;

fn chunk(c: &ChunkId) -> String {
    let t = match c.tensor {
        TensorKind::Q => "Q",
        TensorKind::K => "K",
        TensorKind::V => "V",
        TensorKind::O => "O",
    };
    format!("{t}({},{})", c.seq, c.head)
}

fn list(xs: &[usize]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(","))
}

fn moves(ms: &[Move], outgoing: bool) -> String {
    let parts: Vec<String> = ms
        .iter()
        .map(|m| {
            if outgoing {
                format!("{}->{}", chunk(&m.chunk), m.to)
            } else {
                format!("{}<-{}", chunk(&m.chunk), m.from)
            }
        })
        .collect();
    format!("[{}]", parts.join(" "))
}

fn render(s: &TorusSchedule) -> String {
    let mut out = String::new();
    for r in &s.ranks {
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

#[test]
fn three_machine_schedule_matches_golden() {
    let golden = include_str!("golden/torus_n3.txt");
    assert_eq!(render(&TorusSchedule::new(3)), golden);
}

#[test]
fn rank_one_first_stage_example() {
    let s = TorusSchedule::new(3);
    let st = &s.ranks[1].stages[0];
    assert_eq!((st.q_seq.as_slice(), st.kv_seq.as_slice()), (&[1][..], &[1][..]));
    assert_eq!(st.sends.len(), 1);
    assert_eq!(st.sends[0].chunk, ChunkId { tensor: TensorKind::Q, seq: 1, head: 2 });
    assert_eq!(st.sends[0].to, 2);
}

#[test]
fn single_machine_schedule_is_one_local_stage() {
    let s = TorusSchedule::new(1);
    assert_eq!(render(&s), "t=0 pull_q:1 q=[0] kv=[0] send=[] recv=[]\n");
}

#[test]
fn schedule_json_is_deterministic() {
    let a = serde_json::to_string_pretty(&TorusSchedule::new(4)).unwrap();
    let b = serde_json::to_string_pretty(&TorusSchedule::new(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn traced_torus_follows_the_stage_plan() {
    let n = 3;
    let mesh = Mesh::new(n, 2, n, 1, 2).unwrap();
    let p = mesh.world_size();
    let input = ShardedInput::random(Shape4::new(1, 4 * p, 6, 2).unwrap(), p, 8).unwrap();
    let cluster = Cluster::with_mode(mesh, ExecMode::RoundRobin);
    streamfusion_torus(&cluster, &input, TorusOptions::default()).unwrap();
    let trace = cluster.trace();
    let plan = TorusSchedule::new(n);
    let steps = trace_schedule(&trace);
    for rank in 0..p {
        let t = mesh.coord(rank).t;
        let mut stage_steps = steps[rank].steps.iter().filter(|s| s.label != "finish");
        for st in &plan.ranks[t].stages {
            let label = match st.kind {
                StageKind::PullQ => format!("pull_q:{}", st.k),
                StageKind::PullKv => format!("pull_kv:{}", st.k),
                StageKind::PushO => "push_o".to_string(),
            };
            // One compute per ring step; R = 2.
            for _ in 0..mesh.ring {
                let step = stage_steps.next().expect("missing stage");
                assert_eq!(step.label, label);
                let mut q_machines: Vec<usize> = step.pairs.iter().map(|p| mesh.machine_of(p.0)).collect();
                q_machines.sort_unstable();
                q_machines.dedup();
                let mut want = st.q_seq.clone();
                want.sort_unstable();
                assert_eq!(q_machines, want, "rank {rank} {label}");
            }
        }
        assert!(stage_steps.next().is_none());
    }
    // Group barriers appear only ahead of pull-KV compute, one per stage.
    for s in &steps {
        let count = |kv: bool| -> usize {
            s.steps
                .iter()
                .filter(|st| st.label.starts_with("pull_kv") == kv)
                .map(|st| st.barriers.iter().filter(|g| g.len() < p).count())
                .sum()
        };
        assert_eq!((count(true), count(false)), (n - 1, 0), "rank {}", s.rank);
    }
    assert!(trace.events.iter().any(|e| e.kind == OpKind::Pull));
}
