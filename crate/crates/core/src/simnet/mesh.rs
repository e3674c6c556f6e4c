use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Position of a rank in the torus / Ulysses / ring process groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Coord {
    pub t: usize,
    pub u: usize,
    pub r: usize,
}

/// `N` machines of `M` GPUs factored into torus (`T`), intra-machine Ulysses
/// (`U`) and ring (`R`) degrees.
///
/// Global rank `g = machine * M + local_gpu`; coordinates are
/// `g = (t * U + u) * R + r`, so with `T = N` the torus index is the machine
/// and the ring group `(t, u, :)` is contiguous inside one machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mesh {
    pub n_machines: usize,
    pub gpus_per_machine: usize,
    pub torus: usize,
    pub ulysses: usize,
    pub ring: usize,
}

impl Mesh {
    pub fn new(n: usize, m: usize, t: usize, u: usize, r: usize) -> Result<Self> {
        if n == 0 || m == 0 || t == 0 || u == 0 || r == 0 {
            return Err(Error::Planning(format!(
                "mesh degrees must be >= 1 (N={n}, M={m}, T={t}, U={u}, R={r})"
            )));
        }
        if t * u * r != n * m {
            return Err(Error::Planning(format!(
                "T*U*R = {t}*{u}*{r} = {} does not equal N*M = {n}*{m} = {}",
                t * u * r,
                n * m
            )));
        }
        if t == n && u * r != m {
            return Err(Error::Planning(format!(
                "with T = N, U*R = {} must equal M = {m}",
                u * r
            )));
        }
        Ok(Self {
            n_machines: n,
            gpus_per_machine: m,
            torus: t,
            ulysses: u,
            ring: r,
        })
    }

    /// A mesh with no torus/Ulysses split: every rank in one ring.
    pub fn flat(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, 1, 1, n * m)
    }

    pub fn world_size(&self) -> usize {
        self.n_machines * self.gpus_per_machine
    }

    /// Ulysses degree spanning machines, `T * U`.
    pub fn ulysses_degree(&self) -> usize {
        self.torus * self.ulysses
    }

    pub fn coord(&self, rank: usize) -> Coord {
        let r = rank % self.ring;
        let tu = rank / self.ring;
        Coord {
            t: tu / self.ulysses,
            u: tu % self.ulysses,
            r,
        }
    }

    pub fn rank_of(&self, c: Coord) -> usize {
        (c.t * self.ulysses + c.u) * self.ring + c.r
    }

    pub fn machine_of(&self, rank: usize) -> usize {
        rank / self.gpus_per_machine
    }

    pub fn local_gpu(&self, rank: usize) -> usize {
        rank % self.gpus_per_machine
    }

    pub fn same_machine(&self, a: usize, b: usize) -> bool {
        self.machine_of(a) == self.machine_of(b)
    }

    /// Ranks `(t, u, :)`.
    pub fn ring_group(&self, rank: usize) -> Vec<usize> {
        let c = self.coord(rank);
        (0..self.ring)
            .map(|r| self.rank_of(Coord { r, ..c }))
            .collect()
    }

    /// Ranks `(t, :, r)`: the intra-machine Ulysses group.
    pub fn ulysses_group(&self, rank: usize) -> Vec<usize> {
        let c = self.coord(rank);
        (0..self.ulysses)
            .map(|u| self.rank_of(Coord { u, ..c }))
            .collect()
    }

    /// Ranks `(:, :, r)`: the full Ulysses group spanning the torus.
    pub fn torus_ulysses_group(&self, rank: usize) -> Vec<usize> {
        let c = self.coord(rank);
        let mut out = Vec::with_capacity(self.torus * self.ulysses);
        for t in 0..self.torus {
            for u in 0..self.ulysses {
                out.push(self.rank_of(Coord { t, u, r: c.r }));
            }
        }
        out
    }

    pub fn all_ranks(&self) -> Vec<usize> {
        (0..self.world_size()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_machine_pair() {
        let m = Mesh::new(1, 2, 1, 2, 1).unwrap();
        assert_eq!(m.world_size(), 2);
        assert_eq!(m.machine_of(0), 0);
        assert_eq!(m.machine_of(1), 0);
    }

    #[test]
    fn coordinates_are_a_bijection() {
        for mesh in [
            Mesh::new(2, 2, 2, 1, 2).unwrap(),
            Mesh::new(3, 4, 3, 2, 2).unwrap(),
            Mesh::new(2, 4, 1, 2, 4).unwrap(),
        ] {
            let mut seen = HashSet::new();
            for g in 0..mesh.world_size() {
                let c = mesh.coord(g);
                assert!(c.t < mesh.torus && c.u < mesh.ulysses && c.r < mesh.ring);
                assert_eq!(mesh.rank_of(c), g);
                assert!(seen.insert(c));
            }
        }
    }

    #[test]
    fn u24r1_configuration() {
        let m = Mesh::new(3, 8, 3, 8, 1).unwrap();
        assert_eq!(m.world_size(), 24);
        assert_eq!(m.ulysses_degree(), 24);
        for g in 0..24 {
            assert_eq!(m.coord(g).t, m.machine_of(g));
        }
    }

    #[test]
    fn torus_index_is_machine_and_ring_is_local() {
        let m = Mesh::new(2, 4, 2, 2, 2).unwrap();
        assert_eq!(m.coord(5), Coord { t: 1, u: 0, r: 1 });
        assert_eq!(m.ring_group(5), vec![4, 5]);
        assert_eq!(m.ulysses_group(5), vec![5, 7]);
        assert_eq!(m.torus_ulysses_group(5), vec![1, 3, 5, 7]);
        for g in m.ring_group(6) {
            assert!(m.same_machine(g, 6));
        }
    }

    #[test]
    fn inconsistent_meshes_rejected() {
        assert!(Mesh::new(2, 2, 2, 2, 2).is_err());
        assert!(Mesh::new(2, 2, 0, 2, 2).is_err());
        assert!(Mesh::new(2, 4, 1, 8, 1).is_ok());
    }
}
