use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Copy, Clone, PartialEq)]
struct State {
    dist: f64,
    vertex: usize,
}

impl Eq for State {}

impl Ord for State {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for State {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn adjacency(mesh: &TriangleMesh) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); mesh.n_vertices()];
    let v = mesh.vertices();
    for (i, j) in mesh.edges() {
        let len = (v[i] - v[j]).norm();
        adj[i].push((j, len));
        adj[j].push((i, len));
    }
    adj
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize) -> Result<Vec<f64>> {
    let n = adj.len();
    if source >= n {
        return Err(Error::InvalidArgument(format!(
            "source vertex {source} out of range for {n} vertices"
        )));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(State {
        dist: 0.0,
        vertex: source,
    });
    while let Some(State { dist: d, vertex: u }) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(w, len) in &adj[u] {
            let nd = d + len;
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(State { dist: nd, vertex: w });
            }
        }
    }
    if let Some(vertex) = dist.iter().position(|d| d.is_infinite()) {
        return Err(Error::DisconnectedMesh {
            source_vertex: source,
            vertex,
        });
    }
    Ok(dist)
}

/// Shortest edge-path distances from `source` with Euclidean edge weights.
pub fn geodesic_distances(mesh: &TriangleMesh, source: usize) -> Result<Vec<f64>> {
    dijkstra(&adjacency(mesh), source)
}

/// All-pairs graph geodesic distances, stored densely (row = source).
#[derive(Debug, Clone)]
pub struct GeodesicTable {
    n: usize,
    dist: Vec<f64>,
}

impl GeodesicTable {
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        let adj = adjacency(mesh);
        let n = adj.len();
        let mut dist = Vec::with_capacity(n * n);
        for s in 0..n {
            dist.extend(dijkstra(&adj, s)?);
        }
        Ok(GeodesicTable { n, dist })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.dist[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.dist[a * self.n..(a + 1) * self.n]
    }
}
