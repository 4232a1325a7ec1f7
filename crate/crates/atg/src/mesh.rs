//! Conforming 2D triangulations with newest-vertex bisection.
//!
//! A [`Mesh`] is immutable after construction. Refinement via
//! [`Mesh::bisect_marked`] returns a fresh mesh together with one
//! [`RefinementRecord`] per elementary bisection, which is exactly the data
//! needed to prolongate nodal functions to the refined mesh.
//!
//! Conventions:
//! - triangles store vertices in counter-clockwise order;
//! - `peak` is the local index of the vertex opposite the refinement edge;
//! - both children of a bisection take the new midpoint as their peak vertex;
//! - the element size `H_K` is `|K|^(1/2)` (area based), so one bisection
//!   shrinks `H_K^2` by exactly the factor 1/2.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::geom::{self, Vec2};

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("subdivision count must be at least 1")]
    InvalidSubdivision,
    #[error("triangle {tri} references vertex {vertex} out of range (nv = {nv})")]
    VertexOutOfRange { tri: usize, vertex: usize, nv: usize },
    #[error("triangle {tri} is not counter-clockwise (signed area {area})")]
    NotCcw { tri: usize, area: f64 },
    #[error("triangle {tri} has peak index {peak}, must be 0, 1 or 2")]
    BadPeak { tri: usize, peak: u8 },
    #[error("edge ({a}, {b}) is shared by more than two triangles")]
    NonManifoldEdge { a: usize, b: usize },
    #[error("marked triangle id {id} out of range (nt = {nt})")]
    MarkOutOfRange { id: usize, nt: usize },
    #[error("refinement-edge tags are incompatible: closure would cycle at triangle {tri}")]
    IncompatibleTags { tri: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A mesh vertex with a derived boundary flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vertex {
    pub x: f64,
    pub y: f64,
    pub boundary: bool,
}

impl Vertex {
    pub fn pos(&self) -> Vec2 {
        [self.x, self.y]
    }
}

/// A triangle: CCW vertex indices, the peak opposite its refinement edge,
/// the id of the previous-level triangle it descends from, and its bisection
/// generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [usize; 3],
    pub peak: u8,
    pub parent: Option<usize>,
    pub level: u32,
}

impl Triangle {
    /// Endpoints of the refinement edge (the edge opposite `peak`), in the
    /// triangle's own CCW order.
    pub fn refinement_edge(&self) -> [usize; 2] {
        let p = self.peak as usize;
        [self.v[(p + 1) % 3], self.v[(p + 2) % 3]]
    }

    /// The peak vertex id.
    pub fn peak_vertex(&self) -> usize {
        self.v[self.peak as usize]
    }
}

/// An edge derived from the triangle connectivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Endpoint vertex ids with `v[0] < v[1]`.
    pub v: [usize; 2],
    /// Adjacent triangle ids; interior edges have two.
    pub tris: (usize, Option<usize>),
    pub boundary: bool,
}

impl Edge {
    pub fn is_interior(&self) -> bool {
        self.tris.1.is_some()
    }
}

/// One elementary bisection. `parent` and `children` are ids in the bisection
/// node space of a single `bisect_marked` call: ids below the coarse triangle
/// count are coarse triangles, later ids are created in call order. Nodes that
/// are split again inside the same call (conformity closure) appear both as a
/// child and as a later parent; undivided nodes become the triangles of the
/// refined mesh in ascending node order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementRecord {
    pub parent: usize,
    /// Vertex triple of the parent at the time of the split.
    pub parent_vertices: [usize; 3],
    pub children: [usize; 2],
    /// The midpoint vertex added by this bisection (fine-mesh vertex id).
    pub new_vertex: usize,
    /// The endpoints of the bisected edge; `new_vertex` is their midpoint.
    pub source_endpoints: [usize; 2],
}

/// Result of a `bisect_marked` call: the refined mesh, the bisection records
/// in creation order, and the node-id bookkeeping relating the two.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub mesh: Mesh,
    pub records: Vec<RefinementRecord>,
    coarse_triangle_count: usize,
    node_fine: Vec<Option<usize>>,
}

impl Refinement {
    /// Fine-mesh triangle id of a bisection node, if the node was not split
    /// further.
    pub fn fine_id_of_node(&self, node: usize) -> Option<usize> {
        self.node_fine.get(node).copied().flatten()
    }

    /// Ids of coarse triangles that were bisected (directly or by closure).
    pub fn refined_coarse_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .records
            .iter()
            .map(|r| r.parent)
            .filter(|&p| p < self.coarse_triangle_count)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// For each coarse triangle, the fine triangles descending from it
    /// (a surviving triangle maps to itself).
    pub fn descendants(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.coarse_triangle_count];
        for (fine_id, tri) in self.mesh.triangles().iter().enumerate() {
            let anc = tri.parent.expect("refined mesh triangles carry ancestors");
            out[anc].push(fine_id);
        }
        out
    }
}

/// Diagnostic output of [`Mesh::conformity_check`].
#[derive(Debug, Clone, Default)]
pub struct ConformityReport {
    /// `(edge id, vertex id)` pairs where a vertex sits at an edge midpoint.
    pub hanging: Vec<(usize, usize)>,
    /// Triangles with non-positive signed area.
    pub bad_orientation: Vec<usize>,
    /// Relative mismatch between the triangle area sum and the domain area.
    pub area_error: f64,
    /// Vertices whose stored boundary flag disagrees with the edge structure.
    pub flag_mismatches: Vec<usize>,
}

impl ConformityReport {
    pub fn is_conforming(&self) -> bool {
        self.hanging.is_empty()
            && self.bad_orientation.is_empty()
            && self.flag_mismatches.is_empty()
            && self.area_error <= 1e-12
    }
}

/// An immutable conforming triangulation.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Vertex>,
    triangles: Vec<Triangle>,
    edges: Vec<Edge>,
    /// `tri_edges[t][i]` is the edge opposite local vertex `i` of triangle `t`.
    tri_edges: Vec<[usize; 3]>,
    areas: Vec<f64>,
    /// Barycentric gradients per triangle: `grad_bary[t][i]` is the constant
    /// gradient of the hat function of local vertex `i`.
    grad_bary: Vec<[Vec2; 3]>,
    level_id: u32,
    domain_area: f64,
}

impl Mesh {
    /// Uniform mesh of `[-1,1]^2`: `n x n` squares, each split along its
    /// bottom-left-to-top-right diagonal; refinement edges are the diagonals
    /// (the hypotenuses).
    pub fn initial_uniform(n: usize) -> Result<Mesh, MeshError> {
        if n == 0 {
            return Err(MeshError::InvalidSubdivision);
        }
        let mut coords = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                let x = -1.0 + 2.0 * i as f64 / n as f64;
                let y = -1.0 + 2.0 * j as f64 / n as f64;
                coords.push([x, y]);
            }
        }
        let idx = |i: usize, j: usize| j * (n + 1) + i;
        let mut tris = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let ll = idx(i, j);
                let lr = idx(i + 1, j);
                let ur = idx(i + 1, j + 1);
                let ul = idx(i, j + 1);
                // Diagonal ll -> ur; the peak sits opposite it in both halves.
                tris.push(Triangle { v: [ll, lr, ur], peak: 1, parent: None, level: 0 });
                tris.push(Triangle { v: [ll, ur, ul], peak: 2, parent: None, level: 0 });
            }
        }
        Mesh::assemble(coords, tris, 0, Some(4.0))
    }

    /// Build a mesh from raw vertex coordinates and `(vertices, peak)`
    /// triangles. Connectivity, boundary flags and geometry caches are
    /// derived; orientation and index validity are enforced, conformity is
    /// not (use [`Mesh::conformity_check`]).
    pub fn from_parts(
        coords: Vec<[f64; 2]>,
        triangles: Vec<([usize; 3], u8)>,
    ) -> Result<Mesh, MeshError> {
        let tris = triangles
            .into_iter()
            .map(|(v, peak)| Triangle { v, peak, parent: None, level: 0 })
            .collect();
        Mesh::assemble(coords, tris, 0, None)
    }

    fn assemble(
        coords: Vec<[f64; 2]>,
        triangles: Vec<Triangle>,
        level_id: u32,
        domain_area: Option<f64>,
    ) -> Result<Mesh, MeshError> {
        let nv = coords.len();
        let mut areas = Vec::with_capacity(triangles.len());
        let mut grad_bary = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            for &v in &tri.v {
                if v >= nv {
                    return Err(MeshError::VertexOutOfRange { tri: t, vertex: v, nv });
                }
            }
            if tri.peak > 2 {
                return Err(MeshError::BadPeak { tri: t, peak: tri.peak });
            }
            let [a, b, c] = [coords[tri.v[0]], coords[tri.v[1]], coords[tri.v[2]]];
            let double_area = geom::signed_area_x2(a, b, c);
            if double_area <= 0.0 {
                return Err(MeshError::NotCcw { tri: t, area: 0.5 * double_area });
            }
            areas.push(0.5 * double_area);
            let p = [a, b, c];
            let mut grads = [[0.0; 2]; 3];
            for i in 0..3 {
                let opp = geom::sub2(p[(i + 1) % 3], p[(i + 2) % 3]);
                grads[i] = geom::scale2(geom::perp(opp), 1.0 / double_area);
            }
            grad_bary.push(grads);
        }

        // Edge table in first-encounter order; local edge i is opposite
        // local vertex i.
        let mut edge_ids: HashMap<(usize, usize), usize> = HashMap::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut tri_edges = vec![[usize::MAX; 3]; triangles.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for i in 0..3 {
                let a = tri.v[(i + 1) % 3];
                let b = tri.v[(i + 2) % 3];
                let key = (a.min(b), a.max(b));
                match edge_ids.get(&key) {
                    None => {
                        let id = edges.len();
                        edge_ids.insert(key, id);
                        edges.push(Edge { v: [key.0, key.1], tris: (t, None), boundary: true });
                        tri_edges[t][i] = id;
                    }
                    Some(&id) => {
                        if edges[id].tris.1.is_some() {
                            return Err(MeshError::NonManifoldEdge { a: key.0, b: key.1 });
                        }
                        edges[id].tris.1 = Some(t);
                        edges[id].boundary = false;
                        tri_edges[t][i] = id;
                    }
                }
            }
        }

        let mut vertices: Vec<Vertex> = coords
            .into_iter()
            .map(|p| Vertex { x: p[0], y: p[1], boundary: false })
            .collect();
        for e in &edges {
            if e.boundary {
                vertices[e.v[0]].boundary = true;
                vertices[e.v[1]].boundary = true;
            }
        }

        let total: f64 = areas.iter().sum();
        Ok(Mesh {
            vertices,
            triangles,
            edges,
            tri_edges,
            areas,
            grad_bary,
            level_id,
            domain_area: domain_area.unwrap_or(total),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn level_id(&self) -> u32 {
        self.level_id
    }

    pub fn domain_area(&self) -> f64 {
        self.domain_area
    }

    pub fn area(&self, tri: usize) -> f64 {
        self.areas[tri]
    }

    /// `H_K = |K|^(1/2)`.
    pub fn element_size(&self, tri: usize) -> f64 {
        self.areas[tri].sqrt()
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let [a, b] = self.edges[edge].v;
        geom::norm2(geom::sub2(self.vertices[b].pos(), self.vertices[a].pos()))
    }

    /// Per-triangle `H_K` and per-edge `H_E`.
    pub fn sizes(&self) -> (Vec<f64>, Vec<f64>) {
        let hk = (0..self.n_triangles()).map(|t| self.element_size(t)).collect();
        let he = (0..self.n_edges()).map(|e| self.edge_length(e)).collect();
        (hk, he)
    }

    pub fn tri_edge_ids(&self, tri: usize) -> [usize; 3] {
        self.tri_edges[tri]
    }

    /// Constant barycentric gradients of triangle `tri`.
    pub fn grad_lambda(&self, tri: usize) -> [Vec2; 3] {
        self.grad_bary[tri]
    }

    pub fn triangle_coords(&self, tri: usize) -> [Vec2; 3] {
        let t = &self.triangles[tri];
        [
            self.vertices[t.v[0]].pos(),
            self.vertices[t.v[1]].pos(),
            self.vertices[t.v[2]].pos(),
        ]
    }

    /// Map barycentric coordinates on `tri` to a point in the plane.
    pub fn point_at(&self, tri: usize, bary: [f64; 3]) -> Vec2 {
        let [a, b, c] = self.triangle_coords(tri);
        [
            bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
            bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        ]
    }

    pub fn interior_vertex_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_vertices()).filter(move |&v| !self.vertices[v].boundary)
    }

    /// Bisect every marked triangle across its refinement edge, recursively
    /// bisecting incompatible neighbours until the mesh is conforming again.
    pub fn bisect_marked(&self, marked: &[usize]) -> Result<Refinement, MeshError> {
        let nt = self.n_triangles();
        for &id in marked {
            if id >= nt {
                return Err(MeshError::MarkOutOfRange { id, nt });
            }
        }
        let mut marked: Vec<usize> = marked.to_vec();
        marked.sort_unstable();
        marked.dedup();

        let mut work = BisectWork::new(self);
        for &id in &marked {
            work.ensure_split(id)?;
        }
        work.finish(self)
    }

    /// Audit conformity: hanging nodes (vertices at edge midpoints),
    /// orientation, area conservation, boundary-flag consistency.
    pub fn conformity_check(&self) -> ConformityReport {
        let mut report = ConformityReport::default();

        for (t, _) in self.triangles.iter().enumerate() {
            let [a, b, c] = self.triangle_coords(t);
            if geom::signed_area_x2(a, b, c) <= 0.0 {
                report.bad_orientation.push(t);
            }
        }

        // A conforming mesh has no vertex in the interior of any edge; every
        // hanging node produced by bisection sits exactly at a midpoint, and
        // midpoints of bisection meshes are bitwise reproducible.
        let mut by_coord: HashMap<(u64, u64), usize> = HashMap::new();
        for (v, vert) in self.vertices.iter().enumerate() {
            by_coord.insert((vert.x.to_bits(), vert.y.to_bits()), v);
        }
        for (e, edge) in self.edges.iter().enumerate() {
            let m = geom::midpoint(self.vertices[edge.v[0]].pos(), self.vertices[edge.v[1]].pos());
            if let Some(&v) = by_coord.get(&(m[0].to_bits(), m[1].to_bits())) {
                report.hanging.push((e, v));
            }
        }

        let total: f64 = self.areas.iter().sum();
        report.area_error = (total - self.domain_area).abs() / self.domain_area;

        for (v, vert) in self.vertices.iter().enumerate() {
            let on_boundary_edge = self
                .edges
                .iter()
                .any(|e| e.boundary && (e.v[0] == v || e.v[1] == v));
            if vert.boundary != on_boundary_edge {
                report.flag_mismatches.push(v);
            }
        }
        report
    }
}

/// Mutable state of one `bisect_marked` call.
struct BisectWork {
    coords: Vec<[f64; 2]>,
    nodes: Vec<WorkNode>,
    /// Midpoint vertex of each bisected edge, so paired splits share it.
    edge_midpoint: HashMap<(usize, usize), usize>,
    /// Alive nodes adjacent to each current edge.
    edge_tris: HashMap<(usize, usize), [Option<usize>; 2]>,
    records: Vec<RefinementRecord>,
    coarse_nt: usize,
}

struct WorkNode {
    v: [usize; 3],
    peak: u8,
    level: u32,
    ancestor: usize,
    split: bool,
}

impl WorkNode {
    fn refinement_edge(&self) -> (usize, usize) {
        let p = self.peak as usize;
        (self.v[(p + 1) % 3], self.v[(p + 2) % 3])
    }
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl BisectWork {
    fn new(mesh: &Mesh) -> Self {
        let coords: Vec<[f64; 2]> = mesh.vertices().iter().map(|v| v.pos()).collect();
        let nodes: Vec<WorkNode> = mesh
            .triangles()
            .iter()
            .enumerate()
            .map(|(t, tri)| WorkNode {
                v: tri.v,
                peak: tri.peak,
                level: tri.level,
                ancestor: t,
                split: false,
            })
            .collect();
        let mut edge_tris: HashMap<(usize, usize), [Option<usize>; 2]> = HashMap::new();
        for (t, node) in nodes.iter().enumerate() {
            for i in 0..3 {
                let key = edge_key(node.v[(i + 1) % 3], node.v[(i + 2) % 3]);
                let slot = edge_tris.entry(key).or_insert([None, None]);
                if slot[0].is_none() {
                    slot[0] = Some(t);
                } else {
                    slot[1] = Some(t);
                }
            }
        }
        BisectWork {
            coords,
            nodes,
            edge_midpoint: HashMap::new(),
            edge_tris,
            records: Vec::new(),
            coarse_nt: mesh.n_triangles(),
        }
    }

    fn neighbor_across(&self, key: (usize, usize), me: usize) -> Option<usize> {
        let slot = self.edge_tris.get(&key)?;
        match *slot {
            [Some(a), Some(b)] => Some(if a == me { b } else { a }),
            [Some(a), None] if a != me => Some(a),
            _ => None,
        }
    }

    fn detach(&mut self, node: usize) {
        let v = self.nodes[node].v;
        for i in 0..3 {
            let key = edge_key(v[(i + 1) % 3], v[(i + 2) % 3]);
            if let Some(slot) = self.edge_tris.get_mut(&key) {
                for s in slot.iter_mut() {
                    if *s == Some(node) {
                        *s = None;
                    }
                }
                if slot.iter().all(Option::is_none) {
                    self.edge_tris.remove(&key);
                }
            }
        }
    }

    fn attach(&mut self, node: usize) {
        let v = self.nodes[node].v;
        for i in 0..3 {
            let key = edge_key(v[(i + 1) % 3], v[(i + 2) % 3]);
            let slot = self.edge_tris.entry(key).or_insert([None, None]);
            if slot[0].is_none() {
                slot[0] = Some(node);
            } else {
                debug_assert!(slot[1].is_none(), "edge shared by three alive nodes");
                slot[1] = Some(node);
            }
        }
    }

    /// Split `node` across its refinement edge, reusing an existing midpoint.
    fn split(&mut self, node: usize) {
        let (a, b) = self.nodes[node].refinement_edge();
        let key = edge_key(a, b);
        let m = match self.edge_midpoint.get(&key) {
            Some(&m) => m,
            None => {
                let mid = geom::midpoint(self.coords[a], self.coords[b]);
                self.coords.push(mid);
                let id = self.coords.len() - 1;
                self.edge_midpoint.insert(key, id);
                id
            }
        };

        let parent_v = self.nodes[node].v;
        let p = self.nodes[node].peak as usize;
        let peak_vertex = parent_v[p];
        let level = self.nodes[node].level + 1;
        let ancestor = self.nodes[node].ancestor;

        self.detach(node);
        self.nodes[node].split = true;

        let c1 = self.nodes.len();
        self.nodes.push(WorkNode {
            v: [peak_vertex, a, m],
            peak: 2,
            level,
            ancestor,
            split: false,
        });
        let c2 = self.nodes.len();
        self.nodes.push(WorkNode {
            v: [peak_vertex, m, b],
            peak: 1,
            level,
            ancestor,
            split: false,
        });
        self.attach(c1);
        self.attach(c2);

        self.records.push(RefinementRecord {
            parent: node,
            parent_vertices: parent_v,
            children: [c1, c2],
            new_vertex: m,
            source_endpoints: [a, b],
        });
    }

    /// Make sure `start` gets bisected, recursing through incompatible
    /// neighbours first (iterative, with cycle detection for ill-tagged
    /// input meshes).
    fn ensure_split(&mut self, start: usize) -> Result<(), MeshError> {
        let mut stack = vec![start];
        let mut on_stack = vec![false; self.nodes.len()];
        on_stack[start] = true;

        while let Some(&t) = stack.last() {
            if self.nodes[t].split {
                stack.pop();
                on_stack[t] = false;
                continue;
            }
            let (a, b) = self.nodes[t].refinement_edge();
            let key = edge_key(a, b);
            match self.neighbor_across(key, t) {
                None => {
                    // Boundary refinement edge.
                    self.split(t);
                    stack.pop();
                    on_stack[t] = false;
                }
                Some(n) => {
                    if edge_key2(self.nodes[n].refinement_edge()) == key {
                        self.split(t);
                        self.split(n);
                        stack.pop();
                        on_stack[t] = false;
                    } else {
                        if on_stack.len() < self.nodes.len() {
                            on_stack.resize(self.nodes.len(), false);
                        }
                        if on_stack[n] {
                            return Err(MeshError::IncompatibleTags { tri: n });
                        }
                        on_stack[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(self, coarse: &Mesh) -> Result<Refinement, MeshError> {
        let mut node_fine = vec![None; self.nodes.len()];
        let mut fine_tris = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.split {
                node_fine[id] = Some(fine_tris.len());
                fine_tris.push(Triangle {
                    v: node.v,
                    peak: node.peak,
                    parent: Some(node.ancestor),
                    level: node.level,
                });
            }
        }
        let mesh = Mesh::assemble(
            self.coords,
            fine_tris,
            coarse.level_id() + 1,
            Some(coarse.domain_area()),
        )?;
        Ok(Refinement {
            mesh,
            records: self.records,
            coarse_triangle_count: self.coarse_nt,
            node_fine,
        })
    }
}

fn edge_key2(e: (usize, usize)) -> (usize, usize) {
    edge_key(e.0, e.1)
}

/// Serialize a mesh in the `atgmesh 1` text format.
pub fn write_mesh(mesh: &Mesh) -> String {
    let mut out = String::new();
    out.push_str("atgmesh 1\n");
    let _ = writeln!(out, "{} {}", mesh.n_vertices(), mesh.n_triangles());
    for v in mesh.vertices() {
        let _ = writeln!(out, "{} {} {}", v.x, v.y, u8::from(v.boundary));
    }
    for t in mesh.triangles() {
        let _ = writeln!(out, "{} {} {} {}", t.v[0], t.v[1], t.v[2], t.peak);
    }
    out
}

/// Parse the `atgmesh 1` text format. `#` starts a comment; blank lines are
/// skipped. Errors carry 1-based line numbers of the offending input line.
pub fn read_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, raw)| {
            let content = raw.split('#').next().unwrap_or("").trim();
            (i + 1, content)
        })
        .filter(|(_, content)| !content.is_empty());

    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("unexpected end of input, expected {what}") })
    };

    let (line, header) = next("header")?;
    if header != "atgmesh 1" {
        return Err(MeshError::Parse { line, msg: format!("bad header {header:?}, expected \"atgmesh 1\"") });
    }
    let (line, counts) = next("vertex/triangle counts")?;
    let mut it = counts.split_whitespace();
    let nv: usize = parse_field(it.next(), line, "vertex count")?;
    let nt: usize = parse_field(it.next(), line, "triangle count")?;

    let mut coords = Vec::with_capacity(nv);
    let mut flags = Vec::with_capacity(nv);
    let mut vertex_lines = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line, l) = next("vertex line")?;
        let mut it = l.split_whitespace();
        let x: f64 = parse_field(it.next(), line, "x coordinate")?;
        let y: f64 = parse_field(it.next(), line, "y coordinate")?;
        let b: u8 = parse_field(it.next(), line, "boundary flag")?;
        if b > 1 {
            return Err(MeshError::Parse { line, msg: format!("boundary flag must be 0 or 1, got {b}") });
        }
        coords.push([x, y]);
        flags.push(b == 1);
        vertex_lines.push(line);
    }

    let mut tris = Vec::with_capacity(nt);
    let mut tri_lines = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (line, l) = next("triangle line")?;
        let mut it = l.split_whitespace();
        let v0: usize = parse_field(it.next(), line, "vertex index")?;
        let v1: usize = parse_field(it.next(), line, "vertex index")?;
        let v2: usize = parse_field(it.next(), line, "vertex index")?;
        let peak: u8 = parse_field(it.next(), line, "peak index")?;
        tris.push(([v0, v1, v2], peak));
        tri_lines.push(line);
    }

    let mesh = Mesh::from_parts(coords, tris).map_err(|e| match e {
        MeshError::VertexOutOfRange { tri, vertex, nv } => MeshError::Parse {
            line: tri_lines[tri],
            msg: format!("vertex index {vertex} out of range (nv = {nv})"),
        },
        MeshError::NotCcw { tri, area } => MeshError::Parse {
            line: tri_lines[tri],
            msg: format!("triangle is not counter-clockwise (signed area {area})"),
        },
        MeshError::BadPeak { tri, peak } => MeshError::Parse {
            line: tri_lines[tri],
            msg: format!("peak index {peak} out of range"),
        },
        other => other,
    })?;

    for (v, vert) in mesh.vertices().iter().enumerate() {
        if vert.boundary != flags[v] {
            return Err(MeshError::Parse {
                line: vertex_lines[v],
                msg: format!(
                    "vertex {v}: boundary flag {} disagrees with edge structure",
                    u8::from(flags[v])
                ),
            });
        }
    }
    Ok(mesh)
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &str,
) -> Result<T, MeshError> {
    let s = field.ok_or_else(|| MeshError::Parse { line, msg: format!("missing {what}") })?;
    s.parse().map_err(|_| MeshError::Parse { line, msg: format!("cannot parse {what} from {s:?}") })
}
