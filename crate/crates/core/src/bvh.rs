//! Bounding volume hierarchy over one triangle mesh, with rebuild and refit paths.
//!
//! Nodes are stored so that both children of a node follow it in the array
//! (children are allocated as a pair at `first` and `first + 1`). Refit can
//! therefore walk the node array backwards and always see children before parents.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::geometry::{intersect_triangle, triangle_is_degenerate, triangle_normal};
use crate::math::{Aabb, Ray, Vec3};
use crate::scene::{topology_fingerprint, Mesh};

const BINS: usize = 16;
const MAX_LEAF: usize = 4;
const FORCED_LEAF: usize = 64;
/// Keeps traversal within its fixed 64-entry stack.
const MAX_DEPTH: usize = 48;

static GENERATION: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BvhError {
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("mesh has no triangles with non-zero area")]
    AllDegenerate,
    #[error("topology mismatch: tree built for {expected} triangles, mesh has {found}")]
    TopologyMismatch { expected: usize, found: usize },
    #[error("topology mismatch: triangle indices differ from the ones the tree was built for")]
    IndicesChanged,
    #[error("a triangle skipped as degenerate at build time now has area; rebuild required")]
    DegeneracyChanged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvhNode {
    pub bounds: Aabb,
    /// Leaf: first index into the primitive permutation. Interior: index of the left child.
    first: u32,
    /// Primitive count for leaves, 0 for interior nodes.
    count: u32,
}

impl BvhNode {
    pub fn is_leaf(&self) -> bool {
        self.count > 0
    }

    pub fn children(&self) -> Option<(usize, usize)> {
        (!self.is_leaf()).then(|| (self.first as usize, self.first as usize + 1))
    }

    pub fn prim_range(&self) -> Option<std::ops::Range<usize>> {
        self.is_leaf().then(|| self.first as usize..(self.first + self.count) as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshHit {
    pub t: f32,
    pub prim: u32,
    /// Barycentric weights of the triangle's second and third vertex.
    pub u: f32,
    pub v: f32,
    /// Geometric normal, unit length, following the triangle's winding.
    pub normal: Vec3,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    prims: Vec<u32>,
    degenerate: Vec<u32>,
    triangle_count: usize,
    topology: u64,
    generation: u64,
}

struct BuildPrim {
    bounds: Aabb,
    centroid: Vec3,
}

impl Bvh {
    /// Binned-SAH build. Zero-area triangles are left out of the tree and counted.
    pub fn build(mesh: &Mesh) -> Result<Bvh, BvhError> {
        if mesh.indices.is_empty() {
            return Err(BvhError::EmptyMesh);
        }
        let mut prims = Vec::with_capacity(mesh.indices.len());
        let mut degenerate = Vec::new();
        for i in 0..mesh.indices.len() {
            if triangle_is_degenerate(&mesh.triangle(i)) {
                degenerate.push(i as u32);
            } else {
                prims.push(i as u32);
            }
        }
        if prims.is_empty() {
            return Err(BvhError::AllDegenerate);
        }
        if !degenerate.is_empty() {
            log::warn!("bvh: skipped {} zero-area triangles", degenerate.len());
        }
        let info: Vec<BuildPrim> = (0..mesh.indices.len())
            .map(|i| {
                let bounds = Aabb::from_points(&mesh.triangle(i));
                BuildPrim { bounds, centroid: bounds.centroid() }
            })
            .collect();

        let mut nodes = Vec::with_capacity(2 * prims.len());
        nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
        let mut stack = vec![(0usize, 0usize, prims.len(), 0usize)];
        while let Some((node, start, end, depth)) = stack.pop() {
            let slice = &mut prims[start..end];
            let bounds = slice.iter().fold(Aabb::EMPTY, |b, &p| b.union(info[p as usize].bounds));
            nodes[node].bounds = bounds;
            let split = if depth < MAX_DEPTH { split(slice, &info, &bounds) } else { None };
            match split {
                Some(mid) => {
                    let left = nodes.len();
                    nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
                    nodes.push(BvhNode { bounds: Aabb::EMPTY, first: 0, count: 0 });
                    nodes[node].first = left as u32;
                    nodes[node].count = 0;
                    // Right first so the left subtree is processed next (depth-first order).
                    stack.push((left + 1, start + mid, end, depth + 1));
                    stack.push((left, start, start + mid, depth + 1));
                }
                None => {
                    nodes[node].first = start as u32;
                    nodes[node].count = (end - start) as u32;
                }
            }
        }
        Ok(Bvh {
            nodes,
            prims,
            degenerate,
            triangle_count: mesh.indices.len(),
            topology: topology_fingerprint(&mesh.indices),
            generation: GENERATION.fetch_add(1, Ordering::Relaxed),
        })
    }

    /// Recomputes every box bottom-up for new vertex positions. Node topology, the
    /// primitive permutation and the generation are left as they are.
    pub fn refit(&mut self, mesh: &Mesh) -> Result<(), BvhError> {
        if mesh.indices.len() != self.triangle_count {
            return Err(BvhError::TopologyMismatch { expected: self.triangle_count, found: mesh.indices.len() });
        }
        if topology_fingerprint(&mesh.indices) != self.topology {
            return Err(BvhError::IndicesChanged);
        }
        if self.degenerate.iter().any(|&p| !triangle_is_degenerate(&mesh.triangle(p as usize))) {
            return Err(BvhError::DegeneracyChanged);
        }
        for i in (0..self.nodes.len()).rev() {
            let node = self.nodes[i];
            let bounds = match node.prim_range() {
                Some(range) => self.prims[range]
                    .iter()
                    .fold(Aabb::EMPTY, |b, &p| b.union(Aabb::from_points(&mesh.triangle(p as usize)))),
                None => self.nodes[node.first as usize].bounds.union(self.nodes[node.first as usize + 1].bounds),
            };
            self.nodes[i].bounds = bounds;
        }
        Ok(())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn nodes(&self) -> &[BvhNode] {
        &self.nodes
    }

    pub fn root_bounds(&self) -> Aabb {
        self.nodes[0].bounds
    }

    pub fn prim_order(&self) -> &[u32] {
        &self.prims
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.len()
    }

    /// Nearest hit in `(t_min, t_max)`. Equal distances resolve to the lower primitive id.
    pub fn intersect(&self, mesh: &Mesh, ray: &Ray, t_min: f32, t_max: f32) -> Option<MeshHit> {
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best: Option<(f32, u32, f32, f32)> = None;
        let mut limit = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 0usize;
        if self.nodes[0].bounds.hit(ray.origin, inv, t_min, limit).is_none() {
            return None;
        }
        let mut current = 0usize;
        loop {
            let node = &self.nodes[current];
            if let Some(range) = node.prim_range() {
                for &p in &self.prims[range] {
                    let tri = mesh.triangle(p as usize);
                    if let Some((t, u, v)) = intersect_triangle(ray, &tri, t_min, f32::INFINITY) {
                        let better = match best {
                            None => t < t_max,
                            Some((bt, bp, _, _)) => t < bt || (t == bt && p < bp),
                        };
                        if better {
                            best = Some((t, p, u, v));
                            limit = t;
                        }
                    }
                }
            } else {
                let (l, r) = (node.first as usize, node.first as usize + 1);
                let hl = self.nodes[l].bounds.hit(ray.origin, inv, t_min, limit);
                let hr = self.nodes[r].bounds.hit(ray.origin, inv, t_min, limit);
                match (hl, hr) {
                    (Some(a), Some(b)) => {
                        let (near, far) = if a <= b { (l, r) } else { (r, l) };
                        stack[sp] = far as u32;
                        sp += 1;
                        current = near;
                        continue;
                    }
                    (Some(_), None) => {
                        current = l;
                        continue;
                    }
                    (None, Some(_)) => {
                        current = r;
                        continue;
                    }
                    (None, None) => {}
                }
            }
            // pop, skipping subtrees that can no longer contain a closer hit
            loop {
                if sp == 0 {
                    return best.map(|(t, prim, u, v)| MeshHit {
                        t,
                        prim,
                        u,
                        v,
                        normal: triangle_normal(&mesh.triangle(prim as usize)),
                    });
                }
                sp -= 1;
                let n = stack[sp] as usize;
                if self.nodes[n].bounds.hit(ray.origin, inv, t_min, limit).is_some() {
                    current = n;
                    break;
                }
            }
        }
    }

    /// True if any triangle is hit in `(t_min, t_max)`.
    pub fn occluded(&self, mesh: &Mesh, ray: &Ray, t_min: f32, t_max: f32) -> bool {
        let inv = Vec3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut stack = [0u32; 2 * MAX_DEPTH + 2];
        let mut sp = 1usize;
        stack[0] = 0;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.bounds.hit(ray.origin, inv, t_min, t_max).is_none() {
                continue;
            }
            match node.prim_range() {
                Some(range) => {
                    for &p in &self.prims[range] {
                        if intersect_triangle(ray, &mesh.triangle(p as usize), t_min, t_max).is_some() {
                            return true;
                        }
                    }
                }
                None => {
                    stack[sp] = node.first;
                    stack[sp + 1] = node.first + 1;
                    sp += 2;
                }
            }
        }
        false
    }

    /// Structural check: containment at every level, every non-degenerate
    /// primitive referenced exactly once.
    pub fn check_invariants(&self, mesh: &Mesh) -> Result<(), String> {
        let mut seen = vec![0u32; mesh.indices.len()];
        let mut stack = vec![0usize];
        let mut visited = 0usize;
        while let Some(i) = stack.pop() {
            visited += 1;
            let node = &self.nodes[i];
            match node.children() {
                Some((l, r)) => {
                    for c in [l, r] {
                        if !node.bounds.contains(&self.nodes[c].bounds) {
                            return Err(format!("node {i} does not contain child {c}"));
                        }
                        stack.push(c);
                    }
                }
                None => {
                    for &p in &self.prims[node.prim_range().unwrap()] {
                        let b = Aabb::from_points(&mesh.triangle(p as usize));
                        if !node.bounds.contains(&b) {
                            return Err(format!("leaf {i} does not contain triangle {p}"));
                        }
                        seen[p as usize] += 1;
                    }
                }
            }
        }
        if visited != self.nodes.len() {
            return Err(format!("{} of {} nodes reachable", visited, self.nodes.len()));
        }
        for (p, &count) in seen.iter().enumerate() {
            let expected = u32::from(!self.degenerate.contains(&(p as u32)));
            if count != expected {
                return Err(format!("triangle {p} referenced {count} times, expected {expected}"));
            }
        }
        Ok(())
    }
}

/// Partitions `prims` and returns the split point, or `None` to make a leaf.
fn split(prims: &mut [u32], info: &[BuildPrim], bounds: &Aabb) -> Option<usize> {
    let n = prims.len();
    if n <= 1 {
        return None;
    }
    let cbounds = prims.iter().fold(Aabb::EMPTY, |b, &p| b.grow(info[p as usize].centroid));
    let extent = cbounds.max - cbounds.min;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    if !(extent[axis] > 0.0) {
        // All centroids coincide: fall back to a median split only when the leaf would be huge.
        return (n > FORCED_LEAF).then_some(n / 2);
    }
    let lo = cbounds.min[axis];
    let scale = BINS as f32 / extent[axis];
    let bin_of = |p: u32| (((info[p as usize].centroid[axis] - lo) * scale) as usize).min(BINS - 1);

    let mut counts = [0usize; BINS];
    let mut boxes = [Aabb::EMPTY; BINS];
    for &p in prims.iter() {
        let b = bin_of(p);
        counts[b] += 1;
        boxes[b] = boxes[b].union(info[p as usize].bounds);
    }
    // Sweep from the right to get the right-side area/count for each split plane.
    let mut right_area = [0.0f32; BINS];
    let mut right_count = [0usize; BINS];
    let mut acc = Aabb::EMPTY;
    let mut cnt = 0;
    for i in (1..BINS).rev() {
        acc = acc.union(boxes[i]);
        cnt += counts[i];
        right_area[i] = acc.surface_area();
        right_count[i] = cnt;
    }
    let mut best = (f32::INFINITY, 0usize);
    let mut acc = Aabb::EMPTY;
    let mut cnt = 0;
    for i in 0..BINS - 1 {
        acc = acc.union(boxes[i]);
        cnt += counts[i];
        if cnt == 0 || right_count[i + 1] == 0 {
            continue;
        }
        let cost = acc.surface_area() * cnt as f32 + right_area[i + 1] * right_count[i + 1] as f32;
        if cost < best.0 {
            best = (cost, i + 1);
        }
    }
    let parent_area = bounds.surface_area();
    let split_cost = 1.0 + if parent_area > 0.0 { best.0 / parent_area } else { 0.0 };
    if best.0.is_infinite() || (n <= MAX_LEAF && n as f32 <= split_cost) {
        return (n > FORCED_LEAF).then_some(n / 2);
    }
    // In-place partition by bin.
    let mut i = 0;
    let mut j = n;
    while i < j {
        if bin_of(prims[i]) < best.1 {
            i += 1;
        } else {
            j -= 1;
            prims.swap(i, j);
        }
    }
    Some(i)
}
