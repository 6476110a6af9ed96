//! Bounding volume hierarchy over the eye mesh triangles.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vector3::repeat(f64::INFINITY),
            max: Vector3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vector3<f64>) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    /// Slab test; returns the entry distance when the ray overlaps the box
    /// within `[0, t_max]`.
    #[inline]
    fn hit(&self, origin: &Vector3<f64>, inv_dir: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Clone, Copy, Debug)]
struct Node {
    bounds: Aabb,
    /// Leaf: first entry in `order`; interior: index of the left child
    /// (the right child follows the whole left subtree, stored in `right`).
    start: usize,
    count: usize,
    right: usize,
}

/// Nearest triangle hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleHit {
    pub face: usize,
    pub t: f64,
    /// Barycentric weights of vertices 1 and 2.
    pub b1: f64,
    pub b2: f64,
}

#[derive(Clone, Debug)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
    triangles: Vec<[Vector3<f64>; 3]>,
}

impl Bvh {
    pub fn build(triangles: Vec<[Vector3<f64>; 3]>) -> Self {
        let centroids: Vec<Vector3<f64>> = triangles
            .iter()
            .map(|t| (t[0] + t[1] + t[2]) / 3.0)
            .collect();
        let bounds: Vec<Aabb> = triangles
            .iter()
            .map(|t| {
                let mut b = Aabb::empty();
                t.iter().for_each(|p| b.grow(p));
                b
            })
            .collect();
        let mut order: Vec<usize> = (0..triangles.len()).collect();
        let mut nodes = Vec::with_capacity(2 * triangles.len() / LEAF_SIZE + 1);
        if !triangles.is_empty() {
            build_node(&mut nodes, &mut order, 0, triangles.len(), &centroids, &bounds);
        }
        Self {
            nodes,
            order,
            triangles,
        }
    }

    pub fn triangle(&self, face: usize) -> &[Vector3<f64>; 3] {
        &self.triangles[face]
    }

    /// Nearest intersection with `t > 1e-9`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<TriangleHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<TriangleHit> = None;
        let mut t_max = f64::INFINITY;
        let mut stack = Vec::with_capacity(64);
        stack.push(0usize);
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if node.bounds.hit(origin, &inv, t_max).is_none() {
                continue;
            }
            if node.count > 0 {
                for &f in &self.order[node.start..node.start + node.count] {
                    if let Some((t, b1, b2)) = intersect_triangle(origin, dir, &self.triangles[f]) {
                        if t < t_max {
                            t_max = t;
                            best = Some(TriangleHit { face: f, t, b1, b2 });
                        }
                    }
                }
            } else {
                let (l, r) = (n + 1, node.right);
                let dl = self.nodes[l].bounds.hit(origin, &inv, t_max);
                let dr = self.nodes[r].bounds.hit(origin, &inv, t_max);
                match (dl, dr) {
                    (Some(a), Some(b)) => {
                        // visit the nearer child first
                        if a <= b {
                            stack.push(r);
                            stack.push(l);
                        } else {
                            stack.push(l);
                            stack.push(r);
                        }
                    }
                    (Some(_), None) => stack.push(l),
                    (None, Some(_)) => stack.push(r),
                    (None, None) => {}
                }
            }
        }
        best
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [usize],
    start: usize,
    end: usize,
    centroids: &[Vector3<f64>],
    bounds: &[Aabb],
) -> usize {
    let mut b = Aabb::empty();
    let mut cb = Aabb::empty();
    for &f in &order[start..end] {
        b.merge(&bounds[f]);
        cb.grow(&centroids[f]);
    }
    let idx = nodes.len();
    nodes.push(Node {
        bounds: b,
        start,
        count: end - start,
        right: 0,
    });
    if end - start <= LEAF_SIZE {
        return idx;
    }
    let extent = cb.max - cb.min;
    let axis = extent.imax();
    let mid = (start + end) / 2;
    order[start..end].select_nth_unstable_by(mid - start, |&a, &c| {
        centroids[a][axis].total_cmp(&centroids[c][axis])
    });
    nodes[idx].count = 0;
    build_node(nodes, order, start, mid, centroids, bounds);
    let right = build_node(nodes, order, mid, end, centroids, bounds);
    nodes[idx].right = right;
    idx
}

/// Moller-Trumbore; returns `(t, b1, b2)`.
#[inline]
pub fn intersect_triangle(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    tri: &[Vector3<f64>; 3],
) -> Option<(f64, f64, f64)> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri[0];
    let b1 = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&b1) {
        return None;
    }
    let q = s.cross(&e1);
    let b2 = dir.dot(&q) * inv;
    if b2 < 0.0 || b1 + b2 > 1.0 {
        return None;
    }
    let t = e2.dot(&q) * inv;
    (t > 1e-9).then_some((t, b1, b2))
}
