//! Closest-point and ray queries over a triangle bounding-volume hierarchy.

use nalgebra::{Point3, Vector3};

use super::Mesh;

/// Closest point on triangle `abc` to `p` and its barycentric coordinates.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> (Point3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + ab * v, [1.0 - v, v, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + ac * w, [1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * w, [0.0, 1.0 - w, w]);
    }
    let denom = va + vb + vc;
    if denom == 0.0 || !denom.is_finite() {
        // Degenerate triangle: fall back to the nearest vertex.
        let best = [a, b, c]
            .iter()
            .enumerate()
            .min_by(|x, y| (p - *x.1).norm_squared().total_cmp(&(p - *y.1).norm_squared()))
            .unwrap()
            .0;
        let mut bary = [0.0; 3];
        bary[best] = 1.0;
        return ([*a, *b, *c][best], bary);
    }
    let v = vb / denom;
    let w = vc / denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub face: usize,
    pub bary: [f64; 3],
    pub point: Point3<f64>,
    pub distance_squared: f64,
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Point3::from(Vector3::repeat(f64::INFINITY)),
            hi: Point3::from(Vector3::repeat(f64::NEG_INFINITY)),
        }
    }

    fn grow(&mut self, p: &Point3<f64>) {
        self.lo = self.lo.inf(p);
        self.hi = self.hi.sup(p);
    }

    fn distance_squared(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for a in 0..3 {
            let x = (self.lo[a] - p[a]).max(p[a] - self.hi[a]).max(0.0);
            d += x * x;
        }
        d
    }

    /// Entry parameter of the ray into the box, if it enters before `tmax`.
    fn ray_entry(&self, o: &Point3<f64>, inv: &Vector3<f64>, tmax: f64) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, tmax);
        for a in 0..3 {
            let mut ta = (self.lo[a] - o[a]) * inv[a];
            let mut tb = (self.hi[a] - o[a]) * inv[a];
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the ray lies in the slab plane.
            if ta.is_nan() || tb.is_nan() {
                continue;
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Median-split bounding-volume hierarchy over the faces of a mesh.
#[derive(Debug, Clone)]
pub struct TriangleBvh {
    triangles: Vec<[Point3<f64>; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl TriangleBvh {
    pub fn new(mesh: &Mesh) -> Self {
        let triangles: Vec<[Point3<f64>; 3]> = mesh
            .faces()
            .iter()
            .map(|f| f.map(|v| mesh.vertices()[v]))
            .collect();
        let centroids: Vec<Point3<f64>> = triangles
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut bvh = TriangleBvh {
            order: (0..triangles.len()).collect(),
            triangles,
            nodes: Vec::new(),
        };
        if !bvh.order.is_empty() {
            bvh.build(0, bvh.order.len(), &centroids);
        }
        bvh
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Point3<f64>]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbox = Aabb::empty();
        for &f in &self.order[start..end] {
            for p in &self.triangles[f] {
                bounds.grow(p);
            }
            cbox.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let extent = cbox.hi - cbox.lo;
        let axis = extent.imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        self.nodes.push(Node::Leaf { bounds, start, end });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Closest surface point; ties go to the lower face index.
    pub fn closest_point(&self, p: &Point3<f64>) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<SurfaceHit> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            let bound = best.map_or(f64::INFINITY, |h| h.distance_squared);
            if node.bounds().distance_squared(p) > bound {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let [a, b, c] = &self.triangles[f];
                        let (q, bary) = closest_point_on_triangle(p, a, b, c);
                        let d = (p - q).norm_squared();
                        let better = match best {
                            None => true,
                            Some(h) => d < h.distance_squared || (d == h.distance_squared && f < h.face),
                        };
                        if better {
                            best = Some(SurfaceHit {
                                face: f,
                                bary,
                                point: q,
                                distance_squared: d,
                            });
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_squared(p);
                    let dr = self.nodes[right].bounds().distance_squared(p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }

    /// First face hit by the ray `origin + t dir` with `eps < t < tmax`.
    pub fn ray_hit(&self, origin: &Point3<f64>, dir: &Vector3<f64>, eps: f64, tmax: f64) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|x| 1.0 / x);
        let mut best: Option<(usize, f64)> = None;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let limit = best.map_or(tmax, |b| b.1);
            let node = &self.nodes[n];
            if node.bounds().ray_entry(origin, &inv, limit).is_none() {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        if let Some(t) = ray_triangle(origin, dir, &self.triangles[f]) {
                            let limit = best.map_or(tmax, |b| b.1);
                            if t > eps && (t < limit || (t == limit && best.is_some_and(|b| f < b.0))) {
                                best = Some((f, t));
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(right);
                    stack.push(left);
                }
            }
        }
        best
    }
}

/// Moller-Trumbore intersection parameter, two-sided.
fn ray_triangle(o: &Point3<f64>, d: &Vector3<f64>, t: &[Point3<f64>; 3]) -> Option<f64> {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - t[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}
