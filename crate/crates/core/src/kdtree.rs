//! Static 3-D kd-tree over a point slice.
//!
//! Nearest-neighbor ties resolve to the lowest original point index.

use crate::geometry::Point3;

const LEAF: usize = 8;

#[derive(Clone, Debug)]
pub struct KdTree {
    /// Points in tree order.
    pts: Vec<[f64; 3]>,
    /// Original index of each tree-order point.
    ids: Vec<usize>,
    /// Split axis of the node whose pivot sits at this position.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        let mut ids: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build_rec(points, &mut ids, &mut axis);
        let pts = ids
            .iter()
            .map(|&i| [points[i].x, points[i].y, points[i].z])
            .collect();
        Self { pts, ids, axis }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Original point indices in tree order; consecutive runs are spatially compact.
    pub fn order(&self) -> &[usize] {
        &self.ids
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, q: &Point3) -> Option<(usize, f64)> {
        if self.ids.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_rec(0, self.ids.len(), &q, &mut best);
        Some((best.1, best.0))
    }

    /// Original indices of all points within `radius` of `q`, unordered.
    pub fn within(&self, q: &Point3, radius: f64, out: &mut Vec<usize>) {
        out.clear();
        if self.ids.is_empty() {
            return;
        }
        let q = [q.x, q.y, q.z];
        self.within_rec(0, self.ids.len(), &q, radius * radius, out);
    }

    fn consider(&self, pos: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        let p = &self.pts[pos];
        let d = sq(p[0] - q[0]) + sq(p[1] - q[1]) + sq(p[2] - q[2]);
        let id = self.ids[pos];
        if d < best.0 || (d == best.0 && id < best.1) {
            *best = (d, id);
        }
    }

    fn nearest_rec(&self, lo: usize, hi: usize, q: &[f64; 3], best: &mut (f64, usize)) {
        if hi - lo <= LEAF {
            for pos in lo..hi {
                self.consider(pos, q, best);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - self.pts[mid][ax];
        self.consider(mid, q, best);
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(near.0, near.1, q, best);
        // `<=` keeps equidistant candidates on the far side reachable for tie-breaking.
        if diff * diff <= best.0 {
            self.nearest_rec(far.0, far.1, q, best);
        }
    }

    fn within_rec(&self, lo: usize, hi: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        if hi - lo <= LEAF {
            for pos in lo..hi {
                let p = &self.pts[pos];
                if sq(p[0] - q[0]) + sq(p[1] - q[1]) + sq(p[2] - q[2]) <= r2 {
                    out.push(self.ids[pos]);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let ax = self.axis[mid] as usize;
        let diff = q[ax] - self.pts[mid][ax];
        let p = &self.pts[mid];
        if sq(p[0] - q[0]) + sq(p[1] - q[1]) + sq(p[2] - q[2]) <= r2 {
            out.push(self.ids[mid]);
        }
        if diff <= 0.0 || diff * diff <= r2 {
            self.within_rec(lo, mid, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.within_rec(mid + 1, hi, q, r2, out);
        }
    }
}

#[inline]
fn sq(x: f64) -> f64 {
    x * x
}

fn build_rec(points: &[Point3], ids: &mut [usize], axis: &mut [u8]) {
    let n = ids.len();
    if n <= LEAF {
        return;
    }
    let ax = widest_axis(points, ids);
    let mid = n / 2;
    ids.select_nth_unstable_by(mid, |&a, &b| {
        points[a][ax].total_cmp(&points[b][ax]).then(a.cmp(&b))
    });
    axis[mid] = ax as u8;
    let (left, rest) = ids.split_at_mut(mid);
    let (left_axis, rest_axis) = axis.split_at_mut(mid);
    build_rec(points, left, left_axis);
    build_rec(points, &mut rest[1..], &mut rest_axis[1..]);
}

fn widest_axis(points: &[Point3], ids: &[usize]) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in ids {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap()
}
