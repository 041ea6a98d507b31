//! Marching-cubes triangulation table built from first principles.
//!
//! Corner `c` sits at `(c & 1, c >> 1 & 1, c >> 2 & 1)`. On every face the
//! crossing segments cut off each inside corner separately, so two cubes
//! sharing a face always agree and the surface is closed. Segments are
//! chained into loops around the cube, each loop is fanned into triangles
//! wound so their normals point away from the inside corners.

use std::sync::OnceLock;

/// Corner pairs of the 12 cube edges.
pub const EDGES: [(usize, usize); 12] = {
    let mut e = [(0, 0); 12];
    let mut n = 0;
    let mut axis = 0;
    while axis < 3 {
        let bit = 1 << axis;
        let mut c = 0;
        while c < 8 {
            if c & bit == 0 {
                e[n] = (c, c | bit);
                n += 1;
            }
            c += 1;
        }
        axis += 1;
    }
    e
};

pub fn corner_pos(c: usize) -> [f64; 3] {
    [(c & 1) as f64, (c >> 1 & 1) as f64, (c >> 2 & 1) as f64]
}

fn edge_index(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("corners share an edge")
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (p, q) = (corner_pos(a), corner_pos(b));
    [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]
}

/// A face segment between two crossed edges, with the inside corner it
/// borders and the face's outward normal.
struct Segment {
    a: usize,
    b: usize,
    inside: usize,
    normal: [f64; 3],
}

fn face_segments(case: usize) -> Vec<Segment> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut segs = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            let ring = [base, base | 1 << u, base | 1 << u | 1 << v, base | 1 << v];
            let mut normal = [0.0; 3];
            normal[axis] = if side == 0 { -1.0 } else { 1.0 };
            let edge = |i: usize| edge_index(ring[i], ring[(i + 1) % 4]);
            for i in 0..4 {
                // an inside corner whose ring neighbours are both outside is
                // cut off on its own; this also covers the ambiguous case
                let (prev, here, next) = (ring[(i + 3) % 4], ring[i], ring[(i + 1) % 4]);
                if inside(here) && !inside(prev) && !inside(next) {
                    segs.push(Segment { a: edge((i + 3) % 4), b: edge(i), inside: here, normal });
                }
            }
            // two adjacent inside corners: one segment across the face
            for i in 0..4 {
                let (a0, a1) = (ring[i], ring[(i + 1) % 4]);
                let (before, after) = (ring[(i + 3) % 4], ring[(i + 2) % 4]);
                if inside(a0) && inside(a1) && !inside(before) && !inside(after) {
                    segs.push(Segment { a: edge((i + 3) % 4), b: edge((i + 1) % 4), inside: a0, normal });
                }
            }
            // three inside corners: cut off the single outside corner
            for i in 0..4 {
                let (prev, here, next) = (ring[(i + 3) % 4], ring[i], ring[(i + 1) % 4]);
                let opposite = ring[(i + 2) % 4];
                if !inside(here) && inside(prev) && inside(next) && inside(opposite) {
                    segs.push(Segment { a: edge((i + 3) % 4), b: edge(i), inside: prev, normal });
                }
            }
        }
    }
    segs
}

/// Edge triples for one corner configuration.
fn triangulate(case: usize) -> Vec<[usize; 3]> {
    let mut segs = face_segments(case);
    // orient each segment so its inside corner lies on the same side
    for s in &mut segs {
        let (pa, pb) = (midpoint(s.a), midpoint(s.b));
        let c = corner_pos(s.inside);
        if dot(cross(sub(pb, pa), sub(c, pa)), s.normal) > 0.0 {
            std::mem::swap(&mut s.a, &mut s.b);
        }
    }
    let mut used = vec![false; segs.len()];
    let mut tris = Vec::new();
    for start in 0..segs.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut poly = vec![segs[start].a];
        let mut cur = segs[start].b;
        while cur != poly[0] {
            poly.push(cur);
            let next = (0..segs.len())
                .find(|&j| !used[j] && segs[j].a == cur)
                .expect("face segments form closed loops");
            used[next] = true;
            cur = segs[next].b;
        }
        for i in 1..poly.len() - 1 {
            tris.push([poly[0], poly[i], poly[i + 1]]);
        }
    }
    tris
}

pub fn table() -> &'static [Vec<[usize; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[usize; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(table()[0].is_empty());
        assert!(table()[255].is_empty());
    }

    #[test]
    fn single_corner_is_one_outward_triangle() {
        for c in 0..8 {
            let tris = &table()[1 << c];
            assert_eq!(tris.len(), 1);
            let t = tris[0];
            let n = cross(sub(midpoint(t[1]), midpoint(t[0])), sub(midpoint(t[2]), midpoint(t[0])));
            let away = sub(midpoint(t[0]), corner_pos(c));
            assert!(dot(n, away) > 0.0, "corner {c}");
        }
    }

    #[test]
    fn every_crossed_edge_is_used_and_edges_pair_up() {
        for case in 1..255usize {
            let tris = &table()[case];
            let mut count = std::collections::HashMap::new();
            for t in tris {
                for i in 0..3 {
                    let (a, b) = (t[i], t[(i + 1) % 3]);
                    *count.entry((a, b)).or_insert(0i32) += 1;
                }
            }
            // interior polygon diagonals appear once in each direction
            for (&(a, b), &n) in &count {
                let back = count.get(&(b, a)).copied().unwrap_or(0);
                assert!(n == 1 && back <= 1, "case {case}");
            }
            for (e, &(p, q)) in EDGES.iter().enumerate() {
                let crossed = (case >> p & 1) != (case >> q & 1);
                let used = tris.iter().any(|t| t.contains(&e));
                assert_eq!(crossed, used, "case {case} edge {e}");
            }
        }
    }
}
