//! Convex polygon clipping (Sutherland-Hodgman) for rectangle overlaps.

/// Vertices closer than this (meters) are merged; also the tolerance for
/// treating a vertex as lying on a clipping edge.
pub const MERGE_EPS: f64 = 1e-9;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc
}

fn push_merged(out: &mut Vec<[f64; 2]>, p: [f64; 2]) {
    if let Some(last) = out.last() {
        if (last[0] - p[0]).abs() < MERGE_EPS && (last[1] - p[1]).abs() < MERGE_EPS {
            return;
        }
    }
    out.push(p);
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
///
/// Both inputs must be convex and counter-clockwise. The result is the
/// (possibly empty) counter-clockwise intersection polygon.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.len() < 3 {
            return Vec::new();
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge_len = (b[0] - a[0]).hypot(b[1] - a[1]);
        // signed distance of p to the edge line, positive inside
        let side = |p: [f64; 2]| cross(a, b, p) / edge_len;

        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let d_cur = side(cur);
            let d_prev = side(prev);
            let cur_in = d_cur >= -MERGE_EPS;
            let prev_in = d_prev >= -MERGE_EPS;
            if cur_in {
                if !prev_in {
                    let t = d_prev / (d_prev - d_cur);
                    push_merged(
                        &mut output,
                        [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])],
                    );
                }
                push_merged(&mut output, cur);
            } else if prev_in {
                let t = d_prev / (d_prev - d_cur);
                push_merged(
                    &mut output,
                    [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])],
                );
            }
        }
        if output.len() > 1 {
            let first = output[0];
            let last = output[output.len() - 1];
            if (last[0] - first[0]).abs() < MERGE_EPS && (last[1] - first[1]).abs() < MERGE_EPS {
                output.pop();
            }
        }
    }
    if output.len() < 3 {
        Vec::new()
    } else {
        output
    }
}
