//! Planar polygon helpers.

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Rotates `p` about `pivot` counter-clockwise by `angle` radians.
pub fn rotate_about(p: Point, pivot: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    let d = sub(p, pivot);
    [pivot[0] + c * d[0] - s * d[1], pivot[1] + s * d[0] + c * d[1]]
}

/// Signed shoelace area (positive for counter-clockwise winding).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross(poly[i], poly[(i + 1) % n]))
        .sum::<f64>()
        * 0.5
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

pub fn perimeter(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| dist(poly[i], poly[(i + 1) % n])).sum()
}

/// Area centroid of a simple polygon.
pub fn centroid(poly: &[Point]) -> Point {
    let n = poly.len();
    let a = signed_area(poly);
    if a.abs() < 1e-15 {
        let sx: f64 = poly.iter().map(|p| p[0]).sum();
        let sy: f64 = poly.iter().map(|p| p[1]).sum();
        return [sx / n as f64, sy / n as f64];
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = poly[i];
        let q = poly[(i + 1) % n];
        let c = cross(p, q);
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// Even-odd point-in-polygon test.
pub fn contains(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_cross(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(sub(b, a), sub(c, a));
    let d2 = cross(sub(b, a), sub(d, a));
    let d3 = cross(sub(d, c), sub(a, c));
    let d4 = cross(sub(d, c), sub(b, c));
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

/// True when no two non-adjacent edges intersect and the polygon has nonzero area.
pub fn is_simple(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 || area(poly) < 1e-12 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

pub fn translate(poly: &[Point], offset: Point) -> Vec<Point> {
    poly.iter().map(|&p| add(p, offset)).collect()
}

/// Oriented rectangle centred at `center` with half extents `(hw, hh)`.
pub fn oriented_rect(center: Point, hw: f64, hh: f64, angle: f64) -> Vec<Point> {
    [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]]
        .iter()
        .map(|&c| rotate_about(add(center, c), center, angle))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: [Point; 4] = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];

    #[test]
    fn square_measures() {
        assert_eq!(area(&SQUARE), 4.0);
        assert_eq!(perimeter(&SQUARE), 8.0);
        assert_eq!(centroid(&SQUARE), [1.0, 1.0]);
        assert!(contains(&SQUARE, [0.5, 1.5]));
        assert!(!contains(&SQUARE, [2.5, 1.0]));
    }

    #[test]
    fn centroid_of_l_shape_matches_decomposition() {
        // L = 2x1 bar + 1x1 block on top of its left end
        let l = [
            [0.0, 0.0],
            [2.0, 0.0],
            [2.0, 1.0],
            [1.0, 1.0],
            [1.0, 2.0],
            [0.0, 2.0],
        ];
        let expect = [(1.0 * 2.0 + 0.5 * 1.0) / 3.0, (0.5 * 2.0 + 1.5 * 1.0) / 3.0];
        let c = centroid(&l);
        assert!((c[0] - expect[0]).abs() < 1e-12 && (c[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn bowtie_is_not_simple() {
        let bowtie = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple(&bowtie));
        assert!(is_simple(&SQUARE));
    }

    #[test]
    fn rotation_quarter_turn() {
        let p = rotate_about([1.0, 0.0], [0.0, 0.0], std::f64::consts::FRAC_PI_2);
        assert!(p[0].abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
    }
}
