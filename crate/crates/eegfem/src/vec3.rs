//! Small fixed-size vector helpers for 3D geometry.
//!
//! Points are plain `[f64; 3]`; these free functions keep geometric code
//! readable without pulling a linear-algebra type into every signature.

pub type Point3 = [f64; 3];

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

#[inline]
pub fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    scale(a, 1.0 / n)
}

/// Signed volume of the tetrahedron (a, b, c, d); positive when (b-a, c-a,
/// d-a) is a right-handed triple.
#[inline]
pub fn tet_volume(a: Point3, b: Point3, c: Point3, d: Point3) -> f64 {
    dot(cross(sub(b, a), sub(c, a)), sub(d, a)) / 6.0
}

/// Area of the triangle (a, b, c).
#[inline]
pub fn tri_area(a: Point3, b: Point3, c: Point3) -> f64 {
    norm(cross(sub(b, a), sub(c, a))) / 2.0
}
