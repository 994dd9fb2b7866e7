//! Piecewise-linear interpolation of (hours, N, WER) points over a Delaunay
//! triangulation in log-log coordinates.

use delaunator::{triangulate, Point};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourPoint {
    pub hours: f64,
    pub n_paired: f64,
    /// `None` outside the convex hull of the input points.
    pub wer_interp: Option<f64>,
}

pub struct Interpolator {
    pts: Vec<(f64, f64)>,
    values: Vec<f64>,
    triangles: Vec<[usize; 3]>,
}

fn to_log(hours: f64, n: f64) -> Result<(f64, f64)> {
    if !(hours > 0.0 && n > 0.0) {
        return Err(Error::InvalidArgument(format!("contour axes are logarithmic; got hours={hours}, N={n}")));
    }
    Ok((hours.ln(), n.ln()))
}

/// Barycentric coordinates of `p` in triangle `(a, b, c)`.
fn barycentric(p: (f64, f64), a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<[f64; 3]> {
    let det = (b.1 - c.1) * (a.0 - c.0) + (c.0 - b.0) * (a.1 - c.1);
    if det.abs() < 1e-300 {
        return None;
    }
    let l1 = ((b.1 - c.1) * (p.0 - c.0) + (c.0 - b.0) * (p.1 - c.1)) / det;
    let l2 = ((c.1 - a.1) * (p.0 - c.0) + (a.0 - c.0) * (p.1 - c.1)) / det;
    Some([l1, l2, 1.0 - l1 - l2])
}

impl Interpolator {
    /// Points are `(hours, N, WER)`.
    pub fn new(points: &[(f64, f64, f64)]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidArgument("contour needs at least 3 points".into()));
        }
        let pts = points.iter().map(|&(h, n, _)| to_log(h, n)).collect::<Result<Vec<_>>>()?;
        let dpts: Vec<Point> = pts.iter().map(|&(x, y)| Point { x, y }).collect();
        let tri = triangulate(&dpts);
        if tri.triangles.is_empty() {
            return Err(Error::InvalidArgument("contour points are collinear".into()));
        }
        let triangles = tri.triangles.chunks_exact(3).map(|t| [t[0], t[1], t[2]]).collect();
        Ok(Self { pts, values: points.iter().map(|p| p.2).collect(), triangles })
    }

    pub fn eval(&self, hours: f64, n: f64) -> Result<Option<f64>> {
        let p = to_log(hours, n)?;
        let tol = 1e-9;
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| self.pts[i]);
            if let Some(l) = barycentric(p, a, b, c) {
                if l.iter().all(|&x| x >= -tol) {
                    return Ok(Some(l[0] * self.values[t[0]] + l[1] * self.values[t[1]] + l[2] * self.values[t[2]]));
                }
            }
        }
        Ok(None)
    }
}

/// Evaluates the interpolant on a `resolution × resolution` grid spanning the
/// input range, evenly spaced in log hours and log N.
pub fn emit_contour(points: &[(f64, f64, f64)], resolution: usize) -> Result<Vec<ContourPoint>> {
    if resolution < 2 {
        return Err(Error::InvalidArgument("contour resolution must be at least 2".into()));
    }
    let interp = Interpolator::new(points)?;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &interp.pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let lerp = |a: f64, b: f64, i: usize| a + (b - a) * i as f64 / (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let (hours, n) = (lerp(x0, x1, i).exp(), lerp(y0, y1, j).exp());
            out.push(ContourPoint { hours, n_paired: n, wer_interp: interp.eval(hours, n)? });
        }
    }
    Ok(out)
}
