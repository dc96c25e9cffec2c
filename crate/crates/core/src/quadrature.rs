//! Adaptive Gauss–Kronrod (7/15) quadrature and nested product rules over balls.
//!
//! Everything here is deterministic: interval subdivision depends only on the
//! integrand values, never on timing or thread scheduling.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
// Gauss weights for nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 1 << 16;

/// Tolerances for the adaptive rules.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Tolerance {
    pub const fn absolute(abs: f64) -> Self {
        Tolerance { abs, rel: 0.0 }
    }
}

struct Panel {
    a: f64,
    b: f64,
    err: f64,
    mass: f64,
    est: Vec<f64>,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err.total_cmp(&other.err).is_eq()
    }
}

impl Eq for Panel {}

impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// One Kronrod panel: K15 estimate, max-norm error estimate against the
/// embedded G7 rule, and max-norm of the absolute integrand mass.
fn panel<F>(f: &mut F, a: f64, b: f64, dim: usize, scratch: &mut [f64]) -> Panel
where
    F: FnMut(f64, &mut [f64]),
{
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut est = vec![0.0; dim];
    let mut gauss = vec![0.0; dim];
    let mut absmass = vec![0.0; dim];
    for (k, (&x, &wk)) in XGK.iter().zip(WGK.iter()).enumerate() {
        let nodes: &[f64] = if x == 0.0 { &[0.0] } else { &[-1.0, 1.0] };
        for &s in nodes {
            f(center + s * half * x, scratch);
            for c in 0..dim {
                est[c] += wk * scratch[c];
                absmass[c] += wk * scratch[c].abs();
                if k % 2 == 1 {
                    gauss[c] += WG[k / 2] * scratch[c];
                }
            }
        }
    }
    let mut err = 0.0f64;
    let mut mass = 0.0f64;
    for c in 0..dim {
        est[c] *= half;
        err = err.max((est[c] - gauss[c] * half).abs());
        mass = mass.max(absmass[c] * half.abs());
    }
    Panel {
        a,
        b,
        err,
        mass,
        est,
    }
}

/// Globally adaptive integration of a vector-valued integrand of `dim`
/// components over `[a, b]`: the panel with the largest error estimate is
/// bisected until the summed estimate meets the tolerance.
pub fn integrate_vec<F>(dim: usize, mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<Vec<f64>>
where
    F: FnMut(f64, &mut [f64]),
{
    if a == b {
        return Ok(vec![0.0; dim]);
    }
    let mut scratch = vec![0.0; dim];
    let first = panel(&mut f, a, b, dim, &mut scratch);
    let target = tol.abs.max(tol.rel * first.mass);
    let mut total_err = first.err;
    let mut total_mass = first.mass;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push(first);
    // panels too narrow to split are retired here
    let mut settled = vec![0.0; dim];
    let mut settled_err = 0.0;

    while total_err > target && total_err > 50.0 * f64::EPSILON * total_mass {
        if heap.len() >= MAX_INTERVALS {
            break;
        }
        let Some(worst) = heap.pop() else { break };
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a.min(worst.b) && mid < worst.a.max(worst.b)) {
            settled
                .iter_mut()
                .zip(&worst.est)
                .for_each(|(s, e)| *s += e);
            settled_err += worst.err;
            if settled_err > target {
                heap.push(worst);
                break;
            }
            continue;
        }
        let left = panel(&mut f, worst.a, mid, dim, &mut scratch);
        let right = panel(&mut f, mid, worst.b, dim, &mut scratch);
        total_err += left.err + right.err - worst.err;
        total_mass += left.mass + right.mass - worst.mass;
        heap.push(left);
        heap.push(right);
    }
    // re-sum to shed accumulated cancellation in the running error total
    let mut total = settled;
    let mut err = settled_err;
    let mut mass = 0.0;
    for p in &heap {
        total.iter_mut().zip(&p.est).for_each(|(t, e)| *t += e);
        err += p.err;
        mass += p.mass;
    }
    let converged = err <= target || err <= 50.0 * f64::EPSILON * mass;
    if !converged || total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Quadrature {
            estimate: total.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            error: err,
            tolerance: target,
        });
    }
    Ok(total)
}

/// Scalar convenience wrapper around [`integrate_vec`].
pub fn integrate<F>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    integrate_vec(1, |x, out| out[0] = f(x), a, b, tol).map(|v| v[0])
}

/// Integrates `f` over the Euclidean ball of radius `radius` centred at the
/// origin in `dim` dimensions, by nested slicing along the coordinate axes.
/// The integrand receives the point and writes `out_dim` components.
pub fn integrate_ball<F>(
    dim: usize,
    radius: f64,
    out_dim: usize,
    tol: f64,
    mut f: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &mut [f64]),
{
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let mut point = vec![0.0; dim];
    slice_level(
        0,
        dim,
        radius * radius,
        radius,
        out_dim,
        tol,
        &mut point,
        &mut f,
    )
}

#[allow(clippy::too_many_arguments)]
fn slice_level(
    level: usize,
    dim: usize,
    r2: f64,
    radius: f64,
    out_dim: usize,
    tol: f64,
    point: &mut [f64],
    f: &mut dyn FnMut(&[f64], &mut [f64]),
) -> Result<Vec<f64>> {
    let half = r2.max(0.0).sqrt();
    if half == 0.0 {
        return Ok(vec![0.0; out_dim]);
    }
    if level + 1 == dim {
        return integrate_vec(
            out_dim,
            |x, out| {
                point[level] = x;
                f(point, out);
            },
            -half,
            half,
            Tolerance::absolute(tol),
        );
    }
    // Inner errors accumulate over an interval of length at most 2·radius.
    let inner_tol = tol / (4.0 * radius.max(1.0));
    let mut inner_err: Option<Error> = None;
    let outer = integrate_vec(
        out_dim,
        |x, out| {
            point[level] = x;
            let mut sub = point.to_vec();
            match slice_level(
                level + 1,
                dim,
                r2 - x * x,
                radius,
                out_dim,
                inner_tol,
                &mut sub,
                f,
            ) {
                Ok(v) => out.copy_from_slice(&v),
                Err(e) => {
                    inner_err.get_or_insert(e);
                    out.iter_mut().for_each(|o| *o = 0.0);
                }
            }
        },
        -half,
        half,
        Tolerance::absolute(tol / 2.0),
    )?;
    match inner_err {
        Some(e) => Err(e),
        None => Ok(outer),
    }
}

/// Volume of the unit Euclidean ball in `dim` dimensions, `π^{d/2}/Γ(d/2+1)`.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        0 => 1.0,
        1 => 2.0,
        d => unit_ball_volume(d - 2) * 2.0 * std::f64::consts::PI / d as f64,
    }
}

/// Surface area of the unit sphere `S^{d-1}`, equal to `d·α_d`.
pub fn unit_sphere_area(dim: usize) -> f64 {
    dim as f64 * unit_ball_volume(dim)
}
