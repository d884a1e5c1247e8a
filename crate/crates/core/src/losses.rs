//! Chamfer distance, its gradient check, and reporting scales.

use seedcloud_tensor::gradcheck::{numeric_gradient, relative_error};
use seedcloud_tensor::kernels::nearest_neighbors;
use seedcloud_tensor::{Tape, Tensor};

use crate::error::{Error, Result};
use crate::geometry::{dist2, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChamferReport {
    pub value: f64,
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub scale_factor: f64,
}

impl ChamferReport {
    pub fn scaled(&self) -> f64 {
        self.value * self.scale_factor
    }
}

/// Multipliers used when tabulating chamfer values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportScale {
    Unit,
    Thousand,
    TenThousand,
}

impl ReportScale {
    pub fn factor(self) -> f64 {
        match self {
            ReportScale::Unit => 1.0,
            ReportScale::Thousand => 1e3,
            ReportScale::TenThousand => 1e4,
        }
    }
}

pub fn report_scaled(cd: &ChamferReport, scale: ReportScale) -> f64 {
    cd.value * scale.factor()
}

fn mean_nn(from: &[f64], to: &[f64], squared: bool) -> f64 {
    let nn = nearest_neighbors(from, to);
    let total: f64 = nn.iter().map(|&(_, d)| if squared { d } else { d.sqrt() }).sum();
    total / nn.len() as f64
}

/// Symmetric chamfer distance with plain L2 nearest-neighbor distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<ChamferReport> {
    chamfer_with(a, b, false)
}

pub fn chamfer_with(a: &PointCloud, b: &PointCloud, squared: bool) -> Result<ChamferReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("chamfer distance of an empty cloud".into()));
    }
    let (fa, fb) = (a.flat::<f64>(), b.flat::<f64>());
    let a_to_b = mean_nn(&fa, &fb, squared);
    let b_to_a = mean_nn(&fb, &fa, squared);
    Ok(ChamferReport {
        value: a_to_b + b_to_a,
        a_to_b,
        b_to_a,
        scale_factor: 1.0,
    })
}

/// Nearest and runner-up distances closer than this count as a tie.
pub const TIE_GAP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCheckOutcome {
    Passed { max_rel_err: f64 },
    Failed { max_rel_err: f64 },
    /// Some nearest-neighbor match is ambiguous or at zero distance, where the
    /// distance is not differentiable.
    Skipped,
}

fn has_tie(from: &PointCloud, to: &PointCloud) -> bool {
    from.points().iter().any(|p| {
        let mut d: Vec<f64> = to.points().iter().map(|q| dist2(p, q).sqrt()).collect();
        d.sort_by(f64::total_cmp);
        d[0] < TIE_GAP || (d.len() > 1 && d[1] - d[0] < TIE_GAP)
    })
}

/// Analytic chamfer gradient from the tape, `(d/da, d/db)` as flat `[N·3]`.
pub fn chamfer_gradient(a: &PointCloud, b: &PointCloud, squared: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::<f64>::new();
    let va = tape.leaf(a.to_tensor(), true);
    let vb = tape.leaf(b.to_tensor(), true);
    let loss = tape.chamfer(va, vb, squared)?;
    let grads = tape.backward(loss)?;
    let take = |v| grads.get(v).map(Tensor::into_data).unwrap_or_default();
    Ok((take(va), take(vb)))
}

/// Central-difference check of the chamfer gradient with respect to both clouds.
pub fn chamfer_grad_check(a: &PointCloud, b: &PointCloud, squared: bool, tol: f64) -> Result<GradCheckOutcome> {
    if has_tie(a, b) || has_tie(b, a) {
        return Ok(GradCheckOutcome::Skipped);
    }
    let (ga, gb) = chamfer_gradient(a, b, squared)?;
    let na = a.len() * 3;
    let mut joint = a.flat::<f64>();
    joint.extend(b.flat::<f64>());
    let numeric = numeric_gradient(&joint, 1e-6, |x| {
        let (pa, pb) = x.split_at(na);
        mean_nn(pa, pb, squared) + mean_nn(pb, pa, squared)
    });
    let max_rel_err = ga
        .iter()
        .chain(&gb)
        .zip(&numeric)
        .map(|(&g, &n)| relative_error(g, n))
        .fold(0.0, f64::max);
    Ok(if max_rel_err <= tol {
        GradCheckOutcome::Passed { max_rel_err }
    } else {
        GradCheckOutcome::Failed { max_rel_err }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn single_pair() {
        let cd = chamfer(&cloud(&[[0.0; 3]]), &cloud(&[[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!((cd.value, cd.a_to_b, cd.b_to_a), (2.0, 1.0, 1.0));
    }

    #[test]
    fn scaling() {
        let r = |v| ChamferReport { value: v, a_to_b: v / 2.0, b_to_a: v / 2.0, scale_factor: 1.0 };
        assert!((report_scaled(&r(0.00138), ReportScale::Thousand) - 1.38).abs() < 1e-12);
        assert!((report_scaled(&r(0.000578), ReportScale::TenThousand) - 5.78).abs() < 1e-12);
        assert_eq!(report_scaled(&r(0.0), ReportScale::TenThousand), 0.0);
    }

    #[test]
    fn coincident_clouds_are_skipped() {
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_grad_check(&a, &a, false, 1e-4).unwrap(), GradCheckOutcome::Skipped);
    }
}
