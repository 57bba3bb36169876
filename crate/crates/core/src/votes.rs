//! Per-point regression quantities ("votes") toward each keypoint, their
//! scalarization into 1-D channels, and histogram binning.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud};

pub const DEFAULT_BINS: usize = 256;

#[derive(Debug, Error)]
pub enum VoteError {
    #[error("surface point {point} coincides with keypoint {keypoint}; vector vote undefined")]
    CoincidentPoint { point: usize, keypoint: usize },
    #[error("projection {0} is not a unit vector")]
    NonUnitProjection(usize),
    #[error("offset and vector votes need at least one projection")]
    NoProjections,
    #[error("cannot histogram an empty sample set")]
    EmptySamples,
    #[error("invalid histogram range or bin count: {0}")]
    InvalidBinning(String),
    #[error("vote field is empty")]
    EmptyField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoteScheme {
    /// Scalar distance ‖k − p‖.
    Radial,
    /// Displacement k − p.
    Offset,
    /// Unit direction (k − p)/‖k − p‖.
    Vector,
}

impl VoteScheme {
    /// Default keypoint count for pose pipelines using this scheme.
    pub fn default_keypoints(self) -> usize {
        match self {
            VoteScheme::Radial => 3,
            VoteScheme::Offset | VoteScheme::Vector => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VoteScheme::Radial => "radial",
            VoteScheme::Offset => "offset",
            VoteScheme::Vector => "vector",
        }
    }
}

/// Votes laid out keypoint-major: `[j][i]` is point `i`'s vote for keypoint `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum VoteValues {
    Scalar(Vec<Vec<f64>>),
    Vector(Vec<Vec<Point3>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteField {
    pub scheme: VoteScheme,
    pub values: VoteValues,
}

impl VoteField {
    pub fn n_keypoints(&self) -> usize {
        match &self.values {
            VoteValues::Scalar(v) => v.len(),
            VoteValues::Vector(v) => v.len(),
        }
    }

    pub fn n_points(&self) -> usize {
        match &self.values {
            VoteValues::Scalar(v) => v.first().map_or(0, Vec::len),
            VoteValues::Vector(v) => v.first().map_or(0, Vec::len),
        }
    }
}

pub fn compute_votes(cloud: &PointCloud, keypoints: &[Point3], scheme: VoteScheme) -> Result<VoteField, VoteError> {
    let values = match scheme {
        VoteScheme::Radial => VoteValues::Scalar(
            keypoints
                .iter()
                .map(|k| cloud.positions().map(|p| (k - p).norm()).collect())
                .collect(),
        ),
        VoteScheme::Offset => VoteValues::Vector(
            keypoints
                .iter()
                .map(|k| cloud.positions().map(|p| k - p).collect())
                .collect(),
        ),
        VoteScheme::Vector => {
            let mut out = Vec::with_capacity(keypoints.len());
            for (j, k) in keypoints.iter().enumerate() {
                let mut row = Vec::with_capacity(cloud.len());
                for (i, p) in cloud.positions().enumerate() {
                    let d = k - p;
                    let n = d.norm();
                    if n == 0.0 {
                        return Err(VoteError::CoincidentPoint { point: i, keypoint: j });
                    }
                    row.push(d / n);
                }
                out.push(row);
            }
            VoteValues::Vector(out)
        }
    };
    Ok(VoteField { scheme, values })
}

pub fn axis_projections() -> Vec<Point3> {
    vec![Point3::x(), Point3::y(), Point3::z()]
}

pub fn check_projections(projections: &[Point3]) -> Result<(), VoteError> {
    if projections.is_empty() {
        return Err(VoteError::NoProjections);
    }
    for (i, d) in projections.iter().enumerate() {
        if (d.norm() - 1.0).abs() > 1e-9 {
            return Err(VoteError::NonUnitProjection(i));
        }
    }
    Ok(())
}

/// One 1-D sample set per keypoint.
pub type Channel = Vec<Vec<f64>>;

/// Radial fields give a single identity channel; vector-valued fields give one
/// channel per projection direction with samples `v·d`.
pub fn scalar_channels(field: &VoteField, projections: &[Point3]) -> Result<Vec<Channel>, VoteError> {
    match &field.values {
        VoteValues::Scalar(v) => Ok(vec![v.clone()]),
        VoteValues::Vector(v) => {
            check_projections(projections)?;
            Ok(projections
                .iter()
                .map(|d| v.iter().map(|row| row.iter().map(|x| x.dot(d)).collect()).collect())
                .collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub raw_counts: Vec<u64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn bin_width(&self, b: usize) -> f64 {
        self.bin_edges[b + 1] - self.bin_edges[b]
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        0.5 * (self.bin_edges[b] + self.bin_edges[b + 1])
    }

    /// Mean of the binned distribution using bin centres.
    pub fn mean(&self) -> f64 {
        (0..self.bins()).map(|b| self.mass[b] * self.bin_center(b)).sum()
    }

    /// Rows `bin_lo,bin_hi,count,mass` under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,mass\n");
        for b in 0..self.bins() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.bin_edges[b],
                self.bin_edges[b + 1],
                self.raw_counts[b],
                self.mass[b]
            );
        }
        out
    }
}

/// Bins are half-open `[e_b, e_{b+1})` except the last, which is closed.
/// Samples outside `[lo, hi]` land in the end bins.
pub fn build_histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram, VoteError> {
    if samples.is_empty() {
        return Err(VoteError::EmptySamples);
    }
    if bins == 0 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VoteError::InvalidBinning(format!("bins={bins}, range=[{lo}, {hi}]")));
    }
    let width = (hi - lo) / bins as f64;
    let mut bin_edges: Vec<f64> = (0..=bins).map(|b| lo + width * b as f64).collect();
    bin_edges[bins] = hi;
    let mut raw_counts = vec![0u64; bins];
    for &s in samples {
        let b = if s.is_nan() || s <= lo {
            0
        } else if s >= hi {
            bins - 1
        } else {
            let mut b = ((s - lo) / width) as usize;
            b = b.min(bins - 1);
            // guard against rounding across an edge
            while b > 0 && s < bin_edges[b] {
                b -= 1;
            }
            while b + 1 < bins && s >= bin_edges[b + 1] {
                b += 1;
            }
            b
        };
        raw_counts[b] += 1;
    }
    let total = samples.len() as f64;
    let mass = raw_counts.iter().map(|&c| c as f64 / total).collect();
    Ok(Histogram {
        bin_edges,
        mass,
        raw_counts,
    })
}

/// Joint `[min, max]` over several sample sets, widened when degenerate.
pub fn joint_range<'a>(sets: impl IntoIterator<Item = &'a [f64]>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in sets {
        for &v in s {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, RigidTransform};
    use approx::assert_abs_diff_eq;

    fn one_point() -> PointCloud {
        PointCloud::from_positions([Point3::zeros()])
    }

    #[test]
    fn vote_examples() {
        let k = [Point3::new(3.0, 4.0, 0.0)];
        let r = compute_votes(&one_point(), &k, VoteScheme::Radial).unwrap();
        assert_eq!(r.values, VoteValues::Scalar(vec![vec![5.0]]));
        let o = compute_votes(&one_point(), &k, VoteScheme::Offset).unwrap();
        assert_eq!(o.values, VoteValues::Vector(vec![vec![Point3::new(3.0, 4.0, 0.0)]]));
        let v = compute_votes(&one_point(), &k, VoteScheme::Vector).unwrap();
        let VoteValues::Vector(v) = v.values else { unreachable!() };
        assert_abs_diff_eq!(v[0][0], Point3::new(0.6, 0.8, 0.0), epsilon = 1e-15);

        let err = compute_votes(&one_point(), &[Point3::x(), Point3::zeros()], VoteScheme::Vector);
        assert!(matches!(err, Err(VoteError::CoincidentPoint { point: 0, keypoint: 1 })));
    }

    #[test]
    fn channel_examples() {
        let k = [Point3::new(3.0, 4.0, 0.0)];
        let r = compute_votes(&one_point(), &k, VoteScheme::Radial).unwrap();
        assert_eq!(scalar_channels(&r, &[]).unwrap(), vec![vec![vec![5.0]]]);
        let o = compute_votes(&one_point(), &k, VoteScheme::Offset).unwrap();
        assert_eq!(scalar_channels(&o, &[Point3::x()]).unwrap(), vec![vec![vec![3.0]]]);
        let ch = scalar_channels(&o, &axis_projections()).unwrap();
        assert_eq!(ch, vec![vec![vec![3.0]], vec![vec![4.0]], vec![vec![0.0]]]);
        assert!(matches!(
            scalar_channels(&o, &[Point3::new(1.0, 1.0, 0.0)]),
            Err(VoteError::NonUnitProjection(0))
        ));
        assert!(matches!(scalar_channels(&o, &[]), Err(VoteError::NoProjections)));
    }

    #[test]
    fn histogram_examples() {
        let h = build_histogram(&[0.5], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.raw_counts, vec![0, 1]);
        let h = build_histogram(&[0.0, 1.0], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.raw_counts, vec![1, 1]);
        assert_eq!(h.mass, vec![0.5, 0.5]);
        let h = build_histogram(&[-5.0], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.raw_counts, vec![1, 0]);
        assert!(matches!(build_histogram(&[], 2, 0.0, 1.0), Err(VoteError::EmptySamples)));
        assert!(build_histogram(&[0.1], 0, 0.0, 1.0).is_err());
        assert!(build_histogram(&[0.1], 3, 1.0, 1.0).is_err());
    }

    #[test]
    fn histogram_csv() {
        let h = build_histogram(&[0.0, 1.0], 2, 0.0, 1.0).unwrap();
        assert_eq!(h.to_csv(), "bin_lo,bin_hi,count,mass\n0,0.5,1,0.5\n0.5,1,1,0.5\n");
    }

    #[test]
    fn radial_votes_match_brute_force_distances() {
        let cloud = PointCloud::from_positions((0..150).map(|i| {
            let t = i as f64 * 0.37;
            Point3::new(t.sin(), (1.3 * t).cos(), 0.1 * t)
        }));
        let k = [Point3::new(0.2, -0.4, 1.0), Point3::new(-1.0, 0.5, 0.3), Point3::zeros()];
        let field = compute_votes(&cloud, &k, VoteScheme::Radial).unwrap();
        let VoteValues::Scalar(v) = field.values else { unreachable!() };
        for (j, kp) in k.iter().enumerate() {
            let mut mine = v[j].clone();
            let mut brute: Vec<f64> = cloud
                .points
                .iter()
                .map(|p| {
                    let d = [kp.x - p.position.x, kp.y - p.position.y, kp.z - p.position.z];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .collect();
            mine.sort_by(f64::total_cmp);
            brute.sort_by(f64::total_cmp);
            for (a, b) in mine.iter().zip(&brute) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rigid_motion_behaviour() {
        let cloud = PointCloud::from_positions((0..40).map(|i| {
            let t = i as f64 * 0.71;
            Point3::new(t.cos(), t.sin(), (0.5 * t).sin())
        }));
        let k = [Point3::new(0.1, 0.2, 2.0), Point3::new(-2.0, 0.3, 0.0), Point3::new(0.0, 2.5, -0.4)];
        let t = RigidTransform::from_axis_angle(Point3::new(1.0, -2.0, 0.5), 0.8, Point3::new(0.3, -1.0, 2.0));
        let moved = apply_transform(&cloud, &t).unwrap();
        let moved_k: Vec<Point3> = k.iter().map(|p| t.apply(p)).collect();

        let (VoteValues::Scalar(a), VoteValues::Scalar(b)) = (
            compute_votes(&cloud, &k, VoteScheme::Radial).unwrap().values,
            compute_votes(&moved, &moved_k, VoteScheme::Radial).unwrap().values,
        ) else {
            unreachable!()
        };
        for (ra, rb) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_abs_diff_eq!(ra, rb, epsilon = 1e-12);
        }

        let (VoteValues::Vector(a), VoteValues::Vector(b)) = (
            compute_votes(&cloud, &k, VoteScheme::Offset).unwrap().values,
            compute_votes(&moved, &moved_k, VoteScheme::Offset).unwrap().values,
        ) else {
            unreachable!()
        };
        for (oa, ob) in a.iter().flatten().zip(b.iter().flatten()) {
            assert_abs_diff_eq!(t.rotation * oa, *ob, epsilon = 1e-12);
        }

        let VoteValues::Vector(v) = compute_votes(&moved, &moved_k, VoteScheme::Vector).unwrap().values else {
            unreachable!()
        };
        assert!(v.iter().flatten().all(|u| (u.norm() - 1.0).abs() < 1e-9));
    }

    proptest::proptest! {
        #[test]
        fn histogram_mass_sums_to_one(
            samples in proptest::collection::vec(-10.0f64..10.0, 1..200),
            bins in 1usize..64,
            lo in -5.0f64..0.0,
            span in 0.1f64..8.0,
        ) {
            let h = build_histogram(&samples, bins, lo, lo + span).unwrap();
            let total: f64 = h.mass.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(h.bin_edges.windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert_eq!(h.raw_counts.iter().sum::<u64>(), samples.len() as u64);
        }
    }
}
