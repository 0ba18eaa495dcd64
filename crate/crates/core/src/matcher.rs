//! Dense 2D-3D correspondences by nearest neighbour in descriptor space.
//!
//! Descriptors are L2-normalized before the search, so the Euclidean argmin
//! coincides with the cosine-distance argmin used during training.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::encoder::OverlapSet;
use crate::geometry::{project_point, Intrinsics, RigidTransform};
use crate::pnp::PnpPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("empty overlap: {pixels} pixels, {points} points")]
    EmptyOverlap { pixels: usize, points: usize },
    #[error("descriptor width mismatch: image {image}, points {points}")]
    WidthMismatch { image: usize, points: usize },
    #[error("malformed correspondence CSV at line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub uv: Vector2<f64>,
    pub xyz: Vector3<f64>,
    pub point_index: usize,
    /// Euclidean distance between the normalized descriptors.
    pub feature_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pnp_pairs(&self) -> Vec<PnpPair> {
        self.pairs.iter().map(|c| PnpPair { uv: c.uv, xyz: c.xyz }).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v,x,y,z,pointIndex,distance\n");
        for c in &self.pairs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.uv.x, c.uv.y, c.xyz.x, c.xyz.y, c.xyz.z, c.point_index, c.feature_distance
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MatchError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| MatchError::Csv { line: i + 1, msg: msg.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(err("expected 7 fields"));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| err("bad number"));
            pairs.push(Correspondence {
                uv: Vector2::new(num(f[0])?, num(f[1])?),
                xyz: Vector3::new(num(f[2])?, num(f[3])?, num(f[4])?),
                point_index: f[5].trim().parse().map_err(|_| err("bad index"))?,
                feature_distance: num(f[6])?,
            });
        }
        Ok(Self { pairs })
    }
}

/// Unit-length copy; vectors with norm below 1e-12 are left as zeros.
pub fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance between two raw descriptors as the matcher measures it.
pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(&normalized(a), &normalized(b)).sqrt()
}

/// For every overlap point, the overlap pixel with the nearest descriptor.
/// Ties go to the lowest pixel index; the result is ordered by point entry.
pub fn match_overlap(overlap: &OverlapSet) -> Result<CorrespondenceSet, MatchError> {
    let (ki, kp) = (overlap.image_coords.len(), overlap.point_coords.len());
    if ki == 0 || kp == 0 {
        return Err(MatchError::EmptyOverlap { pixels: ki, points: kp });
    }
    let width = overlap.image_desc[0].len();
    if overlap.point_desc[0].len() != width {
        return Err(MatchError::WidthMismatch { image: width, points: overlap.point_desc[0].len() });
    }
    let pixels: Vec<Vec<f64>> = overlap.image_desc.iter().map(|d| normalized(d)).collect();
    let pairs = overlap
        .point_desc
        .iter()
        .enumerate()
        .map(|(i, desc)| {
            let q = normalized(desc);
            let mut best = 0;
            let mut best_d = squared_distance(&q, &pixels[0]);
            for (j, p) in pixels.iter().enumerate().skip(1) {
                let d = squared_distance(&q, p);
                if d < best_d {
                    best = j;
                    best_d = d;
                }
            }
            Correspondence {
                uv: overlap.image_coords[best],
                xyz: overlap.point_coords[i],
                point_index: overlap.point_indices[i],
                feature_distance: best_d.sqrt(),
            }
        })
        .collect();
    Ok(CorrespondenceSet { pairs })
}

/// Reprojection residual of each correspondence under the ground-truth pose;
/// `None` flags a point behind the camera.
pub fn match_statistics(
    corr: &CorrespondenceSet,
    k: &Intrinsics,
    gt: &RigidTransform,
) -> Vec<Option<f64>> {
    corr.pairs
        .iter()
        .map(|c| project_point(k, gt, &c.xyz).ok().map(|uv| (uv - c.uv).norm()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_random_pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn overlap(image_desc: Vec<Vec<f64>>, point_desc: Vec<Vec<f64>>) -> OverlapSet {
        let ki = image_desc.len();
        let kp = point_desc.len();
        OverlapSet {
            image_coords: (0..ki).map(|j| Vector2::new(j as f64, 2.0 * j as f64)).collect(),
            image_desc,
            point_coords: (0..kp).map(|i| Vector3::new(i as f64, 0.0, 1.0)).collect(),
            point_desc,
            point_indices: (0..kp).map(|i| 10 + i).collect(),
        }
    }

    #[test]
    fn identical_rows_match_exactly() {
        let img = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let pts = vec![img[2].clone(), img[0].clone(), img[1].clone()];
        let corr = match_overlap(&overlap(img, pts)).unwrap();
        let chosen: Vec<f64> = corr.pairs.iter().map(|c| c.uv.x).collect();
        assert_eq!(chosen, vec![2.0, 0.0, 1.0]);
        assert!(corr.pairs.iter().all(|c| c.feature_distance == 0.0));
        assert_eq!(corr.pairs[1].point_index, 11);
    }

    #[test]
    fn single_pixel_takes_everything() {
        let corr =
            match_overlap(&overlap(vec![vec![1.0, 2.0]], vec![vec![0.3, -1.0], vec![5.0, 1.0]])).unwrap();
        assert!(corr.pairs.iter().all(|c| c.uv == Vector2::new(0.0, 0.0)));
    }

    #[test]
    fn ties_go_to_lowest_pixel() {
        let img = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        let corr = match_overlap(&overlap(img, vec![vec![3.0, 0.0]])).unwrap();
        assert_eq!(corr.pairs[0].uv.x, 1.0);
    }

    #[test]
    fn empty_sides_fail() {
        assert!(matches!(
            match_overlap(&overlap(vec![], vec![vec![1.0]])),
            Err(MatchError::EmptyOverlap { .. })
        ));
        assert!(matches!(
            match_overlap(&overlap(vec![vec![1.0]], vec![])),
            Err(MatchError::EmptyOverlap { .. })
        ));
    }

    #[test]
    fn stored_distance_recomputes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rand_rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let set = overlap(rand_rows(40), rand_rows(25));
        let corr = match_overlap(&set).unwrap();
        for (i, c) in corr.pairs.iter().enumerate() {
            let j = c.uv.x as usize;
            let d = descriptor_distance(&set.point_desc[i], &set.image_desc[j]);
            assert!((d - c.feature_distance).abs() <= 1e-9);
        }
    }

    #[test]
    fn gt_residuals() {
        let k = Intrinsics::new(100.0, 100.0, 64.0, 32.0).unwrap();
        let pose = sample_random_pose(0.0, 4);
        let pts = [Vector3::new(0.1, 0.2, 3.0), Vector3::new(-0.4, 0.0, 5.0)];
        let world: Vec<_> = pts.iter().map(|p| pose.inverse().apply(p)).collect();
        let corr = CorrespondenceSet {
            pairs: world
                .iter()
                .enumerate()
                .map(|(i, w)| Correspondence {
                    uv: project_point(&k, &pose, w).unwrap(),
                    xyz: *w,
                    point_index: i,
                    feature_distance: 0.0,
                })
                .collect(),
        };
        assert!(match_statistics(&corr, &k, &pose).iter().all(|r| r.unwrap() < 1e-9));
        let nudged = RigidTransform::from_approximate(
            pose.rotation(),
            pose.translation() + Vector3::new(0.05, 0.0, 0.0),
        );
        assert!(match_statistics(&corr, &k, &nudged).iter().all(|r| r.unwrap() > 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let c = CorrespondenceSet {
            pairs: vec![Correspondence {
                uv: Vector2::new(1.5, 2.25),
                xyz: Vector3::new(-3.0, 0.125, 9.0),
                point_index: 7,
                feature_distance: 0.1,
            }],
        };
        let text = c.to_csv();
        assert!(text.starts_with("u,v,x,y,z,pointIndex,distance\n"));
        assert_eq!(CorrespondenceSet::from_csv(&text).unwrap(), c);
    }
}
