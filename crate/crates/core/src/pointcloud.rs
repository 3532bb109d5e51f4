//! Obstacle point clouds and the affine normalization shared by every network input.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Bounds, Workspace};
use crate::rng::RngStream;

pub const DEFAULT_N_PC: usize = 1400;

#[derive(Debug, Error, PartialEq)]
pub enum CloudError {
    #[error("workspace has no obstacles; the encoder input is undefined")]
    NoObstacles,
    #[error("point count must be positive")]
    ZeroPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub workspace_id: String,
    pub n_pc: usize,
    pub points: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }
}

/// One face of a box: the axis it is normal to, which side, and its area (length in 2D).
struct Face<'a> {
    obstacle: &'a Aabb,
    axis: usize,
    upper: bool,
    area: f64,
}

fn faces(obstacle: &Aabb) -> impl Iterator<Item = Face<'_>> {
    let extent = obstacle.extent();
    (0..obstacle.dim()).flat_map(move |axis| {
        let area: f64 = extent
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != axis)
            .map(|(_, e)| e)
            .product();
        [false, true].into_iter().map(move |upper| Face {
            obstacle,
            axis,
            upper,
            area,
        })
    })
}

/// Samples `n_pc` points uniformly by area over every obstacle face of `w`.
pub fn sample_obstacle_cloud(
    w: &Workspace,
    workspace_id: &str,
    n_pc: usize,
    seed: u64,
) -> Result<PointCloud, CloudError> {
    if w.obstacles.is_empty() {
        return Err(CloudError::NoObstacles);
    }
    if n_pc == 0 {
        return Err(CloudError::ZeroPoints);
    }
    let all: Vec<Face> = w.obstacles.iter().flat_map(faces).collect();
    let mut cumulative = Vec::with_capacity(all.len());
    let mut total = 0.0;
    for f in &all {
        total += f.area;
        cumulative.push(total);
    }
    let mut rng = RngStream::new(seed);
    let points = (0..n_pc)
        .map(|_| {
            let u = rng.gen_range(0.0..total);
            let idx = cumulative.partition_point(|c| *c <= u).min(all.len() - 1);
            let face = &all[idx];
            let o = face.obstacle;
            (0..o.dim())
                .map(|i| {
                    if i == face.axis {
                        if face.upper {
                            o.max[i]
                        } else {
                            o.min[i]
                        }
                    } else {
                        rng.gen_range(o.min[i]..=o.max[i])
                    }
                })
                .collect()
        })
        .collect();
    Ok(PointCloud {
        workspace_id: workspace_id.to_string(),
        n_pc,
        points,
    })
}

/// Affine map sending `b.min` to -1 and `b.max` to +1 per component. No clamping.
pub fn normalize(values: &[f64], b: &Bounds) -> Vec<f64> {
    values
        .iter()
        .zip(b.min.iter().zip(&b.max))
        .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
        .collect()
}

/// Inverse of [`normalize`].
pub fn denormalize(values: &[f64], b: &Bounds) -> Vec<f64> {
    values
        .iter()
        .zip(b.min.iter().zip(&b.max))
        .map(|(v, (lo, hi))| lo + 0.5 * (v + 1.0) * (hi - lo))
        .collect()
}

/// Normalized cloud, points sorted lexicographically, flattened row-major.
pub fn flatten_cloud(pc: &PointCloud, b: &Bounds) -> Vec<f64> {
    let mut pts: Vec<Vec<f64>> = pc.points.iter().map(|p| normalize(p, b)).collect();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pts.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::WorkspaceKind;
    use proptest::prelude::*;

    fn ws(obstacles: Vec<Aabb>) -> Workspace {
        let d = obstacles[0].dim();
        let kind = if d == 3 {
            WorkspaceKind::Complex3d
        } else {
            WorkspaceKind::Simple2d
        };
        Workspace::new(kind, Aabb::new(vec![-10.0; d], vec![10.0; d]).unwrap(), obstacles)
            .unwrap()
    }

    fn on_surface(p: &[f64], o: &Aabb) -> bool {
        let tol = 1e-9;
        let inside = p
            .iter()
            .zip(o.min.iter().zip(&o.max))
            .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol);
        let on_plane = p
            .iter()
            .zip(o.min.iter().zip(&o.max))
            .any(|(v, (lo, hi))| (v - lo).abs() <= tol || (v - hi).abs() <= tol);
        inside && on_plane
    }

    #[test]
    fn seeded_determinism() {
        let w = ws(vec![Aabb::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap()]);
        let a = sample_obstacle_cloud(&w, "w0", 500, 3).unwrap();
        let b = sample_obstacle_cloud(&w, "w0", 500, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_obstacle_cloud(&w, "w0", 500, 4).unwrap());
    }

    #[test]
    fn points_lie_on_obstacle_surfaces() {
        for o in [
            Aabb::new(vec![1.0, -2.0], vec![4.0, 0.5]).unwrap(),
            Aabb::new(vec![1.0, -2.0, 0.0], vec![4.0, 0.5, 2.0]).unwrap(),
        ] {
            let w = ws(vec![o.clone()]);
            let pc = sample_obstacle_cloud(&w, "w", 1000, 9).unwrap();
            assert_eq!(pc.points.len(), 1000);
            assert!(pc.points.iter().all(|p| on_surface(p, &o)));
        }
    }

    #[test]
    fn equal_area_obstacles_split_binomially() {
        let w = ws(vec![
            Aabb::new(vec![-8.0, -8.0], vec![-5.0, -6.0]).unwrap(),
            Aabb::new(vec![2.0, 2.0], vec![4.0, 5.0]).unwrap(),
        ]);
        let n = 2000;
        let sigma = (n as f64 * 0.5 * 0.5).sqrt();
        for seed in 0..10 {
            let pc = sample_obstacle_cloud(&w, "w", n, seed).unwrap();
            let first = pc.points.iter().filter(|p| p[0] < 0.0).count() as f64;
            assert!((first - 1000.0).abs() <= 3.0 * sigma, "seed {seed}: {first}");
        }
    }

    #[test]
    fn empty_workspace_is_rejected() {
        let w = Workspace::new(
            WorkspaceKind::Simple2d,
            Aabb::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
            vec![],
        )
        .unwrap();
        assert_eq!(
            sample_obstacle_cloud(&w, "w", 10, 0),
            Err(CloudError::NoObstacles)
        );
    }

    #[test]
    fn normalization_examples() {
        let b = Aabb::new(vec![-20.0, 0.0], vec![20.0, 10.0]).unwrap();
        assert_eq!(normalize(&[0.0, 5.0], &b), vec![0.0, 0.0]);
        assert_eq!(normalize(&[-20.0, 0.0], &b), vec![-1.0, -1.0]);
        assert_eq!(normalize(&[20.0, 10.0], &b), vec![1.0, 1.0]);
        // Out of range maps affinely.
        assert_eq!(normalize(&[60.0, 20.0], &b), vec![3.0, 3.0]);
    }

    #[test]
    fn flatten_examples() {
        let b = Aabb::new(vec![-1.0, -1.0], vec![3.0, 3.0]).unwrap();
        let one = PointCloud {
            workspace_id: "w".into(),
            n_pc: 1,
            points: vec![vec![1.0, 1.0]],
        };
        assert_eq!(flatten_cloud(&one, &b), vec![0.0, 0.0]);

        let w = ws(vec![Aabb::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap()]);
        let pc = sample_obstacle_cloud(&w, "w", DEFAULT_N_PC, 1).unwrap();
        assert_eq!(flatten_cloud(&pc, &w.bounds).len(), 2800);
    }

    proptest! {
        #[test]
        fn round_trip(v in prop::collection::vec(-50.0f64..50.0, 3),
                      lo in prop::collection::vec(-30.0f64..0.0, 3),
                      span in prop::collection::vec(0.1f64..60.0, 3)) {
            let hi: Vec<f64> = lo.iter().zip(&span).map(|(l, s)| l + s).collect();
            let b = Aabb::new(lo, hi).unwrap();
            let back = denormalize(&normalize(&v, &b), &b);
            for (x, y) in v.iter().zip(&back) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn flatten_ignores_point_order(seed in 0u64..1000, rot in 0usize..50) {
            let w = ws(vec![
                Aabb::new(vec![0.0, 0.0], vec![2.0, 3.0]).unwrap(),
                Aabb::new(vec![-5.0, 4.0], vec![-1.0, 6.0]).unwrap(),
            ]);
            let pc = sample_obstacle_cloud(&w, "w", 50, seed).unwrap();
            let mut shuffled = pc.clone();
            shuffled.points.rotate_left(rot);
            shuffled.points.reverse();
            prop_assert_eq!(flatten_cloud(&pc, &w.bounds), flatten_cloud(&shuffled, &w.bounds));
        }
    }
}
