//! Orthographic depth maps of normalized clouds.

use crate::geometry::PointCloud;
use crate::tensorcore::Array;

pub const DEPTH_RES: usize = 32;
/// Value of cells no point projects into.
pub const DEPTH_SENTINEL: f64 = 2.0;

/// Axis-aligned viewing direction; the camera sits on the positive side of
/// the named axis for `Pos*` and looks back toward the origin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl View {
    pub const ALL: [View; 6] = [View::PosX, View::NegX, View::PosY, View::NegY, View::PosZ, View::NegZ];

    /// `(depth axis, sign, image u axis, image v axis)`.
    fn frame(self) -> (usize, f64, usize, usize) {
        match self {
            View::PosX => (0, 1.0, 1, 2),
            View::NegX => (0, -1.0, 1, 2),
            View::PosY => (1, 1.0, 0, 2),
            View::NegY => (1, -1.0, 0, 2),
            View::PosZ => (2, 1.0, 0, 1),
            View::NegZ => (2, -1.0, 0, 1),
        }
    }
}

fn cell(v: f64) -> usize {
    (((v + 1.0) * 0.5 * DEPTH_RES as f64).floor().max(0.0) as usize).min(DEPTH_RES - 1)
}

/// `[32, 32]` map over `[-1, 1]^2`; each cell keeps the smallest depth
/// `-(sign * coordinate)` among the points projecting into it.
pub fn render_depth(pc: &PointCloud, view: View) -> Array {
    let (axis, sign, u, v) = view.frame();
    let mut grid = vec![DEPTH_SENTINEL; DEPTH_RES * DEPTH_RES];
    for p in pc.points() {
        let (pu, pv) = (p[u], p[v]);
        if !(-1.0..=1.0).contains(&pu) || !(-1.0..=1.0).contains(&pv) {
            continue;
        }
        let depth = -sign * p[axis];
        let idx = cell(pv) * DEPTH_RES + cell(pu);
        if depth < grid[idx] {
            grid[idx] = depth;
        }
    }
    Array::matrix(DEPTH_RES, DEPTH_RES, grid).expect("finite depths")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::{sample_surface, ShapeKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_point_hits_center() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let d = render_depth(&pc, View::PosZ);
        let hits: Vec<usize> = (0..d.len()).filter(|&i| d.data()[i] != DEPTH_SENTINEL).collect();
        assert_eq!(hits, vec![16 * DEPTH_RES + 16]);
        assert_eq!(d.at(16, 16), 0.0);
    }

    #[test]
    fn nearest_point_wins() {
        let pc = PointCloud::new(vec![[0.5, 0.5, -0.2], [0.5, 0.5, 0.7]]).unwrap();
        let d = render_depth(&pc, View::PosZ);
        assert_eq!(d.at(cell(0.5), cell(0.5)), -0.7);
        let d = render_depth(&pc, View::NegZ);
        assert_eq!(d.at(cell(0.5), cell(0.5)), -0.2);
    }

    #[test]
    fn sphere_covers_a_disc() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pc = PointCloud::new(sample_surface(ShapeKind::Sphere, 16384, &mut rng)).unwrap();
        let d = render_depth(&pc, View::PosZ);
        let filled = d.data().iter().filter(|&&v| v != DEPTH_SENTINEL).count() as f64;
        let disc = std::f64::consts::PI * 16.0 * 16.0;
        assert!((filled - disc).abs() / disc < 0.1, "{filled} vs {disc}");
        // Cells well outside the disc stay empty.
        assert_eq!(d.at(0, 0), DEPTH_SENTINEL);
        assert_eq!(d.at(31, 31), DEPTH_SENTINEL);
    }

    #[test]
    fn rendering_is_deterministic_for_every_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pc = PointCloud::new(sample_surface(ShapeKind::Cone, 1000, &mut rng).into_iter().map(|p| p.map(|v| v * 0.5)).collect()).unwrap();
        for v in View::ALL {
            assert_eq!(render_depth(&pc, v), render_depth(&pc, v));
        }
    }
}
