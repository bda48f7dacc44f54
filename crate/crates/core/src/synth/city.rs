use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::CellId;

/// Index of one administrative region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AdminId(pub u32);

impl AdminId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Half-open rectangle of cells `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CellRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

/// A rectangular city of square cells partitioned into rectangular admins.
///
/// Cell `(x, y)` has index `y * width + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityGrid {
    pub width: usize,
    pub height: usize,
    pub cell_size_km: f64,
    pub origin: LatLon,
    pub admins: Vec<CellRect>,
    pub admin_of: Vec<AdminId>,
    /// Planar centroid coordinates in km from the grid corner.
    pub centroids_km: Vec<[f64; 2]>,
    pub centroids_latlon: Vec<[f64; 2]>,
    /// Relative pull of each cell as an activity destination.
    pub attractiveness: Vec<f64>,
    /// Relative weight of each cell as a home location.
    pub residential: Vec<f64>,
}

const KM_PER_DEG_LAT: f64 = 110.574;
const KM_PER_DEG_LON_EQUATOR: f64 = 111.320;
const DEFAULT_ORIGIN: LatLon = LatLon {
    lat: 42.33,
    lon: -71.12,
};

impl CityGrid {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn n_admins(&self) -> usize {
        self.admins.len()
    }

    pub fn cell_xy(&self, cell: CellId) -> (usize, usize) {
        (cell.index() % self.width, cell.index() / self.width)
    }

    pub fn cell_at(&self, x: usize, y: usize) -> CellId {
        CellId((y * self.width + x) as u32)
    }

    pub fn contains(&self, cell: CellId) -> bool {
        cell.index() < self.n_cells()
    }

    pub fn admin(&self, cell: CellId) -> AdminId {
        self.admin_of[cell.index()]
    }

    /// Straight-line centroid distance in km.
    pub fn distance_km(&self, a: CellId, b: CellId) -> f64 {
        let [ax, ay] = self.centroids_km[a.index()];
        let [bx, by] = self.centroids_km[b.index()];
        (ax - bx).hypot(ay - by)
    }

    /// Centroid of an admin region in km, the mean of its cell centroids.
    pub fn admin_centroid_km(&self, admin: AdminId) -> [f64; 2] {
        let r = self.admins[admin.index()];
        let s = self.cell_size_km;
        [
            (r.x0 + r.x1) as f64 * 0.5 * s,
            (r.y0 + r.y1) as f64 * 0.5 * s,
        ]
    }

    pub fn cells_within(&self, center: CellId, radius_km: f64) -> Vec<CellId> {
        (0..self.n_cells() as u32)
            .map(CellId)
            .filter(|&c| self.distance_km(center, c) <= radius_km)
            .collect()
    }
}

/// Picks an `ax x ay = n_admins` tiling with the squarest admin blocks.
fn admin_tiling(width: usize, height: usize, n_admins: usize) -> Option<(usize, usize)> {
    (1..=n_admins)
        .filter(|ax| n_admins % ax == 0)
        .map(|ax| (ax, n_admins / ax))
        .filter(|&(ax, ay)| ax <= width && ay <= height)
        .min_by(|&(ax, ay), &(bx, by)| {
            let skew = |x: usize, y: usize| {
                let w = width as f64 / x as f64;
                let h = height as f64 / y as f64;
                (w / h).ln().abs()
            };
            skew(ax, ay).total_cmp(&skew(bx, by))
        })
}

/// Splits `len` cells into `parts` strips whose sizes differ by at most one.
fn strips(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i < extra);
        out.push((start, start + size));
        start += size;
    }
    out
}

/// Builds a deterministic synthetic city of 1 km cells.
pub fn generate_city(seed: u64, width: usize, height: usize, n_admins: usize) -> Result<CityGrid> {
    let infeasible = || Error::InfeasibleTiling {
        width,
        height,
        admins: n_admins,
    };
    if n_admins == 0 || width * height < n_admins {
        return Err(infeasible());
    }
    let (ax, ay) = admin_tiling(width, height, n_admins).ok_or_else(infeasible)?;

    let mut admins = Vec::with_capacity(n_admins);
    for &(y0, y1) in &strips(height, ay) {
        for &(x0, x1) in &strips(width, ax) {
            admins.push(CellRect { x0, y0, x1, y1 });
        }
    }

    let cell_size_km = 1.0;
    let n = width * height;
    let mut admin_of = vec![AdminId(0); n];
    let mut centroids_km = Vec::with_capacity(n);
    let mut centroids_latlon = Vec::with_capacity(n);
    for y in 0..height {
        for x in 0..width {
            let a = admins
                .iter()
                .position(|r| r.contains(x, y))
                .expect("tiling covers the grid");
            admin_of[y * width + x] = AdminId(a as u32);
            let cx = (x as f64 + 0.5) * cell_size_km;
            let cy = (y as f64 + 0.5) * cell_size_km;
            centroids_km.push([cx, cy]);
            let lat = DEFAULT_ORIGIN.lat + cy / KM_PER_DEG_LAT;
            let lon = DEFAULT_ORIGIN.lon
                + cx / (KM_PER_DEG_LON_EQUATOR * DEFAULT_ORIGIN.lat.to_radians().cos());
            centroids_latlon.push([lat, lon]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A few activity centres: one downtown near the middle, the rest anywhere.
    let n_centres = 3;
    let mut centres = Vec::with_capacity(n_centres);
    centres.push((
        width as f64 * rng.random_range(0.35..0.65),
        height as f64 * rng.random_range(0.35..0.65),
        rng.random_range(2.0..3.5),
        2.0,
    ));
    for _ in 1..n_centres {
        centres.push((
            width as f64 * rng.random::<f64>(),
            height as f64 * rng.random::<f64>(),
            rng.random_range(1.0..2.5),
            rng.random_range(0.5..1.2),
        ));
    }
    let mut attractiveness = Vec::with_capacity(n);
    let mut residential = Vec::with_capacity(n);
    for &[cx, cy] in &centroids_km {
        let pull: f64 = centres
            .iter()
            .map(|&(x, y, sigma, w)| {
                let d2 = (cx - x).powi(2) + (cy - y).powi(2);
                w * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum();
        attractiveness.push(0.05 + pull);
        residential.push(0.5 + rng.random::<f64>());
    }

    Ok(CityGrid {
        width,
        height,
        cell_size_km,
        origin: DEFAULT_ORIGIN,
        admins,
        admin_of,
        centroids_km,
        centroids_latlon,
        attractiveness,
        residential,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_tiling() {
        let g = generate_city(1, 20, 20, 16).unwrap();
        assert_eq!(g.n_cells(), 400);
        assert_eq!(g.n_admins(), 16);
        for a in 0..16 {
            let count = g.admin_of.iter().filter(|x| x.0 == a).count();
            assert_eq!(count, 25);
            assert_eq!(g.admins[a as usize].area(), 25);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_city(1, 20, 20, 16).unwrap(), generate_city(1, 20, 20, 16).unwrap());
        assert_ne!(
            generate_city(1, 20, 20, 16).unwrap().attractiveness,
            generate_city(2, 20, 20, 16).unwrap().attractiveness
        );
    }

    #[test]
    fn every_cell_maps_to_an_existing_admin() {
        for (w, h, a) in [(20, 20, 16), (7, 5, 6), (9, 4, 3), (3, 3, 9), (11, 13, 1)] {
            let g = generate_city(3, w, h, a).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let admin = g.admin(g.cell_at(x, y));
                    assert!(admin.index() < g.n_admins());
                    assert!(g.admins[admin.index()].contains(x, y));
                    let holders = g.admins.iter().filter(|r| r.contains(x, y)).count();
                    assert_eq!(holders, 1);
                }
            }
        }
    }

    #[test]
    fn infeasible_tilings_fail() {
        assert!(generate_city(1, 2, 2, 5).is_err());
        // 7 is prime and exceeds both sides.
        assert!(generate_city(1, 5, 5, 7).is_err());
        assert!(generate_city(1, 5, 5, 0).is_err());
    }

    #[test]
    fn unit_cells_are_one_km_apart() {
        let g = generate_city(1, 5, 5, 1).unwrap();
        let d = g.distance_km(g.cell_at(0, 0), g.cell_at(1, 0));
        assert!((d - 1.0).abs() < 1e-12);
    }
}
