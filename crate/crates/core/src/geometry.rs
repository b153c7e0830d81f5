use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A position in the 2D workspace. Serializes as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn dist_sq(&self, other: &Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    /// Point at fraction `t` of the way from `self` to `other`.
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn in_workspace(&self) -> bool {
        (0.0..=1.0).contains(&self.x) && (0.0..=1.0).contains(&self.y)
    }

    pub fn check_workspace(&self) -> Result<()> {
        if self.in_workspace() {
            Ok(())
        } else {
            Err(Error::Domain {
                x: self.x,
                y: self.y,
            })
        }
    }

    pub fn clamp_workspace(&self) -> Point {
        Point::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Length of a polyline.
pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

/// Sites along a polyline at which a measurement fires.
///
/// `carried` is the distance already travelled since the previous
/// measurement; a site is emitted each time the accumulated distance reaches
/// `interval`. Returns the sites (with their arc-length offset from the start
/// of the polyline) and the distance carried past the last site.
pub fn measurement_sites(
    points: &[Point],
    carried: f64,
    interval: f64,
) -> (Vec<(f64, Point)>, f64) {
    let mut sites = Vec::new();
    let mut since = carried;
    let mut offset = 0.0;
    for w in points.windows(2) {
        let seg = w[0].dist(&w[1]);
        if seg <= 0.0 {
            continue;
        }
        let mut along = 0.0;
        // distance still needed before the next trigger
        let mut need = interval - since;
        while along + need <= seg + 1e-12 {
            along += need;
            let t = (along / seg).min(1.0);
            sites.push((offset + along, w[0].lerp(&w[1], t)));
            since = 0.0;
            need = interval;
        }
        since += seg - along;
        offset += seg;
    }
    (sites, since)
}
