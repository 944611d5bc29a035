//! Latent-to-scene mapping and the analytic renderer.
//!
//! A 12-dimensional latent is mapped to 16 raw scene coordinates by the fixed
//! matrix [`SCENE_MAP`] (no offset), and each raw coordinate `z` becomes a
//! parameter `lo + (hi - lo) * sigmoid(z)` in its range:
//!
//! | raw | parameter              | range        | driven by             |
//! |-----|------------------------|--------------|-----------------------|
//! | 0,1 | circle center x, y     | [0.2, 0.8]   | l0, l1                |
//! | 2   | circle radius          | [0.08, 0.25] | l2                    |
//! | 3,4 | rectangle center x, y  | [0.2, 0.8]   | l3, l4                |
//! | 5,6 | rectangle half-extents | [0.06, 0.3]  | l5, l6                |
//! | 7-9 | background RGB         | [0, 1]       | l7..l9                |
//! | 10-12 | circle RGB           | [0, 1]       | mixes of l7..l11      |
//! | 13-15 | rectangle RGB        | [0, 1]       | mixes of l7..l11      |
//!
//! Coordinates are in image units: `(0, 0)` is the top-left corner and
//! `(1, 1)` the bottom-right; pixel `(x, y)` of an `r x r` raster has its
//! center at `((x + 0.5) / r, (y + 0.5) / r)`.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

use super::{Latent, LATENT_DIM, NUM_CLASSES, STAGE_CHANNELS};

pub const CENTER_RANGE: (f64, f64) = (0.2, 0.8);
pub const RADIUS_RANGE: (f64, f64) = (0.08, 0.25);
pub const HALF_EXTENT_RANGE: (f64, f64) = (0.06, 0.3);
pub const COLOR_RANGE: (f64, f64) = (0.0, 1.0);

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_CIRCLE: u8 = 1;
pub const CLASS_RECTANGLE: u8 = 2;

const G: f64 = 1.2;
const O: f64 = 2.0;
const T: f64 = 0.3;

/// Rows: raw scene coordinates; columns: latent coordinates. Colors use
/// l7..l11 so that each class has its own, overlapping, color distribution:
/// a near-gray background (l7, tinted by l8), a circle whose red and green
/// oppose each other (l9) with free blue (l10), and a rectangle whose red
/// and blue oppose each other (l11) with green from l8.
#[rustfmt::skip]
pub const SCENE_MAP: [[f64; LATENT_DIM]; 16] = [
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    // background
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, G,   T,   0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, G,   0.0, 0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, G,   -T,  0.0, 0.0, 0.0],
    // circle
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, O,   0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -O,  0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, G,   0.0],
    // rectangle
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, O  ],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, G,   0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -O ],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub background: [f64; 3],
    pub circle_center: [f64; 2],
    pub circle_radius: f64,
    pub circle_color: [f64; 3],
    pub rect_center: [f64; 2],
    pub rect_half: [f64; 2],
    pub rect_color: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn in_range((lo, hi): (f64, f64), z: f64) -> f64 {
    lo + (hi - lo) * sigmoid(z)
}

pub fn latent_to_scene(latent: &Latent) -> Result<SceneParams> {
    let l = latent.values();
    if l.len() != LATENT_DIM {
        return Err(Error::invalid(format!("latent has {} coordinates, expected {LATENT_DIM}", l.len())));
    }
    let raw: Vec<f64> = SCENE_MAP
        .iter()
        .map(|row| row.iter().zip(l).map(|(a, b)| a * b).sum())
        .collect();
    let c = |i: usize| in_range(COLOR_RANGE, raw[i]);
    Ok(SceneParams {
        circle_center: [in_range(CENTER_RANGE, raw[0]), in_range(CENTER_RANGE, raw[1])],
        circle_radius: in_range(RADIUS_RANGE, raw[2]),
        rect_center: [in_range(CENTER_RANGE, raw[3]), in_range(CENTER_RANGE, raw[4])],
        rect_half: [in_range(HALF_EXTENT_RANGE, raw[5]), in_range(HALF_EXTENT_RANGE, raw[6])],
        background: [c(7), c(8), c(9)],
        circle_color: [c(10), c(11), c(12)],
        rect_color: [c(13), c(14), c(15)],
    })
}

impl SceneParams {
    /// Positive inside the circle.
    pub fn circle_distance(&self, u: f64, v: f64) -> f64 {
        let [cx, cy] = self.circle_center;
        self.circle_radius - ((u - cx).powi(2) + (v - cy).powi(2)).sqrt()
    }

    /// Positive inside the rectangle (exact inside, a lower bound outside).
    pub fn rect_distance(&self, u: f64, v: f64) -> f64 {
        let [rx, ry] = self.rect_center;
        let [hw, hh] = self.rect_half;
        (hw - (u - rx).abs()).min(hh - (v - ry).abs())
    }

    /// Rasterizes the 8-channel feature stack at `res x res`:
    /// channels 0-2 the composited color (rectangle over circle over
    /// background), 3-5 the soft occupancies `sigmoid(2 res * d)` of
    /// background, circle and rectangle, 6-7 the circle and rectangle signed
    /// distances in half-image units (`2 d`).
    pub fn render(&self, res: usize) -> Tensor {
        let tau = 2.0 * res as f64;
        let plane = res * res;
        let mut out = vec![0.0; STAGE_CHANNELS * plane];
        for y in 0..res {
            for x in 0..res {
                let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
                let dc = self.circle_distance(u, v);
                let dr = self.rect_distance(u, v);
                let db = -dc.max(dr);
                let (oc, or, ob) = (sigmoid(tau * dc), sigmoid(tau * dr), sigmoid(tau * db));
                let i = y * res + x;
                for ch in 0..3 {
                    let under = oc * self.circle_color[ch] + (1.0 - oc) * self.background[ch];
                    out[ch * plane + i] = or * self.rect_color[ch] + (1.0 - or) * under;
                }
                out[3 * plane + i] = ob;
                out[4 * plane + i] = oc;
                out[5 * plane + i] = or;
                out[6 * plane + i] = 2.0 * dc;
                out[7 * plane + i] = 2.0 * dr;
            }
        }
        Tensor::new(vec![STAGE_CHANNELS, res, res], out).expect("render shape")
    }
}

/// Hard z-ordered labels: rectangle where its distance is positive at the
/// pixel center, else circle, else background.
pub fn ground_truth_labels(scene: &SceneParams, res: usize) -> Result<LabelMap> {
    if res < 4 {
        return Err(Error::invalid(format!("label resolution {res} < 4")));
    }
    let mut data = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let (u, v) = ((x as f64 + 0.5) / res as f64, (y as f64 + 0.5) / res as f64);
            data.push(if scene.rect_distance(u, v) > 0.0 {
                CLASS_RECTANGLE
            } else if scene.circle_distance(u, v) > 0.0 {
                CLASS_CIRCLE
            } else {
                CLASS_BACKGROUND
            });
        }
    }
    LabelMap::new(res, res, NUM_CLASSES, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(v: &[(usize, f64)]) -> Latent {
        let mut l = vec![0.0; LATENT_DIM];
        for &(i, x) in v {
            l[i] = x;
        }
        Latent::new(l)
    }

    #[test]
    fn zero_latent_gives_midpoints() {
        let s = latent_to_scene(&latent(&[])).unwrap();
        assert_eq!(s.circle_center, [0.5, 0.5]);
        assert!((s.circle_radius - 0.165).abs() < 1e-15);
        assert_eq!(s.rect_center, [0.5, 0.5]);
        assert!((s.rect_half[0] - 0.18).abs() < 1e-15);
        assert_eq!(s.background, [0.5; 3]);
        assert_eq!(s.circle_color, [0.5; 3]);
        assert_eq!(s.rect_color, [0.5; 3]);
    }

    #[test]
    fn saturated_coordinate_hits_range_bound() {
        let s = latent_to_scene(&latent(&[(0, 1e6), (2, -1e6)])).unwrap();
        assert_eq!(s.circle_center[0], CENTER_RANGE.1);
        assert_eq!(s.circle_radius, RADIUS_RANGE.0);
        assert_eq!(s.circle_center[1], 0.5);
    }

    #[test]
    fn wrong_latent_length_rejected() {
        assert!(latent_to_scene(&Latent::new(vec![0.0; 5])).is_err());
    }

    #[test]
    fn pinned_golden_scene() {
        // Produced once by running the documented mapping on this latent.
        let l = Latent::new(vec![0.3, -0.7, 1.1, -1.4, 0.2, 0.5, -0.9, 0.6, -0.25, 1.3, -0.4, 0.8]);
        let s = latent_to_scene(&l).unwrap();
        let got = [
            s.circle_center[0],
            s.circle_center[1],
            s.circle_radius,
            s.rect_center[0],
            s.rect_center[1],
            s.rect_half[0],
            s.rect_half[1],
            s.background[0],
            s.background[1],
            s.background[2],
            s.circle_color[0],
            s.circle_color[1],
            s.circle_color[2],
            s.rect_color[0],
            s.rect_color[1],
            s.rect_color[2],
        ];
        let golden = [
            0.5446655100869955, 0.3990873366991004, 0.20754421795117, 0.318689666864851,
            0.5299003983874868, 0.2093902394884451, 0.12937211936999904, 0.6558828412078137,
            0.6726070170677604, 0.6889039179769546, 0.9308615796566533, 0.06913842034334682,
            0.38225212523075097, 0.8320183851339245, 0.425557483188341, 0.1679816148660755,
        ];
        for (g, w) in got.iter().zip(golden) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn fully_covered_circle_has_no_pixels() {
        let mut s = latent_to_scene(&latent(&[])).unwrap();
        s.circle_radius = 0.1;
        s.rect_half = [0.3, 0.3];
        let labels = ground_truth_labels(&s, 32).unwrap();
        assert_eq!(labels.class_counts()[CLASS_CIRCLE as usize], 0);
    }

    #[test]
    fn label_counts_partition_the_image() {
        let s = latent_to_scene(&latent(&[(0, -3.0), (3, 3.0)])).unwrap();
        let labels = ground_truth_labels(&s, 32).unwrap();
        assert_eq!(labels.class_counts().iter().sum::<usize>(), 32 * 32);
        assert!(ground_truth_labels(&s, 3).is_err());
    }

    #[test]
    fn small_disk_pixel_count_matches_area() {
        // Radius at its minimum, circle in one corner and rectangle in the other.
        let s = latent_to_scene(&latent(&[(0, -30.0), (1, -30.0), (2, -40.0), (3, 30.0), (4, 30.0)])).unwrap();
        let labels = ground_truth_labels(&s, 32).unwrap();
        let count = labels.class_counts()[CLASS_CIRCLE as usize] as f64;
        // independent count of pixel centers inside the disk
        let mut brute = 0usize;
        for y in 0..32 {
            for x in 0..32 {
                let (u, v) = ((x as f64 + 0.5) / 32.0, (y as f64 + 0.5) / 32.0);
                let r2 = (u - s.circle_center[0]).powi(2) + (v - s.circle_center[1]).powi(2);
                if r2 < s.circle_radius * s.circle_radius {
                    brute += 1;
                }
            }
        }
        assert_eq!(count as usize, brute);
        let area = std::f64::consts::PI * (s.circle_radius * 32.0).powi(2);
        assert!((count - area).abs() <= 0.15 * area, "count {count}, area {area}");
    }
}
