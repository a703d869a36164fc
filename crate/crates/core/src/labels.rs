//! Landmark annotations, hierarchical one-hot supervision, and the clinical
//! measurements derived from landmark geometry.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::graph::{patch_index_unchecked, Level, MAX_LEVELS};

pub const NUM_LANDMARKS: usize = 4;

/// Four ordered landmarks along the measurement line: IVS top, IVS bottom
/// (= LVID top), LVID bottom (= LVPW top), LVPW bottom. Points are `(h, w)`
/// in sub-pixel units of a `height x width` frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub points: [[f64; 2]; NUM_LANDMARKS],
    pub spacing_mm: f64,
    pub height: usize,
    pub width: usize,
}

impl LandmarkSet {
    pub fn new(points: [[f64; 2]; NUM_LANDMARKS], spacing_mm: f64, height: usize, width: usize) -> Result<Self> {
        let set = Self {
            points,
            spacing_mm,
            height,
            width,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return domain(format!("spacing_mm must be positive, got {}", self.spacing_mm));
        }
        for (i, &[h, w]) in self.points.iter().enumerate() {
            let inside = h.is_finite()
                && w.is_finite()
                && h >= 0.0
                && w >= 0.0
                && h < self.height as f64
                && w < self.width as f64;
            if !inside {
                return domain(format!(
                    "landmark {} at ({h}, {w}) outside {}x{} frame",
                    i + 1,
                    self.height,
                    self.width
                ));
            }
        }
        Ok(())
    }

    /// Integer pixel containing landmark `p` (floor).
    pub fn pixel(&self, p: usize) -> (usize, usize) {
        let [h, w] = self.points[p];
        (
            (h.floor() as usize).min(self.height - 1),
            (w.floor() as usize).min(self.width - 1),
        )
    }

    /// Landmarks as `(x, y)` pairs, the convention of decoded predictions.
    pub fn xy(&self) -> [[f64; 2]; NUM_LANDMARKS] {
        self.points.map(|[h, w]| [w, h])
    }

    /// Builds a set from decoded `(x, y)` coordinates.
    pub fn from_xy(xy: &[[f64; 2]; NUM_LANDMARKS], spacing_mm: f64, height: usize, width: usize) -> Self {
        Self {
            points: xy.map(|[x, y]| [y, x]),
            spacing_mm,
            height,
            width,
        }
    }
}

/// Binary supervision for one level: `nodes x 4` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLabels {
    pub level: Level,
    pub values: Vec<u8>,
}

impl LevelLabels {
    pub fn nodes(&self) -> usize {
        self.values.len() / NUM_LANDMARKS
    }

    /// Node ids where channel `p` is positive.
    pub fn positives(&self, p: usize) -> Vec<usize> {
        self.values
            .chunks(NUM_LANDMARKS)
            .enumerate()
            .filter(|(_, row)| row[p] == 1)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementTriple {
    pub ivs_mm: f64,
    pub lvid_mm: f64,
    pub lvpw_mm: f64,
}

impl MeasurementTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.ivs_mm, self.lvid_mm, self.lvpw_mm]
    }
}

/// Channel `p` is one at the level-`k` patch containing landmark `p`.
pub fn induce_level_labels(landmarks: &LandmarkSet, k: u32) -> Result<LevelLabels> {
    landmarks.validate()?;
    if k == 0 || k > MAX_LEVELS {
        return domain(format!("level {k} outside 1..={MAX_LEVELS}"));
    }
    let side = 1usize << k;
    if landmarks.height < side || landmarks.width < side {
        return domain(format!("frame smaller than level {k} grid"));
    }
    let mut values = vec![0u8; side * side * NUM_LANDMARKS];
    for p in 0..NUM_LANDMARKS {
        let (h, w) = landmarks.pixel(p);
        let node = patch_index_unchecked(h, w, k, landmarks.height, landmarks.width);
        values[node * NUM_LANDMARKS + p] = 1;
    }
    Ok(LevelLabels {
        level: Level::Aux(k),
        values,
    })
}

/// One-hot pixel targets on the main grid.
pub fn main_graph_labels(landmarks: &LandmarkSet) -> Result<LevelLabels> {
    landmarks.validate()?;
    let mut values = vec![0u8; landmarks.height * landmarks.width * NUM_LANDMARKS];
    for p in 0..NUM_LANDMARKS {
        let (h, w) = landmarks.pixel(p);
        values[(h * landmarks.width + w) * NUM_LANDMARKS + p] = 1;
    }
    Ok(LevelLabels {
        level: Level::Main,
        values,
    })
}

/// Labels for every level `1..=levels` followed by the main grid.
pub fn hierarchy_labels(landmarks: &LandmarkSet, levels: u32) -> Result<Vec<LevelLabels>> {
    let mut out = (1..=levels)
        .map(|k| induce_level_labels(landmarks, k))
        .collect::<Result<Vec<_>>>()?;
    out.push(main_graph_labels(landmarks)?);
    Ok(out)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn measurements_from_landmarks(landmarks: &LandmarkSet) -> MeasurementTriple {
    let p = &landmarks.points;
    let s = landmarks.spacing_mm;
    MeasurementTriple {
        ivs_mm: dist(p[0], p[1]) * s,
        lvid_mm: dist(p[1], p[2]) * s,
        lvpw_mm: dist(p[2], p[3]) * s,
    }
}

/// Maps landmarks from a `from` frame to a `to` frame (`(height, width)`).
/// The scale must be isotropic because the pixel spacing is a single value.
pub fn rescale_landmarks(landmarks: &LandmarkSet, from: (usize, usize), to: (usize, usize)) -> Result<LandmarkSet> {
    let (fh, fw) = from;
    let (th, tw) = to;
    if fh == 0 || fw == 0 || th == 0 || tw == 0 {
        return domain("rescale sizes must be positive");
    }
    let sh = th as f64 / fh as f64;
    let sw = tw as f64 / fw as f64;
    if (sh - sw).abs() > 1e-12 * sh.max(sw) {
        return domain(format!(
            "anisotropic rescale {fh}x{fw} -> {th}x{tw} with mm spacing"
        ));
    }
    let points = landmarks.points.map(|[h, w]| {
        [
            (h * sh).clamp(0.0, (th as f64).next_down()),
            (w * sw).clamp(0.0, (tw as f64).next_down()),
        ]
    });
    Ok(LandmarkSet {
        points,
        spacing_mm: landmarks.spacing_mm * fh as f64 / th as f64,
        height: th,
        width: tw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: [[f64; 2]; 4], spacing: f64, size: usize) -> LandmarkSet {
        LandmarkSet::new(points, spacing, size, size).unwrap()
    }

    #[test]
    fn induce_examples() {
        let l = set([[0.0, 0.0], [5.0, 5.0], [9.0, 9.0], [15.0, 15.0]], 1.0, 16);
        let lab = induce_level_labels(&l, 2).unwrap();
        assert_eq!(lab.positives(0), vec![0]);

        let l = set([[112.0, 112.0]; 4], 1.0, 224);
        let lab = induce_level_labels(&l, 1).unwrap();
        for p in 0..4 {
            assert_eq!(lab.positives(p), vec![3]);
        }

        let l = set([[223.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]], 1.0, 224);
        assert_eq!(induce_level_labels(&l, 1).unwrap().positives(0), vec![2]);
    }

    #[test]
    fn induce_rejects_out_of_frame() {
        let l = LandmarkSet {
            points: [[224.0, 0.0]; 4],
            spacing_mm: 1.0,
            height: 224,
            width: 224,
        };
        assert!(induce_level_labels(&l, 1).is_err());
        assert!(main_graph_labels(&l).is_err());
    }

    #[test]
    fn main_label_examples() {
        let l = set([[0.0, 0.0], [2.0, 3.0], [2.0, 3.0], [1.0, 1.0]], 1.0, 4);
        let lab = main_graph_labels(&l).unwrap();
        assert_eq!(lab.positives(0), vec![0]);
        assert_eq!(lab.positives(1), vec![11]);
        assert_eq!(lab.positives(2), vec![11]);
        assert_eq!(lab.nodes(), 16);
    }

    #[test]
    fn measurement_examples() {
        let l = set([[10.0, 50.0], [30.0, 50.0], [30.0, 50.0], [40.0, 50.0]], 0.5, 64);
        let m = measurements_from_landmarks(&l);
        assert_eq!(m.ivs_mm, 10.0);
        assert_eq!(m.lvid_mm, 0.0);
        let l = set([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [3.0, 4.0]], 1.0, 8);
        assert_eq!(measurements_from_landmarks(&l).lvpw_mm, 5.0);
    }

    #[test]
    fn rescale_examples() {
        let l = set([[448.0, 0.0], [0.0, 0.0], [0.0, 0.0], [895.0, 895.0]], 0.25, 896);
        let r = rescale_landmarks(&l, (896, 896), (224, 224)).unwrap();
        assert_eq!(r.points[0], [112.0, 0.0]);
        assert_eq!(r.points[3], [223.75, 223.75]);
        assert_eq!(r.spacing_mm, 1.0);
        assert_eq!(rescale_landmarks(&l, (896, 896), (896, 896)).unwrap(), l);
        assert!(rescale_landmarks(&l, (896, 896), (224, 112)).is_err());
    }
}
