//! Organ boundary extraction from label masks.
//!
//! Foreground uses 8-connectivity and background 4-connectivity. External
//! boundaries are traced with Moore-neighbour tracing and Jacob's stopping
//! criterion, without any simplification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, LabelMask, Point};

/// Closed, ordered boundary of one organ in integer pixel coordinates.
///
/// Starts at the topmost-then-leftmost boundary pixel and runs clockwise on
/// screen (y down). Consecutive pixels, including last to first, are
/// 8-adjacent. A single-pixel organ yields a one-point contour.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    pub organ_label: u8,
    pub points: Vec<[usize; 2]>,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pixel centers `(x + 0.5, y + 0.5)` in continuous pixel units.
    pub fn centers(&self) -> Vec<Point> {
        self.points
            .iter()
            .map(|&[x, y]| [x as f64 + 0.5, y as f64 + 0.5])
            .collect()
    }
}

const NEIGHBOURS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Labels 8-connected foreground components in raster order of discovery.
/// Returns per-pixel component ids (`0` = background) and component sizes
/// indexed by `id - 1`.
pub fn label_components(mask: &BinaryMask) -> (Grid<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels: Grid<u32> = Grid::new(w, h);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || *labels.get(x, y) != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0;
            labels.set(x, y, id);
            stack.push((x as i64, y as i64));
            while let Some((cx, cy)) = stack.pop() {
                size += 1;
                for (dx, dy) in NEIGHBOURS_8 {
                    let (nx, ny) = (cx + dx, cy + dy);
                    if mask.get_signed(nx, ny) == Some(&true)
                        && *labels.get(nx as usize, ny as usize) == 0
                    {
                        labels.set(nx as usize, ny as usize, id);
                        stack.push((nx, ny));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Keeps the largest 8-connected component. Equal sizes resolve to the
/// component met first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |acc, (i, &s)| match acc {
            Some((_, bs)) if bs >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i as u32 + 1)
    else {
        return Grid::new(mask.width(), mask.height());
    };
    labels.map(|&l| l == best)
}

// Moore neighbourhood in clockwise-on-screen order starting at west.
const MOORE: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

fn moore_index(dx: i64, dy: i64) -> usize {
    MOORE
        .iter()
        .position(|&d| d == (dx, dy))
        .expect("backtrack pixel must neighbour the current pixel")
}

/// Traces the external boundary of a single 8-connected component.
pub fn trace_boundary(mask: &BinaryMask) -> Result<Vec<[usize; 2]>> {
    let fg = |x: i64, y: i64| mask.get_signed(x, y) == Some(&true);
    let start = (0..mask.height())
        .flat_map(|y| (0..mask.width()).map(move |x| (x, y)))
        .find(|&(x, y)| *mask.get(x, y))
        .ok_or_else(|| Error::InvalidInput("cannot trace an empty mask".into()))?;
    let start = (start.0 as i64, start.1 as i64);
    // the west neighbour of the top-left pixel is background by construction
    let start_back = (start.0 - 1, start.1);

    let mut points = vec![[start.0 as usize, start.1 as usize]];
    let (mut cur, mut back) = (start, start_back);
    let mut first_move = None;
    let limit = 4 * mask.width() * mask.height() + 8;
    for _ in 0..limit {
        let first = moore_index(back.0 - cur.0, back.1 - cur.1);
        let mut next = None;
        for k in 1..=8 {
            let (dx, dy) = MOORE[(first + k) % 8];
            let cand = (cur.0 + dx, cur.1 + dy);
            if fg(cand.0, cand.1) {
                let (px, py) = MOORE[(first + k - 1) % 8];
                next = Some((cand, (cur.0 + px, cur.1 + py)));
                break;
            }
        }
        let Some(step) = next else {
            // isolated pixel
            return Ok(points);
        };
        // Jacob's criterion: stop when the start pixel is left the same way
        // it was left the first time
        match first_move {
            None => first_move = Some(step),
            Some(m) if cur == start && m == step => {
                points.pop();
                return Ok(points);
            }
            Some(_) => {}
        }
        let (n, b) = step;
        points.push([n.0 as usize, n.1 as usize]);
        cur = n;
        back = b;
    }
    Err(Error::InvalidInput("boundary tracing did not terminate".into()))
}

/// Contours for every configured organ present in `mask`. Each organ is
/// binarized and reduced to its largest component before tracing. Absent
/// organs are omitted.
pub fn extract_organ_contours(mask: &LabelMask, organs: &[u8]) -> BTreeMap<u8, Contour> {
    let present = mask.labels();
    organs
        .iter()
        .filter(|l| present.contains(l))
        .map(|&label| {
            let binary = largest_component(&mask.binarize(label));
            let points = trace_boundary(&binary).expect("present organ is nonempty");
            (
                label,
                Contour {
                    organ_label: label,
                    points,
                },
            )
        })
        .collect()
}

/// Mean contour length per organ over the samples that contain it.
pub fn contour_length_stats(
    dataset: &[BTreeMap<u8, Contour>],
    organs: &[u8],
) -> Result<BTreeMap<u8, f64>> {
    organs
        .iter()
        .map(|&organ| {
            let (sum, count) = dataset
                .iter()
                .filter_map(|m| m.get(&organ))
                .fold((0usize, 0usize), |(s, c), contour| (s + contour.len(), c + 1));
            if count == 0 {
                Err(Error::InvalidInput(format!(
                    "organ {organ} never observed in the training set"
                )))
            } else {
                Ok((organ, sum as f64 / count as f64))
            }
        })
        .collect()
}

/// CSV with columns `organ,index,x,y`.
pub fn contours_to_csv(contours: &BTreeMap<u8, Contour>) -> String {
    let mut out = String::from("organ,index,x,y\n");
    for (organ, c) in contours {
        for (i, [x, y]) in c.points.iter().enumerate() {
            writeln!(out, "{organ},{i},{x},{y}").unwrap();
        }
    }
    out
}

pub fn save_contours_csv(contours: &BTreeMap<u8, Contour>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, contours_to_csv(contours)).map_err(|e| Error::io(path, e))
}

pub fn load_contours_csv(path: impl AsRef<Path>) -> Result<BTreeMap<u8, Contour>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<u8, Contour> = BTreeMap::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::InvalidInput(format!("{}: bad contour row {}", path.display(), n + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let organ: u8 = f[0].parse().map_err(|_| bad())?;
        let x: usize = f[2].parse().map_err(|_| bad())?;
        let y: usize = f[3].parse().map_err(|_| bad())?;
        out.entry(organ)
            .or_insert_with(|| Contour {
                organ_label: organ,
                points: vec![],
            })
            .points
            .push([x, y]);
    }
    Ok(out)
}
