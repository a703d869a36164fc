//! Hierarchical grid graph: `K` auxiliary patch grids of `2^k x 2^k` nodes,
//! the pixel-level main grid, and the cross-level edges joining them.
//!
//! Global node ids run over the auxiliary levels coarse to fine and then the
//! main grid, row-major inside every level. Edges are stored once per
//! undirected pair with `u < v`.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Largest supported number of auxiliary levels.
pub const MAX_LEVELS: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Aux(u32),
    Main,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Aux(k) => write!(f, "level_{k}"),
            Level::Main => write!(f, "main"),
        }
    }
}

/// Shape of one level of the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub level: Level,
    pub rows: usize,
    pub cols: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl GridSpec {
    pub fn new(level: Level, image_height: usize, image_width: usize) -> Result<Self> {
        let (rows, cols) = match level {
            Level::Aux(k) => {
                check_level(k)?;
                let side = 1usize << k;
                if image_height < side || image_width < side {
                    return domain(format!(
                        "frame {image_height}x{image_width} smaller than level {k} grid {side}x{side}"
                    ));
                }
                (side, side)
            }
            Level::Main => (image_height, image_width),
        };
        if image_height == 0 || image_width == 0 {
            return domain("frame dimensions must be positive");
        }
        Ok(Self {
            level,
            rows,
            cols,
            image_height,
            image_width,
        })
    }

    pub fn node_count(&self) -> usize {
        self.rows * self.cols
    }
}

fn check_level(k: u32) -> Result<()> {
    if k == 0 || k > MAX_LEVELS {
        return domain(format!("level {k} outside 1..={MAX_LEVELS}"));
    }
    Ok(())
}

/// Row-major index of the level-`k` patch containing pixel `(h, w)`.
pub fn patch_index(h: usize, w: usize, k: u32, height: usize, width: usize) -> Result<usize> {
    check_level(k)?;
    if h >= height || w >= width {
        return domain(format!("pixel ({h}, {w}) outside {height}x{width} frame"));
    }
    Ok(patch_index_unchecked(h, w, k, height, width))
}

#[inline]
pub(crate) fn patch_index_unchecked(h: usize, w: usize, k: u32, height: usize, width: usize) -> usize {
    let side = 1usize << k;
    let r = (h << k) / height;
    let c = (w << k) / width;
    r * side + c
}

fn grid_edges(rows: usize, cols: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::with_capacity(rows * cols.saturating_sub(1) + cols * rows.saturating_sub(1));
    for r in 0..rows {
        for c in 0..cols {
            let u = (r * cols + c) as u32;
            if c + 1 < cols {
                edges.push((u, u + 1));
            }
            if r + 1 < rows {
                edges.push((u, u + cols as u32));
            }
        }
    }
    edges
}

/// 4-neighbour grid on `2^k x 2^k` nodes. Returns the node count and the
/// level-local edge list.
pub fn build_aux_graph(k: u32) -> Result<(usize, Vec<(u32, u32)>)> {
    check_level(k)?;
    let side = 1usize << k;
    Ok((side * side, grid_edges(side, side)))
}

/// 4-neighbour grid on the `height x width` pixels.
pub fn build_main_graph(height: usize, width: usize) -> Result<(usize, Vec<(u32, u32)>)> {
    if height < 2 || width < 2 {
        return domain(format!("main grid needs at least 2x2 pixels, got {height}x{width}"));
    }
    Ok((height * width, grid_edges(height, width)))
}

/// Cross-level edges as `(coarse_local, fine_local)` pairs.
///
/// Between auxiliary levels every coarse node is joined to its four quadrant
/// children. Into the main grid every pixel is joined to the single coarse
/// patch that contains it.
pub fn build_interlevel_edges(
    coarse: u32,
    fine: Level,
    height: usize,
    width: usize,
) -> Result<Vec<(u32, u32)>> {
    check_level(coarse)?;
    match fine {
        Level::Aux(f) => {
            if f != coarse + 1 {
                return domain(format!("levels {coarse} and {f} are not adjacent"));
            }
            check_level(f)?;
            let side = 1usize << coarse;
            let fside = side * 2;
            let mut edges = Vec::with_capacity(4 * side * side);
            for r in 0..side {
                for c in 0..side {
                    let parent = (r * side + c) as u32;
                    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let child = ((2 * r + dr) * fside + 2 * c + dc) as u32;
                        edges.push((parent, child));
                    }
                }
            }
            Ok(edges)
        }
        Level::Main => {
            GridSpec::new(Level::Aux(coarse), height, width)?;
            let mut edges = Vec::with_capacity(height * width);
            for h in 0..height {
                for w in 0..width {
                    let parent = patch_index_unchecked(h, w, coarse, height, width) as u32;
                    edges.push((parent, (h * width + w) as u32));
                }
            }
            Ok(edges)
        }
    }
}

/// The assembled multi-level graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HierGraph {
    pub levels: u32,
    pub height: usize,
    pub width: usize,
    /// First global id of aux levels `1..=K`, then main, then the total.
    pub level_offsets: Vec<usize>,
    pub edges: Vec<(u32, u32)>,
    pub node_level: Vec<Level>,
    /// `(x, y)` position in pixel units of the frame.
    pub node_loc: Vec<[f64; 2]>,
}

impl HierGraph {
    pub fn node_count(&self) -> usize {
        *self.level_offsets.last().expect("offsets never empty")
    }

    /// Levels in global-id order.
    pub fn level_list(&self) -> Vec<Level> {
        (1..=self.levels)
            .map(Level::Aux)
            .chain(std::iter::once(Level::Main))
            .collect()
    }

    fn slot(&self, level: Level) -> usize {
        match level {
            Level::Aux(k) => {
                assert!(k >= 1 && k <= self.levels, "level {k} not in graph");
                (k - 1) as usize
            }
            Level::Main => self.levels as usize,
        }
    }

    pub fn level_range(&self, level: Level) -> Range<usize> {
        let s = self.slot(level);
        self.level_offsets[s]..self.level_offsets[s + 1]
    }

    pub fn level_size(&self, level: Level) -> usize {
        self.level_range(level).len()
    }

    pub fn main_locs(&self) -> &[[f64; 2]] {
        &self.node_loc[self.level_range(Level::Main)]
    }

    /// Edge-list dump: header `K H W total_nodes`, then one `u v` per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {} {} {}", self.levels, self.height, self.width, self.node_count())?;
        for &(u, v) in &self.edges {
            writeln!(out, "{u} {v}")?;
        }
        Ok(())
    }
}

/// Parsed form of [`HierGraph::write_edge_list`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeListDump {
    pub levels: u32,
    pub height: usize,
    pub width: usize,
    pub total_nodes: usize,
    pub edges: Vec<(u32, u32)>,
}

pub fn read_edge_list<R: BufRead>(input: R) -> Result<EdgeListDump> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Domain("empty edge list".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let bad = || Error::Domain(format!("bad edge-list header {header:?}"));
    if fields.len() != 4 {
        return Err(bad());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let mut dump = EdgeListDump {
        levels: num(fields[0])? as u32,
        height: num(fields[1])?,
        width: num(fields[2])?,
        total_nodes: num(fields[3])?,
        edges: Vec::new(),
    };
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<u32>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(v)), None) => dump.edges.push((u, v)),
            _ => return domain(format!("bad edge on line {}: {line:?}", i + 2)),
        }
    }
    Ok(dump)
}

/// Builds the full hierarchy for `levels` auxiliary grids over a
/// `height x width` frame.
pub fn assemble_hierarchy(levels: u32, height: usize, width: usize) -> Result<HierGraph> {
    check_level(levels)?;
    let side = 1usize << levels;
    if height < side || width < side {
        return domain(format!(
            "frame {height}x{width} smaller than finest grid {side}x{side} for K={levels}"
        ));
    }
    if height < 2 || width < 2 {
        return domain("frame must be at least 2x2");
    }

    let mut level_offsets = Vec::with_capacity(levels as usize + 2);
    let mut total = 0usize;
    for k in 1..=levels {
        level_offsets.push(total);
        total += 1usize << (2 * k);
    }
    level_offsets.push(total);
    total += height * width;
    level_offsets.push(total);

    let mut node_level = Vec::with_capacity(total);
    let mut node_loc = Vec::with_capacity(total);
    let mut edges = Vec::new();

    for k in 1..=levels {
        let off = level_offsets[(k - 1) as usize] as u32;
        let (n, local) = build_aux_graph(k)?;
        let s = 1usize << k;
        let ph = height as f64 / s as f64;
        let pw = width as f64 / s as f64;
        for j in 0..n {
            let (r, c) = (j / s, j % s);
            node_level.push(Level::Aux(k));
            node_loc.push([(c as f64 + 0.5) * pw, (r as f64 + 0.5) * ph]);
        }
        edges.extend(local.into_iter().map(|(u, v)| (u + off, v + off)));
    }
    let main_off = level_offsets[levels as usize] as u32;
    let (_, local) = build_main_graph(height, width)?;
    for h in 0..height {
        for w in 0..width {
            node_level.push(Level::Main);
            node_loc.push([w as f64, h as f64]);
        }
    }
    edges.extend(local.into_iter().map(|(u, v)| (u + main_off, v + main_off)));

    for k in 1..levels {
        let co = level_offsets[(k - 1) as usize] as u32;
        let fo = level_offsets[k as usize] as u32;
        let cross = build_interlevel_edges(k, Level::Aux(k + 1), height, width)?;
        edges.extend(cross.into_iter().map(|(u, v)| (u + co, v + fo)));
    }
    let ko = level_offsets[(levels - 1) as usize] as u32;
    let cross = build_interlevel_edges(levels, Level::Main, height, width)?;
    edges.extend(cross.into_iter().map(|(u, v)| (u + ko, v + main_off)));

    Ok(HierGraph {
        levels,
        height,
        width,
        level_offsets,
        edges,
        node_level,
        node_loc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn patch_index_examples() {
        assert_eq!(patch_index(0, 0, 2, 224, 224).unwrap(), 0);
        assert_eq!(patch_index(112, 112, 1, 224, 224).unwrap(), 3);
        assert_eq!(patch_index(223, 223, 7, 224, 224).unwrap(), 16383);
        assert!(patch_index(224, 0, 1, 224, 224).is_err());
        assert!(patch_index(0, 0, 0, 224, 224).is_err());
    }

    #[test]
    fn aux_graph_examples() {
        assert_eq!(build_aux_graph(1).unwrap().1.len(), 4);
        let (n, e) = build_aux_graph(3).unwrap();
        assert_eq!((n, e.len()), (64, 112));
        let (n, e) = build_aux_graph(7).unwrap();
        assert_eq!((n, e.len()), (16384, 32512));
        assert!(build_aux_graph(0).is_err());
    }

    #[test]
    fn aux_graph_matches_neighbour_enumeration() {
        // brute force: count ordered neighbour pairs, halve
        let m = 8i64;
        let mut directed = 0;
        for r in 0..m {
            for c in 0..m {
                for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..m).contains(&rr) && (0..m).contains(&cc) {
                        directed += 1;
                    }
                }
            }
        }
        assert_eq!(directed / 2, build_aux_graph(3).unwrap().1.len());
    }

    #[test]
    fn main_graph_examples() {
        assert_eq!(build_main_graph(2, 2).unwrap(), (4, vec![(0, 1), (0, 2), (1, 3), (2, 3)]));
        let (n, e) = build_main_graph(224, 224).unwrap();
        assert_eq!((n, e.len()), (50176, 99904));
        let (n, e) = build_main_graph(3, 2).unwrap();
        assert_eq!((n, e.len()), (6, 7));
        assert!(build_main_graph(0, 4).is_err());
        assert!(build_main_graph(1, 4).is_err());
    }

    #[test]
    fn interlevel_examples() {
        assert_eq!(build_interlevel_edges(1, Level::Aux(2), 8, 8).unwrap().len(), 16);
        assert_eq!(build_interlevel_edges(3, Level::Aux(4), 16, 16).unwrap().len(), 256);
        let e = build_interlevel_edges(7, Level::Main, 224, 224).unwrap();
        assert_eq!(e.len(), 50176);
        let children: HashSet<u32> = e.iter().map(|&(_, c)| c).collect();
        assert_eq!(children.len(), 50176);
        assert!(build_interlevel_edges(1, Level::Aux(3), 8, 8).is_err());
    }

    #[test]
    fn interlevel_reduces_to_quadrants_at_exact_size() {
        // H = W = 2^(K+1): every level-K node gets exactly four pixels
        let e = build_interlevel_edges(2, Level::Main, 8, 8).unwrap();
        let mut per_parent = [0; 16];
        for &(p, _) in &e {
            per_parent[p as usize] += 1;
        }
        assert!(per_parent.iter().all(|&n| n == 4));
    }

    #[test]
    fn assemble_examples() {
        let g = assemble_hierarchy(1, 2, 2).unwrap();
        assert_eq!(g.node_count(), 8);
        let main = g.level_range(Level::Main);
        let cross = g
            .edges
            .iter()
            .filter(|&&(u, v)| (u as usize) < main.start && main.contains(&(v as usize)))
            .count();
        assert_eq!(cross, 4);
        assert_eq!(assemble_hierarchy(2, 8, 8).unwrap().node_count(), 84);
        assert!(assemble_hierarchy(3, 4, 8).is_err());
    }

    #[test]
    fn node_locations() {
        let g = assemble_hierarchy(1, 4, 4).unwrap();
        assert_eq!(g.node_loc[0], [1.0, 1.0]);
        assert_eq!(g.node_loc[3], [3.0, 3.0]);
        let main = g.level_range(Level::Main);
        assert_eq!(g.node_loc[main.start + 2 * 4 + 3], [3.0, 2.0]);
    }

    #[test]
    fn degrees_of_intra_level_edges() {
        let (_, e) = build_main_graph(5, 6).unwrap();
        let mut deg = vec![0; 30];
        for (u, v) in e {
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        assert_eq!(deg[0], 2);
        assert_eq!(deg[1], 3);
        assert_eq!(deg[7], 4);
    }

    #[test]
    fn edge_list_round_trip() {
        let g = assemble_hierarchy(2, 8, 8).unwrap();
        let mut buf = Vec::new();
        g.write_edge_list(&mut buf).unwrap();
        let dump = read_edge_list(buf.as_slice()).unwrap();
        assert_eq!((dump.levels, dump.height, dump.width, dump.total_nodes), (2, 8, 8, 84));
        assert_eq!(dump.edges, g.edges);
    }
}
