//! Eight-neighbourhood seed-growing merge of post-NMS proposals.
//!
//! Proposals are visited best first. Each one projects its centre onto a coarse
//! occupancy grid. A free projection cell becomes a new seed that claims its free
//! 8-neighbours and fuses with any neighbouring seed whose rank is within
//! `neighbor_rank_gap`. A projection landing on an owned cell fuses into the owner
//! when the ranks are within `collision_rank_gap` and is dropped otherwise.
//! Fusion keeps the enclosing box, the better rank and the higher score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgpyr::{ImagePlane, ScaleSpec};
use crate::proposer::ScoredBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// T_s1: largest rank difference (exclusive) for fusing with a neighbouring seed.
    pub neighbor_rank_gap: usize,
    /// T_s2: largest rank difference (exclusive) for fusing a colliding proposal.
    pub collision_rank_gap: usize,
    /// Grid cell edge in pixels.
    pub cell_size: usize,
    /// Longest container the merge consumes.
    pub container_cap: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig { neighbor_rank_gap: 25, collision_rank_gap: 25, cell_size: 8, container_cap: 1100 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cell_size == 0 {
            return Err(Error::InvalidConfig("merge cell size must be at least 1".into()));
        }
        if self.container_cap == 0 {
            return Err(Error::InvalidConfig("merge container cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Occupancy grid; `None` is a free cell, `Some(id)` names the seed that claimed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedGrid {
    pub cols: usize,
    pub rows: usize,
    pub owner: Vec<Option<u32>>,
}

impl SeedGrid {
    pub fn get(&self, cx: usize, cy: usize) -> Option<u32> {
        self.owner[cy * self.cols + cx]
    }

    /// Free cells white, claimed cells black.
    pub fn to_plane(&self) -> Result<ImagePlane> {
        let data = self.owner.iter().map(|o| if o.is_some() { 0 } else { 255 }).collect();
        ImagePlane::new(self.cols, self.rows, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Seed {
    parent: u32,
    rank: usize,
    score: f64,
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    scale: ScaleSpec,
    cell: (u32, u32),
}

impl Seed {
    fn boxed(&self) -> ScoredBox {
        ScoredBox {
            x: self.x0,
            y: self.y0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
            score: self.score,
            scale: self.scale,
        }
    }
}

/// Final state of a merge pass.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub boxes: Vec<ScoredBox>,
    pub grid: SeedGrid,
    /// Projection cell of every seed that survived as a group root, with the group's rank.
    pub roots: Vec<((usize, usize), usize)>,
    /// Rank of every input proposal dropped by the collision rule.
    pub deleted: Vec<usize>,
    /// For each output box, the input ranks it encloses.
    pub members: Vec<Vec<usize>>,
}

const FREE: u32 = u32::MAX;

/// Reusable buffers for repeated merge passes.
#[derive(Debug, Default)]
pub struct Merger {
    /// Occupancy grids, one per layer, back to back.
    owner: Vec<u32>,
    dims: (usize, usize),
    seeds: Vec<Seed>,
    /// Seed each consumed proposal joined, by input position.
    landed: Vec<u32>,
    deleted: Vec<usize>,
    size: Vec<u32>,
}

fn find(seeds: &mut [Seed], mut id: u32) -> u32 {
    while seeds[id as usize].parent != id {
        let p = seeds[id as usize].parent;
        seeds[id as usize].parent = seeds[p as usize].parent;
        id = p;
    }
    id
}

fn absorb(s: &mut Seed, b: &ScoredBox, rank: usize) {
    s.x0 = s.x0.min(b.x);
    s.y0 = s.y0.min(b.y);
    s.x1 = s.x1.max(b.x + b.w);
    s.y1 = s.y1.max(b.y + b.h);
    s.score = s.score.max(b.score);
    s.rank = s.rank.min(rank);
}

/// Joins two roots and returns the better-ranked one, which stays root.
fn union(seeds: &mut [Seed], a: u32, b: u32) -> u32 {
    let (keep, gone) = if seeds[a as usize].rank <= seeds[b as usize].rank { (a, b) } else { (b, a) };
    let g = seeds[gone as usize];
    let k = &mut seeds[keep as usize];
    k.x0 = k.x0.min(g.x0);
    k.y0 = k.y0.min(g.y0);
    k.x1 = k.x1.max(g.x1);
    k.y1 = k.y1.max(g.y1);
    k.score = k.score.max(g.score);
    seeds[gone as usize].parent = keep;
    keep
}

impl Merger {
    pub fn new() -> Self {
        Self::default()
    }

    fn find(&mut self, id: u32) -> u32 {
        find(&mut self.seeds, id)
    }

    /// Runs the seed sweep over `v`. With `per_scale`, each scale gets its own grid and
    /// its own rank sequence; otherwise `v` is one sequence on one grid.
    fn sweep(&mut self, v: &[ScoredBox], per_scale: bool, cfg: &MergeConfig, img_w: usize, img_h: usize) {
        let cell = cfg.cell_size.max(1);
        let cols = img_w.max(1).div_ceil(cell);
        let rows = img_h.max(1).div_ceil(cell);
        let cells = cols * rows;
        self.dims = (cols, rows);
        let layers_hint = if per_scale {
            let mask = v.iter().fold(0u64, |m, b| m | 1u64 << ((b.scale.m as u32 & 7) << 3 | (b.scale.n as u32 & 7)));
            mask.count_ones() as usize
        } else {
            1
        };
        self.owner.clear();
        self.owner.resize(cells * layers_hint, FREE);
        self.seeds.clear();
        self.seeds.reserve(v.len());
        self.landed.clear();
        self.landed.resize(v.len(), FREE);
        self.deleted.clear();
        let shift = cell.is_power_of_two().then(|| cell.trailing_zeros());
        let cell_of = |v: usize| match shift {
            Some(k) => v >> k,
            None => v / cell,
        };
        let mut layer_of = [u32::MAX; 64];
        let mut layers: Vec<ScaleSpec> = Vec::new();
        let mut counts: Vec<usize> = vec![0];

        let Merger { owner, seeds, landed, deleted, .. } = self;
        for (i, b) in v.iter().enumerate() {
            let layer = if per_scale {
                let key = (b.scale.m < 8 && b.scale.n < 8).then(|| (b.scale.m as usize) << 3 | b.scale.n as usize);
                match key.map(|k| layer_of[k]).filter(|&l| l != u32::MAX) {
                    Some(l) => l as usize,
                    None => {
                        let l = layers.iter().position(|&s| s == b.scale).unwrap_or_else(|| {
                            layers.push(b.scale);
                            layers.len() - 1
                        });
                        if let Some(k) = key {
                            layer_of[k] = l as u32;
                        }
                        if counts.len() <= l {
                            counts.resize(l + 1, 0);
                        }
                        l
                    }
                }
            } else {
                0
            };
            let rank = counts[layer];
            counts[layer] += 1;
            if rank >= cfg.container_cap {
                continue;
            }
            let base = layer * cells;
            if owner.len() < base + cells {
                owner.resize(base + cells, FREE);
            }
            let grid = &mut owner[base..base + cells];
            let cx = cell_of(b.x as usize + b.w as usize / 2).min(cols - 1);
            let cy = cell_of(b.y as usize + b.h as usize / 2).min(rows - 1);
            let home = cy * cols + cx;
            if grid[home] != FREE {
                let root = find(seeds, grid[home]);
                grid[home] = root;
                let s = &mut seeds[root as usize];
                if rank - s.rank < cfg.collision_rank_gap {
                    absorb(s, b, rank);
                    landed[i] = root;
                } else {
                    deleted.push(i);
                }
                continue;
            }

            let id = seeds.len() as u32;
            seeds.push(Seed {
                parent: id,
                rank,
                score: b.score,
                x0: b.x,
                y0: b.y,
                x1: b.x + b.w,
                y1: b.y + b.h,
                scale: b.scale,
                cell: (cx as u32, cy as u32),
            });
            landed[i] = id;
            grid[home] = id;

            let interior = cx > 0 && cy > 0 && cx + 1 < cols && cy + 1 < rows;
            let mut mine = id;
            for (dx, dy) in NEIGHBOURS {
                let slot = if interior {
                    home.wrapping_add_signed(dy * cols as isize + dx)
                } else {
                    let (nx, ny) = (cx.wrapping_add_signed(dx), cy.wrapping_add_signed(dy));
                    if nx >= cols || ny >= rows {
                        continue;
                    }
                    ny * cols + nx
                };
                let other = grid[slot];
                if other == FREE {
                    grid[slot] = id;
                    continue;
                }
                let theirs = find(seeds, other);
                if mine == theirs {
                    continue;
                }
                if seeds[mine as usize].rank.abs_diff(seeds[theirs as usize].rank) < cfg.neighbor_rank_gap {
                    mine = union(seeds, mine, theirs);
                }
            }
        }
    }

    /// Merges `v`, appending the fused and surviving boxes (best first) to `merged` and
    /// the ranks, ascending, of every input that does not appear unchanged in the
    /// output to `displaced`: members of fused groups, collision losses and entries
    /// past the cap.
    pub fn split(
        &mut self,
        v: &[ScoredBox],
        cfg: &MergeConfig,
        img_w: usize,
        img_h: usize,
        merged: &mut Vec<ScoredBox>,
        displaced: &mut Vec<usize>,
    ) {
        self.sweep(v, false, cfg, img_w, img_h);
        self.finish(v, merged, |i| displaced.push(i));
    }

    /// [`Merger::split`] run separately on each scale's subsequence of `v`. Output boxes
    /// are grouped by the order scales first appear, and `displaced[i]` is set for
    /// every displaced input `v[i]`.
    pub fn split_by_scale(
        &mut self,
        v: &[ScoredBox],
        cfg: &MergeConfig,
        img_w: usize,
        img_h: usize,
        merged: &mut Vec<ScoredBox>,
        displaced: &mut [bool],
    ) {
        self.sweep(v, true, cfg, img_w, img_h);
        self.finish(v, merged, |i| displaced[i] = true);
    }

    fn finish(&mut self, v: &[ScoredBox], merged: &mut Vec<ScoredBox>, mut displace: impl FnMut(usize)) {
        self.size.clear();
        self.size.resize(self.seeds.len(), 0);
        for i in 0..self.landed.len() {
            let id = self.landed[i];
            if id != FREE {
                let root = self.find(id);
                self.landed[i] = root;
                self.size[root as usize] += 1;
            }
        }
        // A group's score comes from its best-ranked member, so root order is score order
        // within a scale.
        merged.extend(self.seeds.iter().enumerate().filter(|(id, s)| s.parent == *id as u32).map(|(_, s)| s.boxed()));
        for (i, b) in v.iter().enumerate() {
            let root = self.landed[i];
            let gone = root == FREE || {
                let s = &self.seeds[root as usize];
                self.size[root as usize] > 1 && (s.x0, s.y0, s.x1, s.y1) != (b.x, b.y, b.x + b.w, b.y + b.h)
            };
            if gone {
                displace(i);
            }
        }
    }
}

/// Merges `v` (rank ordered, best first) and returns the fused and surviving boxes, best first.
///
/// Only the first `cfg.container_cap` entries are consumed.
pub fn merge_boxes(v: &[ScoredBox], cfg: &MergeConfig, img_w: usize, img_h: usize) -> Vec<ScoredBox> {
    merge_detailed(v, cfg, img_w, img_h).boxes
}

/// [`Merger::split`] with fresh buffers.
pub fn merge_split(v: &[ScoredBox], cfg: &MergeConfig, img_w: usize, img_h: usize) -> (Vec<ScoredBox>, Vec<usize>) {
    let (mut merged, mut displaced) = (Vec::new(), Vec::new());
    Merger::new().split(v, cfg, img_w, img_h, &mut merged, &mut displaced);
    (merged, displaced)
}

pub fn merge_detailed(v: &[ScoredBox], cfg: &MergeConfig, img_w: usize, img_h: usize) -> MergeOutcome {
    let mut m = Merger::new();
    m.sweep(v, false, cfg, img_w, img_h);
    let grid = SeedGrid {
        cols: m.dims.0,
        rows: m.dims.1,
        owner: m.owner[..m.dims.0 * m.dims.1].iter().map(|&o| (o != FREE).then_some(o)).collect(),
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); m.seeds.len()];
    for rank in 0..m.landed.len() {
        let id = m.landed[rank];
        if id != FREE {
            let root = m.find(id);
            members[root as usize].push(rank);
        }
    }
    let mut boxes = Vec::new();
    let mut roots = Vec::new();
    let mut groups = Vec::new();
    for (id, s) in m.seeds.iter().enumerate() {
        if s.parent == id as u32 {
            boxes.push(s.boxed());
            roots.push(((s.cell.0 as usize, s.cell.1 as usize), s.rank));
            groups.push(std::mem::take(&mut members[id]));
        }
    }
    MergeOutcome { boxes, grid, roots, deleted: std::mem::take(&mut m.deleted), members: groups }
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];
