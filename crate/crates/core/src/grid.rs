//! Patch grids, the padded spatial embedding memory and neighbour masks.
//!
//! Grid coordinates follow the slide: `i` is the column (x) and `j` the row
//! (y). A slide's block in the bank spans `(n_x + 2k) x (n_y + 2k)` cells and
//! the outer ring of width `k` is never written, so every `(2k+1)^2` window
//! around an in-grid patch stays inside the block.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_exact_array, read_u16, read_u32};
use crate::ndiff::Array;

pub const BANK_MAGIC: &[u8; 4] = b"VVMB";
pub const BANK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideGrid {
    pub slide_id: String,
    pub n_x: usize,
    pub n_y: usize,
    /// Patch edge length in pixels.
    pub patch_px: usize,
    pub classes: usize,
    /// Downsampling factor the patches were extracted at (metadata only).
    pub downsample: u32,
}

impl SlideGrid {
    pub fn new(
        slide_id: impl Into<String>,
        n_x: usize,
        n_y: usize,
        patch_px: usize,
        classes: usize,
    ) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(Error::invalid(format!("patch grid {n_x}x{n_y} is empty")));
        }
        if patch_px < 8 {
            return Err(Error::invalid(format!(
                "patch size {patch_px} px is below 8"
            )));
        }
        Ok(SlideGrid {
            slide_id: slide_id.into(),
            n_x,
            n_y,
            patch_px,
            classes,
            downsample: 1,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.n_x * self.n_y
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n_x && j < self.n_y
    }

    /// Row-major `(j, i)` enumeration of all patch positions.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_y).flat_map(move |j| (0..self.n_x).map(move |i| (i, j)))
    }
}

/// Number of cells in a `(2k+1) x (2k+1)` neighbourhood.
pub fn neighbourhood_len(k: usize) -> usize {
    (2 * k + 1) * (2 * k + 1)
}

/// Relative offset `(x, y)` of flattened neighbourhood index `t`
/// (row-major over the x offset, then y).
pub fn offset_of(t: usize, k: usize) -> (isize, isize) {
    let side = 2 * k + 1;
    (
        (t / side) as isize - k as isize,
        (t % side) as isize - k as isize,
    )
}

/// Flattened neighbourhood index of relative offset `(x, y)`.
pub fn index_of(x: isize, y: isize, k: usize) -> usize {
    let side = 2 * k + 1;
    (x + k as isize) as usize * side + (y + k as isize) as usize
}

#[derive(Clone, Debug)]
struct SlideBlock {
    grid: SlideGrid,
    occupied: Vec<bool>,
    data: Vec<f32>,
}

impl SlideBlock {
    fn extent(&self, k: usize) -> (usize, usize) {
        (self.grid.n_x + 2 * k, self.grid.n_y + 2 * k)
    }
}

/// Embeddings of a `(2k+1)^2` window plus its neighbour mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodView {
    pub k: usize,
    pub dim: usize,
    /// `(2k+1)^2 x dim`, row `t` belongs to offset [`offset_of`]`(t, k)`.
    pub embeddings: Vec<f32>,
    pub mask: Vec<bool>,
}

impl NeighborhoodView {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn centre(&self) -> usize {
        self.mask.len() / 2
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.embeddings[t * self.dim..(t + 1) * self.dim]
    }

    pub fn attended(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Spatial memory of patch embeddings for a set of slides.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    k: usize,
    dim: usize,
    slides: Vec<SlideBlock>,
    index: HashMap<String, usize>,
}

impl MemoryBank {
    /// Allocates an empty, fully unoccupied bank.
    pub fn new(slides: &[SlideGrid], k: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        let mut index = HashMap::new();
        let mut blocks = Vec::with_capacity(slides.len());
        for (n, grid) in slides.iter().enumerate() {
            if index.insert(grid.slide_id.clone(), n).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate slide id `{}`",
                    grid.slide_id
                )));
            }
            let cells = (grid.n_x + 2 * k) * (grid.n_y + 2 * k);
            blocks.push(SlideBlock {
                grid: grid.clone(),
                occupied: vec![false; cells],
                data: vec![0.0; cells * dim],
            });
        }
        Ok(MemoryBank {
            k,
            dim,
            slides: blocks,
            index,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_slides(&self) -> usize {
        self.slides.len()
    }

    pub fn slide_index(&self, slide_id: &str) -> Result<usize> {
        self.index
            .get(slide_id)
            .copied()
            .ok_or_else(|| Error::UnknownSlide(slide_id.to_string()))
    }

    pub fn grid(&self, slide: usize) -> &SlideGrid {
        &self.slides[slide].grid
    }

    /// Padded `(n_x + 2k, n_y + 2k)` extent of a slide's block.
    pub fn extent(&self, slide: usize) -> (usize, usize) {
        self.slides[slide].extent(self.k)
    }

    pub fn occupied_count(&self) -> usize {
        self.slides
            .iter()
            .map(|s| s.occupied.iter().filter(|&&o| o).count())
            .sum()
    }

    fn cell(&self, slide: usize, px: usize, py: usize) -> usize {
        let (_, ey) = self.extent(slide);
        px * ey + py
    }

    /// Whether padded cell `(px, py)` holds an embedding.
    pub fn is_occupied_padded(&self, slide: usize, px: usize, py: usize) -> bool {
        self.slides[slide].occupied[self.cell(slide, px, py)]
    }

    pub fn is_occupied(&self, slide: usize, i: usize, j: usize) -> bool {
        self.is_occupied_padded(slide, i + self.k, j + self.k)
    }

    /// Stored embedding at in-grid position `(i, j)`.
    pub fn embedding(&self, slide: usize, i: usize, j: usize) -> &[f32] {
        let c = self.cell(slide, i + self.k, j + self.k);
        &self.slides[slide].data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn insert(&mut self, slide_id: &str, i: usize, j: usize, e: &[f32]) -> Result<()> {
        let slide = self.slide_index(slide_id)?;
        self.insert_at(slide, i, j, e)
    }

    /// Writes `e` at `(i, j)`; a later insert at the same cell overwrites.
    pub fn insert_at(&mut self, slide: usize, i: usize, j: usize, e: &[f32]) -> Result<()> {
        let (k, dim) = (self.k, self.dim);
        let mut writer = SlideWriter {
            k,
            dim,
            block: &mut self.slides[slide],
        };
        writer.insert(i, j, e)
    }

    /// One exclusive writer per slide block, for filling slides in parallel.
    pub fn writers(&mut self) -> Vec<SlideWriter<'_>> {
        let (k, dim) = (self.k, self.dim);
        self.slides
            .iter_mut()
            .map(|block| SlideWriter { k, dim, block })
            .collect()
    }

    pub fn neighbor_mask(&self, slide_id: &str, i: usize, j: usize) -> Result<Vec<bool>> {
        let slide = self.slide_index(slide_id)?;
        self.mask_at(slide, i, j)
    }

    /// Neighbour mask of `(i, j)`: true where the neighbour exists in memory,
    /// always false at the centre.
    pub fn mask_at(&self, slide: usize, i: usize, j: usize) -> Result<Vec<bool>> {
        self.check_in_grid(slide, i, j)?;
        let k = self.k;
        let n = neighbourhood_len(k);
        let centre = n / 2;
        let (ey, occ) = (self.extent(slide).1, &self.slides[slide].occupied);
        // Window starts at padded (i, j) because of the k-wide padding.
        Ok((0..n)
            .map(|t| {
                let side = 2 * k + 1;
                let (px, py) = (i + t / side, j + t % side);
                t != centre && occ[px * ey + py]
            })
            .collect())
    }

    pub fn retrieve(&self, slide_id: &str, i: usize, j: usize) -> Result<NeighborhoodView> {
        let slide = self.slide_index(slide_id)?;
        self.retrieve_at(slide, i, j)
    }

    /// Copies the window around `(i, j)` out of the bank. Masked rows are zero.
    pub fn retrieve_at(&self, slide: usize, i: usize, j: usize) -> Result<NeighborhoodView> {
        let mask = self.mask_at(slide, i, j)?;
        let mut embeddings = vec![0.0f32; mask.len() * self.dim];
        self.copy_window(slide, i, j, &mask, &mut embeddings);
        Ok(NeighborhoodView {
            k: self.k,
            dim: self.dim,
            embeddings,
            mask,
        })
    }

    fn copy_window(&self, slide: usize, i: usize, j: usize, mask: &[bool], out: &mut [f32]) {
        let (side, dim) = (2 * self.k + 1, self.dim);
        let ey = self.extent(slide).1;
        let data = &self.slides[slide].data;
        for (t, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let c = (i + t / side) * ey + j + t % side;
            out[t * dim..(t + 1) * dim].copy_from_slice(&data[c * dim..(c + 1) * dim]);
        }
    }

    /// Batched retrieval: `[B, (2k+1)^2, D]` embeddings and a `B * (2k+1)^2`
    /// mask, in request order. Requests may mix slides.
    pub fn gather(&self, requests: &[(usize, usize, usize)]) -> Result<(Array<f32>, Vec<bool>)> {
        let n = neighbourhood_len(self.k);
        let mut data = vec![0.0f32; requests.len() * n * self.dim];
        let mut masks = Vec::with_capacity(requests.len() * n);
        for (b, &(slide, i, j)) in requests.iter().enumerate() {
            let mask = self.mask_at(slide, i, j)?;
            self.copy_window(
                slide,
                i,
                j,
                &mask,
                &mut data[b * n * self.dim..(b + 1) * n * self.dim],
            );
            masks.extend(mask);
        }
        Ok((
            Array::from_vec(&[requests.len(), n, self.dim], data)?,
            masks,
        ))
    }

    fn check_in_grid(&self, slide: usize, i: usize, j: usize) -> Result<()> {
        let g = &self.slides[slide].grid;
        if !g.contains(i, j) {
            return Err(Error::OutOfGrid {
                i,
                j,
                n_x: g.n_x,
                n_y: g.n_y,
            });
        }
        Ok(())
    }

    /// FNV-1a over occupancy and embedding bits of every block.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for block in &self.slides {
            for &o in &block.occupied {
                feed(o as u8);
            }
            for v in &block.data {
                v.to_bits().to_le_bytes().into_iter().for_each(&mut feed);
            }
        }
        h
    }

    pub fn write_snapshot(&self, mut w: impl Write) -> Result<()> {
        w.write_all(BANK_MAGIC)?;
        w.write_all(&BANK_VERSION.to_le_bytes())?;
        w.write_all(&(self.slides.len() as u32).to_le_bytes())?;
        for block in &self.slides {
            let id = block.grid.slide_id.as_bytes();
            let len = u16::try_from(id.len()).map_err(|_| {
                Error::Format(format!("slide id too long: {}", block.grid.slide_id))
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(id)?;
            for v in [block.grid.n_x, block.grid.n_y, self.k, self.dim] {
                w.write_all(&(v as u32).to_le_bytes())?;
            }
            let mut bits = vec![0u8; block.occupied.len().div_ceil(8)];
            for (n, &o) in block.occupied.iter().enumerate() {
                if o {
                    bits[n / 8] |= 1 << (n % 8);
                }
            }
            w.write_all(&bits)?;
            let mut buf = Vec::with_capacity(block.data.len() * 4);
            for v in &block.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a snapshot. Grid metadata other than the extents is not stored,
    /// so the returned slide grids carry placeholder patch size and classes.
    pub fn read_snapshot(mut r: impl Read) -> Result<Self> {
        let magic: [u8; 4] = read_exact_array(&mut r)?;
        if &magic != BANK_MAGIC {
            return Err(Error::Format(format!("bad bank magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut grids = Vec::with_capacity(count);
        let mut payload = Vec::with_capacity(count);
        let mut shape: Option<(usize, usize)> = None;
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id =
                String::from_utf8(id).map_err(|_| Error::Format("slide id is not UTF-8".into()))?;
            let n_x = read_u32(&mut r)? as usize;
            let n_y = read_u32(&mut r)? as usize;
            let k = read_u32(&mut r)? as usize;
            let dim = read_u32(&mut r)? as usize;
            match shape {
                Some(s) if s != (k, dim) => {
                    return Err(Error::Format("slides disagree on k or D".into()));
                }
                _ => shape = Some((k, dim)),
            }
            let cells = (n_x + 2 * k) * (n_y + 2 * k);
            let mut bits = vec![0u8; cells.div_ceil(8)];
            r.read_exact(&mut bits)?;
            let occupied = (0..cells)
                .map(|n| bits[n / 8] >> (n % 8) & 1 == 1)
                .collect();
            let mut raw = vec![0u8; cells * dim * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            grids.push(SlideGrid {
                slide_id: id,
                n_x,
                n_y,
                patch_px: 8,
                classes: 0,
                downsample: 1,
            });
            payload.push((occupied, data));
        }
        let (k, dim) = shape.unwrap_or((0, 1));
        let mut bank = MemoryBank::new(&grids, k, dim)?;
        for (block, (occupied, data)) in bank.slides.iter_mut().zip(payload) {
            block.occupied = occupied;
            block.data = data;
        }
        Ok(bank)
    }
}

/// Exclusive write access to one slide's block.
pub struct SlideWriter<'a> {
    k: usize,
    dim: usize,
    block: &'a mut SlideBlock,
}

impl SlideWriter<'_> {
    pub fn grid(&self) -> &SlideGrid {
        &self.block.grid
    }

    pub fn insert(&mut self, i: usize, j: usize, e: &[f32]) -> Result<()> {
        let g = &self.block.grid;
        if !g.contains(i, j) {
            return Err(Error::OutOfGrid {
                i,
                j,
                n_x: g.n_x,
                n_y: g.n_y,
            });
        }
        if e.len() != self.dim {
            return Err(Error::shape(
                "insert",
                format!("embedding of length {} for D = {}", e.len(), self.dim),
            ));
        }
        let ey = g.n_y + 2 * self.k;
        let c = (i + self.k) * ey + j + self.k;
        self.block.occupied[c] = true;
        self.block.data[c * self.dim..(c + 1) * self.dim].copy_from_slice(e);
        Ok(())
    }
}

/// Bytes needed for a bank of `num_slides` equally sized slides in f32.
pub fn memory_bytes(num_slides: u64, n_x: u64, n_y: u64, k: u64, dim: u64) -> u64 {
    num_slides * (2 * k + n_x) * (2 * k + n_y) * dim * 4
}

/// `"<bytes> bytes (<x.xx> GiB)"`.
pub fn format_memory(bytes: u64) -> String {
    format!(
        "{bytes} bytes ({:.2} GiB)",
        bytes as f64 / (1u64 << 30) as f64
    )
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn grid(id: &str, n_x: usize, n_y: usize) -> SlideGrid {
        SlideGrid::new(id, n_x, n_y, 32, 4).unwrap()
    }

    fn fill_all(bank: &mut MemoryBank, slide: usize) {
        let g = bank.grid(slide).clone();
        let dim = bank.dim();
        for (i, j) in g.positions() {
            let e: Vec<f32> = (0..dim).map(|d| (i * 100 + j * 10 + d) as f32).collect();
            bank.insert_at(slide, i, j, &e).unwrap();
        }
    }

    /// Direct transcription of the neighbour indicator: 1 iff the neighbour
    /// lies in the grid, has an embedding, and is not the centre.
    fn oracle_mask(
        occ: &[Vec<bool>],
        n_x: usize,
        n_y: usize,
        i: usize,
        j: usize,
        k: usize,
    ) -> Vec<bool> {
        let mut out = Vec::new();
        for di in -(k as isize)..=k as isize {
            for dj in -(k as isize)..=k as isize {
                let (ii, jj) = (i as isize + di, j as isize + dj);
                let exists = ii >= 0
                    && jj >= 0
                    && (ii as usize) < n_x
                    && (jj as usize) < n_y
                    && occ[ii as usize][jj as usize];
                out.push(exists && (di, dj) != (0, 0));
            }
        }
        out
    }

    #[test]
    fn build_pads_by_k() {
        let bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 8).unwrap();
        assert_eq!(bank.extent(0), (6, 6));
        assert_eq!(bank.occupied_count(), 0);
        let bank = MemoryBank::new(&[grid("a", 4, 5)], 0, 8).unwrap();
        assert_eq!(bank.extent(0), (4, 5));
        let bank = MemoryBank::new(&[grid("a", 4, 4), grid("b", 7, 3)], 2, 3).unwrap();
        assert_eq!(bank.extent(0), (8, 8));
        assert_eq!(bank.extent(1), (11, 7));
    }

    #[test]
    fn insert_then_read_back_and_overwrite() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 3).unwrap();
        bank.insert("a", 2, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bank.embedding(0, 2, 1), &[1.0, 2.0, 3.0]);
        bank.insert("a", 2, 1, &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(bank.embedding(0, 2, 1), &[4.0, 5.0, 6.0]);
        assert_eq!(bank.occupied_count(), 1);
    }

    #[test]
    fn insert_rejects_out_of_grid_and_bad_length() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 3).unwrap();
        assert!(matches!(
            bank.insert("a", 4, 0, &[0.0; 3]),
            Err(Error::OutOfGrid { .. })
        ));
        assert!(matches!(
            bank.insert("a", 0, 4, &[0.0; 3]),
            Err(Error::OutOfGrid { .. })
        ));
        assert!(matches!(
            bank.insert("a", 0, 0, &[0.0; 2]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            bank.insert("zz", 0, 0, &[0.0; 3]),
            Err(Error::UnknownSlide(_))
        ));
    }

    #[test]
    fn corner_mask_of_full_grid() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 2).unwrap();
        fill_all(&mut bank, 0);
        let mask = bank.neighbor_mask("a", 0, 0).unwrap();
        let expected = [false, false, false, false, false, true, false, true, true];
        assert_eq!(mask, expected);
    }

    #[test]
    fn interior_mask_of_full_grid() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 2).unwrap();
        fill_all(&mut bank, 0);
        let mask = bank.neighbor_mask("a", 1, 2).unwrap();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 8);
        assert!(!mask[4]);
    }

    #[test]
    fn mask_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (n_x, n_y) = (rng.gen_range(1..=9), rng.gen_range(1..=9));
            let k = rng.gen_range(1..=3);
            let density = rng.gen_range(0.0..1.0);
            let occ: Vec<Vec<bool>> = (0..n_x)
                .map(|_| (0..n_y).map(|_| rng.gen_bool(density)).collect())
                .collect();
            let mut bank = MemoryBank::new(&[grid("s", n_x, n_y)], k, 1).unwrap();
            for i in 0..n_x {
                for j in 0..n_y {
                    if occ[i][j] {
                        bank.insert_at(0, i, j, &[1.0]).unwrap();
                    }
                }
            }
            for i in 0..n_x {
                for j in 0..n_y {
                    assert_eq!(
                        bank.mask_at(0, i, j).unwrap(),
                        oracle_mask(&occ, n_x, n_y, i, j, k)
                    );
                }
            }
        }
    }

    #[test]
    fn retrieve_full_neighbourhood() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4)], 1, 3).unwrap();
        fill_all(&mut bank, 0);
        let view = bank.retrieve("a", 1, 1).unwrap();
        assert_eq!(view.len(), 9);
        assert!(!view.mask[view.centre()]);
        for t in 0..9 {
            let (dx, dy) = offset_of(t, 1);
            if t == view.centre() {
                assert!(view.row(t).iter().all(|&v| v == 0.0));
                continue;
            }
            let (i, j) = ((1 + dx) as usize, (1 + dy) as usize);
            assert_eq!(view.row(t), bank.embedding(0, i, j));
        }
    }

    #[test]
    fn empty_bank_gives_empty_mask() {
        let bank = MemoryBank::new(&[grid("a", 3, 5)], 2, 4).unwrap();
        for (i, j) in bank.grid(0).clone().positions() {
            let view = bank.retrieve_at(0, i, j).unwrap();
            assert_eq!(view.attended(), 0);
            assert!(view.embeddings.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn retrieval_sweep_stays_in_bounds_and_is_read_only() {
        for k in 0..4 {
            let mut bank = MemoryBank::new(&[grid("a", 5, 3), grid("b", 2, 6)], k, 2).unwrap();
            fill_all(&mut bank, 0);
            fill_all(&mut bank, 1);
            let before = bank.checksum();
            for slide in 0..2 {
                let (ex, ey) = bank.extent(slide);
                for (i, j) in bank.grid(slide).clone().positions() {
                    // Every window cell lies inside the padded block.
                    assert!(i + 2 * k < ex && j + 2 * k < ey);
                    let view = bank.retrieve_at(slide, i, j).unwrap();
                    for t in 0..view.len() {
                        let (dx, dy) = offset_of(t, k);
                        let (ii, jj) = (i as isize + dx, j as isize + dy);
                        let inside = ii >= 0
                            && jj >= 0
                            && (ii as usize) < bank.grid(slide).n_x
                            && (jj as usize) < bank.grid(slide).n_y;
                        if view.mask[t] {
                            assert!(inside);
                        }
                        assert_eq!(view.mask[t], inside && (dx, dy) != (0, 0));
                    }
                }
            }
            assert_eq!(bank.checksum(), before);
        }
    }

    #[test]
    fn padding_ring_is_never_occupied() {
        let mut bank = MemoryBank::new(&[grid("a", 3, 4)], 2, 1).unwrap();
        fill_all(&mut bank, 0);
        let (ex, ey) = bank.extent(0);
        for px in 0..ex {
            for py in 0..ey {
                let interior = (2..5).contains(&px) && (2..6).contains(&py);
                assert_eq!(bank.is_occupied_padded(0, px, py), interior);
            }
        }
    }

    #[test]
    fn gather_matches_single_retrievals() {
        let mut bank = MemoryBank::new(&[grid("a", 4, 4), grid("b", 3, 3)], 1, 2).unwrap();
        fill_all(&mut bank, 0);
        bank.insert_at(1, 0, 0, &[7.0, 8.0]).unwrap();
        let requests = [(0, 0, 0), (1, 1, 1), (0, 3, 2)];
        let (emb, mask) = bank.gather(&requests).unwrap();
        assert_eq!(emb.shape(), &[3, 9, 2]);
        for (b, &(s, i, j)) in requests.iter().enumerate() {
            let view = bank.retrieve_at(s, i, j).unwrap();
            assert_eq!(
                &emb.data()[b * 18..(b + 1) * 18],
                view.embeddings.as_slice()
            );
            assert_eq!(&mask[b * 9..(b + 1) * 9], view.mask.as_slice());
        }
    }

    #[test]
    fn memory_bytes_examples() {
        assert_eq!(memory_bytes(112, 65, 36, 8, 1024), 1_932_263_424);
        assert_eq!(format_memory(1_932_263_424), "1932263424 bytes (1.80 GiB)");
        assert_eq!(memory_bytes(1, 1, 1, 0, 1), 4);
        assert_eq!(memory_bytes(5, 10, 10, 2, 64), 250_880);
        assert_eq!(memory_bytes(0, 0, 0, 0, 0), 0);
    }

    #[test]
    fn bank_snapshot_round_trip() {
        let mut bank = MemoryBank::new(&[grid("s0", 3, 2), grid("s1", 2, 2)], 1, 3).unwrap();
        fill_all(&mut bank, 0);
        bank.insert_at(1, 1, 0, &[0.5, -1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        bank.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VVMB");
        let back = MemoryBank::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), bank.checksum());
        assert_eq!(back.slide_index("s1").unwrap(), 1);
        assert_eq!(back.extent(0), (5, 4));
    }

    proptest! {
        #[test]
        fn zeroing_masked_rows_keeps_mask(
            n_x in 1usize..7, n_y in 1usize..7, k in 0usize..3, bits in proptest::collection::vec(any::<bool>(), 36),
        ) {
            let mut bank = MemoryBank::new(&[grid("p", n_x, n_y)], k, 2).unwrap();
            for i in 0..n_x {
                for j in 0..n_y {
                    if bits[i * 6 + j] {
                        bank.insert_at(0, i, j, &[1.0, -1.0]).unwrap();
                    }
                }
            }
            for i in 0..n_x {
                for j in 0..n_y {
                    let view = bank.retrieve_at(0, i, j).unwrap();
                    let expected = bits_count(&bits, n_x, n_y, i, j, k);
                    prop_assert_eq!(view.attended(), expected);
                    prop_assert!(!view.mask[view.centre()]);
                    for t in 0..view.len() {
                        if !view.mask[t] {
                            prop_assert!(view.row(t).iter().all(|&v| v == 0.0));
                        }
                    }
                    prop_assert_eq!(bank.mask_at(0, i, j).unwrap(), view.mask);
                }
            }
        }
    }

    fn bits_count(bits: &[bool], n_x: usize, n_y: usize, i: usize, j: usize, k: usize) -> usize {
        let mut n = 0;
        for ii in i.saturating_sub(k)..(i + k + 1).min(n_x) {
            for jj in j.saturating_sub(k)..(j + k + 1).min(n_y) {
                if (ii, jj) != (i, j) && bits[ii * 6 + jj] {
                    n += 1;
                }
            }
        }
        n
    }
}
