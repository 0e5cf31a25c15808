//! Procedural tiled slides whose A/B labels can only be told apart from
//! context.
//!
//! A slide is a jittered-grid Voronoi partition into macro regions. Each
//! region is stroma, A-tissue or B-tissue. A and B pixels are painted from one
//! shared tissue texture field, so locally they are indistinguishable; the
//! only difference is that marker blobs are painted inside A regions.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SlideGrid;
use crate::io::{read_exact_array, read_u32};

pub const STROMA: u8 = 0;
pub const TISSUE_A: u8 = 1;
pub const TISSUE_B: u8 = 2;
pub const MARKER: u8 = 3;
pub const NUM_CLASSES: usize = 4;

pub const IMAGE_MAGIC: &[u8; 4] = b"VVIM";
pub const LABEL_MAGIC: &[u8; 4] = b"VVLB";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Stroma,
    A,
    B,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Region seeds are jittered on a `region_grid x region_grid` lattice.
    pub region_grid: usize,
    /// Share of regions that are stroma; the rest split evenly into A and B.
    pub stroma_fraction: f64,
    /// Width in pixels of the stroma band between neighbouring tissue regions.
    pub band_px: f64,
    /// Probability that an A-region patch seeds a marker blob.
    pub marker_rate: f64,
    pub marker_radius: [f64; 2],
    /// Amplitude in pixels of the noise warp applied to region boundaries.
    pub warp_px: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            region_grid: 3,
            stroma_fraction: 0.2,
            band_px: 4.0,
            marker_rate: 0.15,
            marker_radius: [4.0, 7.0],
            warp_px: 6.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.region_grid == 0 {
            return Err(Error::invalid("synthetic slides need at least one region"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.stroma_fraction) || !unit(self.marker_rate) {
            return Err(Error::invalid(
                "stroma_fraction and marker_rate must lie in [0, 1]",
            ));
        }
        let [lo, hi] = self.marker_radius;
        if !(lo > 0.0 && hi >= lo) || self.band_px < 0.0 || self.warp_px < 0.0 {
            return Err(Error::invalid(
                "marker radius, band and warp sizes must be non-negative and ordered",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One generated slide. Pixel arrays are row-major over `(y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlide {
    pub grid: SlideGrid,
    /// `height x width x 3` RGB.
    pub image: Vec<u8>,
    pub labels: Vec<u8>,
    /// Region id per pixel; empty for slides loaded from disk.
    pub regions: Vec<u16>,
    pub region_kinds: Vec<RegionKind>,
}

impl SynthSlide {
    pub fn width(&self) -> usize {
        self.grid.n_x * self.grid.patch_px
    }

    pub fn height(&self) -> usize {
        self.grid.n_y * self.grid.patch_px
    }

    pub fn region_at(&self, x: usize, y: usize) -> Option<RegionKind> {
        let r = *self.regions.get(y * self.width() + x)?;
        Some(self.region_kinds[r as usize])
    }

    /// Region kind under the centre pixel of patch `(i, j)`.
    pub fn region_of_patch(&self, i: usize, j: usize) -> Option<RegionKind> {
        let s = self.grid.patch_px;
        self.region_at(i * s + s / 2, j * s + s / 2)
    }

    /// Labels of patch `(i, j)`, `S x S` row-major.
    pub fn patch_labels(&self, i: usize, j: usize) -> Vec<u8> {
        let s = self.grid.patch_px;
        let w = self.width();
        let mut out = Vec::with_capacity(s * s);
        for y in j * s..(j + 1) * s {
            out.extend_from_slice(&self.labels[y * w + i * s..y * w + (i + 1) * s]);
        }
        out
    }

    /// Patch `(i, j)` as channel-first `3 x S x S` values in `[0, 1]`,
    /// appended to `out`.
    pub fn patch_chw_into(&self, i: usize, j: usize, out: &mut Vec<f32>) {
        let s = self.grid.patch_px;
        let w = self.width();
        for c in 0..3 {
            for y in j * s..(j + 1) * s {
                let row = &self.image[(y * w + i * s) * 3..(y * w + (i + 1) * s) * 3];
                out.extend(row.chunks_exact(3).map(|px| px[c] as f32 / 127.5 - 1.0));
            }
        }
    }
}

/// Normalized pixel counts per class.
pub fn class_ratio(labels: &[u8], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l as usize] += 1;
    }
    let n = labels.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn predominant(ratio: &[f64]) -> usize {
    let mut best = 0;
    for (c, &r) in ratio.iter().enumerate() {
        if r > ratio[best] {
            best = c;
        }
    }
    best
}

/// Smooth lattice noise in `[0, 1]`, periodic beyond the slide extent.
struct ValueNoise {
    cell: f64,
    nx: usize,
    ny: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let nx = (width as f64 / cell).ceil() as usize + 2;
        let ny = (height as f64 / cell).ceil() as usize + 2;
        ValueNoise {
            cell,
            nx,
            ny,
            values: (0..nx * ny).map(|_| rng.gen()).collect(),
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let v = |a: usize, b: usize| self.values[(b % self.ny) * self.nx + a % self.nx];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bottom = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Generates one slide; deterministic in `(seed, stream, params)`.
pub fn generate_slide(
    id: &str,
    seed: u64,
    stream: u64,
    n_x: usize,
    n_y: usize,
    patch_px: usize,
    params: &SynthParams,
) -> Result<SynthSlide> {
    params.validate()?;
    let grid = SlideGrid::new(id, n_x, n_y, patch_px, NUM_CLASSES)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (w, h) = (n_x * patch_px, n_y * patch_px);

    let g = params.region_grid;
    let (cw, ch) = (w as f64 / g as f64, h as f64 / g as f64);
    let mut seeds = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let x = (gx as f64 + rng.gen_range(0.15..0.85)) * cw;
            let y = (gy as f64 + rng.gen_range(0.15..0.85)) * ch;
            seeds.push((x, y));
        }
    }
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    order.shuffle(&mut rng);
    let n_stroma = (params.stroma_fraction * seeds.len() as f64).round() as usize;
    let mut kinds = vec![RegionKind::Stroma; seeds.len()];
    let tissue = &order[n_stroma.min(seeds.len())..];
    let first_a = rng.gen_bool(0.5);
    for (t, &r) in tissue.iter().enumerate() {
        kinds[r] = if (t % 2 == 0) == first_a {
            RegionKind::A
        } else {
            RegionKind::B
        };
    }

    let warp_x = ValueNoise::new(w, h, 48.0, &mut rng);
    let warp_y = ValueNoise::new(w, h, 48.0, &mut rng);
    let tissue_lo = ValueNoise::new(w, h, 24.0, &mut rng);
    let tissue_hi = ValueNoise::new(w, h, 5.0, &mut rng);
    let nuclei = ValueNoise::new(w, h, 2.5, &mut rng);
    let stroma_lo = ValueNoise::new(w, h, 20.0, &mut rng);
    let stroma_hi = ValueNoise::new(w, h, 3.0, &mut rng);
    let marker_tex = ValueNoise::new(w, h, 3.0, &mut rng);
    let fibre_angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);

    // Region and band membership per pixel.
    let mut region = vec![0u16; w * h];
    let mut labels = vec![STROMA; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let qx = px + (warp_x.at(px, py) - 0.5) * 2.0 * params.warp_px;
            let qy = py + (warp_y.at(px, py) - 0.5) * 2.0 * params.warp_px;
            let d2 = |s: &(f64, f64)| (qx - s.0).powi(2) + (qy - s.1).powi(2);
            let mut best = 0;
            for (r, s) in seeds.iter().enumerate() {
                if d2(s) < d2(&seeds[best]) {
                    best = r;
                }
            }
            // Distance to the nearest bisector towards another tissue region.
            let mut edge = f64::INFINITY;
            if kinds[best] != RegionKind::Stroma {
                let sb = seeds[best];
                for (r, s) in seeds.iter().enumerate() {
                    if r == best || kinds[r] == RegionKind::Stroma {
                        continue;
                    }
                    let sep = ((s.0 - sb.0).powi(2) + (s.1 - sb.1).powi(2)).sqrt();
                    edge = edge.min((d2(s) - d2(&sb)) / (2.0 * sep));
                }
            }
            region[y * w + x] = best as u16;
            labels[y * w + x] = match kinds[best] {
                RegionKind::Stroma => STROMA,
                _ if edge < params.band_px / 2.0 => STROMA,
                RegionKind::A => TISSUE_A,
                RegionKind::B => TISSUE_B,
            };
        }
    }

    // Marker blobs: seeded from A-region patches, painted on A pixels only.
    for j in 0..n_y {
        for i in 0..n_x {
            let centre = (j * patch_px + patch_px / 2) * w + i * patch_px + patch_px / 2;
            if kinds[region[centre] as usize] != RegionKind::A || !rng.gen_bool(params.marker_rate)
            {
                continue;
            }
            let cx = (i * patch_px) as f64 + rng.gen_range(0.0..patch_px as f64);
            let cy = (j * patch_px) as f64 + rng.gen_range(0.0..patch_px as f64);
            let r = rng.gen_range(params.marker_radius[0]..=params.marker_radius[1]);
            let (x0, x1) = (
                (cx - r).floor().max(0.0) as usize,
                ((cx + r).ceil() as usize).min(w),
            );
            let (y0, y1) = (
                (cy - r).floor().max(0.0) as usize,
                ((cy + r).ceil() as usize).min(h),
            );
            for y in y0..y1 {
                for x in x0..x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let wobble = 0.8 + 0.4 * marker_tex.at(x as f64 * 2.0, y as f64 * 2.0);
                    if dx * dx + dy * dy <= (r * wobble).powi(2) && labels[y * w + x] == TISSUE_A {
                        labels[y * w + x] = MARKER;
                    }
                }
            }
        }
    }

    let stroma_base = [0.93, 0.72, 0.80];
    let stroma_fibre = [0.85, 0.50, 0.65];
    let tissue_light = [0.72, 0.55, 0.80];
    let tissue_dark = [0.35, 0.20, 0.55];
    let marker_base = [0.45, 0.28, 0.12];
    let marker_dark = [0.25, 0.14, 0.05];
    let (ca, sa) = (fibre_angle.cos(), fibre_angle.sin());
    let mut image = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let c = match labels[y * w + x] {
                STROMA => {
                    let along = px * ca + py * sa + 6.0 * stroma_lo.at(px, py);
                    let fibre = 0.5 + 0.5 * (along * 0.9).sin();
                    let t = 0.55 * fibre * stroma_hi.at(px, py) + 0.25 * stroma_lo.at(px, py);
                    mix(stroma_base, stroma_fibre, t)
                }
                MARKER => mix(marker_base, marker_dark, marker_tex.at(px, py)),
                _ => {
                    let n = nuclei.at(px, py);
                    let dots = if n > 0.72 { (n - 0.72) / 0.28 } else { 0.0 };
                    let t = 0.45 * tissue_lo.at(px, py) + 0.35 * tissue_hi.at(px, py) + 0.6 * dots;
                    mix(tissue_light, tissue_dark, t.min(1.0))
                }
            };
            image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&rgb(c));
        }
    }

    Ok(SynthSlide {
        grid,
        image,
        labels,
        regions: region,
        region_kinds: kinds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideMeta {
    pub id: String,
    pub n_x: usize,
    pub n_y: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub seed: u64,
    pub patch_px: usize,
    pub classes: usize,
    pub params: SynthParams,
    pub slides: Vec<SlideMeta>,
}

/// Slide counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 8,
            val: 2,
            test: 2,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, idx: usize) -> Split {
        if idx < self.train {
            Split::Train
        } else if idx < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub slides: Vec<SynthSlide>,
}

impl Dataset {
    /// Slide `n` uses RNG stream `n` of `seed`.
    pub fn generate(
        seed: u64,
        splits: SplitSizes,
        n_x: usize,
        n_y: usize,
        patch_px: usize,
        params: &SynthParams,
    ) -> Result<Self> {
        if splits.total() == 0 {
            return Err(Error::invalid("dataset needs at least one slide"));
        }
        let mut slides = Vec::with_capacity(splits.total());
        let mut metas = Vec::with_capacity(splits.total());
        for n in 0..splits.total() {
            let id = format!("{n:02}");
            slides.push(generate_slide(
                &id, seed, n as u64, n_x, n_y, patch_px, params,
            )?);
            metas.push(SlideMeta {
                id,
                n_x,
                n_y,
                split: splits.split_of(n),
            });
        }
        let meta = DatasetMeta {
            seed,
            patch_px,
            classes: NUM_CLASSES,
            params: params.clone(),
            slides: metas,
        };
        Ok(Dataset { meta, slides })
    }

    pub fn split(&self, split: Split) -> Vec<&SynthSlide> {
        self.slides
            .iter()
            .zip(&self.meta.slides)
            .filter(|(_, m)| m.split == split)
            .map(|(s, _)| s)
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for slide in &self.slides {
            let sdir = dir.join(format!("slide_{}", slide.grid.slide_id));
            fs::create_dir_all(&sdir)?;
            let (w, h) = (slide.width() as u32, slide.height() as u32);
            let mut f = BufWriter::new(fs::File::create(sdir.join("image.vvi"))?);
            f.write_all(IMAGE_MAGIC)?;
            f.write_all(&w.to_le_bytes())?;
            f.write_all(&h.to_le_bytes())?;
            f.write_all(&slide.image)?;
            f.flush()?;
            write_label_map(
                &sdir.join("labels.vvl"),
                slide.width(),
                slide.height(),
                &slide.labels,
            )?;
        }
        fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    /// Loads images and labels; region bookkeeping is not stored on disk, so
    /// loaded slides carry per-patch regions derived from the labels only.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        let mut slides = Vec::with_capacity(meta.slides.len());
        for sm in &meta.slides {
            let sdir = dir.join(format!("slide_{}", sm.id));
            let (w, h) = (sm.n_x * meta.patch_px, sm.n_y * meta.patch_px);
            let image = read_blob(&sdir.join("image.vvi"), IMAGE_MAGIC, w, h, 3)?;
            let labels = read_blob(&sdir.join("labels.vvl"), LABEL_MAGIC, w, h, 1)?;
            if let Some(&bad) = labels.iter().find(|&&l| l as usize >= meta.classes) {
                return Err(Error::Format(format!(
                    "slide {}: label {bad} >= {} classes",
                    sm.id, meta.classes
                )));
            }
            let grid = SlideGrid::new(sm.id.clone(), sm.n_x, sm.n_y, meta.patch_px, meta.classes)?;
            slides.push(SynthSlide {
                grid,
                image,
                labels,
                regions: Vec::new(),
                region_kinds: Vec::new(),
            });
        }
        Ok(Dataset { meta, slides })
    }
}

/// Writes a per-pixel label map in the dataset's label format.
pub fn write_label_map(path: &Path, w: usize, h: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != w * h {
        return Err(Error::shape(
            "label map",
            format!("{} labels for {w}x{h}", labels.len()),
        ));
    }
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(LABEL_MAGIC)?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(labels)?;
    f.flush()?;
    Ok(())
}

pub fn read_label_map(path: &Path, w: usize, h: usize) -> Result<Vec<u8>> {
    read_blob(path, LABEL_MAGIC, w, h, 1)
}

fn read_blob(path: &Path, magic: &[u8; 4], w: usize, h: usize, channels: usize) -> Result<Vec<u8>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let m: [u8; 4] = read_exact_array(&mut r)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "{}: bad magic {m:?}",
            path.display()
        )));
    }
    let (fw, fh) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
    if (fw, fh) != (w, h) {
        return Err(Error::Format(format!(
            "{}: {fw}x{fh}, expected {w}x{h}",
            path.display()
        )));
    }
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data)?;
    Ok(data)
}

/// A sampled training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    /// Index into the slide list passed to [`sample_patches`].
    pub slide: usize,
    pub i: usize,
    pub j: usize,
    pub y_cls: Vec<f64>,
    pub predominant: usize,
}

pub fn patch_record(slides: &[&SynthSlide], slide: usize, i: usize, j: usize) -> PatchRecord {
    let s = slides[slide];
    let y_cls = class_ratio(&s.patch_labels(i, j), s.grid.classes);
    let predominant = predominant(&y_cls);
    PatchRecord {
        slide,
        i,
        j,
        y_cls,
        predominant,
    }
}

/// At most `cap` random patches per slide and predominant class.
pub fn sample_patches(
    slides: &[&SynthSlide],
    cap: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PatchRecord>> {
    if cap == 0 {
        return Err(Error::invalid("patch cap must be at least 1"));
    }
    let mut out = Vec::new();
    for (n, s) in slides.iter().enumerate() {
        let mut by_class: Vec<Vec<PatchRecord>> = vec![Vec::new(); s.grid.classes];
        for (i, j) in s.grid.positions() {
            let rec = patch_record(slides, n, i, j);
            by_class[rec.predominant].push(rec);
        }
        for mut recs in by_class {
            recs.shuffle(rng);
            recs.truncate(cap);
            out.extend(recs);
        }
    }
    Ok(out)
}

/// One-hot `S x S x C` encoding of a label patch.
pub fn one_hot(labels: &[u8], classes: usize) -> Vec<f32> {
    let mut out = vec![0.0; labels.len() * classes];
    for (p, &l) in labels.iter().enumerate() {
        out[p * classes + l as usize] = 1.0;
    }
    out
}
