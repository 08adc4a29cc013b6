//! On-disk asset bundle for the viewer.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json           written last; its presence marks a complete bundle
//! blocks.bin              u32 LE (x, y, z) block coordinates in atlas order
//! atlas_PPP_{a,b}.png     RGBA block atlas pages, channels 0..4 and 4..8
//! plane_K_{a,b}.png       RGBA plane textures (K = 0 yz, 1 xz, 2 xy), R x rows
//! occ_lN.png              16-bit luma+alpha (z_min, z_max codes) for level N
//! ```
//!
//! Textures are 8-bit when `bits == 8` and 16-bit when `bits == 16`. Each
//! block is a tile `(B+1)` wide and `(B+1)^2` tall (z slices stacked), laid
//! out row by row; pages are at most 4096 x 4096 texels. The manifest lists
//! every other file with its FNV-1a checksum.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use image::{ImageBuffer, ImageFormat, LumaA, Rgba};
use oblique_core::bake::{BakedAssets, HeightCodec, QuantRange};
use oblique_core::math::{Aabb, Vec3};
use oblique_core::scene::FEATURES;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fnv1a64;

pub const BUNDLE_VERSION: u32 = 1;
pub const MAX_TEXTURE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasLayout {
    pub tile_width: usize,
    pub tile_height: usize,
    pub tiles_per_row: usize,
    pub rows_per_page: usize,
    pub pages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub path: String,
    /// FNV-1a 64 of the file bytes, lowercase hex.
    pub fnv1a64: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub aabb: [[f64; 3]; 2],
    pub grid_res: usize,
    pub plane_res: usize,
    pub block_size: usize,
    pub bits: u32,
    pub block_count: usize,
    /// Density, diffuse, specular.
    pub grid_ranges: [Range; 3],
    pub plane_ranges: [Range; 3],
    pub plane_rows: [[usize; 2]; 3],
    pub atlas: AtlasLayout,
    pub height_range: Range,
    pub occupancy_res: Vec<usize>,
    pub epsilon: f64,
    pub q: f64,
    /// Little-endian f32 shader weights, base64.
    pub shader: String,
    pub background: [f32; 3],
    pub files: Vec<FileEntry>,
}

impl Manifest {
    pub fn disk_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.bytes).sum()
    }
}

fn range(q: &QuantRange) -> Range {
    Range { lo: q.lo, hi: q.hi }
}

fn quant(r: &Range) -> QuantRange {
    QuantRange { lo: r.lo, hi: r.hi }
}

fn layout(a: &BakedAssets) -> AtlasLayout {
    let tw = a.block_size + 1;
    let th = tw * tw;
    let n = a.blocks.len();
    // Spread tiles evenly over the rows so the last row is nearly full.
    let rows = n.div_ceil((MAX_TEXTURE / tw).max(1));
    let tiles_per_row = n.div_ceil(rows.max(1)).max(1);
    let rows_per_page = (MAX_TEXTURE / th).max(1);
    AtlasLayout { tile_width: tw, tile_height: th, tiles_per_row, rows_per_page, pages: rows.div_ceil(rows_per_page) }
}

/// Encodes `w x h` texels of 4 channels as PNG bytes.
fn rgba_png(w: usize, h: usize, data: Vec<u16>, bits: u32) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    if bits == 8 {
        let bytes = data.into_iter().map(|v| v as u8).collect();
        let im: ImageBuffer<Rgba<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, bytes).expect("rgba size");
        im.write_to(&mut out, ImageFormat::Png).expect("png encode");
    } else {
        let im: ImageBuffer<Rgba<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, data).expect("rgba size");
        im.write_to(&mut out, ImageFormat::Png).expect("png encode");
    }
    out.into_inner()
}

fn decode_rgba(path: &Path, bytes: &[u8], w: usize, h: usize, bits: u32) -> Result<Vec<u16>> {
    let im = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.into(), source })?;
    if (im.width() as usize, im.height() as usize) != (w, h) {
        return Err(Error::format(path, format!("expected {w}x{h} texels")));
    }
    Ok(match (bits, im) {
        (8, image::DynamicImage::ImageRgba8(b)) => b.into_raw().into_iter().map(u16::from).collect(),
        (16, image::DynamicImage::ImageRgba16(b)) => b.into_raw(),
        _ => return Err(Error::format(path, format!("expected {bits}-bit RGBA"))),
    })
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<FileEntry>,
}

impl Writer<'_> {
    fn put(&mut self, name: String, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(&name);
        std::fs::write(&path, bytes).map_err(Error::io(&path))?;
        self.files.push(FileEntry {
            path: name,
            fnv1a64: format!("{:016x}", fnv1a64(bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

/// Splits 8-channel texels into two 4-channel images.
fn split8(codes: &[u16]) -> (Vec<u16>, Vec<u16>) {
    let n = codes.len() / FEATURES;
    let (mut a, mut b) = (Vec::with_capacity(n * 4), Vec::with_capacity(n * 4));
    for t in codes.chunks_exact(FEATURES) {
        a.extend_from_slice(&t[..4]);
        b.extend_from_slice(&t[4..]);
    }
    (a, b)
}

fn join8(a: &[u16], b: &[u16]) -> Vec<u16> {
    a.chunks_exact(4).zip(b.chunks_exact(4)).flat_map(|(x, y)| x.iter().chain(y).copied()).collect()
}

/// Texel position of node `n` of tile `i`, page-relative.
fn tile_texel(l: &AtlasLayout, i: usize, n: usize) -> (usize, usize, usize) {
    let (row, col) = (i / l.tiles_per_row, i % l.tiles_per_row);
    let (page, prow) = (row / l.rows_per_page, row % l.rows_per_page);
    let (x, yz) = (n % l.tile_width, n / l.tile_width);
    (page, col * l.tile_width + x, prow * l.tile_height + yz)
}

fn page_size(l: &AtlasLayout, blocks: usize, page: usize) -> (usize, usize) {
    let rows_total = blocks.div_ceil(l.tiles_per_row);
    let rows = rows_total.saturating_sub(page * l.rows_per_page).min(l.rows_per_page);
    (l.tiles_per_row * l.tile_width, rows * l.tile_height)
}

/// Writes `assets` into `dir` (created if needed). Returns the manifest.
pub fn write(assets: &BakedAssets, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    // An existing manifest would describe files about to be replaced.
    let mpath = dir.join("manifest.json");
    if mpath.exists() {
        std::fs::remove_file(&mpath).map_err(Error::io(&mpath))?;
    }
    let mut w = Writer { dir, files: Vec::new() };
    let bits = assets.bits;

    let idx: Vec<u8> = assets.blocks.iter().flatten().flat_map(|v| v.to_le_bytes()).collect();
    w.put("blocks.bin".into(), &idx)?;

    let lay = layout(assets);
    let nodes = assets.nodes_per_block();
    let mut pages: Vec<(usize, usize, Vec<u16>)> = (0..lay.pages)
        .map(|p| {
            let (pw, ph) = page_size(&lay, assets.blocks.len(), p);
            (pw, ph, vec![0u16; pw * ph * FEATURES])
        })
        .collect();
    for i in 0..assets.blocks.len() {
        for n in 0..nodes {
            let (p, x, y) = tile_texel(&lay, i, n);
            let (pw, _, data) = &mut pages[p];
            let src = (i * nodes + n) * FEATURES;
            let dst = (y * *pw + x) * FEATURES;
            data[dst..dst + FEATURES].copy_from_slice(&assets.block_codes[src..src + FEATURES]);
        }
    }
    for (p, (pw, ph, data)) in pages.into_iter().enumerate() {
        let (a, b) = split8(&data);
        w.put(format!("atlas_{p:03}_a.png"), &rgba_png(pw, ph, a, bits))?;
        w.put(format!("atlas_{p:03}_b.png"), &rgba_png(pw, ph, b, bits))?;
    }

    for k in 0..3 {
        // A plane cropped to nothing has no texture.
        let rows = assets.plane_rows[k].1;
        if rows == 0 {
            continue;
        }
        let (a, b) = split8(&assets.plane_codes[k]);
        w.put(format!("plane_{k}_a.png"), &rgba_png(assets.plane_res, rows, a, bits))?;
        w.put(format!("plane_{k}_b.png"), &rgba_png(assets.plane_res, rows, b, bits))?;
    }

    for (lvl, (res, codes)) in assets.occupancy.iter().enumerate() {
        let im: ImageBuffer<LumaA<u16>, Vec<u16>> =
            ImageBuffer::from_raw(*res as u32, *res as u32, codes.clone()).expect("occupancy size");
        let mut out = Cursor::new(Vec::new());
        im.write_to(&mut out, ImageFormat::Png).expect("png encode");
        w.put(format!("occ_l{lvl}.png"), &out.into_inner())?;
    }

    let shader: Vec<u8> = assets.shader.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        version: BUNDLE_VERSION,
        aabb: [assets.aabb.lo.to_array(), assets.aabb.hi.to_array()],
        grid_res: assets.grid_res,
        plane_res: assets.plane_res,
        block_size: assets.block_size,
        bits,
        block_count: assets.blocks.len(),
        grid_ranges: assets.grid_ranges.each_ref().map(range),
        plane_ranges: assets.plane_ranges.each_ref().map(range),
        plane_rows: assets.plane_rows.map(|(a, b)| [a, b]),
        atlas: lay,
        height_range: Range { lo: assets.heights.z_lo, hi: assets.heights.z_hi },
        occupancy_res: assets.occupancy.iter().map(|o| o.0).collect(),
        epsilon: assets.epsilon,
        q: assets.q,
        shader: base64::engine::general_purpose::STANDARD.encode(shader),
        background: assets.background,
        files: w.files,
    };
    let tmp = dir.join("manifest.json.tmp");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
    std::fs::write(&tmp, text).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, &mpath).map_err(Error::io(&mpath))?;
    Ok(manifest)
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: &'a Manifest,
}

impl Reader<'_> {
    fn get(&self, name: &str) -> Result<(PathBuf, Vec<u8>)> {
        let path = self.dir.join(name);
        let entry = self
            .manifest
            .files
            .iter()
            .find(|f| f.path == name)
            .ok_or_else(|| Error::format(self.dir.join("manifest.json"), format!("{name} is not listed")))?;
        let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
        if format!("{:016x}", fnv1a64(&bytes)) != entry.fnv1a64 {
            return Err(Error::Checksum { path });
        }
        Ok((path, bytes))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
    // Check the version before the schema so old bundles get a clear error.
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    let found = probe.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != BUNDLE_VERSION {
        return Err(Error::Version { path, found, expected: BUNDLE_VERSION });
    }
    serde_json::from_value(probe).map_err(|source| Error::Json { path, source })
}

/// Reads and verifies a bundle.
pub fn read(dir: &Path) -> Result<BakedAssets> {
    read_measured(dir).map(|r| r.0)
}

/// [`read`], also returning the bytes of every decoded texture buffer at its
/// stored depth plus the shader weights as f32.
pub fn read_measured(dir: &Path) -> Result<(BakedAssets, u64)> {
    let m = read_manifest(dir)?;
    let mpath = dir.join("manifest.json");
    let r = Reader { dir, manifest: &m };
    let bits = m.bits;
    if bits != 8 && bits != 16 {
        return Err(Error::format(&mpath, "bits must be 8 or 16"));
    }
    let bytes_per = (bits / 8) as u64;
    let mut texture_bytes = 0u64;

    let (ipath, idx) = r.get("blocks.bin")?;
    if idx.len() != m.block_count * 12 {
        return Err(Error::format(&ipath, "block table size does not match block_count"));
    }
    let blocks: Vec<[u32; 3]> = idx
        .chunks_exact(12)
        .map(|c| core::array::from_fn(|i| u32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap())))
        .collect();

    let lay = &m.atlas;
    let tw = m.block_size + 1;
    if lay.tile_width != tw || lay.tile_height != tw * tw || lay.tiles_per_row == 0 || lay.rows_per_page == 0 {
        return Err(Error::format(&mpath, "atlas layout does not match block size"));
    }
    let mut pages = Vec::with_capacity(lay.pages);
    for p in 0..lay.pages {
        let (pw, ph) = page_size(lay, m.block_count, p);
        let (pa, a) = r.get(&format!("atlas_{p:03}_a.png"))?;
        let (pb, b) = r.get(&format!("atlas_{p:03}_b.png"))?;
        let a = decode_rgba(&pa, &a, pw, ph, bits)?;
        let b = decode_rgba(&pb, &b, pw, ph, bits)?;
        texture_bytes += (a.len() + b.len()) as u64 * bytes_per;
        pages.push((pw, join8(&a, &b)));
    }
    let nodes = tw * tw * tw;
    let mut block_codes = vec![0u16; m.block_count * nodes * FEATURES];
    for i in 0..m.block_count {
        for n in 0..nodes {
            let (p, x, y) = tile_texel(lay, i, n);
            let (pw, data) = pages.get(p).ok_or_else(|| Error::format(&mpath, "too few atlas pages"))?;
            let src = (y * pw + x) * FEATURES;
            let dst = (i * nodes + n) * FEATURES;
            block_codes[dst..dst + FEATURES].copy_from_slice(&data[src..src + FEATURES]);
        }
    }

    let mut plane_codes: [Vec<u16>; 3] = Default::default();
    for k in 0..3 {
        let rows = m.plane_rows[k][1];
        if rows == 0 {
            continue;
        }
        let (pa, a) = r.get(&format!("plane_{k}_a.png"))?;
        let (pb, b) = r.get(&format!("plane_{k}_b.png"))?;
        let a = decode_rgba(&pa, &a, m.plane_res, rows, bits)?;
        let b = decode_rgba(&pb, &b, m.plane_res, rows, bits)?;
        texture_bytes += (a.len() + b.len()) as u64 * bytes_per;
        plane_codes[k] = join8(&a, &b);
    }

    let mut occupancy = Vec::with_capacity(m.occupancy_res.len());
    for (lvl, &res) in m.occupancy_res.iter().enumerate() {
        let (path, bytes) = r.get(&format!("occ_l{lvl}.png"))?;
        let im = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.clone(), source })?;
        let image::DynamicImage::ImageLumaA16(buf) = im else {
            return Err(Error::format(&path, "expected 16-bit luma+alpha"));
        };
        if (buf.width() as usize, buf.height() as usize) != (res, res) {
            return Err(Error::format(&path, format!("expected {res}x{res} texels")));
        }
        let codes = buf.into_raw();
        texture_bytes += codes.len() as u64 * 2;
        occupancy.push((res, codes));
    }
    if occupancy.is_empty() {
        return Err(Error::format(&mpath, "no occupancy levels"));
    }

    let raw = base64::engine::general_purpose::STANDARD
        .decode(&m.shader)
        .map_err(|e| Error::format(&mpath, format!("shader weights: {e}")))?;
    if raw.len() % 4 != 0 {
        return Err(Error::format(&mpath, "shader weights are not whole f32 values"));
    }
    let shader: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    texture_bytes += shader.len() as u64 * 4;
    let aabb = Aabb::new(Vec3::from_array(m.aabb[0]), Vec3::from_array(m.aabb[1]))
        .map_err(|_| Error::format(&mpath, "degenerate aabb"))?;

    let assets = BakedAssets {
        aabb,
        grid_res: m.grid_res,
        plane_res: m.plane_res,
        block_size: m.block_size,
        bits,
        grid_ranges: m.grid_ranges.each_ref().map(quant),
        plane_ranges: m.plane_ranges.each_ref().map(quant),
        blocks,
        block_codes,
        plane_rows: m.plane_rows.map(|[a, b]| (a, b)),
        plane_codes,
        heights: HeightCodec { z_lo: m.height_range.lo, z_hi: m.height_range.hi },
        occupancy,
        epsilon: m.epsilon,
        q: m.q,
        shader,
        background: m.background,
    };
    Ok((assets, texture_bytes))
}
