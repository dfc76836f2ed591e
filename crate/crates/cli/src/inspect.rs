//! Static renderings of a generated clip: a contact sheet of all frames and
//! optional per-frame images, with each trajectory's ground-truth box drawn
//! in its own color. Frames where a patch is masked get a dashed box and a
//! filled marker square along the top edge of the frame.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use ctp_core::geometry::BBox;
use ctp_core::io::Sidecar;
use ctp_core::{CtpError, Result};

pub const PALETTE: [[u8; 3]; 6] = [
    [255, 255, 255],
    [255, 40, 40],
    [40, 220, 40],
    [60, 120, 255],
    [255, 220, 0],
    [255, 0, 255],
];

/// Frames per contact-sheet row.
pub const SHEET_COLUMNS: usize = 8;
pub const GUTTER: usize = 2;

pub fn color(k: usize) -> [u8; 3] {
    PALETTE[k % PALETTE.len()]
}

/// Inclusive pixel rectangle `(x0, y0, x1, y1)` of a box in a frame of
/// `w × h` pixels upscaled by `scale`.
pub fn box_rect(b: &BBox, w: usize, h: usize, scale: usize) -> (usize, usize, usize, usize) {
    let (x0, y0, x1, y1) = b.pixel_bounds(w, h);
    (x0 * scale, y0 * scale, x1 * scale - 1, y1 * scale - 1)
}

/// Side length of a masked-frame marker.
pub fn marker_size(scale: usize) -> usize {
    2 * scale.max(1)
}

/// Top-left corner of trajectory `k`'s marker within a frame image.
pub fn marker_origin(k: usize, scale: usize) -> (usize, usize) {
    (k * (marker_size(scale) + 1), 0)
}

/// Top-left corner of frame `i` within the contact sheet.
pub fn tile_origin(i: usize, w: usize, h: usize, scale: usize) -> (usize, usize) {
    let (col, row) = (i % SHEET_COLUMNS, i / SHEET_COLUMNS);
    (GUTTER + col * (w * scale + GUTTER), GUTTER + row * (h * scale + GUTTER))
}

fn check(side: &Sidecar, dims: [usize; 4], pixels: &[u8], scale: usize) -> Result<()> {
    let [t, h, w, c] = dims;
    if scale == 0 {
        return Err(CtpError::config("scale must be positive"));
    }
    if c != 3 || pixels.len() != t * h * w * 3 {
        return Err(CtpError::data(format!("clip {} is not a {t}x{h}x{w} RGB clip", side.id)));
    }
    if let Some(tr) = side.trajectories.iter().find(|tr| tr.boxes.len() != t || tr.visible.len() != t) {
        return Err(CtpError::data(format!(
            "sidecar {} has a trajectory of {} frames for a clip of {t}",
            side.id,
            tr.boxes.len()
        )));
    }
    Ok(())
}

fn fill(img: &mut RgbImage, x0: usize, y0: usize, x1: usize, y1: usize, c: [u8; 3]) {
    for y in y0..=y1.min(img.height() as usize - 1) {
        for x in x0..=x1.min(img.width() as usize - 1) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

fn outline(img: &mut RgbImage, r: (usize, usize, usize, usize), c: [u8; 3], dashed: bool) {
    let (x0, y0, x1, y1) = r;
    let on = |i: usize| !dashed || (i / 2) % 2 == 0;
    let mut put = |x: usize, y: usize| {
        if x < img.width() as usize && y < img.height() as usize {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for x in x0..=x1 {
        if on(x - x0) {
            put(x, y0);
            put(x, y1);
        }
    }
    for y in y0..=y1 {
        if on(y - y0) {
            put(x0, y);
            put(x1, y);
        }
    }
}

/// One frame upscaled by `scale` with boxes and masked-frame markers.
pub fn render_frame(side: &Sidecar, dims: [usize; 4], pixels: &[u8], frame: usize, scale: usize) -> Result<RgbImage> {
    check(side, dims, pixels, scale)?;
    let [t, h, w, _] = dims;
    if frame >= t {
        return Err(CtpError::data(format!("frame {frame} out of range for a clip of {t}")));
    }
    let src = &pixels[frame * h * w * 3..(frame + 1) * h * w * 3];
    let mut img = RgbImage::from_fn((w * scale) as u32, (h * scale) as u32, |x, y| {
        let o = ((y as usize / scale) * w + x as usize / scale) * 3;
        Rgb([src[o], src[o + 1], src[o + 2]])
    });
    for (k, tr) in side.trajectories.iter().enumerate() {
        let masked = !tr.visible[frame];
        outline(&mut img, box_rect(&tr.boxes[frame], w, h, scale), color(k), masked);
        if masked {
            let (mx, my) = marker_origin(k, scale);
            let m = marker_size(scale);
            fill(&mut img, mx, my, mx + m - 1, my + m - 1, color(k));
        }
    }
    Ok(img)
}

/// All frames in a grid of [`SHEET_COLUMNS`] columns.
pub fn render_contact_sheet(side: &Sidecar, dims: [usize; 4], pixels: &[u8], scale: usize) -> Result<RgbImage> {
    check(side, dims, pixels, scale)?;
    let [t, h, w, _] = dims;
    let cols = t.clamp(1, SHEET_COLUMNS);
    let rows = t.div_ceil(SHEET_COLUMNS).max(1);
    let sw = GUTTER + cols * (w * scale + GUTTER);
    let sh = GUTTER + rows * (h * scale + GUTTER);
    let mut sheet = RgbImage::from_pixel(sw as u32, sh as u32, Rgb([32, 32, 32]));
    for i in 0..t {
        let tile = render_frame(side, dims, pixels, i, scale)?;
        let (ox, oy) = tile_origin(i, w, h, scale);
        image::imageops::replace(&mut sheet, &tile, ox as i64, oy as i64);
    }
    Ok(sheet)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| CtpError::data(format!("cannot encode {}: {e}", path.display())))?;
    ctp_core::io::write_atomic(path, &bytes)
}

/// Write `<id>_sheet.png` and, when `per_frame` is set, `<id>_frameNNN.png`
/// into `out`. Returns the written paths.
pub fn write_inspection(
    out: &Path,
    side: &Sidecar,
    dims: [usize; 4],
    pixels: &[u8],
    per_frame: bool,
    scale: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| CtpError::io(out, e))?;
    let sheet_path = out.join(format!("{}_sheet.png", side.id));
    save(&render_contact_sheet(side, dims, pixels, scale)?, &sheet_path)?;
    let mut written = vec![sheet_path];
    if per_frame {
        for i in 0..dims[0] {
            let p = out.join(format!("{}_frame{i:03}.png", side.id));
            save(&render_frame(side, dims, pixels, i, scale)?, &p)?;
            written.push(p);
        }
    }
    Ok(written)
}
