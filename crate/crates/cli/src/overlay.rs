use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};
use imd_core::{FineMatchSet, Image};

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Side-by-side rendering of both images with one line per match, colored
/// from red (low confidence) to green (high).
pub fn render(a: &Image, b: &Image, matches: &FineMatchSet) -> RgbImage {
    let (wa, ha) = a.dims();
    let (wb, hb) = b.dims();
    let mut out = RgbImage::new((wa + wb) as u32, ha.max(hb) as u32);
    for (img, x_off) in [(a, 0), (b, wa)] {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.put_pixel((x + x_off) as u32, y as u32, Rgb(img.pixel(x, y)));
            }
        }
    }
    for m in matches.iter() {
        let g = (m.confidence.clamp(0.0, 1.0) * 255.0) as u8;
        let p = (m.xa.round() as i64, m.ya.round() as i64);
        let q = ((m.xb + wa as f64).round() as i64, m.yb.round() as i64);
        line(&mut out, p, q, Rgb([255 - g, g, 0]));
    }
    out
}

pub fn write(path: &Path, a: &Image, b: &Image, matches: &FineMatchSet) -> Result<()> {
    render(a, b, matches).save(path)?;
    Ok(())
}
