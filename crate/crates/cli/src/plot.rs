//! Slice rendering with an optional instance-contour overlay.

use std::path::Path;

use image::{Rgb, RgbImage};
use zseg::error::{Error, Result};
use zseg::volume::{LabelMap, Volume};

/// Distinct colour per label, repeating after twelve.
fn palette(label: u16) -> Rgb<u8> {
    const COLOURS: [[u8; 3]; 12] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [170, 110, 40],
    ];
    Rgb(COLOURS[(label as usize - 1) % COLOURS.len()])
}

/// Grayscale slice `z` scaled to its own value range; voxels on an in-plane
/// label boundary are painted in their label's colour.
pub fn render_slice(volume: &Volume<f32>, labels: Option<&LabelMap>, z: usize) -> Result<RgbImage> {
    let [nz, ny, nx] = volume.dims();
    if z >= nz {
        return Err(Error::Argument(format!("slice {z} outside 0..{nz}")));
    }
    if let Some(l) = labels {
        if l.dims() != volume.dims() {
            return Err(Error::Argument(format!(
                "labels {:?} do not match volume {:?}",
                l.dims(),
                volume.dims()
            )));
        }
    }
    let plane = &volume.data()[z * ny * nx..(z + 1) * ny * nx];
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let g = ((plane[y * nx + x] - lo) * scale).round() as u8;
            let mut px = Rgb([g, g, g]);
            if let Some(l) = labels {
                let v = l.get(z, y, x);
                let edge = v != 0
                    && [(0, 1), (2, 1), (1, 0), (1, 2)].iter().any(|&(dy, dx)| {
                        let (qy, qx) = (y as isize + dy - 1, x as isize + dx - 1);
                        qy < 0
                            || qx < 0
                            || qy >= ny as isize
                            || qx >= nx as isize
                            || l.get(z, qy as usize, qx as usize) != v
                    });
                if edge {
                    px = palette(v);
                }
            }
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    Ok(img)
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))
}
