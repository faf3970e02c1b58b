use image::{Rgb, RgbImage};

use super::scene::{Object, Scene, Shape};

/// Fraction of the cell extent covered by an object's bounding box.
pub const OBJECT_EXTENT: f64 = 0.6;

/// Subsamples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

fn inside(shape: Shape, du: f64, dv: f64, half: f64) -> bool {
    match shape {
        Shape::Square => du.abs() <= half && dv.abs() <= half,
        Shape::Circle => du * du + dv * dv <= half * half,
        Shape::Triangle => {
            // Apex up, base along the bottom of the bounding box.
            dv >= -half && dv <= half && du.abs() <= (dv + half) / 2.0
        }
    }
}

/// Draws every object centered in its cell over a flat background.
/// Edge pixels are box-filtered from a 4×4 subsample grid.
pub fn render(scene: &Scene, cell_px: u32) -> RgbImage {
    let n = scene.grid as u32;
    let mut img = RgbImage::from_pixel(n * cell_px, n * cell_px, Rgb(scene.background));
    let half = OBJECT_EXTENT * cell_px as f64 / 2.0;
    let centre = cell_px as f64 / 2.0;
    for obj in &scene.objects {
        draw(&mut img, obj, scene.background, cell_px, half, centre);
    }
    img
}

fn draw(img: &mut RgbImage, obj: &Object, bg: [u8; 3], cell_px: u32, half: f64, centre: f64) {
    let fg = obj.color.rgb();
    let x0 = obj.cell.col as u32 * cell_px;
    let y0 = obj.cell.row as u32 * cell_px;
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..cell_px {
        for px in 0..cell_px {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = px as f64 + (sx as f64 + 0.5) * step - centre;
                    let v = py as f64 + (sy as f64 + 0.5) * step - centre;
                    hits += usize::from(inside(obj.shape, u, v, half));
                }
            }
            if hits == 0 {
                continue;
            }
            let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let mix = |f: u8, b: u8| (cover * f as f64 + (1.0 - cover) * b as f64).round() as u8;
            img.put_pixel(
                x0 + px,
                y0 + py,
                Rgb([mix(fg[0], bg[0]), mix(fg[1], bg[1]), mix(fg[2], bg[2])]),
            );
        }
    }
}
