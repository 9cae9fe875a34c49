use std::path::Path;

use image::{Rgb, RgbImage};

use super::{EventStream, VoxelGrid};
use crate::error::Result;

const RED: Rgb<u8> = Rgb([255, 0, 0]);
const BLUE: Rgb<u8> = Rgb([0, 0, 255]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn colorize<V: PartialOrd + Default + Copy>(net: &[V], width: u32, height: u32) -> RgbImage {
    let zero = V::default();
    RgbImage::from_fn(width, height, |x, y| {
        let v = net[(y * width + x) as usize];
        if v > zero {
            RED
        } else if v < zero {
            BLUE
        } else {
            WHITE
        }
    })
}

/// Red for net-positive pixels, blue for net-negative, white elsewhere.
pub fn render_rgb(stream: &EventStream) -> RgbImage {
    colorize(
        &stream.pixel_polarity(),
        stream.width() as u32,
        stream.height() as u32,
    )
}

/// Same coloring applied to the bin-summed grid.
pub fn render_grid_rgb(grid: &VoxelGrid) -> RgbImage {
    colorize(&grid.collapse(), grid.width as u32, grid.height as u32)
}

pub fn write_png_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}
