//! Static match visualizations: side-by-side composites with correct matches
//! drawn in green and incorrect ones in dark red.

use super::{FeatureSet, Match};
use crate::geometry::FrameRecord;
use crate::Result;
use std::path::Path;

fn draw_line(img: &mut image::RgbImage, a: (f32, f32), b: (f32, f32), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f32 / steps as f32;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}

/// Write a side-by-side PNG of the pair with one line per match.
pub fn render_matches(
    path: &Path,
    frame_a: &FrameRecord,
    frame_b: &FrameRecord,
    set_a: &FeatureSet,
    set_b: &FeatureSet,
    matches: &[Match],
    correct: &[bool],
) -> Result<()> {
    let gap = 8u32;
    let w = (frame_a.width() + frame_b.width()) as u32 + gap;
    let h = frame_a.height().max(frame_b.height()) as u32;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([16, 16, 16]));
    for (frame, x0) in [(frame_a, 0u32), (frame_b, frame_a.width() as u32 + gap)] {
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                let v = frame.image_u8.get(x, y);
                img.put_pixel(x0 + x as u32, y as u32, image::Rgb([v, v, v]));
            }
        }
    }
    let off = (frame_a.width() as u32 + gap) as f32;
    for (m, &ok) in matches.iter().zip(correct) {
        let ka = set_a.keypoints[m.a];
        let kb = set_b.keypoints[m.b];
        let color = if ok { [40, 220, 40] } else { [140, 30, 30] };
        draw_line(&mut img, (ka.x, ka.y), (kb.x + off, kb.y), color);
    }
    img.save(path)?;
    Ok(())
}
