//! Synthetic camera: deterministic JPEG frames with the sequence number
//! drawn into the image and recorded in a comment segment.

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;

use crate::config::SimCameraConfig;

/// Comment prefix carrying the frame sequence number.
pub const SEQ_COMMENT_PREFIX: &str = "iohrt-seq=";

/// 3x5 bitmaps for the digits 0-9, one row per entry, MSB on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const GLYPH_SCALE: u32 = 4;

fn draw_seq(rgb: &mut [u8], width: u32, height: u32, seq: u32) {
    let text = seq.to_string();
    let cell = 4 * GLYPH_SCALE;
    let box_w = (text.len() as u32 * cell + GLYPH_SCALE).min(width);
    let box_h = (7 * GLYPH_SCALE).min(height);
    let mut put = |x: u32, y: u32, v: u8| {
        if x < width && y < height {
            let i = ((y * width + x) * 3) as usize;
            rgb[i..i + 3].fill(v);
        }
    };
    for y in 0..box_h {
        for x in 0..box_w {
            put(x, y, 0);
        }
    }
    for (n, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        let ox = GLYPH_SCALE + n as u32 * cell;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (0b100 >> col) == 0 {
                    continue;
                }
                for dy in 0..GLYPH_SCALE {
                    for dx in 0..GLYPH_SCALE {
                        put(ox + col * GLYPH_SCALE + dx, GLYPH_SCALE + row as u32 * GLYPH_SCALE + dy, 255);
                    }
                }
            }
        }
    }
}

/// Raw RGB pixels of frame `seq`.
pub fn render_rgb(width: u32, height: u32, seed: u64, seq: u32) -> Vec<u8> {
    let mut rgb = vec![0u8; (width * height * 3) as usize];
    let s = seed as u32;
    let bar = (seq.wrapping_mul(4)) % width;
    for y in 0..height {
        for x in 0..width {
            let i = ((y * width + x) * 3) as usize;
            rgb[i] = ((x * 255 / width).wrapping_add(s.wrapping_mul(37)) % 256) as u8;
            rgb[i + 1] = ((y * 255 / height).wrapping_add(s.wrapping_mul(91)) % 256) as u8;
            rgb[i + 2] = ((x + y).wrapping_add(seq.wrapping_mul(4)) % 256) as u8;
            if x >= bar && x < bar + 6 {
                rgb[i..i + 3].fill(255);
            }
        }
    }
    draw_seq(&mut rgb, width, height, seq);
    rgb
}

fn insert_comment(jpeg: Vec<u8>, text: &str) -> Vec<u8> {
    // After SOI, and after the JFIF APP0 segment when present.
    let mut at = 2;
    if jpeg.len() > 6 && jpeg[2] == 0xFF && jpeg[3] == 0xE0 {
        at = 4 + u16::from_be_bytes([jpeg[4], jpeg[5]]) as usize;
    }
    let len = (text.len() + 2) as u16;
    let mut out = Vec::with_capacity(jpeg.len() + text.len() + 4);
    out.extend_from_slice(&jpeg[..at]);
    out.extend_from_slice(&[0xFF, 0xFE]);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&jpeg[at..]);
    out
}

/// Encoded frame `seq` for `cfg`. Identical inputs give identical bytes.
pub fn render_frame(cfg: &SimCameraConfig, seq: u32) -> Vec<u8> {
    let rgb = render_rgb(cfg.width, cfg.height, cfg.pattern_seed, seq);
    let mut jpeg = Vec::new();
    JpegEncoder::new_with_quality(&mut jpeg, cfg.quality)
        .encode(&rgb, cfg.width, cfg.height, ExtendedColorType::Rgb8)
        .expect("in-memory JPEG encoding");
    insert_comment(jpeg, &format!("{SEQ_COMMENT_PREFIX}{seq}"))
}

/// Reads the sequence number back out of a frame's comment segment.
pub fn embedded_seq(jpeg: &[u8]) -> Option<u32> {
    if jpeg.get(..2)? != [0xFF, 0xD8] {
        return None;
    }
    let mut at = 2;
    while at + 4 <= jpeg.len() {
        if jpeg[at] != 0xFF {
            return None;
        }
        let marker = jpeg[at + 1];
        if marker == 0xDA {
            return None;
        }
        let len = u16::from_be_bytes([jpeg[at + 2], jpeg[at + 3]]) as usize;
        let body = jpeg.get(at + 4..at + 2 + len)?;
        if marker == 0xFE {
            if let Some(n) = std::str::from_utf8(body).ok().and_then(|t| t.strip_prefix(SEQ_COMMENT_PREFIX)) {
                return n.parse().ok();
            }
        }
        at += 2 + len;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_seq() {
        let cfg = SimCameraConfig { width: 64, height: 48, ..SimCameraConfig::default() };
        assert_eq!(render_frame(&cfg, 0), render_frame(&cfg, 0));
        assert_ne!(render_frame(&cfg, 0), render_frame(&cfg, 1));
        let other = SimCameraConfig { pattern_seed: 9, ..cfg.clone() };
        assert_ne!(render_frame(&cfg, 0), render_frame(&other, 0));
    }

    #[test]
    fn frame_decodes_and_carries_seq() {
        let cfg = SimCameraConfig::default();
        let jpeg = render_frame(&cfg, 1234);
        let img = image::load_from_memory_with_format(&jpeg, image::ImageFormat::Jpeg).unwrap();
        assert_eq!((img.width(), img.height()), (320, 240));
        assert_eq!(embedded_seq(&jpeg), Some(1234));
        assert_eq!(embedded_seq(b"not a jpeg"), None);
    }

    #[test]
    fn overlay_is_visible() {
        let rgb = render_rgb(64, 48, 0, 8);
        // top-left cell of the "8" glyph is lit, the box border is black
        let px = |x: u32, y: u32| rgb[((y * 64 + x) * 3) as usize];
        assert_eq!(px(GLYPH_SCALE, GLYPH_SCALE), 255);
        assert_eq!(px(0, 0), 0);
    }
}
