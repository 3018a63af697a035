//! Per-image SVG overlays: the grayscale image embedded as a BMP data URI
//! with the predicted boxes and score labels drawn on top. Box coordinates
//! are written verbatim, so the overlay agrees exactly with the prediction
//! file.

use roidet::boxes::Detection;

const B64: &[u8; 64] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

fn base64(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len().div_ceil(3) * 4);
    for chunk in bytes.chunks(3) {
        let b = [chunk[0], *chunk.get(1).unwrap_or(&0), *chunk.get(2).unwrap_or(&0)];
        let n = ((b[0] as u32) << 16) | ((b[1] as u32) << 8) | b[2] as u32;
        out.push(B64[(n >> 18) as usize & 63] as char);
        out.push(B64[(n >> 12) as usize & 63] as char);
        out.push(if chunk.len() > 1 {
            B64[(n >> 6) as usize & 63] as char
        } else {
            '='
        });
        out.push(if chunk.len() > 2 {
            B64[n as usize & 63] as char
        } else {
            '='
        });
    }
    out
}

/// 8-bit grayscale BMP (palette, bottom-up rows).
fn gray_bmp(width: usize, height: usize, pixels: &[f64]) -> Vec<u8> {
    let row = width.div_ceil(4) * 4;
    let data_size = row * height;
    let offset = 14 + 40 + 256 * 4;
    let mut out = Vec::with_capacity(offset + data_size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&((offset + data_size) as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(offset as u32).to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(width as i32).to_le_bytes());
    out.extend_from_slice(&(height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&8u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(data_size as u32).to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&256u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in 0..=255u8 {
        out.extend_from_slice(&[v, v, v, 0]);
    }
    for y in (0..height).rev() {
        for x in 0..width {
            out.push((pixels[y * width + x].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.resize(out.len() + row - width, 0);
    }
    out
}

pub fn overlay_svg(
    width: usize,
    height: usize,
    pixels: &[f64],
    detections: &[Detection],
) -> String {
    const COLORS: [&str; 5] = ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00"];
    let bmp = base64(&gray_bmp(width, height, pixels));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <image width=\"{width}\" height=\"{height}\" href=\"data:image/bmp;base64,{bmp}\"/>\n"
    );
    for d in detections {
        let color = d
            .label
            .map(|c| COLORS[c.index() % COLORS.len()])
            .unwrap_or("#ffffff");
        let b = &d.bbox;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"{color}\" stroke-width=\"1\"/>\n",
            b.x1(),
            b.y1(),
            b.width(),
            b.height()
        ));
        let label = d.label.map(|c| c.name()).unwrap_or("roi");
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"6\" fill=\"{color}\">{label} {:.2}</text>\n",
            b.x1(),
            (b.y1() - 1.5).max(5.0),
            d.score
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base64_known_vectors() {
        assert_eq!(base64(b""), "");
        assert_eq!(base64(b"f"), "Zg==");
        assert_eq!(base64(b"fo"), "Zm8=");
        assert_eq!(base64(b"foo"), "Zm9v");
        assert_eq!(base64(b"foobar"), "Zm9vYmFy");
    }

    #[test]
    fn bmp_has_expected_size_and_magic() {
        let bmp = gray_bmp(5, 3, &[0.5; 15]);
        assert_eq!(&bmp[..2], b"BM");
        // 5 wide rows pad to 8 bytes.
        assert_eq!(bmp.len(), 14 + 40 + 1024 + 8 * 3);
    }

    #[test]
    fn overlay_writes_exact_coordinates() {
        use roidet::boxes::{BBox, TraitClass};
        let d = Detection::new(
            BBox::new(3.25, 4.5, 13.25, 24.5).unwrap(),
            Some(TraitClass::Iris),
            0.875,
        );
        let svg = overlay_svg(32, 32, &vec![0.3; 32 * 32], &[d]);
        assert!(svg.contains("x=\"3.25\" y=\"4.5\" width=\"10\" height=\"20\""));
        assert!(svg.contains("iris 0.88"));
    }
}
