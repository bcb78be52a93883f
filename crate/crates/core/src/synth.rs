//! Synthetic panoramas: flat-coloured objects over a smooth grey room.
//!
//! The mock services recognise objects by colour, so every palette entry
//! doubles as an object identity (`"brown"` is always a `"table"`).

use crate::raster::Image;
use crate::sphere::ErpImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaletteEntry {
    pub color: &'static str,
    pub noun: &'static str,
    pub rgb: [f32; 3],
}

pub const PALETTE: [PaletteEntry; 8] = [
    PaletteEntry { color: "red", noun: "armchair", rgb: [0.9, 0.1, 0.1] },
    PaletteEntry { color: "green", noun: "plant", rgb: [0.1, 0.8, 0.2] },
    PaletteEntry { color: "blue", noun: "desk", rgb: [0.1, 0.2, 0.9] },
    PaletteEntry { color: "yellow", noun: "vase", rgb: [0.95, 0.9, 0.1] },
    PaletteEntry { color: "magenta", noun: "cabinet", rgb: [0.85, 0.1, 0.85] },
    PaletteEntry { color: "cyan", noun: "book", rgb: [0.1, 0.85, 0.9] },
    PaletteEntry { color: "brown", noun: "table", rgb: [0.55, 0.3, 0.05] },
    PaletteEntry { color: "orange", noun: "lamp", rgb: [1.0, 0.55, 0.0] },
];

const MATCH_TOLERANCE: f32 = 0.15;

/// Palette index of the first colour name or noun appearing as a word in `text`.
pub fn palette_by_word(text: &str) -> Option<usize> {
    let lower = text.to_ascii_lowercase();
    lower
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .find_map(|w| PALETTE.iter().position(|p| p.color == w || p.noun == w))
}

/// Palette index of an RGB pixel, if it is within tolerance of one.
pub fn classify_pixel(px: &[f32]) -> Option<usize> {
    if px.len() < 3 {
        return None;
    }
    PALETTE.iter().position(|p| {
        p.rgb
            .iter()
            .zip(px)
            .all(|(a, b)| (a - b).abs() < MATCH_TOLERANCE)
    })
}

/// Per-pixel palette labels, row-major.
pub fn label_image(img: &Image) -> Vec<Option<usize>> {
    let mut out = Vec::with_capacity(img.width() * img.height());
    for r in 0..img.height() {
        for c in 0..img.width() {
            out.push(classify_pixel(img.pixel(r, c)));
        }
    }
    out
}

/// Bounding box (half-open) of every pixel carrying one palette colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub palette: usize,
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub area: usize,
}

impl Blob {
    pub fn entry(&self) -> &'static PaletteEntry {
        &PALETTE[self.palette]
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) as f64 / 2.0, (self.y1 + self.y2) as f64 / 2.0)
    }

    /// `self` rests on `other`: its bottom edge meets the other's top and they
    /// overlap horizontally.
    pub fn rests_on(&self, other: &Blob) -> bool {
        let touching = self.y2 + 2 >= other.y1 && self.y2 <= other.y1 + 2;
        touching && self.x1 < other.x2 && other.x1 < self.x2
    }
}

/// Blobs sorted by palette index. Colours covering fewer than `min_area`
/// pixels are ignored.
pub fn find_blobs(img: &Image, min_area: usize) -> Vec<Blob> {
    let labels = label_image(img);
    let w = img.width();
    let mut blobs: Vec<Option<Blob>> = vec![None; PALETTE.len()];
    for (k, l) in labels.iter().enumerate() {
        let Some(p) = *l else { continue };
        let (r, c) = (k / w, k % w);
        let b = blobs[p].get_or_insert(Blob { palette: p, x1: c, y1: r, x2: c + 1, y2: r + 1, area: 0 });
        b.x1 = b.x1.min(c);
        b.y1 = b.y1.min(r);
        b.x2 = b.x2.max(c + 1);
        b.y2 = b.y2.max(r + 1);
        b.area += 1;
    }
    blobs.into_iter().flatten().filter(|b| b.area >= min_area).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneObject {
    pub palette: usize,
    /// Half-open ERP pixel rectangle `[x1, y1, x2, y2]`.
    pub rect: [usize; 4],
    pub shape: Shape,
}

impl SceneObject {
    fn covers(&self, r: usize, c: usize) -> bool {
        let [x1, y1, x2, y2] = self.rect;
        if c < x1 || c >= x2 || r < y1 || r >= y2 {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (cx, cy) = ((x1 + x2) as f64 / 2.0, (y1 + y2) as f64 / 2.0);
                let (rx, ry) = ((x2 - x1) as f64 / 2.0, (y2 - y1) as f64 / 2.0);
                let dx = (c as f64 + 0.5 - cx) / rx;
                let dy = (r as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: &'static str,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<SceneObject>,
}

/// Grey room: periodic in longitude so the seam is continuous.
pub fn background(row: usize, col: usize, height: usize, width: usize) -> [f32; 3] {
    let lam = 2.0 * std::f64::consts::PI * col as f64 / width as f64;
    let phi = std::f64::consts::PI * row as f64 / height as f64;
    let v = 0.5 + 0.05 * (3.0 * lam).sin() + 0.03 * (2.0 * phi).cos();
    let v = v as f32;
    [v, v * 0.98, v * 0.96]
}

pub fn render(scene: &Scene) -> ErpImage {
    let img = Image::from_fn(scene.width, scene.height, 3, |r, c, ch| {
        match scene.objects.iter().rev().find(|o| o.covers(r, c)) {
            Some(o) => PALETTE[o.palette].rgb[ch],
            None => background(r, c, scene.height, scene.width)[ch],
        }
    });
    ErpImage::new(img).expect("scene dimensions are 2:1")
}

fn obj(color: &str, rect: [usize; 4], shape: Shape) -> SceneObject {
    let palette = PALETTE.iter().position(|p| p.color == color).expect("palette colour");
    SceneObject { palette, rect, shape }
}

/// The three 512×256 scenes used by the pipeline tests and `panokit pipeline-run --synthetic`.
pub fn fixture_scenes() -> Vec<Scene> {
    use Shape::*;
    vec![
        Scene {
            name: "living",
            width: 512,
            height: 256,
            objects: vec![
                obj("brown", [200, 150, 280, 180], Rect),
                obj("yellow", [232, 132, 246, 150], Ellipse),
                obj("red", [312, 140, 346, 182], Rect),
                obj("green", [90, 120, 116, 170], Ellipse),
            ],
        },
        Scene {
            name: "office",
            width: 512,
            height: 256,
            objects: vec![
                obj("blue", [236, 146, 300, 176], Rect),
                obj("cyan", [250, 138, 276, 146], Rect),
                obj("orange", [390, 112, 406, 160], Rect),
            ],
        },
        Scene {
            name: "hall",
            width: 512,
            height: 256,
            objects: vec![
                obj("magenta", [140, 122, 184, 176], Rect),
                obj("green", [150, 100, 172, 122], Ellipse),
                obj("red", [392, 140, 430, 178], Rect),
            ],
        },
    ]
}
