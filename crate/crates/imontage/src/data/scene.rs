//! Flat-shaded vector scenes: the whole synthetic corpus is flat-color
//! shapes on flat backgrounds, placed on a logical cell grid so instructions
//! like "move left by 2 cells" have exact pixel meanings.

use serde::{Deserialize, Serialize};

use super::TaskKind;
use crate::pack::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    White,
    Gray,
    Black,
}

impl ColorName {
    pub const FOREGROUND: [ColorName; 7] = [
        ColorName::Red,
        ColorName::Green,
        ColorName::Blue,
        ColorName::Yellow,
        ColorName::Magenta,
        ColorName::Cyan,
        ColorName::Orange,
    ];
    pub const BACKGROUND: [ColorName; 3] = [ColorName::White, ColorName::Gray, ColorName::Black];

    /// 8-bit palette entries, so PNG round trips are exact.
    pub fn rgb8(self) -> [u8; 3] {
        match self {
            ColorName::Red => [230, 40, 40],
            ColorName::Green => [40, 180, 60],
            ColorName::Blue => [40, 80, 230],
            ColorName::Yellow => [240, 220, 40],
            ColorName::Magenta => [220, 50, 200],
            ColorName::Cyan => [40, 200, 210],
            ColorName::Orange => [250, 150, 30],
            ColorName::White => [255, 255, 255],
            ColorName::Gray => [128, 128, 128],
            ColorName::Black => [0, 0, 0],
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        self.rgb8().map(|v| v as f32 / 255.0)
    }

    pub fn word(self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
            ColorName::Magenta => "magenta",
            ColorName::Cyan => "cyan",
            ColorName::Orange => "orange",
            ColorName::White => "white",
            ColorName::Gray => "gray",
            ColorName::Black => "black",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Micro-motions the generators compose into tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionProgram {
    Translate,
    Rotate,
    Scale,
    Recolor,
    SceneCut,
}

impl MotionProgram {
    pub const ALL: [MotionProgram; 5] = [
        MotionProgram::Translate,
        MotionProgram::Rotate,
        MotionProgram::Scale,
        MotionProgram::Recolor,
        MotionProgram::SceneCut,
    ];
}

/// Knobs of the procedural corpus. Rendered frames are fully determined by
/// this spec and the record seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    /// Render height in pixels.
    pub height: usize,
    /// Render width in pixels.
    pub width: usize,
    /// Logical placement grid, cells per side.
    pub grid: usize,
    pub shapes: Vec<ShapeKind>,
    /// Foreground palette; backgrounds always come from the neutral trio.
    pub colors: Vec<ColorName>,
    pub programs: Vec<MotionProgram>,
    /// Task families to emit, round-robin.
    pub tasks: Vec<TaskKind>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 32,
            width: 32,
            grid: 8,
            shapes: ShapeKind::ALL.to_vec(),
            colors: ColorName::FOREGROUND.to_vec(),
            programs: MotionProgram::ALL.to_vec(),
            tasks: TaskKind::ALL.to_vec(),
        }
    }
}

/// One shape instance. Coordinates are normalized to [0,1] per axis with y
/// down; `r` is the circumradius and `angle` the clockwise rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapePlacement {
    pub kind: ShapeKind,
    pub color: ColorName,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub angle: f64,
}

impl ShapePlacement {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => {
                let (s, c) = self.angle.sin_cos();
                let px = c * dx + s * dy;
                let py = -s * dx + c * dy;
                let half = self.r / std::f64::consts::SQRT_2;
                px.abs() <= half && py.abs() <= half
            }
            ShapeKind::Triangle => {
                // Equilateral, apex up at angle 0; inside iff the point sits
                // on a consistent side of all three edges.
                let base = -std::f64::consts::FRAC_PI_2 + self.angle;
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|i| {
                        let a = base + i as f64 * std::f64::consts::TAU / 3.0;
                        (self.cx + self.r * a.cos(), self.cy + self.r * a.sin())
                    })
                    .collect();
                let mut pos = true;
                let mut neg = true;
                for i in 0..3 {
                    let (ax, ay) = v[i];
                    let (bx, by) = v[(i + 1) % 3];
                    let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                    pos &= cross >= 0.0;
                    neg &= cross <= 0.0;
                }
                pos || neg
            }
        }
    }
}

/// A background color plus shapes painted over it in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bg: ColorName,
    pub shapes: Vec<ShapePlacement>,
}

impl Scene {
    /// Hard-edged render, no anti-aliasing: every pixel is exactly one
    /// palette color, which keeps edit diffs and masks pixel-exact.
    pub fn render(&self, h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w);
        self.paint(h, w, &mut |img_y, img_x, shape| {
            let rgb = match shape {
                Some(s) => s.color.rgb(),
                None => self.bg.rgb(),
            };
            img.set(img_y, img_x, rgb);
        });
        img
    }

    /// Foreground mask: white where any shape covers, black elsewhere.
    pub fn render_mask(&self, h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w);
        self.paint(h, w, &mut |img_y, img_x, shape| {
            let v = if shape.is_some() { 1.0 } else { 0.0 };
            img.set(img_y, img_x, [v, v, v]);
        });
        img
    }

    fn paint(&self, h: usize, w: usize, put: &mut dyn FnMut(usize, usize, Option<&ShapePlacement>)) {
        for y in 0..h {
            let ny = (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let nx = (x as f64 + 0.5) / w as f64;
                let top = self.shapes.iter().rev().find(|s| s.covers(nx, ny));
                put(y, x, top);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: ShapeKind) -> ShapePlacement {
        ShapePlacement {
            kind,
            color: ColorName::Red,
            cx: 0.5,
            cy: 0.5,
            r: 0.25,
            angle: 0.0,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = Scene {
            bg: ColorName::White,
            shapes: vec![shape(ShapeKind::Triangle)],
        };
        assert_eq!(scene.render(32, 32).data, scene.render(32, 32).data);
    }

    #[test]
    fn recolor_differs_only_inside_the_mask() {
        let before = Scene {
            bg: ColorName::White,
            shapes: vec![shape(ShapeKind::Circle)],
        };
        let mut after = before.clone();
        after.shapes[0].color = ColorName::Blue;
        let (a, b) = (before.render(32, 32), after.render(32, 32));
        let mask = before.render_mask(32, 32);
        let mut changed = 0;
        for y in 0..32 {
            for x in 0..32 {
                if a.get(y, x) != b.get(y, x) {
                    assert_eq!(mask.get(y, x), [1.0, 1.0, 1.0], "diff outside mask");
                    changed += 1;
                }
            }
        }
        assert!(changed > 0, "recolor must change pixels");
    }

    #[test]
    fn every_shape_covers_its_center_not_its_corner() {
        for kind in ShapeKind::ALL {
            let s = shape(kind);
            assert!(s.covers(0.5, 0.5), "{kind:?} center");
            assert!(!s.covers(0.02, 0.02), "{kind:?} far corner");
        }
    }

    #[test]
    fn triangle_rotation_moves_pixels() {
        let up = Scene {
            bg: ColorName::White,
            shapes: vec![shape(ShapeKind::Triangle)],
        };
        let mut quarter = up.clone();
        quarter.shapes[0].angle = std::f64::consts::FRAC_PI_2;
        assert_ne!(up.render(32, 32).data, quarter.render(32, 32).data);
        // A full turn is the identity up to rounding in the vertex math.
        let mut full = up.clone();
        full.shapes[0].angle = std::f64::consts::TAU;
        assert_eq!(up.render(32, 32).data, full.render(32, 32).data);
    }

    #[test]
    fn square_size_matches_its_circumradius() {
        let s = shape(ShapeKind::Square);
        let half = 0.25 / std::f64::consts::SQRT_2;
        assert!(s.covers(0.5 + half - 1e-9, 0.5));
        assert!(!s.covers(0.5 + half + 1e-9, 0.5 + half + 1e-9));
    }
}
