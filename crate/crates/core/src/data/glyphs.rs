//! Ten stroke-drawn digit templates and their anti-aliased rasterizer.

/// Polylines in unit coordinates, `x` to the right and `y` down.
type Stroke = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f32 / steps as f32).to_radians();
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

pub const NUM_GLYPHS: usize = 10;

pub fn strokes(class: usize) -> Vec<Stroke> {
    match class % NUM_GLYPHS {
        0 => vec![arc(0.5, 0.5, 0.22, 0.33, 0.0, 360.0, 24)],
        1 => vec![vec![(0.36, 0.3), (0.52, 0.16), (0.52, 0.85)]],
        2 => vec![vec![
            (0.27, 0.3),
            (0.36, 0.18),
            (0.55, 0.15),
            (0.71, 0.24),
            (0.72, 0.4),
            (0.27, 0.85),
            (0.76, 0.85),
        ]],
        3 => vec![vec![
            (0.28, 0.18),
            (0.7, 0.18),
            (0.47, 0.45),
            (0.69, 0.57),
            (0.7, 0.75),
            (0.52, 0.86),
            (0.28, 0.8),
        ]],
        4 => vec![vec![(0.62, 0.86), (0.62, 0.15), (0.24, 0.64), (0.8, 0.64)]],
        5 => vec![vec![
            (0.72, 0.16),
            (0.33, 0.16),
            (0.3, 0.47),
            (0.55, 0.42),
            (0.72, 0.55),
            (0.7, 0.76),
            (0.5, 0.87),
            (0.28, 0.8),
        ]],
        6 => vec![
            vec![(0.66, 0.16), (0.42, 0.33), (0.31, 0.58)],
            arc(0.5, 0.67, 0.19, 0.19, 180.0, 540.0, 20),
        ],
        7 => vec![vec![(0.25, 0.16), (0.76, 0.16), (0.45, 0.86)]],
        8 => vec![
            arc(0.5, 0.32, 0.17, 0.16, 0.0, 360.0, 18),
            arc(0.5, 0.68, 0.2, 0.18, 0.0, 360.0, 18),
        ],
        _ => vec![
            arc(0.5, 0.34, 0.19, 0.18, 0.0, 360.0, 20),
            vec![(0.69, 0.36), (0.6, 0.86)],
        ],
    }
}

/// Affine map from output pixel space back into glyph space.
#[derive(Debug, Clone, Copy)]
pub struct Jitter {
    pub rotation: f32,
    pub scale: f32,
    pub shear: f32,
    pub dx: f32,
    pub dy: f32,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        rotation: 0.0,
        scale: 1.0,
        shear: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    /// Inverse transform of a point in unit image space around the center.
    fn to_glyph(&self, x: f32, y: f32) -> (f32, f32) {
        let (x, y) = (x - 0.5 - self.dx, y - 0.5 - self.dy);
        let (s, c) = (-self.rotation).sin_cos();
        let (x, y) = (c * x - s * y, s * x + c * y);
        let x = x - self.shear * y;
        (x / self.scale + 0.5, y / self.scale + 0.5)
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Rasterize a glyph to an `h x w` coverage mask in `[0, 1]`.
///
/// `half_width` is the stroke half-thickness in unit coordinates; edges are
/// anti-aliased over one pixel.
pub fn rasterize(class: usize, h: usize, w: usize, half_width: f32, jitter: &Jitter) -> Vec<f32> {
    let strokes = strokes(class);
    let px = 1.0 / h.max(w) as f32;
    let mut mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let p = jitter.to_glyph((j as f32 + 0.5) / w as f32, (i as f32 + 0.5) / h as f32);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |seg| segment_distance(p, seg[0], seg[1])))
                .fold(f32::INFINITY, f32::min);
            // glyph space distance back to pixel units
            let d = d * jitter.scale;
            mask[i * w + j] = ((half_width - d) / px + 0.5).clamp(0.0, 1.0);
        }
    }
    mask
}
