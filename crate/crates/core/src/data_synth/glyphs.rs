//! Procedural glyph renderer on small single-channel canvases.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// The glyph library; class `k` renders `Glyph::ALL[k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Bar,
    Cross,
    Ring,
    Corner,
    DotGrid,
    Triangle,
    Square,
    Chevron,
}

impl Glyph {
    pub const ALL: [Glyph; 8] = [
        Glyph::Bar,
        Glyph::Cross,
        Glyph::Ring,
        Glyph::Corner,
        Glyph::DotGrid,
        Glyph::Triangle,
        Glyph::Square,
        Glyph::Chevron,
    ];

    /// Distance (in glyph units) from `(u, v)` to the glyph stroke.
    fn distance(self, u: f64, v: f64) -> f64 {
        let seg = |a: (f64, f64), b: (f64, f64)| segment_distance((u, v), a, b);
        match self {
            Glyph::Bar => seg((-1.0, 0.0), (1.0, 0.0)),
            Glyph::Cross => seg((-1.0, 0.0), (1.0, 0.0)).min(seg((0.0, -1.0), (0.0, 1.0))),
            Glyph::Ring => ((u * u + v * v).sqrt() - 0.8).abs(),
            Glyph::Corner => seg((-0.8, -0.8), (-0.8, 0.8)).min(seg((-0.8, 0.8), (0.8, 0.8))),
            Glyph::DotGrid => {
                let mut d = f64::INFINITY;
                for (x, y) in [(-0.6, -0.6), (0.6, -0.6), (-0.6, 0.6), (0.6, 0.6)] {
                    d = d.min((((u - x).powi(2) + (v - y).powi(2)).sqrt() - 0.22).max(0.0));
                }
                d
            }
            Glyph::Triangle => {
                let (a, b, c) = ((0.0, -0.9), (0.85, 0.7), (-0.85, 0.7));
                seg(a, b).min(seg(b, c)).min(seg(c, a))
            }
            Glyph::Square => {
                let (a, b, c, d) = ((-0.75, -0.75), (0.75, -0.75), (0.75, 0.75), (-0.75, 0.75));
                seg(a, b).min(seg(b, c)).min(seg(c, d)).min(seg(d, a))
            }
            Glyph::Chevron => seg((-0.9, -0.5), (0.0, 0.5)).min(seg((0.0, 0.5), (0.9, -0.5))),
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Per-sample nuisance variation of the renderer.
#[derive(Clone, Copy, Debug)]
struct Jitter {
    cx: f64,
    cy: f64,
    half_extent: f64,
    angle: f64,
    stroke: f64,
    intensity: f64,
}

/// Renders one jittered glyph with background noise into `[h, w]`, values in `[0, 1]`.
pub fn render<R: Rng>(glyph: Glyph, h: usize, w: usize, rng: &mut R) -> Vec<f32> {
    let j = Jitter {
        cx: (w as f64 - 1.0) / 2.0 + rng.gen_range(-1.5..=1.5),
        cy: (h as f64 - 1.0) / 2.0 + rng.gen_range(-1.5..=1.5),
        half_extent: rng.gen_range(0.28..=0.36) * h.min(w) as f64,
        angle: rng.gen_range(-10f64..=10.0).to_radians(),
        stroke: rng.gen_range(1.2..=2.0),
        intensity: rng.gen_range(0.7..=1.0),
    };
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let (s, c) = j.angle.sin_cos();
    let mut img = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - j.cx, y as f64 - j.cy);
            let u = (c * dx + s * dy) / j.half_extent;
            let v = (-s * dx + c * dy) / j.half_extent;
            let d_px = glyph.distance(u, v) * j.half_extent;
            let coverage = (0.5 - (d_px - j.stroke / 2.0)).clamp(0.0, 1.0);
            let value = j.intensity * coverage + noise.sample(rng);
            img[y * w + x] = value.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

/// Bilinear rotation about the centre with zero fill.
pub fn rotate(img: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[y as usize * w + x as usize] as f64
        }
    };
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out[y * w + x] = v as f32;
        }
    }
    out
}

/// Separable Gaussian blur with edge clamping.
pub fn blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, (x as isize + off).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + off).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[sy as usize * w + sx as usize] as f64;
                }
                out[y * w + x] = (acc / norm) as f32;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn glyphs_are_distinct_and_in_range() {
        let mut imgs = Vec::new();
        for g in Glyph::ALL {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
            let img = render(g, 16, 16, &mut rng);
            assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(img.iter().sum::<f32>() > 5.0, "{g:?} too faint");
            imgs.push(img);
        }
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                let d: f32 = imgs[i].iter().zip(&imgs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 5.0, "{:?} vs {:?}", Glyph::ALL[i], Glyph::ALL[j]);
            }
        }
    }

    #[test]
    fn zero_rotation_and_blur_are_identity() {
        let img: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        assert_eq!(rotate(&img, 8, 8, 0.0), img);
        assert_eq!(blur(&img, 8, 8, 0.0), img);
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = vec![0.4f32; 36];
        for v in blur(&img, 6, 6, 1.0) {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }
}
