//! Minimal raster line plots: accuracy per step on the left panel,
//! forgetting per step on the right, one color per run.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::runner::read_summary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub acc: Vec<f64>,
    pub fgt: Vec<f64>,
}

const PANEL_W: u32 = 320;
const PANEL_H: u32 = 240;
const PAD: u32 = 24;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

struct Panel {
    x0: u32,
    steps: usize,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn to_px(&self, step: usize, v: f64) -> (f64, f64) {
        let w = (PANEL_W - 2 * PAD) as f64;
        let h = (PANEL_H - 2 * PAD) as f64;
        let fx = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.5
        };
        let fy = (v - self.lo) / (self.hi - self.lo);
        (
            (self.x0 + PAD) as f64 + fx * w,
            (PANEL_H - PAD) as f64 - fy * h,
        )
    }

    fn frame(&self, img: &mut RgbImage) {
        let (l, r) = (self.x0 + PAD, self.x0 + PANEL_W - PAD);
        for k in 0..=4 {
            let (_, y) = self.to_px(0, self.lo + (self.hi - self.lo) * k as f64 / 4.0);
            hline(img, l, r, y.round() as u32, GRID);
        }
        for s in 0..self.steps {
            let (x, _) = self.to_px(s, self.lo);
            for dy in 0..4 {
                img.put_pixel(x.round() as u32, PANEL_H - PAD + dy, AXIS);
            }
        }
        if self.lo < 0.0 && self.hi > 0.0 {
            let (_, y) = self.to_px(0, 0.0);
            hline(img, l, r, y.round() as u32, AXIS);
        }
        hline(img, l, r, PANEL_H - PAD, AXIS);
        for y in PAD..=PANEL_H - PAD {
            img.put_pixel(l, y, AXIS);
        }
    }

    fn line(&self, img: &mut RgbImage, values: &[f64], color: Rgb<u8>) {
        let pts: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .map(|(s, &v)| self.to_px(s, v))
            .collect();
        for w in pts.windows(2) {
            segment(img, w[0], w[1], color);
        }
        for &(x, y) in &pts {
            for dx in -2i32..=2 {
                for dy in -2i32..=2 {
                    put(img, x + dx as f64, y + dy as f64, color);
                }
            }
        }
    }
}

fn hline(img: &mut RgbImage, l: u32, r: u32, y: u32, c: Rgb<u8>) {
    for x in l..=r {
        img.put_pixel(x, y, c);
    }
}

fn put(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn segment(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1) * 2;
    for i in 0..=n {
        let f = i as f64 / n as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        put(img, x, y, c);
        put(img, x, y + 1.0, c);
    }
}

/// Draws `curves` into a PNG at `path`. Accuracy is plotted on [0, 1];
/// the forgetting axis spans the observed range and always includes 0.
pub fn render_curves(path: &Path, curves: &[Curve]) -> Result<()> {
    let steps = curves.iter().map(|c| c.acc.len()).max().unwrap_or(0);
    if steps == 0 {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let fgt = curves.iter().flat_map(|c| c.fgt.iter().copied());
    let (flo, fhi) = fgt.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = (fhi - flo).max(0.05);
    let acc_panel = Panel {
        x0: 0,
        steps,
        lo: 0.0,
        hi: 1.0,
    };
    let fgt_panel = Panel {
        x0: PANEL_W,
        steps,
        lo: flo - 0.05 * span,
        hi: flo + 1.05 * span,
    };

    let mut img = RgbImage::from_pixel(2 * PANEL_W, PANEL_H, Rgb([255, 255, 255]));
    acc_panel.frame(&mut img);
    fgt_panel.frame(&mut img);
    for (k, c) in curves.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        acc_panel.line(&mut img, &c.acc, color);
        fgt_panel.line(&mut img, &c.fgt, color);
    }
    img.save(path).map_err(|e| Error::Reporting {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Plots the seed-mean curves of each completed run directory, in input
/// order, into one image.
pub fn plot(dirs: &[PathBuf], out: &Path) -> Result<()> {
    let curves = dirs
        .iter()
        .map(|d| {
            let s = read_summary(d)?;
            Ok(Curve {
                acc: s.acc_curve,
                fgt: s.fgt_curve,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    render_curves(out, &curves)
}
