//! CSV-to-PNG chart emission for training curves and ablation sweeps.
//! Rendering is self-contained: simple polylines on an RGB canvas with an
//! embedded 5x7 bitmap font, so no system font stack is involved.

use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::{Path, PathBuf};

const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

// 5x7 glyphs as row strings; '#' marks a lit pixel.
fn glyph(ch: char) -> Option<[&'static str; 7]> {
    let g: [&'static str; 7] = match ch.to_ascii_uppercase() {
        'A' => [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
        'B' => ["#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "],
        'C' => [" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "],
        'D' => ["#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "],
        'E' => ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"],
        'F' => ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "],
        'G' => [" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ### "],
        'H' => ["#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
        'I' => [" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
        'J' => ["  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "],
        'K' => ["#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"],
        'L' => ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"],
        'M' => ["#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"],
        'N' => ["#   #", "##  #", "# # #", "#  ##", "#   #", "#   #", "#   #"],
        'O' => [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
        'P' => ["#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "],
        'Q' => [" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"],
        'R' => ["#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"],
        'S' => [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "],
        'T' => ["#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "],
        'U' => ["#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
        'V' => ["#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "],
        'W' => ["#   #", "#   #", "#   #", "# # #", "# # #", "## ##", "#   #"],
        'X' => ["#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"],
        'Y' => ["#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "],
        'Z' => ["#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"],
        '0' => [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
        '1' => ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
        '2' => [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
        '3' => [" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "],
        '4' => ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
        '5' => ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
        '6' => [" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "],
        '7' => ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
        '8' => [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
        '9' => [" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "],
        '.' => ["     ", "     ", "     ", "     ", "     ", " ##  ", " ##  "],
        '-' => ["     ", "     ", "     ", "#####", "     ", "     ", "     "],
        '+' => ["     ", "  #  ", "  #  ", "#####", "  #  ", "  #  ", "     "],
        '_' => ["     ", "     ", "     ", "     ", "     ", "     ", "#####"],
        ':' => ["     ", " ##  ", " ##  ", "     ", " ##  ", " ##  ", "     "],
        '/' => ["    #", "    #", "   # ", "  #  ", " #   ", "#    ", "#    "],
        ' ' => ["     ", "     ", "     ", "     ", "     ", "     ", "     "],
        _ => return None,
    };
    Some(g)
}

fn draw_text(img: &mut RgbImage, x: i32, y: i32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, row) in rows.iter().enumerate() {
                for (rx, cell) in row.chars().enumerate() {
                    if cell == '#' {
                        let (px, py) = (cx + rx as i32, y + ry as i32);
                        if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                            img.put_pixel(px as u32, py as u32, Rgb(color));
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{v:.1e}")
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn render_panel(
    title: &str,
    series: &[Series],
    x_tick_labels: Option<&[String]>,
    path: &Path,
) -> Result<()> {
    let (w, h) = (720u32, 440u32);
    let (ml, mr, mt, mb) = (70i32, 20i32, 30i32, 50i32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let plot_w = w as i32 - ml - mr;
    let plot_h = h as i32 - mt - mb;

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !xmin.is_finite() {
        return Err(Error::InvalidInput("no data points to plot".into()));
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 1.0;
        ymin -= 1.0;
    } else {
        let pad = (ymax - ymin) * 0.06;
        ymin -= pad;
        ymax += pad;
    }

    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            ml as f64 + (x - xmin) / (xmax - xmin) * plot_w as f64,
            (mt + plot_h) as f64 - (y - ymin) / (ymax - ymin) * plot_h as f64,
        )
    };

    let axis = [60u8, 60, 60];
    let grid = [225u8, 225, 225];
    // y ticks and gridlines
    for i in 0..=4 {
        let yv = ymin + (ymax - ymin) * i as f64 / 4.0;
        let (_, py) = to_px(xmin, yv);
        draw_line(&mut img, ml as f64, py, (ml + plot_w) as f64, py, grid);
        let label = format_tick(yv);
        draw_text(&mut img, ml - 6 - 6 * label.len() as i32, py as i32 - 3, &label, axis);
    }
    // x ticks
    match x_tick_labels {
        Some(labels) => {
            for (i, label) in labels.iter().enumerate() {
                let (px, _) = to_px(i as f64, ymin);
                draw_line(&mut img, px, (mt + plot_h) as f64, px, (mt + plot_h + 4) as f64, axis);
                draw_text(
                    &mut img,
                    px as i32 - 3 * label.len() as i32,
                    mt + plot_h + 10,
                    label,
                    axis,
                );
            }
        }
        None => {
            for i in 0..=4 {
                let xv = xmin + (xmax - xmin) * i as f64 / 4.0;
                let (px, _) = to_px(xv, ymin);
                draw_line(&mut img, px, (mt + plot_h) as f64, px, (mt + plot_h + 4) as f64, axis);
                let label = format_tick(xv);
                draw_text(
                    &mut img,
                    px as i32 - 3 * label.len() as i32,
                    mt + plot_h + 10,
                    &label,
                    axis,
                );
            }
        }
    }
    // axes
    draw_line(&mut img, ml as f64, mt as f64, ml as f64, (mt + plot_h) as f64, axis);
    draw_line(
        &mut img,
        ml as f64,
        (mt + plot_h) as f64,
        (ml + plot_w) as f64,
        (mt + plot_h) as f64,
        axis,
    );
    draw_text(&mut img, ml, 10, title, [0, 0, 0]);

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut last: Option<(f64, f64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(prev) = last {
                draw_line(&mut img, prev.0, prev.1, p.0, p.1, color);
            }
            // small marker
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (mx, my) = (p.0 as i32 + dx, p.1 as i32 + dy);
                    if mx >= 0 && my >= 0 && (mx as u32) < w && (my as u32) < h {
                        img.put_pixel(mx as u32, my as u32, Rgb(color));
                    }
                }
            }
            last = Some(p);
        }
        // legend
        let ly = mt + 8 + 12 * si as i32;
        let lx = ml + plot_w - 150;
        draw_line(&mut img, lx as f64, ly as f64 + 3.0, lx as f64 + 14.0, ly as f64 + 3.0, color);
        draw_text(&mut img, lx + 18, ly, &s.name, axis);
    }

    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidInput(format!("{} is empty", path.display())))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.trim().to_string()).collect());
    }
    Ok(CsvTable { header, rows })
}

fn numeric_column(table: &CsvTable, idx: usize) -> Result<Vec<f64>> {
    table
        .rows
        .iter()
        .map(|r| {
            r[idx]
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("non-numeric cell '{}'", r[idx])))
        })
        .collect()
}

/// Render one PNG per configured panel for each CSV. Training-curve CSVs
/// (`step,lr,...,total`) emit a loss panel and an lr panel; ablation CSVs
/// (`sweep,value,...`) emit a PSNR panel and an SSIM panel.
pub fn plot(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::new();
    for csv in csv_paths {
        let table = read_csv(csv)?;
        let stem = csv
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("curve")
            .to_string();
        if table.header.first().map(String::as_str) == Some("step") {
            let steps = numeric_column(&table, 0)?;
            let mut loss_series = Vec::new();
            for (i, name) in table.header.iter().enumerate().skip(2) {
                let ys = numeric_column(&table, i)?;
                loss_series.push(Series {
                    name: name.clone(),
                    points: steps.iter().cloned().zip(ys).collect(),
                });
            }
            let loss_path = out_dir.join(format!("{stem}_loss.png"));
            render_panel(&format!("{stem}: loss vs step"), &loss_series, None, &loss_path)?;
            outputs.push(loss_path);

            let lr = numeric_column(&table, 1)?;
            let lr_path = out_dir.join(format!("{stem}_lr.png"));
            render_panel(
                &format!("{stem}: lr vs step"),
                &[Series {
                    name: "lr".into(),
                    points: steps.iter().cloned().zip(lr).collect(),
                }],
                None,
                &lr_path,
            )?;
            outputs.push(lr_path);
        } else if table.header.first().map(String::as_str) == Some("sweep") {
            let labels: Vec<String> = table.rows.iter().map(|r| r[1].clone()).collect();
            let col = |name: &str| -> Result<Vec<f64>> {
                let idx = table
                    .header
                    .iter()
                    .position(|h| h == name)
                    .ok_or_else(|| Error::InvalidInput(format!("missing column {name}")))?;
                numeric_column(&table, idx)
            };
            for (metric, suffix) in [("psnr", "psnr"), ("ssim", "ssim")] {
                let cons = col(&format!("constructor_{metric}"))?;
                let dew = col(&format!("dew_{metric}"))?;
                let series = vec![
                    Series {
                        name: format!("constructor {metric}"),
                        points: cons.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect(),
                    },
                    Series {
                        name: format!("dew {metric}"),
                        points: dew.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect(),
                    },
                ];
                let path = out_dir.join(format!("{stem}_{suffix}.png"));
                render_panel(
                    &format!("{stem}: {metric} vs cell"),
                    &series,
                    Some(&labels),
                    &path,
                )?;
                outputs.push(path);
            }
        } else {
            return Err(Error::InvalidInput(format!(
                "{}: unrecognized CSV layout (expected a training curve or ablation table)",
                csv.display()
            )));
        }
    }
    Ok(outputs)
}
