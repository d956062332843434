//! Report files: JSON, result tables, figure data, bar charts and overlays.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sfae_core::evaluation::{EvalReport, Metric};
use sfae_core::scoring::{threshold_map, AnomalyMap};

use crate::archive::{Archive, ArchiveTensor};
use crate::error::{Context, Error, Result};

pub fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).at(path)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).at(path)?;
    serde_json::from_slice(&bytes).at(path)
}

fn pm(m: sfae_core::evaluation::MeanStd) -> String {
    format!("{:.3}±{:.3}", m.mean, m.std)
}

/// One row per method: `method, pixel_ap, dice_at_5fpr, image_auroc`, each as
/// `mean±std`, plus the seed count and config hash.
pub fn write_table_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(["method", "pixel_ap", "dice_at_5fpr", "image_auroc", "n_seeds", "config_hash"])
        .at(path)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            pm(r.pixel_ap),
            pm(r.dice_at_5fpr),
            pm(r.image_auroc),
            r.n_seeds.to_string(),
            r.config_hash.clone(),
        ])
        .at(path)?;
    }
    w.flush().at(path)
}

/// Long-format bar-chart data: one row per method and metric.
pub fn write_figure_csv(reports: &[EvalReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).at(path)?;
    w.write_record(["method", "metric", "mean", "std", "n_seeds", "config_hash"]).at(path)?;
    for r in reports {
        for m in Metric::ALL {
            let s = r.summary(m);
            w.write_record([
                r.method.clone(),
                m.name().to_string(),
                format!("{:.6}", s.mean),
                format!("{:.6}", s.std),
                r.n_seeds.to_string(),
                r.config_hash.clone(),
            ])
            .at(path)?;
        }
    }
    w.flush().at(path)
}

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

/// Grouped bar chart, one group per metric and one colored bar per method,
/// with a dark whisker for ±std. The y axis spans `[0, 1]`.
pub fn render_bar_chart(reports: &[EvalReport]) -> (u32, u32, Vec<u8>) {
    let (bar, gap, margin, height) = (18usize, 24usize, 16usize, 240usize);
    let group = reports.len().max(1) * bar;
    let width = margin * 2 + Metric::ALL.len() * group + (Metric::ALL.len() - 1) * gap;
    let total_h = height + margin * 2;
    let mut px = vec![255u8; width * total_h * 3];
    let mut fill = |x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]| {
        for y in y0.min(total_h)..y1.min(total_h) {
            for x in x0.min(width)..x1.min(width) {
                px[(y * width + x) * 3..][..3].copy_from_slice(&c);
            }
        }
    };
    let base = margin + height;
    let y_of = |v: f64| base - (v.clamp(0.0, 1.0) * height as f64).round() as usize;
    fill(margin, width - margin, base, base + 1, [0, 0, 0]);
    for (g, m) in Metric::ALL.iter().enumerate() {
        let gx = margin + g * (group + gap);
        for (i, r) in reports.iter().enumerate() {
            let s = r.summary(*m);
            let x0 = gx + i * bar;
            fill(x0 + 2, x0 + bar - 2, y_of(s.mean), base, PALETTE[i % PALETTE.len()]);
            let cx = x0 + bar / 2;
            fill(cx, cx + 1, y_of(s.mean + s.std), y_of(s.mean - s.std) + 1, [0, 0, 0]);
        }
    }
    (width as u32, total_h as u32, px)
}

pub fn write_bar_chart_png(reports: &[EvalReport], path: &Path) -> Result<()> {
    let (w, h, rgb) = render_bar_chart(reports);
    write_png(path, w, h, png::ColorType::Rgb, &rgb)
}

fn write_png(path: &Path, width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().at(path)?;
    w.write_image_data(data).at(path)?;
    w.finish().at(path)
}

/// Threshold used for overlay panels.
pub const OVERLAY_THRESHOLD: f64 = 0.75;

/// Side-by-side grayscale panels: the input slice, its ground-truth mask and
/// the anomaly map thresholded at `t`.
pub fn overlay_pixels(slice: &[f32], mask: &[u8], map: &AnomalyMap, t: f64) -> Result<(u32, u32, Vec<u8>)> {
    let s = map.size;
    if slice.len() != s * s || mask.len() != s * s {
        return Err(Error::Core(sfae_core::Error::Shape(format!(
            "overlay panels need {s}x{s} inputs, got {} pixels and {} mask values",
            slice.len(),
            mask.len()
        ))));
    }
    let detected = threshold_map(map, t)?;
    let mut out = vec![0u8; 3 * s * s];
    for r in 0..s {
        let row = &mut out[r * 3 * s..(r + 1) * 3 * s];
        for c in 0..s {
            let i = r * s + c;
            row[c] = (slice[i].clamp(0.0, 1.0) * 255.0).round() as u8;
            row[s + c] = if mask[i] != 0 { 255 } else { 0 };
            row[2 * s + c] = if detected[i] != 0 { 255 } else { 0 };
        }
    }
    Ok((3 * s as u32, s as u32, out))
}

pub fn export_overlay(slice: &[f32], mask: &[u8], map: &AnomalyMap, path: &Path) -> Result<()> {
    export_overlay_at(slice, mask, map, OVERLAY_THRESHOLD, path)
}

pub fn export_overlay_at(slice: &[f32], mask: &[u8], map: &AnomalyMap, t: f64, path: &Path) -> Result<()> {
    let (w, h, px) = overlay_pixels(slice, mask, map, t)?;
    write_png(path, w, h, png::ColorType::Grayscale, &px)
}

/// Stores anomaly maps as an `[n, size, size]` archive with a JSON sidecar
/// (`<path>.json`) holding ids and image scores.
pub fn save_maps(maps: &[AnomalyMap], metadata: serde_json::Value, path: &Path) -> Result<()> {
    let size = maps.first().map_or(0, |m| m.size);
    if maps.iter().any(|m| m.size != size) {
        return Err(Error::Format("maps differ in size".into()));
    }
    let sidecar = serde_json::json!({
        "metadata": metadata,
        "ids": maps.iter().map(|m| &m.id).collect::<Vec<_>>(),
        "image_scores": maps.iter().map(|m| m.image_score).collect::<Vec<_>>(),
    });
    let mut archive = Archive::new(sidecar.clone());
    let values = maps.iter().flat_map(|m| m.pixel_scores.iter().copied()).collect();
    archive.insert("pixel_scores", ArchiveTensor::f32(vec![maps.len(), size, size], values)?);
    archive.save(path).at(path)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    write_json(&sidecar, Path::new(&side))
}

pub fn load_maps(path: &Path) -> Result<Vec<AnomalyMap>> {
    let archive = Archive::load(path).at(path)?;
    let ids: Vec<sfae_core::data::SliceId> = serde_json::from_value(archive.metadata["ids"].clone()).at(path)?;
    let scores: Vec<f64> = serde_json::from_value(archive.metadata["image_scores"].clone()).at(path)?;
    let t = archive.get("pixel_scores").at(path)?;
    let (Some(values), [n, size, _]) = (t.as_f32(), t.shape.as_slice()) else {
        return Err(Error::Format("pixel_scores must be an [n, size, size] f32 tensor".into()).at(path));
    };
    if ids.len() != *n || scores.len() != *n {
        return Err(Error::Format("sidecar does not match the map count".into()).at(path));
    }
    let plane = size * size;
    Ok(ids
        .into_iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (id, image_score))| AnomalyMap {
            id,
            size: *size,
            pixel_scores: values[i * plane..(i + 1) * plane].to_vec(),
            image_score,
        })
        .collect())
}
