//! Metrics CSV files and curve plots.

use std::path::Path;

use ia2u_core::tasks::metrics::MetricReport;
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::png_io::write_rgb;

/// Id of the aggregate row.
pub const MEAN_ROW: &str = "mean";

/// `id,<columns>` header, one row per entry and a final `mean` row. Numbers
/// use the shortest text that parses back to the same `f64`.
pub fn write_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    let row = |w: &mut csv::Writer<std::fs::File>, id: &str, vals: &[f64]| {
        let mut rec = vec![id.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::format(path, e))
    };
    let mut header = vec!["id".to_string()];
    header.extend(report.columns.iter().cloned());
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for (id, vals) in &report.rows {
        row(&mut w, id, vals)?;
    }
    row(&mut w, MEAN_ROW, &report.mean())?;
    w.flush().map_err(Error::io(path))
}

/// Read a file written by [`write_csv`]; the `mean` row is returned
/// separately.
pub fn read_csv(path: &Path) -> Result<(MetricReport, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let header = r.headers().map_err(|e| Error::format(path, e))?.clone();
    if header.get(0) != Some("id") {
        return Err(Error::format(path, "first column must be 'id'"));
    }
    let cols: Vec<&str> = header.iter().skip(1).collect();
    let mut report = MetricReport::new(&cols);
    let mut mean = None;
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e))?;
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>().map_err(|e| Error::format(path, format!("'{v}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match &rec[0] {
            MEAN_ROW => mean = Some(vals),
            id => report.push(id, vals),
        }
    }
    let mean = mean.ok_or_else(|| Error::format(path, "no mean row"))?;
    Ok((report, mean))
}

/// Human-readable table, same numbers as the CSV.
pub fn format_report(report: &MetricReport) -> String {
    let mut out = format!("id,{}\n", report.columns.join(","));
    let line = |id: &str, v: &[f64]| {
        let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        format!("{id},{}\n", vals.join(","))
    };
    for (id, v) in &report.rows {
        out += &line(id, v);
    }
    out + &line(MEAN_ROW, &report.mean())
}

const PLOT_W: u32 = 480;
const PLOT_H: u32 = 320;

/// Line plot of `values` against their index, written as an RGB PNG. Lines
/// only, no text, so no font backend is needed.
pub fn plot_curve(path: &Path, values: &[f64]) -> Result<()> {
    let mut buf = vec![255u8; (PLOT_W * PLOT_H * 3) as usize];
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = if hi > lo { (hi - lo) * 0.05 } else { 1.0 };
        let mut draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
            let root = BitMapBackend::with_buffer(&mut buf, (PLOT_W, PLOT_H)).into_drawing_area();
            let x_max = (values.len().max(2) - 1) as f64;
            let mut chart = ChartBuilder::on(&root)
                .margin(16)
                .build_cartesian_2d(0.0..x_max, (lo - pad)..(hi + pad))?;
            chart.plotting_area().draw(&Rectangle::new(
                [(0.0, lo - pad), (x_max, hi + pad)],
                BLACK.stroke_width(1),
            ))?;
            let points = values.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (i as f64, v));
            chart.draw_series(LineSeries::new(points.clone(), BLUE.stroke_width(2)))?;
            chart.draw_series(points.map(|p| Circle::new(p, 3, BLUE.filled())))?;
            root.present()?;
            Ok(())
        };
        draw().map_err(|e| Error::format(path, e))?;
    }
    write_rgb(path, &buf, PLOT_H as usize, PLOT_W as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trips_values_and_mean() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricReport::new(&["psnr", "ssim"]);
        r.push("a", vec![21.123456789012345, 0.1]);
        r.push("b", vec![1.0 / 3.0, 0.7]);
        let p = dir.path().join("m.csv");
        write_csv(&p, &r).unwrap();
        let (back, mean) = read_csv(&p).unwrap();
        assert_eq!(back, r);
        assert_eq!(mean, r.mean());
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("id,psnr,ssim\n"));
        assert_eq!(format_report(&r), text);
    }

    #[test]
    fn plot_writes_a_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        plot_curve(&p, &[3.0, 2.0, 1.5, f64::NAN, 1.0]).unwrap();
        let img = crate::png_io::read_png(&p).unwrap();
        assert_eq!((img.height(), img.width()), (PLOT_H as usize, PLOT_W as usize));
        plot_curve(&p, &[]).unwrap();
        plot_curve(&p, &[2.0]).unwrap();
    }
}
