//! SVG rendering of the CSV files the other subcommands write.

use std::collections::BTreeMap;
use std::path::Path;

use raydn::eval::{svg_plot, svg_plot_in, PlotBounds};
use raydn::Error;

use crate::commands::{histogram_steps, prepare_outputs, write_file, Failure};

type Series = Vec<(String, Vec<(f64, f64)>)>;

enum Kind {
    Losses,
    PrCurves,
    Samples,
}

fn kind_of(header: &[&str]) -> Option<Kind> {
    match header {
        ["step", "total", "matching", "denoising"] => Some(Kind::Losses),
        ["class_id", "threshold", "recall", "precision"] => Some(Kind::PrCurves),
        ["index", "x", "offset"] => Some(Kind::Samples),
        _ => None,
    }
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), Failure> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok((header, rows))
}

fn num(path: &Path, v: &str) -> Result<f64, Failure> {
    v.parse().map_err(|_| Failure::input(format!("{}: {v:?} is not a number", path.display())))
}

fn render(path: &Path) -> Result<String, Failure> {
    let (header, rows) = read_rows(path)?;
    let names: Vec<&str> = header.iter().map(String::as_str).collect();
    let kind = kind_of(&names)
        .ok_or_else(|| Failure::input(format!("{}: unrecognized CSV header {:?}", path.display(), header.join(","))))?;
    match kind {
        Kind::Losses => {
            let mut series: Series = ["total", "matching", "denoising"].iter().map(|n| (n.to_string(), Vec::new())).collect();
            for r in &rows {
                let step = num(path, &r[0])?;
                for (k, s) in series.iter_mut().enumerate() {
                    s.1.push((step, num(path, &r[k + 1])?));
                }
            }
            let mut bounds = PlotBounds::fit(&series);
            bounds.y.0 = bounds.y.0.min(0.0);
            Ok(svg_plot_in("Training loss", "step", "loss", bounds, &series))
        }
        Kind::PrCurves => {
            let mut curves: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
            for r in rows.iter().filter(|r| r[0] == "all") {
                curves.entry((r[0].clone(), r[1].clone())).or_default().push((num(path, &r[2])?, num(path, &r[3])?));
            }
            let series: Series = curves.into_iter().map(|((_, t), pts)| (format!("{t} m"), pts)).collect();
            Ok(svg_plot("Precision-recall (all classes)", "recall", "precision", &series))
        }
        Kind::Samples => {
            let offsets = rows.iter().map(|r| num(path, &r[2])).collect::<Result<Vec<_>, _>>()?;
            let series = vec![("samples".to_string(), histogram_steps(&offsets, -1.0, 1.0, 40))];
            let mut bounds = PlotBounds::fit(&series);
            bounds.x = (-1.0, 1.0);
            Ok(svg_plot_in("Shifted Beta offsets", "offset", "density", bounds, &series))
        }
    }
}

pub fn run(inputs: &[std::path::PathBuf], out: &Path, force: bool) -> Result<(), Failure> {
    let mut names = Vec::with_capacity(inputs.len());
    for p in inputs {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)).into());
        }
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into());
        names.push(format!("{stem}.svg"));
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    prepare_outputs(out, &refs, force)?;
    for (p, name) in inputs.iter().zip(&names) {
        write_file(&out.join(name), render(p)?)?;
    }
    println!("wrote {} plots to {}", names.len(), out.display());
    Ok(())
}
