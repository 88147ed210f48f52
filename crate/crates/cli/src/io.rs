//! File formats: point clouds (CSV or ASCII PLY) and JSON documents.

use std::fs;
use std::io::Write;
use std::path::Path;

use circlecal_core::ellipse::{Conic, EllipseInput};
use circlecal_core::{Intrinsics, Vec3};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::CliError;

/// Reads an `x,y,z` CSV (extra columns ignored) or an ASCII PLY, chosen by
/// extension.
pub fn read_cloud(path: &Path) -> Result<Vec<Vec3>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim().is_empty() {
        return Err(CliError::Input(format!("{}: empty file", path.display())));
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let points = if ext.eq_ignore_ascii_case("ply") {
        parse_ply(&text)
    } else {
        parse_csv(&text)
    }
    .map_err(|m| CliError::Input(format!("{}: {m}", path.display())))?;
    if points.is_empty() {
        return Err(CliError::Input(format!("{}: no points", path.display())));
    }
    Ok(points)
}

pub fn parse_csv(text: &str) -> Result<Vec<Vec3>, String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| format!("missing '{name}' column"))
    };
    let idx = [col("x")?, col("y")?, col("z")?];
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let mut p = Vec3::zeros();
        for (k, &i) in idx.iter().enumerate() {
            p[k] = rec
                .get(i)
                .and_then(|s| s.parse().ok())
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| format!("row {}: bad coordinate", line + 2))?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn parse_ply(text: &str) -> Result<Vec<Vec3>, String> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("not a PLY file".into());
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    for line in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => return Err(format!("unsupported PLY format '{fmt}'")),
            ["element", "vertex", n] => {
                vertices = Some(n.parse::<usize>().map_err(|_| "bad vertex count")?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let n = vertices.ok_or("no vertex element")?;
    let pos = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| format!("missing vertex property '{name}'"))
    };
    let idx = [pos("x")?, pos("y")?, pos("z")?];
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.filter(|l| !l.trim().is_empty()).take(n).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| format!("vertex {i}: bad value '{s}'")))
            .collect::<Result<_, _>>()?;
        let get = |j: usize| vals.get(j).copied().ok_or_else(|| format!("vertex {i}: too few values"));
        out.push(Vec3::new(get(idx[0])?, get(idx[1])?, get(idx[2])?));
    }
    if out.len() != n {
        return Err(format!("expected {n} vertices, found {}", out.len()));
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, CliError> {
    read_json(path)
}

/// Reads an ellipse given either as `{"Q": ...}` or as geometric parameters.
pub fn read_ellipse(path: &Path) -> Result<Conic, CliError> {
    let input: EllipseInput = read_json(path)?;
    input
        .to_conic()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Writes pretty JSON to `path`, or to `stdout` when no path is given.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>, stdout: &mut dyn Write) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("outputs serialize");
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p, e)),
        None => writeln!(stdout, "{text}").map_err(|e| CliError::Input(e.to_string())),
    }
}
