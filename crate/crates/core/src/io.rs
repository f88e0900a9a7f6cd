//! Point-cloud, correspondence and result files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Correspondence, RigidTransform, Vec3};
use crate::knn::PointCloud;
use crate::metrics::MetricsReport;
use crate::ransac::{RegistrationResult, RoundTrace};
use crate::sus::SusDecision;

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then_some((i + 1, l))
    })
}

fn parse_floats(path: &Path, line: usize, tokens: &[&str]) -> Result<Vec<f64>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("not a finite number: {t:?}")))
        })
        .collect()
}

/// Loads `.xyz` or ASCII `.ply` by extension.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    match ext.as_str() {
        "xyz" | "txt" => {
            let text = fs::read_to_string(path)?;
            parse_xyz(path, &text)
        }
        "ply" => {
            let bytes = fs::read(path)?;
            parse_ply(path, &bytes)
        }
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            message: format!("unknown extension {ext:?}; expected .xyz or .ply"),
        }),
    }
}

fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (line, l) in data_lines(text) {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() != 3 {
            return Err(parse_err(
                path,
                line,
                format!("expected 3 coordinates, found {}", tokens.len()),
            ));
        }
        let v = parse_floats(path, line, &tokens)?;
        points.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud::new(points))
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    // the header is ASCII even for binary files, so read it before decoding
    let text = String::from_utf8_lossy(bytes);
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    let mut header_done = false;
    for (line, l) in lines.by_ref() {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => ascii = true,
            ["format", fmt, _] => {
                return Err(Error::UnsupportedFormat {
                    path: path.to_path_buf(),
                    message: format!("PLY format {fmt} (only ascii is supported)"),
                })
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("bad element count {count:?}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, line, "property before element"))?;
                if el.name == "vertex" {
                    return Err(Error::UnsupportedFormat {
                        path: path.to_path_buf(),
                        message: "list properties on vertices".into(),
                    });
                }
                el.properties.push(tokens.last().unwrap().to_string());
            }
            ["property", _ty, name] => elements
                .last_mut()
                .ok_or_else(|| parse_err(path, line, "property before element"))?
                .properties
                .push(name.to_string()),
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, line, format!("unrecognized header line {l:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, 0, "missing end_header"));
    }
    if !ascii {
        return Err(parse_err(path, 0, "missing format line"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, 0, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    let col = |axis: &str| {
        vertex
            .properties
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| parse_err(path, 0, format!("vertex element lacks property {axis}")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let skip: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();

    let mut body = lines.filter(|(_, l)| !l.is_empty()).skip(skip);
    let mut points = Vec::with_capacity(vertex.count);
    for k in 0..vertex.count {
        let (line, l) = body
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("file ends after {k} of {} vertices", vertex.count)))?;
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() != vertex.properties.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} values, found {}", vertex.properties.len(), tokens.len()),
            ));
        }
        let v = parse_floats(path, line, &[tokens[cx], tokens[cy], tokens[cz]])?;
        points.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(PointCloud::new(points))
}

/// Writes `x y z` lines with round-trip precision.
pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * 60);
    for p in &cloud.points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Loads `i j` index pairs or `sx sy sz tx ty tz` rows; the form is fixed by
/// the first data line.
pub fn load_correspondences(
    path: impl AsRef<Path>,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<Vec<Correspondence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_correspondences(path, &text, source, target)
}

fn parse_correspondences(
    path: &Path,
    text: &str,
    source: &PointCloud,
    target: &PointCloud,
) -> Result<Vec<Correspondence>> {
    let mut width = None;
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let tokens: Vec<&str> = l.split_whitespace().collect();
        let w = *width.get_or_insert(tokens.len());
        if w != 2 && w != 6 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 indices or 6 coordinates, found {} tokens", tokens.len()),
            ));
        }
        if tokens.len() != w {
            return Err(parse_err(
                path,
                line,
                format!("expected {w} tokens, found {}", tokens.len()),
            ));
        }
        if w == 2 {
            let idx = |t: &str, cloud: &PointCloud| -> Result<Vec3> {
                let index: usize = t
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("not an index: {t:?}")))?;
                cloud.points.get(index).copied().ok_or(Error::IndexOutOfRange {
                    path: path.to_path_buf(),
                    line,
                    index,
                    len: cloud.len(),
                })
            };
            out.push(Correspondence::new(idx(tokens[0], source)?, idx(tokens[1], target)?));
        } else {
            let v = parse_floats(path, line, &tokens)?;
            out.push(Correspondence::new(
                Vec3::new(v[0], v[1], v[2]),
                Vec3::new(v[3], v[4], v[5]),
            ));
        }
    }
    Ok(out)
}

/// Writes `i j` index pairs.
pub fn write_index_correspondences(path: impl AsRef<Path>, pairs: &[(usize, usize)]) -> Result<()> {
    let mut out = String::with_capacity(pairs.len() * 12);
    for (i, j) in pairs {
        writeln!(out, "{i} {j}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Ground-truth or result transform stored as `{"rotation": [9], "translation": [3]}`.
pub fn load_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn write_transform(path: impl AsRef<Path>, t: &RigidTransform) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(t)?)?;
    Ok(())
}

/// On-disk layout of a registration result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFile {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub rounds: usize,
    pub total_iterations: u64,
    pub final_confidence: f64,
    pub inlier_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub trace: Vec<RoundTrace>,
}

impl ResultFile {
    pub fn new(result: &RegistrationResult, metrics: Option<MetricsReport>) -> Self {
        let t = &result.transform.translation;
        Self {
            rotation: result.transform.rotation_row_major(),
            translation: [t.x, t.y, t.z],
            rounds: result.rounds,
            total_iterations: result.total_iterations,
            final_confidence: result.final_confidence,
            inlier_indices: result.inlier_indices.clone(),
            metrics,
            trace: result.per_round_trace.clone(),
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_row_major(self.rotation, self.translation)
    }
}

pub fn emit_result(result: &RegistrationResult, metrics: Option<MetricsReport>, path: impl AsRef<Path>) -> Result<()> {
    let file = ResultFile::new(result, metrics);
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

pub fn load_result(path: impl AsRef<Path>) -> Result<ResultFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

/// One CSV row per self-update decision of a round.
pub fn sus_decisions_csv(decisions: &[SusDecision]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["correspondence_index", "action", "rule", "probability", "threshold"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for d in decisions {
        w.write_record([
            d.correspondence_index.to_string(),
            format!("{:?}", d.action),
            format!("{:?}", d.rule_applied),
            opt(d.probability),
            opt(d.threshold_drawn),
        ])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// `<dir>/<name>`, creating `dir` if needed.
pub fn output_file(dir: impl AsRef<Path>, name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
