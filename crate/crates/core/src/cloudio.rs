//! Point-cloud data model, CSV/PLY I/O, preprocessing and tiling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural point classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SemanticClass {
    Terrain = 0,
    LowVegetation = 1,
    Stem = 2,
    Branch = 3,
    Crown = 4,
}

impl SemanticClass {
    pub const COUNT: usize = 5;
    pub const ALL: [SemanticClass; 5] = [
        SemanticClass::Terrain,
        SemanticClass::LowVegetation,
        SemanticClass::Stem,
        SemanticClass::Branch,
        SemanticClass::Crown,
    ];

    pub fn from_id(id: i64) -> Result<Self> {
        match id {
            0 => Ok(SemanticClass::Terrain),
            1 => Ok(SemanticClass::LowVegetation),
            2 => Ok(SemanticClass::Stem),
            3 => Ok(SemanticClass::Branch),
            4 => Ok(SemanticClass::Crown),
            other => Err(Error::Class(other)),
        }
    }

    #[inline]
    pub fn id(self) -> usize {
        self as usize
    }

    /// Stem, branch and crown are tree classes.
    #[inline]
    pub fn is_tree(self) -> bool {
        matches!(self, SemanticClass::Stem | SemanticClass::Branch | SemanticClass::Crown)
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Terrain => "terrain",
            SemanticClass::LowVegetation => "low_vegetation",
            SemanticClass::Stem => "stem",
            SemanticClass::Branch => "branch",
            SemanticClass::Crown => "crown",
        }
    }
}

/// Columnar point cloud. All columns have the same length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    pub echo: Vec<f64>,
    pub semantic: Vec<SemanticClass>,
    /// Tree instance id, −1 for terrain and low vegetation.
    pub instance: Vec<i64>,
    /// Whether the point's labels are visible to training losses.
    pub labeled: Vec<bool>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn push(
        &mut self,
        xyz: [f64; 3],
        intensity: f64,
        echo: f64,
        semantic: SemanticClass,
        instance: i64,
    ) {
        self.xyz.push(xyz);
        self.intensity.push(intensity);
        self.echo.push(echo);
        self.semantic.push(semantic);
        self.instance.push(instance);
        self.labeled.push(true);
    }

    /// Checks column lengths, finiteness and label consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.intensity.len(),
            self.echo.len(),
            self.semantic.len(),
            self.instance.len(),
            self.labeled.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!(
                "column lengths differ: xyz {n}, others {lens:?}"
            )));
        }
        if let Some(i) = self.xyz.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("coordinates of point {i}")));
        }
        for i in 0..n {
            if self.instance[i] >= 0 && !self.semantic[i].is_tree() {
                return Err(Error::Input(format!(
                    "point {i} has instance {} but class {}",
                    self.instance[i],
                    self.semantic[i].name()
                )));
            }
        }
        Ok(())
    }

    /// Sub-cloud of the given point indices, in order.
    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            xyz: idx.iter().map(|&i| self.xyz[i]).collect(),
            intensity: idx.iter().map(|&i| self.intensity[i]).collect(),
            echo: idx.iter().map(|&i| self.echo[i]).collect(),
            semantic: idx.iter().map(|&i| self.semantic[i]).collect(),
            instance: idx.iter().map(|&i| self.instance[i]).collect(),
            labeled: idx.iter().map(|&i| self.labeled[i]).collect(),
        }
    }

    /// Appends another cloud's points.
    pub fn extend(&mut self, other: &PointCloud) {
        self.xyz.extend_from_slice(&other.xyz);
        self.intensity.extend_from_slice(&other.intensity);
        self.echo.extend_from_slice(&other.echo);
        self.semantic.extend_from_slice(&other.semantic);
        self.instance.extend_from_slice(&other.instance);
        self.labeled.extend_from_slice(&other.labeled);
    }

    /// Distinct non-negative instance ids, ascending.
    pub fn instance_ids(&self) -> Vec<i64> {
        let mut ids: Vec<i64> = self.instance.iter().copied().filter(|&i| i >= 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Point indices per instance id.
    pub fn instance_members(&self) -> BTreeMap<i64, Vec<usize>> {
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.instance.iter().enumerate() {
            if id >= 0 {
                map.entry(id).or_default().push(i);
            }
        }
        map
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }
}

pub const CSV_HEADER: &str = "x,y,z,intensity,echo,semantic,instance,labeled";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Column {
    X,
    Y,
    Z,
    Intensity,
    Echo,
    Semantic,
    Instance,
    Labeled,
}

impl Column {
    fn parse(name: &str) -> Option<Column> {
        Some(match name {
            "x" => Column::X,
            "y" => Column::Y,
            "z" => Column::Z,
            "intensity" => Column::Intensity,
            "echo" => Column::Echo,
            "semantic" => Column::Semantic,
            "instance" => Column::Instance,
            "labeled" => Column::Labeled,
            _ => return None,
        })
    }
}

fn schema_columns(path: &Path, names: &[&str]) -> Result<Vec<Column>> {
    let mut cols = Vec::with_capacity(names.len());
    for name in names {
        let c = Column::parse(name.trim()).ok_or_else(|| Error::Schema {
            path: path.to_path_buf(),
            msg: format!("unknown column `{}`", name.trim()),
        })?;
        if cols.contains(&c) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!("duplicate column `{}`", name.trim()),
            });
        }
        cols.push(c);
    }
    for req in [Column::X, Column::Y, Column::Z] {
        if !cols.contains(&req) {
            return Err(Error::Schema {
                path: path.to_path_buf(),
                msg: format!("missing required column {req:?}"),
            });
        }
    }
    Ok(cols)
}

fn parse_row(
    cloud: &mut PointCloud,
    cols: &[Column],
    fields: &[&str],
    path: &Path,
    line: usize,
) -> Result<()> {
    let perr = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    if fields.len() != cols.len() {
        return Err(perr(format!(
            "expected {} fields, found {}",
            cols.len(),
            fields.len()
        )));
    }
    let mut xyz = [0.0; 3];
    let (mut intensity, mut echo, mut semantic, mut instance, mut labeled) =
        (0.0, 0.0, SemanticClass::Terrain, -1i64, true);
    for (c, raw) in cols.iter().zip(fields) {
        let raw = raw.trim();
        let float = || -> Result<f64> {
            raw.parse::<f64>()
                .map_err(|_| perr(format!("`{raw}` is not a number ({c:?})")))
        };
        let int = || -> Result<i64> {
            raw.parse::<i64>()
                .map_err(|_| perr(format!("`{raw}` is not an integer ({c:?})")))
        };
        match c {
            Column::X => xyz[0] = float()?,
            Column::Y => xyz[1] = float()?,
            Column::Z => xyz[2] = float()?,
            Column::Intensity => intensity = float()?,
            Column::Echo => echo = float()?,
            Column::Semantic => {
                semantic = SemanticClass::from_id(int()?).map_err(|e| perr(e.to_string()))?
            }
            Column::Instance => instance = int()?,
            Column::Labeled => {
                labeled = match int()? {
                    0 => false,
                    1 => true,
                    v => return Err(perr(format!("labeled must be 0 or 1, got {v}"))),
                }
            }
        }
    }
    if xyz.iter().any(|v| !v.is_finite()) {
        return Err(perr("non-finite coordinate".into()));
    }
    cloud.push(xyz, intensity, echo, semantic, instance);
    *cloud.labeled.last_mut().unwrap() = labeled;
    Ok(())
}

fn parse_csv(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Schema {
        path: path.to_path_buf(),
        msg: "empty file".into(),
    })?;
    let names: Vec<&str> = header.split(',').collect();
    let cols = schema_columns(path, &names)?;
    let mut cloud = PointCloud::default();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        parse_row(&mut cloud, &cols, &fields, path, i + 1)?;
    }
    Ok(cloud)
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let schema = |msg: &str| Error::Schema {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let mut names = Vec::new();
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut header_done = false;
    for (_, line) in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["ply"] | [] => {}
            ["format", "ascii", _] => {}
            ["format", ..] => return Err(schema("only ASCII PLY is supported")),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|_| schema("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _ty, name] if in_vertex => names.push(name.to_string()),
            ["property", ..] if in_vertex => return Err(schema("list properties on vertices")),
            ["property", ..] => {}
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(schema(&format!("unexpected header line `{line}`"))),
        }
    }
    if !header_done {
        return Err(schema("missing end_header"));
    }
    let n = vertex_count.ok_or_else(|| schema("missing vertex element"))?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols = schema_columns(path, &refs)?;
    let mut cloud = PointCloud::default();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()).take(n) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        parse_row(&mut cloud, &cols, &fields, path, i + 1)?;
    }
    if cloud.len() != n {
        return Err(schema(&format!("header declares {n} vertices, found {}", cloud.len())));
    }
    Ok(cloud)
}

/// Reads a CSV or ASCII PLY point cloud. Missing label columns default to
/// semantic 0, instance −1 and labeled = true.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cloud = if text.trim_start().starts_with("ply") {
        parse_ply(&text, path)?
    } else {
        parse_csv(&text, path)?
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Canonical CSV text, six decimals, input point order.
pub fn to_csv_string(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(64 * (cloud.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.xyz[i];
        let _ = writeln!(
            out,
            "{x:.6},{y:.6},{z:.6},{:.6},{:.6},{},{},{}",
            cloud.intensity[i],
            cloud.echo[i],
            cloud.semantic[i].id(),
            cloud.instance[i],
            u8::from(cloud.labeled[i])
        );
    }
    out
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(cloud)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub cloud: PointCloud,
    pub offset_xy: [f64; 2],
    pub warnings: Vec<String>,
}

fn min_max_scale(values: &mut [f64], name: &str, warnings: &mut Vec<String>) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        let msg = format!("{name} column is constant; scaled to zero");
        log::warn!("{msg}");
        warnings.push(msg);
        values.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Recentres x and y on their centroid and min-max scales intensity and
/// echo to [0, 1]. z is left unchanged.
pub fn preprocess(cloud: &PointCloud) -> Result<Preprocessed> {
    if cloud.is_empty() {
        return Err(Error::Input("cannot preprocess an empty cloud".into()));
    }
    let n = cloud.len() as f64;
    let cx = cloud.xyz.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = cloud.xyz.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut out = cloud.clone();
    for p in &mut out.xyz {
        p[0] -= cx;
        p[1] -= cy;
    }
    let mut warnings = Vec::new();
    min_max_scale(&mut out.intensity, "intensity", &mut warnings);
    min_max_scale(&mut out.echo, "echo", &mut warnings);
    Ok(Preprocessed {
        cloud: out,
        offset_xy: [cx, cy],
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// Points shifted so their xy lies in `[0, size_m)²`.
    pub cloud: PointCloud,
    pub origin_xy: [f64; 2],
    pub size_m: f64,
    /// Source index of every tile point.
    pub indices: Vec<usize>,
}

/// Partitions the cloud into an axis-aligned grid of `size_m` squares.
/// Empty cells are omitted; tiles are ordered by cell (x, then y).
pub fn tile(cloud: &PointCloud, size_m: f64) -> Result<Vec<Tile>> {
    if !(size_m > 0.0) || !size_m.is_finite() {
        return Err(Error::Range(format!("tile size must be positive, got {size_m}")));
    }
    let mut cells: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.xyz.iter().enumerate() {
        let key = ((p[0] / size_m).floor() as i64, (p[1] / size_m).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    Ok(cells
        .into_iter()
        .map(|((cx, cy), indices)| {
            let origin = [cx as f64 * size_m, cy as f64 * size_m];
            let mut sub = cloud.select(&indices);
            for p in &mut sub.xyz {
                p[0] = (p[0] - origin[0]).clamp(0.0, size_m * (1.0 - f64::EPSILON));
                p[1] = (p[1] - origin[1]).clamp(0.0, size_m * (1.0 - f64::EPSILON));
            }
            Tile {
                cloud: sub,
                origin_xy: origin,
                size_m,
                indices,
            }
        })
        .collect())
}
