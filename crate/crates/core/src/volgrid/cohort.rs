//! Cohort manifests: CSV with header `id,image,label,domain`. `label` may be
//! empty and paths are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Cohort(format!("unknown domain tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub label_path: Option<PathBuf>,
    pub domain: Domain,
}

impl SubjectRecord {
    /// Record for an in-memory subject with no backing files.
    pub fn in_memory(id: impl Into<String>, domain: Domain) -> Self {
        SubjectRecord {
            id: id.into(),
            image_path: PathBuf::new(),
            label_path: None,
            domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub name: String,
    subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn new(name: impl Into<String>, subjects: Vec<SubjectRecord>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Cohort("cohort is empty".into()));
        }
        let mut seen = HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Cohort(format!("duplicate subject id {:?}", s.id)));
            }
        }
        Ok(Cohort {
            name: name.into(),
            subjects,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SubjectRecord> {
        self.subjects.iter().find(|s| s.id == id)
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_cohort(manifest: impl AsRef<Path>) -> Result<Cohort> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest, io),
            other => Error::Cohort(format!("{}: {other:?}", manifest.display())),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Cohort(format!("{}: {e}", manifest.display())))?
        .clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Cohort(format!(
                "{}: missing required column {name:?}",
                manifest.display()
            ))
        })
    };
    let (ci, cm, cl, cd) = (col("id")?, col("image")?, col("label")?, col("domain")?);

    let mut subjects = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Cohort(format!("{}: {e}", manifest.display())))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = field(ci).to_string();
        if id.is_empty() {
            return Err(Error::Cohort(format!("row {}: empty id", row + 1)));
        }
        let label = field(cl);
        subjects.push(SubjectRecord {
            image_path: resolve(base, field(cm)),
            label_path: (!label.is_empty()).then(|| resolve(base, label)),
            domain: field(cd)
                .parse()
                .map_err(|e: Error| Error::Cohort(format!("row {}: {e}", row + 1)))?,
            id,
        });
    }
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Cohort::new(name, subjects)
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base)
        .unwrap_or(p)
        .to_string_lossy()
        .into_owned()
}

/// Writes `cohort` as a manifest at `path`, with paths made relative to its
/// directory where possible.
pub fn write_manifest(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Cohort(format!("{other:?}")),
    })?;
    let werr = |e: csv::Error| Error::Cohort(format!("{}: {e}", path.display()));
    w.write_record(["id", "image", "label", "domain"]).map_err(werr)?;
    for s in cohort.subjects() {
        let label = s
            .label_path
            .as_deref()
            .map(|p| relative(base, p))
            .unwrap_or_default();
        w.write_record([
            s.id.as_str(),
            &relative(base, &s.image_path),
            &label,
            &s.domain.to_string(),
        ])
        .map_err(werr)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
