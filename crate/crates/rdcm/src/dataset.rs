//! Manifest plus one JSON Lines file per domain.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rdcm_core::data::{DatasetBundle, Domain, FeatureLayout, Sample, TextLayout};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Pooled,
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextDim {
    Pooled(usize),
    Sequence { seq_len: usize, emb_dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelCounts {
    #[serde(rename = "0")]
    pub real: usize,
    #[serde(rename = "1")]
    pub fake: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: String,
    pub file: String,
    pub count: usize,
    pub label_counts: LabelCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub text_mode: TextMode,
    pub text_dim: TextDim,
    pub vis_dim: usize,
    pub inst_dim: usize,
    pub domains: Vec<DomainEntry>,
}

impl Manifest {
    pub fn layout(&self) -> Result<FeatureLayout> {
        let text = match (self.text_mode, self.text_dim) {
            (TextMode::Pooled, TextDim::Pooled(dim)) => TextLayout::Pooled { dim },
            (TextMode::Sequence, TextDim::Sequence { seq_len, emb_dim }) => TextLayout::Sequence { seq_len, emb_dim },
            (mode, dim) => {
                return Err(RunError::Load(format!(
                    "manifest text_mode {mode:?} does not match text_dim {dim:?}"
                )))
            }
        };
        if text.width() == 0 || self.vis_dim == 0 || self.inst_dim == 0 {
            return Err(RunError::Load("manifest dimensions must be positive".into()));
        }
        Ok(FeatureLayout {
            text,
            vis_dim: self.vis_dim,
            inst_dim: self.inst_dim,
        })
    }

    pub fn for_domains(name: &str, layout: &FeatureLayout, domains: &[&Domain]) -> Self {
        let (text_mode, text_dim) = match layout.text {
            TextLayout::Pooled { dim } => (TextMode::Pooled, TextDim::Pooled(dim)),
            TextLayout::Sequence { seq_len, emb_dim } => (TextMode::Sequence, TextDim::Sequence { seq_len, emb_dim }),
        };
        Self {
            name: name.into(),
            text_mode,
            text_dim,
            vis_dim: layout.vis_dim,
            inst_dim: layout.inst_dim,
            domains: domains
                .iter()
                .map(|d| {
                    let [real, fake] = d.label_counts();
                    DomainEntry {
                        id: d.id.clone(),
                        file: format!("{}.jsonl", d.id),
                        count: d.samples.len(),
                        label_counts: LabelCounts { real, fake },
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum TextPayload {
    Flat(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    label: u8,
    text: TextPayload,
    vis: Vec<f64>,
    inst: Vec<f64>,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let raw = fs::read_to_string(path).map_err(RunError::io(path))?;
    serde_json::from_str(&raw).map_err(|e| RunError::Load(format!("{}: {e}", path.display())))
}

/// Loads every domain listed in the manifest as a source domain. Data file
/// paths are resolved against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetBundle> {
    let manifest = read_manifest(manifest_path)?;
    let layout = manifest.layout()?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut seen = HashMap::new();
    for d in &manifest.domains {
        if seen.insert(d.id.as_str(), ()).is_some() {
            return Err(RunError::Load(format!(
                "{}: duplicate domain id {}",
                manifest_path.display(),
                d.id
            )));
        }
    }
    let domains = manifest
        .domains
        .iter()
        .map(|entry| load_domain(&dir.join(&entry.file), entry, &layout))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetBundle::new(&manifest.name, layout, domains)?)
}

fn load_domain(path: &Path, entry: &DomainEntry, layout: &FeatureLayout) -> Result<Domain> {
    let file = fs::File::open(path).map_err(RunError::io(path))?;
    let mut samples = Vec::with_capacity(entry.count);
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(RunError::io(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| RunError::Load(format!("{}:{lineno}: {msg}", path.display()));
        let rec: Record = serde_json::from_str(&line).map_err(|e| at(format!("malformed record: {e}")))?;
        if let Some(prev) = ids.insert(rec.id.clone(), lineno) {
            return Err(at(format!("duplicate id {} (first on line {prev})", rec.id)));
        }
        let text = flatten_text(rec.text, &layout.text).map_err(&at)?;
        let sample = Sample {
            id: rec.id,
            domain: entry.id.clone(),
            label: rec.label,
            text,
            vis: rec.vis,
            inst: rec.inst,
        };
        sample.validate(layout).map_err(|e| match e {
            rdcm_core::Error::Validation(m) => at(m),
            other => at(other.to_string()),
        })?;
        samples.push(sample);
    }
    if samples.len() != entry.count {
        return Err(RunError::Load(format!(
            "{}: manifest declares {} samples for domain {}, file has {}",
            path.display(),
            entry.count,
            entry.id,
            samples.len()
        )));
    }
    let domain = Domain {
        id: entry.id.clone(),
        samples,
        split: None,
    };
    let [real, fake] = domain.label_counts();
    if (real, fake) != (entry.label_counts.real, entry.label_counts.fake) {
        return Err(RunError::Load(format!(
            "{}: manifest declares label counts {}/{} for domain {}, file has {real}/{fake}",
            path.display(),
            entry.label_counts.real,
            entry.label_counts.fake,
            entry.id
        )));
    }
    Ok(domain)
}

fn flatten_text(payload: TextPayload, layout: &TextLayout) -> std::result::Result<Vec<f64>, String> {
    match (payload, *layout) {
        (TextPayload::Flat(v), TextLayout::Pooled { dim }) => {
            if v.len() != dim {
                return Err(format!("text has {} values, expected {dim}", v.len()));
            }
            Ok(v)
        }
        (TextPayload::Rows(rows), TextLayout::Sequence { seq_len, emb_dim }) => {
            if rows.len() != seq_len {
                return Err(format!("text has {} tokens, expected {seq_len}", rows.len()));
            }
            if let Some((t, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != emb_dim) {
                return Err(format!("text token {t} has {} values, expected {emb_dim}", r.len()));
            }
            Ok(rows.concat())
        }
        (TextPayload::Flat(_), TextLayout::Sequence { .. }) => Err("expected a token sequence for text".into()),
        (TextPayload::Rows(_), TextLayout::Pooled { .. }) => Err("expected a pooled vector for text".into()),
    }
}

/// Writes `manifest.json` and one `<id>.jsonl` file per domain into `dir`.
/// Floats are written in shortest round-trip form, so output is a pure
/// function of the samples.
pub fn write_dataset(dir: &Path, name: &str, layout: &FeatureLayout, domains: &[&Domain]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(RunError::io(dir))?;
    let manifest = Manifest::for_domains(name, layout, domains);
    for (entry, d) in manifest.domains.iter().zip(domains) {
        let path = dir.join(&entry.file);
        let file = fs::File::create(&path).map_err(RunError::io(&path))?;
        let mut w = BufWriter::new(file);
        for s in &d.samples {
            let text = match layout.text {
                TextLayout::Pooled { .. } => TextPayload::Flat(s.text.clone()),
                TextLayout::Sequence { emb_dim, .. } => {
                    TextPayload::Rows(s.text.chunks(emb_dim).map(<[f64]>::to_vec).collect())
                }
            };
            let rec = Record {
                id: s.id.clone(),
                label: s.label,
                text,
                vis: s.vis.clone(),
                inst: s.inst.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(RunError::io(&path))?;
        }
        w.flush().map_err(RunError::io(&path))?;
    }
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(RunError::io(path))
}

/// One-line description per domain, in manifest order.
pub fn summarize(manifest: &Manifest) -> String {
    let mut counts = BTreeMap::new();
    for d in &manifest.domains {
        counts.insert(d.id.as_str(), (d.count, d.label_counts.real, d.label_counts.fake));
    }
    let mut out = format!("{}: {} domains\n", manifest.name, manifest.domains.len());
    for (id, (n, real, fake)) in counts {
        out.push_str(&format!("  {id}: {n} samples ({real} real / {fake} fake)\n"));
    }
    out
}
