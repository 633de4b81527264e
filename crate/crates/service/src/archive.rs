//! Scene-graph archives: a set of segment documents plus optional
//! ground-truth sidecars, read from a directory or an upload body.
//!
//! Directory layout: every `*.json` file is one `SceneGraphDocument`, except
//! `*.truth.json` files which are `SegmentTruth` sidecars. Files are read in
//! name order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use scenequery_core::backends::SegmentTruth;
use scenequery_core::ingest::{split_document, SceneGraphDocument};
use serde::{Deserialize, Serialize};

pub const SIDECAR_SUFFIX: &str = ".truth.json";

/// Problem with one archive member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// File name, or `documents[i]` / `sidecars[i]` for uploads.
    pub origin: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vid: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn new(origin: impl Into<String>, vid: Option<&str>, message: impl ToString) -> Self {
        Self { origin: origin.into(), vid: vid.map(str::to_owned), message: message.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedDocument {
    pub origin: String,
    pub document: SceneGraphDocument,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub documents: Vec<NamedDocument>,
    pub sidecars: Vec<SegmentTruth>,
}

/// Upload body for dataset creation and segment updates. Documents are kept
/// as raw JSON so each can be diagnosed on its own.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveUpload {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub segment_length: Option<usize>,
    #[serde(default)]
    pub documents: Vec<serde_json::Value>,
    #[serde(default)]
    pub sidecars: Vec<serde_json::Value>,
}

impl ArchiveUpload {
    pub fn from_archive(name: Option<String>, archive: &Archive) -> Self {
        Self {
            name,
            segment_length: None,
            documents: archive.documents.iter().map(|d| serde_json::to_value(&d.document).expect("serializes")).collect(),
            sidecars: archive.sidecars.iter().map(|s| serde_json::to_value(s).expect("serializes")).collect(),
        }
    }
}

impl Archive {
    pub fn from_upload(upload: &ArchiveUpload) -> Result<Self, Vec<Diagnostic>> {
        let mut diags = Vec::new();
        let mut archive = Archive::default();
        for (i, v) in upload.documents.iter().enumerate() {
            match SceneGraphDocument::deserialize(v) {
                Ok(document) => archive.documents.push(NamedDocument { origin: format!("documents[{i}]"), document }),
                Err(e) => diags.push(Diagnostic::new(format!("documents[{i}]"), None, e)),
            }
        }
        for (i, v) in upload.sidecars.iter().enumerate() {
            match SegmentTruth::deserialize(v) {
                Ok(s) => archive.sidecars.push(s),
                Err(e) => diags.push(Diagnostic::new(format!("sidecars[{i}]"), None, e)),
            }
        }
        if diags.is_empty() {
            Ok(archive)
        } else {
            Err(diags)
        }
    }

    pub fn read_dir(dir: &Path) -> Result<Self, ArchiveError> {
        let io = |source| ArchiveError::Io { path: dir.display().to_string(), source };
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| n.ends_with(".json"))
            .collect();
        names.sort();

        let mut diags = Vec::new();
        let mut archive = Archive::default();
        for name in names {
            let text = match std::fs::read_to_string(dir.join(&name)) {
                Ok(t) => t,
                Err(e) => {
                    diags.push(Diagnostic::new(&name, None, e));
                    continue;
                }
            };
            if name.ends_with(SIDECAR_SUFFIX) {
                match serde_json::from_str::<SegmentTruth>(&text) {
                    Ok(s) => archive.sidecars.push(s),
                    Err(e) => diags.push(Diagnostic::new(&name, None, e)),
                }
            } else {
                match SceneGraphDocument::from_json(&text) {
                    Ok(document) => archive.documents.push(NamedDocument { origin: name, document }),
                    Err(e) => diags.push(Diagnostic::new(&name, None, e)),
                }
            }
        }
        if diags.is_empty() {
            Ok(archive)
        } else {
            Err(ArchiveError::Invalid(diags))
        }
    }

    /// Writes documents as `<vid>.json` and sidecars as `<vid>.truth.json`.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for d in &self.documents {
            std::fs::write(dir.join(format!("{}.json", file_stem(d.document.vid()))), d.document.to_json())?;
        }
        for s in &self.sidecars {
            let json = serde_json::to_string_pretty(s).expect("sidecar serializes");
            std::fs::write(dir.join(format!("{}{SIDECAR_SUFFIX}", file_stem(&s.vid))), json)?;
        }
        Ok(())
    }

    /// Structural checks: at least one document, each valid, unique vids,
    /// and every sidecar naming a document of the archive.
    pub fn check(&self) -> Result<(), Vec<Diagnostic>> {
        let mut diags = Vec::new();
        if self.documents.is_empty() {
            diags.push(Diagnostic::new("archive", None, "archive contains no scene-graph documents"));
        }
        let mut seen = BTreeSet::new();
        for d in &self.documents {
            let vid = d.document.vid();
            if let Err(e) = d.document.validate() {
                diags.push(Diagnostic::new(&d.origin, Some(vid), e));
            }
            if !seen.insert(vid) {
                diags.push(Diagnostic::new(&d.origin, Some(vid), "segment id appears in more than one document"));
            }
        }
        let mut sidecars = BTreeSet::new();
        for s in &self.sidecars {
            if !seen.contains(s.vid.as_str()) {
                diags.push(Diagnostic::new("sidecar", Some(&s.vid), "sidecar names no document of the archive"));
            }
            if !sidecars.insert(s.vid.as_str()) {
                diags.push(Diagnostic::new("sidecar", Some(&s.vid), "more than one sidecar for this segment"));
            }
        }
        if diags.is_empty() {
            Ok(())
        } else {
            Err(diags)
        }
    }

    /// Splits documents longer than `segment_length` frames. Sidecars follow
    /// their document: each piece gets the frames it covers and the full
    /// image-label table.
    pub fn resegment(self, segment_length: usize) -> Result<Self, Vec<Diagnostic>> {
        let mut sidecars: BTreeMap<String, SegmentTruth> = self.sidecars.into_iter().map(|s| (s.vid.clone(), s)).collect();
        let mut out = Archive::default();
        let mut diags = Vec::new();
        for d in self.documents {
            let pieces = match split_document(&d.document, segment_length) {
                Ok(p) => p,
                Err(e) => {
                    diags.push(Diagnostic::new(&d.origin, Some(d.document.vid()), e));
                    continue;
                }
            };
            let truth = sidecars.remove(d.document.vid());
            let whole = pieces.len() == 1;
            for piece in pieces {
                if let Some(t) = &truth {
                    let frames = t
                        .frames
                        .iter()
                        .filter(|(f, _)| piece.segment.contains_frame(**f))
                        .map(|(f, s)| (*f, s.clone()))
                        .collect();
                    out.sidecars.push(SegmentTruth { vid: piece.vid().to_owned(), image_labels: t.image_labels.clone(), frames });
                }
                let origin = if whole { d.origin.clone() } else { format!("{} ({})", d.origin, piece.vid()) };
                out.documents.push(NamedDocument { origin, document: piece });
            }
        }
        if diags.is_empty() {
            Ok(out)
        } else {
            Err(diags)
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid archive ({} problems)", .0.len())]
    Invalid(Vec<Diagnostic>),
}

/// Maps a segment id to a safe file stem; bytes outside `[A-Za-z0-9._-]`
/// are percent-encoded, so distinct ids never collide.
pub fn file_stem(vid: &str) -> String {
    let mut out = String::with_capacity(vid.len());
    for b in vid.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' => out.push(b as char),
            b'.' if !out.is_empty() => out.push('.'),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}
