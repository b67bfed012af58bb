//! Injury labels for the three target organs, plus the labels CSV.
//!
//! CSV layout: header `patient_id,kidney,liver,spleen`, one row per study,
//! values in {healthy, low, high}.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjuryLabel {
    Healthy,
    Low,
    High,
}

impl InjuryLabel {
    pub const ALL: [InjuryLabel; 3] = [InjuryLabel::Healthy, InjuryLabel::Low, InjuryLabel::High];

    /// Class index: healthy 0, low 1, high 2.
    pub fn index(self) -> usize {
        match self {
            InjuryLabel::Healthy => 0,
            InjuryLabel::Low => 1,
            InjuryLabel::High => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("class index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            InjuryLabel::Healthy => "healthy",
            InjuryLabel::Low => "low",
            InjuryLabel::High => "high",
        }
    }
}

impl fmt::Display for InjuryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InjuryLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "healthy" => Ok(InjuryLabel::Healthy),
            "low" => Ok(InjuryLabel::Low),
            "high" => Ok(InjuryLabel::High),
            other => Err(Error::Format(format!("unknown injury label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Organ {
    Kidney,
    Liver,
    Spleen,
}

impl Organ {
    pub const ALL: [Organ; 3] = [Organ::Kidney, Organ::Liver, Organ::Spleen];

    pub fn index(self) -> usize {
        match self {
            Organ::Kidney => 0,
            Organ::Liver => 1,
            Organ::Spleen => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Organ::Kidney => "kidney",
            Organ::Liver => "liver",
            Organ::Spleen => "spleen",
        }
    }
}

/// Per-study ground truth for kidney, liver, and spleen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganLabelTriple {
    pub kidney: InjuryLabel,
    pub liver: InjuryLabel,
    pub spleen: InjuryLabel,
}

impl OrganLabelTriple {
    pub const ALL_HEALTHY: OrganLabelTriple = OrganLabelTriple {
        kidney: InjuryLabel::Healthy,
        liver: InjuryLabel::Healthy,
        spleen: InjuryLabel::Healthy,
    };

    pub fn get(&self, organ: Organ) -> InjuryLabel {
        match organ {
            Organ::Kidney => self.kidney,
            Organ::Liver => self.liver,
            Organ::Spleen => self.spleen,
        }
    }

    pub fn set(&mut self, organ: Organ, label: InjuryLabel) {
        match organ {
            Organ::Kidney => self.kidney = label,
            Organ::Liver => self.liver = label,
            Organ::Spleen => self.spleen = label,
        }
    }
}

const LABELS_HEADER: &str = "patient_id,kidney,liver,spleen";

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(',') || id.contains('\n') || id.contains('\r') {
        return Err(Error::InvalidArgument(format!(
            "patient id {id:?} is empty or contains a separator"
        )));
    }
    Ok(())
}

pub fn write_labels_csv(
    entries: &[(String, OrganLabelTriple)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(entries.len() * 32 + 32);
    out.push_str(LABELS_HEADER);
    out.push('\n');
    for (id, labels) in entries {
        check_id(id)?;
        out.push_str(id);
        for organ in Organ::ALL {
            out.push(',');
            out.push_str(labels.get(organ).name());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<Vec<(String, OrganLabelTriple)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == LABELS_HEADER => {}
        other => {
            return Err(Error::Format(format!(
                "{}: expected header {LABELS_HEADER:?}, got {other:?}",
                path.display()
            )))
        }
    }
    let mut entries = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!(
                "{}: line {}: expected 4 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let triple = OrganLabelTriple {
            kidney: fields[1].parse()?,
            liver: fields[2].parse()?,
            spleen: fields[3].parse()?,
        };
        entries.push((fields[0].to_string(), triple));
    }
    Ok(entries)
}
