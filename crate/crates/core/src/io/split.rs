//! Train/validation split that keeps whole recording sequences together.

use std::collections::{HashMap, HashSet};

use super::data_lines;
use crate::error::{Error, Result};

/// Frame id to sequence id, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceMap {
    pub entries: Vec<(String, String)>,
}

impl SequenceMap {
    /// `frame_id sequence_id` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (line, f) in data_lines(text) {
            if f.len() != 2 {
                return Err(Error::parse(line, "expected `frame_id sequence_id`"));
            }
            if !seen.insert(f[0].to_string()) {
                return Err(Error::parse(line, format!("frame {} listed twice", f[0])));
            }
            entries.push((f[0].to_string(), f[1].to_string()));
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(f, s)| format!("{f} {s}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub training: Vec<String>,
    pub validation: Vec<String>,
    pub validation_sequences: Vec<String>,
}

impl DatasetSplit {
    /// `frame_id train|val` per line, in the input frame order.
    pub fn to_text(&self, frame_ids: &[String]) -> String {
        let val: HashSet<&String> = self.validation.iter().collect();
        frame_ids
            .iter()
            .map(|f| format!("{f} {}\n", if val.contains(f) { "val" } else { "train" }))
            .collect()
    }
}

/// Moves whole sequences, in order of first appearance in the map, into the
/// validation set until it holds at least `target_validation` frames. The
/// last remaining sequence always stays in training.
pub fn split_dataset(frame_ids: &[String], map: &SequenceMap, target_validation: usize) -> Result<DatasetSplit> {
    let lookup: HashMap<&str, &str> = map.entries.iter().map(|(f, s)| (f.as_str(), s.as_str())).collect();
    let mut seq_order: Vec<&str> = Vec::new();
    let mut seq_size: HashMap<&str, usize> = HashMap::new();
    let mut seen = HashSet::new();
    for f in frame_ids {
        if !seen.insert(f.as_str()) {
            return Err(Error::InvalidInput(format!("frame {f} given twice")));
        }
        let s = lookup
            .get(f.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("frame {f} missing from the sequence map")))?;
        *seq_size.entry(s).or_insert(0) += 1;
    }
    for (_, s) in &map.entries {
        if seq_size.contains_key(s.as_str()) && !seq_order.contains(&s.as_str()) {
            seq_order.push(s);
        }
    }
    if seq_order.len() <= 1 && target_validation > 0 {
        log::warn!("a single sequence cannot be split; all frames go to training");
    }

    let mut val_seqs: HashSet<&str> = HashSet::new();
    let mut val_size = 0;
    for s in seq_order.iter().take(seq_order.len().saturating_sub(1)) {
        if val_size >= target_validation {
            break;
        }
        val_seqs.insert(s);
        val_size += seq_size[s];
    }
    let (mut training, mut validation) = (Vec::new(), Vec::new());
    for f in frame_ids {
        if val_seqs.contains(lookup[f.as_str()]) {
            validation.push(f.clone());
        } else {
            training.push(f.clone());
        }
    }
    Ok(DatasetSplit {
        training,
        validation,
        validation_sequences: seq_order.iter().filter(|s| val_seqs.contains(*s)).map(|s| s.to_string()).collect(),
    })
}
