//! Note events (the weak labels), unit-to-class assignment and the binary
//! label matrix.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use std::collections::BTreeSet;
use std::path::Path;

pub const DEFAULT_ONSET_TOLERANCE: f64 = 0.5;
pub const DEFAULT_SUSTAIN_TOLERANCE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct NoteEvent {
    pub instrument_id: u32,
    pub midi_pitch: u8,
    pub onset_time: f64,
    pub offset_time: f64,
    pub group_tag: Option<String>,
}

impl NoteEvent {
    pub fn class(&self) -> (u32, u8) {
        (self.instrument_id, self.midi_pitch)
    }
}

/// Maps representation-layer units to (instrument, pitch) classes. Within a
/// class block, unit 0 is the onset unit and units 1..P-1 the sustain units;
/// free units come last.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitAssignment {
    pub classes: Vec<(u32, u8)>,
    pub units_per_class: usize,
    pub free_units: usize,
}

impl UnitAssignment {
    pub fn total_units(&self) -> usize {
        self.classes.len() * self.units_per_class + self.free_units
    }

    pub fn class_index(&self, class: (u32, u8)) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Unit range [start, end) of a class block.
    pub fn class_block(&self, class_idx: usize) -> std::ops::Range<usize> {
        let start = class_idx * self.units_per_class;
        start..start + self.units_per_class
    }

    pub fn free_unit_range(&self) -> std::ops::Range<usize> {
        let start = self.classes.len() * self.units_per_class;
        start..start + self.free_units
    }
}

#[derive(Debug, Clone)]
pub struct LabelMatrix {
    pub matrix: Matrix,
    pub assignment: UnitAssignment,
    pub hop_seconds: f64,
}

impl LabelMatrix {
    pub fn units(&self) -> usize {
        self.matrix.rows()
    }

    pub fn frames(&self) -> usize {
        self.matrix.cols()
    }

    /// Column n as a binary mask vector.
    pub fn column(&self, n: usize) -> Vec<f64> {
        self.matrix.col(n)
    }
}

/// Parse a note-list CSV:
/// `instrument_id,midi_pitch,onset_seconds,offset_seconds[,group_tag]`,
/// `#` comments, blank lines allowed.
pub fn parse_notes(text: &str, path: &Path) -> Result<Vec<NoteEvent>> {
    let mut notes = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(parse_err(format!(
                "expected 4 or 5 fields, got {}",
                fields.len()
            )));
        }
        let instrument_id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad instrument_id '{}'", fields[0])))?;
        let midi_pitch: u8 = fields[1]
            .parse()
            .ok()
            .filter(|&p| p <= 127)
            .ok_or_else(|| parse_err(format!("bad midi_pitch '{}'", fields[1])))?;
        let onset_time: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad onset '{}'", fields[2])))?;
        let offset_time: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad offset '{}'", fields[3])))?;
        if onset_time < 0.0 || !onset_time.is_finite() || !offset_time.is_finite() {
            return Err(parse_err("times must be finite and >= 0".into()));
        }
        if offset_time <= onset_time {
            return Err(parse_err(format!(
                "offset {} must be greater than onset {}",
                offset_time, onset_time
            )));
        }
        let group_tag = fields.get(4).filter(|t| !t.is_empty()).map(|t| t.to_string());
        notes.push(NoteEvent {
            instrument_id,
            midi_pitch,
            onset_time,
            offset_time,
            group_tag,
        });
    }
    notes.sort_by(|a, b| {
        a.onset_time
            .partial_cmp(&b.onset_time)
            .unwrap()
            .then(a.class().cmp(&b.class()))
    });
    Ok(notes)
}

pub fn load_notes(path: impl AsRef<Path>) -> Result<Vec<NoteEvent>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_notes(&text, path)
}

pub fn save_notes(path: impl AsRef<Path>, notes: &[NoteEvent]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("# instrument_id,midi_pitch,onset_seconds,offset_seconds,group_tag\n");
    for n in notes {
        out.push_str(&format!(
            "{},{},{},{}",
            n.instrument_id, n.midi_pitch, n.onset_time, n.offset_time
        ));
        if let Some(tag) = &n.group_tag {
            out.push(',');
            out.push_str(tag);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One class per distinct (instrument, pitch) pair, sorted for determinism.
pub fn build_assignment(
    notes: &[NoteEvent],
    units_per_class: usize,
    free_units: usize,
) -> Result<UnitAssignment> {
    if units_per_class < 2 {
        return Err(Error::InvalidArgument(format!(
            "units_per_class must be >= 2, got {units_per_class}"
        )));
    }
    let classes: BTreeSet<(u32, u8)> = notes.iter().map(NoteEvent::class).collect();
    Ok(UnitAssignment {
        classes: classes.into_iter().collect(),
        units_per_class,
        free_units,
    })
}

fn note_frame_contribution(
    matrix: &mut Matrix,
    note: &NoteEvent,
    assignment: &UnitAssignment,
    hop_seconds: f64,
    onset_tolerance: f64,
    sustain_tolerance: f64,
) -> Result<()> {
    let class_idx = assignment.class_index(note.class()).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "note class (instrument {}, pitch {}) not in assignment",
            note.instrument_id, note.midi_pitch
        ))
    })?;
    let n_frames = matrix.cols();
    let block = assignment.class_block(class_idx);
    let onset_unit = block.start;
    // Slack absorbs rounding in n*hop_seconds so boundary frames land on the
    // intended side.
    let slack = 1e-9;
    for n in 0..n_frames {
        let t = n as f64 * hop_seconds;
        if (t - note.onset_time).abs() <= onset_tolerance + slack {
            matrix.set(onset_unit, n, 1.0);
        }
        if t >= note.onset_time - sustain_tolerance - slack
            && t <= note.offset_time + sustain_tolerance + slack
        {
            for u in block.start + 1..block.end {
                matrix.set(u, n, 1.0);
            }
        }
    }
    Ok(())
}

/// Build the binary K x N activity-permission matrix: onset rows get ones
/// within +-onset_tolerance of a note start, sustain rows within the note
/// interval widened by sustain_tolerance, free-unit rows are all ones.
/// Contributions of notes of the same class are OR-ed.
pub fn build_label_matrix(
    notes: &[NoteEvent],
    assignment: &UnitAssignment,
    n_frames: usize,
    hop_seconds: f64,
    onset_tolerance: f64,
    sustain_tolerance: f64,
) -> Result<LabelMatrix> {
    if n_frames == 0 {
        return Err(Error::InvalidArgument("build_label_matrix: N must be > 0".into()));
    }
    if onset_tolerance < 0.0 || sustain_tolerance < 0.0 {
        return Err(Error::InvalidArgument("tolerances must be >= 0".into()));
    }
    let mut matrix = Matrix::zeros(assignment.total_units(), n_frames);
    for note in notes {
        note_frame_contribution(
            &mut matrix,
            note,
            assignment,
            hop_seconds,
            onset_tolerance,
            sustain_tolerance,
        )?;
    }
    for u in assignment.free_unit_range() {
        for n in 0..n_frames {
            matrix.set(u, n, 1.0);
        }
    }
    Ok(LabelMatrix {
        matrix,
        assignment: assignment.clone(),
        hop_seconds,
    })
}

/// Rebuild the label matrix keeping only contributions of `keep`. Free-unit
/// rows are zeroed: free units belong to the residual group only.
pub fn restrict_labels(
    labels: &LabelMatrix,
    keep: &[NoteEvent],
    notes: &[NoteEvent],
    onset_tolerance: f64,
    sustain_tolerance: f64,
) -> Result<LabelMatrix> {
    for k in keep {
        if !notes.contains(k) {
            return Err(Error::InvalidArgument(format!(
                "restrict_labels: kept note (inst {}, pitch {}, onset {}) not in the note list",
                k.instrument_id, k.midi_pitch, k.onset_time
            )));
        }
    }
    let mut matrix = Matrix::zeros(labels.units(), labels.frames());
    for note in keep {
        note_frame_contribution(
            &mut matrix,
            note,
            &labels.assignment,
            labels.hop_seconds,
            onset_tolerance,
            sustain_tolerance,
        )?;
    }
    Ok(LabelMatrix {
        matrix,
        assignment: labels.assignment.clone(),
        hop_seconds: labels.hop_seconds,
    })
}

/// Residual restriction: free-unit rows as in the full matrix, class rows
/// zero.
pub fn residual_labels(labels: &LabelMatrix) -> LabelMatrix {
    let mut matrix = Matrix::zeros(labels.units(), labels.frames());
    for u in labels.assignment.free_unit_range() {
        for n in 0..labels.frames() {
            matrix.set(u, n, 1.0);
        }
    }
    LabelMatrix {
        matrix,
        assignment: labels.assignment.clone(),
        hop_seconds: labels.hop_seconds,
    }
}

/// Partition notes by group_tag. Notes without a tag go to "untagged".
pub fn group_by_tag(notes: &[NoteEvent]) -> Vec<(String, Vec<NoteEvent>)> {
    let mut names: Vec<String> = Vec::new();
    for n in notes {
        let tag = n.group_tag.clone().unwrap_or_else(|| "untagged".into());
        if !names.contains(&tag) {
            names.push(tag);
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let members = notes
                .iter()
                .filter(|n| n.group_tag.as_deref().unwrap_or("untagged") == name)
                .cloned()
                .collect();
            (name, members)
        })
        .collect()
}
