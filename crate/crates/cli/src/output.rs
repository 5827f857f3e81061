//! CSV emission: shortest round-trip numbers, LF line endings.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub struct CsvFile {
    writer: csv::Writer<BufWriter<File>>,
    record: Vec<String>,
}

fn io_error(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => std::io::Error::other(format!("{other:?}")),
    }
}

/// Shortest decimal string that parses back to the same `f64`.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

impl CsvFile {
    pub fn create(path: &Path, header: &[String]) -> std::io::Result<Self> {
        let file = File::create(path)?;
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        writer.write_record(header).map_err(io_error)?;
        Ok(Self {
            writer,
            record: Vec::with_capacity(header.len()),
        })
    }

    pub fn numbers(&mut self, values: &[f64]) -> std::io::Result<()> {
        self.numbers_with_note(values, None)
    }

    /// Numeric fields followed by an optional text field.
    pub fn numbers_with_note(&mut self, values: &[f64], note: Option<&str>) -> std::io::Result<()> {
        self.record.clear();
        self.record.extend(values.iter().map(|&v| format_number(v)));
        if let Some(note) = note {
            self.record.push(note.to_string());
        }
        self.writer.write_record(&self.record).map_err(io_error)
    }

    pub fn finish(mut self) -> std::io::Result<()> {
        self.writer.flush()
    }
}
