//! JSON and CSV writers with every float printed to 17 significant digits.

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use std::fmt::Write as _;
use std::io::{self, Write};

/// Pretty-printing formatter that writes finite floats as `d.dddddddddddddddde±x`.
struct Digits17<'a> {
    inner: PrettyFormatter<'a>,
}

impl Formatter for Digits17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.inner.end_object_value(writer)
    }
}

/// A float with 17 significant digits in exponent form. Non-finite values
/// become `inf`, `-inf` or `nan`; the JSON serializer never passes them here.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

/// Serializes `value` as indented JSON with 17-digit floats and a final newline.
pub fn to_json<T: Serialize>(value: &T) -> io::Result<String> {
    let mut buf = Vec::new();
    let fmt = Digits17 {
        inner: PrettyFormatter::with_indent(b"  "),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser).map_err(io::Error::other)?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(io::Error::other)
}

/// One CSV cell.
pub enum Cell {
    F(f64),
    I(i64),
    S(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Cell::I(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::S(String::new()), Cell::F)
    }
}

/// A CSV table with a one-line header.
pub struct Csv {
    pub name: String,
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Csv {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Csv {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::F(v) => fmt_f64(*v),
                    Cell::I(v) => v.to_string(),
                    Cell::S(s) => s.clone(),
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_carry_seventeen_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        let s = to_json(&serde_json::json!({"a": 1.0, "b": [2, 0.5]})).unwrap();
        assert!(s.contains("\"a\": 1.0000000000000000e0"));
        assert!(s.contains("5.0000000000000000e-1"));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"], 1.0);
    }

    #[test]
    fn csv_has_a_single_header_line() {
        let mut c = Csv::new("t", &["j", "x", "note"]);
        c.push(vec![Cell::I(3), Cell::F(0.25), "ok".into()]);
        assert_eq!(c.render(), "j,x,note\n3,2.5000000000000000e-1,ok\n");
    }
}
