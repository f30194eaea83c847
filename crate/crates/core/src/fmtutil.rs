//! Float formatting shared by the JSON and CSV writers: every float is
//! written with 17 significant digits so that it parses back exactly.

use std::io::{self, Write};

use serde::Serialize;
use serde_json::ser::Formatter;

/// `x` with 17 significant digits in scientific notation.
pub fn f64_17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

struct Sci17;

impl Formatter for Sci17 {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(format!("{value:.16e}").as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Compact JSON with 17-significant-digit floats. Non-finite floats are
/// rejected by the caller's validation, not here.
pub fn to_json_17<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Sci17);
    value.serialize(&mut ser)?;
    Ok(out)
}
