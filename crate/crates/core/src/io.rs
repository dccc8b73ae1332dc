//! Persistence: a little-endian binary container for space-time data, the
//! trace-sample CSV format, two-column plot data and a minimal SVG line chart.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::BoundaryGeometry;
use crate::error::{Error, Result};
use crate::pde::{BoundaryTrace, Control, SpaceTimeField, TimeGrid};

pub const MAGIC: [u8; 4] = *b"ISKC";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 8 + 8 + 8;

/// What a container holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Field = 1,
    Trace = 2,
    Control = 3,
}

impl ContainerKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(ContainerKind::Field),
            2 => Ok(ContainerKind::Trace),
            3 => Ok(ContainerKind::Control),
            _ => Err(Error::Format(format!("unknown container kind {b}"))),
        }
    }
}

/// Decoded container: `levels × width` values, time-outer.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub time: TimeGrid,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Container {
    pub fn from_field(f: &SpaceTimeField) -> Self {
        Container {
            kind: ContainerKind::Field,
            time: f.time,
            width: f.width(),
            data: f.as_slice().to_vec(),
        }
    }

    pub fn from_trace(t: &BoundaryTrace) -> Self {
        Container {
            kind: ContainerKind::Trace,
            time: t.time,
            width: t.width(),
            data: t.as_slice().to_vec(),
        }
    }

    pub fn from_control(h: &Control) -> Self {
        Container {
            kind: ContainerKind::Control,
            time: h.time,
            width: h.width(),
            data: h.as_slice().to_vec(),
        }
    }

    fn expect(&self, kind: ContainerKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} container, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn into_field(self) -> Result<SpaceTimeField> {
        self.expect(ContainerKind::Field)?;
        SpaceTimeField::from_vec(self.time, self.width, self.data)
    }

    pub fn into_trace(self) -> Result<BoundaryTrace> {
        self.expect(ContainerKind::Trace)?;
        BoundaryTrace::from_vec(self.time, self.width, self.data)
    }

    pub fn into_control(self) -> Result<Control> {
        self.expect(ContainerKind::Control)?;
        Control::from_vec(self.time, self.width, self.data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&(self.time.levels() as u64).to_le_bytes());
        out.extend_from_slice(&(self.width as u64).to_le_bytes());
        out.extend_from_slice(&self.time.t_final.to_le_bytes());
        out.extend_from_slice(&self.time.dt().to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Strict decoder: every header field is checked and trailing bytes are rejected.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("container too short ({} bytes)", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let kind = ContainerKind::from_byte(bytes[6])?;
        if bytes[7] != 0 {
            return Err(Error::Format("reserved byte must be zero".into()));
        }
        let levels = u64_at(8);
        let width = u64_at(16);
        let t_final = f64_at(24);
        let dt = f64_at(32);
        if levels < 2 {
            return Err(Error::Format(format!("need at least two time levels, got {levels}")));
        }
        let nt = usize::try_from(levels - 1).map_err(|_| Error::Format("level count overflows".into()))?;
        let width = usize::try_from(width).map_err(|_| Error::Format("width overflows".into()))?;
        let count = (nt + 1)
            .checked_mul(width)
            .filter(|c| c.checked_mul(8).is_some_and(|b| b.checked_add(HEADER_LEN).is_some()))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if bytes.len() != HEADER_LEN + 8 * count {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header implies {}",
                bytes.len() - HEADER_LEN,
                8 * count
            )));
        }
        let time = TimeGrid::new(t_final, nt).map_err(|e| Error::Format(format!("bad time header: {e}")))?;
        if !(dt.is_finite() && (dt - time.dt()).abs() <= 1e-12 * time.dt()) {
            return Err(Error::Format(format!("dt {dt} inconsistent with T = {t_final}, Nt = {nt}")));
        }
        let data: Vec<f64> = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite value in payload".into()));
        }
        Ok(Container { kind, time, width, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.encode())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// One row of a trace-sample file: arc-length position and value.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSample {
    pub arc: f64,
    pub value: f64,
}

/// Parses `arc,value` rows (header required). Arcs must be finite and strictly increasing.
pub fn parse_trace_samples(text: &str) -> Result<Vec<TraceSample>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::Parse(format!("trace samples: {e}")))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["arc", "value"] {
        return Err(Error::Parse(format!("trace samples: header must be `arc,value`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out: Vec<TraceSample> = Vec::new();
    for (i, row) in reader.deserialize().enumerate() {
        let s: TraceSample = row.map_err(|e| Error::Parse(format!("trace samples, row {}: {e}", i + 2)))?;
        if !(s.arc.is_finite() && s.value.is_finite()) {
            return Err(Error::Parse(format!("trace samples, row {}: non-finite entry", i + 2)));
        }
        if let Some(prev) = out.last() {
            if s.arc <= prev.arc {
                return Err(Error::Parse(format!("trace samples, row {}: arc must increase", i + 2)));
            }
        }
        out.push(s);
    }
    if out.len() < 2 {
        return Err(Error::Parse("trace samples: need at least two rows".into()));
    }
    Ok(out)
}

/// Piecewise-linear interpolation of the samples at every boundary node's arc
/// position, periodic over the perimeter.
pub fn samples_on_boundary(samples: &[TraceSample], b: &BoundaryGeometry) -> Result<Vec<f64>> {
    let total = b.total_length();
    if samples.len() < 2 {
        return Err(Error::Validation("need at least two trace samples".into()));
    }
    if samples[0].arc < 0.0 || samples[samples.len() - 1].arc >= total {
        return Err(Error::Validation(format!("sample arcs must lie in [0, {total})")));
    }
    let first = samples[0];
    let last = samples[samples.len() - 1];
    Ok(b
        .points
        .iter()
        .map(|p| {
            let s = p.arc.rem_euclid(total);
            let k = samples.partition_point(|q| q.arc <= s);
            // Before the first or after the last sample: wrap around the perimeter.
            let (a, c, span) = if k == 0 || k == samples.len() {
                (last, first, first.arc + total - last.arc)
            } else {
                (samples[k - 1], samples[k], samples[k].arc - samples[k - 1].arc)
            };
            let offset = (s - a.arc).rem_euclid(total);
            a.value + (c.value - a.value) * offset / span
        })
        .collect())
}

/// Two-column whitespace-separated text with a `#` header line.
pub fn two_column(header: [&str; 2], rows: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut s = format!("# {} {}\n", header[0], header[1]);
    for (a, b) in rows {
        let _ = writeln!(s, "{a:.17e} {b:.17e}");
    }
    s
}

/// Polyline chart of one or more series; log scale on either axis if requested.
pub fn svg_line_chart(title: &str, series: &[(&str, Vec<(f64, f64)>)], log_x: bool, log_y: bool) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let tx = |v: f64| if log_x { v.abs().max(f64::MIN_POSITIVE).log10() } else { v };
    let ty = |v: f64| if log_y { v.abs().max(f64::MIN_POSITIVE).log10() } else { v };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().map(|&(a, b)| (tx(a), ty(b)))).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(a, b) in &pts {
        x0 = x0.min(a);
        x1 = x1.max(a);
        y0 = y0.min(b);
        y1 = y1.max(b);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let px = |a: f64| pad + (a - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |b: f64| h - pad - (b - y0) / (y1 - y0) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * pad,
        h - 2.0 * pad
    );
    let label = |v: f64, log: bool| if log { format!("1e{v:.1}") } else { format!("{v:.3e}") };
    let _ = writeln!(s, "<text x=\"{pad}\" y=\"{}\" font-size=\"10\">{}</text>", h - pad + 14.0, label(x0, log_x));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{}</text>", w - pad, h - pad + 14.0, label(x1, log_x));
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"10\">{}</text>", h - pad, label(y0, log_y));
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"10\">{}</text>", pad + 4.0, label(y1, log_y));
    for (i, (name, p)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let path: Vec<String> = p
            .iter()
            .map(|&(a, b)| (tx(a), ty(b)))
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| format!("{:.2},{:.2}", px(a), py(b)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{}</text>", pad + 8.0, pad + 14.0 * (i + 1) as f64, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_grid, DomainSpec, GeometricCase, RegionShape};
    use proptest::prelude::*;

    fn field(nt: usize, w: usize) -> SpaceTimeField {
        let time = TimeGrid::new(0.7, nt).unwrap();
        SpaceTimeField::from_fn(time, w, |n, k| (n as f64 + 0.5) * (k as f64 - 1.25))
    }

    #[test]
    fn container_round_trip() {
        let f = field(5, 7);
        let bytes = Container::from_field(&f).encode();
        assert_eq!(&bytes[..4], b"ISKC");
        assert_eq!(bytes.len(), HEADER_LEN + 8 * 6 * 7);
        let back = Container::decode(&bytes).unwrap().into_field().unwrap();
        assert_eq!(back, f);
        let c = Container::decode(&bytes).unwrap();
        assert!(c.into_control().is_err());
    }

    #[test]
    fn container_rejects_corruption() {
        let bytes = Container::from_field(&field(3, 2)).encode();
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Container::decode(&magic).is_err());
        let mut kind = bytes.clone();
        kind[6] = 9;
        assert!(Container::decode(&kind).is_err());
        let mut dt = bytes.clone();
        dt[32..40].copy_from_slice(&0.5f64.to_le_bytes());
        assert!(Container::decode(&dt).is_err());
        let mut nan = bytes.clone();
        nan[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Container::decode(&nan).is_err());
        let mut huge = bytes;
        huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(Container::decode(&huge).is_err());
    }

    proptest! {
        #[test]
        fn decoder_never_panics(data in proptest::collection::vec(any::<u8>(), 0..200)) {
            let _ = Container::decode(&data);
        }

        #[test]
        fn round_trip_any_shape(nt in 1usize..6, w in 0usize..5, seed in any::<u64>()) {
            let time = TimeGrid::new(1.0 + (seed % 7) as f64, nt).unwrap();
            let t = BoundaryTrace::from_fn(time, w, |n, k| ((seed >> ((n + k) % 60)) & 0xff) as f64 - 100.0);
            let back = Container::decode(&Container::from_trace(&t).encode()).unwrap().into_trace().unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn trace_samples() {
        let s = parse_trace_samples("arc,value\n0.0, 1.0\n2.0, 3.0\n").unwrap();
        assert_eq!(s, vec![TraceSample { arc: 0.0, value: 1.0 }, TraceSample { arc: 2.0, value: 3.0 }]);
        assert!(parse_trace_samples("a,b\n0,1\n1,2\n").is_err());
        assert!(parse_trace_samples("arc,value\n0,1\n").is_err());
        assert!(parse_trace_samples("arc,value\n1,1\n0,2\n").is_err());
        assert!(parse_trace_samples("arc,value\n0,x\n1,2\n").is_err());
        assert!(parse_trace_samples("arc,value\n0,1,2\n1,2\n").is_err());
        assert!(parse_trace_samples("arc,value\n0,NaN\n1,2\n").is_err());

        let g = build_grid(&DomainSpec::unit_square(
            5,
            RegionShape::Rect { x0: 0.5, x1: 0.9, y0: 0.1, y1: 0.9 },
            RegionShape::Disk { cx: 0.3, cy: 0.5, r: 0.1 },
            GeometricCase::Disjoint,
        ))
        .unwrap();
        let flat = parse_trace_samples("arc,value\n0,2\n1,2\n3,2\n").unwrap();
        assert!(samples_on_boundary(&flat, &g.boundary).unwrap().iter().all(|&v| (v - 2.0).abs() < 1e-14));
        let ramp = parse_trace_samples("arc,value\n0,0\n3.5,3.5\n").unwrap();
        let vals = samples_on_boundary(&ramp, &g.boundary).unwrap();
        for (p, v) in g.boundary.points.iter().zip(&vals) {
            if p.arc <= 3.5 {
                assert!((v - p.arc).abs() < 1e-12);
            }
        }
        let outside = parse_trace_samples("arc,value\n0,0\n4.5,1\n").unwrap();
        assert!(samples_on_boundary(&outside, &g.boundary).is_err());
    }

    #[test]
    fn plot_text() {
        let t = two_column(["alpha", "misfit"], [(1e-2, 0.5), (1e-3, 0.25)]);
        assert_eq!(t.lines().count(), 3);
        assert!(t.starts_with("# alpha misfit"));
        let svg = svg_line_chart("a < b", &[("k", vec![(0.0, 1.0), (1.0, 2.0)])], false, true);
        assert!(svg.contains("<polyline") && svg.contains("a &lt; b"));
    }
}
