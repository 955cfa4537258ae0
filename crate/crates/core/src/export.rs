//! File outputs: feature matrices (CSV or binary), filter tables and SVG
//! plots of learned filters.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::nn::Tensor;
use crate::sinc::{build_kernel, hz_to_mel, mel_to_hz, FilterInfo, SincFilterBank};

pub const FEATURE_FORMAT_VERSION: u32 = 1;
const BINARY_MAGIC: &[u8; 4] = b"LSCF";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata written ahead of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHeader {
    pub frame_ms: f64,
    pub shift_ms: f64,
    pub checkpoint_sha256: String,
}

/// `# lsc-features v1 T=.. C=.. frame_ms=.. shift_ms=.. checkpoint=..`
/// followed by one comma-separated row per frame.
pub fn features_csv(features: &FeatureSequence, header: &FeatureHeader) -> String {
    let (t, c) = (features.num_frames(), features.dim());
    let mut out = format!(
        "# lsc-features v{FEATURE_FORMAT_VERSION} T={t} C={c} frame_ms={} shift_ms={} checkpoint={}\n",
        header.frame_ms, header.shift_ms, header.checkpoint_sha256
    );
    for row in features.values.data().chunks(c.max(1)).take(t) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_features_csv(path: &Path, features: &FeatureSequence, header: &FeatureHeader) -> Result<()> {
    write(path, features_csv(features, header).as_bytes())
}

/// Compact form: magic, version, `T`, `C` (u32 LE), frame and shift (f64 LE),
/// the 32-byte checkpoint digest, then `T * C` f64 LE values.
pub fn features_binary(features: &FeatureSequence, header: &FeatureHeader) -> Result<Vec<u8>> {
    let digest = hex::decode(&header.checkpoint_sha256)
        .ok()
        .filter(|d| d.len() == 32)
        .ok_or_else(|| Error::Domain("checkpoint digest must be 64 hex characters".into()))?;
    let mut out = Vec::with_capacity(64 + 8 * features.values.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&FEATURE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(features.num_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(features.dim() as u32).to_le_bytes());
    out.extend_from_slice(&header.frame_ms.to_le_bytes());
    out.extend_from_slice(&header.shift_ms.to_le_bytes());
    out.extend_from_slice(&digest);
    for v in features.values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses [`features_binary`] output back into `(header, [T, C] values)`.
pub fn read_features_binary(bytes: &[u8]) -> Result<(FeatureHeader, Tensor)> {
    let bad = |offset: usize, message: &str| Error::Format {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 64 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad(0, "not an lsc feature file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(4) != FEATURE_FORMAT_VERSION {
        return Err(bad(4, "unsupported feature format version"));
    }
    let (t, c) = (u32_at(8) as usize, u32_at(12) as usize);
    if bytes.len() != 64 + 8 * t * c {
        return Err(bad(64, "payload length does not match T x C"));
    }
    let header = FeatureHeader {
        frame_ms: f64_at(16),
        shift_ms: f64_at(24),
        checkpoint_sha256: hex::encode(&bytes[32..64]),
    };
    let values = (0..t * c).map(|i| f64_at(64 + 8 * i)).collect();
    Ok((header, Tensor::from_vec(&[t, c], values)))
}

/// Any `[R, C]` matrix as CSV with a caller-supplied header row.
pub fn matrix_csv(header: &[String], m: &Tensor) -> String {
    let (_, c) = m.dims2();
    let mut out = header.join(",");
    out.push('\n');
    for row in m.data().chunks(c.max(1)) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: &Path, header: &[String], m: &Tensor) -> Result<()> {
    write(path, matrix_csv(header, m).as_bytes())
}

/// Filter table sorted by center frequency, with the initial center for
/// comparison.
pub fn filters_csv(rows: &[FilterInfo], initial_centers_hz: &[f64]) -> String {
    let mut out = String::from("index,f1_hz,f2_hz,center_hz,bandwidth_hz,amplitude,init_center_hz,center_shift_rel\n");
    for r in rows {
        let init = initial_centers_hz.get(r.index).copied().unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.index,
            r.f1_hz,
            r.f2_hz,
            r.center_hz,
            r.bandwidth_hz,
            r.amplitude,
            init,
            (r.center_hz - init) / init
        );
    }
    out
}

/// `|H(f)|` of a kernel at `points` frequencies spread over `[0, 0.5]`.
pub fn magnitude_response(kernel: &[f64], points: usize) -> Vec<(f64, f64)> {
    (0..points)
        .map(|i| {
            let f = 0.5 * i as f64 / (points - 1).max(1) as f64;
            let (re, im) = kernel.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &k)| {
                let phase = 2.0 * std::f64::consts::PI * f * n as f64;
                (re + k * phase.cos(), im - k * phase.sin())
            });
            (f, (re * re + im * im).sqrt())
        })
        .collect()
}

/// Mel triangle over `[lo, hi]` (normalized), peaking at the mel midpoint.
fn mel_triangle(lo: f64, hi: f64, sample_rate: f64, f: f64) -> f64 {
    let (ml, mh) = (hz_to_mel(lo * sample_rate), hz_to_mel(hi * sample_rate));
    let peak = mel_to_hz((ml + mh) / 2.0) / sample_rate;
    if f <= lo || f >= hi {
        0.0
    } else if f <= peak {
        (f - lo) / (peak - lo)
    } else {
        (hi - f) / (hi - peak)
    }
}

fn polyline(points: &[(f64, f64)], style: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!("<polyline points=\"{}\" {style}/>\n", coords.join(" "))
}

const SVG_OPEN: &str = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";

/// Magnitude responses of `selected` filters (solid) with the mel triangle
/// of the same filter at initialization (dashed).
pub fn kernels_svg(
    bank: &SincFilterBank,
    initial: &SincFilterBank,
    selected: &[usize],
    sample_rate: u32,
) -> Result<String> {
    let (cols, cell_w, cell_h, pad) = (4usize, 220.0, 140.0, 20.0);
    let rows = selected.len().div_ceil(cols).max(1);
    let (width, height) = (cols as f64 * cell_w, rows as f64 * cell_h);
    let rate = sample_rate as f64;
    let cutoffs = bank.cutoffs();
    let init_cutoffs = initial.cutoffs();
    let mut out = String::from(SVG_OPEN);
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    for (slot, &i) in selected.iter().enumerate() {
        let (f1, f2) = *cutoffs
            .get(i)
            .ok_or_else(|| Error::Domain(format!("filter {i} does not exist")))?;
        let (x0, y0) = ((slot % cols) as f64 * cell_w, (slot / cols) as f64 * cell_h);
        let (w, h) = (cell_w - 2.0 * pad, cell_h - 2.0 * pad);
        let response = magnitude_response(&build_kernel(f1, f2, bank.kernel_len)?, 200);
        let peak = response.iter().map(|p| p.1).fold(1e-12, f64::max);
        let to_xy = |f: f64, m: f64| (x0 + pad + w * f / 0.5, y0 + pad + h * (1.0 - m));
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"none\" stroke=\"#999\"/>",
            x0 + pad,
            y0 + pad
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">filter {i}: {:.0}-{:.0} Hz</text>",
            x0 + pad,
            y0 + pad - 4.0,
            f1 * rate,
            f2 * rate
        );
        let solid: Vec<(f64, f64)> = response.iter().map(|&(f, m)| to_xy(f, m / peak)).collect();
        out.push_str(&polyline(&solid, "fill=\"none\" stroke=\"#c33\""));
        let (lo, hi) = init_cutoffs[i];
        let dashed: Vec<(f64, f64)> = response
            .iter()
            .map(|&(f, _)| to_xy(f, mel_triangle(lo, hi, rate, f)))
            .collect();
        out.push_str(&polyline(
            &dashed,
            "fill=\"none\" stroke=\"#33c\" stroke-dasharray=\"4,3\"",
        ));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Lower and upper cutoffs, each sorted ascending, plotted against rank.
pub fn bounds_svg(bank: &SincFilterBank, sample_rate: u32) -> String {
    let (width, height, pad) = (480.0, 320.0, 40.0);
    let rate = sample_rate as f64;
    let cutoffs = bank.cutoffs();
    let mut lows: Vec<f64> = cutoffs.iter().map(|c| c.0 * rate).collect();
    let mut highs: Vec<f64> = cutoffs.iter().map(|c| c.1 * rate).collect();
    lows.sort_by(f64::total_cmp);
    highs.sort_by(f64::total_cmp);
    let n = lows.len().max(2) - 1;
    let nyquist = rate / 2.0;
    let to_xy = |i: usize, hz: f64| {
        (
            pad + (width - 2.0 * pad) * i as f64 / n as f64,
            height - pad - (height - 2.0 * pad) * hz / nyquist,
        )
    };
    let mut out = String::from(SVG_OPEN);
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        out,
        "<rect x=\"{pad}\" y=\"{pad}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#999\"/>",
        width - 2.0 * pad,
        height - 2.0 * pad
    );
    let _ = writeln!(
        out,
        "<text x=\"{pad}\" y=\"{}\" font-size=\"11\">sorted cutoffs, 0 to {nyquist} Hz</text>",
        pad - 8.0
    );
    let low_pts: Vec<(f64, f64)> = lows.iter().enumerate().map(|(i, &v)| to_xy(i, v)).collect();
    let high_pts: Vec<(f64, f64)> = highs.iter().enumerate().map(|(i, &v)| to_xy(i, v)).collect();
    out.push_str(&polyline(&low_pts, "fill=\"none\" stroke=\"#36c\""));
    out.push_str(&polyline(&high_pts, "fill=\"none\" stroke=\"#c63\""));
    out.push_str("</svg>\n");
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sinc::SincConfig;

    fn features() -> FeatureSequence {
        FeatureSequence {
            values: Tensor::from_vec(&[2, 3], vec![0.0, 0.5, 1.25, -3.0, 1e-20, 7.0]),
            frame_len: 400,
            hop: 160,
        }
    }

    fn header() -> FeatureHeader {
        FeatureHeader {
            frame_ms: 25.0,
            shift_ms: 10.0,
            checkpoint_sha256: sha256_hex(b"x"),
        }
    }

    #[test]
    fn csv_layout() {
        let text = features_csv(&features(), &header());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("# lsc-features v1 T=2 C=3 frame_ms=25 shift_ms=10 checkpoint="));
        assert_eq!(lines[1], "0,0.5,1.25");
        let back: Vec<f64> = lines[2].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(back, vec![-3.0, 1e-20, 7.0]);
    }

    #[test]
    fn binary_round_trip() {
        let bytes = features_binary(&features(), &header()).unwrap();
        let (h, values) = read_features_binary(&bytes).unwrap();
        assert_eq!(h, header());
        assert_eq!(values, features().values);
        assert!(read_features_binary(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn svgs_are_well_formed() {
        let bank = SincFilterBank::mel(&SincConfig::default(), 16_000).unwrap();
        let svg = kernels_svg(&bank, &bank, &[0, 40, 127], 16_000).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
        let svg = bounds_svg(&bank, 16_000);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.descendants().filter(|n| n.has_tag_name("polyline")).count(), 2);
        assert!(kernels_svg(&bank, &bank, &[128], 16_000).is_err());
    }

    #[test]
    fn response_peaks_inside_band() {
        let k = build_kernel(0.1, 0.2, 101).unwrap();
        let r = magnitude_response(&k, 101);
        let best = r.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!(best.0 > 0.1 && best.0 < 0.2);
    }
}
