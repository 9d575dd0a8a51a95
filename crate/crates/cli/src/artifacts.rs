use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("output path has no file name")?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn color(t: f64) -> String {
    // Dark blue to yellow through teal.
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.powf(1.5)) as u8;
    let g = (40.0 + 200.0 * t) as u8;
    let b = (120.0 + 60.0 * (1.0 - t) - 100.0 * t).max(0.0) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of `values` on an `nx` by `nv` lattice (x-major) with axis ranges.
pub fn heatmap_svg(title: &str, nx: usize, nv: usize, values: &[f64], x: [f64; 2], v: [f64; 2]) -> String {
    let (w, h, pad) = (480.0, 480.0, 50.0);
    let (cw, ch) = (w / nx as f64, h / nv as f64);
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        w + 2.0 * pad,
        h + 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="30">{title}</text>"#);
    for i in 0..nx {
        for j in 0..nv {
            let z = (values[i * nv + j] - lo) / span;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                pad + i as f64 * cw,
                pad + h - (j + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                color(z)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{}">x: [{}, {}]   v: [{}, {}]   value: [{lo:.3e}, {hi:.3e}]</text>"#,
        h + pad + 20.0,
        x[0],
        x[1],
        v[0],
        v[1]
    );
    s.push_str("</svg>\n");
    s
}

/// Log-log scatter of `(bound, measured)` with the diagonal.
pub fn scatter_svg(title: &str, points: &[(f64, f64)]) -> String {
    let (w, h, pad) = (420.0, 420.0, 60.0);
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(a, b)| *a > 0.0 && *b > 0.0 && a.is_finite() && b.is_finite())
        .map(|(a, b)| (a.log10(), b.log10()))
        .collect();
    let (mut lo, mut hi) = logs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &(a, b)| (l.min(a).min(b), u.max(a).max(b)));
    if !lo.is_finite() {
        (lo, hi) = (-1.0, 0.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let px = |z: f64| pad + (z - lo) / (hi - lo) * w;
    let py = |z: f64| pad + h - (z - lo) / (hi - lo) * h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
        w + 2.0 * pad,
        h + 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="30">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{w}" height="{h}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4"/>"#,
        px(lo),
        py(lo),
        px(hi),
        py(hi)
    );
    for (a, b) in logs {
        let fill = if b <= a { "#1f6fb2" } else { "#c0392b" };
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}"/>"#, px(a), py(b));
    }
    let _ = writeln!(
        s,
        r#"<text x="{pad}" y="{}">log10 bound (horizontal) vs log10 measured, range [{lo:.2}, {hi:.2}]</text>"#,
        h + pad + 25.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn svg_shapes() {
        let s = heatmap_svg("k", 2, 3, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], [0.0, 1.0], [0.0, 1.0]);
        assert_eq!(s.matches("<rect").count(), 6);
        let s = scatter_svg("d", &[(0.5, 0.1), (0.1, 0.2), (0.0, 1.0)]);
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.contains("#c0392b"));
        assert_eq!(csv(&["a", "b"], vec![vec![1.0, 2.0]]), "a,b\n1e0,2e0\n");
    }
}
