//! CSV rendering shared by discrete and continuous trajectories.

use std::io::{self, Write};

/// 17 significant digits in scientific notation; round-trips every `f64`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{v:.16e}")
    }
}

pub(crate) struct TrajectoryRow<'a> {
    pub index: String,
    pub load: &'a [f64],
    pub toll: &'a [f64],
    pub sample: Option<(f64, Vec<f64>)>,
}

pub(crate) fn header(index: &str, links: usize, with_samples: bool) -> String {
    let mut cols = vec![index.to_owned()];
    cols.extend((1..=links).map(|i| format!("x_{i}")));
    cols.extend((1..=links).map(|i| format!("p_{i}")));
    if with_samples {
        cols.push("zeta".to_owned());
        cols.extend((1..=links).map(|i| format!("xi_{i}")));
    }
    cols.join(",")
}

pub(crate) fn write_trajectory_csv<'a, W: Write>(
    out: W,
    index: &str,
    links: usize,
    with_samples: bool,
    rows: impl Iterator<Item = TrajectoryRow<'a>>,
) -> io::Result<()> {
    let mut out = io::BufWriter::new(out);
    writeln!(out, "{}", header(index, links, with_samples))?;
    for row in rows {
        let mut line = row.index;
        for v in row.load.iter().chain(row.toll) {
            line.push(',');
            line.push_str(&fmt_float(*v));
        }
        if let Some((zeta, xi)) = row.sample {
            line.push(',');
            line.push_str(&fmt_float(zeta));
            for v in xi {
                line.push(',');
                line.push_str(&fmt_float(v));
            }
        }
        writeln!(out, "{line}")?;
    }
    out.flush()
}
