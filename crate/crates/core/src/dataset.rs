//! Four-letter capacitive image corpus (H, L, Y, inverted Z).

use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::device::{apply_noise, NoiseMode, SensorParams};
use crate::error::{Error, Result};

pub const CLASS_COUNT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    H,
    L,
    Y,
    InvZ,
}

impl Glyph {
    pub const ALL: [Glyph; CLASS_COUNT] = [Glyph::H, Glyph::L, Glyph::Y, Glyph::InvZ];

    /// Label index: H=0, L=1, Y=2, InvZ=3.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Glyph> {
        Glyph::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Glyph::H => "h",
            Glyph::L => "l",
            Glyph::Y => "y",
            Glyph::InvZ => "invz",
        }
    }

    pub fn parse(s: &str) -> Option<Glyph> {
        Glyph::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn one_hot(self) -> [f64; CLASS_COUNT] {
        let mut y = [0.0; CLASS_COUNT];
        y[self.index()] = 1.0;
        y
    }

    fn base_rows(self) -> [&'static str; 3] {
        match self {
            Glyph::H => ["101", "111", "101"],
            Glyph::L => ["100", "100", "111"],
            Glyph::Y => ["101", "010", "010"],
            Glyph::InvZ => ["111", "010", "111"],
        }
    }
}

/// Binary glyph bitmap; `true` marks a pixel inside the letter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LetterImage {
    pub glyph: Glyph,
    pub grid: Array2<bool>,
    pub resolution: usize,
}

impl LetterImage {
    pub fn to_text(&self) -> String {
        format_bitmap(&self.grid)
    }
}

/// 5x5 source index for each output index: border rows/cols replicate the
/// nearest stroke of the centered 3x3 glyph.
const EXPAND_5: [usize; 5] = [0, 0, 1, 2, 2];

fn glyph_grid(glyph: Glyph, resolution: usize) -> Array2<bool> {
    let rows = glyph.base_rows();
    let base = Array2::from_shape_fn((3, 3), |(r, c)| rows[r].as_bytes()[c] == b'1');
    match resolution {
        3 => base,
        _ => Array2::from_shape_fn((5, 5), |(r, c)| base[(EXPAND_5[r], EXPAND_5[c])]),
    }
}

/// Canonical bitmaps in label order.
pub fn letter_patterns(resolution: usize) -> Result<Vec<LetterImage>> {
    if resolution != 3 && resolution != 5 {
        return Err(Error::Domain(format!(
            "glyph resolution must be 3 or 5, got {resolution}"
        )));
    }
    Ok(Glyph::ALL
        .into_iter()
        .map(|glyph| LetterImage {
            glyph,
            grid: glyph_grid(glyph, resolution),
            resolution,
        })
        .collect())
}

pub fn letter_pattern(glyph: Glyph, resolution: usize) -> Result<LetterImage> {
    Ok(letter_patterns(resolution)?.swap_remove(glyph.index()))
}

/// One row per line, `1` inside and `0` outside.
pub fn format_bitmap(grid: &Array2<bool>) -> String {
    let mut out = String::with_capacity(grid.len() + grid.nrows());
    for row in grid.rows() {
        out.extend(row.iter().map(|&b| if b { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

pub fn parse_bitmap(text: &str) -> Result<Array2<bool>> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let cols = lines.first().map_or(0, |l| l.len());
    if cols == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "empty bitmap".into(),
        });
    }
    let mut cells = Vec::with_capacity(lines.len() * cols);
    for (i, line) in lines.iter().enumerate() {
        if line.len() != cols {
            return Err(Error::Parse {
                line: i + 1,
                detail: format!("expected {cols} columns, found {}", line.len()),
            });
        }
        for ch in line.chars() {
            cells.push(match ch {
                '1' => true,
                '0' => false,
                other => {
                    return Err(Error::Parse {
                        line: i + 1,
                        detail: format!("unexpected character {other:?}"),
                    })
                }
            });
        }
    }
    Ok(Array2::from_shape_vec((lines.len(), cols), cells).expect("row lengths checked"))
}

/// A capacitive image with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacitiveSample {
    /// Induced capacitance per pixel (pF).
    pub c_i: Array2<f64>,
    pub label: [f64; CLASS_COUNT],
    pub clean_source: LetterImage,
}

impl CapacitiveSample {
    pub fn glyph(&self) -> Glyph {
        self.clean_source.glyph
    }
}

/// Noise-free encoding: inside pixels take `c_ih`, outside pixels `c_il`.
pub fn encode_capacitive(image: &LetterImage, params: &SensorParams) -> CapacitiveSample {
    CapacitiveSample {
        c_i: image
            .grid
            .mapv(|inside| if inside { params.c_ih } else { params.c_il }),
        label: image.glyph.one_hot(),
        clean_source: image.clone(),
    }
}

/// Clean encoding plus independent Gaussian noise on every pixel.
pub fn noisy_sample<R: Rng + ?Sized>(
    image: &LetterImage,
    params: &SensorParams,
    rng: &mut R,
) -> Result<CapacitiveSample> {
    let mut sample = encode_capacitive(image, params);
    for c in sample.c_i.iter_mut() {
        let sigma_ref = match params.noise_mode {
            NoiseMode::PerClass => *c,
            NoiseMode::Global => params.c_ih,
        };
        *c = apply_noise(*c, sigma_ref, params.noise_frac, rng)?;
    }
    Ok(sample)
}

/// `size` samples with glyphs drawn uniformly with replacement.
pub fn sample_batch<R: Rng + ?Sized>(
    size: usize,
    resolution: usize,
    params: &SensorParams,
    rng: &mut R,
) -> Result<Vec<CapacitiveSample>> {
    if size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let patterns = letter_patterns(resolution)?;
    (0..size)
        .map(|_| {
            let g = rng.gen_range(0..CLASS_COUNT);
            noisy_sample(&patterns[g], params, rng)
        })
        .collect()
}

/// `per_glyph` noisy samples of each glyph, in label order.
pub fn balanced_batch<R: Rng + ?Sized>(
    per_glyph: usize,
    resolution: usize,
    params: &SensorParams,
    rng: &mut R,
) -> Result<Vec<CapacitiveSample>> {
    let patterns = letter_patterns(resolution)?;
    let mut out = Vec::with_capacity(per_glyph * CLASS_COUNT);
    for p in &patterns {
        for _ in 0..per_glyph {
            out.push(noisy_sample(p, params, rng)?);
        }
    }
    Ok(out)
}

/// Glyph whose clean encoding is nearest in Euclidean capacitance distance.
pub fn nearest_glyph(c_i: &Array2<f64>, params: &SensorParams) -> Result<Glyph> {
    let patterns = letter_patterns(c_i.nrows())?;
    let dist = |p: &LetterImage| {
        let clean = encode_capacitive(p, params).c_i;
        clean
            .iter()
            .zip(c_i.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
    };
    Ok(patterns
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        .expect("four patterns")
        .glyph)
}

/// Glyph at minimum Hamming distance from `bitmap`; `None` on a tie or on an
/// unsupported size.
pub fn classify_bitmap(bitmap: &Array2<bool>) -> Option<Glyph> {
    if bitmap.nrows() != bitmap.ncols() {
        return None;
    }
    let patterns = letter_patterns(bitmap.nrows()).ok()?;
    let mut scored: Vec<(usize, Glyph)> = patterns
        .iter()
        .map(|p| {
            let d = p
                .grid
                .iter()
                .zip(bitmap.iter())
                .filter(|(a, b)| a != b)
                .count();
            (d, p.glyph)
        })
        .collect();
    scored.sort();
    (scored[0].0 < scored[1].0).then_some(scored[0].1)
}

/// Comma-separated capacitance matrix, one row per line.
pub fn capacitance_csv(c_i: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in c_i.rows() {
        let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn parse_capacitance_csv(text: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    detail: format!("{cell:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 {
        return Err(Error::Parse {
            line: 1,
            detail: "empty matrix".into(),
        });
    }
    let n = rows.len();
    Ok(Array2::from_shape_vec((n, cols), rows.concat()).expect("row lengths checked"))
}
