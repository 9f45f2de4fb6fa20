//! Score and class maps as CSV tables or binary PGM (P5) images.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use crate::cloud::CodeGrid;
use crate::error::{Error, Result};
use crate::inference::ScoreMap;

/// `row,col,echo,score`, one line per echo slot.
pub fn write_scores_csv(scores: &ScoreMap, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "echo", "score"])?;
    for h in 0..scores.height {
        for c in 0..scores.width {
            for e in 0..scores.echoes {
                w.write_record([h.to_string(), c.to_string(), e.to_string(), scores.get(h, c, e).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(input: impl io::Read, height: usize, width: usize, echoes: usize) -> Result<ScoreMap> {
    let mut values = vec![f64::NAN; height * width * echoes];
    for row in csv::Reader::from_reader(input).records() {
        let row = row?;
        let num = |i: usize| -> Result<&str> { row.get(i).ok_or_else(|| Error::Format("short score row".into())) };
        let idx = |i: usize| -> Result<usize> {
            num(i)?.parse().map_err(|_| Error::Format("bad score index".into()))
        };
        let (h, c, e) = (idx(0)?, idx(1)?, idx(2)?);
        if h >= height || c >= width || e >= echoes {
            return Err(Error::Format(format!("score row ({h}, {c}, {e}) outside the grid")));
        }
        values[(h * width + c) * echoes + e] =
            num(3)?.parse().map_err(|_| Error::Format("bad score value".into()))?;
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Format("score table does not cover the grid".into()));
    }
    ScoreMap::new(height, width, echoes, values)
}

/// `row,col,echo,class`, one line per echo slot.
pub fn write_classes_csv(codes: &CodeGrid, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "echo", "class"])?;
    for h in 0..codes.height {
        for c in 0..codes.width {
            for e in 0..codes.echoes {
                let v = codes.codes[(h * codes.width + c) * codes.echoes + e];
                w.write_record([h.to_string(), c.to_string(), e.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary 8-bit PGM.
pub fn write_pgm(out: &mut impl Write, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    Ok(())
}

/// Parses a binary 8-bit PGM into (width, height, pixels).
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s}")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::Format("only 8-bit P5 images are supported".into()));
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok((w, h, data.to_vec()))
}

/// Gray levels per echo slot: scores mapped linearly from their overall
/// minimum (black) to maximum (white).
pub fn score_images(scores: &ScoreMap) -> Vec<Vec<u8>> {
    let lo = scores.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    (0..scores.echoes)
        .map(|e| {
            (0..scores.height * scores.width)
                .map(|p| (((scores.scores[p * scores.echoes + e] - lo) / span) * 255.0).round() as u8)
                .collect()
        })
        .collect()
}

/// Gray levels per echo slot: class code times 63.
pub fn class_images(codes: &CodeGrid) -> Vec<Vec<u8>> {
    (0..codes.echoes)
        .map(|e| {
            (0..codes.height * codes.width)
                .map(|p| codes.codes[p * codes.echoes + e].saturating_mul(63))
                .collect()
        })
        .collect()
}

/// Writes one image per echo slot as `<stem>.echo<e>.pgm` and returns the paths.
pub fn write_pgm_series(stem: &Path, width: usize, height: usize, images: &[Vec<u8>]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (e, img) in images.iter().enumerate() {
        let mut name = stem.as_os_str().to_owned();
        name.push(format!(".echo{e}.pgm"));
        let path = PathBuf::from(name);
        let mut f = io::BufWriter::new(std::fs::File::create(&path)?);
        write_pgm(&mut f, width, height, img)?;
        f.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let px: Vec<u8> = (0..12).collect();
        let mut buf = Vec::new();
        write_pgm(&mut buf, 4, 3, &px).unwrap();
        assert!(buf.starts_with(b"P5\n4 3\n255\n"));
        assert_eq!(read_pgm(&buf).unwrap(), (4, 3, px));
        assert!(read_pgm(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let s = ScoreMap::new(2, 2, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-9, 7.0, -2.0, 0.125]).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&s, &mut buf).unwrap();
        assert_eq!(read_scores_csv(&buf[..], 2, 2, 2).unwrap(), s);
    }

    #[test]
    fn score_image_extremes() {
        let s = ScoreMap::new(1, 2, 1, vec![-3.0, 5.0]).unwrap();
        assert_eq!(score_images(&s), vec![vec![0, 255]]);
    }
}
