//! Multi-echo ordered point clouds, ground-truth labels and their binary files.
//!
//! Cloud file (`.meoc`), little-endian:
//!
//! ```text
//! "MEOC" | version u32 = 1 | H u32 | W u32 | Ne u32
//! H*W*Ne records (h, then w, then e): x f32 | y f32 | z f32 | intensity f32 | valid u8 | 3 zero bytes
//! H*W angle pairs (h, then w):        azimuth f32 | elevation f32
//! ```
//!
//! Label file (`.mel`): the same 20-byte header followed by one `u8` per cell-echo
//! (0 = empty, 1 = valid object, 2 = noise particle, 3 = artifact, 4 = substitute
//! echo when the file holds inference classes instead of ground truth).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MEOC";
pub const VERSION: u32 = 1;
pub const HEADER_SIZE: usize = 20;
pub const RECORD_SIZE: usize = 20;
pub const ANGLE_SIZE: usize = 8;

/// One echo slot of the ordered grid.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointRecord {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub valid: bool,
}

impl PointRecord {
    pub const EMPTY: PointRecord = PointRecord {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        intensity: 0.0,
        valid: false,
    };

    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        PointRecord {
            x,
            y,
            z,
            intensity,
            valid: true,
        }
    }

    /// Euclidean norm of the coordinates; 0 for empty slots.
    #[inline]
    pub fn range(&self) -> f64 {
        if !self.valid {
            return 0.0;
        }
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    #[inline]
    pub fn xyz(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    /// Same coordinates, intensity and flag down to the bit.
    pub fn bit_eq(&self, other: &PointRecord) -> bool {
        self.valid == other.valid
            && self.x.to_bits() == other.x.to_bits()
            && self.y.to_bits() == other.y.to_bits()
            && self.z.to_bits() == other.z.to_bits()
            && self.intensity.to_bits() == other.intensity.to_bits()
    }
}

/// Squared Euclidean distance between two records, in f64.
#[inline]
pub fn dist2(a: &PointRecord, b: &PointRecord) -> f64 {
    let dx = a.x as f64 - b.x as f64;
    let dy = a.y as f64 - b.y as f64;
    let dz = a.z as f64 - b.z as f64;
    dx * dx + dy * dy + dz * dz
}

/// An H x W x Ne grid of echoes with per-cell beam angles.
///
/// Construction validates every invariant, so a value of this type is always
/// well formed: empty slots are all-zero, echo slot 0 holds the strongest
/// return of its group and no group contains two identical echoes.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoOrderedCloud {
    height: usize,
    width: usize,
    echoes: usize,
    cells: Vec<PointRecord>,
    angles: Vec<[f32; 2]>,
}

impl MultiEchoOrderedCloud {
    pub fn new(
        height: usize,
        width: usize,
        echoes: usize,
        cells: Vec<PointRecord>,
        angles: Vec<[f32; 2]>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || echoes == 0 {
            return Err(Error::Invariant(format!(
                "grid sizes must be positive, got {height}x{width}x{echoes}"
            )));
        }
        if cells.len() != height * width * echoes {
            return Err(Error::Invariant(format!(
                "expected {} records, got {}",
                height * width * echoes,
                cells.len()
            )));
        }
        if angles.len() != height * width {
            return Err(Error::Invariant(format!(
                "expected {} angle pairs, got {}",
                height * width,
                angles.len()
            )));
        }
        let cloud = MultiEchoOrderedCloud {
            height,
            width,
            echoes,
            cells,
            angles,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    /// All-empty cloud with the given beam angles.
    pub fn empty(height: usize, width: usize, echoes: usize, angles: Vec<[f32; 2]>) -> Result<Self> {
        Self::new(
            height,
            width,
            echoes,
            vec![PointRecord::EMPTY; height * width * echoes],
            angles,
        )
    }

    fn validate(&self) -> Result<()> {
        for (i, a) in self.angles.iter().enumerate() {
            if !a[0].is_finite() || !a[1].is_finite() {
                return Err(Error::Invariant(format!("non-finite angle at cell {i}")));
            }
        }
        for h in 0..self.height {
            for w in 0..self.width {
                let group = self.group(h, w);
                for (e, p) in group.iter().enumerate() {
                    if p.valid {
                        let finite = p.x.is_finite() && p.y.is_finite() && p.z.is_finite();
                        if !finite || p.range() <= 0.0 {
                            return Err(Error::Invariant(format!(
                                "valid echo ({h}, {w}, {e}) needs finite, non-zero coordinates"
                            )));
                        }
                        if !(0.0..=1.0).contains(&p.intensity) {
                            return Err(Error::Invariant(format!(
                                "intensity {} at ({h}, {w}, {e}) outside [0, 1]",
                                p.intensity
                            )));
                        }
                    } else if p.x != 0.0 || p.y != 0.0 || p.z != 0.0 || p.intensity != 0.0 {
                        return Err(Error::Invariant(format!(
                            "empty slot ({h}, {w}, {e}) must hold zeros"
                        )));
                    }
                }
                let any_valid = group.iter().any(|p| p.valid);
                if any_valid && !group[0].valid {
                    return Err(Error::Invariant(format!(
                        "group ({h}, {w}) has echoes but an empty strongest slot"
                    )));
                }
                for (e, p) in group.iter().enumerate().skip(1) {
                    if p.valid && p.intensity > group[0].intensity {
                        return Err(Error::Invariant(format!(
                            "echo ({h}, {w}, {e}) is stronger than echo slot 0"
                        )));
                    }
                }
                for a in 0..group.len() {
                    for b in a + 1..group.len() {
                        if group[a].valid && group[a].bit_eq(&group[b]) {
                            return Err(Error::Invariant(format!(
                                "duplicate echoes {a} and {b} in group ({h}, {w})"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn echoes(&self) -> usize {
        self.echoes
    }

    /// Number of echo groups (H * W).
    #[inline]
    pub fn groups(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.cells.iter().all(|p| !p.valid)
    }

    /// Flat index of (h, w, e); echoes vary fastest.
    #[inline]
    pub fn index(&self, h: usize, w: usize, e: usize) -> usize {
        (h * self.width + w) * self.echoes + e
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, e: usize) -> &PointRecord {
        &self.cells[self.index(h, w, e)]
    }

    pub fn try_get(&self, h: usize, w: usize, e: usize) -> Result<&PointRecord> {
        if h >= self.height || w >= self.width || e >= self.echoes {
            return Err(Error::Index {
                h,
                w,
                e,
                height: self.height,
                width: self.width,
                echoes: self.echoes,
            });
        }
        Ok(self.get(h, w, e))
    }

    /// The echoes of one pulse.
    #[inline]
    pub fn group(&self, h: usize, w: usize) -> &[PointRecord] {
        let start = (h * self.width + w) * self.echoes;
        &self.cells[start..start + self.echoes]
    }

    #[inline]
    pub fn records(&self) -> &[PointRecord] {
        &self.cells
    }

    #[inline]
    pub fn angles(&self) -> &[[f32; 2]] {
        &self.angles
    }

    /// Azimuth of cell (h, w) in radians.
    #[inline]
    pub fn azimuth(&self, h: usize, w: usize) -> f64 {
        self.angles[h * self.width + w][0] as f64
    }

    /// Elevation of cell (h, w) in radians.
    #[inline]
    pub fn elevation(&self, h: usize, w: usize) -> f64 {
        self.angles[h * self.width + w][1] as f64
    }

    /// Range of echo (h, w, e) in meters, 0 for empty slots.
    pub fn range_of(&self, h: usize, w: usize, e: usize) -> Result<f64> {
        Ok(self.try_get(h, w, e)?.range())
    }

    #[inline]
    pub fn range(&self, h: usize, w: usize, e: usize) -> f64 {
        self.get(h, w, e).range()
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|p| p.valid).count()
    }

    /// Single-echo cloud holding only echo slot 0.
    pub fn strongest(&self) -> MultiEchoOrderedCloud {
        let cells = (0..self.groups())
            .map(|g| self.cells[g * self.echoes])
            .collect();
        MultiEchoOrderedCloud {
            height: self.height,
            width: self.width,
            echoes: 1,
            cells,
            angles: self.angles.clone(),
        }
    }

    /// Copy with one record replaced; the result is re-validated.
    pub fn with_record(&self, h: usize, w: usize, e: usize, record: PointRecord) -> Result<Self> {
        self.try_get(h, w, e)?;
        let mut cells = self.cells.clone();
        cells[self.index(h, w, e)] = record;
        Self::new(self.height, self.width, self.echoes, cells, self.angles.clone())
    }

    /// Bitwise equality, treating `-0.0` and `0.0` as different.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.echoes == other.echoes
            && self.cells.iter().zip(&other.cells).all(|(a, b)| a.bit_eq(b))
            && self.angles.iter().zip(&other.angles).all(|(a, b)| {
                a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits()
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_SIZE + self.cells.len() * RECORD_SIZE + self.angles.len() * ANGLE_SIZE,
        );
        write_header(&mut out, self.height, self.width, self.echoes);
        for p in &self.cells {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.z.to_le_bytes());
            out.extend_from_slice(&p.intensity.to_le_bytes());
            out.extend_from_slice(&[p.valid as u8, 0, 0, 0]);
        }
        for a in &self.angles {
            out.extend_from_slice(&a[0].to_le_bytes());
            out.extend_from_slice(&a[1].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (height, width, echoes) = read_header(bytes)?;
        let n = height * width * echoes;
        let expected = HEADER_SIZE + n * RECORD_SIZE + height * width * ANGLE_SIZE;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes for {height}x{width}x{echoes}, found {}",
                bytes.len()
            )));
        }
        let mut cells = Vec::with_capacity(n);
        for rec in bytes[HEADER_SIZE..HEADER_SIZE + n * RECORD_SIZE].chunks_exact(RECORD_SIZE) {
            let valid = match rec[16] {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("bad valid flag {v}"))),
            };
            if rec[17..20] != [0, 0, 0] {
                return Err(Error::Format("non-zero record padding".into()));
            }
            cells.push(PointRecord {
                x: f32_at(rec, 0),
                y: f32_at(rec, 4),
                z: f32_at(rec, 8),
                intensity: f32_at(rec, 12),
                valid,
            });
        }
        let angles = bytes[HEADER_SIZE + n * RECORD_SIZE..]
            .chunks_exact(ANGLE_SIZE)
            .map(|a| [f32_at(a, 0), f32_at(a, 4)])
            .collect();
        Self::new(height, width, echoes, cells, angles)
    }
}

fn f32_at(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn write_header(out: &mut Vec<u8>, h: usize, w: usize, e: usize) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [h, w, e] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
}

fn read_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file truncated: {} bytes, header needs {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (h, w, e) = (
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    );
    if h == 0 || w == 0 || e == 0 {
        return Err(Error::Format(format!("declared sizes must be >= 1, got {h}x{w}x{e}")));
    }
    Ok((h, w, e))
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<MultiEchoOrderedCloud> {
    MultiEchoOrderedCloud::from_bytes(&fs::read(path)?)
}

pub fn write_cloud(cloud: &MultiEchoOrderedCloud, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cloud.to_bytes())?;
    Ok(())
}

/// Ground-truth class of one echo slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Label {
    Empty = 0,
    ValidObject = 1,
    NoiseParticle = 2,
    Artifact = 3,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::Empty),
            1 => Some(Label::ValidObject),
            2 => Some(Label::NoiseParticle),
            3 => Some(Label::Artifact),
            _ => None,
        }
    }

    /// Echoes a perfect denoiser discards.
    pub fn is_noise(self) -> bool {
        matches!(self, Label::NoiseParticle | Label::Artifact)
    }
}

/// Per-echo ground truth, aligned with a cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    echoes: usize,
    labels: Vec<Label>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, echoes: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != height * width * echoes || labels.is_empty() {
            return Err(Error::Invariant(format!(
                "{} labels do not fill a {height}x{width}x{echoes} grid",
                labels.len()
            )));
        }
        Ok(LabelGrid {
            height,
            width,
            echoes,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn echoes(&self) -> usize {
        self.echoes
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, e: usize) -> Label {
        self.labels[(h * self.width + w) * self.echoes + e]
    }

    /// Checks shape and that a label is empty exactly where the cloud is.
    pub fn check_against(&self, cloud: &MultiEchoOrderedCloud) -> Result<()> {
        if (self.height, self.width, self.echoes) != (cloud.height(), cloud.width(), cloud.echoes()) {
            return Err(Error::Alignment(format!(
                "labels {}x{}x{} vs cloud {}x{}x{}",
                self.height,
                self.width,
                self.echoes,
                cloud.height(),
                cloud.width(),
                cloud.echoes()
            )));
        }
        for (i, (l, p)) in self.labels.iter().zip(cloud.records()).enumerate() {
            if (*l == Label::Empty) == p.valid {
                return Err(Error::Invariant(format!(
                    "label {l:?} at flat index {i} disagrees with validity {}",
                    p.valid
                )));
            }
        }
        Ok(())
    }

    /// Labels of echo slot 0 only.
    pub fn strongest(&self) -> LabelGrid {
        LabelGrid {
            height: self.height,
            width: self.width,
            echoes: 1,
            labels: self.labels.iter().step_by(self.echoes).copied().collect(),
        }
    }

    pub fn to_codes(&self) -> CodeGrid {
        CodeGrid {
            height: self.height,
            width: self.width,
            echoes: self.echoes,
            codes: self.labels.iter().map(|&l| l as u8).collect(),
        }
    }

    pub fn from_codes(codes: &CodeGrid) -> Result<Self> {
        let labels = codes
            .codes
            .iter()
            .map(|&c| Label::from_code(c).ok_or_else(|| Error::Format(format!("bad label code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(codes.height, codes.width, codes.echoes, labels)
    }
}

/// Raw contents of a `.mel` file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeGrid {
    pub height: usize,
    pub width: usize,
    pub echoes: usize,
    pub codes: Vec<u8>,
}

impl CodeGrid {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_SIZE + self.codes.len());
        write_header(&mut out, self.height, self.width, self.echoes);
        out.extend_from_slice(&self.codes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (height, width, echoes) = read_header(bytes)?;
        let n = height * width * echoes;
        if bytes.len() != HEADER_SIZE + n {
            return Err(Error::Format(format!(
                "expected {} label bytes, found {}",
                HEADER_SIZE + n,
                bytes.len()
            )));
        }
        Ok(CodeGrid {
            height,
            width,
            echoes,
            codes: bytes[HEADER_SIZE..].to_vec(),
        })
    }
}

pub fn read_codes(path: impl AsRef<Path>) -> Result<CodeGrid> {
    CodeGrid::from_bytes(&fs::read(path)?)
}

pub fn write_codes(codes: &CodeGrid, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, codes.to_bytes())?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    LabelGrid::from_codes(&read_codes(path)?)
}

pub fn write_labels(labels: &LabelGrid, path: impl AsRef<Path>) -> Result<()> {
    write_codes(&labels.to_codes(), path)
}
