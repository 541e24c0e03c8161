//! Procedural scenes of colored shapes with pixel-accurate masks and
//! template captions whose sentence-to-region correspondence is known.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::stream::substream;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("canvas {0} too small, need at least 24")]
    CanvasTooSmall(usize),
    #[error("split fraction {0} leaves one side empty")]
    DegenerateSplit(f64),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed {kind} file {path}: {reason}")]
    Malformed {
        kind: &'static str,
        path: String,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const OBJECT_COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.15]),
    ("blue", [0.10, 0.20, 0.85]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("purple", [0.55, 0.10, 0.70]),
    ("orange", [0.95, 0.55, 0.05]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("magenta", [0.90, 0.15, 0.65]),
];

pub const BACKGROUND_COLORS: [(&str, [f64; 3]); 4] = [
    ("black", [0.05, 0.05, 0.05]),
    ("gray", [0.45, 0.45, 0.45]),
    ("white", [0.95, 0.95, 0.95]),
    ("navy", [0.08, 0.10, 0.30]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const SIZES: [&str; 2] = ["small", "large"];
pub const LOCATIONS: [&str; 9] = [
    "top left",
    "top",
    "top right",
    "left",
    "center",
    "right",
    "bottom left",
    "bottom",
    "bottom right",
];
const COUNT_WORDS: [&str; 3] = ["two", "three", "four"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObjectSpec {
    pub shape: usize,
    pub color: usize,
    pub size: usize,
    /// Cell on the 3x3 placement grid, row-major 0..9.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub background: usize,
    pub objects: Vec<ObjectSpec>,
}

/// Row-major RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>, // height * width * 3
}

impl ImageGrid {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub id: usize,
    pub spec: SceneSpec,
    pub image: ImageGrid,
    /// One binary mask per object, pairwise disjoint.
    pub masks: Vec<Vec<bool>>,
    /// Scene sentence first, then one sentence per object.
    pub long_caption: Vec<String>,
    pub short_captions: Vec<String>,
    /// Object sentence index (into `long_caption`, offset by 1) -> object.
    pub sentence_to_object: Vec<usize>,
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "bg={}", BACKGROUND_COLORS[self.background].0)?;
        write!(f, " objects=")?;
        for (i, o) in self.objects.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(
                f,
                "{}:{}:{}:{}",
                SHAPES[o.shape],
                OBJECT_COLORS[o.color].0,
                SIZES[o.size],
                o.cell
            )?;
        }
        Ok(())
    }
}

pub fn object_sentence(o: &ObjectSpec) -> String {
    format!(
        "A {} {} {} sits in the {}.",
        SIZES[o.size],
        OBJECT_COLORS[o.color].0,
        SHAPES[o.shape],
        LOCATIONS[o.cell]
    )
}

pub fn short_caption(o: &ObjectSpec) -> String {
    format!(
        "The {} {} {} is in the {}.",
        SIZES[o.size],
        OBJECT_COLORS[o.color].0,
        SHAPES[o.shape],
        LOCATIONS[o.cell]
    )
}

pub fn scene_sentence(spec: &SceneSpec) -> String {
    format!(
        "A scene of {} shapes on a {} background.",
        COUNT_WORDS[spec.objects.len() - 2],
        BACKGROUND_COLORS[spec.background].0
    )
}

/// Every word the caption templates can emit, lowercased. The tokenizer's
/// closed vocabulary is built from this list.
pub fn vocabulary_words() -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        for w in s.split_whitespace() {
            let w: String = w
                .chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            if !w.is_empty() && !words.contains(&w) {
                words.push(w);
            }
        }
    };
    push("a the scene of shapes on background sits is in");
    for w in COUNT_WORDS {
        push(w);
    }
    for (name, _) in OBJECT_COLORS {
        push(name);
    }
    for (name, _) in BACKGROUND_COLORS {
        push(name);
    }
    for s in SHAPES {
        push(s);
    }
    for s in SIZES {
        push(s);
    }
    for l in LOCATIONS {
        push(l);
    }
    words
}

fn cell_center(cell: usize, canvas: usize) -> (f64, f64) {
    let cw = canvas as f64 / 3.0;
    let row = cell / 3;
    let col = cell % 3;
    ((col as f64 + 0.5) * cw, (row as f64 + 0.5) * cw)
}

fn inside(shape: usize, dx: f64, dy: f64, h: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= h * h,
        1 => dx.abs() <= h && dy.abs() <= h,
        // Upward triangle: apex at the top of the cell.
        2 => dy >= -h && dy <= h && dx.abs() <= (dy + h) / 2.0,
        3 => {
            let w = (h * 0.45).max(1.2);
            (dx.abs() <= w && dy.abs() <= h) || (dy.abs() <= w && dx.abs() <= h)
        }
        _ => unreachable!(),
    }
}

pub fn rasterize(spec: &SceneSpec) -> (ImageGrid, Vec<Vec<bool>>) {
    let c = spec.canvas;
    let bg = BACKGROUND_COLORS[spec.background].1;
    let mut values = Vec::with_capacity(c * c * 3);
    for _ in 0..c * c {
        values.extend_from_slice(&bg);
    }
    let mut image = ImageGrid {
        height: c,
        width: c,
        values,
    };
    let cell_w = c as f64 / 3.0;
    let mut masks = Vec::with_capacity(spec.objects.len());
    for o in &spec.objects {
        let (cx, cy) = cell_center(o.cell, c);
        let h = if o.size == 1 { 0.38 * cell_w } else { 0.26 * cell_w };
        let rgb = OBJECT_COLORS[o.color].1;
        let mut mask = vec![false; c * c];
        for y in 0..c {
            for x in 0..c {
                let dx = (x as f64 + 0.5) - cx;
                let dy = (y as f64 + 0.5) - cy;
                if inside(o.shape, dx, dy, h) {
                    mask[y * c + x] = true;
                    let off = (y * c + x) * 3;
                    image.values[off..off + 3].copy_from_slice(&rgb);
                }
            }
        }
        masks.push(mask);
    }
    (image, masks)
}

fn build_sample(id: usize, spec: SceneSpec) -> AnnotatedSample {
    let (image, masks) = rasterize(&spec);
    let mut long_caption = vec![scene_sentence(&spec)];
    long_caption.extend(spec.objects.iter().map(object_sentence));
    let short_captions = spec.objects.iter().map(short_caption).collect();
    let sentence_to_object = (0..spec.objects.len()).collect();
    AnnotatedSample {
        id,
        spec,
        image,
        masks,
        long_caption,
        short_captions,
        sentence_to_object,
    }
}

/// Deterministic per (seed, index) corpus generation.
pub fn generate(seed: u64, count: usize, canvas: usize) -> Result<Vec<AnnotatedSample>> {
    if canvas < 24 {
        return Err(SynthError::CanvasTooSmall(canvas));
    }
    let mut samples = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = substream(seed, &format!("sample/{index}"));
        let n = rng.gen_range(2..=4usize);
        let mut cells: Vec<usize> = (0..9).collect();
        cells.shuffle(&mut rng);
        let mut colors: Vec<usize> = (0..OBJECT_COLORS.len()).collect();
        colors.shuffle(&mut rng);
        let objects = (0..n)
            .map(|i| ObjectSpec {
                shape: rng.gen_range(0..SHAPES.len()),
                color: colors[i],
                size: rng.gen_range(0..SIZES.len()),
                cell: cells[i],
            })
            .collect();
        let spec = SceneSpec {
            canvas,
            background: rng.gen_range(0..BACKGROUND_COLORS.len()),
            objects,
        };
        samples.push(build_sample(index, spec));
    }
    Ok(samples)
}

/// Disjoint seed-deterministic split; sizes are `round(n * fraction)` on
/// the train side.
pub fn corpus_split(
    samples: &[AnnotatedSample],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<AnnotatedSample>, Vec<AnnotatedSample>)> {
    let n = samples.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    if !(train_fraction > 0.0 && train_fraction < 1.0) || n_train == 0 || n_train >= n {
        return Err(SynthError::DegenerateSplit(train_fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "corpus-split");
    order.shuffle(&mut rng);
    let train = order[..n_train].iter().map(|&i| samples[i].clone()).collect();
    let test = order[n_train..].iter().map(|&i| samples[i].clone()).collect();
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Image file formats: binary PPM (P6) and PGM (P5), maxval 255.

pub fn write_ppm(path: &Path, image: &ImageGrid) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, off) = parse_netpbm_header(&data, b"P6", path)?;
    let need = w * h * 3;
    if data.len() < off + need {
        return Err(SynthError::Malformed {
            kind: "ppm",
            path: path.display().to_string(),
            reason: "truncated pixel data".into(),
        });
    }
    let values = data[off..off + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(ImageGrid {
        height: h,
        width: w,
        values,
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", width, height)?;
    f.write_all(values)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, off) = parse_netpbm_header(&data, b"P5", path)?;
    if data.len() < off + w * h {
        return Err(SynthError::Malformed {
            kind: "pgm",
            path: path.display().to_string(),
            reason: "truncated pixel data".into(),
        });
    }
    Ok((w, h, data[off..off + w * h].to_vec()))
}

fn parse_netpbm_header(data: &[u8], magic: &[u8], path: &Path) -> Result<(usize, usize, usize)> {
    let bad = |reason: &str| SynthError::Malformed {
        kind: "netpbm",
        path: path.display().to_string(),
        reason: reason.into(),
    };
    if data.len() < 2 || &data[..2] != magic {
        return Err(bad("wrong magic"));
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("missing header field"));
        }
        let text = std::str::from_utf8(&data[start..pos]).map_err(|_| bad("non-ascii header"))?;
        fields.push(text.parse::<usize>().map_err(|_| bad("bad header number"))?);
    }
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    // Single whitespace byte separates header from pixel data.
    Ok((fields[0], fields[1], pos + 1))
}

// ---------------------------------------------------------------------------
// Corpus directory layout.

pub fn write_corpus(dir: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    fs::create_dir_all(dir.join("captions"))?;
    let mut manifest = String::new();
    for s in samples {
        let name = format!("{:04}", s.id);
        write_ppm(&dir.join("images").join(format!("{name}.ppm")), &s.image)?;
        for (k, mask) in s.masks.iter().enumerate() {
            let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_pgm(
                &dir.join("masks").join(format!("{name}_{k}.pgm")),
                s.image.width,
                s.image.height,
                &bytes,
            )?;
        }
        fs::write(
            dir.join("captions").join(format!("{name}.txt")),
            s.long_caption.join("\n") + "\n",
        )?;
        manifest.push_str(&format!("{} canvas={} {}\n", name, s.spec.canvas, s.spec));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    let vocab = vocabulary_words();
    let mut lines = vec!["<pad>".to_string(), "<bos>".to_string(), "<eos>".to_string(), "<unk>".to_string()];
    lines.extend(vocab);
    fs::write(dir.join("vocab.txt"), lines.join("\n") + "\n")?;
    Ok(())
}

fn lookup(table: &[(&str, [f64; 3])], name: &str) -> Option<usize> {
    table.iter().position(|(n, _)| *n == name)
}

pub fn read_corpus(dir: &Path) -> Result<Vec<AnnotatedSample>> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path)?;
    let bad = |reason: String| SynthError::Malformed {
        kind: "manifest",
        path: manifest_path.display().to_string(),
        reason,
    };
    let mut samples = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let name = parts.next().ok_or_else(|| bad("empty line".into()))?;
        let id: usize = name.parse().map_err(|_| bad(format!("bad id {name}")))?;
        let canvas: usize = parts
            .next()
            .and_then(|f| f.strip_prefix("canvas="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing canvas field".into()))?;
        let background = parts
            .next()
            .and_then(|f| f.strip_prefix("bg="))
            .and_then(|v| lookup(&BACKGROUND_COLORS, v))
            .ok_or_else(|| bad("missing bg field".into()))?;
        let object_field = parts
            .next()
            .and_then(|f| f.strip_prefix("objects="))
            .ok_or_else(|| bad("missing objects field".into()))?;
        let mut objects = Vec::new();
        for entry in object_field.split(',') {
            let bits: Vec<&str> = entry.split(':').collect();
            if bits.len() != 4 {
                return Err(bad(format!("bad object entry {entry}")));
            }
            objects.push(ObjectSpec {
                shape: SHAPES
                    .iter()
                    .position(|s| *s == bits[0])
                    .ok_or_else(|| bad(format!("bad shape {}", bits[0])))?,
                color: lookup(&OBJECT_COLORS, bits[1])
                    .ok_or_else(|| bad(format!("bad color {}", bits[1])))?,
                size: SIZES
                    .iter()
                    .position(|s| *s == bits[2])
                    .ok_or_else(|| bad(format!("bad size {}", bits[2])))?,
                cell: bits[3].parse().map_err(|_| bad(format!("bad cell {}", bits[3])))?,
            });
        }
        let spec = SceneSpec {
            canvas,
            background,
            objects,
        };
        let image = read_ppm(&dir.join("images").join(format!("{name}.ppm")))?;
        let mut masks = Vec::new();
        for k in 0..spec.objects.len() {
            let (w, _, bytes) = read_pgm(&dir.join("masks").join(format!("{name}_{k}.pgm")))?;
            debug_assert_eq!(w, image.width);
            masks.push(bytes.iter().map(|&b| b > 127).collect());
        }
        let caption_text = fs::read_to_string(dir.join("captions").join(format!("{name}.txt")))?;
        let long_caption: Vec<String> = caption_text.lines().map(|l| l.to_string()).collect();
        let short_captions = spec.objects.iter().map(short_caption).collect();
        let sentence_to_object = (0..spec.objects.len()).collect();
        samples.push(AnnotatedSample {
            id,
            spec,
            image,
            masks,
            long_caption,
            short_captions,
            sentence_to_object,
        });
    }
    Ok(samples)
}
