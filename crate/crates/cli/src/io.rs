//! Frame sequence I/O: numbered PNG/PGM directories or raw planar gray8
//! streams, plus keypoint and `.flo` flow import.

use crate::CliError;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use vstab_core::frame::Frame;
use vstab_core::observer::{
    DenseFlowSource, DetectorId, FlowField, ImportedKeypoints, ObserverConfig, ObserverError,
    ScoredKeypoint,
};
use vstab_core::pipeline::{FrameSink, FrameSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceFormat {
    Png,
    Pgm,
}

/// List image files in a directory, ordered by numeric stem when possible.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("cannot read input dir {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("png") | Some("pgm") | Some("PNG") | Some("PGM")
            )
        })
        .collect();
    files.sort_by_key(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        (stem.parse::<u64>().ok(), stem.to_string())
    });
    if files.is_empty() {
        return Err(CliError::Io(format!(
            "no .png/.pgm frames found in {}",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load_frame(path: &Path, index: u64) -> Result<Frame, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Io(format!("cannot decode {}: {e}", path.display())))?;
    let frame = match img {
        image::DynamicImage::ImageLuma8(g) => Frame::new(
            index,
            g.width() as usize,
            g.height() as usize,
            1,
            g.into_raw(),
        ),
        other => {
            let rgb = other.to_rgb8();
            Frame::new(
                index,
                rgb.width() as usize,
                rgb.height() as usize,
                3,
                rgb.into_raw(),
            )
        }
    };
    frame.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_sequence(dir: &Path) -> Result<Vec<Frame>, CliError> {
    let files = list_frames(dir)?;
    files
        .iter()
        .enumerate()
        .map(|(i, p)| load_frame(p, i as u64))
        .collect()
}

pub fn save_frame(dir: &Path, frame: &Frame, format: SequenceFormat) -> Result<(), CliError> {
    let ext = match format {
        SequenceFormat::Png => "png",
        SequenceFormat::Pgm => "pgm",
    };
    let path = dir.join(format!("{:06}.{ext}", frame.index));
    let w = frame.width as u32;
    let h = frame.height as u32;
    let res = if frame.channels == 1 {
        image::save_buffer(&path, frame.data(), w, h, image::ColorType::L8)
    } else {
        image::save_buffer(&path, frame.data(), w, h, image::ColorType::Rgb8)
    };
    res.map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Lazy directory source for the pipeline.
pub struct DirSource {
    files: std::vec::IntoIter<PathBuf>,
    next_index: u64,
}

impl DirSource {
    pub fn new(dir: &Path) -> Result<(Self, SequenceFormat), CliError> {
        let files = list_frames(dir)?;
        let format = match files[0].extension().and_then(|s| s.to_str()) {
            Some("pgm") | Some("PGM") => SequenceFormat::Pgm,
            _ => SequenceFormat::Png,
        };
        Ok((
            Self {
                files: files.into_iter(),
                next_index: 0,
            },
            format,
        ))
    }
}

impl FrameSource for DirSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, String> {
        match self.files.next() {
            None => Ok(None),
            Some(path) => {
                let frame =
                    load_frame(&path, self.next_index).map_err(|e| e.message().to_string())?;
                self.next_index += 1;
                Ok(Some(frame))
            }
        }
    }
}

/// Raw planar gray8 stream source.
pub struct RawSource {
    reader: BufReader<File>,
    width: usize,
    height: usize,
    next_index: u64,
}

impl RawSource {
    pub fn new(path: &Path, width: usize, height: usize) -> Result<Self, CliError> {
        let file = File::open(path)
            .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
        Ok(Self {
            reader: BufReader::new(file),
            width,
            height,
            next_index: 0,
        })
    }
}

impl FrameSource for RawSource {
    fn next_frame(&mut self) -> Result<Option<Frame>, String> {
        let mut buf = vec![0u8; self.width * self.height];
        let mut filled = 0;
        while filled < buf.len() {
            let n = self
                .reader
                .read(&mut buf[filled..])
                .map_err(|e| e.to_string())?;
            if n == 0 {
                break;
            }
            filled += n;
        }
        if filled == 0 {
            return Ok(None);
        }
        if filled != buf.len() {
            return Err("raw stream ends mid-frame".into());
        }
        let frame = Frame::new(self.next_index, self.width, self.height, 1, buf)
            .map_err(|e| e.to_string())?;
        self.next_index += 1;
        Ok(Some(frame))
    }
}

/// Numbered-image sink.
pub struct DirSink {
    dir: PathBuf,
    format: SequenceFormat,
    pub frames_written: u64,
}

impl DirSink {
    pub fn new(dir: &Path, format: SequenceFormat) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            format,
            frames_written: 0,
        })
    }
}

impl FrameSink for DirSink {
    fn consume(&mut self, frame: Frame) -> Result<(), String> {
        save_frame(&self.dir, &frame, self.format).map_err(|e| e.message().to_string())?;
        self.frames_written += 1;
        Ok(())
    }
}

/// Raw gray8 stream sink.
pub struct RawSink {
    writer: BufWriter<File>,
    pub frames_written: u64,
}

impl RawSink {
    pub fn new(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
        Ok(Self {
            writer: BufWriter::new(file),
            frames_written: 0,
        })
    }
}

impl FrameSink for RawSink {
    fn consume(&mut self, frame: Frame) -> Result<(), String> {
        if frame.channels != 1 {
            return Err("raw sink requires grayscale frames".into());
        }
        self.writer.write_all(frame.data()).map_err(|e| e.to_string())?;
        self.frames_written += 1;
        Ok(())
    }
}

/// Parse `frame_index,x,y,score,detector_id` lines.
pub fn load_keypoints(path: &Path) -> Result<ImportedKeypoints, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut map = ImportedKeypoints::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::Io(format!(
                "{}:{}: expected 5 comma-separated fields",
                path.display(),
                lineno + 1
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64, CliError> {
            s.trim().parse().map_err(|_| {
                CliError::Io(format!("{}:{}: bad {what}", path.display(), lineno + 1))
            })
        };
        let frame: u64 = fields[0].trim().parse().map_err(|_| {
            CliError::Io(format!("{}:{}: bad frame index", path.display(), lineno + 1))
        })?;
        let kp = ScoredKeypoint {
            x: parse(fields[1], "x")?,
            y: parse(fields[2], "y")?,
            score: parse(fields[3], "score")?.clamp(0.0, 1.0),
            detector_id: DetectorId::Imported,
        };
        map.entry(frame).or_default().push(kp);
    }
    Ok(map)
}

/// Dense-flow import: one `<t>.flo` file per frame pair.
pub struct FloFlowSource {
    dir: PathBuf,
}

impl FloFlowSource {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
        }
    }
}

impl DenseFlowSource for FloFlowSource {
    fn dense_flow(
        &mut self,
        _prev: &Frame,
        cur: &Frame,
        _cfg: &ObserverConfig,
    ) -> Result<FlowField, ObserverError> {
        let path = self.dir.join(format!("{}.flo", cur.index));
        let file = File::open(&path).map_err(|e| {
            ObserverError::FlowImport(format!("cannot open {}: {e}", path.display()))
        })?;
        let field = vstab_core::flo::read_flo(BufReader::new(file))
            .map_err(|e| ObserverError::FlowImport(format!("{}: {e}", path.display())))?;
        if field.width != cur.width || field.height != cur.height {
            return Err(ObserverError::DimensionMismatch(
                field.width,
                field.height,
                cur.width,
                cur.height,
            ));
        }
        Ok(field)
    }
}
