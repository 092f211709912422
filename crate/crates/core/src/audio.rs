//! WAV input/output, clip segmentation and clip manifests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: hound::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: hound::Error },
    #[error("unsupported WAV encoding in {path}: {detail}")]
    Unsupported { path: PathBuf, detail: String },
    #[error("{0} has an empty payload")]
    Empty(PathBuf),
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    SampleRate { expected: u32, found: u32 },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("hop must be positive")]
    ZeroHop,
    #[error("clip length {clip_len} exceeds signal length {len} and padding is disabled")]
    TooShort { clip_len: usize, len: usize },
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A multi-channel signal with samples nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    /// `[channels, length]`.
    pub samples: Array2<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Array2<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        let (c, l) = samples.dim();
        if !(1..=2).contains(&c) {
            return Err(AudioError::InvalidClip(format!("{c} channels (expected 1 or 2)")));
        }
        if l == 0 {
            return Err(AudioError::InvalidClip("zero length".into()));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(AudioError::InvalidClip("non-finite sample".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(channels: usize, len: usize, sample_rate: u32) -> Self {
        Self { samples: Array2::zeros((channels, len)), sample_rate }
    }

    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    /// Mono clips are duplicated into `channels` identical channels; a clip
    /// that already has the requested channel count is returned unchanged.
    pub fn with_channels(self, channels: usize) -> Result<Self, AudioError> {
        match (self.channels(), channels) {
            (a, b) if a == b => Ok(self),
            (1, 2) => {
                let row = self.samples.row(0).to_owned();
                let mut out = Array2::zeros((2, self.len()));
                out.row_mut(0).assign(&row);
                out.row_mut(1).assign(&row);
                Ok(Self { samples: out, sample_rate: self.sample_rate })
            }
            (a, b) => Err(AudioError::InvalidClip(format!("cannot map {a} channels to {b}"))),
        }
    }

    /// Samples `[start, start + len)`, zero-filled past the end.
    pub fn slice_padded(&self, start: usize, len: usize) -> Self {
        let mut out = Array2::zeros((self.channels(), len));
        let end = (start + len).min(self.len());
        if start < end {
            out.slice_mut(s![.., ..end - start]).assign(&self.samples.slice(s![.., start..end]));
        }
        Self { samples: out, sample_rate: self.sample_rate }
    }
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let read_err = |source| AudioError::Read { path: path.to_path_buf(), source };
    let reader = hound::WavReader::open(path).map_err(read_err)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(AudioError::Unsupported {
            path: path.to_path_buf(),
            detail: format!("{channels} channels"),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(read_err)?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(read_err)?
        }
        (fmt, bits) => {
            return Err(AudioError::Unsupported {
                path: path.to_path_buf(),
                detail: format!("{fmt:?} with {bits} bits"),
            })
        }
    };
    let len = interleaved.len() / channels;
    if len == 0 {
        return Err(AudioError::Empty(path.to_path_buf()));
    }
    let samples = Array2::from_shape_fn((channels, len), |(c, i)| interleaved[i * channels + c]);
    AudioClip::new(samples, spec.sample_rate)
}

/// Reads a WAV and coerces it to `channels`, rejecting a rate mismatch.
pub fn read_wav_as(
    path: impl AsRef<Path>,
    channels: usize,
    sample_rate: u32,
) -> Result<AudioClip, AudioError> {
    let clip = read_wav(path)?;
    if clip.sample_rate != sample_rate {
        return Err(AudioError::SampleRate { expected: sample_rate, found: clip.sample_rate });
    }
    clip.with_channels(channels)
}

pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>, format: WavFormat) -> Result<(), AudioError> {
    let path = path.as_ref();
    if clip.samples.iter().any(|x| !x.is_finite()) {
        return Err(AudioError::InvalidClip("non-finite sample".into()));
    }
    let write_err = |source| AudioError::Write { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: clip.channels() as u16,
        sample_rate: clip.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(write_err)?;
    for i in 0..clip.len() {
        for c in 0..clip.channels() {
            let x = clip.samples[[c, i]];
            match format {
                WavFormat::Pcm16 => {
                    let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q).map_err(write_err)?;
                }
                WavFormat::Float32 => writer.write_sample(x).map_err(write_err)?,
            }
        }
    }
    writer.finalize().map_err(write_err)
}

/// Cuts `clip` into windows of `clip_len` samples every `hop` samples.
///
/// Without padding only windows lying fully inside the signal are emitted.
/// With padding, windows continue until one reaches the end of the signal and
/// the tail is zero-filled.
pub fn segment(
    clip: &AudioClip,
    clip_len: usize,
    hop: usize,
    pad: bool,
) -> Result<Vec<AudioClip>, AudioError> {
    if hop == 0 {
        return Err(AudioError::ZeroHop);
    }
    if clip_len == 0 {
        return Err(AudioError::InvalidClip("clip length must be positive".into()));
    }
    let len = clip.len();
    if clip_len > len && !pad {
        return Err(AudioError::TooShort { clip_len, len });
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if pad {
            out.push(clip.slice_padded(start, clip_len));
            if start + clip_len >= len {
                break;
            }
        } else {
            if start + clip_len > len {
                break;
            }
            out.push(clip.slice_padded(start, clip_len));
        }
        start += hop;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub start: usize,
    pub len: usize,
    pub split: Split,
}

/// Tab-separated list of fixed-length clips: `path<TAB>start<TAB>len<TAB>split`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClipManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn parse(text: &str) -> Result<Self, AudioError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: String| AudioError::Manifest { line: i + 1, detail };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let start = fields[1].parse().map_err(|e| bad(format!("start: {e}")))?;
            let len = fields[2].parse().map_err(|e| bad(format!("len: {e}")))?;
            let split = fields[3].parse().map_err(bad)?;
            entries.push(ManifestEntry { path: PathBuf::from(fields[0]), start, len, split });
        }
        let manifest = Self { entries };
        if let Some(first) = manifest.entries.first() {
            if let Some((i, e)) = manifest.entries.iter().enumerate().find(|(_, e)| e.len != first.len) {
                return Err(AudioError::Manifest {
                    line: i + 1,
                    detail: format!("clip length {} differs from {}", e.len, first.len),
                });
            }
        }
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.path.display(), e.start, e.len, e.split))
            .collect()
    }

    pub fn clip_len(&self) -> Option<usize> {
        self.entries.first().map(|e| e.len)
    }

    pub fn filter(&self, split: Split) -> ClipManifest {
        ClipManifest { entries: self.entries.iter().filter(|e| e.split == split).cloned().collect() }
    }

    /// Checks every entry against the length of its file.
    pub fn validate(&self) -> Result<(), AudioError> {
        for (i, e) in self.entries.iter().enumerate() {
            let reader = hound::WavReader::open(&e.path)
                .map_err(|source| AudioError::Read { path: e.path.clone(), source })?;
            let frames = reader.duration() as usize;
            if e.start + e.len > frames {
                return Err(AudioError::Manifest {
                    line: i + 1,
                    detail: format!("entry ends at {} beyond file length {frames}", e.start + e.len),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn clip_from(v: &[f32]) -> AudioClip {
        AudioClip::new(Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap(), 8000).unwrap()
    }

    fn write_raw_i16(path: &Path, values: &[i16], channels: u16, rate: u32) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn int16_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw_i16(&p, &[16384], 1, 22050);
        let c = read_wav(&p).unwrap();
        assert_eq!(c.samples, array![[0.5f32]]);
        assert_eq!(c.sample_rate, 22050);

        write_raw_i16(&p, &[-32768], 1, 22050);
        assert_eq!(read_wav(&p).unwrap().samples[[0, 0]], -1.0);
    }

    #[test]
    fn three_second_stereo_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let clip = AudioClip::zeros(2, 132_300, 44_100);
        write_wav(&clip, &p, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples.dim(), (2, 132_300));
    }

    #[test]
    fn zero_length_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.wav");
        write_raw_i16(&p, &[], 1, 8000);
        assert!(matches!(read_wav(&p), Err(AudioError::Empty(_))));
    }

    #[test]
    fn unsupported_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(5i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(AudioError::Unsupported { .. })));
        assert!(read_wav(dir.path().join("missing.wav")).is_err());
    }

    #[test]
    fn float_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let v: Vec<f32> = (0..257).map(|i| ((i as f32) * 0.377).sin() * 0.9).collect();
        let clip = clip_from(&v);
        write_wav(&clip, &p, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), clip);
    }

    #[test]
    fn int16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.wav");
        let clip = clip_from(&[0.5, -0.25, 0.123_456, 0.999_99, -1.0, 0.0]);
        write_wav(&clip, &p, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.samples[[0, 0]], 0.5);
        for (a, b) in clip.samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn silence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.wav");
        let clip = AudioClip::zeros(2, 100, 8000);
        write_wav(&clip, &p, WavFormat::Pcm16).unwrap();
        assert_eq!(read_wav(&p).unwrap(), clip);
    }

    #[test]
    fn mono_to_stereo_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        write_raw_i16(&p, &[100, 200, 300], 1, 8000);
        let c = read_wav_as(&p, 2, 8000).unwrap();
        assert_eq!(c.channels(), 2);
        assert_eq!(c.samples.row(0), c.samples.row(1));
        assert!(matches!(read_wav_as(&p, 2, 44100), Err(AudioError::SampleRate { .. })));
    }

    #[test]
    fn segment_examples() {
        let c = clip_from(&[1.0; 10]);
        let segs = segment(&c, 4, 4, true).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[2].samples.row(0).to_vec(), vec![1.0, 1.0, 0.0, 0.0]);

        let c = clip_from(&(0..9).map(|i| i as f32 / 10.0).collect::<Vec<_>>());
        let segs = segment(&c, 4, 2, false).unwrap();
        assert_eq!(segs.len(), 3);
        let starts: Vec<f32> = segs.iter().map(|s| s.samples[[0, 0]] * 10.0).collect();
        assert_eq!(starts, vec![0.0, 2.0, 4.0]);

        let long = AudioClip::zeros(2, 132_300, 44_100);
        assert_eq!(segment(&long, 132_300, 132_300, false).unwrap().len(), 1);

        assert!(matches!(segment(&c, 4, 0, true), Err(AudioError::ZeroHop)));
        assert!(matches!(segment(&c, 20, 4, false), Err(AudioError::TooShort { .. })));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let text = "a.wav\t0\t960\ttrain\nb.wav\t960\t960\tvalid\n";
        let m = ClipManifest::parse(text).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[1].split, Split::Valid);
        assert_eq!(m.to_text(), text);
        assert!(ClipManifest::parse("a.wav\t0\t960\n").is_err());
        assert!(ClipManifest::parse("a.wav\t0\t960\ttrain\nb.wav\t0\t10\ttrain\n").is_err());
        assert!(ClipManifest::parse("a.wav\t0\t960\tdev\n").is_err());
    }

    #[test]
    fn manifest_validate_checks_file_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.wav");
        write_wav(&AudioClip::zeros(1, 100, 8000), &p, WavFormat::Pcm16).unwrap();
        let ok = ClipManifest {
            entries: vec![ManifestEntry { path: p.clone(), start: 50, len: 50, split: Split::Train }],
        };
        ok.validate().unwrap();
        let bad = ClipManifest {
            entries: vec![ManifestEntry { path: p, start: 60, len: 50, split: Split::Train }],
        };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn segments_tile_the_signal(len in 1usize..200, clip_len in 1usize..50) {
            let v: Vec<f32> = (0..len).map(|i| (i as f32 * 0.1).sin()).collect();
            let c = clip_from(&v);
            let segs = segment(&c, clip_len, clip_len, true).unwrap();
            let mut joined: Vec<f32> = segs.iter().flat_map(|s| s.samples.row(0).to_vec()).collect();
            proptest::prop_assert!(joined.len() >= len);
            proptest::prop_assert!(joined[len..].iter().all(|&x| x == 0.0));
            joined.truncate(len);
            proptest::prop_assert_eq!(joined, v);
        }
    }
}
