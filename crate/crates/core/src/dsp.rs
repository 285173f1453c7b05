//! Audio preprocessing: resampling, STFT and log-Mel spectrograms, clip
//! segmentation and transcript-based segmentation.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude or log-Mel matrix, frequency bins × frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array2<f64>,
    pub sample_rate: u32,
    pub hop: usize,
}

impl Spectrogram {
    pub fn bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }
}

/// Fixed-width clips cut from one spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    pub clips: Vec<Array2<f64>>,
    pub length: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub clip_length: usize,
    pub clip_stride: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            sample_rate: 8000,
            n_fft: 256,
            hop: 128,
            clip_length: 64,
            clip_stride: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16000,
            n_fft: 512,
            win_length: 400,
            hop: 160,
            n_mels: 64,
        }
    }
}

const RESAMPLE_ZERO_CROSSINGS: f64 = 16.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
pub fn resample(audio: &[f64], src_rate: u32, dst_rate: u32) -> Result<Vec<f64>> {
    if src_rate == 0 || dst_rate == 0 {
        return Err(Error::Audio("sample rates must be positive".into()));
    }
    if audio.is_empty() {
        return Err(Error::Audio("cannot resample empty audio".into()));
    }
    if src_rate == dst_rate {
        return Ok(audio.to_vec());
    }
    let ratio = dst_rate as f64 / src_rate as f64;
    let out_len = (audio.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = RESAMPLE_ZERO_CROSSINGS / cutoff;
    let n = audio.len() as isize;
    let out = (0..out_len)
        .map(|k| {
            let t = k as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                let window = 0.5 * (1.0 + (PI * d / half_width).cos());
                acc += audio[i as usize] * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect();
    Ok(out)
}

fn hann(len: usize) -> Vec<f64> {
    // periodic Hann
    (0..len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos()).collect()
}

/// Power-of-magnitude frames of a centered, zero-padded STFT. Returns
/// `(n_fft/2 + 1) × (1 + len/hop)` magnitudes.
fn stft_magnitude(audio: &[f64], n_fft: usize, win_length: usize, hop: usize) -> Result<Array2<f64>> {
    if audio.is_empty() {
        return Err(Error::Audio("empty audio".into()));
    }
    if n_fft == 0 || hop == 0 || win_length == 0 || win_length > n_fft {
        return Err(Error::config("need 0 < win_length ≤ n_fft and hop > 0"));
    }
    let bins = n_fft / 2 + 1;
    let frames = 1 + audio.len() / hop;
    let pad = n_fft / 2;
    // window centered inside the FFT frame
    let mut window = vec![0.0; n_fft];
    let offset = (n_fft - win_length) / 2;
    window[offset..offset + win_length].copy_from_slice(&hann(win_length));
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Array2::zeros((bins, frames));
    for t in 0..frames {
        let start = (t * hop) as isize - pad as isize;
        for (j, b) in buf.iter_mut().enumerate() {
            let idx = start + j as isize;
            let x = if idx >= 0 && (idx as usize) < audio.len() {
                audio[idx as usize]
            } else {
                0.0
            };
            *b = Complex::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..bins {
            out[[f, t]] = buf[f].norm();
        }
    }
    Ok(out)
}

/// Magnitude STFT with a Hann window of `n_fft` samples.
pub fn stft_spectrogram(audio: &[f64], sample_rate: u32, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    Ok(Spectrogram {
        data: stft_magnitude(audio, n_fft, n_fft, hop)?,
        sample_rate,
        hop,
    })
}

/// Per-bin statistics for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Pools every frame of every spectrogram. Standard deviations are
    /// floored at [`STD_FLOOR`].
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut sum: Option<Vec<f64>> = None;
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for m in specs {
            let s = sum.get_or_insert_with(|| {
                sum_sq = vec![0.0; m.nrows()];
                vec![0.0; m.nrows()]
            });
            if m.nrows() != s.len() {
                return Err(Error::shape(format!("{} bins", s.len()), format!("{} bins", m.nrows())));
            }
            for (f, row) in m.axis_iter(Axis(0)).enumerate() {
                s[f] += row.sum();
                sum_sq[f] += row.iter().map(|v| v * v).sum::<f64>();
            }
            count += m.ncols();
        }
        let sum = sum.ok_or_else(|| Error::invalid("no spectrograms to fit statistics on"))?;
        if count == 0 {
            return Err(Error::invalid("no frames to fit statistics on"));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }
}

/// Per-bin z-score with externally supplied statistics.
pub fn normalize_spectrogram(spec: &Spectrogram, stats: &NormStats) -> Result<Spectrogram> {
    if stats.mean.len() != spec.bins() || stats.std.len() != spec.bins() {
        return Err(Error::shape(format!("{} bins", spec.bins()), format!("{} stats", stats.mean.len())));
    }
    let mut data = spec.data.clone();
    for (f, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
        let sd = stats.std[f].max(STD_FLOOR);
        row.mapv_inplace(|v| (v - stats.mean[f]) / sd);
    }
    Ok(Spectrogram { data, ..*spec })
}

/// Number of clips [`segment_clips`] emits for `frames` frames.
pub fn clip_count(frames: usize, length: usize, stride: usize) -> usize {
    if frames < length {
        1
    } else {
        1 + (frames - length) / stride
    }
}

/// Fixed-width clips at offsets `0, stride, 2·stride, …`; a spectrogram
/// shorter than `length` yields one right-padded clip.
pub fn segment_clips(spec: &Spectrogram, length: usize, stride: usize) -> Result<ClipBatch> {
    if length == 0 || stride == 0 {
        return Err(Error::config("clip length and stride must be positive"));
    }
    let frames = spec.frames();
    let clips = if frames < length {
        let mut clip = Array2::zeros((spec.bins(), length));
        clip.slice_mut(s![.., ..frames]).assign(&spec.data);
        vec![clip]
    } else {
        (0..clip_count(frames, length, stride))
            .map(|i| spec.data.slice(s![.., i * stride..i * stride + length]).to_owned())
            .collect()
    };
    Ok(ClipBatch { clips, length, stride })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRow {
    pub start_time: f64,
    pub stop_time: f64,
    pub speaker: String,
    #[serde(default)]
    pub value: String,
}

impl TranscriptRow {
    pub fn is_participant(&self) -> bool {
        self.speaker.trim().eq_ignore_ascii_case("participant")
    }
}

/// Reads a DAIC-WOZ transcript; tab- and comma-delimited files are accepted.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                context: format!("{} row {}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

/// One audio clip per participant turn, in transcript order.
pub fn segment_by_transcript(audio: &[f64], sample_rate: u32, transcript: &[TranscriptRow]) -> Result<Vec<Vec<f64>>> {
    let rate = sample_rate as f64;
    let duration = audio.len() as f64 / rate;
    let mut clips = Vec::new();
    for (i, row) in transcript.iter().enumerate() {
        let ok = row.start_time.is_finite()
            && row.stop_time.is_finite()
            && row.start_time >= 0.0
            && row.start_time <= row.stop_time
            && row.stop_time <= duration + 1e-9;
        if !ok {
            return Err(Error::Audio(format!(
                "transcript row {i}: times ({}, {}) outside audio of {duration:.3} s",
                row.start_time, row.stop_time
            )));
        }
        if row.is_participant() {
            let a = ((row.start_time * rate).round() as usize).min(audio.len());
            let b = ((row.stop_time * rate).round() as usize).min(audio.len());
            clips.push(audio[a..b].to_vec());
        }
    }
    Ok(clips)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters, `n_mels × (n_fft/2 + 1)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..bins).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();
    Array2::from_shape_fn((n_mels, bins), |(m, k)| {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = bin_hz[k];
        let up = (f - lo) / (mid - lo);
        let down = (hi - f) / (hi - mid);
        up.min(down).max(0.0)
    })
}

/// Log-Mel spectrogram, `n_mels × (1 + len/hop)`, floored at [`LOG_FLOOR`]
/// before the log.
pub fn mel_spectrogram(audio: &[f64], cfg: &MelConfig) -> Result<Spectrogram> {
    if cfg.n_mels == 0 {
        return Err(Error::config("n_mels must be positive"));
    }
    let mag = stft_magnitude(audio, cfg.n_fft, cfg.win_length, cfg.hop)?;
    let mel = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate).dot(&mag);
    Ok(Spectrogram {
        data: mel.mapv(|v| v.max(LOG_FLOOR).ln()),
        sample_rate: cfg.sample_rate,
        hop: cfg.hop,
    })
}

/// Mono samples in [-1, 1] and the sample rate. Channels are averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let audio_err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(audio_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(audio_err)?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample.max(1) - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(audio_err)?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok((mono, spec.sample_rate))
}

/// Unnormalized STA input for one session: resampled magnitude STFT.
pub fn sta_spectrogram(audio: &[f64], rate: u32, cfg: &StftConfig) -> Result<Spectrogram> {
    let resampled = resample(audio, rate, cfg.sample_rate)?;
    stft_spectrogram(&resampled, cfg.sample_rate, cfg.n_fft, cfg.hop)
}

/// Normalized `bins × clip_length` clips for one session.
pub fn sta_clips(spec: &Spectrogram, stats: &NormStats, cfg: &StftConfig) -> Result<Vec<Array2<f64>>> {
    let normalized = normalize_spectrogram(spec, stats)?;
    Ok(segment_clips(&normalized, cfg.clip_length, cfg.clip_stride)?.clips)
}

/// Log-Mel spectrograms of the participant turns of one session. Turns
/// shorter than one sample are skipped.
pub fn netvlad_segments(
    audio: &[f64],
    rate: u32,
    transcript: &[TranscriptRow],
    cfg: &MelConfig,
) -> Result<Vec<Array2<f64>>> {
    let resampled = resample(audio, rate, cfg.sample_rate)?;
    segment_by_transcript(&resampled, cfg.sample_rate, transcript)?
        .iter()
        .filter(|clip| !clip.is_empty())
        .map(|clip| mel_spectrogram(clip, cfg).map(|s| s.data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, len: usize) -> Vec<f64> {
        (0..len).map(|i| (2.0 * PI * freq * i as f64 / rate as f64).sin()).collect()
    }

    #[test]
    fn resample_lengths_and_identity() {
        let x = tone(440.0, 16000, 16000);
        assert_eq!(resample(&x, 16000, 8000).unwrap().len(), 8000);
        assert_eq!(resample(&x, 16000, 16000).unwrap(), x);
        assert_eq!(resample(&x[..1001], 44100, 16000).unwrap().len(), 363);
        assert!(resample(&x, 0, 8000).is_err());
        assert!(resample(&x, 16000, 0).is_err());
        assert!(resample(&[], 16000, 8000).is_err());
    }

    #[test]
    fn resample_preserves_in_band_tone() {
        let x = tone(440.0, 16000, 16000);
        let y = resample(&x, 16000, 8000).unwrap();
        let reference = tone(440.0, 8000, 8000);
        let err = y[200..7800]
            .iter()
            .zip(&reference[200..7800])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.01, "max deviation {err}");
    }

    #[test]
    fn resample_suppresses_aliasing_tone() {
        // 6 kHz is above the 4 kHz Nyquist of the target rate
        let x = tone(6000.0, 16000, 16000);
        let y = resample(&x, 16000, 8000).unwrap();
        let rms = (y[200..7800].iter().map(|v| v * v).sum::<f64>() / 7600.0).sqrt();
        assert!(rms < 0.02, "alias rms {rms}");
    }

    #[test]
    fn stft_shapes() {
        let x = tone(1000.0, 8000, 8192);
        let s = stft_spectrogram(&x, 8000, 256, 128).unwrap();
        assert_eq!((s.bins(), s.frames()), (129, 65));
        let z = stft_spectrogram(&vec![0.0; 1000], 8000, 256, 128).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        assert_eq!(stft_spectrogram(&[0.5], 8000, 256, 128).unwrap().frames(), 1);
        assert!(stft_spectrogram(&[], 8000, 256, 128).is_err());
    }

    #[test]
    fn stft_peak_at_tone_bin() {
        // 1 kHz at 8 kHz with 256 points sits on bin 32
        let x = tone(1000.0, 8000, 4096);
        let s = stft_spectrogram(&x, 8000, 256, 128).unwrap();
        let col = s.data.column(10);
        let peak = col.iter().enumerate().fold((0, 0.0), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
        assert_eq!(peak, 32);
    }

    #[test]
    fn normalization_self_and_floor() {
        let x = tone(700.0, 8000, 6000);
        let noise: Vec<f64> = (0..6000).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
        let a = stft_spectrogram(&x, 8000, 256, 128).unwrap();
        let b = stft_spectrogram(&noise, 8000, 256, 128).unwrap();
        let stats = NormStats::fit([&a.data, &b.data]).unwrap();
        let na = normalize_spectrogram(&a, &stats).unwrap();
        let nb = normalize_spectrogram(&b, &stats).unwrap();
        let joined = ndarray::concatenate(Axis(1), &[na.data.view(), nb.data.view()]).unwrap();
        for row in joined.axis_iter(Axis(0)) {
            let m = row.mean().unwrap();
            let sd = row.std(0.0);
            assert!(m.abs() < 1e-6);
            // bins of exactly zero variance stay at zero after centering
            assert!((sd - 1.0).abs() < 1e-6 || sd < 1e-6, "std {sd}");
        }
        let flat = Spectrogram { data: Array2::from_elem((3, 5), 2.0), sample_rate: 8000, hop: 128 };
        let st = NormStats::fit([&flat.data]).unwrap();
        assert_eq!(st.std, vec![STD_FLOOR; 3]);
        let out = normalize_spectrogram(&flat, &st).unwrap();
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn normalization_uses_supplied_stats() {
        let train = Spectrogram { data: Array2::from_elem((2, 4), 1.0) + Array2::from_shape_fn((2, 4), |(_, t)| t as f64), sample_rate: 8000, hop: 128 };
        let test = Spectrogram { data: Array2::from_elem((2, 3), 10.0), sample_rate: 8000, hop: 128 };
        let stats = NormStats::fit([&train.data]).unwrap();
        let out = normalize_spectrogram(&test, &stats).unwrap();
        let expected = (10.0 - 2.5) / 1.25f64.sqrt();
        assert!(out.data.iter().all(|v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn clip_segmentation() {
        let spec = |t: usize| Spectrogram {
            data: Array2::from_shape_fn((129, t), |(_, j)| j as f64 + 1.0),
            sample_rate: 8000,
            hop: 128,
        };
        assert_eq!(segment_clips(&spec(64), 64, 32).unwrap().clips.len(), 1);
        let b = segment_clips(&spec(128), 64, 32).unwrap();
        assert_eq!(b.clips.len(), 3);
        assert_eq!(b.clips[2][[0, 0]], 65.0);
        let short = segment_clips(&spec(40), 64, 32).unwrap();
        assert_eq!(short.clips.len(), 1);
        assert_eq!(short.clips[0].dim(), (129, 64));
        assert_eq!(short.clips[0][[0, 39]], 40.0);
        assert_eq!(short.clips[0][[0, 40]], 0.0);
        assert!(segment_clips(&spec(10), 0, 32).is_err());
    }

    #[test]
    fn transcript_segmentation() {
        let audio = vec![0.1; 8000 * 5];
        let row = |a: f64, b: f64, who: &str| TranscriptRow { start_time: a, stop_time: b, speaker: who.into(), value: String::new() };
        let rows = vec![row(0.0, 0.5, "Ellie"), row(1.0, 2.0, "Participant"), row(2.5, 3.0, "Participant"), row(3.0, 3.2, "Ellie"), row(3.5, 4.0, "Participant")];
        let clips = segment_by_transcript(&audio, 8000, &rows).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[0].len(), 8000);
        assert!(segment_by_transcript(&audio, 8000, &rows[..1]).unwrap().is_empty());
        let err = segment_by_transcript(&audio, 8000, &[row(0.0, 1.0, "Participant"), row(4.0, 6.0, "Participant")]).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn transcript_reader_handles_tabs_and_commas() {
        let dir = tempfile::tempdir().unwrap();
        let tab = dir.path().join("t.csv");
        std::fs::write(&tab, "start_time\tstop_time\tspeaker\tvalue\n36.588\t39.868\tEllie\thi i'm ellie\n62.328\t63.178\tParticipant\tgood\n").unwrap();
        let rows = read_transcript(&tab).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[1].is_participant());
        let comma = dir.path().join("c.csv");
        std::fs::write(&comma, "start_time,stop_time,speaker,value\n1.0,2.0,Participant,yes\n").unwrap();
        assert_eq!(read_transcript(&comma).unwrap()[0].stop_time, 2.0);
    }

    #[test]
    fn mel_shapes_and_silence() {
        let cfg = MelConfig::default();
        let s = mel_spectrogram(&tone(440.0, 16000, 16000), &cfg).unwrap();
        assert_eq!((s.bins(), s.frames()), (64, 101));
        let silent = mel_spectrogram(&vec![0.0; 3200], &cfg).unwrap();
        assert!(silent.data.iter().all(|&v| v == LOG_FLOOR.ln()));
        let fb = mel_filterbank(64, 512, 16000);
        assert!(fb.rows().into_iter().all(|r| r.sum() > 0.0));
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec { channels: 2, sample_rate: 16000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            w.write_sample((i * 100) as i16).unwrap();
            w.write_sample((i * 100) as i16).unwrap();
        }
        w.finalize().unwrap();
        let (x, rate) = read_wav(&path).unwrap();
        assert_eq!((x.len(), rate), (100, 16000));
        assert!((x[50] - 5000.0 / 32768.0).abs() < 1e-12);
    }

    #[test]
    fn pipelines_end_to_end() {
        let audio = tone(300.0, 16000, 16000 * 3);
        let spec = sta_spectrogram(&audio, 16000, &StftConfig::default()).unwrap();
        let stats = NormStats::fit([&spec.data]).unwrap();
        let clips = sta_clips(&spec, &stats, &StftConfig::default()).unwrap();
        assert!(clips.iter().all(|c| c.dim() == (129, 64)));
        assert_eq!(clips.len(), clip_count(188, 64, 32));
        let rows = vec![TranscriptRow { start_time: 0.5, stop_time: 1.5, speaker: "Participant".into(), value: String::new() }];
        let segs = netvlad_segments(&audio, 16000, &rows, &MelConfig::default()).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].dim(), (64, 101));
    }
}
