"""Audio loading, resampling, CQT/mel extraction, and a test synthesizer.

The constant-Q transform uses FFT-domain sparse kernels (one windowed complex
exponential per semitone, 88 bins from 27.5 Hz). Frames are aligned so frame r
is centered on sample r * hop, covering timestamp [r/fps, (r+1)/fps).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, sparse
from scipy.fft import rfft
from scipy.io import wavfile

from .symbolic import NUM_PITCHES, PITCH_MIN, NoteSequence, PianoRoll

SAMPLE_RATE = 16000
HOP = 160
FMIN = 27.5
BINS_PER_OCTAVE = 12

FEATURE_KINDS = ("cqt", "mel", "chroma", "dlnco")


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray
    fps: float
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"kind must be one of {FEATURE_KINDS}")
        expected = NUM_PITCHES if self.kind in ("cqt", "mel") else 12
        if self.values.ndim != 2 or self.values.shape[1] != expected:
            raise ValueError(f"{self.kind} features must be N x {expected}, "
                             f"got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values contain non-finite entries")


def load_wav(path) -> AudioBuffer:
    """Read a PCM 16-bit or float 32 WAV file; stereo is averaged to mono."""
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        data = data / 32768.0
    elif data.dtype == np.int32:
        data = data / 2147483648.0
    else:
        data = data.astype(np.float64)
    return AudioBuffer(data, int(rate))


def save_wav(audio: AudioBuffer, path) -> None:
    """Write PCM 16-bit WAV, clipping to [-1, 1]."""
    clipped = np.clip(audio.samples, -1.0, 1.0)
    wavfile.write(path, audio.sample_rate, (clipped * 32767).astype(np.int16))


def resample(audio: AudioBuffer, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Polyphase band-limited resampling to target_rate.

    Output length is round(n * target / source); the polyphase result is
    trimmed or zero-padded by at most one sample to meet it exactly.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if len(audio.samples) == 0:
        raise ValueError("cannot resample empty audio")
    if audio.sample_rate == target_rate:
        return audio
    g = math.gcd(int(target_rate), int(audio.sample_rate))
    up, down = target_rate // g, audio.sample_rate // g
    out = signal.resample_poly(audio.samples, up, down)
    want = int(round(len(audio.samples) * target_rate / audio.sample_rate))
    if len(out) > want:
        out = out[:want]
    elif len(out) < want:
        out = np.pad(out, (0, want - len(out)))
    return AudioBuffer(out, target_rate)


@functools.lru_cache(maxsize=8)
def _cqt_kernels(sample_rate: int, n_bins: int, bins_per_octave: int,
                 fmin: float) -> tuple[sparse.csr_matrix, int]:
    """Sparse conjugated spectral kernels and the FFT size they live in."""
    q = 1.0 / (2 ** (1.0 / bins_per_octave) - 1)
    freqs = fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    lengths = np.ceil(q * sample_rate / freqs).astype(int)
    nfft = int(2 ** math.ceil(math.log2(lengths.max())))
    rows, cols, vals = [], [], []
    for k in range(n_bins):
        length = int(lengths[k])
        n = np.arange(length) - length // 2
        window = np.hanning(length)
        kernel = (window / window.sum()) * np.exp(2j * np.pi * freqs[k] * n / sample_rate)
        buf = np.zeros(nfft, dtype=complex)
        start = nfft // 2 - length // 2
        buf[start:start + length] = kernel
        spec = np.fft.fft(buf)[: nfft // 2 + 1]
        keep = np.flatnonzero(np.abs(spec) > 0.005 * np.abs(spec).max())
        rows.extend([k] * len(keep))
        cols.extend(keep.tolist())
        vals.extend(np.conj(spec[keep]))
    kernels = sparse.csr_matrix(
        (np.array(vals), (np.array(rows), np.array(cols))),
        shape=(n_bins, nfft // 2 + 1),
    )
    return kernels, nfft


def cqt_bin_frequency(bin_index: int, fmin: float = FMIN,
                      bins_per_octave: int = BINS_PER_OCTAVE) -> float:
    return fmin * 2.0 ** (bin_index / bins_per_octave)


def _frame_starts(n_samples: int, hop: int) -> int:
    return int(math.ceil(n_samples / hop))


def compute_cqt(audio: AudioBuffer, hop: int = HOP, bins: int = NUM_PITCHES,
                bins_per_octave: int = BINS_PER_OCTAVE, fmin: float = FMIN) -> FeatureMatrix:
    """Magnitude CQT: ceil(len/hop) frames, bin k centered at fmin * 2^(k/12)."""
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"compute_cqt expects {SAMPLE_RATE} Hz audio, "
                         f"got {audio.sample_rate}; resample first")
    kernels, nfft = _cqt_kernels(audio.sample_rate, bins, bins_per_octave, fmin)
    n = _frame_starts(len(audio.samples), hop)
    padded = np.concatenate([
        np.zeros(nfft // 2), audio.samples, np.zeros(nfft // 2 + hop),
    ])
    out = np.empty((n, bins))
    chunk = 512
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        idx = (np.arange(s, e) * hop)[:, None] + np.arange(nfft)[None, :]
        spectra = rfft(padded[idx], axis=-1)
        out[s:e] = np.abs(kernels @ spectra.T).T / nfft
    return FeatureMatrix(out, audio.sample_rate / hop, "cqt")


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=4)
def _mel_filterbank(sample_rate: int, n_fft: int, bands: int,
                    fmin: float, fmax: float) -> np.ndarray:
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), bands + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    bank = np.zeros((bands, len(fft_freqs)))
    for b in range(bands):
        lo, center, hi = edges[b], edges[b + 1], edges[b + 2]
        rising = (fft_freqs - lo) / max(center - lo, 1e-9)
        falling = (hi - fft_freqs) / max(hi - center, 1e-9)
        bank[b] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def compute_mel(audio: AudioBuffer, hop: int = HOP, bands: int = NUM_PITCHES,
                n_fft: int = 2048, fmin: float = FMIN, fmax: float = 8000.0) -> FeatureMatrix:
    """Mel magnitude spectrogram with the same framing as compute_cqt."""
    if audio.sample_rate != SAMPLE_RATE:
        raise ValueError(f"compute_mel expects {SAMPLE_RATE} Hz audio, "
                         f"got {audio.sample_rate}; resample first")
    n = _frame_starts(len(audio.samples), hop)
    padded = np.concatenate([
        np.zeros(n_fft // 2), audio.samples, np.zeros(n_fft // 2 + hop),
    ])
    window = np.hanning(n_fft)
    idx = (np.arange(n) * hop)[:, None] + np.arange(n_fft)[None, :]
    spectra = np.abs(rfft(padded[idx] * window, axis=-1))
    bank = _mel_filterbank(audio.sample_rate, n_fft, bands, fmin, fmax)
    return FeatureMatrix(spectra @ bank.T, audio.sample_rate / hop, "mel")


def log_scale(feat: FeatureMatrix, gamma: float = 10.0) -> FeatureMatrix:
    """Elementwise log(1 + gamma * x); keeps zeros at zero, strictly monotone."""
    if np.any(feat.values < 0):
        raise ValueError("log_scale requires non-negative values")
    return FeatureMatrix(np.log1p(gamma * feat.values), feat.fps, feat.kind)


def pad_pair(roll: PianoRoll, feat: FeatureMatrix) -> tuple[PianoRoll, FeatureMatrix]:
    """Zero-pad both to the longer frame count; content stays at the start."""
    if roll.fps != feat.fps:
        raise ValueError(f"fps mismatch: roll {roll.fps} vs features {feat.fps}")
    n = max(roll.frames.shape[0], feat.values.shape[0])
    frames = roll.frames
    if frames.shape[0] < n:
        frames = np.pad(frames, ((0, n - frames.shape[0]), (0, 0)))
    values = feat.values
    if values.shape[0] < n:
        values = np.pad(values, ((0, n - values.shape[0]), (0, 0)))
    return PianoRoll(frames, roll.fps), FeatureMatrix(values, feat.fps, feat.kind)


def downsample_frames(feat: FeatureMatrix, factor: int) -> FeatureMatrix:
    """Average consecutive groups of `factor` frames, dividing the rate."""
    if factor < 1:
        raise ValueError("factor must be at least 1")
    if factor == 1:
        return feat
    starts = np.arange(0, len(feat.values), factor)
    sums = np.add.reduceat(feat.values, starts, axis=0)
    counts = np.minimum(starts + factor, len(feat.values)) - starts
    return FeatureMatrix(sums / counts[:, None], feat.fps / factor, feat.kind)


def pitch_frequency(pitch: int) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def render_notes_to_audio(seq: NoteSequence, sample_rate: int = SAMPLE_RATE,
                          harmonics: int = 4, decay: float = 0.3,
                          attack: float = 0.005) -> AudioBuffer:
    """Deterministic additive synthesis of a note sequence.

    Each note: `harmonics` partials of its equal-tempered frequency with 1/h
    amplitudes, exponential decay, short linear attack, amplitude scaled by
    velocity/127. The mix is peak-normalized to 0.5.
    """
    total = int(round(seq.duration * sample_rate))
    mix = np.zeros(total)
    for note in seq:
        start = int(round(note.onset * sample_rate))
        stop = min(int(round(note.offset * sample_rate)), total)
        if stop <= start:
            continue
        t = np.arange(stop - start) / sample_rate
        env = np.minimum(1.0, t / attack if attack > 0 else 1.0) * np.exp(-t / decay)
        f0 = pitch_frequency(note.pitch)
        tone = np.zeros_like(t)
        for h in range(1, harmonics + 1):
            if h * f0 < sample_rate / 2:
                tone += np.sin(2 * np.pi * h * f0 * t) / h
        mix[start:stop] += (note.velocity / 127.0) * env * tone
    peak = np.abs(mix).max()
    if peak > 0:
        mix *= 0.5 / peak
    return AudioBuffer(mix, sample_rate)
