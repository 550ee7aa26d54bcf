"""信号処理の基本演算: STFT/逆STFT、振幅・対数メル特徴量、移動平均正規化、文脈フレームの連結"""
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional
import numpy as np
from scipy.signal import get_window
from .error_handler import InvalidConfigError, InvalidInputError

SAMPLE_RATE = 16000
WIN_LEN = 512  # 32 ms
HOP = 256  # 16 ms
N_MELS = 80
NORM_HORIZON = 4.0
DELTA_L = 36  # 左（過去）文脈フレーム数
DELTA_R = 4  # 右（未来）文脈フレーム数
LOG_FLOOR = 1e-10

AMPLITUDE = "amplitude"
LOGMEL = "logmel"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"AudioClip expects 1-D samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    frames: np.ndarray  # T x F, complex
    hop: int = HOP
    win_len: int = WIN_LEN
    sample_rate: int = SAMPLE_RATE

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class FeatureSeq:
    frames: np.ndarray  # T x D, real
    kind: str
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.kind not in (AMPLITUDE, LOGMEL):
            raise InvalidInputError(f"Unknown feature kind: {self.kind}")
        if self.frames.ndim != 2:
            raise InvalidInputError(f"FeatureSeq expects a T x D grid, got shape {self.frames.shape}")

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class FeaturePatch:
    values: np.ndarray  # (DELTA_L + 1 + DELTA_R) x D
    center_index: int


@lru_cache(maxsize=8)
def sqrt_hann(win_len: int) -> np.ndarray:
    """周期的 Hann 窓の平方根。50% オーバーラップで二乗和が 1 になる"""
    window = np.sqrt(get_window("hann", win_len, fftbins=True))
    window.flags.writeable = False
    return window


def n_frames(n_samples: int, win_len: int = WIN_LEN, hop: int = HOP) -> int:
    if n_samples < win_len:
        return 0
    return 1 + (n_samples - win_len) // hop


def stft(clip: AudioClip, win_len: int = WIN_LEN, hop: int = HOP) -> ComplexSpectrogram:
    if win_len % 2 != 0 or hop * 2 != win_len:
        raise InvalidConfigError(f"win_len must be even and hop = win_len / 2 (got {win_len}, {hop})")
    if len(clip) < win_len:
        raise InvalidInputError(f"Clip of {len(clip)} samples is shorter than one window ({win_len})")

    segments = np.lib.stride_tricks.sliding_window_view(clip.samples, win_len)[::hop]
    frames = np.fft.rfft(segments * sqrt_hann(win_len), axis=1)
    return ComplexSpectrogram(frames, hop=hop, win_len=win_len, sample_rate=clip.sample_rate)


def synthesize_frame(spectrum: np.ndarray, win_len: int = WIN_LEN) -> np.ndarray:
    """1 フレーム分の合成窓付き時間信号"""
    return np.fft.irfft(spectrum, n=win_len) * sqrt_hann(win_len)


def istft(spec: ComplexSpectrogram) -> AudioClip:
    win_len, hop = spec.win_len, spec.hop
    if spec.n_bins != win_len // 2 + 1:
        raise InvalidInputError(f"Spectrogram has {spec.n_bins} bins, expected {win_len // 2 + 1} for win_len {win_len}")

    T = len(spec)
    out = np.zeros((T - 1) * hop + win_len if T > 0 else 0)
    segments = np.fft.irfft(spec.frames, n=win_len, axis=1) * sqrt_hann(win_len)
    for t in range(T):
        out[t * hop:t * hop + win_len] += segments[t]
    return AudioClip(out, spec.sample_rate)


def amplitude(spec: ComplexSpectrogram) -> FeatureSeq:
    return FeatureSeq(np.abs(spec.frames), AMPLITUDE, hop=spec.hop, sample_rate=spec.sample_rate)


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """フィルタ端点を含む n_mels + 2 個の周波数 (Hz)"""
    mels = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int, n_bins: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK メル尺度の三角フィルタ (n_mels x n_bins)"""
    if n_mels < 1 or n_mels > n_bins:
        raise InvalidConfigError(f"n_mels must be in [1, {n_bins}], got {n_mels}")

    edges = mel_center_frequencies(n_mels, sample_rate)
    bin_hz = np.linspace(0.0, sample_rate / 2.0, n_bins)
    fb = np.zeros((n_mels, n_bins))
    for k in range(n_mels):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[k] = np.maximum(0.0, np.minimum(rising, falling))
    fb.flags.writeable = False
    return fb


def logmel(feat: FeatureSeq, n_mels: int = N_MELS) -> FeatureSeq:
    if feat.kind != AMPLITUDE:
        raise InvalidInputError(f"logmel expects amplitude features, got {feat.kind}")
    fb = mel_filterbank(n_mels, feat.dim, feat.sample_rate)
    energies = (feat.frames ** 2) @ fb.T
    return FeatureSeq(np.log(np.maximum(energies, LOG_FLOOR)), LOGMEL, hop=feat.hop, sample_rate=feat.sample_rate)


def extract_features(spec: ComplexSpectrogram, kind: str, n_mels: int = N_MELS) -> FeatureSeq:
    amp = amplitude(spec)
    if kind == AMPLITUDE:
        return amp
    if kind == LOGMEL:
        return logmel(amp, n_mels)
    raise InvalidConfigError(f"Unknown feature kind: {kind}")


def frame_feature(spectrum: np.ndarray, kind: str, n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """ストリーミング用: 1 フレームのスペクトルから特徴ベクトルを計算する"""
    amp = np.abs(spectrum)
    if kind == AMPLITUDE:
        return amp
    fb = mel_filterbank(n_mels, len(spectrum), sample_rate)
    return np.log(np.maximum(fb @ (amp ** 2), LOG_FLOOR))


def feature_dim(kind: str, win_len: int = WIN_LEN, n_mels: int = N_MELS) -> int:
    return win_len // 2 + 1 if kind == AMPLITUDE else n_mels


def horizon_frames(horizon: float, hop_seconds: float) -> int:
    return max(1, int(np.floor(horizon / hop_seconds + 1e-9)))


class RunningMeanNormalizer:
    """過去 H フレームの平均を引く因果的な正規化。開始直後は利用可能なフレームのみで平均する"""

    def __init__(self, horizon_frames: int):
        if horizon_frames < 1:
            raise InvalidConfigError(f"Normalization horizon must cover at least one frame, got {horizon_frames}")
        self.window = deque(maxlen=horizon_frames)

    def push(self, frame: np.ndarray) -> np.ndarray:
        self.window.append(np.asarray(frame, dtype=np.float64))
        mean = np.mean(np.stack(self.window), axis=0)
        return self.window[-1] - mean

    def reset(self):
        self.window.clear()


def running_mean_normalize(feat: FeatureSeq, horizon: float = NORM_HORIZON) -> FeatureSeq:
    if horizon <= 0:
        raise InvalidConfigError(f"Normalization horizon must be positive, got {horizon}")
    normalizer = RunningMeanNormalizer(horizon_frames(horizon, feat.hop_seconds))
    out = np.empty(feat.frames.shape, dtype=np.float64)
    for t, frame in enumerate(feat.frames):
        out[t] = normalizer.push(frame)
    return FeatureSeq(out, feat.kind, hop=feat.hop, sample_rate=feat.sample_rate)


def context_indices(t: int, n_total: int, left: int = DELTA_L, right: int = DELTA_R) -> np.ndarray:
    # 範囲外のフレームは最も近い有効フレームで埋める
    return np.clip(np.arange(t - left, t + right + 1), 0, n_total - 1)


def stack_context(feat: FeatureSeq, t: int, left: int = DELTA_L, right: int = DELTA_R) -> FeaturePatch:
    T = len(feat)
    if T == 0:
        raise InvalidInputError("Cannot stack context from an empty feature sequence")
    if not 0 <= t < T:
        raise InvalidInputError(f"Frame index {t} outside [0, {T})")
    return FeaturePatch(feat.frames[context_indices(t, T, left, right)], t)


def stack_all(frames: np.ndarray, left: int = DELTA_L, right: int = DELTA_R, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """(T, D) の特徴量から (len(indices), left+1+right, D) のパッチ列を作る"""
    T = frames.shape[0]
    if indices is None:
        indices = np.arange(T)
    offsets = np.arange(-left, right + 1)
    rows = np.clip(indices[:, None] + offsets[None, :], 0, T - 1)
    return frames[rows]
