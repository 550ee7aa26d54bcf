"""ストリーミング処理

同期 (相互相関) -> フレーム化 -> 特徴量・正規化 -> 文脈連結 -> N フレームごとのチャネル選択
-> 事後確率による重み付き和 -> 重畳加算。
ファイル入力もブロックを push するだけで、同じコードパスを通る。
"""
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, List, Optional, Sequence, Tuple
import numpy as np
from scipy.signal import correlate, correlation_lags
from .logger import logger
from .error_handler import InvalidConfigError, InvalidInputError, SyncFailureError
from .dsp import (AudioClip, RunningMeanNormalizer, context_indices, feature_dim, frame_feature,
                  horizon_frames, sqrt_hann, synthesize_frame)
from .settings import DspSettings, StreamConfig

DEFAULT_BLOCK = 2048


# ---------------------------------------------------------------------------
# Synchronization
# ---------------------------------------------------------------------------

def estimate_offset(reference: AudioClip, other: AudioClip, search: float = 0.5) -> int:
    """相互相関が最大となるラグ（サンプル）。正の値は other が遅れていることを表す"""
    max_lag = int(round(search * reference.sample_rate))
    if len(reference) < 2 * max_lag or len(other) < 2 * max_lag:
        raise InvalidInputError(f"Both clips must be at least {2 * max_lag} samples long for a ±{search}s search")

    a = other.samples - other.samples.mean()
    b = reference.samples - reference.samples.mean()
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    if norm <= 1e-12:
        raise SyncFailureError("Cannot correlate a silent (zero-variance) signal")

    xcorr = correlate(a, b, mode="full", method="fft") / norm
    lags = correlation_lags(len(a), len(b), mode="full")
    window = np.abs(lags) <= max_lag
    return int(lags[window][np.argmax(xcorr[window])])


class _ChannelBuffer:
    """通し番号でアクセスできる伸長可能なサンプルバッファ（古いサンプルは破棄）"""

    def __init__(self):
        self.data = np.zeros(4096)
        self.start = 0  # data[0] の通し番号
        self.size = 0

    @property
    def end(self) -> int:
        return self.start + self.size

    def append(self, block: np.ndarray):
        need = self.size + len(block)
        if need > len(self.data):
            grown = np.zeros(max(need, 2 * len(self.data)))
            grown[:self.size] = self.data[:self.size]
            self.data = grown
        self.data[self.size:need] = block
        self.size = need

    def take(self, idx: np.ndarray) -> np.ndarray:
        # 範囲外（開始前・終了後）は 0
        rel = idx - self.start
        valid = (rel >= 0) & (rel < self.size)
        out = np.zeros(len(idx))
        out[valid] = self.data[rel[valid]]
        return out

    def window(self, lo: int, hi: int) -> np.ndarray:
        return self.take(np.arange(lo, hi))

    def discard_before(self, index: int):
        drop = min(max(0, index - self.start), self.size)
        if drop:
            self.data[:self.size - drop] = self.data[drop:self.size]
            self.size -= drop
            self.start += drop


@dataclass
class SyncEvent:
    position: int  # 基準チャネルの通し番号
    channel: int
    offset: int
    ok: bool


class Synchronizer:
    """チャネル 0 を基準に各チャネルの整数サンプルのオフセットを推定し、揃えたサンプルを出力する

    最初の推定は sync_window 秒の時点 P、その後は resync_interval 秒ごと。推定には直前の窓 [P - W, P) だけを使い、
    P より先の入力は待たない。オフセットが変わったら P から crossfade 秒の線形クロスフェードで切り替える。
    揃えた後のチャネル m のサンプル n は x_m[n + d_m]。
    """

    def __init__(self, n_channels: int, config: Optional[StreamConfig] = None, sample_rate: int = 16000):
        if n_channels < 1:
            raise InvalidInputError("At least one channel is required")
        self.config = config or StreamConfig()
        self.sample_rate = sample_rate
        self.n_channels = n_channels
        self.enabled = self.config.synchronize and n_channels > 1
        self.buffers = [_ChannelBuffer() for _ in range(n_channels)]
        self.offsets = [0] * n_channels
        self._fade = [None] * n_channels  # (開始位置, 旧オフセット)
        self.fade_len = int(round(self.config.crossfade * sample_rate))
        self.window = int(round(self.config.sync_window * sample_rate))
        self.interval = int(round(self.config.resync_interval * sample_rate))
        self.next_sync = self.window
        self.n_out = 0
        self.events: List[SyncEvent] = []

    def _resync(self, position: int):
        ref = AudioClip(self.buffers[0].window(position - self.window, position), self.sample_rate)
        for m in range(1, self.n_channels):
            other = AudioClip(self.buffers[m].window(position - self.window, position), self.sample_rate)
            try:
                offset = estimate_offset(ref, other, self.config.sync_search)
            except SyncFailureError as e:
                logger.warning(f"Sync failed on channel {m} at sample {position}: {e}. Keeping offset {self.offsets[m]}")
                self.events.append(SyncEvent(position, m, self.offsets[m], False))
                continue
            if offset != self.offsets[m]:
                logger.info(f"Channel {m} offset {self.offsets[m]} -> {offset} samples at sample {position}")
                self._fade[m] = (position, self.offsets[m])
                self.offsets[m] = offset
            self.events.append(SyncEvent(position, m, offset, True))

    def _needed_ahead(self, m: int) -> int:
        fade = self._fade[m]
        return max(self.offsets[m], fade[1] if fade is not None else self.offsets[m])

    def _emit(self, n_end: int) -> np.ndarray:
        n = np.arange(self.n_out, n_end)
        out = np.empty((self.n_channels, len(n)))
        out[0] = self.buffers[0].take(n)
        for m in range(1, self.n_channels):
            current = self.buffers[m].take(n + self.offsets[m])
            fade = self._fade[m]
            if fade is not None:
                start, old = fade
                # 開始位置より前は旧オフセット
                w = np.clip((n - start + 1) / max(self.fade_len, 1), 0.0, 1.0)
                current = (1.0 - w) * self.buffers[m].take(n + old) + w * current
                if n_end >= start + self.fade_len:
                    self._fade[m] = None
            out[m] = current
        self.n_out = n_end
        return out

    def _trim(self):
        keep_ref = self.next_sync - self.window
        for m, buf in enumerate(self.buffers):
            lowest = self.n_out + min(0, self.offsets[m], self._fade[m][1] if self._fade[m] else 0)
            buf.discard_before(min(keep_ref, lowest))

    def push(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        """各チャネルの新しいサンプルを受け取り、揃え終わった (M, n) のサンプルを返す"""
        if len(blocks) != self.n_channels:
            raise InvalidInputError(f"Expected {self.n_channels} blocks, got {len(blocks)}")
        for buf, block in zip(self.buffers, blocks):
            buf.append(np.asarray(block, dtype=np.float64))

        if not self.enabled:
            n_end = min(buf.end for buf in self.buffers)
            out = np.stack([buf.window(self.n_out, n_end) for buf in self.buffers])
            self.n_out = n_end
            for buf in self.buffers:
                buf.discard_before(n_end)
            return out

        ref_end = self.buffers[0].end
        while all(buf.end >= self.next_sync for buf in self.buffers):
            self._resync(self.next_sync)
            self.next_sync += self.interval

        n_end = min([ref_end] + [self.buffers[m].end - self._needed_ahead(m) for m in range(1, self.n_channels)])
        # 全チャネルが次の推定位置に届くまでは、その位置より先を出さない
        n_end = min(n_end, self.next_sync)
        if n_end <= self.n_out:
            return np.zeros((self.n_channels, 0))
        out = self._emit(n_end)
        self._trim()
        return out

    def flush(self) -> np.ndarray:
        """残りを出力する（基準チャネルの長さまで、足りない部分は 0）"""
        if not self.enabled:
            n_end = max(buf.end for buf in self.buffers)
            out = np.stack([buf.window(self.n_out, n_end) for buf in self.buffers])
            self.n_out = n_end
            return out
        ref_end = self.buffers[0].end
        if ref_end <= self.n_out:
            return np.zeros((self.n_channels, 0))
        return self._emit(ref_end)


def synchronize(streams: Sequence[AudioClip], config: Optional[StreamConfig] = None,
                block: int = DEFAULT_BLOCK) -> Tuple[np.ndarray, List[SyncEvent]]:
    """ファイル全体をブロックに分けて同期し、(M, n) の揃えた信号を返す"""
    if len(streams) == 0:
        raise InvalidInputError("At least one stream is required")
    sync = Synchronizer(len(streams), config, streams[0].sample_rate)
    parts = []
    longest = max(len(s) for s in streams)
    for start in range(0, longest, block):
        parts.append(sync.push([s.samples[start:start + block] for s in streams]))
    parts.append(sync.flush())
    return np.concatenate(parts, axis=1), sync.events


# ---------------------------------------------------------------------------
# Enhancement and the posterior timeline
# ---------------------------------------------------------------------------

def enhance_frame(p, frames: np.ndarray) -> np.ndarray:
    """y_f = Σ_m p_m x_{m,f}"""
    p = np.asarray(getattr(p, "p", p), dtype=np.float64)
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] != len(p):
        raise InvalidInputError(f"Expected {len(p)} spectra, got shape {frames.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"Posteriors must sum to 1, got {p.sum()}")
    y = p[0] * frames[0]
    for m in range(1, len(p)):
        y = y + p[m] * frames[m]
    return y


@dataclass(frozen=True)
class TimelineEntry:
    t: int
    time_s: float
    p: Tuple[float, ...]
    evaluated: bool

    def to_dict(self) -> dict:
        return {"t": self.t, "time_s": self.time_s, "p": list(self.p), "evaluated": self.evaluated}


@dataclass
class PosteriorTimeline:
    entries: List[TimelineEntry] = field(default_factory=list)
    hop_seconds: float = 0.016

    def append(self, entry: TimelineEntry):
        if abs(sum(entry.p) - 1.0) > 1e-6:
            raise InvalidInputError(f"Posteriors at frame {entry.t} do not sum to 1")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        return np.array([e.p for e in self.entries])

    @property
    def n_evaluated(self) -> int:
        return sum(e.evaluated for e in self.entries)

    def write_jsonl(self, path: str) -> str:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(e.to_dict()) + "\n")
        return str(out)


@dataclass(frozen=True)
class DiarizationSegment:
    start_s: float
    end_s: float
    device_index: int

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


def diarize(timeline: PosteriorTimeline, min_dur: float = 0.2) -> List[DiarizationSegment]:
    """フレームごとの argmax をまとめて区間にし、min_dur より短い区間を長い隣に吸収する"""
    if len(timeline) == 0:
        raise InvalidInputError("Cannot diarize an empty timeline")
    labels = np.argmax(timeline.matrix(), axis=1)  # 同点は小さい番号

    # [開始フレーム, 終了フレーム, ラベル]
    runs = []
    for t, label in enumerate(labels):
        if runs and runs[-1][2] == label:
            runs[-1][1] = t + 1
        else:
            runs.append([t, t + 1, int(label)])

    min_frames = min_dur / timeline.hop_seconds
    while len(runs) > 1:
        lengths = [r[1] - r[0] for r in runs]
        k = int(np.argmin(lengths))
        if lengths[k] >= min_frames - 1e-9:
            break
        left = runs[k - 1] if k > 0 else None
        right = runs[k + 1] if k + 1 < len(runs) else None
        if right is None or (left is not None and left[1] - left[0] >= right[1] - right[0]):
            left[1] = runs[k][1]
        else:
            right[0] = runs[k][0]
        del runs[k]
        merged = [runs[0]]
        for r in runs[1:]:
            if r[2] == merged[-1][2]:
                merged[-1][1] = r[1]
            else:
                merged.append(r)
        runs = merged

    hop = timeline.hop_seconds
    return [DiarizationSegment(a * hop, b * hop, label) for a, b, label in runs]


def write_rttm(segments: Sequence[DiarizationSegment], path: str, file_id: str = "stream") -> str:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for seg in segments:
            fields = ["SPEAKER", file_id, "1", f"{seg.start_s:.3f}", f"{seg.duration:.3f}",
                      "<NA>", "<NA>", f"dev{seg.device_index}", "<NA>", "<NA>"]
            f.write(" ".join(fields) + "\n")
    return str(out)


# ---------------------------------------------------------------------------
# The frame pipeline
# ---------------------------------------------------------------------------

class StreamProcessor:
    """1 つの会話のストリーム状態（同期・正規化・重畳加算・保持中の事後確率）を持つ

    フレーム t は t + Δ_R フレーム目の特徴量が揃った時点で処理する。
    t ≡ 0 (mod N) のフレームだけモデルを評価し、他は直前の事後確率を使う。
    """

    def __init__(self, selector, n_channels: int, config: Optional[StreamConfig] = None,
                 dsp: Optional[DspSettings] = None):
        self.config = config or StreamConfig()
        self.dsp = dsp or DspSettings()
        if n_channels < 1:
            raise InvalidInputError("At least one channel is required")
        self.selector = selector
        self.n_channels = n_channels
        self.left, self.right = self.config.context
        self.win, self.hop = self.dsp.win_len, self.dsp.hop

        self.feature_kind = self.config.feature_kind
        dim = feature_dim(self.feature_kind, self.win, self.dsp.n_mels)
        selector.check_features(self.feature_kind, dim)

        self.sync = Synchronizer(n_channels, self.config, self.dsp.sample_rate)
        self._samples = [_ChannelBuffer() for _ in range(n_channels)]
        hop_s = self.hop / self.dsp.sample_rate
        self._normalizers = [RunningMeanNormalizer(horizon_frames(self.dsp.norm_horizon, hop_s)) for _ in range(n_channels)]
        history = self.left + 1 + self.right
        self._features: Deque[np.ndarray] = deque(maxlen=history)  # 各要素 M x D
        self._spectra: Deque[np.ndarray] = deque(maxlen=self.right + 1)  # 各要素 M x F
        self._window = sqrt_hann(self.win)

        self.n_frames = 0  # 特徴量を計算したフレーム数
        self.next_frame = 0  # 次に処理するフレーム
        self._held: Optional[np.ndarray] = None
        self._ola = np.zeros(self.win)
        self.n_output = 0
        self.timeline = PosteriorTimeline(hop_seconds=hop_s)
        self.evaluations = 0

    def _analyze(self, t: int) -> bool:
        lo = t * self.hop
        if any(buf.end < lo + self.win for buf in self._samples):
            return False
        idx = np.arange(lo, lo + self.win)
        spectra = np.stack([np.fft.rfft(buf.take(idx) * self._window) for buf in self._samples])
        feats = np.stack([
            norm.push(frame_feature(spectra[m], self.feature_kind, self.dsp.n_mels, self.dsp.sample_rate))
            for m, norm in enumerate(self._normalizers)
        ])
        self._features.append(feats)
        self._spectra.append(spectra)
        for buf in self._samples:
            buf.discard_before(lo + self.hop)
        self.n_frames += 1
        return True

    def _patches(self, t: int) -> np.ndarray:
        first = self.n_frames - len(self._features)
        rows = context_indices(t, self.n_frames, self.left, self.right) - first
        stacked = np.stack([self._features[r] for r in rows])  # 41 x M x D
        return stacked.transpose(1, 0, 2)

    def _process(self, t: int) -> np.ndarray:
        spectra = self._spectra[t - (self.n_frames - len(self._spectra))]
        evaluated = t % self.config.subsample_n == 0
        if evaluated:
            p = self.selector.evaluate(self._patches(t), spectra, t)
            self.evaluations += 1
            if self.config.smoothing == "ema" and self._held is not None:
                alpha = self.config.ema_alpha
                p = alpha * p + (1.0 - alpha) * self._held
            self._held = p
        p = self._held
        self.timeline.append(TimelineEntry(t, t * self.hop / self.dsp.sample_rate, tuple(float(v) for v in p), evaluated))

        # 重畳加算。フレーム t を足した時点で先頭 hop サンプルが確定する
        self._ola += synthesize_frame(enhance_frame(p, spectra), self.win)
        done = self._ola[:self.hop].copy()
        self._ola = np.concatenate([self._ola[self.hop:], np.zeros(self.hop)])
        self.n_output += self.hop
        return done

    def push(self, blocks: Sequence[np.ndarray]) -> np.ndarray:
        """新しいサンプルを受け取り、確定した出力サンプルを返す"""
        aligned = self.sync.push(blocks)
        return self._consume(aligned, final=False)

    def _consume(self, aligned: np.ndarray, final: bool) -> np.ndarray:
        for m, buf in enumerate(self._samples):
            buf.append(aligned[m])
        out = []
        while self._analyze(self.n_frames):
            while self.next_frame + self.right < self.n_frames:
                out.append(self._process(self.next_frame))
                self.next_frame += 1
        if final:
            # 末尾は最後のフレームを複製した右文脈で処理する
            while self.next_frame < self.n_frames:
                out.append(self._process(self.next_frame))
                self.next_frame += 1
            if self.n_frames > 0:
                out.append(self._ola[:self.win - self.hop].copy())
                self._ola = np.zeros(self.win)
        return np.concatenate(out) if out else np.zeros(0)

    def flush(self) -> np.ndarray:
        return self._consume(self.sync.flush(), final=True)


def make_selector(config: StreamConfig, checkpoint=None, posterior_fn=None, dtype=np.float32):
    from .selector import ChannelSelector, MaxEnergySelector, OracleSelector

    if posterior_fn is not None:
        return OracleSelector(posterior_fn)
    if config.selector == "max_energy":
        return MaxEnergySelector()
    if checkpoint is None:
        raise InvalidConfigError("The picknet selector needs a checkpoint")
    return ChannelSelector(checkpoint, dtype=dtype)


def process_stream(streams: Sequence[AudioClip], checkpoint=None, config: Optional[StreamConfig] = None,
                   dsp: Optional[DspSettings] = None, selector=None, block: int = DEFAULT_BLOCK
                   ) -> Tuple[AudioClip, PosteriorTimeline]:
    """デバイスごとの信号から強調信号と事後確率の時系列を作る"""
    config = config or StreamConfig()
    dsp = dsp or DspSettings()
    if len(streams) == 0:
        raise InvalidInputError("At least one stream is required")
    rate = streams[0].sample_rate
    if any(s.sample_rate != rate for s in streams):
        raise InvalidInputError("All streams must share one sample rate")
    if rate != dsp.sample_rate:
        raise InvalidConfigError(f"Streams are {rate} Hz, pipeline configured for {dsp.sample_rate} Hz")

    owned = selector is None
    if owned:
        selector = make_selector(config, checkpoint)
    try:
        selector.warmup(len(streams))
        proc = StreamProcessor(selector, len(streams), config, dsp)
        parts = []
        longest = max(len(s) for s in streams)
        for start in range(0, longest, block):
            parts.append(proc.push([s.samples[start:start + block] for s in streams]))
        parts.append(proc.flush())
    finally:
        # 呼び出し側が渡したセレクタは呼び出し側が解放する
        if owned:
            selector.cleanup()
    enhanced = np.concatenate(parts)
    logger.info(f"Processed {proc.next_frame} frames, {proc.evaluations} model evaluations "
                f"(N={config.subsample_n}, M={len(streams)})")
    return AudioClip(enhanced, rate), proc.timeline
