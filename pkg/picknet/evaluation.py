"""評価とベンチマーク

- 近接マイク正解率: 近接チャネルの雑音なし信号のフレームパワーがゲート (-40 dBFS) を超える
  フレームで、事後確率の argmax が近接マイクと一致する割合
- 最大エネルギー選択のベースライン正解率
- 強調出力と目標 (近接マイクの雑音なし残響信号) の振幅スペクトル SNR
- チャネル数ごとの積和演算回数と選択段の処理時間
"""
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence
import numpy as np
from .logger import logger
from .error_handler import InvalidInputError
from .dsp import AudioClip, amplitude, stft
from .layers import MacCounter
from .model import ModelCheckpoint, mac_count
from .selector import ChannelSelector, OracleSelector, max_energy_posteriors
from .settings import BenchConfig, DspSettings, EvalConfig, StreamConfig
from .streaming import make_selector, process_stream


def frame_power_dbfs(clip: AudioClip, win_len: int, hop: int) -> np.ndarray:
    """フレームごとの平均二乗パワー (dBFS, 振幅 1.0 が 0 dB)"""
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, win_len)[::hop]
    power = np.mean(frames ** 2, axis=1)
    return 10.0 * np.log10(np.maximum(power, 1e-20))


def gate_mask(clean_near: AudioClip, dsp: DspSettings, gate_dbfs: float) -> np.ndarray:
    return frame_power_dbfs(clean_near, dsp.win_len, dsp.hop) > gate_dbfs


def max_energy_choices(noisy: Sequence[AudioClip], dsp: DspSettings) -> np.ndarray:
    spectra = np.stack([stft(x, dsp.win_len, dsp.hop).frames for x in noisy], axis=1)  # T x M x F
    return np.array([int(np.argmax(max_energy_posteriors(frame))) for frame in spectra])


def amplitude_snr_db(output: AudioClip, target: AudioClip, dsp: DspSettings) -> float:
    out_amp = amplitude(stft(output, dsp.win_len, dsp.hop)).frames
    tgt_amp = amplitude(stft(target, dsp.win_len, dsp.hop)).frames
    T = min(len(out_amp), len(tgt_amp))
    err = np.sum((out_amp[:T] - tgt_amp[:T]) ** 2)
    sig = np.sum(tgt_amp[:T] ** 2)
    if err <= 0:
        return float("inf")
    return float(10.0 * np.log10(sig / err))


@dataclass
class RecordMetrics:
    id: str
    n_frames: int
    n_gated: int
    correct: int
    baseline_correct: int
    snr_db: float


@dataclass
class EvalReport:
    records: List[RecordMetrics] = field(default_factory=list)

    @property
    def n_gated(self) -> int:
        return sum(r.n_gated for r in self.records)

    @property
    def accuracy(self) -> float:
        return sum(r.correct for r in self.records) / self.n_gated if self.n_gated else float("nan")

    @property
    def baseline_accuracy(self) -> float:
        return sum(r.baseline_correct for r in self.records) / self.n_gated if self.n_gated else float("nan")

    @property
    def mean_snr_db(self) -> float:
        finite = [r.snr_db for r in self.records if np.isfinite(r.snr_db)]
        return float(np.mean(finite)) if finite else float("inf")

    def to_dict(self) -> dict:
        return {
            "n_records": len(self.records),
            "n_frames": sum(r.n_frames for r in self.records),
            "n_gated_frames": self.n_gated,
            "accuracy": self.accuracy,
            "max_energy_accuracy": self.baseline_accuracy,
            "amplitude_snr_db": self.mean_snr_db,
            "records": [asdict(r) for r in self.records],
        }


def evaluate_record(record: dict, selector, stream: StreamConfig, dsp: DspSettings, gate_dbfs: float) -> RecordMetrics:
    from .simulator import load_record_audio

    noisy = load_record_audio(record, "noisy")
    clean = load_record_audio(record, "clean")
    near = int(record.get("near_index", 0))

    # シミュレーションデータは同期済み
    enhanced, timeline = process_stream(noisy, config=stream.model_copy(update={"synchronize": False}),
                                        dsp=dsp, selector=selector)
    choices = np.argmax(timeline.matrix(), axis=1)
    baseline = max_energy_choices(noisy, dsp)
    gated = gate_mask(clean[near], dsp, gate_dbfs)
    T = min(len(choices), len(baseline), len(gated))
    choices, baseline, gated = choices[:T], baseline[:T], gated[:T]

    return RecordMetrics(
        id=str(record.get("id", "")),
        n_frames=T,
        n_gated=int(gated.sum()),
        correct=int(np.sum((choices == near) & gated)),
        baseline_correct=int(np.sum((baseline == near) & gated)),
        snr_db=amplitude_snr_db(enhanced, clean[near], dsp),
    )


def evaluate_manifest(records: Sequence[dict], checkpoint: Optional[ModelCheckpoint] = None,
                      stream: Optional[StreamConfig] = None, dsp: Optional[DspSettings] = None,
                      eval_config: Optional[EvalConfig] = None,
                      posterior_fn: Optional[Callable[[dict], Callable[[int, int], np.ndarray]]] = None) -> EvalReport:
    """manifest の各サンプルで選択精度を測る

    posterior_fn(record) を与えると、モデルの代わりにそれが返す関数 (frame, M) -> p を使う。
    """
    stream = stream or StreamConfig()
    dsp = dsp or DspSettings()
    eval_config = eval_config or EvalConfig()
    if not records:
        raise InvalidInputError("Nothing to evaluate: the manifest is empty")

    report = EvalReport()
    selector = None if posterior_fn is not None else make_selector(stream, checkpoint)
    try:
        for record in records:
            sel = OracleSelector(posterior_fn(record)) if posterior_fn is not None else selector
            metrics = evaluate_record(record, sel, stream, dsp, eval_config.energy_gate_dbfs)
            logger.debug(f"Record {metrics.id}: {metrics.correct}/{metrics.n_gated} correct, snr {metrics.snr_db:.2f} dB")
            report.records.append(metrics)
    finally:
        if selector is not None:
            selector.cleanup()

    logger.info(f"Eval: accuracy {report.accuracy:.3f}, max-energy {report.baseline_accuracy:.3f}, "
                f"amplitude SNR {report.mean_snr_db:.2f} dB over {report.n_gated} gated frames")
    return report


# ---------------------------------------------------------------------------
# Bench
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    n_channels: int
    macs_per_forward: int
    counted_macs: int
    evaluations_full: int
    evaluations_subsampled: int
    ms_per_frame_full: float
    ms_per_frame_subsampled: float

    @property
    def speedup(self) -> float:
        return self.ms_per_frame_full / self.ms_per_frame_subsampled if self.ms_per_frame_subsampled > 0 else float("inf")


def affine_fit(points: Dict[int, int]):
    """MAC(M) = a + b M を正確な有理数で当てはめ、(a, b, 最大残差) を返す"""
    ms = sorted(points)
    if len(ms) < 2:
        raise InvalidInputError("Need at least two channel counts for an affine fit")
    b = Fraction(points[ms[-1]] - points[ms[0]], ms[-1] - ms[0])
    a = points[ms[0]] - b * ms[0]
    residual = max(abs(points[m] - (a + b * m)) for m in ms)
    return a, b, residual


def _time_selection(selector: ChannelSelector, pool: np.ndarray, n_frames: int, subsample_n: int):
    start_count = selector.evaluations
    t0 = time.perf_counter()
    for t in range(n_frames):
        if t % subsample_n == 0:
            selector.evaluate(pool[t % len(pool)])
    elapsed = time.perf_counter() - t0
    return selector.evaluations - start_count, elapsed * 1000.0 / n_frames


def run_bench(checkpoint: ModelCheckpoint, config: Optional[BenchConfig] = None, seed: int = 0,
              pool_size: int = 32) -> List[BenchRow]:
    """チャネル数ごとに選択段の 1 フレームあたり処理時間と積和演算回数を測る"""
    config = config or BenchConfig()
    rng = np.random.default_rng(seed)
    shape = tuple(checkpoint.config.input_shape)
    rows = []
    for M in config.m_list:
        if M < 1:
            raise InvalidInputError(f"Channel count must be positive, got {M}")
        selector = ChannelSelector(checkpoint, count_macs=True)
        selector.warmup(M)
        pool = rng.standard_normal((pool_size, M) + shape).astype(np.float32)

        selector.counter = MacCounter()
        selector.evaluate(pool[0])
        counted = selector.counter.total
        selector.counter = None

        evals_full, ms_full = _time_selection(selector, pool, config.n_frames, 1)
        evals_sub, ms_sub = _time_selection(selector, pool, config.n_frames, config.subsample_n)
        row = BenchRow(M, mac_count(checkpoint.config, M), counted, evals_full, evals_sub, ms_full, ms_sub)
        logger.info(f"Bench M={M}: {row.macs_per_forward} MACs, {ms_full:.3f} ms/frame (N=1), "
                    f"{ms_sub:.3f} ms/frame (N={config.subsample_n}), speedup {row.speedup:.2f}")
        selector.cleanup()
        rows.append(row)
    return rows
