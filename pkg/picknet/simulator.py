"""学習データのシミュレーション

直方体の部屋をランダムに生成し、鏡像法で RIR を作り、近接マイクと遠方マイクの
残響音声に Hoth 雑音と単発のトランジェント雑音を加える。
すべての生成はシードの純関数で、同じシードなら同じ結果になる。
"""
import json
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt
from .logger import logger
from .error_handler import InvalidInputError, OutOfRangeError, SamplingFailureError
from .dsp import SAMPLE_RATE, AudioClip
from .settings import SimulationConfig

SPEED_OF_SOUND = 343.0
EYRING_CONSTANT = 0.161
FD_TAPS = 81  # 分数遅延用の窓付き sinc のタップ数
MAX_REJECTIONS = 10000
CALIBRATION_TOLERANCE = 0.02  # 推定 T60 と目標の相対誤差
CALIBRATION_STEPS = 40

ROOM_SIDE_RANGE = (5.0, 16.0)
ROOM_HEIGHT_RANGE = (2.5, 4.5)
T60_RANGE = (0.2, 0.6)
NEAR_HORIZONTAL_RANGE = (0.30, 0.70)
NEAR_VERTICAL_RANGE = (0.10, 0.30)
MIC_SPACING_RANGE = (1.0, 4.0)
SPEAKER_HEIGHT_RANGE = (1.0, 1.8)
FAR_MIC_HEIGHT_RANGE = (0.6, 2.0)
WALL_MARGIN = 0.05
TRANSIENT_SECONDS = (0.1, 0.3)

# Hoth 室内雑音のオクターブバンドレベル (dB)。500 Hz 以上で約 5-6 dB/oct で下がる
HOTH_BANDS_DB = {
    63.0: 34.0,
    125.0: 32.4,
    250.0: 30.9,
    500.0: 27.1,
    1000.0: 21.4,
    2000.0: 15.8,
    4000.0: 9.8,
    8000.0: 4.2,
}


@dataclass(frozen=True)
class RoomScene:
    depth: float
    width: float
    height: float
    reflection: float
    t60: float
    speaker_pos: Tuple[float, float, float]
    mic_pos: Tuple[Tuple[float, float, float], ...]

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.depth, self.width, self.height])

    @property
    def n_mics(self) -> int:
        return len(self.mic_pos)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "width": self.width, "height": self.height,
            "reflection": self.reflection, "t60": self.t60,
            "speaker_pos": list(self.speaker_pos),
            "mic_pos": [list(m) for m in self.mic_pos],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoomScene":
        return cls(
            depth=float(data["depth"]), width=float(data["width"]), height=float(data["height"]),
            reflection=float(data["reflection"]), t60=float(data["t60"]),
            speaker_pos=tuple(float(v) for v in data["speaker_pos"]),
            mic_pos=tuple(tuple(float(v) for v in m) for m in data["mic_pos"]),
        )


def _inside(pos, dims, margin: float = 0.0) -> bool:
    pos = np.asarray(pos, dtype=np.float64)
    return bool(np.all(pos > margin) and np.all(pos < np.asarray(dims) - margin))


def scene_violations(scene: RoomScene) -> List[str]:
    """部屋とマイク配置の制約違反を列挙する（空なら妥当）"""
    problems = []
    lo, hi = ROOM_SIDE_RANGE
    if not (lo <= scene.depth <= hi and lo <= scene.width <= hi):
        problems.append(f"room floor {scene.depth:.2f} x {scene.width:.2f} outside [{lo}, {hi}] m")
    lo, hi = ROOM_HEIGHT_RANGE
    if not lo <= scene.height <= hi:
        problems.append(f"height {scene.height:.2f} outside [{lo}, {hi}] m")
    lo, hi = T60_RANGE
    if not lo <= scene.t60 <= hi:
        problems.append(f"t60 {scene.t60:.3f} outside [{lo}, {hi}] s")
    if not 0.0 <= scene.reflection < 1.0:
        problems.append(f"reflection {scene.reflection} outside [0, 1)")
    for name, pos in [("speaker", scene.speaker_pos)] + [(f"mic {i}", m) for i, m in enumerate(scene.mic_pos)]:
        if not _inside(pos, scene.dims):
            problems.append(f"{name} outside the room")
    if scene.n_mics >= 1:
        spk = np.asarray(scene.speaker_pos)
        near = np.asarray(scene.mic_pos[0])
        horizontal = float(np.hypot(*(near - spk)[:2]))
        vertical = abs(float(near[2] - spk[2]))
        if not NEAR_HORIZONTAL_RANGE[0] - 1e-9 <= horizontal <= NEAR_HORIZONTAL_RANGE[1] + 1e-9:
            problems.append(f"near mic horizontal distance {horizontal:.3f} m out of range")
        if not NEAR_VERTICAL_RANGE[0] - 1e-9 <= vertical <= NEAR_VERTICAL_RANGE[1] + 1e-9:
            problems.append(f"near mic vertical offset {vertical:.3f} m out of range")
    if scene.n_mics >= 2:
        spacing = float(np.linalg.norm(np.asarray(scene.mic_pos[1]) - np.asarray(scene.mic_pos[0])))
        if not MIC_SPACING_RANGE[0] - 1e-9 <= spacing <= MIC_SPACING_RANGE[1] + 1e-9:
            problems.append(f"mic spacing {spacing:.3f} m out of range")
    return problems


def t60_to_reflection(t60: float, dims: Sequence[float]) -> float:
    """Eyring の式を逆に解き、一様な壁の反射係数 β を求める"""
    dims = np.asarray(dims, dtype=np.float64)
    if dims.shape != (3,) or np.any(dims <= 0):
        raise InvalidInputError(f"Room dimensions must be three positive lengths, got {dims}")
    if not np.isfinite(t60) or t60 <= 0:
        raise OutOfRangeError(f"T60 must be positive, got {t60}")

    volume = float(np.prod(dims))
    surface = 2.0 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
    # 1 - α = exp(-0.161 V / (S T60)),  β = sqrt(1 - α)。t60 > 0 なら常に α < 1
    one_minus_alpha = np.exp(-EYRING_CONSTANT * volume / (surface * t60))
    return float(np.sqrt(one_minus_alpha))


def eyring_t60(reflection: float, dims: Sequence[float]) -> float:
    dims = np.asarray(dims, dtype=np.float64)
    volume = float(np.prod(dims))
    surface = 2.0 * (dims[0] * dims[1] + dims[1] * dims[2] + dims[0] * dims[2])
    if reflection <= 0:
        return 0.0
    return EYRING_CONSTANT * volume / (-surface * np.log(reflection ** 2))


def calibrate_reflection(t60: float, dims: Sequence[float], src, mics, length: int,
                         sample_rate: int = SAMPLE_RATE, tolerance: float = CALIBRATION_TOLERANCE,
                         max_steps: int = CALIBRATION_STEPS) -> float:
    """鏡像法 RIR の Schroeder 推定 T60 が t60 になる β を二分探索で求める

    Eyring の β から探索を始める。推定値はマイクごとの推定の幾何平均。
    反射回数ごとの成分は β に依らず、生成時の image_method_rir と共有される。
    """
    beta = t60_to_reflection(t60, dims)
    dims = tuple(float(v) for v in dims)
    components = [_image_components(dims, tuple(float(v) for v in src), tuple(float(v) for v in mic), length,
                                    sample_rate, SPEED_OF_SOUND, FD_TAPS) for mic in mics]

    def measured(b: float) -> float:
        logs = []
        for orders, basis in components:
            try:
                value = schroeder_t60(AudioClip((b ** orders) @ basis, sample_rate))
            except InvalidInputError:
                return 0.0
            if not np.isfinite(value) or value <= 0:
                return 0.0
            logs.append(np.log(value))
        return float(np.exp(np.mean(logs)))

    eyring = beta
    lo, hi = 0.0, 1.0
    estimate = measured(beta)
    for _ in range(max_steps):
        if abs(estimate / t60 - 1.0) <= tolerance:
            break
        if estimate > t60:
            hi = beta
        else:
            lo = beta
        beta = 0.5 * (lo + hi)
        estimate = measured(beta)
    if abs(estimate / t60 - 1.0) > tolerance:
        logger.warning(f"Reflection calibration stopped at T60 {estimate:.3f} s for a {t60:.3f} s target")
    logger.debug(f"Reflection {eyring:.4f} -> {beta:.4f} for T60 {t60:.3f} s (measured {estimate:.3f} s)")
    return float(beta)


def sample_room(rng_seed: int, n_far_mics: int = 1, max_tries: int = MAX_REJECTIONS,
                calibrate: bool = True) -> RoomScene:
    """部屋・話者・マイク配置をランダムに決める（制約を満たすまで棄却サンプリング）

    calibrate=False なら β は Eyring の式の値のまま（配置だけを調べるとき用）。
    """
    rng = np.random.default_rng(rng_seed)
    depth, width = rng.uniform(*ROOM_SIDE_RANGE, size=2)
    height = rng.uniform(*ROOM_HEIGHT_RANGE)
    t60 = rng.uniform(*T60_RANGE)
    dims = np.array([depth, width, height])

    for _ in range(max_tries):
        speaker = np.array([
            rng.uniform(WALL_MARGIN, depth - WALL_MARGIN),
            rng.uniform(WALL_MARGIN, width - WALL_MARGIN),
            rng.uniform(*SPEAKER_HEIGHT_RANGE),
        ])
        r = rng.uniform(*NEAR_HORIZONTAL_RANGE)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        dz = rng.uniform(*NEAR_VERTICAL_RANGE) * rng.choice([-1.0, 1.0])
        near = speaker + np.array([r * np.cos(phi), r * np.sin(phi), dz])
        if not (_inside(speaker, dims, WALL_MARGIN) and _inside(near, dims, WALL_MARGIN)):
            continue

        mics = [near]
        for _ in range(n_far_mics):
            spacing = rng.uniform(*MIC_SPACING_RANGE)
            z_far = rng.uniform(FAR_MIC_HEIGHT_RANGE[0], min(FAR_MIC_HEIGHT_RANGE[1], height - WALL_MARGIN))
            vertical = z_far - near[2]
            if abs(vertical) >= spacing:
                break
            horizontal = np.sqrt(spacing ** 2 - vertical ** 2)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            far = np.array([near[0] + horizontal * np.cos(theta), near[1] + horizontal * np.sin(theta), z_far])
            if not _inside(far, dims, WALL_MARGIN):
                break
            mics.append(far)
        if len(mics) != n_far_mics + 1:
            continue

        if calibrate:
            reflection = calibrate_reflection(t60, dims, speaker, mics, _rir_samples(t60, SAMPLE_RATE))
        else:
            reflection = t60_to_reflection(t60, dims)
        scene = RoomScene(
            depth=float(depth), width=float(width), height=float(height),
            reflection=reflection, t60=float(t60),
            speaker_pos=tuple(float(v) for v in speaker),
            mic_pos=tuple(tuple(float(v) for v in m) for m in mics),
        )
        return scene

    raise SamplingFailureError(f"No valid placement after {max_tries} rejections (seed {rng_seed})")


def _rir_samples(t60: float, sample_rate: int) -> int:
    # 60 dB 減衰するまで
    return int(np.ceil(max(t60, 0.1) * sample_rate))


def rir_length(scene: RoomScene, sample_rate: int = SAMPLE_RATE) -> int:
    return _rir_samples(scene.t60, sample_rate)


def windowed_sinc_taps(delay: np.ndarray, taps: int = FD_TAPS) -> Tuple[np.ndarray, np.ndarray]:
    """分数遅延 delay (サンプル) に置く Hann 窓付き sinc の (インデックス, 係数)"""
    half = taps // 2
    center = np.round(delay).astype(np.int64)
    idx = center[:, None] + np.arange(-half, half + 1)[None, :]
    x = idx - delay[:, None]
    window = np.where(np.abs(x) < taps / 2.0, 0.5 * (1.0 + np.cos(2.0 * np.pi * x / taps)), 0.0)
    return idx, window * np.sinc(x)


def _axis_images(src: float, mic: float, size: float, n_max: int) -> Tuple[np.ndarray, np.ndarray]:
    n = np.arange(-n_max, n_max + 1)
    offsets, reflections = [], []
    for q in (0, 1):
        offsets.append((1 - 2 * q) * src + 2 * n * size - mic)
        reflections.append(np.abs(n - q) + np.abs(n))
    return np.concatenate(offsets), np.concatenate(reflections)


@lru_cache(maxsize=4)
def _image_components(dims: Tuple[float, ...], src: Tuple[float, ...], mic: Tuple[float, ...], length: int,
                      sample_rate: int, c: float, taps: int, chunk: int = 20000) -> Tuple[np.ndarray, np.ndarray]:
    """総反射回数ごとに鏡像を足し合わせた (反射回数, K x length の成分) を返す

    RIR は Σ_k β^k 成分[k]。返す配列は書き換えないこと。
    """
    dims = np.asarray(dims)
    src = np.asarray(src)
    mic = np.asarray(mic)
    max_dist = (length + taps) / sample_rate * c
    axes = [_axis_images(src[a], mic[a], dims[a], int(np.ceil(max_dist / (2.0 * dims[a]))) + 1) for a in range(3)]
    dx, rx = axes[0]
    dy, ry = axes[1]
    dz, rz = axes[2]

    dist = np.sqrt(dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2).ravel()
    order = (rx[:, None, None] + ry[None, :, None] + rz[None, None, :]).ravel()
    keep = dist <= max_dist
    dist, order = dist[keep], order[keep]
    orders, row = np.unique(order, return_inverse=True)

    amp = 1.0 / (4.0 * np.pi * dist)
    delay = dist / c * sample_rate
    basis = np.zeros(len(orders) * length)
    for start in range(0, len(dist), chunk):
        idx, coeffs = windowed_sinc_taps(delay[start:start + chunk], taps)
        weights = coeffs * amp[start:start + chunk, None]
        valid = (idx >= 0) & (idx < length)
        flat = row[start:start + chunk, None] * length + idx
        basis += np.bincount(flat[valid], weights=weights[valid], minlength=len(basis))
    return orders.astype(np.float64), basis.reshape(len(orders), length)


def image_method_rir(scene: RoomScene, src, mic, length: int, sample_rate: int = SAMPLE_RATE,
                     c: float = SPEED_OF_SOUND, max_order: Optional[int] = None,
                     taps: int = FD_TAPS) -> AudioClip:
    """鏡像法による RIR

    各鏡像は β^(反射回数) / (4π d) の振幅で遅延 d / c に置かれる。
    max_order を指定すると総反射回数がそれ以下の鏡像だけを使う。
    """
    dims = scene.dims
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if length <= 0:
        raise InvalidInputError(f"RIR length must be positive, got {length}")
    if not (_inside(src, dims) and _inside(mic, dims)):
        raise InvalidInputError("Source and microphone must lie strictly inside the room")

    orders, basis = _image_components(tuple(float(v) for v in dims), tuple(float(v) for v in src),
                                      tuple(float(v) for v in mic), length, sample_rate, c, taps)
    gains = scene.reflection ** orders
    if max_order is not None:
        gains = np.where(orders <= max_order, gains, 0.0)
    return AudioClip(gains @ basis, sample_rate)


def schroeder_t60(rir: AudioClip, fit_db: Tuple[float, float] = (-5.0, -25.0)) -> float:
    """Schroeder の後方積分で残響時間を推定する（-5〜-25 dB の直線近似を 60 dB に外挿）"""
    energy = rir.samples ** 2
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise InvalidInputError("RIR has no energy")
    edc_db = 10.0 * np.log10(np.maximum(edc / edc[0], 1e-300))
    hi, lo = fit_db
    region = np.where((edc_db <= hi) & (edc_db >= lo))[0]
    if len(region) < 2:
        raise InvalidInputError("RIR too short for the decay fit")
    t = region / rir.sample_rate
    slope, _ = np.polyfit(t, edc_db[region], 1)
    return float(-60.0 / slope)


def convolve(clip: AudioClip, rir: AudioClip) -> AudioClip:
    if clip.sample_rate != rir.sample_rate:
        raise InvalidInputError(f"Sample rates differ: {clip.sample_rate} vs {rir.sample_rate}")
    if len(clip) == 0 or len(rir) == 0:
        raise InvalidInputError("Cannot convolve an empty signal")
    return AudioClip(fftconvolve(clip.samples, rir.samples)[:len(clip)], clip.sample_rate)


def hoth_gain(freqs: np.ndarray, bands_db: Optional[Dict[float, float]] = None) -> np.ndarray:
    bands = bands_db or HOTH_BANDS_DB
    centers = np.array(sorted(bands))
    levels = np.array([bands[f] for f in centers])
    log_f = np.log2(np.maximum(freqs, centers[0]))
    return 10.0 ** (np.interp(log_f, np.log2(centers), levels) / 20.0)


def hoth_noise(length: int, rng_seed: int, sample_rate: int = SAMPLE_RATE,
               bands_db: Optional[Dict[float, float]] = None) -> AudioClip:
    """白色ガウス雑音を Hoth スペクトルに整形し、RMS を 1 に正規化する"""
    if length <= 0:
        raise InvalidInputError(f"Noise length must be positive, got {length}")
    rng = np.random.default_rng(rng_seed)
    white = rng.standard_normal(length)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(length, d=1.0 / sample_rate)
    shaped = np.fft.irfft(spectrum * hoth_gain(freqs, bands_db), n=length)
    return AudioClip(shaped / np.sqrt(np.mean(shaped ** 2)), sample_rate)


def signal_power(samples: np.ndarray) -> float:
    return float(np.mean(np.asarray(samples, dtype=np.float64) ** 2))


def noise_gain(speech: AudioClip, noise: AudioClip, snr_db: float) -> float:
    p_speech = signal_power(speech.samples)
    p_noise = signal_power(noise.samples)
    if p_speech <= 0 or p_noise <= 0:
        raise InvalidInputError("Speech and noise must both have non-zero power")
    return float(np.sqrt(p_speech / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(speech: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    if len(speech) != len(noise):
        raise InvalidInputError(f"Speech ({len(speech)}) and noise ({len(noise)}) lengths differ")
    g = noise_gain(speech, noise, snr_db)
    return AudioClip(speech.samples + g * noise.samples, speech.sample_rate)


@dataclass(frozen=True)
class TransientInfo:
    channel: int
    onset: int  # samples
    duration: int  # samples
    level_db: float
    sample_rate: int = SAMPLE_RATE

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "onset_s": self.onset / self.sample_rate,
            "dur_s": self.duration / self.sample_rate,
            "level_db": self.level_db,
        }


def inject_transient(clips: Sequence[AudioClip], noise_clip: AudioClip, rng_seed: int,
                     level_db_range: Tuple[float, float] = (-5.0, 5.0)) -> Tuple[List[AudioClip], TransientInfo]:
    """短いトランジェント雑音を 1 チャネルだけに加える"""
    if len(clips) == 0:
        raise InvalidInputError("No channels to inject into")
    fs = clips[0].sample_rate
    min_len = int(round(TRANSIENT_SECONDS[0] * fs))
    max_len = int(round(TRANSIENT_SECONDS[1] * fs))
    n = len(clips[0])
    if n < min_len:
        raise InvalidInputError(f"Clips of {n} samples are shorter than {TRANSIENT_SECONDS[0]} s")
    if len(noise_clip) < min_len:
        raise InvalidInputError(f"Noise clip of {len(noise_clip)} samples is shorter than {TRANSIENT_SECONDS[0]} s")

    rng = np.random.default_rng(rng_seed)
    channel = int(rng.integers(len(clips)))
    duration = int(rng.integers(min_len, max_len + 1))
    duration = min(duration, n, len(noise_clip))
    onset = int(rng.integers(0, n - duration + 1))
    crop_start = int(rng.integers(0, len(noise_clip) - duration + 1))
    level_db = float(rng.uniform(*level_db_range))

    segment = noise_clip.samples[crop_start:crop_start + duration]
    target = clips[channel].samples
    channel_rms = np.sqrt(signal_power(target))
    segment_rms = np.sqrt(signal_power(segment))
    scale = channel_rms * 10.0 ** (level_db / 20.0) / segment_rms if segment_rms > 0 else 0.0

    out = list(clips)
    modified = target.copy()
    modified[onset:onset + duration] += scale * segment
    out[channel] = AudioClip(modified, fs)
    return out, TransientInfo(channel, onset, duration, level_db, fs)


def synthetic_transients(rng_seed: int = 0, n: int = 10, sample_rate: int = SAMPLE_RATE) -> List[AudioClip]:
    """テスト用の合成トランジェント（クリック、机を叩く音、こすれ音）"""
    rng = np.random.default_rng(rng_seed)
    length = int(TRANSIENT_SECONDS[1] * sample_rate)
    t = np.arange(length) / sample_rate
    bank = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            sig = np.zeros(length)
            clicks = rng.integers(0, length, size=rng.integers(1, 4))
            sig[clicks] = rng.uniform(0.5, 1.0, size=len(clicks)) * rng.choice([-1.0, 1.0], size=len(clicks))
            sig = fftconvolve(sig, np.exp(-np.arange(64) / 8.0))[:length]
        elif kind == 1:
            f0 = rng.uniform(60.0, 200.0)
            sig = np.sin(2 * np.pi * f0 * t) * np.exp(-t / rng.uniform(0.02, 0.08))
        else:
            sos = butter(4, [rng.uniform(500, 1500), rng.uniform(3000, 6000)], btype="bandpass", fs=sample_rate, output="sos")
            sig = sosfilt(sos, rng.standard_normal(length)) * np.exp(-t / rng.uniform(0.05, 0.15))
        bank.append(AudioClip(sig / (np.max(np.abs(sig)) + 1e-12), sample_rate))
    return bank


@dataclass
class TrainingSample:
    noisy: List[AudioClip]
    clean_reverb: List[AudioClip]
    scene: RoomScene
    snr_db: List[float]
    transient: Optional[TransientInfo] = None
    near_index: int = 0
    seed: int = 0
    rirs: List[AudioClip] = field(default_factory=list, repr=False)


def derive_seeds(seed: int, n: int) -> List[int]:
    """1 つのシードから独立な子シードを n 個作る"""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def make_training_sample(clean: AudioClip, rng_seed: int, noise_bank: Optional[Sequence[AudioClip]] = None,
                         config: Optional[SimulationConfig] = None) -> TrainingSample:
    """1 話者 2 マイクの学習サンプルを作る（マイク 0 が近接マイク）"""
    config = config or SimulationConfig()
    room_seed, noise_seed, snr_seed, transient_seed, pick_seed = derive_seeds(rng_seed, 5)

    scene = sample_room(room_seed)
    length = rir_length(scene, clean.sample_rate)
    rirs = [image_method_rir(scene, scene.speaker_pos, m, length, clean.sample_rate) for m in scene.mic_pos]
    clean_reverb = [convolve(clean, rir) for rir in rirs]

    snr_rng = np.random.default_rng(snr_seed)
    snr_db = [float(snr_rng.uniform(*config.snr_range)) for _ in clean_reverb]
    noise_seeds = derive_seeds(noise_seed, len(clean_reverb))
    noisy = [
        mix_at_snr(rev, hoth_noise(len(rev), s, rev.sample_rate), snr)
        for rev, s, snr in zip(clean_reverb, noise_seeds, snr_db)
    ]

    transient = None
    if config.inject_transient:
        bank = noise_bank if noise_bank else synthetic_transients(pick_seed, sample_rate=clean.sample_rate)
        noise_clip = bank[int(np.random.default_rng(pick_seed).integers(len(bank)))]
        noisy, transient = inject_transient(noisy, noise_clip, transient_seed, config.transient_level_db)

    return TrainingSample(noisy, clean_reverb, scene, snr_db, transient, near_index=0, seed=rng_seed, rirs=rirs)


# ---------------------------------------------------------------------------
# Dataset on disk (JSON Lines manifest + WAV files)
# ---------------------------------------------------------------------------

def split_clip(clip: AudioClip, max_seconds: float = 10.0, min_seconds: float = 1.0) -> List[AudioClip]:
    """長い音声を max_seconds 以下に分割する（短すぎる端は捨てる）"""
    size = int(max_seconds * clip.sample_rate)
    pieces = []
    for start in range(0, len(clip), size):
        piece = clip.samples[start:start + size]
        if len(piece) >= min_seconds * clip.sample_rate or start == 0:
            pieces.append(AudioClip(piece, clip.sample_rate))
    return pieces


def load_clean_dir(clean_dir: str, sample_rate: int = SAMPLE_RATE, max_seconds: float = 10.0) -> List[Tuple[str, AudioClip]]:
    from .audio_io import read_wav

    root = Path(clean_dir)
    paths = sorted(root.glob("*.wav")) if root.is_dir() else []
    if not paths:
        raise InvalidInputError(f"No WAV files found in {clean_dir}")
    clips = []
    for path in paths:
        for k, piece in enumerate(split_clip(read_wav(str(path), expected_rate=sample_rate), max_seconds)):
            clips.append((f"{path.stem}#{k}", piece))
    logger.info(f"Loaded {len(clips)} clean segments from {len(paths)} files in {clean_dir}")
    return clips


def load_noise_dir(noise_dir: str, sample_rate: int = SAMPLE_RATE) -> List[AudioClip]:
    from .audio_io import read_wav

    paths = sorted(Path(noise_dir).glob("*.wav"))
    bank = [read_wav(str(p), expected_rate=sample_rate) for p in paths]
    bank = [clip for clip in bank if clip.duration >= TRANSIENT_SECONDS[0]]
    if not bank:
        raise InvalidInputError(f"No usable noise clips (>= {TRANSIENT_SECONDS[0]} s) in {noise_dir}")
    return bank


def _write_sample(out_dir: Path, sample_id: str, source: str, sample: TrainingSample) -> dict:
    from .audio_io import write_wav

    rel = Path("samples") / sample_id
    noisy_paths, clean_paths = [], []
    for m, (noisy, clean) in enumerate(zip(sample.noisy, sample.clean_reverb)):
        noisy_paths.append(str(rel / f"noisy_{m}.wav"))
        clean_paths.append(str(rel / f"clean_{m}.wav"))
        write_wav(str(out_dir / noisy_paths[-1]), noisy)
        write_wav(str(out_dir / clean_paths[-1]), clean)
    return {
        "id": sample_id,
        "seed": sample.seed,
        "source": source,
        "scene": sample.scene.to_dict(),
        "snr_db": sample.snr_db,
        "transient": sample.transient.to_dict() if sample.transient else None,
        "near_index": sample.near_index,
        "noisy": noisy_paths,
        "clean": clean_paths,
    }


def simulate_dataset(clean_clips: Sequence[Tuple[str, AudioClip]], out_dir: str, n_samples: int, seed: int,
                     config: Optional[SimulationConfig] = None,
                     noise_bank: Optional[Sequence[AudioClip]] = None) -> str:
    """n_samples 個の学習サンプルと manifest.jsonl を書き出す"""
    config = config or SimulationConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sample_seeds = derive_seeds(seed, n_samples)

    def job(i: int) -> dict:
        pick = int(np.random.default_rng(sample_seeds[i]).integers(len(clean_clips)))
        source, clean = clean_clips[pick]
        sample = make_training_sample(clean, sample_seeds[i], noise_bank, config)
        record = _write_sample(out, f"{i:06d}", source, sample)
        logger.debug(f"Sample {record['id']} written (t60={sample.scene.t60:.2f}s, snr={sample.snr_db})")
        return record

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        records = list(pool.map(job, range(n_samples)))

    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info(f"Wrote {n_samples} samples and manifest to {manifest}")
    return str(manifest)


def read_manifest(path: str) -> List[dict]:
    """manifest を読み込み、各レコードの部屋の制約を再検証する"""
    manifest = Path(path)
    if not manifest.exists():
        raise InvalidInputError(f"Manifest {path} not found")
    records = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                scene = RoomScene.from_dict(record["scene"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InvalidInputError(f"{path}:{line_no}: malformed record: {e}") from e
            problems = scene_violations(scene)
            if problems:
                raise InvalidInputError(f"{path}:{line_no}: scene violates constraints: {problems}")
            record["root"] = str(manifest.parent)
            records.append(record)
    return records


def load_record_audio(record: dict, key: str) -> List[AudioClip]:
    from .audio_io import read_wavs

    root = Path(record["root"])
    return read_wavs([str(root / p) for p in record[key]])
