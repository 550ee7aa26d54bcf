# 遅延インポート用
# scipy.io.wavfile は最初の読み書き時にインポートされる
from pathlib import Path
from typing import List, Optional
import numpy as np
from .logger import logger
from .error_handler import InvalidInputError
from .dsp import AudioClip

_wav = None

PCM16 = "pcm16"
FLOAT32 = "float32"


def _lazy_import():
    """scipy.io.wavfile を遅延インポート"""
    global _wav
    if _wav is None:
        import scipy.io.wavfile as wav
        _wav = wav
        logger.debug("WAV library loaded (lazy import)")
    return _wav


def read_wav(path: str, expected_rate: Optional[int] = None) -> AudioClip:
    """モノラル WAV (16-bit PCM / 32-bit float) を読み込む

    サンプルレートが expected_rate と異なる場合はエラー（リサンプリングはしない）。
    """
    wav = _lazy_import()
    try:
        rate, data = wav.read(str(path))
    except (OSError, ValueError) as e:
        raise InvalidInputError(f"Failed to read WAV {path}: {e}") from e

    if data.ndim != 1:
        raise InvalidInputError(f"{path}: only mono WAV files are supported (got {data.shape[1]} channels)")
    if expected_rate is not None and rate != expected_rate:
        raise InvalidInputError(f"{path}: sample rate {rate} Hz does not match {expected_rate} Hz")

    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")

    return AudioClip(samples, rate)


def write_wav(path: str, clip: AudioClip, fmt: str = FLOAT32) -> str:
    wav = _lazy_import()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)

    if fmt == PCM16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == FLOAT32:
        data = clip.samples.astype(np.float32)
    else:
        raise InvalidInputError(f"Unknown WAV format: {fmt}")

    wav.write(str(out), clip.sample_rate, data)
    logger.debug(f"Saved audio to {out}")
    return str(out)


def read_wavs(paths: List[str]) -> List[AudioClip]:
    """複数デバイスの WAV を読み込む。全ファイルのサンプルレートが一致すること"""
    if not paths:
        raise InvalidInputError("At least one input WAV is required")
    clips = [read_wav(paths[0])]
    rate = clips[0].sample_rate
    for p in paths[1:]:
        clips.append(read_wav(p, expected_rate=rate))
    return clips


def clip_stats(clip: AudioClip) -> dict:
    """RMS と最大振幅を返す（ログ用）"""
    if len(clip.samples) == 0:
        return {"rms": 0.0, "max": 0.0}
    rms = float(np.sqrt(np.mean(clip.samples ** 2)))
    max_amp = float(np.max(np.abs(clip.samples)))
    return {"rms": rms, "max": max_amp}
