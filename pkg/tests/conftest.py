"""共有フィクスチャ: 音声らしい合成信号、小さなモデル構成、合成データセット"""
import numpy as np
import pytest

from picknet.audio_io import write_wav
from picknet.dsp import SAMPLE_RATE, AudioClip
from picknet.model import PATCH_HEIGHT, LayerSpec, ModelConfig, PickNet


def synthetic_speech(duration: float = 2.0, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> AudioClip:
    """有声音の断片（基本周波数がゆらぐ調波音）と無音区間を並べた音声風の信号"""
    rng = np.random.default_rng(seed)
    n = int(duration * sample_rate)
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sample_rate)
    while pos < n:
        length = int(rng.uniform(0.15, 0.4) * sample_rate)
        t = np.arange(length) / sample_rate
        f0 = rng.uniform(100.0, 220.0) * (1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        voiced = sum(np.sin(k * phase) / k for k in range(1, 12))
        envelope = np.sin(np.pi * np.arange(length) / length) ** 2
        segment = 0.1 * voiced * envelope
        end = min(n, pos + length)
        out[pos:end] += segment[:end - pos]
        pos = end + int(rng.uniform(0.05, 0.25) * sample_rate)
    out += 1e-4 * rng.standard_normal(n)
    return AudioClip(out, sample_rate)


def tiny_config(input_dim: int = 8, xc_fraction: float = 0.125, pool_point: str = "pre_bn",
                feature_kind: str = "logmel") -> ModelConfig:
    xc = dict(cross_channel=xc_fraction > 0, xc_fraction=xc_fraction)
    specs = [
        LayerSpec(kind="conv3x3", out_channels=4),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2x2"),
        LayerSpec(kind="conv3x3", out_channels=8, **xc),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2x2"),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", out_units=8),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", out_units=1),
    ]
    return ModelConfig(layers=specs, input_shape=(PATCH_HEIGHT, input_dim), feature_kind=feature_kind,
                       pool_point=pool_point)


def randomize_bn(model: PickNet, seed: int = 1):
    """移動統計を単位値以外にして eval モードの検証を意味のあるものにする"""
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        if name.endswith("running_mean"):
            model.params[name] = rng.normal(0.0, 0.1, value.shape).astype(model.dtype)
        elif name.endswith("running_var"):
            model.params[name] = rng.uniform(0.5, 1.5, value.shape).astype(model.dtype)


@pytest.fixture
def speech():
    return synthetic_speech(2.0, seed=0)


@pytest.fixture
def tiny_model():
    model = PickNet(tiny_config(), dtype=np.float64, seed=3)
    randomize_bn(model)
    return model


@pytest.fixture
def clean_dir(tmp_path):
    """合成音声の WAV を 3 本置いたディレクトリ"""
    root = tmp_path / "clean"
    for i in range(3):
        write_wav(str(root / f"utt{i}.wav"), synthetic_speech(1.5, seed=10 + i))
    return root
