"""PickNet の学習

損失は振幅再構成誤差 Σ_f (Σ_m p_m |s_{m,f}| - |s*_f|)^2。
特徴量（モデル入力）は雑音入りの信号から、損失の目標は雑音なし残響信号の振幅から作る。
"""
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
from .logger import logger
from .error_handler import InvalidConfigError, InvalidInputError, TrainingDivergedError
from .dsp import (DELTA_L, DELTA_R, amplitude, extract_features, feature_dim, running_mean_normalize,
                  stack_all, stft)
from .model import ChannelPosteriors, ModelCheckpoint, PickNet, default_config
from .settings import DspSettings, TrainConfig


@dataclass(frozen=True)
class FrameExample:
    patches: np.ndarray  # M x 41 x D
    channel_amps: np.ndarray  # M x F
    target_amp: np.ndarray  # F

    def __post_init__(self):
        if self.patches.ndim != 3 or self.channel_amps.ndim != 2 or self.target_amp.ndim != 1:
            raise InvalidInputError("FrameExample expects (M, H, D) patches, (M, F) amps and (F,) target")
        if self.patches.shape[0] != self.channel_amps.shape[0]:
            raise InvalidInputError(f"{self.patches.shape[0]} patches but {self.channel_amps.shape[0]} amplitude rows")
        if self.channel_amps.shape[1] != self.target_amp.shape[0]:
            raise InvalidInputError("channel_amps and target_amp disagree on F")
        if np.any(self.channel_amps < 0) or np.any(self.target_amp < 0):
            raise InvalidInputError("Amplitudes must be non-negative")

    @property
    def n_channels(self) -> int:
        return self.patches.shape[0]


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def frame_loss(p, channel_amps: np.ndarray, target_amp: np.ndarray) -> Tuple[float, np.ndarray]:
    """1 フレームの損失と dL/dp を返す"""
    p = p.p if isinstance(p, ChannelPosteriors) else np.asarray(p, dtype=np.float64)
    channel_amps = np.asarray(channel_amps)
    target_amp = np.asarray(target_amp)
    if channel_amps.shape != (len(p), len(target_amp)):
        raise InvalidInputError(f"channel_amps {channel_amps.shape} does not match M={len(p)}, F={len(target_amp)}")
    residual = p @ channel_amps - target_amp
    return float(np.sum(residual ** 2)), 2.0 * channel_amps @ residual


def batch_frame_loss(p: np.ndarray, channel_amps: np.ndarray, target_amp: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(B, M) の事後確率に対するフレームごとの損失 (B,) と dL/dp (B, M)"""
    residual = np.einsum("bm,bmf->bf", p, channel_amps) - target_amp
    losses = np.sum(residual ** 2, axis=1)
    grad = 2.0 * np.einsum("bmf,bf->bm", channel_amps, residual)
    return losses, grad


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= (self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)).astype(params[k].dtype)


class SGD:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]):
        self.t += 1
        for k, g in grads.items():
            params[k] -= (self.lr * g).astype(params[k].dtype)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise InvalidConfigError(f"Unknown optimizer: {name}")


# ---------------------------------------------------------------------------
# One optimization step
# ---------------------------------------------------------------------------

def collate(batch: Sequence[FrameExample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise InvalidInputError("Empty batch")
    M = batch[0].n_channels
    if any(ex.n_channels != M for ex in batch):
        raise InvalidInputError("All frames in a batch must have the same channel count")
    return (np.stack([ex.patches for ex in batch]),
            np.stack([ex.channel_amps for ex in batch]),
            np.stack([ex.target_amp for ex in batch]))


def train_step(batch, model: PickNet, optimizer, step: int = 0) -> Tuple[Dict[str, np.ndarray], float]:
    """順伝播 -> 損失 -> 逆伝播 -> パラメータ更新 を 1 回行う

    Args:
        batch: FrameExample の列、または (patches, channel_amps, target_amp) の配列組

    Returns:
        (更新後のパラメータ, バッチ平均損失)
    """
    patches, amps, target = collate(batch) if not isinstance(batch, tuple) else batch
    B = patches.shape[0]

    p, cache = model.forward(patches, mode="train")
    losses, d_p = batch_frame_loss(p.astype(np.float64), amps.astype(np.float64), target.astype(np.float64))
    mean_loss = float(losses.mean())
    if not np.isfinite(mean_loss):
        raise TrainingDivergedError(
            f"Non-finite loss at step {step}",
            details={"step": step, "loss": mean_loss, "max_abs_param": _max_abs(model.params)},
        )

    grads = model.backward(cache, d_p / B)
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingDivergedError(f"Non-finite gradients at step {step}", details={"step": step, "params": bad})

    optimizer.step(model.params, grads)
    model.commit_batch_stats(cache)
    model.bump_version()
    return model.params, mean_loss


def _max_abs(params: Dict[str, np.ndarray]) -> float:
    return float(max((np.max(np.abs(v)) for v in params.values() if v.size), default=0.0))


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradientCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_param: Optional[str]
    n_checked: int

    def __float__(self) -> float:
        return self.max_rel_error


def gradient_check(model: PickNet, example: FrameExample, h: float = 1e-5,
                   max_per_tensor: Optional[int] = None, seed: int = 0) -> GradientCheckReport:
    """中心差分による数値勾配と解析的勾配を比較する（64 ビットのみ）

    ReLU のマスクと最大値プーリングの勝者は摂動前の順伝播のものに固定する。
    相対誤差の分母は max(|a|, |b|, 1e-8) で、検査したすべての要素を相対誤差に含める。
    max_per_tensor を与えると各テンソルからその数だけ要素を抽出して検査する。
    """
    if model.dtype != np.float64:
        raise InvalidConfigError("gradient_check requires a float64 model")

    x = example.patches[None].astype(np.float64)
    amps = example.channel_amps.astype(np.float64)
    target = example.target_amp.astype(np.float64)

    p, cache = model.forward(x, mode="train")
    _, d_p = frame_loss(p[0], amps, target)
    analytic = model.backward(cache, d_p[None])

    def loss_at() -> float:
        q, _ = model.forward(x, mode="train", frozen=cache)
        return frame_loss(q[0], amps, target)[0]

    rng = np.random.default_rng(seed)
    max_rel, max_abs, worst, n_checked = 0.0, 0.0, None, 0
    for name in model.trainable_names():
        param = model.params[name]
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            indices = np.sort(rng.choice(flat.size, size=max_per_tensor, replace=False))
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            plus = loss_at()
            flat[i] = original - h
            minus = loss_at()
            flat[i] = original

            numeric = (plus - minus) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            diff = abs(a - numeric)
            max_abs = max(max_abs, diff)
            rel = diff / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel, worst = rel, f"{name}[{i}]"
            n_checked += 1

    logger.debug(f"Gradient check: {n_checked} entries, max rel {max_rel:.3e}, max abs {max_abs:.3e}")
    return GradientCheckReport(max_rel, max_abs, worst, n_checked)


# ---------------------------------------------------------------------------
# Training data
# ---------------------------------------------------------------------------

@dataclass
class SampleFrames:
    features: np.ndarray  # M x T x D (正規化済み)
    amps: np.ndarray  # M x T x F (雑音なし残響信号の振幅)
    near_index: int = 0

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]


def sample_frames(noisy, clean_reverb, feature_kind: str, dsp: Optional[DspSettings] = None,
                  near_index: int = 0) -> SampleFrames:
    """1 サンプル分の特徴量と振幅を計算する"""
    dsp = dsp or DspSettings()
    if len(noisy) != len(clean_reverb):
        raise InvalidInputError("noisy and clean_reverb must have the same channel count")
    feats, amps = [], []
    for x, s in zip(noisy, clean_reverb):
        spec = stft(x, dsp.win_len, dsp.hop)
        feats.append(running_mean_normalize(extract_features(spec, feature_kind, dsp.n_mels), dsp.norm_horizon).frames)
        amps.append(amplitude(stft(s, dsp.win_len, dsp.hop)).frames)
    return SampleFrames(np.stack(feats), np.stack(amps), near_index)


class FrameDataset:
    """サンプル単位で特徴量を持ち、パッチはバッチごとに組み立てる

    max_frames_per_sample を与えると、エポックごとに各サンプルからその数だけ
    フレームを無作為に選ぶ（draw）。len() は 1 エポックで使うフレーム数。
    """

    def __init__(self, samples: List[SampleFrames], max_frames_per_sample: Optional[int] = None):
        if not samples:
            raise InvalidInputError("Training set is empty")
        n_ch = samples[0].features.shape[0]
        if any(s.features.shape[0] != n_ch for s in samples):
            raise InvalidInputError("All training samples must have the same channel count")
        self.samples = samples
        self.max_frames_per_sample = max_frames_per_sample
        index = [(k, t) for k, s in enumerate(samples) for t in range(s.n_frames)]
        self.index = np.array(index, dtype=np.int64).reshape(-1, 2)
        self._starts = np.cumsum([0] + [s.n_frames for s in samples])

    def __len__(self) -> int:
        if self.max_frames_per_sample is None:
            return len(self.index)
        return int(sum(min(s.n_frames, self.max_frames_per_sample) for s in self.samples))

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """1 エポック分の行番号（index の行）。サンプル内では時刻順"""
        limit = self.max_frames_per_sample
        rows = []
        for k, s in enumerate(self.samples):
            t = np.arange(s.n_frames)
            if limit is not None and s.n_frames > limit:
                t = np.sort(rng.choice(s.n_frames, size=limit, replace=False))
            rows.append(self._starts[k] + t)
        return np.concatenate(rows)

    @property
    def feature_dim(self) -> int:
        return self.samples[0].features.shape[2]

    def batch(self, rows: np.ndarray, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        patches, amps, targets = [], [], []
        for k, t in self.index[rows]:
            s = self.samples[k]
            center = np.array([t])
            patches.append(np.stack([stack_all(s.features[m], DELTA_L, DELTA_R, center)[0]
                                     for m in range(s.features.shape[0])]))
            amps.append(s.amps[:, t])
            targets.append(s.amps[s.near_index, t])
        return (np.stack(patches).astype(dtype), np.stack(amps).astype(dtype), np.stack(targets).astype(dtype))

    def example(self, row: int) -> FrameExample:
        patches, amps, target = self.batch(np.array([row]), dtype=np.float64)
        return FrameExample(patches[0], amps[0], target[0])


def load_dataset(manifest: str, feature_kind: str, dsp: Optional[DspSettings] = None,
                 max_frames_per_sample: Optional[int] = None) -> FrameDataset:
    from .simulator import load_record_audio, read_manifest

    records = read_manifest(manifest)
    samples = [
        sample_frames(load_record_audio(r, "noisy"), load_record_audio(r, "clean"), feature_kind, dsp, r.get("near_index", 0))
        for r in records
    ]
    dataset = FrameDataset(samples, max_frames_per_sample)
    logger.info(f"Loaded {len(records)} samples ({len(dataset)} frames) from {manifest}")
    return dataset


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class TrainingLog:
    """1 ステップ = 1 行の JSON Lines ログ。append なら既存の行を残して追記する"""

    def __init__(self, path: Optional[str], append: bool = False):
        self.path = Path(path) if path else None
        self.append = append
        self._f = None
        self.n_lines = 0

    def __enter__(self):
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._f = open(self.path, "a" if self.append else "w", encoding="utf-8")
        return self

    def write(self, step: int, mean_loss: float, lr: float, wall_ms: float):
        if self._f is not None:
            self._f.write(json.dumps({"step": step, "mean_loss": mean_loss, "lr": lr, "wall_ms": wall_ms}) + "\n")
        self.n_lines += 1

    def __exit__(self, *exc):
        if self._f is not None:
            self._f.close()
            self._f = None
        return False


@dataclass
class TrainResult:
    model: PickNet
    losses: List[float] = field(default_factory=list)
    epoch: int = 0
    step: int = 0


class Trainer:
    """エポック単位で学習を行う。既存のチェックポイントから再開できる（オプティマイザの状態は初期化）"""

    def __init__(self, config: TrainConfig, dsp: Optional[DspSettings] = None,
                 resume_from: Optional[ModelCheckpoint] = None):
        self.config = config
        self.dsp = dsp or DspSettings()
        self.dtype = np.float32 if config.precision == "float32" else np.float64
        self.start_epoch = 0
        self.start_step = 0

        if resume_from is not None:
            if resume_from.config.feature_kind != config.feature_kind:
                raise InvalidConfigError(
                    f"Checkpoint uses {resume_from.config.feature_kind} features, config asks for {config.feature_kind}")
            self.model = PickNet.from_checkpoint(resume_from, dtype=self.dtype)
            state = resume_from.metadata.get("train_state", {})
            self.start_epoch = int(state.get("epoch", 0))
            self.start_step = int(state.get("step", 0))
            logger.info(f"Resuming training from epoch {self.start_epoch}, step {self.start_step}")
        else:
            model_config = default_config(
                config.feature_kind,
                feature_dim(config.feature_kind, self.dsp.win_len, self.dsp.n_mels),
                cross_channel=config.cross_channel,
                xc_fraction=config.xc_fraction,
                pool_point=config.pool_point,
            )
            self.model = PickNet(model_config, dtype=self.dtype, seed=config.seed)
        self.optimizer = make_optimizer(config.optimizer, config.learning_rate)

    def fit(self, dataset: FrameDataset, log_path: Optional[str] = None) -> TrainResult:
        if dataset.feature_dim != self.model.config.input_shape[1]:
            raise InvalidConfigError(
                f"Dataset features have {dataset.feature_dim} dims, model expects {self.model.config.input_shape[1]}")

        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        # 再開時は完了済みエポックの抽出と並べ替えを消費して順序を揃える
        for _ in range(self.start_epoch):
            rng.permutation(len(dataset.draw(rng)))

        result = TrainResult(self.model, epoch=self.start_epoch, step=self.start_step)
        with TrainingLog(log_path, append=self.start_step > 0) as log:
            for epoch in range(self.start_epoch, cfg.epochs):
                rows = dataset.draw(rng)
                order = rows[rng.permutation(len(rows))]
                epoch_losses = []
                for start in range(0, len(order), cfg.batch_frames):
                    t0 = time.perf_counter()
                    batch = dataset.batch(order[start:start + cfg.batch_frames], dtype=self.dtype)
                    _, loss = train_step(batch, self.model, self.optimizer, step=result.step)
                    result.step += 1
                    wall_ms = (time.perf_counter() - t0) * 1000.0
                    log.write(result.step, loss, cfg.learning_rate, wall_ms)
                    epoch_losses.append(loss)
                    result.losses.append(loss)
                result.epoch = epoch + 1
                logger.info(f"Epoch {result.epoch}/{cfg.epochs}: mean loss {np.mean(epoch_losses):.4f} ({len(epoch_losses)} steps)")
        return result

    def checkpoint(self, result: TrainResult) -> ModelCheckpoint:
        return self.model.to_checkpoint(metadata={
            "train_state": {"epoch": result.epoch, "step": result.step},
            "train_config": self.config.model_dump(mode="json"),
        })
