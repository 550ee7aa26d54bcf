"""PickNet: チャネル共有の畳み込みスタック + クロスチャネル層 + チャネル softmax

入力は (B, M, 41, D) の特徴パッチ。B はフレーム数、M はチャネル（デバイス）数。
パラメータは全チャネルで共有され、クロスチャネル層の一部の特徴マップだけが
チャネル方向の平均でやり取りされる。M は学習時と推論時で異なってよい。
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple
import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from .error_handler import InvalidConfigError, InvalidInputError, InvalidStateError
from .dsp import DELTA_L, DELTA_R, FeaturePatch, feature_dim
from . import layers as L

FORMAT_VERSION = 1
PATCH_HEIGHT = DELTA_L + 1 + DELTA_R


class LayerSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: Literal["conv3x3", "batchnorm", "relu", "maxpool2x2", "flatten", "dense"]
    out_channels: Optional[int] = None
    out_units: Optional[int] = None
    cross_channel: bool = False
    xc_fraction: float = 0.125

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "conv3x3" and not (self.out_channels and self.out_channels > 0):
            raise ValueError("conv3x3 needs a positive out_channels")
        if self.kind == "dense" and not (self.out_units and self.out_units > 0):
            raise ValueError("dense needs a positive out_units")
        if self.cross_channel:
            if self.kind != "conv3x3":
                raise ValueError("cross_channel is only allowed on conv3x3 layers")
            k = self.xc_fraction * self.out_channels
            if not 0 <= self.xc_fraction <= 1 or abs(k - round(k)) > 1e-9:
                raise ValueError(f"xc_fraction * out_channels must be an integer (got {k})")
            if round(k) < 1:
                raise ValueError("a cross-channel layer needs at least one shared kernel")
        return self

    @property
    def n_shared(self) -> int:
        if not self.cross_channel:
            return 0
        return int(round(self.xc_fraction * self.out_channels))


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: List[LayerSpec]
    input_shape: Tuple[int, int] = (PATCH_HEIGHT, 80)
    feature_kind: Literal["amplitude", "logmel"] = "logmel"
    pool_point: Literal["pre_bn", "post_bn"] = "pre_bn"

    @model_validator(mode="after")
    def _check(self):
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].out_units != 1:
            raise ValueError("the final layer must be dense with out_units = 1")
        _infer_shapes(self)
        return self

    @property
    def has_cross_channel(self) -> bool:
        return any(spec.n_shared > 0 for spec in self.layers)


def _infer_shapes(config: ModelConfig) -> List[tuple]:
    """各層の出力形状 (1 チャネル分) を求める。矛盾があれば ValueError"""
    shape: tuple = (1,) + tuple(config.input_shape)
    shapes = []
    for i, spec in enumerate(config.layers):
        if spec.kind == "conv3x3":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv3x3 after flatten")
            shape = (spec.out_channels,) + shape[1:]
        elif spec.kind == "maxpool2x2":
            if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                raise ValueError(f"layer {i}: maxpool2x2 on shape {shape}")
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"layer {i}: dense needs a flatten first")
            shape = (spec.out_units,)
        shapes.append(shape)
    return shapes


def default_config(feature_kind: str = "logmel", input_dim: Optional[int] = None,
                   cross_channel: bool = True, xc_fraction: float = 0.125,
                   pool_point: str = "pre_bn") -> ModelConfig:
    """既定のアーキテクチャ

    conv(16) -> BN -> ReLU -> pool -> conv(32, xc) -> BN -> ReLU -> pool
    -> conv(32, xc) -> BN -> ReLU -> pool -> flatten -> dense(64) -> ReLU -> dense(1)
    """
    if input_dim is None:
        input_dim = feature_dim(feature_kind)
    xc = dict(cross_channel=cross_channel, xc_fraction=xc_fraction)
    specs = [
        LayerSpec(kind="conv3x3", out_channels=16),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2x2"),
        LayerSpec(kind="conv3x3", out_channels=32, **xc),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2x2"),
        LayerSpec(kind="conv3x3", out_channels=32, **xc),
        LayerSpec(kind="batchnorm"),
        LayerSpec(kind="relu"),
        LayerSpec(kind="maxpool2x2"),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", out_units=64),
        LayerSpec(kind="relu"),
        LayerSpec(kind="dense", out_units=1),
    ]
    return ModelConfig(layers=specs, input_shape=(PATCH_HEIGHT, input_dim),
                       feature_kind=feature_kind, pool_point=pool_point)


def param_shapes(config: ModelConfig) -> Dict[str, tuple]:
    """パラメータ名 -> 形状。名前は "layers.<index>.<name>" """
    shapes = {}
    in_shape: tuple = (1,) + tuple(config.input_shape)
    for i, (spec, out_shape) in enumerate(zip(config.layers, _infer_shapes(config))):
        prefix = f"layers.{i}"
        if spec.kind == "conv3x3":
            shapes[f"{prefix}.kernel"] = (spec.out_channels, in_shape[0], 3, 3)
            shapes[f"{prefix}.bias"] = (spec.out_channels,)
        elif spec.kind == "batchnorm":
            c = (in_shape[0],)
            for name in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{prefix}.{name}"] = c
        elif spec.kind == "dense":
            shapes[f"{prefix}.weight"] = (spec.out_units, in_shape[0])
            shapes[f"{prefix}.bias"] = (spec.out_units,)
        in_shape = out_shape
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> Dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in) でカーネル/重みを、γ=1, β=0 で BN を初期化する"""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".kernel", ".weight")):
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(("gamma", "running_var")):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


@dataclass(frozen=True)
class ChannelPosteriors:
    p: np.ndarray
    frame: int = 0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 1 or len(p) < 1:
            raise InvalidInputError(f"Posteriors must be a non-empty vector, got shape {p.shape}")
        if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0) or np.any(p > 1):
            raise InvalidInputError(f"Posteriors must lie on the simplex: {p}")
        object.__setattr__(self, "p", p)

    @property
    def n_channels(self) -> int:
        return len(self.p)

    def argmax(self) -> int:
        return int(np.argmax(self.p))


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    format_version: int = FORMAT_VERSION
    metadata: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ForwardCache:
    mode: str
    version: int
    batch_shape: Tuple[int, int]
    p: np.ndarray
    ops: List[tuple]
    bn_updates: Dict[int, tuple]


def _build_plan(config: ModelConfig) -> List[Tuple[str, int]]:
    plan = []
    pending_pool = None
    n = len(config.layers)
    for i, spec in enumerate(config.layers):
        if spec.kind == "conv3x3":
            plan.append(("conv", i))
            if spec.n_shared > 0:
                post_bn = config.pool_point == "post_bn" and i + 1 < n and config.layers[i + 1].kind == "batchnorm"
                if post_bn:
                    pending_pool = i
                else:
                    plan.append(("xc_pool", i))
        elif spec.kind == "batchnorm":
            plan.append(("bn", i))
            if pending_pool is not None:
                plan.append(("xc_pool", pending_pool))
                pending_pool = None
        elif spec.kind == "relu":
            plan.append(("relu", i))
        elif spec.kind == "maxpool2x2":
            plan.append(("maxpool", i))
        elif spec.kind == "flatten":
            plan.append(("flatten", i))
        elif spec.kind == "dense":
            plan.append(("dense", i))
    return plan


class PickNet:
    """パラメータを保持し、順伝播・逆伝播を行うモデル本体"""

    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None,
                 dtype=np.float64, seed: int = 0):
        self.config = config
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_params(config, seed=seed, dtype=self.dtype)
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise InvalidConfigError(f"Parameter set does not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise InvalidConfigError(f"Parameter {name} has shape {params[name].shape}, expected {shape}")
        self.params = {name: np.array(value, dtype=self.dtype) for name, value in params.items()}
        self.plan = _build_plan(config)
        self.version = 0

    @classmethod
    def from_checkpoint(cls, checkpoint: ModelCheckpoint, dtype=np.float64) -> "PickNet":
        return cls(checkpoint.config, checkpoint.tensors, dtype=dtype)

    def to_checkpoint(self, metadata: Optional[Dict[str, Any]] = None) -> ModelCheckpoint:
        tensors = {name: value.astype(np.float32) for name, value in self.params.items()}
        return ModelCheckpoint(self.config, tensors, metadata=dict(metadata or {}))

    def trainable_names(self) -> List[str]:
        return [name for name in self.params if is_trainable(name)]

    def _p(self, i: int, name: str) -> np.ndarray:
        return self.params[f"layers.{i}.{name}"]

    def _prepare(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise InvalidInputError(f"Expected (B, M, H, D) input, got shape {x.shape}")
        if x.shape[1] < 1:
            raise InvalidInputError("At least one channel is required")
        if tuple(x.shape[2:]) != tuple(self.config.input_shape):
            raise InvalidConfigError(f"Input patches {x.shape[2:]} do not match model input {self.config.input_shape}")
        return x

    def forward(self, x, mode: str = "eval", counter: Optional[L.MacCounter] = None,
                frozen: Optional[ForwardCache] = None) -> Tuple[np.ndarray, ForwardCache]:
        """順伝播

        Args:
            x: (B, M, H, D) または (M, H, D) のパッチ
            mode: "train"（バッチ統計）または "eval"（移動統計）
            frozen: 指定した場合、その ReLU マスクと最大値プーリングの勝者を再利用する

        Returns:
            (B, M) の事後確率と逆伝播用キャッシュ
        """
        if mode not in ("train", "eval"):
            raise InvalidConfigError(f"Unknown mode: {mode}")
        x = self._prepare(x)
        B, M = x.shape[:2]
        h = x.reshape(B * M, 1, *x.shape[2:])
        ops = []
        bn_updates = {}

        for k, (op, i) in enumerate(self.plan):
            frozen_data = frozen.ops[k][2] if frozen is not None else None
            if op == "conv":
                ops.append((op, i, h))
                h = L.conv3x3_forward(h, self._p(i, "kernel"), self._p(i, "bias"), counter)
            elif op == "xc_pool":
                n_shared = self.config.layers[i].n_shared
                ops.append((op, i, n_shared))
                h = L.channel_mean_pool_forward(h.reshape(B, M, *h.shape[1:]), n_shared, counter)
                h = h.reshape(B * M, *h.shape[2:])
            elif op == "bn":
                h, cache, updated = L.batch_norm_forward(
                    h, self._p(i, "gamma"), self._p(i, "beta"),
                    self._p(i, "running_mean"), self._p(i, "running_var"), mode, counter=counter)
                ops.append((op, i, cache))
                if updated is not None:
                    bn_updates[i] = updated
            elif op == "relu":
                h, mask = L.relu_forward(h, frozen_data)
                ops.append((op, i, mask))
            elif op == "maxpool":
                h, cache = L.maxpool2x2_forward(h, frozen_data[0] if frozen_data is not None else None)
                ops.append((op, i, cache))
            elif op == "flatten":
                ops.append((op, i, h.shape))
                h = h.reshape(h.shape[0], -1)
            elif op == "dense":
                ops.append((op, i, h))
                h = L.dense_forward(h, self._p(i, "weight"), self._p(i, "bias"), counter)

        logits = h.reshape(B, M)
        p = L.softmax(logits, axis=1)
        if counter is not None:
            counter.add("softmax", B * M)
        return p, ForwardCache(mode, self.version, (B, M), p, ops, bn_updates)

    def backward(self, cache: Optional[ForwardCache], d_p: np.ndarray) -> Dict[str, np.ndarray]:
        """dL/dp から全学習パラメータの勾配を求める"""
        if cache is None:
            raise InvalidStateError("backward called without a forward cache")
        if cache.version != self.version:
            raise InvalidStateError(f"Stale forward cache (version {cache.version}, model version {self.version})")
        if cache.mode != "train":
            raise InvalidStateError("backward requires a forward pass in train mode")
        d_p = np.asarray(d_p, dtype=self.dtype).reshape(cache.batch_shape)
        B, M = cache.batch_shape

        grads = {name: np.zeros_like(self.params[name]) for name in self.trainable_names()}
        g = L.softmax_backward(cache.p, d_p, axis=1).reshape(B * M, 1)

        for op, i, data in reversed(cache.ops):
            prefix = f"layers.{i}"
            if op == "dense":
                g, dw, db = L.dense_backward(g, data, self._p(i, "weight"))
                grads[f"{prefix}.weight"] += dw
                grads[f"{prefix}.bias"] += db
            elif op == "flatten":
                g = g.reshape(data)
            elif op == "maxpool":
                g = L.maxpool2x2_backward(g, data)
            elif op == "relu":
                g = L.relu_backward(g, data)
            elif op == "bn":
                g, dgamma, dbeta = L.batch_norm_backward(g, data)
                grads[f"{prefix}.gamma"] += dgamma
                grads[f"{prefix}.beta"] += dbeta
            elif op == "xc_pool":
                g = L.channel_mean_pool_backward(g.reshape(B, M, *g.shape[1:]), data)
                g = g.reshape(B * M, *g.shape[2:])
            elif op == "conv":
                g, dk, db = L.conv3x3_backward(g, data, self._p(i, "kernel"))
                grads[f"{prefix}.kernel"] += dk
                grads[f"{prefix}.bias"] += db
        return grads

    def commit_batch_stats(self, cache: ForwardCache):
        """学習時の順伝播で得た BN の移動統計を反映する"""
        for i, (mean, var) in cache.bn_updates.items():
            self.params[f"layers.{i}.running_mean"] = mean.astype(self.dtype)
            self.params[f"layers.{i}.running_var"] = var.astype(self.dtype)

    def bump_version(self):
        self.version += 1

    def posteriors(self, patches: Sequence, frame: int = 0, counter: Optional[L.MacCounter] = None) -> ChannelPosteriors:
        """1 フレーム分の推論（eval モード）"""
        p, _ = self.forward(patches_to_array(patches), mode="eval", counter=counter)
        return ChannelPosteriors(p[0], frame)


def patches_to_array(patches: Sequence) -> np.ndarray:
    if isinstance(patches, np.ndarray):
        return patches
    if len(patches) == 0:
        raise InvalidInputError("At least one channel patch is required")
    values = [pt.values if isinstance(pt, FeaturePatch) else np.asarray(pt) for pt in patches]
    return np.stack(values)


def picknet_forward(patches: Sequence, checkpoint: ModelCheckpoint, mode: str = "eval",
                    dtype=np.float64) -> Tuple[ChannelPosteriors, ForwardCache]:
    """M 個のパッチから 1 フレームのチャネル事後確率を求める"""
    model = PickNet.from_checkpoint(checkpoint, dtype=dtype)
    frame = patches[0].center_index if len(patches) and isinstance(patches[0], FeaturePatch) else 0
    p, cache = model.forward(patches_to_array(patches), mode=mode)
    return ChannelPosteriors(p[0], frame), cache


def mac_count(config: ModelConfig, n_channels: int, n_frames: int = 1) -> int:
    """形状から解析的に求めた順伝播の積和演算回数"""
    B, M = n_frames, n_channels
    total = 0
    shape: tuple = (1,) + tuple(config.input_shape)
    shapes = _infer_shapes(config)
    for op, i in _build_plan(config):
        spec = config.layers[i]
        out_shape = shapes[i]
        in_shape = shapes[i - 1] if i > 0 else shape
        if op == "conv":
            total += B * M * out_shape[1] * out_shape[2] * out_shape[0] * in_shape[0] * 9
        elif op == "xc_pool":
            plane = out_shape[1] * out_shape[2]
            total += B * M * spec.n_shared * plane + B * spec.n_shared * plane
        elif op == "bn":
            total += B * M * int(np.prod(in_shape))
        elif op == "dense":
            total += B * M * in_shape[0] * out_shape[0]
    return total + B * M


def picknet_backward(model: PickNet, cache: Optional[ForwardCache], d_posteriors: np.ndarray) -> Dict[str, np.ndarray]:
    return model.backward(cache, d_posteriors)
