"""PickNet 用の小さなテンソル演算エンジン（順伝播と解析的な逆伝播）

特徴マップは (N, C, H, W) の numpy 配列。N はフレーム数 x チャネル数。
"""
from collections import defaultdict
from typing import List, Optional, Tuple
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from .error_handler import InvalidConfigError, InvalidInputError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class MacCounter:
    """積和演算回数のカウンタ（壁時計ではなく演算量でコストを測る）"""

    def __init__(self):
        self.counts = defaultdict(int)

    def add(self, kind: str, n: int):
        self.counts[kind] += int(n)

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def _count(counter: Optional[MacCounter], kind: str, n: int):
    if counter is not None:
        counter.add(kind, n)


# ---------------------------------------------------------------------------
# 3x3 convolution ("same" zero padding, stride 1)
# ---------------------------------------------------------------------------

def _windows(x: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3


def conv3x3_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray, counter: Optional[MacCounter] = None) -> np.ndarray:
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise InvalidConfigError(f"conv3x3 shape mismatch: input {x.shape}, kernels {kernels.shape}")
    if kernels.shape[1] != x.shape[1] or bias.shape != (kernels.shape[0],):
        raise InvalidConfigError(f"conv3x3 shape mismatch: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}")

    N, C_in, H, W = x.shape
    out = np.tensordot(_windows(x), kernels, axes=([1, 4, 5], [1, 2, 3]))  # N, H, W, C_out
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    _count(counter, "conv3x3", N * H * W * kernels.shape[0] * C_in * 9)
    return out[0] if single else out


def conv3x3_backward(dout: np.ndarray, x: np.ndarray, kernels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dkernels = np.tensordot(dout, _windows(x), axes=([0, 2, 3], [0, 2, 3]))  # C_out, C_in, 3, 3
    dbias = dout.sum(axis=(0, 2, 3))
    flipped = kernels[:, :, ::-1, ::-1]
    dx = np.tensordot(_windows(dout), flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return dx, dkernels, dbias


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def _bn_axes(x: np.ndarray) -> tuple:
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x: np.ndarray) -> tuple:
    return (1, -1) + (1,) * (x.ndim - 2)


def batch_norm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                       running_mean: np.ndarray, running_var: np.ndarray, mode: str,
                       eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                       counter: Optional[MacCounter] = None):
    """バッチ正規化

    Returns:
        (出力, 逆伝播用キャッシュ, 更新後の (running_mean, running_var) または None)
    """
    axes = _bn_axes(x)
    shape = _bn_shape(x)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        updated = (momentum * running_mean + (1.0 - momentum) * mean,
                   momentum * running_var + (1.0 - momentum) * var)
    elif mode == "eval":
        mean, var = running_mean, running_var
        updated = None
    else:
        raise InvalidConfigError(f"Unknown batch-norm mode: {mode}")

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    _count(counter, "batchnorm", x.size)
    return out, (x_hat, inv_std, gamma, mode), updated


def batch_norm_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, inv_std, gamma, mode = cache
    axes = _bn_axes(dout)
    shape = _bn_shape(dout)
    dgamma = (dout * x_hat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dx_hat = dout * gamma.reshape(shape)

    if mode == "eval":
        return dx_hat * inv_std.reshape(shape), dgamma, dbeta

    n = dout.size // dout.shape[1]
    dx = (inv_std.reshape(shape) / n) * (
        n * dx_hat
        - dx_hat.sum(axis=axes).reshape(shape)
        - x_hat * (dx_hat * x_hat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# ReLU / max pooling / dense
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray, mask: Optional[np.ndarray] = None):
    # mask を与えると活性化パターンを固定する（勾配チェック用）
    if mask is None:
        mask = x > 0
    return x * mask, mask


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def maxpool2x2_forward(x: np.ndarray, winners: Optional[np.ndarray] = None):
    """2x2 最大値プーリング（奇数の端は切り捨て）"""
    N, C, H, W = x.shape
    H2, W2 = H // 2, W // 2
    if H2 == 0 or W2 == 0:
        raise InvalidConfigError(f"maxpool2x2 needs spatial size >= 2, got {(H, W)}")
    blocks = x[:, :, :H2 * 2, :W2 * 2].reshape(N, C, H2, 2, W2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2, W2, 4)
    if winners is None:
        winners = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winners[..., None], axis=-1)[..., 0]
    return out, (winners, x.shape)


def maxpool2x2_backward(dout: np.ndarray, cache) -> np.ndarray:
    winners, shape = cache
    N, C, H, W = shape
    H2, W2 = H // 2, W // 2
    dblocks = np.zeros((N, C, H2, W2, 4), dtype=dout.dtype)
    np.put_along_axis(dblocks, winners[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :H2 * 2, :W2 * 2] = dblocks.reshape(N, C, H2, W2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H2 * 2, W2 * 2)
    return dx


def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, counter: Optional[MacCounter] = None) -> np.ndarray:
    if x.shape[1] != weight.shape[1]:
        raise InvalidConfigError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    _count(counter, "dense", x.shape[0] * weight.shape[0] * weight.shape[1])
    return x @ weight.T + bias


def dense_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# Cross-channel mean pooling
# ---------------------------------------------------------------------------

def channel_mean_pool_forward(y: np.ndarray, n_shared: int, counter: Optional[MacCounter] = None) -> np.ndarray:
    """(B, M, C, H, W) の末尾 n_shared 枚の特徴マップを全チャネルで平均し、各チャネルに戻す"""
    if n_shared == 0:
        return y
    B, M, C = y.shape[:3]
    local = y[:, :, :C - n_shared]
    shared = y[:, :, C - n_shared:].mean(axis=1, keepdims=True)
    plane = int(np.prod(y.shape[3:]))
    _count(counter, "xc_pool", B * M * n_shared * plane + B * n_shared * plane)
    return np.concatenate([local, np.broadcast_to(shared, (B, M) + shared.shape[2:])], axis=2)


def channel_mean_pool_backward(dout: np.ndarray, n_shared: int) -> np.ndarray:
    # 共有マップの勾配は 1/M ずつ全チャネルのプーリング前マップに配られる
    if n_shared == 0:
        return dout
    M = dout.shape[1]
    C = dout.shape[2]
    dy = dout.copy()
    dy[:, :, C - n_shared:] = dout[:, :, C - n_shared:].sum(axis=1, keepdims=True) / M
    return dy


def cross_channel_layer(inputs: List[np.ndarray], kernels: np.ndarray, bias: np.ndarray,
                        n_shared: int, counter: Optional[MacCounter] = None) -> List[np.ndarray]:
    """M 個の (C_in, H, W) 入力に共有カーネルの畳み込みを行い、末尾 n_shared 枚を平均共有する"""
    if len(inputs) == 0:
        raise InvalidInputError("cross_channel_layer needs at least one input channel")
    shape = inputs[0].shape
    if any(inp.shape != shape for inp in inputs):
        raise InvalidConfigError("All cross-channel inputs must have the same shape")
    if not 0 <= n_shared <= kernels.shape[0]:
        raise InvalidConfigError(f"n_shared={n_shared} outside [0, {kernels.shape[0]}]")

    y = conv3x3_forward(np.stack(inputs), kernels, bias, counter)
    pooled = channel_mean_pool_forward(y[None], n_shared, counter)[0]
    return [pooled[m] for m in range(len(inputs))]


# ---------------------------------------------------------------------------
# Softmax over channels
# ---------------------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (p * dp).sum(axis=axis, keepdims=True))
