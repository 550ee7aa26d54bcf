import threading
import time
from typing import Callable, Optional
import numpy as np
from .logger import logger
from .error_handler import InvalidConfigError, InvalidStateError
from .layers import MacCounter
from .model import ModelCheckpoint, PickNet


class ChannelSelector:
    """チェックポイントの PickNet でフレームごとのチャネル事後確率を求める

    evaluations はモデルを実際に評価した回数（間引き時の評価回数の確認に使う）。
    """

    name = "picknet"

    def __init__(self, checkpoint: ModelCheckpoint, dtype=np.float32, count_macs: bool = False):
        self.checkpoint = checkpoint
        self.dtype = dtype
        self.counter = MacCounter() if count_macs else None
        self.evaluations = 0
        self.eval_seconds = 0.0
        self._model: Optional[PickNet] = None
        self._warmup_done = False
        self._warmup_lock = threading.Lock()

    @property
    def feature_kind(self) -> str:
        return self.checkpoint.config.feature_kind

    @property
    def feature_dim(self) -> int:
        return self.checkpoint.config.input_shape[1]

    def check_features(self, feature_kind: str, feature_dim: int):
        if feature_kind != self.feature_kind or feature_dim != self.feature_dim:
            raise InvalidConfigError(
                f"Checkpoint expects {self.feature_kind} features of dim {self.feature_dim}, "
                f"pipeline produces {feature_kind} of dim {feature_dim}")

    def warmup(self, n_channels: int = 2) -> bool:
        """モデルを構築し、ダミー入力で 1 回推論して初回評価の遅延を無くす"""
        with self._warmup_lock:
            if self._warmup_done:
                logger.debug("Warmup already done, skipping")
                return True

            start_time = time.time()
            self._model = PickNet.from_checkpoint(self.checkpoint, dtype=self.dtype)
            dummy = np.zeros((1, n_channels) + tuple(self.checkpoint.config.input_shape), dtype=self.dtype)
            self._model.forward(dummy, mode="eval")
            self._warmup_done = True
            logger.info(f"PickNet warmup completed in {time.time() - start_time:.3f}s "
                        f"({self.feature_kind}, dim {self.feature_dim})")
            return True

    def evaluate(self, patches: np.ndarray, spectra: Optional[np.ndarray] = None, frame: int = 0) -> np.ndarray:
        """(M, 41, D) のパッチから長さ M の事後確率を返す"""
        if not self._warmup_done:
            self.warmup(patches.shape[0])
        if self._model is None:
            raise InvalidStateError("Selector model not loaded")
        t0 = time.perf_counter()
        p, _ = self._model.forward(patches[None].astype(self.dtype, copy=False), mode="eval", counter=self.counter)
        self.eval_seconds += time.perf_counter() - t0
        self.evaluations += 1
        return p[0].astype(np.float64)

    def cleanup(self):
        """モデルを解放する（再び evaluate すると warmup からやり直す）"""
        with self._warmup_lock:
            if self._model is not None:
                logger.info(f"Releasing selector model after {self.evaluations} evaluations")
            self._model = None
            self._warmup_done = False


def max_energy_posteriors(spectra: np.ndarray) -> np.ndarray:
    """フレームエネルギーが最大のチャネルに 1 を立てる（同点は小さい番号）"""
    energy = np.sum(np.abs(spectra) ** 2, axis=-1)
    p = np.zeros(energy.shape[0])
    p[int(np.argmax(energy))] = 1.0
    return p


class MaxEnergySelector:
    """学習不要のベースライン: 最もエネルギーの大きいチャネルを選ぶ"""

    name = "max_energy"

    def __init__(self):
        self.evaluations = 0
        self.eval_seconds = 0.0

    def check_features(self, feature_kind: str, feature_dim: int):
        pass

    def warmup(self, n_channels: int = 2) -> bool:
        return True

    def evaluate(self, patches: np.ndarray, spectra: np.ndarray, frame: int = 0) -> np.ndarray:
        self.evaluations += 1
        return max_energy_posteriors(spectra)

    def cleanup(self):
        pass


class OracleSelector:
    """外部から与えた事後確率をそのまま返す（評価用）"""

    name = "oracle"

    def __init__(self, posterior_fn: Callable[[int, int], np.ndarray]):
        self.posterior_fn = posterior_fn
        self.evaluations = 0
        self.eval_seconds = 0.0

    def check_features(self, feature_kind: str, feature_dim: int):
        pass

    def warmup(self, n_channels: int = 2) -> bool:
        return True

    def evaluate(self, patches: np.ndarray, spectra: np.ndarray, frame: int = 0) -> np.ndarray:
        self.evaluations += 1
        return np.asarray(self.posterior_fn(frame, spectra.shape[0]), dtype=np.float64)

    def cleanup(self):
        pass
