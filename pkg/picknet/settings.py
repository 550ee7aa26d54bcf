import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from .logger import logger
from .error_handler import InvalidConfigError


FeatureKind = Literal["amplitude", "logmel"]


class _Section(BaseModel):
    # 未知のキーは拒否する
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DspSettings(_Section):
    sample_rate: int = Field(16000, gt=0)
    win_len: int = Field(512, gt=0)
    hop: int = Field(256, gt=0)
    n_mels: int = Field(80, ge=1)
    norm_horizon: float = Field(4.0, gt=0)  # 平均正規化に使う過去の秒数

    @model_validator(mode="after")
    def _check_window(self):
        if self.win_len % 2 != 0 or self.hop * 2 != self.win_len:
            raise ValueError("win_len must be even and hop must equal win_len / 2")
        return self


class SimulationConfig(_Section):
    clean_dir: Optional[str] = None
    out_dir: Optional[str] = None
    noise_dir: Optional[str] = None  # 空なら合成トランジェントを使用
    n_samples: int = Field(10, ge=1)
    seed: int = 0
    snr_range: Tuple[float, float] = (10.0, 20.0)
    transient_level_db: Tuple[float, float] = (-5.0, 5.0)
    inject_transient: bool = True
    max_clip_seconds: float = Field(10.0, gt=0)
    workers: int = Field(1, ge=1)


class TrainConfig(_Section):
    learning_rate: float = Field(1e-3, gt=0)
    batch_frames: int = Field(64, ge=1)
    epochs: int = Field(1, ge=1)
    optimizer: Literal["adam", "sgd"] = "adam"
    seed: int = 0
    feature_kind: FeatureKind = "logmel"
    data_manifest: Optional[str] = None
    precision: Literal["float32", "float64"] = "float32"
    cross_channel: bool = True
    xc_fraction: float = Field(0.125, ge=0, le=1)
    pool_point: Literal["pre_bn", "post_bn"] = "pre_bn"
    max_frames_per_sample: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_sharing(self):
        if self.cross_channel and self.xc_fraction == 0:
            raise ValueError("cross_channel = true needs xc_fraction > 0 (set cross_channel = false instead)")
        return self


class StreamConfig(_Section):
    subsample_n: int = Field(3, ge=1)
    resync_interval: float = Field(30.0, gt=0)
    sync_search: float = Field(0.5, gt=0)
    sync_window: float = Field(10.0, gt=0)
    crossfade: float = Field(0.032, ge=0)
    synchronize: bool = True
    context: Tuple[int, int] = (36, 4)
    feature_kind: FeatureKind = "logmel"
    smoothing: Literal["none", "ema"] = "none"
    ema_alpha: float = Field(0.5, gt=0, le=1)
    selector: Literal["picknet", "max_energy"] = "picknet"


class EvalConfig(_Section):
    energy_gate_dbfs: float = -40.0


class BenchConfig(_Section):
    m_list: List[int] = [2, 4, 8]
    n_frames: int = Field(10000, ge=1)
    subsample_n: int = Field(3, ge=1)


class Settings(_Section):
    dsp: DspSettings = DspSettings()
    simulation: SimulationConfig = SimulationConfig()
    train: TrainConfig = TrainConfig()
    stream: StreamConfig = StreamConfig()
    eval: EvalConfig = EvalConfig()
    bench: BenchConfig = BenchConfig()


def _read_config_file(config_path: Path) -> dict:
    if config_path.suffix == ".toml":
        with open(config_path, "rb") as f:
            return tomllib.load(f)
    with open(config_path, "r", encoding="utf-8") as f:
        return json.load(f)


def load_settings(path: Optional[str] = None) -> Settings:
    """設定ファイル (TOML または JSON) を読み込む

    ファイルが無い場合はデフォルト値を返す。内容が不正な場合は InvalidConfigError。
    """
    if path is None:
        return Settings()

    config_path = Path(path)
    if not config_path.exists():
        logger.warning(f"Config file {path} not found. Using defaults.")
        return Settings()

    try:
        data = _read_config_file(config_path)
        settings = Settings(**data)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, ValidationError, TypeError) as e:
        raise InvalidConfigError(f"Failed to load settings from {path}: {e}") from e

    logger.info(f"Settings loaded from {path}")
    return settings


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(settings: Settings, overrides: List[str]) -> Settings:
    """"section.key=value" 形式の上書きを適用した新しい Settings を返す"""
    data = settings.model_dump()
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"Override must look like section.key=value: {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in data:
            raise InvalidConfigError(f"Unknown config key: {key!r}")
        section, field = parts
        if field not in data[section]:
            raise InvalidConfigError(f"Unknown config key: {key!r}")
        data[section][field] = _parse_value(raw.strip())

    try:
        return Settings(**data)
    except ValidationError as e:
        raise InvalidConfigError(f"Invalid override: {e}") from e


def save_settings(settings: Settings, path: str) -> bool:
    """有効な設定を JSON として保存する

    Returns:
        成功した場合は True、失敗した場合は False
    """
    config_path = Path(path)
    try:
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, "w", encoding="utf-8") as f:
            json.dump(settings.model_dump(), f, ensure_ascii=False, indent=2)
        logger.info(f"Settings saved to {path}")
        return True
    except OSError as e:
        logger.error(f"Failed to save settings: {e}")
        return False
