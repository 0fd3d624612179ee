"""配置管理模块"""

import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import yaml

from src.agents.nash_model import ModelConfig, NashQModel
from src.agents.trainer import TrainConfig
from src.services.market_env import InitialStateConfig, MarketGame, MarketParams
from src.utils.errors import ConfigError

OUTPUT_DIR_ENV = "NASH_DQN_OUTPUT_DIR"

_SECTIONS = {
    "market": MarketParams,
    "train": TrainConfig,
    "model": ModelConfig,
    "init": InitialStateConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """一次运行的全部配置"""
    market: MarketParams = field(default_factory=MarketParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    init: InitialStateConfig = field(default_factory=InitialStateConfig)
    output_dir: str = "runs/default"


# ========== dict <-> dataclass ==========

def _coerce(key: str, default: Any, value: Any) -> Any:
    """按默认值的类型校验并转换单个配置值"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"应为布尔值，得到 {value!r}")
        return value
    if isinstance(default, Enum):
        try:
            return type(default)(value)
        except ValueError:
            options = ", ".join(e.value for e in type(default))
            raise ConfigError(key, f"应为 {options} 之一，得到 {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"应为整数，得到 {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"应为数值，得到 {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(key, f"应为整数列表，得到 {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"应为字符串，得到 {value!r}")
        return value
    return value


def _section_from_dict(name: str, cls, data: Any):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(name, "应为映射")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "未知配置项")
        kwargs[key] = _coerce(f"{name}.{key}", known[key].default, value)
    return cls(**kwargs)


def _section_to_dict(section) -> Dict[str, Any]:
    data = {}
    for f in fields(section):
        value = getattr(section, f.name)
        if isinstance(value, Enum):
            value = value.value
        elif isinstance(value, tuple):
            value = list(value)
        data[f.name] = value
    return data


def run_config_from_dict(data: Optional[Mapping[str, Any]]) -> RunConfig:
    """校验并构造 RunConfig，未知键会报出点分路径"""
    data = data or {}
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "配置文件顶层应为映射")
    for key in data:
        if key not in _SECTIONS and key != "output_dir":
            raise ConfigError(str(key), "未知配置项")
    kwargs = {name: _section_from_dict(name, cls, data.get(name)) for name, cls in _SECTIONS.items()}
    output_dir = data.get("output_dir", RunConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir", "应为非空字符串")
    return RunConfig(output_dir=output_dir, **kwargs)


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    data = {name: _section_to_dict(getattr(cfg, name)) for name in _SECTIONS}
    data["output_dir"] = cfg.output_dir
    return data


def dump_run_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(run_config_to_dict(cfg), sort_keys=False, allow_unicode=True, default_flow_style=False)


# ========== 构造一次运行 ==========

@dataclass
class PreparedRun:
    """按配置构造好的博弈、初始模型与检查点 metadata"""
    game: MarketGame
    model: NashQModel
    metadata: Dict[str, Any]


def prepare_run(cfg: RunConfig, output_dir: Optional[Path] = None) -> PreparedRun:
    """
    构造训练所需的博弈与初始模型

    Args:
        cfg: 运行配置
        output_dir: 给出时先写出解析后的完整配置 config.yaml

    Returns:
        PreparedRun；模型初始化种子由 train.seed 派生
    """
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "config.yaml").write_text(dump_run_config(cfg), encoding="utf-8")

    game = MarketGame(cfg.market, cfg.init)
    model = NashQModel.build(cfg.model, game.scaling, game.n_agents, np.random.default_rng([cfg.train.seed, 1]))
    sections = run_config_to_dict(cfg)
    metadata = {"market": sections["market"], "init": sections["init"],
                "gamma": cfg.train.gamma, "seed": cfg.train.seed}
    return PreparedRun(game, model, metadata)


def load_run_config(path: Path) -> RunConfig:
    return Config(Path(path)).run_config


def resolve_output_dir(cfg: RunConfig) -> Path:
    """环境变量 NASH_DQN_OUTPUT_DIR 优先于配置文件"""
    return Path(os.getenv(OUTPUT_DIR_ENV) or cfg.output_dir)


class Config:
    """配置管理类"""

    DEFAULT_CONFIG_PATH = Path(__file__).parent.parent.parent / "config.yaml"

    def __init__(self, config_path: Optional[Path] = None):
        self.config_path = Path(config_path) if config_path else self.DEFAULT_CONFIG_PATH
        self._config: dict = {}
        self._load_config()

    def _load_config(self):
        """加载配置文件"""
        if self.config_path.exists():
            try:
                with open(self.config_path, "r", encoding="utf-8") as f:
                    self._config = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(str(self.config_path), f"YAML 解析失败：{e}")
        else:
            self._config = {}

    def save_config(self):
        """保存配置文件（保存校验后的完整配置）"""
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, "w", encoding="utf-8") as f:
            f.write(dump_run_config(self.run_config))

    def get(self, key: str, default=None):
        """按点分路径获取原始配置项，例如 get("train.episodes")"""
        node: Any = self._config
        for part in key.split("."):
            if not isinstance(node, Mapping) or part not in node:
                return default
            node = node[part]
        return node

    def set(self, key: str, value):
        """按点分路径设置配置项并保存"""
        parts = key.split(".")
        node = self._config
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        self.save_config()

    @property
    def run_config(self) -> RunConfig:
        return run_config_from_dict(self._config)

    @property
    def market(self) -> MarketParams:
        return self.run_config.market

    @property
    def train(self) -> TrainConfig:
        return self.run_config.train

    @property
    def model(self) -> ModelConfig:
        return self.run_config.model

    @property
    def init(self) -> InitialStateConfig:
        return self.run_config.init

    @property
    def output_dir(self) -> Path:
        return resolve_output_dir(self.run_config)


def game_config_from_metadata(metadata: Mapping[str, Any]) -> Tuple[MarketParams, InitialStateConfig]:
    """从检查点 metadata 恢复市场参数与初始分布"""
    if "market" not in metadata:
        raise ConfigError("metadata.market", "检查点中没有市场参数")
    cfg = run_config_from_dict({"market": metadata["market"], "init": metadata.get("init")})
    return cfg.market, cfg.init
