"""测试配置文件"""

import os
import sys

import numpy as np
import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.agents.nash_model import ModelConfig, NashQModel
from src.agents.trainer import TrainConfig
from src.services.market_env import InitialStateConfig, MarketGame, MarketParams


@pytest.fixture
def rng():
    """固定种子的随机数生成器"""
    return np.random.default_rng(1234)


@pytest.fixture
def small_market():
    """3 个交易者、4 步的小市场"""
    return MarketParams(horizon_T=4, n_agents=3, q_bound=20.0)


@pytest.fixture
def small_game(small_market):
    return MarketGame(small_market, InitialStateConfig())


@pytest.fixture
def small_model_config():
    return ModelConfig(value_hidden=(8, 8), phi_hidden=(6,), main_hidden=(8, 8), embed_dim=4)


@pytest.fixture
def small_model(small_game, small_model_config):
    return NashQModel.build(small_model_config, small_game.scaling, small_game.n_agents, np.random.default_rng(7))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(episodes=3, minibatch_size=8, buffer_capacity=50, eval_every=2, seed=11)


@pytest.fixture
def output_dir(tmp_path):
    """临时输出目录"""
    return tmp_path / "run"
