"""
回放缓存与训练器测试
"""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from src.agents.nash_model import NashQModel
import src.agents.trainer as trainer_module
from src.agents.replay import ReplayBuffer
from src.agents.trainer import (
    TrainConfig,
    batch_loss,
    bellman_loss,
    explore_action,
    loss_and_grads,
    sample_loss,
    train,
    update_step,
)
from src.nn.network import ParameterSet, Partition, make_optimizer
from src.services.market_env import JointAction, MarketGame, MarketParams, MarketState, Transition
from src.utils.config import RunConfig
from src.utils.errors import ConfigError, NumericalError, UsageError
from src.utils.run_log import RunLogger


def _transitions(game, count, seed=0):
    """随机策略产生的转移，包含终止与非终止"""
    rng = np.random.default_rng(seed)

    def policy(state):
        return JointAction.from_array(rng.normal(0.0, 4.0, state.n_agents))

    out = []
    while len(out) < count:
        out.extend(game.rollout(policy, rng))
    return out[:count]


def _randomize(model, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    for name in model.params.names():
        model.params[name][...] += rng.normal(0.0, scale, model.params[name].shape)
    return model


def _fd_grad(model, loss_fn, eps=1e-6):
    base = model.params.flat().copy()
    grad = np.zeros_like(base)
    for k in range(base.size):
        values = []
        for sign in (1.0, -1.0):
            shifted = base.copy()
            shifted[k] += sign * eps
            model.params.load_flat(shifted)
            values.append(loss_fn())
        grad[k] = (values[0] - values[1]) / (2 * eps)
    model.params.load_flat(base)
    return grad


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


class TestReplayBuffer:
    """有界 FIFO 回放缓存"""

    def test_fifo_eviction(self, small_game):
        """TR-001: 满了以后挤掉最早的转移"""
        items = _transitions(small_game, 5)
        buffer = ReplayBuffer(3)
        for tr in items:
            buffer.push(tr)
        assert len(buffer) == 3
        assert list(buffer) == items[2:]

    def test_sample_without_replacement(self, small_game):
        """TR-002: 同一批次内无放回"""
        items = _transitions(small_game, 10)
        buffer = ReplayBuffer(20)
        for tr in items:
            buffer.push(tr)
        batch = buffer.sample(10, np.random.default_rng(0))
        assert len(batch) == 10
        assert len({id(tr) for tr in batch}) == 10
        assert len(buffer.sample(50, np.random.default_rng(0))) == 10

    def test_sample_empty(self):
        """TR-003: 空缓存抽样为空列表"""
        assert ReplayBuffer(4).sample(3, np.random.default_rng(0)) == []

    def test_invalid_capacity(self):
        """TR-004: 容量必须 >= 1"""
        with pytest.raises(UsageError):
            ReplayBuffer(0)


class TestLoss:
    """Nash-Bellman 损失"""

    def test_terminal_example(self):
        """TR-005: N=1 终止转移 (2 − 1.8 − 1)² = 0.64"""
        loss = bellman_loss(np.array([[2.0]]), np.array([[-1.8]]), np.array([[1.0]]),
                            np.array([[123.0]]), 1.0, np.array([True]))
        assert loss[0] == pytest.approx(0.64, abs=1e-12)

    def test_empty_batch(self, small_model):
        """TR-006: 空批次"""
        with pytest.raises(UsageError):
            loss_and_grads([], small_model, 1.0)

    def test_full_gradient_matches_finite_difference(self, small_game, small_model):
        """TR-007: 全梯度（含 V̂(x′) 项）与中心差分一致"""
        model = _randomize(small_model, 0)
        batch = _transitions(small_game, 12, seed=1)
        assert not all(tr.terminal for tr in batch)
        _, grads = loss_and_grads(batch, model, 0.9, Partition.ALL)
        analytic = model.params.flatten_grads(grads)
        numeric = _fd_grad(model, lambda: batch_loss(batch, model, 0.9))
        assert _rel(analytic, numeric) < 1e-4

    def test_partition_gradients(self, small_game, small_model):
        """TR-008: 分区梯度只含本分区张量，合起来等于全梯度"""
        model = _randomize(small_model, 1)
        batch = _transitions(small_game, 10, seed=2)
        _, g_value = loss_and_grads(batch, model, 1.0, Partition.VALUE)
        _, g_adv = loss_and_grads(batch, model, 1.0, Partition.ADVANTAGE)
        _, g_all = loss_and_grads(batch, model, 1.0, Partition.ALL)
        assert set(g_value) == set(model.params.names(Partition.VALUE))
        assert set(g_adv) == set(model.params.names(Partition.ADVANTAGE))
        for name in g_all:
            expected = g_value[name] if name in g_value else g_adv[name]
            np.testing.assert_allclose(g_all[name], expected, rtol=1e-12, atol=1e-14)

    def test_semi_gradient_and_target(self, small_game, small_model):
        """TR-009: 半梯度不对 V̂(x′) 求导；参数相同的目标副本给出相同结果"""
        model = _randomize(small_model, 2)
        batch = _transitions(small_game, 10, seed=3)
        _, full = loss_and_grads(batch, model, 1.0, Partition.VALUE)
        _, semi = loss_and_grads(batch, model, 1.0, Partition.VALUE, semi_gradient=True)
        _, target = loss_and_grads(batch, model, 1.0, Partition.VALUE, target=model.copy())
        assert any(not np.allclose(full[n], semi[n]) for n in full)
        for name in semi:
            np.testing.assert_allclose(target[name], semi[name], rtol=1e-12, atol=1e-14)
        _, adv_full = loss_and_grads(batch, model, 1.0, Partition.ADVANTAGE)
        _, adv_semi = loss_and_grads(batch, model, 1.0, Partition.ADVANTAGE, semi_gradient=True)
        for name in adv_full:
            assert np.array_equal(adv_full[name], adv_semi[name])

    def test_alternating_steps_monotone(self, small_game, small_model):
        """TR-010: 固定小批量上交替优化 100 轮（lr=1e-4），每一步损失上升不超过 1e-9"""
        model = _randomize(small_model, 3)
        batch = _transitions(small_game, 16, seed=4)
        cfg = TrainConfig(lr_value=1e-4, lr_advantage=1e-4, grad_clip=0.0)
        optimizer = make_optimizer("sgd")
        start = previous = batch_loss(batch, model, 1.0)
        for _ in range(100):
            for partition in (Partition.VALUE, Partition.ADVANTAGE):
                update_step(batch, model, cfg, partition, optimizer)
                current = batch_loss(batch, model, 1.0)
                assert current <= previous + 1e-9
                previous = current
        assert previous < start

    def test_sample_loss_is_single_batch(self, small_game, small_model):
        """TR-011: sample_loss 等于单元素批次的损失"""
        tr = _transitions(small_game, 1, seed=5)[0]
        assert sample_loss(tr, small_model, 1.0) == batch_loss([tr], small_model, 1.0)


class TestTrainConfig:
    """训练配置"""

    def test_defaults(self):
        """TR-012: 默认超参数"""
        cfg = TrainConfig()
        assert (cfg.episodes, cfg.minibatch_size, cfg.buffer_capacity) == (15000, 100, 5000)
        assert cfg.lr_value == cfg.lr_advantage == 0.01
        assert cfg.grad_clip == 1.0

    def test_sigma_schedule(self):
        """TR-013: 探索噪声线性衰减"""
        cfg = TrainConfig(episodes=11, sigma_start=10.0, sigma_end=0.0)
        assert cfg.sigma(0) == 10.0
        assert cfg.sigma(5) == pytest.approx(5.0)
        assert cfg.sigma(10) == pytest.approx(0.0)

    def test_invalid(self):
        """TR-014: 非法配置报出配置键"""
        with pytest.raises(ConfigError) as exc:
            TrainConfig(episodes=-1)
        assert exc.value.key == "train.episodes"
        with pytest.raises(ConfigError) as exc:
            TrainConfig(gamma=0.0)
        assert exc.value.key == "train.gamma"


class TestTrainLoop:
    """训练主循环"""

    def test_explore_respects_bounds(self, small_game, small_model):
        """TR-015: 探索动作被投影到约束内"""
        rng = np.random.default_rng(0)
        state = MarketState.from_arrays(10.0, 0, [19.0, -19.0, 0.0])
        for _ in range(50):
            action = explore_action(state, small_model, 50.0, rng, small_game)
            q_next = state.inventory_array() + action.as_array()
            assert np.all(np.abs(q_next) <= 20.0 + 1e-12)

    def test_zero_episodes(self, small_game, small_model, output_dir):
        """TR-016: 0 回合时检查点等于初始化"""
        initial = small_model.params.flat().copy()
        result = train(small_game, small_model, TrainConfig(episodes=0), output_dir=output_dir)
        assert result.log == []
        loaded, _ = NashQModel.load(output_dir / "model.ndq")
        assert np.array_equal(loaded.params.flat(), initial)

    def test_checkpoints_and_log(self, small_game, small_model, output_dir):
        """TR-017: 每 eval_every 回合一个检查点，每回合一条记录"""
        cfg = TrainConfig(episodes=4, minibatch_size=8, buffer_capacity=30, eval_every=2, seed=1)
        logger = RunLogger(output_dir, verbose=False)
        result = train(small_game, small_model, cfg, output_dir=output_dir, logger=logger)
        names = [p.name for p in result.checkpoints]
        assert names == ["checkpoint_000002.ndq", "checkpoint_000004.ndq", "model.ndq"]

        lines = (output_dir / "train_log.jsonl").read_text(encoding="utf-8").splitlines()
        records = [json.loads(line) for line in lines]
        assert [r["episode"] for r in records] == [0, 1, 2, 3]
        assert set(records[0]) == {"episode", "mean_loss", "returns", "sigma", "buffer_size"}
        assert len(records[0]["returns"]) == small_game.n_agents
        assert records[-1]["buffer_size"] == min(30, 4 * small_game.horizon)

    def test_seed_determinism(self, small_game, small_model_config, tmp_path):
        """TR-018: 同一种子两次运行的日志与检查点逐字节相同"""
        cfg = TrainConfig(episodes=3, minibatch_size=8, buffer_capacity=20, eval_every=2, seed=5)
        blobs = []
        for run in ("a", "b"):
            out = tmp_path / run
            model = NashQModel.build(small_model_config, small_game.scaling, small_game.n_agents,
                                     np.random.default_rng(0))
            train(small_game, model, cfg, output_dir=out, logger=RunLogger(out, verbose=False))
            blobs.append(((out / "train_log.jsonl").read_bytes(), (out / "model.ndq").read_bytes()))
        assert blobs[0] == blobs[1]

    def test_update_changes_both_partitions(self, small_game, small_model, tiny_train_config):
        """TR-019: 训练同时更新 VALUE 与 ADVANTAGE 参数"""
        before = {n: small_model.params[n].copy() for n in small_model.params.names()}
        train(small_game, small_model, tiny_train_config)
        for partition in (Partition.VALUE, Partition.ADVANTAGE):
            names = small_model.params.names(partition)
            assert any(not np.array_equal(small_model.params[n], before[n]) for n in names)

    def test_nan_writes_diagnostics(self, small_game, small_model, output_dir):
        """TR-020: 损失为 NaN 时写诊断文件并抛出 NumericalError"""
        spec = small_model.specs["value.main"]
        small_model.params[f"value.main.b{spec.n_layers - 1}"][...] = np.nan
        with pytest.raises(NumericalError) as exc:
            train(small_game, small_model, TrainConfig(episodes=1, minibatch_size=4), output_dir=output_dir)
        path = exc.value.diagnostics_path
        assert path is not None and path.exists()
        assert path.name == "diagnostics_episode0_step0.json"
        dump = json.loads(path.read_text(encoding="utf-8"))
        assert dump["episode"] == 0 and "param_norms" in dump

    def test_agent_count_mismatch(self, small_model):
        """TR-021: 博弈与模型的交易者数不一致"""
        game = MarketGame(MarketParams(n_agents=2, horizon_T=4, q_bound=20.0))
        with pytest.raises(UsageError):
            train(game, small_model, TrainConfig(episodes=1))


class TestExploration:
    """探索噪声"""

    @pytest.fixture
    def wide_game(self):
        """库存上限足够大，探索动作不会被投影"""
        return MarketGame(MarketParams(horizon_T=4, n_agents=3, q_bound=1e6))

    def test_zero_sigma_is_nash_action(self, wide_game, small_model):
        """TR-022: σ_b = 0 时探索动作就是 μ(x)"""
        rng = np.random.default_rng(0)
        for state in (MarketState.from_arrays(10.0, 0, [0.0, 0.0, 0.0]),
                      MarketState.from_arrays(8.5, 2, [12.0, -3.0, 7.5])):
            action = explore_action(state, small_model, 0.0, rng, wide_game)
            assert np.array_equal(action.as_array(), small_model.nash_action(state).as_array())

    def test_noise_std_matches_sigma(self, wide_game, small_model):
        """TR-023: 10⁴ 次探索中 (动作 − μ) 的标准差与 σ_b 相差不超过 5%"""
        rng = np.random.default_rng(1)
        state = MarketState.from_arrays(10.0, 1, [5.0, -5.0, 0.0])
        mu = small_model.nash_action(state).as_array()
        draws = np.array([explore_action(state, small_model, 2.0, rng, wide_game).as_array()
                          for _ in range(10_000)])
        std = (draws - mu).std(axis=0)
        np.testing.assert_allclose(std, 2.0, rtol=0.05)


class TestNumericalGuards:
    """非有限数值的处理"""

    def test_terminal_ignores_nonfinite_bootstrap(self):
        """TR-024: 终止转移的 V̂(x′) 为 inf / NaN 时损失仍是有限值"""
        for bad in (np.inf, -np.inf, np.nan):
            loss = bellman_loss(np.array([[2.0]]), np.array([[-1.8]]), np.array([[1.0]]),
                                np.array([[bad]]), 1.0, np.array([True]))
            assert loss[0] == pytest.approx(0.64)

    def test_nonfinite_mu_raises_numerical_error(self, small_game, small_model):
        """TR-025: μ 为 inf 时 explore_action 抛出 NumericalError"""
        spec = small_model.specs["adv.main"]
        small_model.params[f"adv.main.b{spec.n_layers - 1}"][0] = np.inf
        state = MarketState.from_arrays(10.0, 0, [1.0, 2.0, 3.0])
        with pytest.raises(NumericalError):
            explore_action(state, small_model, 1.0, np.random.default_rng(0), small_game)

    def test_nonfinite_params_abort_with_diagnostics(self, small_game, small_model, output_dir):
        """TR-026: 参数非有限时训练以 NumericalError 结束并写出诊断文件"""
        spec = small_model.specs["adv.main"]
        name = f"adv.main.b{spec.n_layers - 1}"
        small_model.params[name][0] = -np.inf
        with pytest.raises(NumericalError) as exc:
            train(small_game, small_model, TrainConfig(episodes=1, minibatch_size=4), output_dir=output_dir)
        path = exc.value.diagnostics_path
        assert path is not None and path.name == "diagnostics_episode0_step0.json"
        dump = json.loads(path.read_text(encoding="utf-8"))
        assert dump["nonfinite_params"] == [name]
        assert dump["action"] is None


class TestTrainingSchedule:
    """小批量组成与目标网络"""

    def test_newest_transition_once_per_batch(self, small_game, small_model, tiny_train_config, mocker):
        """TR-027: 小批量由抽样加最新转移组成，最新转移只出现一次"""
        spy = mocker.spy(trainer_module, "update_step")
        train(small_game, small_model, tiny_train_config)

        batches = [c.args[0] for c in spy.call_args_list]
        assert len(batches) == 2 * tiny_train_config.episodes * small_game.horizon
        assert len(batches[0]) == 1
        for batch in batches:
            newest = batch[-1]
            assert sum(tr is newest for tr in batch) == 1
            assert len(batch) <= tiny_train_config.minibatch_size + 1

    def test_target_sync(self, small_game, small_model, mocker):
        """TR-028: target_sync_every > 0 时按回合同步目标网络的 VALUE 参数"""
        spy = mocker.spy(ParameterSet, "copy_values_from")
        cfg = TrainConfig(episodes=4, minibatch_size=8, buffer_capacity=30, eval_every=10, seed=2,
                          target_sync_every=2)
        result = train(small_game, small_model, cfg)
        assert spy.call_count == 2
        for call in spy.call_args_list:
            assert call.args[1] is small_model.params
            assert call.args[2] == Partition.VALUE
        assert all(math.isfinite(r.mean_loss) for r in result.log)


class TestDefaultScale:
    """默认配置下的数值尺度"""

    def test_default_market_loss_finite_and_falling(self):
        """TR-029: 默认市场（5 个交易者、T=15）与默认超参数训练 24 回合，损失有限且下降"""
        cfg = RunConfig()
        game = MarketGame(cfg.market, cfg.init)
        model = NashQModel.build(cfg.model, game.scaling, game.n_agents, np.random.default_rng([0, 1]))
        result = train(game, model, replace(cfg.train, episodes=24))

        losses = [r.mean_loss for r in result.log]
        assert all(math.isfinite(x) for x in losses)
        assert np.all(np.isfinite(model.params.flat()))
        assert np.mean(losses[-5:]) < np.mean(losses[:5])

    def test_scaled_loss_matches_raw_residual(self, small_game, small_model):
        """TR-030: 损失等于原始残差除以 value_scale 后的平方和"""
        tr = _transitions(small_game, 1, seed=6)[0]
        model = small_model
        value = model.value(tr.state)
        advantage = model.advantage(tr.state, tr.action)
        next_value = model.value(tr.next_state)
        raw = bellman_loss(value[None, :], advantage[None, :], np.array([tr.rewards]),
                           next_value[None, :], 1.0, np.array([tr.terminal]))[0]
        assert sample_loss(tr, model, 1.0) == pytest.approx(raw / model.value_scale ** 2, rel=1e-12)
