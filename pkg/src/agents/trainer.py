"""
Nash-DQN actor-critic 训练

每个博弈步：
1. 以 μ(x) + ε（ε ~ N(0, σ_b²I)）探索，再投影到库存约束内
2. 观察转移，从回放缓存抽取 M̂ 个转移，再加上最新转移组成小批量
3. 把最新转移写入回放缓存
4. 固定 θ_A 对 θ_V 做一步优化，再固定 θ_V 对 θ_A 做一步优化
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.agents.nash_model import NashQModel, StateBatch, lq_advantage, lq_advantage_vjp
from src.agents.replay import ReplayBuffer
from src.nn.network import SGD, Adam, ParameterSet, Partition, clip_by_global_norm, make_optimizer, merge_grads
from src.services.games import StochasticGame
from src.services.market_env import JointAction, MarketState, Transition, episode_return
from src.utils.errors import ConfigError, NumericalError, UsageError
from src.utils.run_log import RunLogger


@dataclass(frozen=True)
class TrainConfig:
    """训练超参数"""
    episodes: int = 15000
    minibatch_size: int = 100
    buffer_capacity: int = 5000
    lr_value: float = 0.01
    lr_advantage: float = 0.01
    gamma: float = 1.0
    sigma_start: float = 10.0
    sigma_end: float = 0.5
    seed: int = 0
    eval_every: int = 500
    optimizer: str = "sgd"
    target_sync_every: int = 0
    semi_gradient: bool = False
    grad_clip: float = 1.0

    def __post_init__(self):
        checks = [
            ("episodes", self.episodes >= 0, "必须 >= 0"),
            ("minibatch_size", self.minibatch_size >= 1, "必须 >= 1"),
            ("buffer_capacity", self.buffer_capacity >= 1, "必须 >= 1"),
            ("lr_value", self.lr_value >= 0, "必须 >= 0"),
            ("lr_advantage", self.lr_advantage >= 0, "必须 >= 0"),
            ("gamma", 0 < self.gamma <= 1, "必须在 (0, 1] 内"),
            ("sigma_start", self.sigma_start >= 0, "必须 >= 0"),
            ("sigma_end", self.sigma_end >= 0, "必须 >= 0"),
            ("eval_every", self.eval_every >= 1, "必须 >= 1"),
            ("optimizer", self.optimizer in ("sgd", "adam"), "只支持 sgd / adam"),
            ("target_sync_every", self.target_sync_every >= 0, "必须 >= 0"),
            ("grad_clip", self.grad_clip >= 0, "必须 >= 0"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"train.{key}", message)

    def sigma(self, episode: int) -> float:
        """第 episode 个回合（从 0 开始）的探索噪声，线性衰减"""
        if self.episodes <= 1:
            return float(self.sigma_start)
        frac = episode / (self.episodes - 1)
        return float(self.sigma_start + (self.sigma_end - self.sigma_start) * frac)


@dataclass
class EpisodeRecord:
    episode: int
    mean_loss: float
    returns: List[float]
    sigma: float
    buffer_size: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    params: ParameterSet
    log: List[EpisodeRecord] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)


# ========== 损失 ==========

def bellman_residual(value: np.ndarray, advantage: np.ndarray, rewards: np.ndarray, next_value: np.ndarray,
                     gamma: float, terminal: np.ndarray) -> np.ndarray:
    """V̂(x) + Â(x;u) − r − γ·V̂(x′)，终止转移的 V̂(x′) 视为 0；各数组形状 (B, N)，terminal 形状 (B,)"""
    terminal = np.asarray(terminal, dtype=bool)[:, None]
    bootstrap = np.where(terminal, 0.0, next_value)
    return value + advantage - rewards - gamma * bootstrap


def bellman_loss(value: np.ndarray, advantage: np.ndarray, rewards: np.ndarray, next_value: np.ndarray,
                 gamma: float, terminal: np.ndarray) -> np.ndarray:
    """每个样本的残差平方和，形状 (B,)"""
    residual = bellman_residual(value, advantage, rewards, next_value, gamma, terminal)
    return (residual * residual).sum(axis=-1)


def loss_and_grads(batch: Sequence[Transition], model: NashQModel, gamma: float,
                   partition: Optional[Partition] = None, semi_gradient: bool = False,
                   target: Optional[NashQModel] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    小批量平均损失及其对所选分区的梯度

    残差以 model.value_scale 为单位，value_scale = 1 时即原始的残差平方和。

    Args:
        batch: 转移列表（非空）
        model: 当前模型
        gamma: 折扣
        partition: None 只算损失；VALUE / ADVANTAGE / ALL 同时返回梯度
        semi_gradient: True 时不对 γ·V̂(x′) 求导
        target: 若给出，V̂(x′) 由目标副本计算且不求导

    Returns:
        (损失, 按张量名的梯度)
    """
    if not batch:
        raise UsageError("小批量不能为空")
    size = len(batch)
    states = StateBatch.from_states([tr.state for tr in batch])
    next_states = StateBatch.from_states([tr.next_state for tr in batch])
    actions = np.array([tr.action.trades for tr in batch], dtype=float).reshape(size, -1)
    rewards = np.array([tr.rewards for tr in batch], dtype=float).reshape(size, -1)
    terminal = np.array([tr.terminal for tr in batch], dtype=bool)
    cont = (1.0 - terminal.astype(float))[:, None]

    current = model.evaluate(states)
    bootstrap = (target or model).evaluate(next_states, advantage=False)
    advantage = lq_advantage(actions, current.table)
    residual = bellman_residual(current.value, advantage, rewards, bootstrap.value, gamma, terminal)
    residual = residual / model.value_scale
    loss = float(np.mean((residual * residual).sum(axis=-1)))
    if partition is None:
        return loss, {}

    # ∂L/∂V̂ 与 ∂L/∂Â（原始单位）
    g = 2.0 * residual / (size * model.value_scale)
    grads: Dict[str, np.ndarray] = {}
    if partition in (Partition.VALUE, Partition.ALL):
        grads = merge_grads(grads, model.value_backward(current, g))
        if target is None and not semi_gradient:
            grads = merge_grads(grads, model.value_backward(bootstrap, -gamma * cont * g))
    if partition in (Partition.ADVANTAGE, Partition.ALL):
        cotangents = lq_advantage_vjp(actions, current.table, g)
        grads = merge_grads(grads, model.coefficient_backward(current, cotangents))
    return loss, grads


def sample_loss(transition: Transition, model: NashQModel, gamma: float) -> float:
    """单个转移的 Nash-Bellman 残差平方和"""
    return loss_and_grads([transition], model, gamma)[0]


def batch_loss(batch: Sequence[Transition], model: NashQModel, gamma: float) -> float:
    """小批量平均损失"""
    return loss_and_grads(batch, model, gamma)[0]


def update_step(batch: Sequence[Transition], model: NashQModel, config: TrainConfig, partition: Partition,
                optimizer: Union[SGD, Adam], target: Optional[NashQModel] = None) -> float:
    """对一个分区做一步优化，返回更新前的损失；损失非有限时不更新"""
    lr = config.lr_value if partition == Partition.VALUE else config.lr_advantage
    loss, grads = loss_and_grads(batch, model, config.gamma, partition,
                                 semi_gradient=config.semi_gradient, target=target)
    if math.isfinite(loss):
        optimizer.step(model.params, clip_by_global_norm(grads, config.grad_clip), lr, partition)
    return loss


# ========== 探索 ==========

def explore_action(state: MarketState, model: NashQModel, sigma_b: float, rng: np.random.Generator,
                   game: StochasticGame) -> JointAction:
    """μ(x) + ε，再投影到约束内；μ 非有限时抛出 NumericalError"""
    mu = model.coefficient_table(state).mu[0]
    if not np.all(np.isfinite(mu)):
        raise NumericalError(f"第 {state.step} 步的均衡动作非有限：{mu.tolist()}")
    noise = rng.normal(0.0, sigma_b, size=mu.shape[0])
    return game.clamp(state, JointAction.from_array(mu + noise))


# ========== 训练主循环 ==========

def _nonfinite_params(model: NashQModel) -> List[str]:
    return [name for name in model.params.names() if not np.all(np.isfinite(model.params[name]))]


def _write_diagnostics(output_dir: Optional[Path], episode: int, state: MarketState, model: NashQModel,
                       loss: Optional[float] = None, transition: Optional[Transition] = None) -> Optional[Path]:
    if output_dir is None:
        return None
    path = Path(output_dir) / f"diagnostics_episode{episode}_step{state.step}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    norms = {name: float(np.linalg.norm(model.params[name])) for name in model.params.names()}
    dump = {
        "episode": episode,
        "step": state.step,
        "loss": repr(loss),
        "state": {"price": state.price, "step": state.step, "inventories": list(state.inventories)},
        "action": list(transition.action.trades) if transition else None,
        "rewards": list(transition.rewards) if transition else None,
        "nonfinite_params": _nonfinite_params(model),
        "param_norms": norms,
    }
    path.write_text(json.dumps(dump, indent=2, ensure_ascii=False, default=repr), encoding="utf-8")
    return path


def train(game: StochasticGame, model: NashQModel, config: TrainConfig,
          output_dir: Optional[Path] = None, logger: Optional[RunLogger] = None,
          metadata: Optional[Mapping[str, Any]] = None) -> TrainResult:
    """
    运行 config.episodes 个回合的 actor-critic 训练

    Args:
        game: 博弈环境
        model: 待训练模型（参数原地更新）
        config: 训练超参数
        output_dir: 检查点与诊断文件目录，None 时不写文件
        logger: 日志器
        metadata: 写入检查点的附加信息

    Returns:
        TrainResult
    """
    if game.n_agents != model.n_agents:
        raise UsageError(f"博弈有 {game.n_agents} 个参与者，模型为 {model.n_agents} 个")

    logger = logger or RunLogger(verbose=False)
    rng = np.random.default_rng(config.seed)
    buffer = ReplayBuffer(config.buffer_capacity)
    optimizer = make_optimizer(config.optimizer)
    target = model.copy() if config.target_sync_every > 0 else None
    metadata = dict(metadata or {})
    result = TrainResult(params=model.params)

    for episode in range(config.episodes):
        sigma = config.sigma(episode)
        state = game.reset(rng)
        transitions: List[Transition] = []
        losses: List[float] = []

        while state.step < game.horizon:
            broken = _nonfinite_params(model)
            try:
                if broken:
                    raise NumericalError(f"第 {episode} 回合第 {state.step} 步参数非有限：{broken}")
                action = explore_action(state, model, sigma, rng, game)
            except NumericalError as e:
                path = _write_diagnostics(output_dir, episode, state, model)
                raise NumericalError(str(e), path) from e

            transition = game.step(state, action, rng)
            # 先抽样再写入，最新转移只在批次里出现一次
            batch = buffer.sample(config.minibatch_size, rng) + [transition]
            buffer.push(transition)

            for partition in (Partition.VALUE, Partition.ADVANTAGE):
                loss = update_step(batch, model, config, partition, optimizer, target)
                if not math.isfinite(loss):
                    path = _write_diagnostics(output_dir, episode, state, model, loss, transition)
                    raise NumericalError(f"第 {episode} 回合第 {state.step} 步损失为 {loss}", path)
                if partition == Partition.VALUE:
                    losses.append(loss)

            transitions.append(transition)
            state = transition.next_state

        if target is not None and (episode + 1) % config.target_sync_every == 0:
            target.params.copy_values_from(model.params, Partition.VALUE)

        record = EpisodeRecord(
            episode=episode,
            mean_loss=float(np.mean(losses)) if losses else 0.0,
            returns=[float(r) for r in episode_return(transitions, config.gamma, game.n_agents)],
            sigma=sigma,
            buffer_size=len(buffer),
        )
        result.log.append(record)
        logger.record(record.to_dict())

        if (episode + 1) % config.eval_every == 0:
            logger.log(f"回合 {episode + 1}/{config.episodes}  loss={record.mean_loss:.6g}  "
                       f"sigma={sigma:.4g}  平均回报={np.mean(record.returns):.6g}")
            if output_dir is not None:
                path = model.save(Path(output_dir) / "checkpoints" / f"checkpoint_{episode + 1:06d}.ndq",
                                  {**metadata, "episode": episode + 1})
                result.checkpoints.append(path)

    if output_dir is not None:
        path = model.save(Path(output_dir) / "model.ndq", {**metadata, "episode": config.episodes})
        result.checkpoints.append(path)
    return result
