"""
N 个交易者的最优执行随机博弈

价格过程（每步）：
    S' = S + g1(S, ν)·ΔT + σ·√ΔT·ξ
    g1 线性冲击：κ(θ − S) + b1·Σν
    g1 平方根冲击：κ(θ − S) + b1·sgn(ν̄)·√|ν̄|，ν̄ 为全体交易者的平均交易量

单步奖励：
    r_i = −ν_i(S + b1·ν_i) − b3·(q'_i)²·ΔT
    最后一步且 b2 有限时再加 q'_i(S' − b2·q'_i)
    b2 = INFINITE 时最后一步强制平仓（ν_i = −q_i），没有终端项
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.errors import ConfigError, UsageError

INFINITE = math.inf


class ImpactKind(str, Enum):
    """价格冲击形式"""
    LINEAR = "linear"
    SQUARE_ROOT = "square_root"


@dataclass(frozen=True)
class MarketParams:
    """市场与偏好参数，默认值取自线性冲击实验"""
    kappa: float = 0.1
    theta_mr: float = 10.0
    sigma: float = 1.0
    b1: float = 0.3
    b2: float = INFINITE
    b3: float = 0.1
    dt: float = 1.0
    horizon_T: int = 15
    n_agents: int = 5
    q_bound: float = 100.0
    impact_kind: ImpactKind = ImpactKind.LINEAR

    def __post_init__(self):
        object.__setattr__(self, "impact_kind", ImpactKind(self.impact_kind))
        checks = [
            ("kappa", self.kappa > 0, "必须 > 0"),
            ("sigma", self.sigma >= 0, "必须 >= 0"),
            ("b1", self.b1 > 0, "必须 > 0"),
            ("b2", self.b2 >= 0 and not math.isnan(self.b2), "必须为非负数或 .inf"),
            ("b3", self.b3 >= 0, "必须 >= 0"),
            ("dt", self.dt > 0, "必须 > 0"),
            ("horizon_T", int(self.horizon_T) >= 1, "必须 >= 1"),
            ("n_agents", int(self.n_agents) >= 1, "必须 >= 1"),
            ("q_bound", self.q_bound > 0, "必须 > 0"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(f"market.{key}", message)

    @property
    def forced_liquidation(self) -> bool:
        """b2 = INFINITE 表示最后一步强制平仓"""
        return math.isinf(self.b2)


@dataclass(frozen=True)
class InitialStateConfig:
    """初始状态分布：q0 ~ N(0, σ_q²)，S0 ~ N(p_mean, σ_p²)"""
    sigma_q: float = 5.0
    price_mean: float = 10.0
    sigma_p: float = 1.0

    def __post_init__(self):
        for key in ("sigma_q", "sigma_p"):
            if getattr(self, key) < 0:
                raise ConfigError(f"init.{key}", "必须 >= 0")


@dataclass(frozen=True)
class FeatureScaling:
    """特征归一化常数：价格 / price_scale，时间 / horizon，库存 / inventory_scale"""
    price_scale: float
    horizon: int
    inventory_scale: float

    @classmethod
    def for_market(cls, params: MarketParams) -> "FeatureScaling":
        return cls(price_scale=params.theta_mr, horizon=params.horizon_T, inventory_scale=params.q_bound)


@dataclass(frozen=True)
class MarketState:
    """博弈状态 x_t"""
    price: float
    step: int
    inventories: Tuple[float, ...]

    @property
    def n_agents(self) -> int:
        return len(self.inventories)

    def inventory_array(self) -> np.ndarray:
        return np.asarray(self.inventories, dtype=float)

    @classmethod
    def from_arrays(cls, price: float, step: int, inventories: Iterable[float]) -> "MarketState":
        return cls(float(price), int(step), tuple(float(q) for q in inventories))


@dataclass(frozen=True)
class JointAction:
    """全体交易者的交易量 ν_t"""
    trades: Tuple[float, ...]

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.trades):
            raise UsageError(f"交易量必须有限：{self.trades}")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.trades, dtype=float)

    @classmethod
    def from_array(cls, trades: Iterable[float]) -> "JointAction":
        return cls(tuple(float(v) for v in trades))


@dataclass(frozen=True)
class Transition:
    """回放缓存元素"""
    state: MarketState
    action: JointAction
    rewards: Tuple[float, ...]
    next_state: MarketState
    terminal: bool


# ========== 单步动力学 ==========

def drift(state: MarketState, action: JointAction, params: MarketParams) -> float:
    """价格漂移 g1(S, ν)"""
    reversion = params.kappa * (params.theta_mr - state.price)
    trades = action.as_array()
    if params.impact_kind == ImpactKind.LINEAR:
        return float(reversion + params.b1 * trades.sum())
    nu_bar = trades.mean()
    return float(reversion + params.b1 * np.sign(nu_bar) * np.sqrt(abs(nu_bar)))


def executed_action(state: MarketState, action: JointAction, params: MarketParams) -> JointAction:
    """实际执行的交易：强制平仓时最后一步改为 −q"""
    if params.forced_liquidation and state.step + 1 == params.horizon_T:
        return JointAction.from_array(-state.inventory_array())
    return action


def step(state: MarketState, action: JointAction, params: MarketParams,
         noise: float) -> Tuple[MarketState, Tuple[float, ...]]:
    """
    推进一步

    Args:
        state: 当前状态（不能是终止状态）
        action: 已经过 clamp_action 的交易量
        params: 市场参数
        noise: 标准正态抽样 ξ

    Returns:
        (下一状态, 每个交易者的奖励)
    """
    if state.step >= params.horizon_T:
        raise UsageError(f"对终止状态调用 step（step={state.step}, T={params.horizon_T}）")
    if len(action.trades) != state.n_agents:
        raise UsageError(f"交易量个数 {len(action.trades)} 与交易者数 {state.n_agents} 不一致")

    action = executed_action(state, action, params)
    nu = action.as_array()
    q = state.inventory_array()
    S = state.price

    next_price = S + drift(state, action, params) * params.dt + params.sigma * math.sqrt(params.dt) * noise
    next_q = q + nu
    if params.forced_liquidation and state.step + 1 == params.horizon_T:
        next_q = np.zeros_like(q)
    next_step = state.step + 1

    rewards = -nu * (S + params.b1 * nu) - params.b3 * next_q ** 2 * params.dt
    if next_step == params.horizon_T and not params.forced_liquidation:
        rewards = rewards + next_q * (next_price - params.b2 * next_q)

    return MarketState.from_arrays(next_price, next_step, next_q), tuple(float(r) for r in rewards)


def clamp_action(state: MarketState, raw: JointAction, params: MarketParams) -> JointAction:
    """把交易量投影到使 q + ν ∈ [−q_bound, q_bound] 的最近值"""
    q = state.inventory_array()
    nu = np.clip(raw.as_array(), -params.q_bound - q, params.q_bound - q)
    return JointAction.from_array(nu)


def _truncated_normal(rng: np.random.Generator, mean: float, std: float, size: int,
                      low: float, high: float, max_tries: int = 100) -> np.ndarray:
    values = rng.normal(mean, std, size)
    for _ in range(max_tries):
        bad = (values < low) | (values > high)
        if not bad.any():
            break
        values[bad] = rng.normal(mean, std, int(bad.sum()))
    return np.clip(values, low, high)


def sample_initial(params: MarketParams, init_cfg: InitialStateConfig,
                   rng: np.random.Generator) -> MarketState:
    """抽取初始状态：库存截断在 [−q_bound, q_bound]，价格截断在 0 以上"""
    q0 = _truncated_normal(rng, 0.0, init_cfg.sigma_q, params.n_agents, -params.q_bound, params.q_bound)
    s0 = _truncated_normal(rng, init_cfg.price_mean, init_cfg.sigma_p, 1, 0.0, np.inf)[0]
    return MarketState.from_arrays(s0, 0, q0)


# ========== 回合统计 ==========

def episode_return(transitions: Sequence[Transition], gamma: float, n_agents: Optional[int] = None) -> np.ndarray:
    """Σ_t γ^t·r_t；空列表返回长度 n_agents 的零向量，此时必须给出 n_agents"""
    if not transitions:
        if n_agents is None:
            raise UsageError("空回合无法确定交易者数，请给出 n_agents")
        return np.zeros(n_agents)
    total = np.zeros(transitions[0].state.n_agents)
    for t, tr in enumerate(transitions):
        total += gamma ** t * np.asarray(tr.rewards)
    return total


def realized_objective(transitions: Sequence[Transition], params: MarketParams) -> np.ndarray:
    """
    直接按目标函数记账：X_T + q_T(S_T − b2·q_T) − b3·Σ_{t=1..T} q_t²·ΔT

    X_T 为现金过程 −Σ ν_t(S_t + b1·ν_t)；强制平仓时 q_T = 0，没有终端项。
    """
    n = transitions[0].state.n_agents
    cash = np.zeros(n)
    running = np.zeros(n)
    for tr in transitions:
        nu = tr.action.as_array()
        cash -= nu * (tr.state.price + params.b1 * nu)
        running += tr.next_state.inventory_array() ** 2
    last = transitions[-1].next_state
    q_T = last.inventory_array()
    terminal = np.zeros(n) if params.forced_liquidation else q_T * (last.price - params.b2 * q_T)
    return cash + terminal - params.b3 * running * params.dt


class MarketGame:
    """训练器使用的博弈接口"""

    def __init__(self, params: MarketParams, init: Optional[InitialStateConfig] = None):
        self.params = params
        self.init = init or InitialStateConfig()

    @property
    def n_agents(self) -> int:
        return self.params.n_agents

    @property
    def horizon(self) -> int:
        return self.params.horizon_T

    @property
    def scaling(self) -> FeatureScaling:
        return FeatureScaling.for_market(self.params)

    def reset(self, rng: np.random.Generator) -> MarketState:
        return sample_initial(self.params, self.init, rng)

    def clamp(self, state: MarketState, action: JointAction) -> JointAction:
        return clamp_action(state, action, self.params)

    def step(self, state: MarketState, action: JointAction, rng: np.random.Generator) -> Transition:
        xi = float(rng.standard_normal())
        executed = executed_action(state, action, self.params)
        next_state, rewards = step(state, executed, self.params, xi)
        return Transition(state, executed, rewards, next_state, next_state.step == self.params.horizon_T)

    def rollout(self, policy, rng: np.random.Generator, state: Optional[MarketState] = None) -> List[Transition]:
        """按 policy(state) -> JointAction 跑完一个回合"""
        state = state or self.reset(rng)
        transitions = []
        while state.step < self.horizon:
            tr = self.step(state, self.clamp(state, policy(state)), rng)
            transitions.append(tr)
            state = tr.next_state
        return transitions
