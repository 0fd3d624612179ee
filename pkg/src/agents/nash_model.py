"""
局部线性二次 Nash Q 函数

Q̂_i(x; u) = V̂_i(x) + Â_i(x; u)

Â_i(x; u) = −P11·d_i² − P12·d_i·Σ_{j≠i} d_j − P22·Σ_{j≠i} d_j² + ψ·Σ_{j≠i} d_j，d = u − μ(x)

参与者偏好一致且标签不变：所有参与者共用同一组网络，逐个参与者求值。
每个参与者的特征分为两部分：
- 非标签不变：(价格, 时间, 自身库存)，均已归一化
- 标签不变：其他参与者的库存集合，经 σ(Σ_j φ(z_j)) 结构嵌入

V̂ 与系数网络各自有一个 φ 嵌入，分别属于 VALUE 与 ADVANTAGE 分区。

网络输出是无量纲的：μ 以 action_scale 为单位，V̂ 以 value_scale 为单位，
P11/P12/P22 乘 value_scale / action_scale²，ψ 乘 value_scale / action_scale。
系数表与 Q̂ 都是原始（货币）单位。
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.nn.checkpoint import load_checkpoint, save_checkpoint
from src.nn.network import (
    GradientTape,
    NetworkSpec,
    ParameterSet,
    Partition,
    backward,
    forward,
    merge_grads,
)
from src.services.market_env import FeatureScaling, JointAction, MarketState
from src.utils.errors import CheckpointError, ConfigError, UsageError

N_OWN_FEATURES = 3
HEAD_FIELDS = ("mu", "l11", "p12", "p22", "psi")
NETWORKS = ("value.phi", "value.main", "adv.phi", "adv.main")


@dataclass(frozen=True)
class ModelConfig:
    """网络宽度与模型常数"""
    value_hidden: Tuple[int, ...] = (20, 60, 60, 20)
    phi_hidden: Tuple[int, ...] = (20, 20, 20)
    main_hidden: Tuple[int, ...] = (20, 40, 20)
    embed_dim: int = 20
    l11_epsilon: float = 1e-3
    action_scale: Optional[float] = None
    value_scale: Optional[float] = None
    init_scheme: str = "he"
    dtype: str = "float64"

    def __post_init__(self):
        for key in ("value_hidden", "phi_hidden", "main_hidden"):
            widths = tuple(int(w) for w in getattr(self, key))
            if any(w < 1 for w in widths):
                raise ConfigError(f"model.{key}", "隐藏层宽度必须 >= 1")
            object.__setattr__(self, key, widths)
        if self.embed_dim < 1:
            raise ConfigError("model.embed_dim", "必须 >= 1")
        if self.l11_epsilon <= 0:
            raise ConfigError("model.l11_epsilon", "必须 > 0")
        if self.action_scale is not None and self.action_scale <= 0:
            raise ConfigError("model.action_scale", "必须 > 0")
        if self.value_scale is not None and self.value_scale <= 0:
            raise ConfigError("model.value_scale", "必须 > 0")
        if self.init_scheme not in ("he", "zeros"):
            raise ConfigError("model.init_scheme", f"未知的初始化方案：{self.init_scheme}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype", f"只支持 float64 / float32：{self.dtype}")


@dataclass(frozen=True)
class AdvantageCoefficients:
    """某个参与者在某状态下的优势函数系数；mu 为全体参与者的均衡动作"""
    mu: np.ndarray
    l11: float
    p12: float
    p22: float
    psi: float

    @property
    def p11(self) -> float:
        return self.l11 * self.l11


@dataclass
class CoefficientTable:
    """一批状态下全体参与者的系数，各字段形状 (B, N)"""
    mu: np.ndarray
    l11: np.ndarray
    p12: np.ndarray
    p22: np.ndarray
    psi: np.ndarray

    @property
    def p11(self) -> np.ndarray:
        return self.l11 * self.l11


@dataclass
class StateBatch:
    price: np.ndarray        # (B,)
    step: np.ndarray         # (B,)
    inventories: np.ndarray  # (B, N)

    @classmethod
    def from_states(cls, states: Sequence[MarketState]) -> "StateBatch":
        return cls(
            price=np.array([s.price for s in states], dtype=float),
            step=np.array([s.step for s in states], dtype=float),
            inventories=np.array([s.inventories for s in states], dtype=float).reshape(len(states), -1),
        )

    @property
    def size(self) -> int:
        return self.price.shape[0]


# ========== 线性二次优势函数 ==========

def lq_advantage(u: np.ndarray, table: CoefficientTable) -> np.ndarray:
    """按对称化二次型计算 Â，u 与 table 各字段形状 (B, N)"""
    d = u - table.mu
    total = d.sum(axis=-1, keepdims=True)
    square_total = (d * d).sum(axis=-1, keepdims=True)
    others = total - d
    others_sq = square_total - d * d
    return -table.p11 * d * d - table.p12 * d * others - table.p22 * others_sq + table.psi * others


def lq_advantage_vjp(u: np.ndarray, table: CoefficientTable, g: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Â 的反向传播

    Args:
        u: 动作 (B, N)
        table: 系数
        g: ∂L/∂Â (B, N)

    Returns:
        对 mu、l11、p12、p22、psi 的余切，形状均为 (B, N)
    """
    d = u - table.mu
    total = d.sum(axis=-1, keepdims=True)
    square_total = (d * d).sum(axis=-1, keepdims=True)
    others = total - d
    p11 = table.p11

    # ∂Â_i/∂d_i = −2·P11_i·d_i − P12_i·Σ_{j≠i} d_j
    # ∂Â_i/∂d_k = −P12_i·d_i − 2·P22_i·d_k + ψ_i  (k ≠ i)
    cross = g * (-table.p12 * d + table.psi)
    cross_total = cross.sum(axis=-1, keepdims=True)
    curvature_total = (g * table.p22).sum(axis=-1, keepdims=True)
    dd = (g * (-2.0 * p11 * d - table.p12 * others)
          + (cross_total - cross)
          - 2.0 * d * (curvature_total - g * table.p22))

    return {
        "mu": -dd,
        "l11": -g * d * d * 2.0 * table.l11,
        "p12": -g * d * others,
        "p22": -g * (square_total - d * d),
        "psi": g * others,
    }


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# ========== 网络前向记录 ==========

@dataclass
class _HeadTape:
    main: GradientTape
    phi: Optional[GradientTape]
    n_others: int


@dataclass
class ModelPass:
    """一次批量前向的结果与反向所需记录"""
    batch: StateBatch
    value: Optional[np.ndarray] = None
    table: Optional[CoefficientTable] = None
    raw_l11: Optional[np.ndarray] = None
    value_tape: Optional[_HeadTape] = None
    adv_tape: Optional[_HeadTape] = None


class NashQModel:
    """V̂ 网络 + 优势系数网络"""

    def __init__(self, specs: Mapping[str, NetworkSpec], params: ParameterSet, scaling: FeatureScaling,
                 n_agents: int, l11_epsilon: float, action_scale: float, value_scale: float):
        missing = [name for name in NETWORKS if name not in specs]
        if missing:
            raise CheckpointError(f"缺少网络：{missing}")
        self.specs = dict(specs)
        self.params = params
        self.scaling = scaling
        self.n_agents = int(n_agents)
        self.l11_epsilon = float(l11_epsilon)
        self.action_scale = float(action_scale)
        self.value_scale = float(value_scale)
        self.embed_dim = self.specs["adv.phi"].output_dim

    @property
    def curvature_scale(self) -> float:
        """P11 / P12 / P22 的单位：value_scale / action_scale²"""
        return self.value_scale / (self.action_scale * self.action_scale)

    @property
    def linear_scale(self) -> float:
        """ψ 的单位：value_scale / action_scale"""
        return self.value_scale / self.action_scale

    @classmethod
    def build(cls, cfg: ModelConfig, scaling: FeatureScaling, n_agents: int,
              rng: np.random.Generator) -> "NashQModel":
        """按配置初始化全部网络"""
        main_in = N_OWN_FEATURES + cfg.embed_dim
        specs = {
            "value.phi": NetworkSpec(1, cfg.phi_hidden, cfg.embed_dim),
            "value.main": NetworkSpec(main_in, cfg.value_hidden, 1),
            "adv.phi": NetworkSpec(1, cfg.phi_hidden, cfg.embed_dim),
            "adv.main": NetworkSpec(main_in, cfg.main_hidden, len(HEAD_FIELDS)),
        }
        params = ParameterSet(cfg.dtype)
        for name, spec in specs.items():
            partition = Partition.VALUE if name.startswith("value.") else Partition.ADVANTAGE
            params.add_network(spec, name, partition, rng, scheme=cfg.init_scheme)

        action_scale = cfg.action_scale or scaling.inventory_scale / scaling.horizon
        value_scale = cfg.value_scale or scaling.price_scale * scaling.inventory_scale
        return cls(specs, params, scaling, n_agents, cfg.l11_epsilon, action_scale, value_scale)

    def copy(self) -> "NashQModel":
        return NashQModel(self.specs, self.params.copy(), self.scaling, self.n_agents,
                          self.l11_epsilon, self.action_scale, self.value_scale)

    # ========== 特征 ==========

    def features(self, batch: StateBatch) -> Tuple[np.ndarray, np.ndarray]:
        """
        每个参与者的特征

        Returns:
            own: (B, N, 3) 归一化 (价格, 时间, 自身库存)
            others: (B, N, N−1) 其他参与者的归一化库存，按数值升序排列
        """
        n = batch.inventories.shape[1]
        if n != self.n_agents:
            raise UsageError(f"状态中有 {n} 个参与者，模型为 {self.n_agents} 个")
        q = batch.inventories / self.scaling.inventory_scale
        price = np.broadcast_to((batch.price / self.scaling.price_scale)[:, None], q.shape)
        time = np.broadcast_to((batch.step / self.scaling.horizon)[:, None], q.shape)
        own = np.stack([price, time, q], axis=-1)

        index = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=int).reshape(n, n - 1)
        others = np.sort(q[:, index], axis=-1)
        return own, others

    # ========== 置换不变嵌入 ==========

    def _embed(self, key: str, others: np.ndarray) -> Tuple[np.ndarray, Optional[GradientTape]]:
        rows, k = others.shape
        spec = self.specs[key]
        if k == 0:
            return np.zeros((rows, spec.output_dim), dtype=self.params.dtype), None
        phi_out, tape = forward(spec, self.params, np.sort(others, axis=1).reshape(rows * k, 1), prefix=key)
        return phi_out.reshape(rows, k, spec.output_dim).sum(axis=1), tape

    def perm_invariant_embed(self, invariant_set: Sequence[float],
                             partition: Partition = Partition.ADVANTAGE) -> np.ndarray:
        """Σ_j φ(z_j)；空集合返回零向量"""
        key = "value.phi" if partition == Partition.VALUE else "adv.phi"
        others = np.asarray(invariant_set, dtype=float).reshape(1, -1)
        embedding, _ = self._embed(key, others)
        return embedding[0]

    def _head(self, which: str, own: np.ndarray, others: np.ndarray) -> Tuple[np.ndarray, _HeadTape]:
        rows = own.shape[0] * own.shape[1]
        embedding, phi_tape = self._embed(f"{which}.phi", others.reshape(rows, -1))
        x = np.concatenate([own.reshape(rows, N_OWN_FEATURES), embedding], axis=1)
        out, main_tape = forward(self.specs[f"{which}.main"], self.params, x, prefix=f"{which}.main")
        return out, _HeadTape(main_tape, phi_tape, others.shape[-1])

    def _head_backward(self, tape: _HeadTape, d_out: np.ndarray) -> Dict[str, np.ndarray]:
        main = backward(tape.main, d_out)
        if tape.phi is None:
            return main.grads
        d_embed = main.input_cotangent[:, N_OWN_FEATURES:]
        rows, dim = d_embed.shape
        d_phi = np.broadcast_to(d_embed[:, None, :], (rows, tape.n_others, dim)).reshape(rows * tape.n_others, dim)
        return merge_grads(main.grads, backward(tape.phi, d_phi).grads)

    # ========== 批量前向 / 反向 ==========

    def evaluate(self, batch: StateBatch, value: bool = True, advantage: bool = True) -> ModelPass:
        """批量计算 V̂ 与系数表"""
        own, others = self.features(batch)
        b, n = batch.size, self.n_agents
        result = ModelPass(batch)
        if value:
            out, result.value_tape = self._head("value", own, others)
            result.value = self.value_scale * out[:, 0].reshape(b, n)
        if advantage:
            out, result.adv_tape = self._head("adv", own, others)
            out = out.reshape(b, n, len(HEAD_FIELDS))
            result.raw_l11 = out[..., 1]
            curvature = self.curvature_scale
            result.table = CoefficientTable(
                mu=self.action_scale * out[..., 0],
                l11=math.sqrt(curvature) * (_softplus(out[..., 1]) + self.l11_epsilon),
                p12=curvature * out[..., 2],
                p22=curvature * out[..., 3],
                psi=self.linear_scale * out[..., 4],
            )
        return result

    def value_backward(self, result: ModelPass, d_value: np.ndarray) -> Dict[str, np.ndarray]:
        """由 ∂L/∂V̂ (B, N) 得到 VALUE 分区梯度"""
        d_out = (self.value_scale * d_value).reshape(-1, 1)
        return self._head_backward(result.value_tape, d_out)

    def coefficient_backward(self, result: ModelPass, cotangents: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """由对各系数的余切得到 ADVANTAGE 分区梯度"""
        curvature = self.curvature_scale
        d_raw = np.stack([
            self.action_scale * cotangents["mu"],
            math.sqrt(curvature) * cotangents["l11"] * _sigmoid(result.raw_l11),
            curvature * cotangents["p12"],
            curvature * cotangents["p22"],
            self.linear_scale * cotangents["psi"],
        ], axis=-1)
        return self._head_backward(result.adv_tape, d_raw.reshape(-1, len(HEAD_FIELDS)))

    # ========== 单状态接口 ==========

    def value(self, state: MarketState) -> np.ndarray:
        return self.evaluate(StateBatch.from_states([state]), advantage=False).value[0]

    def coefficient_table(self, state: MarketState) -> CoefficientTable:
        return self.evaluate(StateBatch.from_states([state]), value=False).table

    def coefficients(self, state: MarketState, agent_index: int) -> AdvantageCoefficients:
        """参与者 agent_index 的系数行"""
        table = self.coefficient_table(state)
        i = agent_index
        return AdvantageCoefficients(mu=table.mu[0].copy(), l11=float(table.l11[0, i]),
                                     p12=float(table.p12[0, i]), p22=float(table.p22[0, i]),
                                     psi=float(table.psi[0, i]))

    def advantage(self, state: MarketState, action: JointAction) -> np.ndarray:
        table = self.coefficient_table(state)
        return lq_advantage(action.as_array()[None, :], table)[0]

    def q_value(self, state: MarketState, action: JointAction) -> np.ndarray:
        result = self.evaluate(StateBatch.from_states([state]))
        return result.value[0] + lq_advantage(action.as_array()[None, :], result.table)[0]

    def q_value_vjp(self, state: MarketState, action: JointAction, cotangent: np.ndarray) -> Dict[str, np.ndarray]:
        """∂<cotangent, Q̂(x; u)>/∂θ"""
        result = self.evaluate(StateBatch.from_states([state]))
        g = np.asarray(cotangent, dtype=float).reshape(1, -1)
        cot = lq_advantage_vjp(action.as_array()[None, :], result.table, g)
        return merge_grads(self.value_backward(result, g), self.coefficient_backward(result, cot))

    def nash_action(self, state: MarketState) -> JointAction:
        """模型给出的 Nash 均衡动作 μ(x)"""
        return JointAction.from_array(self.coefficient_table(state).mu[0])

    def nash_actions(self, batch: StateBatch) -> np.ndarray:
        return self.evaluate(batch, value=False).table.mu

    # ========== 检查点 ==========

    def constants(self) -> Dict[str, Any]:
        return {
            "price_scale": self.scaling.price_scale,
            "horizon": self.scaling.horizon,
            "inventory_scale": self.scaling.inventory_scale,
            "n_agents": self.n_agents,
            "l11_epsilon": self.l11_epsilon,
            "action_scale": self.action_scale,
            "value_scale": self.value_scale,
        }

    def save(self, path: Path, metadata: Optional[Mapping[str, Any]] = None) -> Path:
        return save_checkpoint(path, self.specs, self.params, self.constants(), metadata or {})

    @classmethod
    def load(cls, path: Path) -> Tuple["NashQModel", Dict[str, Any]]:
        """读取检查点，返回 (模型, metadata)"""
        ckpt = load_checkpoint(path)
        c = ckpt.constants
        try:
            scaling = FeatureScaling(price_scale=float(c["price_scale"]), horizon=int(c["horizon"]),
                                     inventory_scale=float(c["inventory_scale"]))
            model = cls(ckpt.specs, ckpt.params, scaling, int(c["n_agents"]), float(c["l11_epsilon"]),
                        float(c["action_scale"]), float(c["value_scale"]))
        except KeyError as e:
            raise CheckpointError(f"检查点缺少模型常数：{e}")
        return model, ckpt.metadata
