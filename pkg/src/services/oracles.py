"""
解析基准解

仅用于测试与验收：
- solve_one_step_nash：二次支付单步博弈，联立一阶条件求 Nash 均衡
- solve_lqr_market：N=1、线性冲击市场博弈的有限期 LQ 逆向归纳

与 nash_model 不共享任何代码。
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from src.services.market_env import ImpactKind, MarketParams
from src.utils.errors import SingularGameError, UnsupportedConfigError


# ========== 单步二次博弈 ==========

@dataclass(frozen=True)
class QuadraticGame:
    """
    f_i(u) = −a_i·u_i² + u_i·Σ_{j≠i} c_ij·u_j + g_i·u_i

    c 的对角线不参与计算。
    """
    a: Tuple[float, ...]
    c: Tuple[Tuple[float, ...], ...]
    g: Tuple[float, ...]

    def __post_init__(self):
        n = len(self.a)
        if len(self.g) != n or len(self.c) != n or any(len(row) != n for row in self.c):
            raise ValueError("a、c、g 的维度不一致")
        if any(ai <= 0 for ai in self.a):
            raise ValueError("a_i 必须 > 0（每个参与者的支付关于自身动作严格凹）")

    @property
    def n_players(self) -> int:
        return len(self.a)

    def cross(self) -> np.ndarray:
        c = np.array(self.c, dtype=float)
        np.fill_diagonal(c, 0.0)
        return c

    def payoffs(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        a = np.asarray(self.a)
        g = np.asarray(self.g)
        return -a * u ** 2 + u * (self.cross() @ u) + g * u

    @classmethod
    def symmetric(cls, n: int, a: float, c: float, g: float) -> "QuadraticGame":
        cross = tuple(tuple(0.0 if i == j else c for j in range(n)) for i in range(n))
        return cls(a=(a,) * n, c=cross, g=(g,) * n)


def solve_one_step_nash(game: QuadraticGame, perturbation: float = 0.01) -> np.ndarray:
    """
    解 2a_i·u_i − Σ_{j≠i} c_ij·u_j = g_i

    返回前检查每个参与者单方面偏离 ±perturbation 都会严格降低自身支付。
    """
    system = np.diag(2.0 * np.asarray(game.a)) - game.cross()
    if np.linalg.matrix_rank(system) < game.n_players:
        raise SingularGameError("一阶条件方程组奇异：均衡不存在或不唯一")
    u_star = np.linalg.solve(system, np.asarray(game.g, dtype=float))

    base = game.payoffs(u_star)
    for i in range(game.n_players):
        for delta in (perturbation, -perturbation):
            deviated = u_star.copy()
            deviated[i] += delta
            if not game.payoffs(deviated)[i] < base[i]:
                raise SingularGameError(f"参与者 {i} 单方面偏离未使支付下降，解不是严格均衡")
    return u_star


# ========== 单交易者 LQ 逆向归纳 ==========

@dataclass(frozen=True)
class LQValuePolynomial:
    """V(S, q) = v_SS·S² + v_Sq·S·q + v_qq·q² + v_S·S + v_q·q + v_0"""
    v_SS: float
    v_Sq: float
    v_qq: float
    v_S: float
    v_q: float
    v_0: float

    def __call__(self, S: float, q: float) -> float:
        return (self.v_SS * S * S + self.v_Sq * S * q + self.v_qq * q * q
                + self.v_S * S + self.v_q * q + self.v_0)

    @classmethod
    def from_matrix(cls, W: np.ndarray) -> "LQValuePolynomial":
        """W 为 (S, q, 1) 上的对称矩阵"""
        return cls(v_SS=float(W[0, 0]), v_Sq=float(2 * W[0, 1]), v_qq=float(W[1, 1]),
                   v_S=float(2 * W[0, 2]), v_q=float(2 * W[1, 2]), v_0=float(W[2, 2]))


@dataclass(frozen=True)
class LinearPolicy:
    """ν*(S, q) = alpha + beta·S + delta·q"""
    alpha: float
    beta: float
    delta: float

    def __call__(self, S: float, q: float) -> float:
        return self.alpha + self.beta * S + self.delta * q


@dataclass
class LQRSolution:
    params: MarketParams
    policies: List[LinearPolicy] = field(default_factory=list)   # t = 0..T-1
    values: List[LQValuePolynomial] = field(default_factory=list)  # t = 0..T

    def action(self, S: float, q: float, t: int) -> float:
        return self.policies[t](S, q)

    def value(self, S: float, q: float, t: int) -> float:
        return self.values[t](S, q)


def _sym_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = np.outer(a, b)
    return 0.5 * (m + m.T)


def solve_lqr_market(params: MarketParams, gamma: float = 1.0) -> LQRSolution:
    """
    单交易者、线性冲击市场博弈的精确最优策略

    每一步把 Q(S, q, ν) 写成 z = (S, q, ν, 1) 上的二次型 zᵀHz，
    对 ν 取极大得到线性策略，再代回得到 (S, q, 1) 上的值函数矩阵。
    噪声的期望通过 E[S'²] = m² + σ²ΔT 精确计入。
    """
    if params.n_agents != 1:
        raise UnsupportedConfigError(f"只支持单交易者（n_agents={params.n_agents}）")
    if params.impact_kind != ImpactKind.LINEAR:
        raise UnsupportedConfigError("平方根冲击没有二次解析解")
    if gamma != 1.0:
        raise UnsupportedConfigError("只支持 gamma = 1")

    T, dt = params.horizon_T, params.dt
    a = 1.0 - params.kappa * dt
    c = params.kappa * params.theta_mr * dt
    b = params.b1 * dt
    noise_var = params.sigma ** 2 * dt

    # 下一状态 y = (S', q', 1) = A·z + (ε, 0, 0)
    A = np.array([
        [a, 0.0, b, c],
        [0.0, 1.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    e_S, e_q, e_nu, _ = np.eye(4)
    q_next = e_q + e_nu

    # 即时奖励 −ν·S − b1·ν² − b3·ΔT·(q + ν)²
    reward = -_sym_outer(e_nu, e_S) - params.b1 * np.outer(e_nu, e_nu) - params.b3 * dt * np.outer(q_next, q_next)

    W_next = np.zeros((3, 3))
    if not params.forced_liquidation:
        W_next[0, 1] = W_next[1, 0] = 0.5
        W_next[1, 1] = -params.b2

    policies: List[LinearPolicy] = [None] * T
    values: List[LQValuePolynomial] = [None] * (T + 1)
    values[T] = LQValuePolynomial.from_matrix(W_next)

    for t in reversed(range(T)):
        H = reward + A.T @ W_next @ A
        H[3, 3] += W_next[0, 0] * noise_var

        if params.forced_liquidation and t == T - 1:
            policy = LinearPolicy(alpha=0.0, beta=0.0, delta=-1.0)
        else:
            if H[2, 2] >= 0:
                raise UnsupportedConfigError(f"t={t} 处目标关于 ν 不是严格凹的")
            policy = LinearPolicy(alpha=float(-H[2, 3] / H[2, 2]),
                                  beta=float(-H[2, 0] / H[2, 2]),
                                  delta=float(-H[2, 1] / H[2, 2]))

        # z = B·(S, q, 1)
        B = np.array([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [policy.beta, policy.delta, policy.alpha],
            [0.0, 0.0, 1.0],
        ])
        W_next = B.T @ H @ B
        policies[t] = policy
        values[t] = LQValuePolynomial.from_matrix(W_next)

    return LQRSolution(params=params, policies=policies, values=values)
