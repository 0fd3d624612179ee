"""
图表数据输出

只输出数据文件（CSV / JSON），不负责绘图：
- 策略热力图：固定价格与其他交易者库存 q̄，μ₁ 随 (自身库存, 时间) 的矩阵，及买卖切换阈值曲线
- 库存路径：贪心策略下按行列网格模拟的库存 / 价格时间序列
- 评估汇总：每个交易者的平均回报、标准误、平均终端库存与平均 Bellman 残差
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.agents.nash_model import NashQModel, StateBatch
from src.agents.trainer import sample_loss
from src.services.market_env import (
    JointAction,
    MarketGame,
    MarketState,
    Transition,
    episode_return,
    sample_initial,
)

DEFAULT_PRICES = (6.0, 8.0, 10.0, 12.0, 14.0)
DEFAULT_QBARS = (-20.0, 0.0, 20.0)


# ========== 热力图 ==========

def inventory_grid(q_min: float, q_max: float, q_step: float) -> np.ndarray:
    """[q_min, q_max] 上步长 q_step 的网格，包含两端"""
    count = int(np.floor((q_max - q_min) / q_step + 1e-9)) + 1
    return q_min + q_step * np.arange(max(count, 1))


def heatmap_states(price: float, qbar_other: float, q_grid: Sequence[float], t_grid: Sequence[int],
                   n_agents: int) -> List[MarketState]:
    """按 (q, t) 行优先展开的状态列表；交易者 1 的库存取 q，其余都取 q̄"""
    others = [float(qbar_other)] * (n_agents - 1)
    return [MarketState.from_arrays(price, t, [q] + others) for q in q_grid for t in t_grid]


def policy_heatmap(model: NashQModel, price: float, qbar_other: float,
                   q_grid: Sequence[float], t_grid: Sequence[int]) -> pd.DataFrame:
    """
    μ₁ 热力图

    Args:
        model: 已训练模型
        price: 固定价格
        qbar_other: 其他交易者的库存
        q_grid: 自身库存网格（行）
        t_grid: 时间网格（列）

    Returns:
        DataFrame，行索引为自身库存，列为 t=k
    """
    states = heatmap_states(price, qbar_other, q_grid, t_grid, model.n_agents)
    mu = model.nash_actions(StateBatch.from_states(states))[:, 0]
    frame = pd.DataFrame(
        mu.reshape(len(q_grid), len(t_grid)),
        index=pd.Index([float(q) for q in q_grid]),
        columns=[f"t={int(t)}" for t in t_grid],
    )
    frame.index.name = f"q_own (price={price:g}; qbar_other={qbar_other:g})"
    return frame


def buy_sell_threshold(heatmap: pd.DataFrame) -> pd.Series:
    """
    每个时间点上 μ₁ 由买（> 0）转为卖（<= 0）的库存位置

    沿库存升序找第一处符号变化并线性插值；没有变化时为 NaN。
    """
    q = heatmap.index.to_numpy(dtype=float)
    values = {}
    for column in heatmap.columns:
        mu = heatmap[column].to_numpy(dtype=float)
        threshold = np.nan
        for k in range(len(q) - 1):
            if mu[k] > 0 >= mu[k + 1]:
                threshold = q[k] + (q[k + 1] - q[k]) * mu[k] / (mu[k] - mu[k + 1])
                break
        values[column] = threshold
    series = pd.Series(values, name="q_threshold")
    series.index.name = heatmap.index.name.replace("q_own", "t", 1)
    return series


def write_heatmaps(model: NashQModel, out_dir: Path, prices: Sequence[float], qbars: Sequence[float],
                   q_grid: Sequence[float], t_grid: Sequence[int]) -> List[Path]:
    """每个 (price, q̄) 写一份热力图 CSV 与一份阈值 CSV"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for price in prices:
        for qbar in qbars:
            frame = policy_heatmap(model, price, qbar, q_grid, t_grid)
            tag = f"price{price:g}_qbar{qbar:g}"
            heat_path = out_dir / f"heatmap_{tag}.csv"
            frame.to_csv(heat_path)
            threshold_path = out_dir / f"threshold_{tag}.csv"
            buy_sell_threshold(frame).to_csv(threshold_path)
            written.extend([heat_path, threshold_path])
    return written


# ========== 库存路径 ==========

def greedy_policy(model: NashQModel):
    """σ = 0 的贪心策略"""
    return model.nash_action


def path_frame(transitions: Sequence[Transition]) -> pd.DataFrame:
    """一条路径的时间序列：t, price, q_1..q_N"""
    states = [transitions[0].state] + [tr.next_state for tr in transitions]
    n = states[0].n_agents
    data: Dict[str, list] = {"t": [s.step for s in states], "price": [s.price for s in states]}
    for i in range(n):
        data[f"q_{i + 1}"] = [s.inventories[i] for s in states]
    return pd.DataFrame(data)


@dataclass
class PathEpisode:
    row: int
    col: int
    initial_price: float
    noise_seed: int
    transitions: List[Transition] = field(default_factory=list)


def simulate_path_grid(game: MarketGame, model: NashQModel, n_rows: int, n_cols: int,
                       seed: int) -> List[PathEpisode]:
    """
    行列网格模拟

    初始库存按行抽取（同行各列相同），初始价格与噪声种子按列抽取（同列各行相同）。
    """
    rng = np.random.default_rng(seed)
    row_inventories = [sample_initial(game.params, game.init, rng).inventories for _ in range(n_rows)]
    col_prices = [sample_initial(game.params, game.init, rng).price for _ in range(n_cols)]
    col_seeds = [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=n_cols)]

    policy = greedy_policy(model)
    episodes = []
    for r in range(n_rows):
        for c in range(n_cols):
            start = MarketState(col_prices[c], 0, row_inventories[r])
            transitions = game.rollout(policy, np.random.default_rng(col_seeds[c]), start)
            episodes.append(PathEpisode(r, c, col_prices[c], col_seeds[c], transitions))
    return episodes


def write_paths(episodes: Sequence[PathEpisode], out_dir: Path) -> List[Path]:
    """每个回合一份 CSV，外加 index.csv"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    index_rows = []
    for ep in episodes:
        path = out_dir / f"path_r{ep.row}_c{ep.col}.csv"
        path_frame(ep.transitions).to_csv(path, index=False)
        written.append(path)
        index_rows.append({"row": ep.row, "col": ep.col, "initial_price": ep.initial_price,
                           "noise_seed": ep.noise_seed, "file": path.name})
    index_path = out_dir / "index.csv"
    pd.DataFrame(index_rows, columns=["row", "col", "initial_price", "noise_seed", "file"]).to_csv(
        index_path, index=False)
    written.append(index_path)
    return written


# ========== 评估 ==========

@dataclass
class EvalSummary:
    episodes: int
    mean_return: List[float] = field(default_factory=list)
    stderr_return: List[float] = field(default_factory=list)
    mean_terminal_inventory: List[float] = field(default_factory=list)
    mean_bellman_residual: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def evaluate_policy(game: MarketGame, model: NashQModel, episodes: int, seed: int,
                    gamma: float = 1.0) -> Tuple[EvalSummary, List[List[Transition]]]:
    """
    贪心策略评估

    Returns:
        (汇总, 每个回合的转移列表)
    """
    rng = np.random.default_rng(seed)
    policy = greedy_policy(model)
    rollouts = [game.rollout(policy, rng) for _ in range(episodes)]
    if not rollouts:
        return EvalSummary(episodes=0), []

    returns = np.array([episode_return(tr, gamma, game.n_agents) for tr in rollouts])
    terminal = np.array([tr[-1].next_state.inventories for tr in rollouts])
    stderr = returns.std(axis=0, ddof=1) / np.sqrt(episodes) if episodes > 1 else np.zeros(game.n_agents)
    residuals = [sample_loss(t, model, gamma) for tr in rollouts for t in tr]
    summary = EvalSummary(
        episodes=episodes,
        mean_return=[float(v) for v in returns.mean(axis=0)],
        stderr_return=[float(v) for v in stderr],
        mean_terminal_inventory=[float(v) for v in terminal.mean(axis=0)],
        mean_bellman_residual=float(np.mean(residuals)),
    )
    return summary, rollouts


def transition_record(episode: int, transition: Transition) -> Dict[str, Any]:
    return {
        "episode": episode,
        "state": {"price": transition.state.price, "step": transition.state.step,
                  "inventories": list(transition.state.inventories)},
        "action": list(transition.action.trades),
        "rewards": list(transition.rewards),
        "next_state": {"price": transition.next_state.price, "step": transition.next_state.step,
                       "inventories": list(transition.next_state.inventories)},
        "terminal": transition.terminal,
    }


def write_transitions(rollouts: Sequence[Sequence[Transition]], path: Path) -> Path:
    """按 JSON 行写出评估用转移，便于离线重算回报"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for episode, transitions in enumerate(rollouts):
            for tr in transitions:
                f.write(json.dumps(transition_record(episode, tr), sort_keys=True) + "\n")
    return path


def read_transitions(path: Path) -> List[List[Transition]]:
    """write_transitions 的逆操作"""
    def _state(d):
        return MarketState.from_arrays(d["price"], d["step"], d["inventories"])

    rollouts: Dict[int, List[Transition]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            tr = Transition(_state(d["state"]), JointAction.from_array(d["action"]),
                            tuple(float(r) for r in d["rewards"]), _state(d["next_state"]), bool(d["terminal"]))
            rollouts.setdefault(int(d["episode"]), []).append(tr)
    return [rollouts[k] for k in sorted(rollouts)]
