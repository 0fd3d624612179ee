#!/usr/bin/env python3
"""
批量复现图表数据

依次训练线性冲击与平方根冲击两组实验，然后输出：
- 策略热力图与买卖切换阈值（每个价格 × q̄ 一份）
- 贪心策略下的库存 / 价格路径网格
- 评估汇总

已经训练完成的实验会记录在状态文件中，再次运行时直接复用 model.ndq。

使用方法：
    python3 scripts/reproduce_figures.py

配置：
    编辑脚本顶部的 CONFIG 配置项
"""

import json
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

# ==================== 配置区域 ====================

CONFIG = {
    # 输出根目录，每个实验一个子目录
    "output_root": "runs/figures",
    "state_file": "runs/figures/reproduce_state.json",

    # 实验列表：名称 -> 冲击形式
    "experiments": {
        "linear": "linear",
        "square_root": "square_root",
    },

    # 训练（0=使用默认 15000 回合）
    "episodes": 0,
    "seed": 0,

    # 图表网格
    "prices": [6.0, 8.0, 10.0, 12.0, 14.0],
    "qbars": [-20.0, 0.0, 20.0],
    "q_min": -100.0,
    "q_max": 100.0,
    "q_step": 5.0,
    "path_rows": 3,
    "path_cols": 3,
    "eval_episodes": 100,

    "verbose": True,
}

# ==================== 不要修改以下代码 ====================

import numpy as np

from src.agents.nash_model import NashQModel
from src.agents.trainer import train
from src.services.market_env import ImpactKind, MarketGame
from src.utils.config import RunConfig, prepare_run
from src.utils.figures import evaluate_policy, inventory_grid, simulate_path_grid, write_heatmaps, write_paths
from src.utils.run_log import RunLogger


class ReproduceStateManager:
    """实验完成状态"""

    def __init__(self, state_file):
        self.state_file = Path(state_file)
        self.state = self._load_state()

    def _load_state(self):
        if self.state_file.exists():
            try:
                with open(self.state_file, "r", encoding="utf-8") as f:
                    return json.load(f)
            except json.JSONDecodeError:
                pass
        return {"trained": {}}

    def save_state(self):
        self.state_file.parent.mkdir(parents=True, exist_ok=True)
        with open(self.state_file, "w", encoding="utf-8") as f:
            json.dump(self.state, f, indent=2, ensure_ascii=False)

    def is_trained(self, name, model_path):
        return name in self.state["trained"] and Path(model_path).exists()

    def mark_trained(self, name, model_path):
        self.state["trained"][name] = {"model": str(model_path), "time": datetime.now().isoformat()}
        self.save_state()


class FigureReproducer:
    """训练并输出全部图表数据"""

    def __init__(self, config):
        self.config = config
        self.root = Path(config["output_root"])
        self.state = ReproduceStateManager(config["state_file"])
        self.logger = RunLogger(verbose=config["verbose"])

    def log(self, message):
        self.logger.log(message)

    def run_config(self, name, impact):
        cfg = RunConfig(output_dir=str(self.root / name))
        train_cfg = replace(cfg.train, seed=self.config["seed"])
        if self.config["episodes"]:
            train_cfg = replace(train_cfg, episodes=self.config["episodes"])
        return replace(cfg, market=replace(cfg.market, impact_kind=ImpactKind(impact)), train=train_cfg)

    def train_experiment(self, name, cfg):
        out_dir = Path(cfg.output_dir)
        model_path = out_dir / "model.ndq"
        if self.state.is_trained(name, model_path):
            self.log(f"[{name}] 已训练，复用 {model_path}")
            return model_path

        self.log(f"[{name}] 开始训练：{cfg.train.episodes} 回合，冲击={cfg.market.impact_kind.value}")
        run = prepare_run(cfg, out_dir)
        train(run.game, run.model, cfg.train, output_dir=out_dir,
              logger=RunLogger(out_dir, verbose=self.config["verbose"]), metadata=run.metadata)
        self.state.mark_trained(name, model_path)
        return model_path

    def emit_figures(self, name, cfg, model_path):
        model, _ = NashQModel.load(model_path)
        game = MarketGame(cfg.market, cfg.init)
        out_dir = Path(cfg.output_dir)

        heat = write_heatmaps(model, out_dir / "heatmaps", self.config["prices"], self.config["qbars"],
                              inventory_grid(self.config["q_min"], self.config["q_max"], self.config["q_step"]),
                              list(range(game.horizon)))
        self.log(f"[{name}] 热力图：{len(heat)} 个文件")

        episodes = simulate_path_grid(game, model, self.config["path_rows"], self.config["path_cols"],
                                      self.config["seed"])
        path_files = write_paths(episodes, out_dir / "paths")
        self.log(f"[{name}] 路径：{len(path_files)} 个文件")

        summary, _ = evaluate_policy(game, model, self.config["eval_episodes"], self.config["seed"],
                                     cfg.train.gamma)
        (out_dir / "eval").mkdir(parents=True, exist_ok=True)
        (out_dir / "eval" / "eval_summary.json").write_text(
            json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        self.log(f"[{name}] 平均回报：{np.round(summary.mean_return, 3).tolist()}")

    def run_all(self):
        self.log("=" * 60)
        self.log("开始复现图表数据")
        self.log("=" * 60)
        for name, impact in self.config["experiments"].items():
            cfg = self.run_config(name, impact)
            model_path = self.train_experiment(name, cfg)
            self.emit_figures(name, cfg, model_path)
        self.log("全部完成")


def main():
    FigureReproducer(CONFIG).run_all()


if __name__ == '__main__':
    main()
