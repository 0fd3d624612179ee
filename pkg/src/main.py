"""Nash-DQN 最优执行博弈 - CLI 主入口"""

import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import List, Optional, Tuple

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from src import __version__
from src.agents.nash_model import NashQModel
from src.agents.trainer import train as run_training
from src.services.market_env import MarketGame
from src.utils.config import (
    OUTPUT_DIR_ENV,
    Config,
    dump_run_config,
    game_config_from_metadata,
    prepare_run,
    resolve_output_dir,
)
from src.utils.errors import CheckpointError, NashDQNError, NumericalError
from src.utils.figures import (
    DEFAULT_PRICES,
    DEFAULT_QBARS,
    evaluate_policy,
    inventory_grid,
    simulate_path_grid,
    write_heatmaps,
    write_paths,
    write_transitions,
)
from src.utils.run_log import RunLogger

app = typer.Typer(
    name="nash-dqn",
    help="Nash-DQN - 多交易者最优执行随机博弈的 Nash 均衡学习",
    add_completion=False
)

console = Console()


@contextmanager
def _cli_errors():
    """把领域异常映射为退出码：数值错误为 2，其余为 1"""
    try:
        yield
    except NumericalError as e:
        console.print(f"[bold red]❌ 数值错误：[/bold red] {e}")
        if e.diagnostics_path is not None:
            console.print(f"诊断文件：{e.diagnostics_path}")
        raise typer.Exit(code=2)
    except NashDQNError as e:
        console.print(f"[bold red]❌ 错误：[/bold red] {e}")
        raise typer.Exit(code=1)


def _default_out(checkpoint: Path, name: str) -> Path:
    """环境变量优先，否则放在检查点所在目录下"""
    base = os.getenv(OUTPUT_DIR_ENV)
    return Path(base) / name if base else Path(checkpoint).parent / name


def _load_for_eval(checkpoint: Path) -> Tuple[NashQModel, MarketGame, dict]:
    """读取检查点并重建对应的市场博弈"""
    model, metadata = NashQModel.load(checkpoint)
    market, init = game_config_from_metadata(metadata)
    if market.n_agents != model.n_agents:
        raise CheckpointError(f"检查点市场参数有 {market.n_agents} 个交易者，模型为 {model.n_agents} 个")
    if market.horizon_T != model.scaling.horizon:
        raise CheckpointError(f"检查点市场期限 T={market.horizon_T} 与模型归一化常数 {model.scaling.horizon} 不一致")
    return model, MarketGame(market, init), metadata


@app.command()
def train(
    config: Path = typer.Option(..., "--config", "-c", help="运行配置文件（YAML）"),
    verbose: bool = typer.Option(True, "--verbose/--quiet", help="打印训练进度"),
):
    """
    训练 Nash-DQN

    按配置文件运行 actor-critic 训练，把检查点、训练记录和日志写入 output_dir。
    """
    with _cli_errors():
        if not config.exists():
            console.print(f"[bold red]❌ 错误：[/bold red] 配置文件不存在：{config}")
            raise typer.Exit(code=1)
        cfg = Config(config).run_config
        output_dir = resolve_output_dir(cfg)
        logger = RunLogger(output_dir, verbose=verbose, console=console)
        run = prepare_run(cfg, output_dir)
        game = run.game

        logger.log(f"开始训练：N={game.n_agents}, T={game.horizon}, 回合数={cfg.train.episodes}, "
                   f"冲击={cfg.market.impact_kind.value}")
        result = run_training(game, run.model, cfg.train, output_dir=output_dir, logger=logger,
                              metadata=run.metadata)
        logger.log(f"训练完成，最终模型：{result.checkpoints[-1]}")

    console.print(f"[bold green]✅ 训练完成[/bold green] 输出目录：{output_dir}")


@app.command()
def heatmap(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="模型检查点（.ndq）"),
    price: Optional[List[float]] = typer.Option(None, "--price", help="固定价格，可重复；默认 6,8,10,12,14"),
    qbar: Optional[List[float]] = typer.Option(None, "--qbar", help="其他交易者库存，可重复；默认 -20,0,20"),
    q_min: float = typer.Option(-100.0, "--q-min", help="自身库存下限"),
    q_max: float = typer.Option(100.0, "--q-max", help="自身库存上限"),
    q_step: float = typer.Option(5.0, "--q-step", help="自身库存步长"),
    t_max: Optional[int] = typer.Option(None, "--t-max", help="最大时间点，默认 T-1"),
    out: Optional[Path] = typer.Option(None, "--out", help="输出目录"),
):
    """输出策略热力图与买卖切换阈值（CSV）"""
    with _cli_errors():
        model, game, _ = _load_for_eval(checkpoint)
        if q_step <= 0 or q_max < q_min:
            console.print("[bold red]❌ 错误：[/bold red] 库存网格无效（需要 q_step > 0 且 q_max >= q_min）")
            raise typer.Exit(code=1)
        last_t = game.horizon - 1 if t_max is None else t_max
        if not 0 <= last_t < game.horizon:
            console.print(f"[bold red]❌ 错误：[/bold red] --t-max 必须在 [0, {game.horizon - 1}] 内")
            raise typer.Exit(code=1)

        out_dir = out or _default_out(checkpoint, "heatmaps")
        written = write_heatmaps(model, out_dir, list(price or DEFAULT_PRICES), list(qbar or DEFAULT_QBARS),
                                 inventory_grid(q_min, q_max, q_step), list(range(last_t + 1)))

    console.print(f"[bold green]✅ 已写出 {len(written)} 个文件[/bold green] → {out_dir}")


@app.command()
def paths(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="模型检查点（.ndq）"),
    rows: int = typer.Option(3, "--rows", help="行数（不同初始库存）"),
    cols: int = typer.Option(3, "--cols", help="列数（不同初始价格与噪声）"),
    seed: int = typer.Option(0, "--seed", help="随机种子"),
    out: Optional[Path] = typer.Option(None, "--out", help="输出目录"),
):
    """模拟贪心策略下的库存与价格路径（CSV）"""
    with _cli_errors():
        if rows < 1 or cols < 1:
            console.print("[bold red]❌ 错误：[/bold red] --rows 与 --cols 必须 >= 1")
            raise typer.Exit(code=1)
        model, game, _ = _load_for_eval(checkpoint)
        out_dir = out or _default_out(checkpoint, "paths")
        written = write_paths(simulate_path_grid(game, model, rows, cols, seed), out_dir)

    console.print(f"[bold green]✅ 已写出 {len(written)} 个文件[/bold green] → {out_dir}")


@app.command(name="eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="模型检查点（.ndq）"),
    episodes: int = typer.Option(100, "--episodes", help="评估回合数"),
    seed: int = typer.Option(0, "--seed", help="随机种子"),
    dump: Optional[Path] = typer.Option(None, "--dump", help="把评估转移写成 JSON 行文件"),
    out: Optional[Path] = typer.Option(None, "--out", help="输出目录"),
):
    """评估贪心策略：平均回报、标准误、终端库存与 Bellman 残差"""
    with _cli_errors():
        if episodes < 0:
            console.print("[bold red]❌ 错误：[/bold red] --episodes 必须 >= 0")
            raise typer.Exit(code=1)
        model, game, metadata = _load_for_eval(checkpoint)
        summary, rollouts = evaluate_policy(game, model, episodes, seed, float(metadata.get("gamma", 1.0)))

        out_dir = out or _default_out(checkpoint, "eval")
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / "eval_summary.json"
        summary_path.write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        if dump is not None:
            write_transitions(rollouts, dump)

    table = Table(title=f"评估结果（{summary.episodes} 个回合）")
    table.add_column("交易者", justify="right")
    table.add_column("平均回报", justify="right")
    table.add_column("标准误", justify="right")
    table.add_column("平均终端库存", justify="right")
    for i, (mean, err, q_T) in enumerate(zip(summary.mean_return, summary.stderr_return,
                                             summary.mean_terminal_inventory)):
        table.add_row(str(i + 1), f"{mean:.4f}", f"{err:.4f}", f"{q_T:.4g}")
    console.print(table)
    if summary.mean_bellman_residual is not None:
        console.print(f"平均 Bellman 残差：{summary.mean_bellman_residual:.6g}")
    console.print(f"[dim]汇总已写入 {summary_path}[/dim]")


@app.command()
def version():
    """显示版本信息"""
    console.print(f"[bold blue]Nash-DQN[/bold blue] v{__version__}")
    console.print()
    console.print("技术栈：")
    console.print("  - Python 3.10+")
    console.print("  - NumPy (网络前向 / 反向与优化器)")
    console.print("  - pandas (图表数据输出)")
    console.print("  - Typer + Rich (命令行)")
    console.print()


@app.command()
def config_status(
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="运行配置文件，默认 ./config.yaml"),
):
    """显示解析后的配置（已应用环境变量覆盖）"""
    with _cli_errors():
        cfg_file = Config(config)
        cfg = cfg_file.run_config

    source = cfg_file.config_path if cfg_file.config_path.exists() else "（未找到，使用默认值）"
    console.print("[bold]当前配置状态[/bold]\n")
    console.print(f"配置文件：{source}")
    console.print(f"输出目录：{resolve_output_dir(cfg)}")
    if os.getenv(OUTPUT_DIR_ENV):
        console.print(f"[dim]（由环境变量 {OUTPUT_DIR_ENV} 覆盖）[/dim]")
    console.print()
    console.print(Panel(dump_run_config(cfg).rstrip(), title="RunConfig", border_style="blue"))


if __name__ == "__main__":
    app()
