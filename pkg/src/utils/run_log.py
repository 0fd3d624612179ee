"""运行日志"""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, List, Mapping, Optional

from rich.console import Console


class RunLogger:
    """
    训练 / 评估日志

    - log()：带时间戳的文本行，打印到控制台并追加到 run.log
    - record()：结构化记录，每行一个 JSON 对象（键排序、无时间戳），
      追加到 train_log.jsonl；同一种子的两次运行得到逐字节相同的文件
    """

    def __init__(self, output_dir: Optional[Path] = None, verbose: bool = True,
                 console: Optional[Console] = None, record_name: str = "train_log.jsonl"):
        self.verbose = verbose
        self.console = console or Console()
        self.log_lines: List[str] = []
        self.log_path: Optional[Path] = None
        self.record_path: Optional[Path] = None
        if output_dir is not None:
            output_dir = Path(output_dir)
            output_dir.mkdir(parents=True, exist_ok=True)
            self.log_path = output_dir / "run.log"
            self.record_path = output_dir / record_name
            # 新的一次运行从空记录文件开始
            self.record_path.write_text("", encoding="utf-8")

    def log(self, message: str, verbose: Optional[bool] = None):
        """记录日志"""
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        log_line = f"[{timestamp}] {message}"
        self.log_lines.append(log_line)
        if self.verbose if verbose is None else verbose:
            self.console.print(log_line, markup=False, highlight=False)
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as f:
                f.write(log_line + "\n")

    def record(self, data: Mapping[str, Any]):
        """追加一条结构化记录"""
        if self.record_path is None:
            return
        with open(self.record_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(dict(data), sort_keys=True) + "\n")
