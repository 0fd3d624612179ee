"""经验回放缓存"""

from collections import deque
from typing import Deque, Iterator, List

import numpy as np

from src.services.market_env import Transition
from src.utils.errors import UsageError


class ReplayBuffer:
    """
    有界 FIFO

    满了以后再插入会挤掉最早的转移；同一批次内无放回均匀抽样。
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise UsageError(f"回放缓存容量必须 >= 1：{capacity}")
        self.capacity = int(capacity)
        self._items: Deque[Transition] = deque(maxlen=self.capacity)

    def push(self, transition: Transition):
        self._items.append(transition)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self._items)

    def sample(self, size: int, rng: np.random.Generator) -> List[Transition]:
        """抽取 min(size, len) 个转移"""
        count = min(int(size), len(self._items))
        if count == 0:
            return []
        indices = rng.choice(len(self._items), size=count, replace=False)
        return [self._items[i] for i in indices]
