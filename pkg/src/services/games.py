"""博弈接口与单步二次博弈环境"""

from typing import Protocol

import numpy as np

from src.services.market_env import FeatureScaling, JointAction, MarketState, Transition
from src.services.oracles import QuadraticGame


class StochasticGame(Protocol):
    """训练器消费的博弈接口（MarketGame 与 OneShotQuadraticGame 都满足）"""

    @property
    def n_agents(self) -> int: ...

    @property
    def horizon(self) -> int: ...

    @property
    def scaling(self) -> FeatureScaling: ...

    def reset(self, rng: np.random.Generator) -> MarketState: ...

    def clamp(self, state: MarketState, action: JointAction) -> JointAction: ...

    def step(self, state: MarketState, action: JointAction, rng: np.random.Generator) -> Transition: ...


class OneShotQuadraticGame:
    """
    无状态、一步结束的博弈，奖励为 QuadraticGame 的支付 f_i(u)

    状态固定为 (price=1, step=0, 库存全 0)，动作限制在 [−action_bound, action_bound]。
    """

    def __init__(self, game: QuadraticGame, action_bound: float = 10.0):
        self.game = game
        self.action_bound = float(action_bound)

    @property
    def n_agents(self) -> int:
        return self.game.n_players

    @property
    def horizon(self) -> int:
        return 1

    @property
    def scaling(self) -> FeatureScaling:
        return FeatureScaling(price_scale=1.0, horizon=1, inventory_scale=self.action_bound)

    def reset(self, rng: np.random.Generator) -> MarketState:
        return MarketState.from_arrays(1.0, 0, np.zeros(self.n_agents))

    def clamp(self, state: MarketState, action: JointAction) -> JointAction:
        return JointAction.from_array(np.clip(action.as_array(), -self.action_bound, self.action_bound))

    def step(self, state: MarketState, action: JointAction, rng: np.random.Generator) -> Transition:
        rewards = self.game.payoffs(action.as_array())
        next_state = MarketState(state.price, state.step + 1, state.inventories)
        return Transition(state, action, tuple(float(r) for r in rewards), next_state, True)
