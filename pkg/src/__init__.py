"""多交易者最优执行博弈的 Nash-DQN 程序"""

__version__ = "0.1.0"
