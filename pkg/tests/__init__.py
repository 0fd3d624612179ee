"""Nash-DQN 测试"""
