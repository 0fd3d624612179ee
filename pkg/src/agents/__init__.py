"""Nash-DQN 模型、回放缓存与训练"""
