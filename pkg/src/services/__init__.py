"""市场博弈环境与解析基准解"""
