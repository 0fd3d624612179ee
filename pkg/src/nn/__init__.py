"""网络与检查点模块"""
