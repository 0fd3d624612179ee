"""配置、异常、日志与图表数据输出"""
