import logging
import os
from datetime import datetime

LOG_FORMAT = '[%(asctime)s] [%(levelname)s] [%(module)s] %(message)s'


def _reset(logger: logging.Logger) -> None:
    # 重复初始化时关闭旧的处理器，避免文件句柄泄漏与日志重复
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


def _file_handler(path: str, level: int, formatter: logging.Formatter) -> logging.FileHandler:
    handler = logging.FileHandler(path, encoding='utf-8')
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logger() -> logging.Logger:
    """
    配置流水线日志

    valuation 记录器：按日文件（DEBUG）+ stderr 控制台（LOG_LEVEL）；
    audit 记录器：audit.log，每个完成的阶段一行。日志不写入输出目录。
    """
    # 在函数内部导入settings以避免循环导入
    from settings import settings

    log_path = settings.LOG_PATH
    os.makedirs(log_path, exist_ok=True)
    formatter = logging.Formatter(LOG_FORMAT)

    logger = logging.getLogger('valuation')
    logger.setLevel(logging.DEBUG)
    _reset(logger)
    log_file = os.path.join(log_path, f'app_{datetime.now().strftime("%Y%m%d")}.log')
    logger.addHandler(_file_handler(log_file, logging.DEBUG, formatter))

    # 控制台输出到stderr，stdout只留给命令结果
    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, str(settings.LOG_LEVEL).upper(), logging.INFO))
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    audit_logger = logging.getLogger('audit')
    audit_logger.setLevel(logging.INFO)
    audit_logger.propagate = False
    _reset(audit_logger)
    audit_logger.addHandler(_file_handler(os.path.join(log_path, 'audit.log'), logging.INFO, formatter))

    return logger


# 初始化全局日志记录器
logger = setup_logger()
