"""
表格加载模块
负责CSV的编码探测、表头校验与完整精度写出，数值列按字符串读入后逐位精确解析
"""

import math
import os
import logging
from typing import Sequence

import chardet
import pandas as pd

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')

# 编码探测只读取文件开头部分
_ENCODING_SAMPLE_BYTES = 64 * 1024


class DataError(Exception):
    """输入数据错误，命令行退出码为2"""
    pass


class MissingInputError(DataError):
    """输入文件不存在"""
    pass


class TableLoader:
    """CSV表格加载器，统一处理编码探测、表头校验"""

    def load(self, file_path: str, required_columns: Sequence[str],
             optional_columns: Sequence[str] = ()) -> pd.DataFrame:
        """
        加载CSV文件，所有列按字符串读取，由调用方负责类型转换

        Args:
            file_path: 文件路径
            required_columns: 必须存在的列
            optional_columns: 可缺失的列，缺失时补为空字符串

        Returns:
            DataFrame（仅包含声明过的列，按声明顺序）

        Raises:
            MissingInputError: 文件不存在
            DataError: 缺少必需列
        """
        if not os.path.exists(file_path):
            raise MissingInputError(f"File not found: {file_path}")

        encoding = self._detect_encoding(file_path)
        try:
            frame = pd.read_csv(file_path, dtype=str, keep_default_na=False,
                                encoding=encoding, skipinitialspace=True)
        except pd.errors.EmptyDataError:
            raise DataError(f"Empty file without header: {file_path}")
        except (UnicodeDecodeError, pd.errors.ParserError) as e:
            raise DataError(f"Failed to parse CSV file {file_path}: {e}")

        frame.columns = [str(c).strip() for c in frame.columns]
        missing = [c for c in required_columns if c not in frame.columns]
        if missing:
            raise DataError(f"{file_path}: missing required columns {missing}")
        for column in optional_columns:
            if column not in frame.columns:
                frame[column] = ''

        logger.debug(f"加载文件 {file_path}，编码 {encoding}，共 {len(frame)} 行")
        return frame[list(required_columns) + list(optional_columns)]

    def write(self, frame: pd.DataFrame, file_path: str) -> None:
        """写出CSV，浮点数保留完整精度以保证重新读入后逐位一致"""
        directory = os.path.dirname(file_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        frame.to_csv(file_path, index=False, lineterminator='\n')
        logger.debug(f"写出文件 {file_path}，共 {len(frame)} 行")

    def _detect_encoding(self, file_path: str) -> str:
        """
        检测文件编码

        Args:
            file_path: 文件路径

        Returns:
            编码格式
        """
        try:
            with open(file_path, 'rb') as file:
                raw_data = file.read(_ENCODING_SAMPLE_BYTES)
                result = chardet.detect(raw_data)
                encoding = result['encoding'] or 'utf-8'
                # ASCII是UTF-8的子集，截断采样可能误判
                return 'utf-8' if encoding.lower() == 'ascii' else encoding
        except OSError:
            return 'utf-8'


def _parse_float(text: str) -> float:
    text = text.strip()
    if not text:
        return math.nan
    try:
        return float(text)
    except ValueError:
        return math.nan


def to_float(values: pd.Series) -> pd.Series:
    """字符串列转浮点，无法解析或为空的值为NaN；使用 float() 保证与写出的 repr 逐位一致"""
    return pd.Series([_parse_float(v) for v in values.astype(str)], index=values.index, dtype=float)
