"""
运行清单模块
记录每个阶段的配置摘要、输入输出文件摘要与版本，不含时间戳以保证重跑逐字节一致
"""

import os
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from settings import RunConfig, PIPELINE_VERSION

# 获取日志记录器
logger = logging.getLogger(f'valuation.{__name__}')
audit_logger = logging.getLogger('audit')

STAGE_ORDER = ('synth', 'detect-stops', 'infer-homes', 'build-features', 'train', 'evaluate',
               'explain', 'run-listprice', 'run-tax')


def file_digest(path: str) -> str:
    """文件内容的sha256"""
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            h.update(block)
    return h.hexdigest()


@dataclass
class StageRecord:
    stage: str
    entries: Dict[str, str] = field(default_factory=dict)

    def lines(self) -> List[str]:
        return [f"[{self.stage}]"] + [f"{k}={self.entries[k]}" for k in sorted(self.entries)]


class RunManifest:
    """out/manifest.txt：每个阶段一节，重跑某阶段时替换该节"""

    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.path = os.path.join(output_dir, 'manifest.txt')

    def _relative(self, path: str) -> str:
        rel = os.path.relpath(path, self.output_dir)
        return path if rel.startswith('..') else rel.replace(os.sep, '/')

    def read(self) -> Dict[str, StageRecord]:
        records: Dict[str, StageRecord] = {}
        if not os.path.exists(self.path):
            return records
        current = None
        with open(self.path, 'r', encoding='utf-8') as f:
            for line in f:
                line = line.strip()
                if line.startswith('[') and line.endswith(']'):
                    current = StageRecord(line[1:-1])
                    records[current.stage] = current
                elif current is not None and '=' in line:
                    key, value = line.split('=', 1)
                    current.entries[key] = value
        return records

    def record(self, stage: str, config: RunConfig, inputs: Sequence[str], outputs: Sequence[str]) -> StageRecord:
        """
        记录一个完成的阶段

        Args:
            stage: 阶段名
            config: 运行配置
            inputs: 输入文件路径
            outputs: 输出文件路径

        Returns:
            写入的阶段记录
        """
        entry = StageRecord(stage)
        entry.entries['config_digest'] = config.digest()
        entry.entries['config.resident_rule'] = config.resident_rule
        entry.entries['config.commuting_mode'] = config.commuting_mode
        entry.entries['config.seed'] = str(config.seed)
        for path in inputs:
            entry.entries[f"input.{self._relative(path)}"] = file_digest(path)
        for path in outputs:
            entry.entries[f"output.{self._relative(path)}"] = file_digest(path)
        entry.entries['version.pipeline'] = PIPELINE_VERSION
        entry.entries['version.numpy'] = np.__version__
        entry.entries['version.pandas'] = pd.__version__

        records = self.read()
        records[stage] = entry
        ordered = sorted(records.values(),
                         key=lambda r: (STAGE_ORDER.index(r.stage) if r.stage in STAGE_ORDER else len(STAGE_ORDER),
                                        r.stage))
        os.makedirs(self.output_dir, exist_ok=True)
        with open(self.path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n\n'.join('\n'.join(r.lines()) for r in ordered) + '\n')

        audit_logger.info(f"stage={stage} config_digest={entry.entries['config_digest']} "
                          f"outputs={','.join(self._relative(p) for p in outputs)}")
        logger.debug(f"运行清单已更新: {self.path} [{stage}]")
        return entry

    def _absolute(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.output_dir, path)

    def is_current(self, stage: str, config: RunConfig) -> bool:
        """
        阶段结果是否可复用：配置摘要一致，且记录的全部输入与输出文件摘要与磁盘上一致

        Args:
            stage: 阶段名
            config: 当前运行配置

        Returns:
            可复用时为True
        """
        record = self.read().get(stage)
        if record is None or record.entries.get('config_digest') != config.digest():
            return False
        files = [(key.split('.', 1)[1], digest) for key, digest in record.entries.items()
                 if key.startswith(('input.', 'output.'))]
        for path, digest in files:
            path = self._absolute(path)
            if not os.path.exists(path) or file_digest(path) != digest:
                logger.debug(f"阶段 {stage} 的文件已变化: {path}")
                return False
        return True
