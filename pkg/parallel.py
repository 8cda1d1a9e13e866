import os
import math
from typing import List, Optional

from settings import settings


def resolve_n_jobs(n_jobs: Optional[int] = None) -> int:
    """解析并行进程数，None取环境设置，≤0表示全部CPU"""
    workers = settings.N_JOBS if n_jobs is None else n_jobs
    if workers is None or workers < 1:
        workers = os.cpu_count() or 1
    return workers


def chunked(items: list, n_jobs: Optional[int] = None, per_worker: int = 4) -> List[list]:
    """把任务切成若干连续批次，批次顺序即结果顺序"""
    if not items:
        return []
    n_batches = max(1, min(len(items), resolve_n_jobs(n_jobs) * per_worker))
    size = math.ceil(len(items) / n_batches)
    return [items[i:i + size] for i in range(0, len(items), size)]
