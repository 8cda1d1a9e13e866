import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """
    从根种子派生命名随机子流

    相同的 (root, names) 总是得到相同的32位种子，
    与并行度、调用顺序无关。

    Args:
        root: 根种子
        names: 子流名称，如 ('forest', 'rf_a', 3)

    Returns:
        32位整数种子
    """
    key = '/'.join([str(int(root))] + [str(n) for n in names])
    digest = hashlib.md5(key.encode('utf-8')).digest()
    return int.from_bytes(digest, 'big') % (2**32)


def rng_for(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
