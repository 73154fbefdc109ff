import os
import pathlib
import sys

import numpy as np
import pytest

# 確保可以 import workspace 根目錄的模組
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1]))


def pytest_configure(config):
    # 單執行緒與固定後端，讓測試結果可重現
    os.environ.setdefault('VERIFY_OBBT_WORKERS', '1')
    os.environ.setdefault('VERIFY_SAMPLE_WORKERS', '1')
    os.environ.setdefault('VERIFY_MILP_BACKEND', 'highs')
    os.environ.pop('SENTRY_DSN', None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_lasso():
    from generators import gen_lasso
    return gen_lasso(p=3, n=4, lam=0.1, seed=3, signals=20)


@pytest.fixture
def small_flow():
    from generators import gen_network_flow
    return gen_network_flow(n_s=3, n_d=2, edge_prob=1.0, seed=0)
