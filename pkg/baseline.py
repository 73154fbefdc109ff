"""Sample-maximum lower bound on the worst-case fixed-point residual."""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from model_ir import ProblemFamily, ModelIRError, residual_series, sample_init, sample_params, simulate
from utils import env_int

logger = logging.getLogger(__name__)

SAMPLE_WORKERS = env_int('VERIFY_SAMPLE_WORKERS', 4)


@dataclass
class SampleMaxResult:
    """values[k-1] is the largest sampled residual at iteration k; points[k-1] is the (x, s0) attaining it."""
    values: np.ndarray
    points: List[Tuple[np.ndarray, np.ndarray]]
    N: int
    seed: int

    def at(self, K: int) -> float:
        return float(self.values[K - 1])

    def point(self, K: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.points[K - 1]


def sample_max(family: ProblemFamily, N: int, K: int, seed: int = 0,
               workers: Optional[int] = None) -> SampleMaxResult:
    if N < 1:
        raise ModelIRError('sample count must be >= 1, got %d' % N)
    if K < 1:
        raise ModelIRError('K must be >= 1, got %d' % K)
    rng = np.random.default_rng(seed)
    xs = sample_params(family, rng, N)
    s0s = sample_init(family, rng, N)

    def _run(i: int) -> np.ndarray:
        return residual_series(simulate(family, xs[i], s0s[i], K))

    with ThreadPoolExecutor(max_workers=max(1, workers or SAMPLE_WORKERS)) as ex:
        series = np.array(list(ex.map(_run, range(N))))
    best = np.argmax(series, axis=0)
    values = series[best, np.arange(K)]
    points = [(xs[i].copy(), s0s[i].copy()) for i in best]
    logger.info('sample max over %d draws: K=%d residual %.6g', N, K, values[-1])
    return SampleMaxResult(values, points, N, seed)
