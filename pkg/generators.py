"""Problem-family generators: sparse coding (ISTA / FISTA), min-cost network flow (PDHG) and toys.

Every generator is a pure function of its seed.
"""
import logging
import re
from typing import Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np
from scipy.optimize import linprog

from linalg import as_matrix, spectral_norm
from model_ir import (PARAM, AffineExplicit, AlgorithmIR, InitSet, ParamSet, ProblemFamily, StateLayout, cur,
                      gradient_step, relu_step, soft_threshold_step, state)

logger = logging.getLogger(__name__)

SCHEDULE_HORIZON = 200
LASSO_SIGNALS = 100
STEP_RULES = ('inv_lipschitz', 'half_inv_specnorm')


class GeneratorError(Exception):
    pass


def resolve_step_size(rule: Union[str, float], L: Optional[float] = None, norm: Optional[float] = None) -> float:
    """inv_lipschitz -> 1/L, half_inv_specnorm -> 0.5/norm, fixed(eta) or a number -> eta."""
    if isinstance(rule, (int, float)):
        eta = float(rule)
    elif rule == 'inv_lipschitz':
        if not L:
            raise GeneratorError('inv_lipschitz needs a positive Lipschitz constant')
        eta = 1.0 / L
    elif rule == 'half_inv_specnorm':
        if not norm:
            raise GeneratorError('half_inv_specnorm needs a positive operator norm')
        eta = 0.5 / norm
    else:
        m = re.fullmatch(r'fixed\(\s*([-+0-9.eE]+)\s*\)', str(rule))
        if not m:
            raise GeneratorError('unknown step-size rule %r' % rule)
        eta = float(m.group(1))
    if not eta > 0:
        raise GeneratorError('step size must be positive, got %g' % eta)
    return eta


# ---------------------------------------------------------------------------
# sparse coding
# ---------------------------------------------------------------------------

def sample_dictionary(p: int, n: int, density: float, rng: np.random.Generator) -> np.ndarray:
    D = rng.normal(0.0, 1.0 / np.sqrt(p), size=(p, n))
    if density < 1.0:
        D = D * (rng.random((p, n)) < density)
    norms = np.linalg.norm(D, axis=0)
    nz = norms > 0
    D[:, nz] /= norms[nz]
    return D


def lasso_objective(D, x, z, lam: float) -> float:
    r = np.asarray(D) @ np.asarray(z) - np.asarray(x)
    return float(0.5 * r @ r + lam * np.sum(np.abs(z)))


def lasso_qp_data(D, lam: float):
    """QP form over (z, t): min 1/2 z'D'Dz - x'Dz + lam 1't  s.t. z - t <= 0, -z - t <= 0.

    Returns (P, q_of_x, A, b) with q_of_x a callable of the signal x.
    """
    D = as_matrix(D, 'D')
    n = D.shape[1]
    I = np.eye(n)
    P = np.block([[D.T @ D, np.zeros((n, n))], [np.zeros((n, n)), np.zeros((n, n))]])
    A = np.block([[I, -I], [-I, -I]])
    b = np.zeros(2 * n)

    def q_of_x(x):
        return np.concatenate([-D.T @ np.asarray(x, dtype=float), lam * np.ones(n)])

    return P, q_of_x, A, b


def ista_family(D, lam: float, eta: float, x_lower, x_upper, s0, name: str = 'ista') -> ProblemFamily:
    """z+ = soft_{lam eta}((I - eta D'D) z + eta D'x)."""
    D = as_matrix(D, 'D')
    n = D.shape[1]
    A_rows = np.hstack([np.eye(n) - eta * D.T @ D, eta * D.T])
    step = soft_threshold_step(A_rows, lam * eta, inputs=(state('z'), PARAM), output='z')
    layout = StateLayout((('z', n),), 'z')
    return ProblemFamily(ParamSet(np.asarray(x_lower, float), np.asarray(x_upper, float)),
                         InitSet.singleton(s0), AlgorithmIR(layout, (step,)), name,
                         data={'D': D, 'lam': lam, 'eta': eta})


def fista_momentum(K: int) -> np.ndarray:
    """Coefficient (beta_k - 1) / beta_{k+1} of the iteration producing z^k, beta_1 = 1."""
    beta = [1.0]
    for _ in range(K):
        beta.append((1.0 + np.sqrt(1.0 + 4.0 * beta[-1] ** 2)) / 2.0)
    return np.array([(beta[k] - 1.0) / beta[k + 1] for k in range(K)])


def fista_family(D, lam: float, eta: float, x_lower, x_upper, s0, horizon: int = SCHEDULE_HORIZON,
                 name: str = 'fista') -> ProblemFamily:
    """z+ = soft(...(y)), y+ = z+ + c_k (z+ - z); aux slot y starts at s0."""
    D = as_matrix(D, 'D')
    n = D.shape[1]
    I = np.eye(n)
    z_step = soft_threshold_step(np.hstack([I - eta * D.T @ D, eta * D.T]), lam * eta,
                                 inputs=(state('y'), PARAM), output='z')
    y_step = AffineExplicit(output='y', inputs=(cur('z'), state('z')), Btilde=np.hstack([I, np.zeros((n, n))]),
                            scheduled={'mom': np.hstack([I, -I])})
    layout = StateLayout((('z', n), ('y', n)), 'z')
    s0 = np.asarray(s0, dtype=float)
    return ProblemFamily(ParamSet(np.asarray(x_lower, float), np.asarray(x_upper, float)),
                         InitSet.singleton(np.concatenate([s0, s0]), ties=(('y', 'z'),)),
                         AlgorithmIR(layout, (z_step, y_step), {'mom': fista_momentum(horizon)}), name,
                         data={'D': D, 'lam': lam, 'eta': eta})


def gen_lasso(p: int = 15, n: int = 20, lam: float = 1e-2, density: float = 1.0, seed: int = 0,
              variant: str = 'ista', eta_rule: Union[str, float] = 'inv_lipschitz', noise_std: float = 0.01,
              signals: int = LASSO_SIGNALS, horizon: int = SCHEDULE_HORIZON) -> ProblemFamily:
    if p < 1 or n < 1:
        raise GeneratorError('p and n must be >= 1')
    if not lam > 0:
        raise GeneratorError('lambda must be positive')
    if variant not in ('ista', 'fista'):
        raise GeneratorError('unknown lasso variant %r' % variant)
    rng = np.random.default_rng(seed)
    D = sample_dictionary(p, n, density, rng)
    support = rng.random((signals, n)) < 0.1
    z_true = rng.normal(size=(signals, n)) * support
    xs = z_true @ D.T + rng.normal(0.0, noise_std, size=(signals, p))
    x_lower, x_upper = xs.min(axis=0), xs.max(axis=0)
    s0 = np.linalg.pinv(D) @ xs[0]
    eta = resolve_step_size(eta_rule, L=spectral_norm(D) ** 2)
    name = 'lasso_%s_p%d_n%d' % (variant, p, n)
    logger.info('generated %s (seed %d, eta %.4g)', name, seed, eta)
    if variant == 'ista':
        fam = ista_family(D, lam, eta, x_lower, x_upper, s0, name=name)
    else:
        fam = fista_family(D, lam, eta, x_lower, x_upper, s0, horizon=horizon, name=name)
    fam.data['signals'] = xs
    return fam


# ---------------------------------------------------------------------------
# min-cost network flow
# ---------------------------------------------------------------------------

def flow_graph(n_s: int, n_d: int, edge_prob: float, seed: int) -> Sequence[Tuple[int, int]]:
    """Edges (supply node, demand node) of a random bipartite graph; demand nodes are numbered from n_s."""
    G = nx.bipartite.random_graph(n_s, n_d, edge_prob, seed=seed)
    return sorted((min(u, v), max(u, v)) for u, v in G.edges())


def flow_lp_data(n_s: int, n_d: int, edges: Sequence[Tuple[int, int]], supply: float, capacity: float):
    """Rows of A z + s = b(x): -z <= 0, z <= capacity, outflow <= supply (cone), -inflow = x (zero cone)."""
    n_e = len(edges)
    A_s = np.zeros((n_s, n_e))
    A_d = np.zeros((n_d, n_e))
    for e, (u, v) in enumerate(edges):
        A_s[u, e] = 1.0
        A_d[v - n_s, e] = -1.0
    A_ineq = np.vstack([-np.eye(n_e), np.eye(n_e), A_s])
    b_ineq = np.concatenate([np.zeros(n_e), np.full(n_e, float(capacity)), np.full(n_s, float(supply))])
    return A_ineq, b_ineq, A_d


def solve_flow_lp(mu, A_ineq, b_ineq, A_eq, x):
    """(z, w_ineq, w_eq) at an optimum, duals signed so that mu + A'w = 0."""
    res = linprog(mu, A_ub=A_ineq, b_ub=b_ineq, A_eq=A_eq, b_eq=np.asarray(x, dtype=float),
                  bounds=(None, None), method='highs')
    if res.status != 0:
        raise GeneratorError('flow LP not solved: %s' % res.message)
    return res.x, -res.ineqlin.marginals, -res.eqlin.marginals


def pdhg_momentum(K: int) -> np.ndarray:
    ks = np.arange(1, K + 1, dtype=float)
    return (ks - 1.0) / (ks + 2.0)


def pdhg_family(mu, A_ineq, b_ineq, A_eq, x_lower, x_upper, s0, eta: float, momentum: bool = False,
                horizon: int = SCHEDULE_HORIZON, name: str = 'pdhg') -> ProblemFamily:
    """PDHG on min mu'z s.t. A_ineq z <= b_ineq, A_eq z = x; the state s packs (z, w_ineq, w_eq)."""
    mu = np.asarray(mu, dtype=float)
    n_e, m_i, n_d = mu.size, A_ineq.shape[0], A_eq.shape[0]
    m = m_i + n_d
    dim = n_e + m
    Sz = np.hstack([np.eye(n_e), np.zeros((n_e, m))])
    Swi = np.hstack([np.zeros((m_i, n_e)), np.eye(m_i), np.zeros((m_i, n_d))])
    Swe = np.hstack([np.zeros((n_d, n_e + m_i)), np.eye(n_d)])

    wi_step = relu_step(np.hstack([eta * A_ineq @ Sz + Swi, np.zeros((m_i, n_d))]),
                        inputs=(state('s'), PARAM), output='wi', offset=-eta * np.asarray(b_ineq, dtype=float))
    we_step = AffineExplicit(output='we', inputs=(state('s'), PARAM),
                             Btilde=np.hstack([eta * A_eq @ Sz + Swe, -eta * np.eye(n_d)]))

    At_w = A_ineq.T @ Swi + A_eq.T @ Swe
    z_rows = np.hstack([Sz + eta * At_w, -2.0 * eta * A_ineq.T, -2.0 * eta * A_eq.T])
    w_rows = np.hstack([np.zeros((m, dim)), np.eye(m)])
    scheduled = {}
    schedule = {}
    if momentum:
        extra_z = np.hstack([2.0 * eta * At_w, -2.0 * eta * A_ineq.T, -2.0 * eta * A_eq.T])
        scheduled = {'beta': np.vstack([extra_z, np.zeros((m, dim + m))])}
        schedule = {'beta': pdhg_momentum(horizon)}
    s_step = AffineExplicit(output='s', inputs=(state('s'), cur('wi'), cur('we')),
                            Btilde=np.vstack([z_rows, w_rows]),
                            offset=np.concatenate([-eta * mu, np.zeros(m)]), scheduled=scheduled)
    layout = StateLayout((('s', dim),), 's')
    return ProblemFamily(ParamSet(np.asarray(x_lower, float), np.asarray(x_upper, float)),
                         InitSet.singleton(s0), AlgorithmIR(layout, (wi_step, we_step, s_step), schedule), name,
                         data={'mu': mu, 'A_ineq': A_ineq, 'b_ineq': np.asarray(b_ineq, float), 'A_eq': A_eq,
                               'eta': eta, 'n_e': n_e, 'm': m})


def gen_network_flow(n_s: int = 10, n_d: int = 5, edge_prob: float = 0.5, supply: float = 10.0,
                     capacity: float = 4.0, cost_range: Tuple[float, float] = (5.0, 10.0),
                     demand_box: Tuple[float, float] = (-7.0, -5.0), seed: int = 0, variant: str = 'pdhg',
                     eta_rule: Union[str, float] = 'half_inv_specnorm',
                     horizon: int = SCHEDULE_HORIZON) -> ProblemFamily:
    if variant not in ('pdhg', 'pdhg_momentum'):
        raise GeneratorError('unknown flow variant %r' % variant)
    edges = flow_graph(n_s, n_d, edge_prob, seed)
    if not edges:
        raise GeneratorError('random graph has no edges')
    n_e = len(edges)
    A_ineq, b_ineq, A_eq = flow_lp_data(n_s, n_d, edges, supply, capacity)
    rng = np.random.default_rng(seed)
    mu = rng.uniform(cost_range[0], cost_range[1], size=n_e)
    m = A_ineq.shape[0] + A_eq.shape[0]
    if m != n_s + n_d + 2 * n_e:
        raise GeneratorError('flow LP has %d rows, expected %d' % (m, n_s + n_d + 2 * n_e))
    x_lower = np.full(n_d, float(demand_box[0]))
    x_upper = np.full(n_d, float(demand_box[1]))
    # the largest demand is the hardest instance; if it is feasible, the whole family is
    z, w_i, w_e = solve_flow_lp(mu, A_ineq, b_ineq, A_eq, x_lower)
    eta = resolve_step_size(eta_rule, norm=spectral_norm(np.vstack([A_ineq, A_eq])))
    name = 'flow_%s_ns%d_nd%d' % (variant, n_s, n_d)
    logger.info('generated %s: n_e=%d m=%d eta=%.4g', name, n_e, m, eta)
    fam = pdhg_family(mu, A_ineq, b_ineq, A_eq, x_lower, x_upper, np.concatenate([z, w_i, w_e]), eta,
                      momentum=variant == 'pdhg_momentum', horizon=horizon, name=name)
    fam.data['edges'] = edges
    return fam


# ---------------------------------------------------------------------------
# toys
# ---------------------------------------------------------------------------

def gen_identity(d: int = 2, box: Tuple[float, float] = (-1.0, 1.0), s0=None) -> ProblemFamily:
    """s+ = s; a singleton s0 when given, else the box."""
    step = AffineExplicit(output='s', inputs=(state('s'),), Btilde=np.eye(d))
    init_set = InitSet.singleton(s0) if s0 is not None else InitSet.box(np.full(d, box[0]), np.full(d, box[1]))
    return ProblemFamily(ParamSet(np.zeros(1), np.zeros(1)), init_set,
                         AlgorithmIR(StateLayout((('s', d),), 's'), (step,)), 'identity')


def gen_gradient(P=1.0, eta: float = 0.5, x_box: Tuple[float, float] = (-1.0, 1.0), s0=None) -> ProblemFamily:
    """Gradient descent on v'Pv/2 + x'v with x in a box."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    d = P.shape[0]
    s0 = np.zeros(d) if s0 is None else s0
    return ProblemFamily(ParamSet(np.full(d, x_box[0]), np.full(d, x_box[1])), InitSet.singleton(s0),
                         AlgorithmIR(StateLayout((('s', d),), 's'), (gradient_step(P, eta),)), 'gradient',
                         data={'P': P, 'eta': eta})
