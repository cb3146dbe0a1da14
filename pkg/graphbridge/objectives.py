"""Generator evaluations, IPF and TD losses, and their exact gradients.

Edge quantities are written in terms of ``dY_e = Y[dst_e] - Y[src_e]`` and
``dYh_e = Yhat[dst_e] - Yhat[src_e]`` for every original edge ``e``. For a
node ``x`` its out-edges carry Z = dY and its in-edges carry
Zhat(y, x) = -dYh.

Every sum over y includes the diagonal term r(x, x) = -rho_out(x), which
is what the Kolmogorov equations for phi and phihat produce. The diagonal
terms cancel in the IPF losses.

Each IPF loss trains only the opposite table and treats the sampling
policy as fixed, so the gradients here carry no score-function terms.
"""
import typing as T
from dataclasses import dataclass, field

import numpy as np

from graphbridge.ctmc_engine import BACKWARD, FORWARD, RolloutBatch
from graphbridge.exceptions import BridgeNumericalError, BridgeUsageError
from graphbridge.graph_core import RateGenerator
from graphbridge.potentials import PotentialTable, clipped_exp, mirrored_index

BOUNDARY_EPSILON = 1e-12

LOSS_SELECTORS = ("ipf_fwd", "ipf_bwd", "td_fwd", "td_bwd")


@dataclass
class EdgeTerms:
    "Per-edge quantities at one grid row"

    r: np.ndarray
    dY: np.ndarray
    dYh: np.ndarray
    u: np.ndarray  # r * exp(dY), forward controlled rate
    uhat: np.ndarray  # r * exp(-dYh), backward controlled rate on the reversed edge
    u_free: np.ndarray  # derivative mask of the clipped exp(dY)
    uhat_free: np.ndarray  # derivative mask of the clipped exp(-dYh)


def edge_terms(tables: PotentialTable, generator: RateGenerator, row: int) -> EdgeTerms:
    graph = generator.graph
    r = generator.rates_at(min(row, tables.K - 1))
    Y, Yhat = tables.Y[row], tables.Yhat[row]
    dY = Y[graph.dst] - Y[graph.src]
    dYh = Yhat[graph.dst] - Yhat[graph.src]
    eZ, sat = clipped_exp(dY)
    eZh, sat_h = clipped_exp(-dYh)
    return EdgeTerms(
        r=r, dY=dY, dYh=dYh, u=r * eZ, uhat=r * eZh, u_free=~sat, uhat_free=~sat_h
    )


def _by_src(generator, values):
    return np.bincount(
        generator.graph.src, weights=values, minlength=generator.graph.node_count
    )


def _by_dst(generator, values):
    return np.bincount(
        generator.graph.dst, weights=values, minlength=generator.graph.node_count
    )


def _scatter(generator, edge_values) -> np.ndarray:
    "Gradient of sum_e a_e * (T[dst_e] - T[src_e]) with respect to T"
    return _by_dst(generator, edge_values) - _by_src(generator, edge_values)


def _f_row(f_values, row, node_count):
    if f_values is None:
        return np.zeros(node_count)
    return np.asarray(f_values, dtype=float)[row]


# Generators, all nodes at once


def forward_generator_Y(tables, generator, f_values, k) -> np.ndarray:
    t = edge_terms(tables, generator, k)
    rho_out = _by_src(generator, t.r)
    f = _f_row(f_values, k, generator.graph.node_count)
    return _by_src(generator, t.u * (t.dY - 1.0)) + rho_out + f


def forward_generator_Yhat(tables, generator, f_values, k) -> np.ndarray:
    t = edge_terms(tables, generator, k)
    rho_out = _by_src(generator, t.r)
    f = _f_row(f_values, k, generator.graph.node_count)
    return _by_dst(generator, t.uhat) - rho_out + _by_src(generator, t.u * t.dYh) - f


def backward_generator_pair(
    tables, generator, f_values, j
) -> T.Tuple[np.ndarray, np.ndarray]:
    "(A Yhat, A Y) under the backward process at backward step j, all nodes"
    m = mirrored_index(tables.K, j)
    t = edge_terms(tables, generator, m)
    rho_out = _by_src(generator, t.r)
    f = _f_row(f_values, m, generator.graph.node_count)
    a_yhat = _by_dst(generator, t.uhat * (-t.dYh - 1.0)) + rho_out + f
    a_y = _by_src(generator, t.u) - rho_out + _by_dst(generator, -t.dY * t.uhat) - f
    return a_yhat, a_y


def generator_Y_forward(tables, generator, f_values, k, x) -> float:
    return float(forward_generator_Y(tables, generator, f_values, k)[x])


def generator_Yhat_forward(tables, generator, f_values, k, x) -> float:
    return float(forward_generator_Yhat(tables, generator, f_values, k)[x])


def generator_pair_backward(tables, generator, f_values, k, x) -> T.Tuple[float, float]:
    a_yhat, a_y = backward_generator_pair(tables, generator, f_values, k)
    return float(a_yhat[x]), float(a_y[x])


# Losses and gradients


def _require(batch: RolloutBatch, direction: str, loss: str):
    if batch.direction != direction:
        raise BridgeUsageError(
            f"{loss} needs a {direction} batch, got a {batch.direction} batch"
        )


def _step_counts(batch: RolloutBatch, step: int) -> np.ndarray:
    return np.bincount(batch.trajectories[:, step], minlength=batch.node_count).astype(
        float
    )


@dataclass
class TableGradients:
    Y: np.ndarray
    Yhat: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt((self.Y**2).sum() + (self.Yhat**2).sum()))


def _ipf_forward(batch, tables, generator, want_grad):
    _require(batch, FORWARD, "ipf_forward_loss")
    scale = tables.dt / batch.size
    loss = 0.0
    grad = np.zeros_like(tables.Yhat) if want_grad else None
    for k in range(tables.K):
        counts = _step_counts(batch, k) * scale
        t = edge_terms(tables, generator, k)
        c_src = counts[generator.graph.src]
        c_dst = counts[generator.graph.dst]
        loss += float(
            (c_dst * t.uhat).sum() + (c_src * t.u * (-1.0 + t.dY + t.dYh)).sum()
        )
        if want_grad:
            a = -c_dst * t.uhat * t.uhat_free + c_src * t.u
            grad[k] = _scatter(generator, a)
    if want_grad:
        grad[0] = 0.0
    return loss, grad


def _ipf_backward(batch, tables, generator, want_grad):
    _require(batch, BACKWARD, "ipf_backward_loss")
    scale = tables.dt / batch.size
    loss = 0.0
    grad = np.zeros_like(tables.Y) if want_grad else None
    for j in range(tables.K):
        m = mirrored_index(tables.K, j)
        counts = _step_counts(batch, j) * scale
        t = edge_terms(tables, generator, m)
        c_src = counts[generator.graph.src]
        c_dst = counts[generator.graph.dst]
        loss += float(
            (c_src * t.u).sum() + (c_dst * t.uhat * (-1.0 - t.dYh - t.dY)).sum()
        )
        if want_grad:
            b = c_src * t.u * t.u_free - c_dst * t.uhat
            grad[m] = _scatter(generator, b)
    if want_grad:
        grad[tables.K] = 0.0
    return loss, grad


def _residual_check(residuals, loss):
    if not np.isfinite(residuals).all():
        raise BridgeNumericalError(f"{loss} produced a non-finite residual")


def _td_forward(batch, tables, generator, f_values, want_grad):
    _require(batch, FORWARD, "td_forward_loss")
    X = batch.trajectories
    B, K, dt = batch.size, tables.K, tables.dt
    loss = 0.0
    grad = np.zeros_like(tables.Yhat) if want_grad else None
    for k in range(K):
        generator_values = forward_generator_Yhat(tables, generator, f_values, k)
        residual = (
            tables.Yhat[k + 1, X[:, k + 1]]
            - tables.Yhat[k, X[:, k]]
            - generator_values[X[:, k]] * dt
        )
        _residual_check(residual, "td_forward_loss")
        loss += float(residual @ residual) / B
        if want_grad:
            g = 2.0 * residual / B
            n = tables.node_count
            grad[k + 1] += np.bincount(X[:, k + 1], weights=g, minlength=n)
            R = np.bincount(X[:, k], weights=g, minlength=n)
            grad[k] -= R
            t = edge_terms(tables, generator, k)
            src, dst = generator.graph.src, generator.graph.dst
            d_generator = -R[dst] * t.uhat * t.uhat_free + R[src] * t.u
            grad[k] -= dt * _scatter(generator, d_generator)
    if want_grad:
        grad[0] = 0.0
    return loss, grad


def _td_backward(batch, tables, generator, f_values, want_grad):
    _require(batch, BACKWARD, "td_backward_loss")
    X = batch.trajectories
    B, K, dt = batch.size, tables.K, tables.dt
    loss = 0.0
    grad = np.zeros_like(tables.Y) if want_grad else None
    for j in range(K):
        m = mirrored_index(K, j)
        _, generator_values = backward_generator_pair(tables, generator, f_values, j)
        residual = (
            tables.Y[m, X[:, j + 1]]
            - tables.Y[m + 1, X[:, j]]
            - generator_values[X[:, j]] * dt
        )
        _residual_check(residual, "td_backward_loss")
        loss += float(residual @ residual) / B
        if want_grad:
            g = 2.0 * residual / B
            n = tables.node_count
            grad[m] += np.bincount(X[:, j + 1], weights=g, minlength=n)
            R = np.bincount(X[:, j], weights=g, minlength=n)
            grad[m + 1] -= R
            t = edge_terms(tables, generator, m)
            src, dst = generator.graph.src, generator.graph.dst
            d_generator = R[src] * t.u * t.u_free - R[dst] * t.uhat
            grad[m] -= dt * _scatter(generator, d_generator)
    if want_grad:
        grad[K] = 0.0
    return loss, grad


def ipf_forward_loss(batch, tables, generator) -> float:
    return _ipf_forward(batch, tables, generator, False)[0]


def ipf_backward_loss(batch, tables, generator) -> float:
    return _ipf_backward(batch, tables, generator, False)[0]


def td_forward_loss(batch, tables, generator, f_values=None) -> float:
    return _td_forward(batch, tables, generator, f_values, False)[0]


def td_backward_loss(batch, tables, generator, f_values=None) -> float:
    return _td_backward(batch, tables, generator, f_values, False)[0]


def loss_and_gradients(
    selector: str, batch, tables, generator, f_values=None
) -> T.Tuple[float, TableGradients]:
    zeros = np.zeros_like(tables.Y)
    if selector == "ipf_fwd":
        loss, grad = _ipf_forward(batch, tables, generator, True)
        return loss, TableGradients(Y=zeros, Yhat=grad)
    if selector == "ipf_bwd":
        loss, grad = _ipf_backward(batch, tables, generator, True)
        return loss, TableGradients(Y=grad, Yhat=zeros)
    if selector == "td_fwd":
        loss, grad = _td_forward(batch, tables, generator, f_values, True)
        return loss, TableGradients(Y=zeros, Yhat=grad)
    if selector == "td_bwd":
        loss, grad = _td_backward(batch, tables, generator, f_values, True)
        return loss, TableGradients(Y=grad, Yhat=zeros)
    raise BridgeUsageError(
        f"Unknown loss {selector!r}; choose from {', '.join(LOSS_SELECTORS)}"
    )


def gradients(selector, batch, tables, generator, f_values=None) -> TableGradients:
    return loss_and_gradients(selector, batch, tables, generator, f_values)[1]


def trainable_mask(selector: str, K: int, node_count: int) -> T.Tuple[str, np.ndarray]:
    "Name of the table a loss trains and the mask of its free rows"
    mask = np.ones((K + 1, node_count), dtype=bool)
    if selector in ("ipf_fwd", "td_fwd"):
        mask[0] = False
        return "Yhat", mask
    mask[K] = False
    return "Y", mask


def pin_forward_boundary(tables: PotentialTable, p_hat_0, eps=BOUNDARY_EPSILON):
    "Yhat_0 = log(p_hat_0 + eps) - Y_0"
    tables.Yhat[0] = np.log(np.asarray(p_hat_0, dtype=float) + eps) - tables.Y[0]


def pin_backward_boundary(tables: PotentialTable, p_hat_1, eps=BOUNDARY_EPSILON):
    "Y_K = log(p_hat_1 + eps) - Yhat_K"
    K = tables.K
    tables.Y[K] = np.log(np.asarray(p_hat_1, dtype=float) + eps) - tables.Yhat[K]


@dataclass
class LossReport:
    ipf_forward: float = 0.0
    ipf_backward: float = 0.0
    td_forward: float = 0.0
    td_backward: float = 0.0
    lambda_td: float = 0.0
    gradient_norms: T.Dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return (
            self.ipf_forward
            + self.ipf_backward
            + self.lambda_td * (self.td_forward + self.td_backward)
        )

    def as_dict(self) -> dict:
        return {
            "ipf_f": self.ipf_forward,
            "ipf_b": self.ipf_backward,
            "td_f": self.td_forward,
            "td_b": self.td_backward,
            "total": self.total,
            "lambda_td": self.lambda_td,
            "grad_norms": dict(self.gradient_norms),
        }


def total_loss(
    forward_batch, backward_batch, tables, generator, f_values, lambda_td
) -> LossReport:
    report = LossReport(lambda_td=lambda_td)
    for selector, batch, attribute in (
        ("ipf_fwd", forward_batch, "ipf_forward"),
        ("ipf_bwd", backward_batch, "ipf_backward"),
        ("td_fwd", forward_batch, "td_forward"),
        ("td_bwd", backward_batch, "td_backward"),
    ):
        loss, grads = loss_and_gradients(selector, batch, tables, generator, f_values)
        setattr(report, attribute, loss)
        report.gradient_norms[selector] = grads.norm()
    return report


def likelihood_identity(
    generator: RateGenerator, log_phi, log_phihat, marginals, mu, nu
) -> T.Tuple[float, float]:
    """Both sides of the Dynkin identity along exact marginals (f = 0).

    Returns (sum_k dt E_{p_k}[A Y + A Yhat], E_mu[-log mu] + E_nu[log nu]);
    they agree up to O(dt) for the exact bridge.
    """
    log_phi = np.asarray(log_phi, dtype=float)
    K = log_phi.shape[0] - 1
    tables = PotentialTable(K, log_phi.shape[1], log_phi, log_phihat)
    lhs = 0.0
    for k in range(K):
        values = forward_generator_Y(tables, generator, None, k) + forward_generator_Yhat(
            tables, generator, None, k
        )
        lhs += float(np.asarray(marginals)[k] @ values) / K
    mu, nu = np.asarray(mu, dtype=float), np.asarray(nu, dtype=float)
    rhs = float(-(mu[mu > 0] @ np.log(mu[mu > 0])) + nu[nu > 0] @ np.log(nu[nu > 0]))
    return lhs, rhs
