"""Flow-matching and mixture-likelihood training.

The joint objective is ``lambda_nll * NLL + lambda_cfm * CFM`` where NLL is
``-log q_phi(f^-1(x) | c)`` and CFM is the rectified-flow regression
``|v(z_t, t) - (x - z_0)|^2``. The inverse transform inside NLL is treated
as a constant, so NLL trains only the mixture head and CFM trains only the
vector field; both gradients come out of a single backward pass.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .cnf import Flow, IntegratorConfig, flow_inverse
from .diffcore import Adam, backward
from .diffcore import tensor as T
from .errors import NumericError, TrainingDiverged

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 10
    steps: int = None
    batch_size: int = 64
    lr: float = 5e-4
    seed: int = 0
    lambda_nll: float = 1.0
    lambda_cfm: float = 1.0
    integrator: IntegratorConfig = field(default_factory=lambda: IntegratorConfig("euler", 8))
    probe_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.lr <= 0 or self.epochs < 0:
            raise ValueError("batch_size and lr must be positive, epochs non-negative")
        if self.lambda_nll < 0 or self.lambda_cfm < 0:
            raise ValueError("loss weights must be non-negative")

    def total_steps(self, n_items):
        if self.steps is not None:
            return int(self.steps)
        per_epoch = -(-n_items // self.batch_size)
        return self.epochs * per_epoch


@dataclass
class TrainResult:
    curve: list
    val_curve: list
    steps: int


def cfm_loss(field, targets, rng, t=None, z0=None):
    """Mean squared error between v(z_t, t) and the straight-line target.

    ``t ~ U(0, 1)`` and ``z0 ~ N(0, I)`` are drawn from ``rng`` unless given.
    """
    targets = np.asarray(targets, dtype=np.float64)
    b, d = targets.shape
    if t is None:
        t = rng.uniform(0.0, 1.0, size=(b, 1))
    if z0 is None:
        z0 = rng.standard_normal((b, d))
    t = np.asarray(t, dtype=np.float64).reshape(b, 1)
    zt = (1.0 - t) * z0 + t * targets
    u = targets - z0
    v = field.forward_tensor(T.Tensor(zt), T.Tensor(t))
    return T.square(v - u).mean()


def joint_loss(flow, head, conditions, targets, cfg, rng):
    """Weighted NLL + CFM; returns (total Tensor, {"cfm": float, "nll": float})."""
    if not isinstance(flow, Flow):
        flow = Flow(flow)
    targets = np.asarray(targets, dtype=np.float64)
    terms, parts = [], {"cfm": 0.0, "nll": 0.0}
    use_cfm = flow.field is not None and cfg.lambda_cfm > 0
    if use_cfm:
        standardized = (targets - flow.loc) / flow.scale
        cfm = cfm_loss(flow.field, standardized, rng)
        parts["cfm"] = cfm.item()
        terms.append(T.mul(cfm, cfg.lambda_cfm))
    if cfg.lambda_nll > 0:
        z = flow_inverse(flow, targets, cfg.integrator, with_logdet=False).endpoint
        nll = head.nll_tensor(conditions, z)
        parts["nll"] = nll.item()
        terms.append(T.mul(nll, cfg.lambda_nll))
    if not terms:
        raise ValueError("both loss weights are zero")
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite loss (cfm={parts['cfm']}, nll={parts['nll']}, batch={len(targets)})")
    return total, parts


def _val_cfm(flow, targets, seed):
    rng = np.random.default_rng(seed)
    standardized = (targets - flow.loc) / flow.scale
    with T.no_grad():
        return cfm_loss(flow.field, standardized, rng).item()


def train(flow, head, conditions, targets, cfg, val=None):
    """Optimize ``flow.field`` and ``head`` in place.

    Args:
        flow: a :class:`Flow`; ``flow.field`` may be None (mixture-only model).
        head: a :class:`GmmHead`.
        conditions: (N, T, features) condition sequences.
        targets: (N, d) latent targets.
        cfg: :class:`TrainConfig`.
        val: optional (val_conditions, val_targets) for CFM probes.

    Raises:
        TrainingDiverged: the loss went non-finite; parameters are restored
            to the last finite step before raising.
    """
    conditions = np.asarray(conditions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(targets)
    if len(conditions) != n:
        raise ValueError(f"{len(conditions)} conditions but {n} targets")
    rng = np.random.default_rng(cfg.seed)
    has_field = flow.field is not None
    opts = [Adam(head.params, lr=cfg.lr)]
    if has_field:
        opts.append(Adam(flow.field.params, lr=cfg.lr))
    total_steps = cfg.total_steps(n)
    curve, val_curve = [], []
    order, cursor = rng.permutation(n), 0
    bs = min(cfg.batch_size, n)

    for step in range(total_steps):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        snapshot = [o.store.params.copy() for o in opts]
        try:
            loss, parts = joint_loss(flow, head, conditions[idx], targets[idx], cfg, rng)
            backward(loss)
            for o in opts:
                o.step()
        except NumericError as exc:
            for o, saved in zip(opts, snapshot):
                o.store.params[:] = saved
                o.store.zero_grad()
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", step=step) from exc
        curve.append({"step": step, "cfm": parts["cfm"], "nll": parts["nll"], "total": loss.item()})
        if val is not None and has_field and cfg.probe_every and (step % cfg.probe_every == 0 or step == total_steps - 1):
            val_curve.append({"step": step, "val_cfm": _val_cfm(flow, val[1], cfg.seed + 1)})
        if step % 500 == 0:
            log.debug("step %d total %.4f cfm %.4f nll %.4f", step, loss.item(), parts["cfm"], parts["nll"])
    return TrainResult(curve, val_curve, total_steps)


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["step", "cfm", "nll", "total"])
        writer.writeheader()
        for row in curve:
            writer.writerow({k: (repr(row[k]) if k != "step" else row[k]) for k in writer.fieldnames})
