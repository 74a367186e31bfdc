"""Adaptive tuning of the regularization weight lambda.

The weight is treated as the outer variable of a bilevel problem: inner
steps optimize network parameters at fixed lambda on training data, then
lambda takes a momentum step driven by the validation-set regularizer
value R. The momentum update is

    m_{t+1} = beta * m_t + R_{t+1} + beta * (R_{t+1} - R_t)
    lambda_{t+1} = clamp(lambda_t - kappa * m_{t+1})

where the extra beta-weighted difference term anticipates the trend of R.
Since R >= 0 always, lambda would drift to -infinity unclamped; the lower
bound (default 0) keeps the penalty meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class NalaState:
    """Outer-loop state: current lambda, momentum, and hyperparameters.

    ``kappa = 0`` is allowed and freezes lambda, which reduces the adaptive
    schedule to fixed-weight training.
    """

    lam: float = 0.1
    momentum: float = 0.0
    prev_reg_value: float = 0.0
    beta: float = 0.9
    kappa: float = 1e-3
    bounds: tuple = (0.0, 10.0)
    t: int = 0

    def __post_init__(self):
        lo, hi = self.bounds
        if not (lo <= hi):
            raise ValueError(f"bounds must satisfy min <= max, got {self.bounds}")
        if not (lo <= self.lam <= hi):
            raise ValueError(f"lambda {self.lam} outside bounds {self.bounds}")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not (self.kappa >= 0.0):
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not math.isfinite(self.momentum):
            raise ValueError("momentum must be finite")
        if not (math.isfinite(self.prev_reg_value) and self.prev_reg_value >= 0):
            raise ValueError("prev_reg_value must be finite and >= 0")
        if self.t < 0:
            raise ValueError(f"step counter must be >= 0, got {self.t}")


@dataclass(frozen=True)
class OuterStepRecord:
    """One outer step: the R value seen and the lambda move it caused."""

    t: int
    reg_value: float
    reg_delta: float
    momentum: float
    lambda_before: float
    lambda_after: float
    clamped: bool
    val_data_term: float | None = None
    val_total: float | None = None

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "reg_value": self.reg_value,
            "reg_delta": self.reg_delta,
            "momentum": self.momentum,
            "lambda_before": self.lambda_before,
            "lambda_after": self.lambda_after,
            "clamped": self.clamped,
            "val_data_term": self.val_data_term,
            "val_total": self.val_total,
        }


def hyper_gradient(reg_value: float) -> float:
    """Partial derivative of the total loss wrt lambda at fixed network
    parameters, which is exactly the regularizer value itself."""
    r = float(reg_value)
    if not math.isfinite(r):
        raise ValueError(f"regularizer value must be finite, got {r}")
    if r < 0:
        raise ValueError(f"regularizer value must be >= 0, got {r}")
    return r


def nala_update(state: NalaState, reg_value_new: float, *,
                val_data_term=None, val_total=None) -> tuple:
    """One outer step; returns (new state, record). Pure: the input state
    is never mutated, and a non-finite R raises before anything changes."""
    r_new = hyper_gradient(reg_value_new)
    m_new = state.beta * state.momentum + r_new + state.beta * (r_new - state.prev_reg_value)
    raw = state.lam - state.kappa * m_new
    lo, hi = state.bounds
    lam_new = min(max(raw, lo), hi)
    new_state = replace(
        state, lam=lam_new, momentum=m_new, prev_reg_value=r_new, t=state.t + 1
    )
    record = OuterStepRecord(
        t=new_state.t,
        reg_value=r_new,
        reg_delta=r_new - state.prev_reg_value,
        momentum=m_new,
        lambda_before=state.lam,
        lambda_after=lam_new,
        clamped=(lam_new != raw),
        val_data_term=val_data_term,
        val_total=val_total,
    )
    return new_state, record


def alternate(train_set, val_set, hooks, state: NalaState, outer_steps: int) -> tuple:
    """Alternate inner optimization with outer lambda updates.

    Per outer step: ``hooks.run_inner(lam)`` trains the network at fixed
    lambda, ``hooks.evaluate(lam)`` returns the validation LossBreakdown,
    and the breakdown's regularizer value drives one lambda update. If the
    hooks object defines ``on_record``, it is called with each record (the
    trainer uses this for checkpoint selection bookkeeping).

    Returns (records, final state). ``outer_steps = 0`` performs no calls.
    """
    if outer_steps < 0:
        raise ValueError(f"outer_steps must be >= 0, got {outer_steps}")
    if train_set is None or len(train_set) == 0:
        raise ValueError("training set is empty")
    if val_set is None or len(val_set) == 0:
        raise ValueError("validation set is empty")
    on_record = getattr(hooks, "on_record", None)
    history = []
    for _ in range(outer_steps):
        hooks.run_inner(state.lam)
        breakdown = hooks.evaluate(state.lam)
        state, record = nala_update(
            state, breakdown.reg_term,
            val_data_term=breakdown.data_term, val_total=breakdown.total,
        )
        if on_record is not None:
            on_record(record)
        history.append(record)
    return history, state
