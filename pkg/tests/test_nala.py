"""Outer-loop lambda adaptation: momentum recursion, clamping, alternation."""

import numpy as np
import pytest

from svdti.loss import LossBreakdown
from svdti.nala import NalaState, alternate, hyper_gradient, nala_update


class TestHyperGradient:
    def test_identity_on_regularizer_value(self):
        assert hyper_gradient(0.37) == 0.37
        assert hyper_gradient(0) == 0.0

    def test_rejects_negative_and_non_finite(self):
        with pytest.raises(ValueError, match=">= 0"):
            hyper_gradient(-1e-9)
        with pytest.raises(ValueError, match="finite"):
            hyper_gradient(float("nan"))


class TestStateValidation:
    def test_lambda_must_sit_inside_bounds(self):
        with pytest.raises(ValueError, match="outside bounds"):
            NalaState(lam=2.0, bounds=(0.0, 1.0))

    def test_beta_range(self):
        with pytest.raises(ValueError, match="beta"):
            NalaState(beta=1.0)
        NalaState(beta=0.0)  # inclusive at zero

    def test_kappa_zero_allowed_negative_rejected(self):
        NalaState(kappa=0.0)
        with pytest.raises(ValueError, match="kappa"):
            NalaState(kappa=-1e-6)


class TestUpdate:
    def test_two_scripted_steps(self):
        # beta=0.9, kappa=1e-3, lambda0=0.1, R sequence 0.5 then 0.6:
        #   m1 = 0.9*0 + 0.5 + 0.9*(0.5 - 0)   = 0.95
        #   l1 = 0.1 - 1e-3*0.95               = 0.09905
        #   m2 = 0.9*0.95 + 0.6 + 0.9*0.1      = 1.545
        #   l2 = 0.09905 - 1e-3*1.545          = 0.097505
        state = NalaState(lam=0.1, beta=0.9, kappa=1e-3)
        state, rec1 = nala_update(state, 0.5)
        assert abs(state.momentum - 0.95) <= 1e-12
        assert abs(state.lam - 0.09905) <= 1e-12
        assert rec1.t == 1 and rec1.reg_delta == 0.5 and not rec1.clamped
        state, rec2 = nala_update(state, 0.6)
        assert abs(state.momentum - 1.545) <= 1e-12
        assert abs(state.lam - 0.097505) <= 1e-12
        assert abs(rec2.reg_delta - 0.1) <= 1e-12

    def test_beta_zero_reduces_to_plain_descent(self):
        state = NalaState(lam=0.3, beta=0.0, kappa=0.01)
        for r in (0.4, 0.2, 0.9):
            before = state.lam
            state, rec = nala_update(state, r)
            assert state.momentum == r  # no memory of past values
            assert abs(state.lam - (before - 0.01 * r)) <= 1e-15
            assert rec.momentum == r

    def test_clamp_at_lower_bound_sets_flag(self):
        state = NalaState(lam=0.001, beta=0.0, kappa=1.0, bounds=(0.0, 10.0))
        state, rec = nala_update(state, 5.0)
        assert state.lam == 0.0
        assert rec.clamped and rec.lambda_after == 0.0

    def test_clamp_at_upper_bound(self):
        # negative momentum pushes lambda up: feed decreasing R under beta
        state = NalaState(lam=0.999, momentum=-500.0, prev_reg_value=1.0,
                          beta=0.9, kappa=0.01, bounds=(0.0, 1.0))
        state, rec = nala_update(state, 0.0)
        assert state.lam == 1.0 and rec.clamped

    def test_kappa_zero_freezes_lambda_but_tracks_momentum(self):
        state = NalaState(lam=0.25, kappa=0.0)
        for r in (0.1, 0.7, 0.3):
            state, rec = nala_update(state, r)
            assert state.lam == 0.25
            assert not rec.clamped
        assert state.momentum != 0.0

    def test_input_state_not_mutated(self):
        state = NalaState(lam=0.1)
        nala_update(state, 0.5)
        assert state.lam == 0.1 and state.momentum == 0.0 and state.t == 0

    def test_record_round_trips_to_dict(self):
        state = NalaState()
        _, rec = nala_update(state, 0.5, val_data_term=0.2, val_total=0.25)
        d = rec.to_dict()
        assert d["val_data_term"] == 0.2 and d["val_total"] == 0.25
        assert d["lambda_before"] == 0.1


class _ScriptedHooks:
    """Replays a fixed R schedule and logs every call."""

    def __init__(self, regs):
        self.regs = list(regs)
        self.inner_lams = []
        self.eval_lams = []
        self.records = []

    def run_inner(self, lam):
        self.inner_lams.append(lam)

    def evaluate(self, lam):
        self.eval_lams.append(lam)
        r = self.regs.pop(0)
        return LossBreakdown(data_term=1.0, reg_term=r, lam=lam,
                             total=1.0 + lam * r)

    def on_record(self, record):
        self.records.append(record)


class TestAlternate:
    def test_runs_hooks_in_lockstep_with_updates(self):
        hooks = _ScriptedHooks([0.5, 0.6, 0.4])
        state0 = NalaState(lam=0.1, beta=0.9, kappa=1e-3)
        history, final = alternate([1], [1], hooks, state0, outer_steps=3)
        assert len(history) == 3
        assert hooks.inner_lams[0] == 0.1
        # each inner run sees the lambda produced by the previous outer step
        assert hooks.inner_lams[1] == history[0].lambda_after
        assert hooks.inner_lams[2] == history[1].lambda_after
        assert hooks.eval_lams == hooks.inner_lams
        assert final.lam == history[-1].lambda_after
        assert final.t == 3
        # on_record got the same objects in order
        assert hooks.records == history

    def test_matches_manual_update_sequence(self):
        regs = [0.5, 0.6, 0.4]
        hooks = _ScriptedHooks(regs)
        history, final = alternate([1], [1], hooks, NalaState(), outer_steps=3)
        state = NalaState()
        for r in regs:
            state, _ = nala_update(state, r, val_data_term=1.0)
        assert final.lam == state.lam
        assert final.momentum == state.momentum

    def test_records_carry_validation_terms(self):
        hooks = _ScriptedHooks([0.5])
        history, _ = alternate([1], [1], hooks, NalaState(), outer_steps=1)
        assert history[0].val_data_term == 1.0
        assert history[0].val_total == 1.0 + 0.1 * 0.5

    def test_zero_steps_touches_nothing(self):
        hooks = _ScriptedHooks([])
        history, final = alternate([1], [1], hooks, NalaState(lam=0.2), 0)
        assert history == [] and final.lam == 0.2
        assert hooks.inner_lams == []

    def test_empty_sets_rejected(self):
        hooks = _ScriptedHooks([0.5])
        with pytest.raises(ValueError, match="training set"):
            alternate([], [1], hooks, NalaState(), 1)
        with pytest.raises(ValueError, match="validation set"):
            alternate([1], [], hooks, NalaState(), 1)

    def test_negative_steps_rejected(self):
        with pytest.raises(ValueError, match="outer_steps"):
            alternate([1], [1], _ScriptedHooks([]), NalaState(), -1)
