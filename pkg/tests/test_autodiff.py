import math

import numpy as np
import pytest

from pinchbeam import autodiff as ad
from pinchbeam.autodiff import (AdamState, FnnSpec, ParameterStore, Tape,
                                adam_step, backward_into, fnn_forward,
                                grad_check, init_fnn)
from pinchbeam.errors import InvalidConfigError, SingularityError
from pinchbeam.verify import primitive_grad_checks


class TestTapeBasics:
    def test_values_are_float64(self):
        tape = Tape()
        v = tape.constant(np.ones((2, 2), dtype=np.float32))
        assert v.value.dtype == np.float64

    def test_append_order_is_topological(self):
        tape = Tape()
        a = tape.constant(1.0)
        b = ad.add(a, 2.0)
        c = ad.mul(b, b)
        assert a.idx < b.idx < c.idx
        assert tape.parents[c.idx] == (b.idx, b.idx)

    def test_backward_requires_scalar(self):
        tape = Tape()
        a = tape.constant(np.ones(3))
        with pytest.raises(ValueError):
            tape.backward(a)

    def test_backward_square_sum(self):
        store = ParameterStore()
        store.add("theta", np.array([1.0, -2.0, 3.0]))
        tape = Tape()
        th = tape.param(store, "theta")
        loss = ad.sum_axis(ad.square(th), 0)
        backward_into(store, loss)
        np.testing.assert_allclose(store.grads["theta"], [2.0, -4.0, 6.0])

    def test_unused_parameter_gets_zero_gradient(self):
        store = ParameterStore()
        store.add("used", np.array(2.0))
        store.add("unused", np.array(5.0))
        tape = Tape()
        loss = ad.square(tape.param(store, "used"))
        _ = tape.param(store, "unused")  # bound but not part of the loss
        backward_into(store, loss)
        assert store.grads["used"] == 4.0
        assert store.grads["unused"] == 0.0

    def test_parameter_bound_twice_accumulates(self):
        store = ParameterStore()
        store.add("w", np.array(3.0))
        tape = Tape()
        loss = ad.add(ad.square(tape.param(store, "w")),
                      ad.scalar_scale(tape.param(store, "w"), 5.0))
        backward_into(store, loss)
        assert store.grads["w"] == 2.0 * 3.0 + 5.0

    def test_replay_determinism(self):
        store = ParameterStore()
        rng = np.random.default_rng(0)
        store.add("w", rng.standard_normal((4, 3)))

        def f(s):
            tape = Tape()
            w = tape.param(s, "w")
            y = ad.tanh(ad.matmul(tape.constant(rng_fixed), w))
            return ad.sum_axis(ad.square(y), (0, 1))

        rng_fixed = np.random.default_rng(1).standard_normal((2, 4))
        l1 = f(store)
        backward_into(store, l1)
        g1 = store.grads["w"].copy()
        l2 = f(store)
        backward_into(store, l2)
        assert float(l1.value) == float(l2.value)
        np.testing.assert_array_equal(g1, store.grads["w"])


class TestPrimitives:
    def test_complex_abs2(self):
        tape = Tape()
        out = ad.complex_abs2(tape.constant(3.0), tape.constant(4.0))
        assert float(out.value) == 25.0

    def test_softplus_at_zero(self):
        tape = Tape()
        assert float(ad.softplus(tape.constant(0.0)).value) == pytest.approx(math.log(2.0))

    def test_matmul_identity(self):
        tape = Tape()
        x = np.random.default_rng(2).standard_normal((3, 3))
        out = ad.matmul(tape.constant(np.eye(3)), tape.constant(x))
        np.testing.assert_array_equal(out.value, x)

    def test_matmul_rejects_vectors(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.matmul(tape.constant(np.ones(3)), tape.constant(np.ones((3, 2))))

    def test_relu_clamps(self):
        tape = Tape()
        out = ad.relu(tape.constant(np.array([-1.0, 2.0])))
        np.testing.assert_array_equal(out.value, [0.0, 2.0])

    def test_log_domain(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.log(tape.constant(np.array([1.0, 0.0])))

    def test_sqrt_domain(self):
        tape = Tape()
        with pytest.raises(ValueError):
            ad.sqrt(tape.constant(np.array([-0.5])))

    def test_solve_matches_numpy(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 4)) + 4.0 * np.eye(4)
        b = rng.standard_normal((4, 2))
        tape = Tape()
        x = ad.solve(tape.constant(a), tape.constant(b))
        np.testing.assert_allclose(a @ x.value, b, atol=1e-12)

    def test_solve_singular(self):
        tape = Tape()
        with pytest.raises(SingularityError):
            ad.solve(tape.constant(np.zeros((2, 2))), tape.constant(np.eye(2)))

    def test_max_with_scalar_subgradient_zero_at_kink(self):
        store = ParameterStore()
        store.add("x", np.array([0.5]))

        def f(s):
            tape = Tape()
            return ad.sum_axis(ad.max_with_scalar(tape.param(s, "x"), 0.5), 0)

        loss = f(store)
        backward_into(store, loss)
        assert store.grads["x"][0] == 0.0

    def test_broadcast_add_unbroadcasts_gradient(self):
        store = ParameterStore()
        store.add("b", np.zeros(3))
        tape = Tape()
        x = tape.constant(np.ones((4, 3)))
        loss = ad.sum_axis(ad.add(x, tape.param(store, "b")), (0, 1))
        backward_into(store, loss)
        np.testing.assert_array_equal(store.grads["b"], [4.0, 4.0, 4.0])

    def test_operator_sugar(self):
        tape = Tape()
        a = tape.constant(np.array([2.0]))
        b = tape.constant(np.array([3.0]))
        assert (a + b).value.item() == 5.0
        assert (a - b).value.item() == -1.0
        assert (a * b).value.item() == 6.0
        assert (a / b).value.item() == pytest.approx(2.0 / 3.0)
        assert (-a).value.item() == -2.0


class TestGradCheck:
    def test_quadratic_is_exact(self):
        store = ParameterStore()
        store.add("theta", np.array([0.3, -1.2]))

        def f(s):
            tape = Tape()
            th = tape.param(s, "theta")
            return ad.sum_axis(ad.square(th), 0)

        assert grad_check(f, store) <= 1e-9

    def test_eps_precondition(self):
        store = ParameterStore()
        store.add("x", np.array(1.0))
        with pytest.raises(InvalidConfigError):
            grad_check(lambda s: ad.square(Tape().param(s, "x")), store, eps=1e-2)

    def test_every_primitive_within_tolerance(self):
        results = primitive_grad_checks()
        assert len(results) >= 25
        bad = {k: v for k, v in results.items() if v > 1e-6}
        assert not bad, f"primitives over tolerance: {bad}"

    def test_frozen_entries_skipped(self):
        store = ParameterStore()
        store.add("w", np.array(2.0))
        store.add("scale", np.array(3.0), trainable=False)

        def f(s):
            tape = Tape()
            # `scale` enters as a plain constant, not through the tape.
            return ad.scalar_scale(ad.square(tape.param(s, "w")),
                                   float(s.values["scale"]))

        assert grad_check(f, store) <= 1e-9


class TestFnn:
    def test_identity_network(self):
        spec = FnnSpec((3, 3), activation="identity")
        store = ParameterStore()
        store.add("net.W0", np.eye(3))
        store.add("net.b0", np.zeros(3))
        tape = Tape()
        x = np.random.default_rng(5).standard_normal((4, 3))
        y = fnn_forward(tape, spec, store, "net", tape.constant(x))
        np.testing.assert_array_equal(y.value, x)

    def test_relu_final_activation(self):
        spec = FnnSpec((2, 1), final_activation="relu")
        store = ParameterStore()
        store.add("net.W0", np.array([[1.0], [1.0]]))
        store.add("net.b0", np.array([-10.0]))
        tape = Tape()
        y = fnn_forward(tape, spec, store, "net", tape.constant(np.ones((1, 2))))
        assert y.value.item() == 0.0

    def test_width_mismatch(self):
        spec = FnnSpec((3, 2))
        store = ParameterStore()
        init_fnn(store, "net", spec, np.random.default_rng(0))
        tape = Tape()
        with pytest.raises(ValueError):
            fnn_forward(tape, spec, store, "net", tape.constant(np.ones((2, 4))))

    def test_spec_validation(self):
        with pytest.raises(InvalidConfigError):
            FnnSpec((3,))
        with pytest.raises(InvalidConfigError):
            FnnSpec((3, 0))
        with pytest.raises(InvalidConfigError):
            FnnSpec((3, 2), activation="swish")

    def test_random_fnn_gradient(self):
        spec = FnnSpec((3, 5, 2), activation="tanh")
        store = ParameterStore()
        rng = np.random.default_rng(11)
        init_fnn(store, "net", spec, rng)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((4, 2))

        def f(s):
            tape = Tape()
            y = fnn_forward(tape, spec, store, "net", tape.constant(x))
            return ad.sum_axis(ad.mul(y, tape.constant(w)), (0, 1))

        assert grad_check(f, store) <= 1e-6

    def test_glorot_init_bounds(self):
        spec = FnnSpec((10, 20))
        store = ParameterStore()
        init_fnn(store, "net", spec, np.random.default_rng(0))
        lim = math.sqrt(6.0 / 30.0)
        assert np.all(np.abs(store.values["net.W0"]) <= lim)
        assert np.all(store.values["net.b0"] == 0.0)


class TestAdam:
    def _store(self):
        store = ParameterStore()
        store.add("w", np.array([1.0, -1.0]))
        return store

    def test_zero_gradient_no_move(self):
        store = self._store()
        state = AdamState.for_store(store)
        store.zero_grads()
        adam_step(store, state, lr=0.1)
        np.testing.assert_array_equal(store.values["w"], [1.0, -1.0])

    def test_first_step_magnitude(self):
        store = self._store()
        state = AdamState.for_store(store)
        store.grads["w"][...] = [0.5, -2.0]
        adam_step(store, state, lr=0.01)
        # Bias-corrected first step is lr * g/|g| up to the eps guard.
        np.testing.assert_allclose(store.values["w"], [1.0 - 0.01, -1.0 + 0.01],
                                   rtol=1e-6)

    def test_two_runs_identical(self):
        runs = []
        for _ in range(2):
            store = self._store()
            state = AdamState.for_store(store)
            for step in range(5):
                store.grads["w"][...] = [0.1 * (step + 1), -0.3]
                adam_step(store, state, lr=0.05)
            runs.append(store.values["w"].copy())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_frozen_entry_not_updated(self):
        store = self._store()
        store.add("frozen", np.array(7.0), trainable=False)
        state = AdamState.for_store(store)
        store.grads["w"][...] = 1.0
        store.grads["frozen"][...] = 1.0  # even with a bogus gradient
        adam_step(store, state, lr=0.1)
        assert store.values["frozen"] == 7.0


class TestParameterStore:
    def test_lexicographic_iteration(self):
        store = ParameterStore()
        store.add("b.x", np.zeros(1))
        store.add("a.y", np.zeros(1))
        store.add("a.b", np.zeros(1))
        assert store.names() == ["a.b", "a.y", "b.x"]

    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1))
        with pytest.raises(ValueError):
            store.add("w", np.zeros(1))

    def test_entries_round_trip(self):
        store = ParameterStore()
        rng = np.random.default_rng(1)
        store.add("a", rng.standard_normal((2, 3)))
        store.add("b", rng.standard_normal(4), trainable=False)
        restored = ParameterStore.from_entries(store.entries(), frozen=["b"])
        assert restored.names() == store.names()
        assert restored.trainable_names() == ["a"]
        for name in store.names():
            np.testing.assert_array_equal(restored.values[name], store.values[name])
