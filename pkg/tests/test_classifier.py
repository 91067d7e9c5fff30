import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgsan.classifier import (
    MlpParams,
    compute_metrics,
    init_mlp,
    predict,
    readout,
    total_loss,
)
from fgsan.numcore import finite_diff_check, sigmoid


def zero_mlp(d=4, d_h=2):
    return MlpParams(
        hidden_weight=np.zeros((d, d_h)),
        hidden_bias=np.zeros(d_h),
        out_weight=np.zeros(d_h),
        out_bias=np.zeros(1),
    )


class TestReadout:
    def test_zero_embeddings(self):
        assert np.allclose(readout(np.zeros((5, 3))), 0.5, atol=1e-15)

    def test_single_node(self, rng):
        h = rng.standard_normal((1, 4))
        assert np.allclose(readout(h), sigmoid(h[0]), atol=1e-12)

    def test_cancellation(self):
        h = np.array([[math.log(3.0), 1.0], [-math.log(3.0), 1.0]])
        out = readout(h)
        assert out[0] == pytest.approx(0.5, abs=1e-12)
        assert out[1] == pytest.approx(sigmoid(1.0), abs=1e-12)

    def test_identity_variant(self):
        h = np.array([[2.0, -4.0], [0.0, 2.0]])
        assert np.allclose(readout(h, activation="identity"), [1.0, -1.0], atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            readout(np.zeros((0, 3)))

    def test_permutation_invariance_bitwise(self, rng):
        h = rng.standard_normal((9, 5))
        base = readout(h)
        for _ in range(25):
            p = rng.permutation(9)
            assert np.array_equal(readout(h[p]), base)


class TestPredict:
    def test_zero_params(self):
        assert predict(np.zeros(4), zero_mlp()) == pytest.approx(0.5, abs=1e-15)

    def test_out_bias_only(self):
        params = zero_mlp()
        params.out_bias[0] = math.log(3.0)
        assert predict(np.zeros(4), params) == pytest.approx(0.75, abs=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            predict(rng.standard_normal(5), zero_mlp(d=4))

    def test_gradient_through_head(self, rng):
        params = init_mlp(rng, 4, 2)
        e = rng.standard_normal(4)
        y = 1.0

        def loss(values):
            p = MlpParams(
                hidden_weight=values["hw"],
                hidden_bias=values["hb"],
                out_weight=values["ow"],
                out_bias=values["ob"],
            )
            hidden = np.tanh(e @ p.hidden_weight + p.hidden_bias)
            logit_v = hidden @ p.out_weight + p.out_bias[0]
            yhat = sigmoid(logit_v)
            value = -(y * np.log(yhat) + (1 - y) * np.log1p(-yhat))
            dlogit = yhat - y
            dhidden = dlogit * p.out_weight
            dpre = dhidden * (1.0 - hidden**2)
            return float(value), {
                "hw": np.outer(e, dpre),
                "hb": dpre,
                "ow": hidden * dlogit,
                "ob": np.array([dlogit]),
            }

        values = {
            "hw": params.hidden_weight,
            "hb": params.hidden_bias,
            "ow": params.out_weight,
            "ob": params.out_bias,
        }
        assert finite_diff_check(loss, values, epsilon=1e-4) < 1e-6


class TestTotalLoss:
    def test_confident_correct_and_matched_prior(self):
        preds = np.array([1.0 - 1e-9, 1e-9])
        labels = np.array([1.0, 0.0])
        z = np.full(4, 0.1)
        assert total_loss(preds, labels, z, prior=0.1) <= 2 * 1e-5

    def test_single_half_prediction(self):
        loss = total_loss(
            np.array([0.5]), np.array([1.0]), np.full(3, 0.2), prior=0.2
        )
        assert loss == pytest.approx(math.log(2.0), abs=1e-12)

    def test_combined_closed_form(self):
        loss = total_loss(
            np.array([0.5, 0.5]),
            np.array([1.0, 0.0]),
            np.array([0.9]),
            prior=0.1,
            kl_weight=1.0,
        )
        assert loss == pytest.approx(2 * math.log(2.0) + 0.8 * math.log(9.0), abs=1e-9)

    def test_extreme_predictions_clamped(self):
        loss = total_loss(
            np.array([0.0, 1.0]), np.array([1.0, 0.0]), np.array([0.1]), prior=0.1
        )
        assert np.isfinite(loss)

    @given(
        st.lists(st.floats(min_value=0.01, max_value=0.99), min_size=1, max_size=6),
        st.floats(min_value=0.05, max_value=0.95),
    )
    def test_nonnegative(self, preds, s):
        preds = np.array(preds)
        labels = (preds > 0.5).astype(float)
        assert total_loss(preds, labels, np.array([0.4]), prior=s) >= 0.0


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([1, 0, 1], [1, 0, 1])
        assert (m.acc, m.prec, m.sen, m.spec) == (1.0, 1.0, 1.0, 1.0)
        assert m.degenerate == ()

    def test_worked_confusion(self):
        # tp=3 fp=1 tn=4 fn=2
        pred = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0]
        true = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0]
        m = compute_metrics(pred, true)
        assert (m.tp, m.fp, m.tn, m.fn) == (3, 1, 4, 2)
        assert m.acc == pytest.approx(0.7)
        assert m.prec == pytest.approx(0.75)
        assert m.sen == pytest.approx(0.6)
        assert m.spec == pytest.approx(0.8)

    def test_degenerate_precision_flagged(self):
        m = compute_metrics([0, 0, 0], [1, 0, 1])
        assert m.prec == 0.0
        assert "prec" in m.degenerate

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([], [])

    def test_nonbinary_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics([0, 2], [0, 1])

    def test_csv_row_scaled(self):
        m = compute_metrics([1, 1, 0, 0], [1, 0, 1, 0])
        assert m.to_csv_row() == "50.00,50.00,50.00,50.00"

    @given(
        tp=st.integers(min_value=0, max_value=30),
        fp=st.integers(min_value=0, max_value=30),
        tn=st.integers(min_value=0, max_value=30),
        fn=st.integers(min_value=0, max_value=30),
    )
    @settings(max_examples=60)
    def test_accuracy_identity(self, tp, fp, tn, fn):
        if tp + fp + tn + fn == 0:
            return
        pred = [1] * tp + [1] * fp + [0] * tn + [0] * fn
        true = [1] * tp + [0] * fp + [0] * tn + [1] * fn
        m = compute_metrics(pred, true)
        pos = tp + fn
        neg = tn + fp
        if pos and neg:
            assert m.acc == pytest.approx((m.sen * pos + m.spec * neg) / (pos + neg), abs=1e-12)
