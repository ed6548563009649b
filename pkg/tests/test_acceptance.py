"""Acceptance criteria 1-8, each at its stated tolerance and time budget.

Every criterion records a PASS/FAIL line; the lines are printed together in
the pytest terminal summary (see conftest.py). Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import contextlib
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from drunet.autodiff import Tensor, float64_mode
from drunet.data import (
    NormalizationStats,
    normalize_stack,
    normalize_volume,
    read_raw_volume,
    read_subject,
    read_subject_slices,
    reconstruct_volume,
    slices_to_stack,
    volume_to_slices,
    write_raw_volume,
    write_slice,
    write_subject,
)
from drunet.metrics import dice, hausdorff95, region_masks
from drunet.model import build_drunet104, conv_ledger, count_conv_layers, parameter_count
from drunet.ops import INFER, ConvParams, conv2d
from drunet.synthetic import synthetic_slices, synthetic_subject
from drunet.training import (
    SliceDataset,
    TrainConfig,
    labels_to_contiguous,
    labels_to_external,
    predict_classes,
    sparse_ce_loss,
    train,
)

import test_gradients as grads
from oracles import brute_force_hd95, literal_cross_entropy, naive_conv2d

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(number, title, budget_s):
    """Time the body, enforce the budget and record one summary line."""
    start = time.perf_counter()
    notes = []
    try:
        yield notes
        elapsed = time.perf_counter() - start
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        RESULTS.append(f"FAIL  criterion {number}: {title} ({elapsed:.1f}s) {type(exc).__name__}: {exc}")
        raise
    detail = f"; {'; '.join(notes)}" if notes else ""
    RESULTS.append(f"PASS  criterion {number}: {title} ({elapsed:.1f}s of {budget_s}s{detail})")


def test_criterion_1_architecture_ledger():
    with criterion(1, "architecture ledger", 1.0) as notes:
        model = build_drunet104()
        ledger = conv_ledger(model)
        assert count_conv_layers(model) == 104
        assert ledger["encoder"] + ledger["bridge"] == 93
        assert ledger["decoder"] == 10 and ledger["head"] == 1
        assert len(model.dropout_sites) == 10
        assert len(model.skips) == 5
        assert tuple(len(level) for level in model.encoder) == (2, 3, 3, 5, 14)
        assert len(model.bridge) == 4
        trace = [level[-1].out_ch for level in model.encoder] + [model.bridge[-1].out_ch]
        assert trace == [64, 128, 256, 512, 1024, 2048]
        notes.append(f"{parameter_count(model):,} params")


def test_criterion_2_shape_propagation():
    with criterion(2, "shape propagation at 240x240", 30.0) as notes:
        model = build_drunet104()
        trace = []
        x = Tensor(np.random.default_rng(0).random((1, 4, 240, 240)))
        out = model.forward(x, INFER, trace=trace)
        assert out.shape == (1, 4, 240, 240)
        shapes = dict(trace)
        spatial = [shapes[f"enc{l}"][2] for l in range(1, 6)] + [shapes["bridge"][2]]
        assert spatial == [240, 120, 60, 30, 15, 8]
        for level in range(1, 6):
            up, skip = shapes[f"up{level}"], shapes[f"enc{level}"]
            assert up[0] == skip[0] and up[2:] == skip[2:], (level, up, skip)
            assert shapes[f"dec{level}"][2:] == skip[2:]
        notes.append("trace " + "/".join(map(str, spatial)))


def test_criterion_3_gradient_suite():
    with criterion(3, "finite-difference gradient suite", 120.0) as notes:
        for precision in ("float32", "float64"):
            for k, stride in [(3, 1), (1, 2), (3, 2)]:
                grads.test_conv2d_gradients(precision, k, stride)
            grads.test_conv2d_transpose_gradients(precision, (6, 6))
            grads.test_batch_norm_train_gradients(precision)
            grads.test_relu_gradients(precision)
            grads.test_dropout_fixed_mask_gradients(precision)
            grads.test_concat_gradients(precision)
            grads.test_add_gradients(precision)
            grads.test_softmax_gradients(precision)
            grads.test_cross_entropy_gradients(precision)
        notes.append("tol 1e-2 (32-bit), 1e-5 (64-bit)")


def test_criterion_4_oracle_equivalence():
    with criterion(4, "oracle equivalence (conv, loss, HD95)", 120.0) as notes:
        rng = np.random.default_rng(4)
        worst = 0.0
        for k, stride, shape in [(3, 1, (2, 3, 7, 6)), (1, 2, (1, 4, 7, 7)), (3, 2, (2, 2, 8, 5)), (2, 1, (1, 2, 5, 5))]:
            x = rng.standard_normal(shape)
            w = rng.standard_normal((3, shape[1], k, k))
            b = rng.standard_normal(3)
            with float64_mode():
                got = conv2d(Tensor(x), ConvParams(Tensor(w), Tensor(b), stride=stride)).numpy()
            ref = naive_conv2d(x, w, b, stride)
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-5)
            worst = max(worst, float(np.abs(got - ref).max()))

        for seed in range(3):
            r = np.random.default_rng(seed)
            logits = r.normal(0, 2, (2, 4, 3, 3))
            labels = r.integers(0, 4, (2, 3, 3))
            with float64_mode():
                loss = sparse_ce_loss(Tensor(logits), labels).item()
            assert abs(loss - literal_cross_entropy(logits, labels)) < 1e-6

        from scipy import ndimage

        for seed in range(4):
            r = np.random.default_rng(100 + seed)
            shape = tuple(int(s) for s in r.integers(8, 17, 3))
            p = ndimage.binary_opening(r.random(shape) < 0.55)
            t = ndimage.binary_opening(r.random(shape) < 0.55)
            assert hausdorff95(p, t) == brute_force_hd95(p, t)
        notes.append(f"max conv deviation {worst:.1e}")


def region_dsc(pred_classes, truth_classes):
    """Mean over slices of the mean WT/TC/ET Dice of each slice."""
    pred = labels_to_external(pred_classes)
    truth = labels_to_external(truth_classes)
    per_slice = []
    for p, t in zip(pred, truth):
        pm, tm = region_masks(p), region_masks(t)
        per_slice.append(np.mean([dice(pm[r], tm[r]) for r in ("wt", "tc", "et")]))
    return float(np.mean(per_slice))


def test_criterion_5_overfit_smoke():
    with criterion(5, "overfit smoke test (width/4, 10 slices, 300 epochs)", 900.0) as notes:
        images, labels = synthetic_slices(10, 64, seed=0)
        data = SliceDataset(images, labels_to_contiguous(labels))
        model = build_drunet104(width_divisor=4, dropout_rate=0.2, seed=0)
        config = TrainConfig(batch_size=2, epochs=300, learning_rate=1e-4, dropout_rate=0.2, seed=0)
        scores = {}

        def watch(epoch, loss):
            if epoch % 25 == 0:
                scores[epoch] = region_dsc(predict_classes(model, data.images), data.labels)

        with threadpool_limits(limits=1):
            history = train(model, data, config, on_epoch=watch).history
        first10 = history[:10]
        assert all(b < a for a, b in zip(first10, first10[1:])), first10
        reached = [e for e, s in sorted(scores.items()) if s >= 0.95]
        assert reached, f"best DSC {max(scores.values()):.4f}"
        notes.append(f"DSC {scores[300]:.4f} at 300, first >= 0.95 at epoch {reached[0]}")
        notes.append(f"loss {history[0]:.3f} -> {history[-1]:.4f}")


def test_criterion_6_standardisation_properties():
    with criterion(6, "intensity standardisation properties", 5.0) as notes:
        rng = np.random.default_rng(6)
        for _ in range(20):
            mean, sd = rng.uniform(20, 500), rng.uniform(0.5, 80)
            stats = NormalizationStats(mean, sd)
            values = rng.uniform(1e-3, mean + 6 * sd, 100_000)
            out = normalize_volume(values.reshape(1, 1, -1), stats).ravel()
            assert out.dtype == np.uint8 and out.min() >= 0 and out.max() <= 254
            order = np.argsort(values, kind="stable")
            assert np.all(np.diff(out[order].astype(int)) >= 0)
            assert normalize_volume(np.array([[[mean]]]), stats).item() == 127
            hi, lo = mean + 3 * sd, mean - 3 * sd
            probe = np.array([hi, hi * (1 + 1e-6) + 1e-6, hi + sd, lo, lo - 1e-6 * abs(lo) - 1e-6])
            got = normalize_volume(probe.reshape(1, 1, -1), stats).ravel().astype(int)
            assert got[0] >= 253 and got[1] == 254 and got[2] == 254
            if lo > 0:
                assert got[3] <= 1 and got[4] == 0
        assert normalize_volume(np.zeros((1, 1, 3)), NormalizationStats(10.0, 2.0)).max() == 0
        notes.append("20 random (mean, SD) pairs x 1e5 values")


def test_criterion_7_pipeline_inverses(tmp_path):
    with criterion(7, "pipeline round trips on 5 synthetic subjects", 30.0) as notes:
        for k in range(5):
            shape = (12 + 3 * k, 48 + 8 * k, 40 + 8 * k)
            stack = synthetic_subject(shape, seed=k, subject_id=f"subj{k}")
            vol, _ = normalize_stack(stack)

            samples = volume_to_slices(stack)
            back, labels = slices_to_stack(samples)
            np.testing.assert_array_equal(back, vol)
            np.testing.assert_array_equal(labels, stack.labels)
            np.testing.assert_array_equal(reconstruct_volume([(s.slice_index, s.label) for s in samples]), stack.labels)

            for s in samples:
                write_slice(s, tmp_path / "png")
            read_back = read_subject_slices(tmp_path / "png" / stack.subject_id)
            back, labels = slices_to_stack(read_back)
            np.testing.assert_array_equal(back, vol)
            np.testing.assert_array_equal(labels, stack.labels)

            write_subject(stack, tmp_path / "raw")
            again = read_subject(tmp_path / "raw", stack.subject_id)
            for m, v in stack.modalities.items():
                np.testing.assert_array_equal(again.modalities[m], v)
            np.testing.assert_array_equal(again.labels, stack.labels)
            write_raw_volume(tmp_path / "lab.raw", reconstruct_volume(list(enumerate(labels))), "seg")
            np.testing.assert_array_equal(read_raw_volume(tmp_path / "lab.raw")[0], stack.labels)
        notes.append("slices, PNG and raw formats bit-exact")


def test_criterion_8_dropout_ablation_plumbing():
    with criterion(8, "dropout ablation models share structure", 5.0) as notes:
        full = {rate: build_drunet104(dropout_rate=rate) for rate in (0.0, 0.2, 0.5)}
        base = full[0.2]
        layout = [(c.name, c.role, c.weight_shape) for c in base.convs()]
        for rate, model in full.items():
            assert model.dropout_rate == rate
            assert parameter_count(model) == parameter_count(base)
            assert conv_ledger(model) == conv_ledger(base)
            assert count_conv_layers(model) == 104
            assert [(c.name, c.role, c.weight_shape) for c in model.convs()] == layout
            assert model.dropout_sites == base.dropout_sites
        small = {rate: build_drunet104(dropout_rate=rate, width_divisor=8, seed=5).state_dict() for rate in (0.0, 0.2, 0.5)}
        for name, value in small[0.2].items():
            for rate in (0.0, 0.5):
                np.testing.assert_array_equal(small[rate][name], value)
        notes.append(f"{parameter_count(base):,} params each")


@pytest.fixture(autouse=True, scope="module")
def _summary_header():
    RESULTS.clear()
    yield
