"""Acceptance gate: one test and one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

from pvectors.config import FULL, TOY
from pvectors.experiment import TOY_TRAIN, run_experiment
from pvectors.gradsuite import composed_model_check
from pvectors.metrics import eer, eer_bruteforce, min_dcf, min_dcf_bruteforce
from pvectors.model import CLASSIFIER_NAMESPACES, BranchModel, Checkpoint, PVectors, param_count, transfer_weights
from pvectors.sfa import SFA
from pvectors.sfai import EVALUATION_ORDER, DependencyTrace
from pvectors.tensor import Tensor, check_gradients, ops
from pvectors.training import Triangular2Config, am_softmax_loss, triangular2_lr

REPORT: list[str] = []
SEEDS = (1, 2, 3)


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def _op_cases(rng):
    def t(*shape, positive=False):
        data = rng.normal(size=shape)
        return Tensor(np.abs(data) + 0.5 if positive else data, requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    p = t(3, 4, positive=True)
    row = t(1, 4)
    x3 = t(2, 3, 5)
    w1 = t(4, 3, 3)
    bias1 = t(4)
    x4 = t(2, 2, 4, 5)
    w2 = t(1, 2, 3, 3)
    gamma, beta = t(3), t(3)
    ln_g, ln_b = t(5), t(5)
    m = t(4, 2)
    return {
        "add": (lambda: a + row, [a, row]),
        "sub": (lambda: a - b, [a, b]),
        "mul": (lambda: a * row, [a, row]),
        "div": (lambda: a / p, [a, p]),
        "exp": (lambda: ops.exp(a), [a]),
        "log": (lambda: ops.log(p), [p]),
        "sqrt": (lambda: ops.sqrt(p), [p]),
        "square": (lambda: ops.square(a), [a]),
        "sigmoid": (lambda: ops.sigmoid(a), [a]),
        "relu": (lambda: ops.relu(a), [a]),
        "tanh": (lambda: ops.tanh(a), [a]),
        "softmax": (lambda: ops.softmax(x3, 2), [x3]),
        "log_softmax": (lambda: ops.log_softmax(x3, 1), [x3]),
        "sum": (lambda: ops.sum(x3, 1, keepdims=True), [x3]),
        "mean": (lambda: ops.mean(x3, 2), [x3]),
        "max": (lambda: ops.max(x3, 2), [x3]),
        "reshape": (lambda: ops.reshape(x3, (6, 5)), [x3]),
        "permute": (lambda: ops.permute(x3, (2, 0, 1)), [x3]),
        "concat": (lambda: ops.concat([a, b], 1), [a, b]),
        "slice": (lambda: ops.slice_axis(x3, 2, 1, 4), [x3]),
        "split": (lambda: ops.split(x3, 5, 2)[3], [x3]),
        "upsample": (lambda: ops.upsample_nearest(x3, 2), [x3]),
        "matmul": (lambda: ops.matmul(a, m), [a, m]),
        "conv1d": (lambda: ops.conv1d(x3, w1, bias1, stride=2, dilation=1, padding=1), [x3, w1, bias1]),
        "conv1d_dilated": (lambda: ops.conv1d(x3, w1, None, dilation=2, padding=2), [x3, w1]),
        "conv2d": (lambda: ops.conv2d(x4, w2, None, padding=1), [x4, w2]),
        "batchnorm": (
            lambda: ops.batchnorm1d(x3, gamma, beta, np.zeros(3), np.ones(3), True),
            [x3, gamma, beta],
        ),
        "layernorm": (lambda: ops.layernorm(x3, ln_g, ln_b), [x3, ln_g, ln_b]),
    }


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    per_op = {}
    for name, (fn, inputs) in _op_cases(rng).items():
        probe = Tensor(rng.normal(size=fn().shape))
        named = [(f"{name}[{i}]", x) for i, x in enumerate(inputs)]
        results = check_gradients(lambda: ops.sum(fn() * probe), named, h=1e-6, skip_kinks=True)
        per_op[name] = max(r.max_rel_error for r in results)
    composed = composed_model_check(samples=100, seed=0)
    elapsed = time.perf_counter() - start
    worst_op = max(per_op, key=per_op.get)
    ok = per_op[worst_op] <= 1e-6 and composed.max_rel_error <= 1e-3 and composed.checked >= 100 and elapsed < 300
    report(
        1,
        "gradient suite",
        ok,
        f"{len(per_op)} ops, worst {worst_op} {per_op[worst_op]:.2e} (tol 1e-6); composed model "
        f"{composed.checked} params max {composed.max_rel_error:.2e} (tol 1e-3, {composed.skipped} kink draws "
        f"replaced); {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 2-3. coupling structure
# ---------------------------------------------------------------------------


def test_criterion_2_decoupling_identity():
    rng = np.random.default_rng(2)
    model = PVectors(TOY, rng)
    for g in model.gates():
        g.data[...] = -40.0
    model.eval()
    worst = 0.0
    for _ in range(20):
        x = Tensor(rng.normal(size=(1, TOY.n_mels, 2 * int(rng.integers(4, 40)))))
        e_td, e_tr = model.branch_embeddings(x)
        worst = max(worst, np.abs(e_td.data - model.tdnn(x)[1].data).max())
        worst = max(worst, np.abs(e_tr.data - model.trans(x)[1].data).max())
    report(2, "decoupling identity", worst <= 1e-9, f"max |coupled - standalone| = {worst:.2e} over 20 inputs")


def test_criterion_3_dependency_order():
    rng = np.random.default_rng(3)
    model = PVectors(TOY, rng)
    checked = 0
    ok = True
    for training in (True, False):
        model.train(training)
        for _ in range(3):
            trace = DependencyTrace()
            model(Tensor(rng.normal(size=(2, TOY.n_mels, 12))), trace=trace)
            v, inp = trace.values, trace.inputs
            ok &= tuple(trace.order) == EVALUATION_ORDER
            ok &= inp["C_Tr"][0] is v["X''_Td"] and inp["X''_Td"][1] is v["C_Td"]
            ok &= inp["X''_Tr"][1] is v["C_Tr"] and inp["C'_Tr"][0] is v["X'''_Td"]
            ok &= trace.order.index("C_Td") < trace.order.index("X''_Td") < trace.order.index("C_Tr")
            checked += 1
    report(3, "coupled evaluation order", bool(ok), f"{checked} traced forwards follow {' -> '.join(EVALUATION_ORDER)}")


# ---------------------------------------------------------------------------
# 4. metrics
# ---------------------------------------------------------------------------


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    invariant = True
    for i in range(1000):
        n = int(rng.integers(2, 21))
        labels = rng.random(n) < 0.5
        labels[0], labels[1] = True, False
        scores = rng.integers(0, 6, n) / 5.0 if i % 2 else rng.normal(size=n)
        worst = max(worst, abs(eer(scores, labels) - eer_bruteforce(scores, labels)))
        worst = max(worst, abs(min_dcf(scores, labels) - min_dcf_bruteforce(scores, labels)))
        for f in (np.exp, lambda s: 2.5 * s + 1.0):
            invariant &= eer(f(scores), labels) == eer(scores, labels)
            invariant &= min_dcf(f(scores), labels) == min_dcf(scores, labels)
    perfect = (eer([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0]), min_dcf([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0]))
    ok = worst <= 1e-9 and invariant and perfect == (0.0, 0.0)
    report(
        4,
        "metric oracles",
        ok,
        f"max |impl - oracle| = {worst:.1e} on 1000 sets; monotone invariance exact: {invariant}; "
        f"perfect separation -> {perfect[0]}/{perfect[1]}",
    )


# ---------------------------------------------------------------------------
# 5-6. schedule and loss
# ---------------------------------------------------------------------------


def test_criterion_5_triangular2():
    cfg = Triangular2Config(1e-8, 1e-3, 600)
    second_peak = 1e-8 + (1e-3 - 1e-8) / 2
    got = [triangular2_lr(s, cfg) for s in (0, 300, 600, 900)]
    errs = [abs(got[0] - 1e-8), abs(got[1] - 1e-3), abs(got[2] - 1e-8), abs(got[3] - second_peak)]
    report(
        5,
        "triangular2 schedule",
        max(errs) <= 1e-12,
        f"start {got[0]:.3e}, peak {got[1]:.3e}, second peak {got[3]:.7e} (halving rule), max err {max(errs):.1e}",
    )


def test_criterion_6_loss_degenerations():
    rng = np.random.default_rng(6)
    emb, w = rng.normal(size=(8, 5)), rng.normal(size=(5, 4))
    labels = rng.integers(0, 4, size=8)
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    logits = e @ (w / np.linalg.norm(w, axis=0, keepdims=True))
    plain = np.mean(np.log(np.exp(logits).sum(1)) - logits[np.arange(8), labels])
    err_plain = abs(am_softmax_loss(Tensor(emb), labels, Tensor(w), 0.0, 1.0).item() - plain)
    closed = am_softmax_loss(Tensor([[1.0, 0.0]]), [0], Tensor(np.eye(2)), 0.2, 30.0).item()
    err_closed = abs(closed - math.log1p(math.exp(-24.0)))
    report(
        6,
        "loss degenerations",
        err_plain <= 1e-12 and err_closed <= 1e-9,
        f"m=0,s=1 vs cross-entropy {err_plain:.1e} (tol 1e-12); B=1 closed form {err_closed:.1e} (tol 1e-9)",
    )


# ---------------------------------------------------------------------------
# 7 and 10. synthetic end-to-end experiment
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiments():
    start = time.perf_counter()
    results = {seed: run_experiment(seed) for seed in SEEDS}
    return results, time.perf_counter() - start


def test_criterion_7_end_to_end(experiments):
    results, elapsed = experiments
    rows, branches_ok, wins, gates_ok = [], True, 0, True
    for seed, r in results.items():
        td, tr, p = (r.systems[k].eer for k in ("1td", "1tr", "2"))
        branches_ok &= td < 0.15 and tr < 0.15
        wins += p <= min(td, tr)
        gates_ok &= min(r.gate_shift) > 0.01
        rows.append(
            f"seed {seed}: td {100 * td:.2f}% tr {100 * tr:.2f}% p {100 * p:.2f}% "
            f"(raw cosine td {100 * r.systems['1td'].eer_raw:.2f} tr {100 * r.systems['1tr'].eer_raw:.2f} "
            f"p {100 * r.systems['2'].eer_raw:.2f}), min gate shift {min(r.gate_shift):.3f}"
        )
    for row in rows:
        print("    " + row)
        REPORT.append("    " + row)
    ok = branches_ok and wins >= 2 and gates_ok and elapsed < 1800
    report(
        7,
        "synthetic end-to-end",
        ok,
        f"(a) branches < 15%: {branches_ok}; (b) coupled <= best branch on {wins}/3 seeds; "
        f"(c) gates moved > 0.01: {gates_ok}; {elapsed:.0f}s",
    )


def test_pipeline_halves_training_loss(experiments):
    results, _ = experiments
    for r in results.values():
        first = r.losses["1td"][0]
        assert r.losses["2"][-1] <= 0.5 * first


def _metric_bytes(result) -> bytes:
    lines = [
        f"{name}\tEER\t{100 * s.eer:.4f}\tminDCF\t{s.min_dcf:.4f}\t{s.eer!r}\t{s.min_dcf!r}\n"
        for name, s in sorted(result.systems.items())
    ]
    return "".join(lines).encode()


def test_criterion_10_determinism(experiments):
    results, _ = experiments
    again = run_experiment(SEEDS[0])
    same_metrics = _metric_bytes(again) == _metric_bytes(results[SEEDS[0]])
    same_weights = all(
        again.checkpoints["2"].tensors[n].tobytes() == t.tobytes()
        for n, t in results[SEEDS[0]].checkpoints["2"].tensors.items()
    )
    report(
        10,
        "determinism",
        same_metrics and same_weights,
        f"seed {SEEDS[0]} re-run: metric bytes identical {same_metrics}, stage-2 weights identical {same_weights}",
    )


# ---------------------------------------------------------------------------
# 8-9. SFA and transfer
# ---------------------------------------------------------------------------


def test_criterion_8_sfa_properties():
    rng = np.random.default_rng(8)
    sfa = SFA(TOY.n_mels, TOY.sfa_factor, rng)
    worst = 0.0
    for frames in (1, 7, 298):
        x = rng.normal(size=(2, TOY.n_mels, frames))
        perm = rng.permutation(frames)
        _, a = sfa(Tensor(x), return_attention=True)
        _, b = sfa(Tensor(x[:, :, perm]), return_attention=True)
        worst = max(worst, np.abs(a.data - b.data).max())
    shapes = [sfa(Tensor(rng.normal(size=(2, TOY.n_mels, t)))).shape for t in (1, 7, 298)]
    shapes_ok = shapes == [(2, TOY.n_mels, t) for t in (1, 7, 298)]
    sfa.map_conv.weight.data[...] = 0.0
    sfa.map_conv.bias.data[...] = 0.0
    _, half = sfa(Tensor(rng.normal(size=(2, TOY.n_mels, 9))), return_attention=True)
    half_ok = bool((half.data == 0.5).all())
    report(
        8,
        "SFA properties",
        worst <= 1e-12 and shapes_ok and half_ok,
        f"permutation invariance {worst:.1e} (tol 1e-12); zero map conv gate == 0.5: {half_ok}; "
        f"shapes preserved for T in (1, 7, 298): {shapes_ok}",
    )


def test_criterion_9_transfer_fidelity():
    rng = np.random.default_rng(9)
    ckpts = {}
    for branch in ("td", "tr"):
        model = BranchModel(branch, TOY, 7, rng)
        for p in model.parameters():
            p.data[...] = rng.normal(size=p.shape)
        meta = {"stage": "1" + branch, "config": TOY.to_dict(), "n_classes": 7}
        ckpts[branch] = Checkpoint(model.state_dict(), meta)
    out = transfer_weights(ckpts["td"], ckpts["tr"])
    copied = 0
    exact = True
    for name, arr in out.tensors.items():
        source = {"tdnn": ckpts["td"].tensors, "trans": ckpts["tr"].tensors}.get(name.split(".")[0])
        if source is not None:
            exact &= arr.tobytes() == source[name].tobytes()
            copied += 1
    expected = sum(1 for c in ckpts.values() for n in c.tensors if n.split(".")[0] not in CLASSIFIER_NAMESPACES)
    dropped = not any(n.split(".")[0] in CLASSIFIER_NAMESPACES for n in out.tensors)
    full = param_count(FULL)
    ok = exact and copied == expected and dropped and 14_000_000 <= full <= 16_000_000
    report(
        9,
        "transfer fidelity",
        ok,
        f"{copied}/{expected} branch tensors bit-exact: {exact}; heads dropped: {dropped}; full preset {full:,} params",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-s", "-q"]))
