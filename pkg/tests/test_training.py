import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvectors.config import TOY
from pvectors.errors import ConfigError, DivergenceError
from pvectors.model import namespace
from pvectors.tensor import Tensor, check_gradients
from pvectors.training import (
    Adam,
    Dataset,
    SynthSpec,
    TrainConfig,
    Triangular2Config,
    adam_step,
    am_softmax_loss,
    gen_synth,
    speaker_templates,
    template_cosines,
    train_stage1,
    train_stage2,
    triangular2_lr,
)
from pvectors.tensor import Parameter


def cosine_ce_oracle(emb, w, labels):
    """Plain softmax cross-entropy over cosine logits, straight numpy."""
    e = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    c = w / np.linalg.norm(w, axis=0, keepdims=True)
    logits = e @ c
    lse = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(labels)), labels]))


class TestAmSoftmax:
    def test_margin_free_equals_cross_entropy(self):
        rng = np.random.default_rng(0)
        emb, w = rng.normal(size=(6, 4)), rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, size=6)
        loss = am_softmax_loss(Tensor(emb), labels, Tensor(w), margin=0.0, scale=1.0).item()
        assert abs(loss - cosine_ce_oracle(emb, w, labels)) <= 1e-12

    def test_single_class_is_zero(self):
        loss = am_softmax_loss(Tensor(np.ones((3, 2))), [0, 0, 0], Tensor(np.ones((2, 1))))
        assert loss.item() == 0.0

    def test_closed_form_two_classes(self):
        loss = am_softmax_loss(Tensor([[2.0, 0.0]]), [0], Tensor(np.eye(2)), margin=0.2, scale=30.0).item()
        assert abs(loss - math.log1p(math.exp(-24.0))) <= 1e-9

    @pytest.mark.parametrize("labels", [[2], [-1]])
    def test_label_out_of_range(self, labels):
        with pytest.raises(ValueError):
            am_softmax_loss(Tensor(np.ones((1, 2))), labels, Tensor(np.eye(2)))

    @settings(max_examples=30, deadline=None)
    @given(c1=st.floats(-0.9, 0.9), c2=st.floats(-0.9, 0.9))
    def test_nonincreasing_in_target_cosine(self, c1, c2):
        # Class 0 along x, class 1 along y; the y-component (non-target cosine) stays 0.3.
        w = Tensor(np.eye(3)[:, :2])

        def loss(c):
            return am_softmax_loss(Tensor([[c, 0.3, math.sqrt(1 - c * c - 0.09)]]), [0], w).item()

        lo, hi = sorted((c1, c2))
        assert loss(hi) <= loss(lo) + 1e-12

    def test_gradients(self):
        rng = np.random.default_rng(1)
        emb = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        labels = rng.integers(0, 5, size=4)
        f = lambda: am_softmax_loss(emb, labels, w, 0.2, 5.0)  # noqa: E731
        for res in check_gradients(f, [("emb", emb), ("w", w)], h=1e-6):
            assert res.max_rel_error <= 1e-6, res


class TestTriangular2:
    cfg = Triangular2Config(1e-8, 1e-3, 600)

    def test_cycle_start(self):
        assert triangular2_lr(0, self.cfg) == 1e-8

    def test_first_peak(self):
        assert abs(triangular2_lr(300, self.cfg) - 1e-3) <= 1e-12

    def test_second_peak_halved(self):
        assert abs(triangular2_lr(900, self.cfg) - (1e-8 + (1e-3 - 1e-8) / 2)) <= 1e-12

    def test_cycle_ends_at_minimum(self):
        for step in (600, 1200, 1800):
            assert abs(triangular2_lr(step, self.cfg) - 1e-8) <= 1e-18

    @settings(max_examples=50)
    @given(cycle=st.integers(0, 8), half=st.integers(1, 50))
    def test_peak_halving_exact(self, cycle, half):
        cfg = Triangular2Config(1e-8, 1e-3, 2 * half)

        def peak(c):
            return triangular2_lr(c * cfg.cycle_steps + half, cfg) - cfg.lr_min

        assert math.isclose(peak(cycle + 1), peak(cycle) / 2, rel_tol=1e-12)

    @settings(max_examples=50)
    @given(step=st.integers(0, 5000))
    def test_piecewise_linear_and_continuous(self, step):
        cfg = Triangular2Config(1e-8, 1e-3, 20)
        a, b, c = (triangular2_lr(step + i, cfg) for i in range(3))
        assert abs(b - a) <= (cfg.lr_max - cfg.lr_min) / 10 + 1e-18
        if step % 10 not in (9,):
            # Inside one linear piece the second difference vanishes.
            assert abs((c - b) - (b - a)) <= 1e-15

    def test_rejects_odd_cycle(self):
        with pytest.raises(ConfigError):
            Triangular2Config(cycle_steps=7)

    def test_rejects_negative_step(self):
        with pytest.raises(ValueError):
            triangular2_lr(-1)


class TestAdam:
    def test_first_step_is_lr(self):
        p, m, v = np.array([0.0]), np.zeros(1), np.zeros(1)
        adam_step(p, np.array([1.0]), m, v, 1, lr=0.01)
        assert abs(p[0] + 0.01) <= 1e-9

    def test_zero_grad_decays_moments(self):
        p, m, v = np.array([1.0]), np.array([0.5]), np.array([0.25])
        adam_step(p, np.zeros(1), m, v, 2, lr=0.0)
        assert p[0] == 1.0
        assert m[0] == pytest.approx(0.45) and v[0] == pytest.approx(0.25 * 0.999)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(2)
        grads = rng.normal(size=20)
        p = Parameter(np.array([0.3]))
        opt = Adam([("p", p)])
        ref, m, v = 0.3, 0.0, 0.0
        for t, g in enumerate(grads, 1):
            p.grad = np.array([g])
            opt.step(1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 1e-2 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(p.data[0] - ref) <= 1e-12

    def test_state_round_trip(self):
        p = Parameter(np.ones(3))
        opt = Adam([("p", p)])
        p.grad = np.ones(3)
        opt.step(0.1)
        other = Adam([("p", Parameter(np.ones(3)))])
        other.load_state(opt.state())
        assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"])


class TestSynth:
    def test_noise_free_utterances_identical(self):
        data = gen_synth(SynthSpec(speakers=3, utterances=4, noise=0.0), 5)
        for s in range(3):
            utts = [f for f, y in data if y == s]
            assert all(np.array_equal(u, utts[0]) for u in utts)

    def test_seed_reproducible(self):
        a = gen_synth(SynthSpec(speakers=3, utterances=2), 9)
        b = gen_synth(SynthSpec(speakers=3, utterances=2), 9)
        assert all(np.array_equal(x, y) for x, y in zip(a.feats, b.feats))

    def test_templates_pairwise_distinct(self):
        t = speaker_templates(SynthSpec(), np.random.default_rng(0))
        flat = t.reshape(len(t), -1)
        gaps = np.linalg.norm(flat[:, None] - flat[None], axis=2)
        assert (gaps + np.eye(len(t)) > 1e-3).all()

    def test_within_speaker_more_similar(self):
        within, across = template_cosines(gen_synth(SynthSpec(speakers=20, noise=0.3), 1))
        assert within > across

    def test_needs_two_speakers(self):
        with pytest.raises(ConfigError):
            SynthSpec(speakers=1)


SMALL = TrainConfig(epochs_stage1=3, epochs_stage2=2, batch=8, crop=16, cycle_epochs=2, lr_max=3e-3)


@pytest.fixture(scope="module")
def small_data():
    return gen_synth(SynthSpec(speakers=4, utterances=8, frames=32, noise=0.3), 0)


@pytest.fixture(scope="module")
def stage1_pair(small_data):
    td = train_stage1("td", small_data, TOY, SMALL)
    tr = train_stage1("tr", small_data, TOY, SMALL)
    return td, tr


def test_stage1_loss_drops_within_first_epoch(small_data):
    _, losses = train_stage1("td", small_data, TOY, SMALL.with_(epochs_stage1=1))
    assert losses[-1] < losses[0]


def test_stage1_checkpoint_namespaces(stage1_pair):
    (td, _), (tr, _) = stage1_pair
    assert {namespace(n) for n in td.tensors} == {"tdnn", "head_td"}
    assert {namespace(n) for n in tr.tensors} == {"trans", "head_tr"}
    assert td.meta["stage"] == "1td" and td.meta["step"] == 12


def test_seeds_change_losses(small_data, stage1_pair):
    (_, losses), _ = stage1_pair
    _, other = train_stage1("td", small_data, TOY, SMALL.with_(seed=1))
    assert other[-1] != losses[-1]


def test_training_is_deterministic(small_data, stage1_pair):
    (ckpt, losses), _ = stage1_pair
    again, losses2 = train_stage1("td", small_data, TOY, SMALL)
    assert losses == losses2
    assert all(np.array_equal(ckpt.tensors[n], again.tensors[n]) for n in ckpt.tensors)


def test_log_lines(small_data):
    lines = []
    train_stage1("td", small_data, TOY, SMALL.with_(epochs_stage1=1), lines.append)
    step, stage, lr, loss = lines[0].split("\t")
    assert (step, stage, float(lr)) == ("0", "1td", 1e-8)
    assert math.isfinite(float(loss)) and len(lines) == 4


def test_divergence_aborts(small_data):
    bad = Dataset([np.full_like(f, np.nan) for f in small_data.feats], small_data.labels, small_data.ids)
    with pytest.raises(DivergenceError, match="step 0"):
        train_stage1("td", bad, TOY, SMALL)


def test_stage2_adds_bridges_and_moves_gates(small_data, stage1_pair):
    (td, _), (tr, _) = stage1_pair
    ckpt, losses = train_stage2(td, tr, small_data, SMALL)
    names = {namespace(n) for n in ckpt.tensors}
    assert {"fsb1a", "fsb1b", "fsb2a", "fsb2b", "eal", "head", "tdnn", "trans"} == names
    for key in ("fsb1a.gate", "fsb2b.gate"):
        assert np.linalg.norm(ckpt.tensors[key] - TOY.gate_init) > 0
    assert math.isfinite(losses[0])


def test_stage2_needs_stage1_inputs(small_data, stage1_pair):
    (td, _), _ = stage1_pair
    with pytest.raises(ConfigError):
        train_stage2(td, td, small_data, SMALL)


def test_empty_data_rejected():
    with pytest.raises(ValueError):
        train_stage1("td", Dataset([], np.zeros(0, dtype=np.int64), []), TOY, SMALL)
