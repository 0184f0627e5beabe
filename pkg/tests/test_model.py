import numpy as np
import pytest

from param_oracle import bridges, eal, tdnn, total, transformer
from pvectors.config import FULL, TOY, ModelConfig
from pvectors.errors import ConfigError, FormatError, TransferError
from pvectors.model import (
    EAL,
    CLASSIFIER_NAMESPACES,
    BranchModel,
    Checkpoint,
    PVectors,
    count_by_namespace,
    load_checkpoint,
    model_from_checkpoint,
    param_count,
    save_checkpoint,
    transfer_weights,
)
from pvectors.tensor import Linear, Tape, Tensor, backward, ops


@pytest.fixture
def rng():
    return np.random.default_rng(41)


def stage1(branch, seed=0, n_classes=5):
    model = BranchModel(branch, TOY, n_classes, np.random.default_rng(seed))
    meta = {"stage": "1" + branch, "config": TOY.to_dict(), "n_classes": n_classes}
    return model, Checkpoint(model.state_dict(), meta)


def test_eal_selects_first_embedding(rng):
    eal_layer = EAL(3, rng)
    eal_layer.fc.weight.data[...] = np.vstack([np.eye(3), np.zeros((3, 3))])
    eal_layer.fc.bias.data[...] = 0.0
    eal_layer.eval()
    e_td, e_tr = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = eal_layer(Tensor(e_td), Tensor(e_tr)).data
    # Eval-mode BN with unit running variance still divides by sqrt(1 + eps).
    np.testing.assert_allclose(out, e_td / np.sqrt(1.0 + 1e-5), atol=1e-12)


def test_both_branches_receive_gradient(rng):
    model = PVectors(TOY, rng)
    with Tape():
        loss = ops.sum(ops.square(model(Tensor(rng.normal(size=(4, TOY.n_mels, 8))))))
    backward(loss)
    for prefix in ("tdnn.", "trans."):
        total_norm = sum(np.abs(p.grad).sum() for n, p in model.named_parameters() if n.startswith(prefix))
        assert total_norm > 0


def test_eval_is_deterministic(rng):
    model = PVectors(TOY, rng)
    model.eval()
    x = Tensor(rng.normal(size=(2, TOY.n_mels, 8)))
    np.testing.assert_array_equal(model(x).data, model(x).data)


def test_toy_count_matches_hand_count():
    counts = count_by_namespace(PVectors(TOY, np.random.default_rng(0)))
    assert counts["tdnn"] == tdnn(TOY)
    assert counts["trans"] == transformer(TOY)
    assert sum(counts[k] for k in ("fsb1a", "fsb1b", "fsb2a", "fsb2b")) == bridges(TOY)
    assert counts["eal"] == eal(TOY)
    assert param_count(TOY) == total(TOY)


def test_full_count_in_band():
    n = total(FULL)
    assert 14_000_000 <= n <= 16_000_000
    assert param_count(FULL) == n


def test_linear_count():
    assert Linear(4, 3, np.random.default_rng(0)).num_parameters() == 15


def test_checkpoint_bytes_round_trip(tmp_path, rng):
    model = PVectors(TOY, rng)
    ckpt = Checkpoint(model.state_dict(), {"stage": "2", "config": TOY.to_dict()}, {"t": np.array(3.0)})
    a, b = tmp_path / "a.ck", tmp_path / "b.ck"
    save_checkpoint(a, ckpt)
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("mangle", ["magic", "truncate", "trailing", "version"])
def test_checkpoint_corruption(tmp_path, mangle):
    path = tmp_path / "c.ck"
    save_checkpoint(path, Checkpoint({"w": np.ones(3)}, {"stage": "2"}))
    blob = path.read_bytes()
    blob = {
        "magic": b"XXXX" + blob[4:],
        "truncate": blob[:-5],
        "trailing": blob + b"\0",
        "version": blob[:4] + (9).to_bytes(4, "little") + blob[8:],
    }[mangle]
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_model_rebuilt_from_checkpoint(rng):
    model, ckpt = stage1("td")
    rebuilt = model_from_checkpoint(ckpt)
    x = Tensor(rng.normal(size=(1, TOY.n_mels, 8)))
    model.eval()
    np.testing.assert_array_equal(rebuilt(x).data, model(x).data)


def test_transfer_is_bit_exact_and_drops_heads():
    _, td = stage1("td", 1)
    _, tr = stage1("tr", 2)
    out = transfer_weights(td, tr)
    for name, arr in out.tensors.items():
        source = {"tdnn": td.tensors, "trans": tr.tensors}.get(name.split(".")[0])
        if source is not None:
            assert arr.tobytes() == source[name].tobytes(), name
    assert not any(n.split(".")[0] in CLASSIFIER_NAMESPACES for n in out.tensors)
    assert {n.split(".")[0] for n in out.tensors} >= {"fsb1a", "fsb2b", "eal"}
    assert not any(n.startswith(("fsb", "eal")) for n in td.tensors)


def test_transfer_reports_missing_tensors():
    _, td = stage1("td")
    _, tr = stage1("tr")
    del td.tensors["tdnn.agg.weight"]
    with pytest.raises(TransferError) as info:
        transfer_weights(td, tr)
    assert info.value.missing == ["tdnn.agg.weight"]


def test_transfer_rejects_config_mismatch():
    _, td = stage1("td")
    _, tr = stage1("tr")
    tr.meta["config"] = TOY.with_(dropout=0.2).to_dict()
    with pytest.raises(ConfigError):
        transfer_weights(td, tr)


def test_decoupled_transfer_reproduces_stage1_embedding(rng):
    td_model, td = stage1("td", 3)
    _, tr = stage1("tr", 4)
    coupled = model_from_checkpoint(transfer_weights(td, tr))
    for g in coupled.gates():
        g.data[...] = -40.0
    coupled.eval()
    td_model.eval()
    x = Tensor(rng.normal(size=(2, TOY.n_mels, 8)))
    e_td, _ = coupled.branch_embeddings(x)
    assert np.abs(e_td.data - td_model(x).data).max() <= 1e-9


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"channels": 3})
